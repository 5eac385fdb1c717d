//! Score-matching training: loss, optimizer, schedule, loop and gradient checks.

pub mod gradcheck;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use loss::{batch_loss, item_loss, score_loss, LossItem, TrainPair};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use schedule::LrSchedule;
pub use trainer::{draw_pair, train, TrainConfig, TrainPaths, TrainReport, TrainState, LOSS_CSV_HEADER};
