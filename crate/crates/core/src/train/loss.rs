//! Denoising score matching against the closed-form conditional score.

use rand::Rng;

use crate::autodiff::Tape;
use crate::diffusion::{sample_xt, true_conditional_score, DegradationOp, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::{score_net, Conditioning};
use crate::par;
use crate::tensor::Tensor;

/// A high-resolution patch with its low-resolution condition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    /// `1 × H × W × 3`.
    pub hr: Tensor,
    /// `1 × h × w × 3`.
    pub lr: Tensor,
}

/// One fully drawn loss term: time, noisy state and regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct LossItem {
    pub x_lr: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub target: Tensor,
}

impl LossItem {
    /// Draw `t ~ U(t_floor, T]` and `x_t ~ p_t(· | x0)`.
    pub fn draw<R: Rng + ?Sized>(pair: &TrainPair, schedule: &DiffusionSchedule, rng: &mut R) -> Result<Self> {
        let (_, hh, ww, _) = pair.hr.dims4()?;
        let (_, h, w, _) = pair.lr.dims4()?;
        let op = DegradationOp::between(h, w, hh, ww)?;
        let lo = schedule.t_floor();
        // random() is in [0, 1), so T − u(T − lo) lies in (lo, T]
        let t = schedule.horizon - rng.random::<f64>() * (schedule.horizon - lo);
        let x_t = sample_xt(&pair.hr, t, schedule, &op, rng)?;
        let target = true_conditional_score(&x_t, &pair.hr, t, schedule, &op)?;
        Ok(LossItem {
            x_lr: pair.lr.clone(),
            t,
            x_t,
            target,
        })
    }
}

/// Mean squared score error of one item, with the flat network gradient when asked.
pub fn item_loss(model: &ModelParams, item: &LossItem, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let (_, hh, ww, _) = item.x_t.dims4()?;
    let mut tape = if with_grad { Tape::new() } else { Tape::no_grad() };
    let net = model.net.bind(&mut tape, model.config.learnable_alpha);
    let cond = Conditioning::record(&mut tape, &item.x_lr, hh, ww, model.schedule)?;
    let x = tape.constant(item.x_t.clone());
    let t = tape.constant(Tensor::scalar(item.t));
    let s = score_net(&mut tape, &model.config, &net, x, t, &cond)?;
    let target = tape.constant(item.target.clone());
    let loss = tape.mse(s, target)?;
    let value = tape.value(loss).data()[0];
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, net.flat_grad(&grads, &model.net)))
}

/// Batch mean of [`item_loss`] and its gradient. Items run in parallel;
/// the reduction is in item order so the result does not depend on the
/// thread count.
pub fn batch_loss(model: &ModelParams, items: &[LossItem], with_grad: bool) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts = par::map_slice(items, |it| item_loss(model, it, with_grad));
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut grad = if with_grad { vec![0.0; model.net.num_scalars()] } else { Vec::new() };
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad))
}

/// The score-matching loss of a batch of pairs under fresh draws from `rng`.
pub fn score_loss<R: Rng + ?Sized>(model: &ModelParams, batch: &[TrainPair], rng: &mut R) -> Result<f64> {
    let items = batch
        .iter()
        .map(|p| LossItem::draw(p, &model.schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_loss(model, &items, false)?.0)
}
