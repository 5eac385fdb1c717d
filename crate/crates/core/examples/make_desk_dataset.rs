//! Regenerate the bundled desk patches: `cargo run --example make_desk_dataset -- [DIR]`.

use std::path::PathBuf;

use wfno_core::dataset::desk_patch;
use wfno_core::tensor::save_image;

const COUNT: u64 = 32;
const SIZE: usize = 32;

fn main() -> wfno_core::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/desk"));
    std::fs::create_dir_all(&dir).map_err(|e| wfno_core::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for seed in 0..COUNT {
        save_image(&desk_patch(seed, SIZE)?, dir.join(format!("desk_{seed:02}.png")))?;
    }
    println!("wrote {COUNT} patches to {}", dir.display());
    Ok(())
}
