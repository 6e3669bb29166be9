//! Super-resolves a pair at several non-integer scales.
//!
//! cargo run --release --example super_resolve -- [checkpoint]
//!
//! Without a checkpoint a fresh model is used, which reproduces bilinear
//! upsampling exactly.

use stereoinr::checkpoint::load_checkpoint;
use stereoinr::imaging::{bilinear_upsample, save_png, Image, StereoPair};
use stereoinr::model::{Model, ModelConfig};

fn main() -> stereoinr::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?.model,
        None => Model::new(ModelConfig::compact(), 0)?,
    };
    let tex = |y: usize, x: f64, c: usize| 0.5 + 0.3 * (0.4 * x + c as f64).sin() * (0.25 * y as f64).cos();
    let right = Image::from_fn(24, 32, |y, x, c| tex(y, x as f64, c));
    let left = Image::from_fn(24, 32, |y, x, c| tex(y, x as f64 - 3.0, c));
    let pair = StereoPair::new(left, right)?;

    let out_dir = std::env::temp_dir().join("stereoinr_sr_example");
    std::fs::create_dir_all(&out_dir).expect("output directory");
    for r in [1.5, 2.0, 3.7] {
        let sr = model.super_resolve(&pair, r)?;
        let bl = bilinear_upsample(&pair.left, sr.dims())?;
        let gap = (sr.left.pixels() - bl.pixels()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!("x{r}: {:?}, max distance from bilinear {gap:.3e}", sr.dims());
        save_png(&sr.left, out_dir.join(format!("left_x{r}.png")))?;
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}
