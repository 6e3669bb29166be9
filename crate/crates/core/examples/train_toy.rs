//! A short training run on synthetic pairs with checkpoints and a log.
//!
//! STEPS=300 cargo run --release --example train_toy

use stereoinr::imaging::{load_dataset, synth_stereo_dataset, BatchConfig};
use stereoinr::model::{Model, ModelConfig};
use stereoinr::training::{fit, FitOutput, ModelState, TrainConfig};

fn main() -> stereoinr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: u64 = std::env::var("STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(100);
    let root = std::env::temp_dir().join("stereoinr_train_example");
    synth_stereo_dataset(6, (64, 96), 3, root.join("data"))?;
    let (train, val) = load_dataset(root.join("data"))?.split(2);

    let cfg = TrainConfig {
        total_steps: steps,
        eval_every: steps / 2,
        checkpoint_every: steps / 2,
        n_holdout: 2,
        batch: BatchConfig { lr_height: 16, lr_width: 24, n_queries: 768, ..BatchConfig::default() },
        ..TrainConfig::default()
    };
    let state = ModelState::new(Model::new(ModelConfig::compact(), 1)?, 2);
    let out = FitOutput { dir: root.join("run") };
    let res = fit(state, &train, &val, &cfg, Some(&out), None)?;
    for e in res.log.iter().filter(|e| e.psnr_x2.is_some()) {
        println!("step {} loss {:.4} x2 {:.2} dB x4 {:.2} dB", e.step, e.loss, e.psnr_x2.unwrap(), e.psnr_x4.unwrap_or(f64::NAN));
    }
    println!("checkpoints in {}", out.dir.display());
    Ok(())
}
