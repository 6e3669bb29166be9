//! Bicubic and fresh-model metrics reports on synthetic pairs.

use stereoinr::cli::{evaluate_bicubic, evaluate_model};
use stereoinr::imaging::{load_dataset, synth_stereo_dataset};
use stereoinr::model::{Model, ModelConfig};

fn main() -> stereoinr::Result<()> {
    let dir = std::env::temp_dir().join("stereoinr_eval_example");
    synth_stereo_dataset(2, (96, 128), 9, &dir)?;
    let ds = load_dataset(&dir)?;
    let names: Vec<String> = ds.pairs.iter().map(|p| p.name.clone()).collect();
    let pairs = ds.hr_pairs();
    let model = Model::new(ModelConfig::compact(), 0)?;
    for r in [2.0, 3.5] {
        let base = evaluate_bicubic(&names, &pairs, r)?;
        let fresh = evaluate_model(&model, &names, &pairs, r, "fresh")?;
        for rep in [&base, &fresh] {
            let a = &rep.aggregate;
            println!(
                "x{r} {:8} PSNR {:.2} SSIM {:.4} SCORE {:.4} (disparity MAE {:.3})",
                rep.method, a.psnr, a.ssim, a.score, a.disparity_mae
            );
        }
    }
    println!("{}", evaluate_bicubic(&names[..1], &pairs[..1], 2.0)?.to_json()?);
    Ok(())
}
