//! Block matching on a synthetic pair, scored against ground truth.

use stereoinr::disparity::{estimate_disparity, DisparityConfig};
use stereoinr::imaging::{load_dataset, synth_stereo_dataset};

fn main() -> stereoinr::Result<()> {
    let dir = std::env::temp_dir().join("stereoinr_disparity_example");
    synth_stereo_dataset(1, (96, 128), 5, &dir)?;
    let ds = load_dataset(&dir)?;
    let p = &ds.pairs[0];
    let gt = p.disp_left.as_ref().unwrap();

    let cfg = DisparityConfig { max_disparity: 12, window: 7 };
    let field = estimate_disparity(&p.pair.left, &p.pair.right, &cfg)?;
    let (mut hits, mut n) = (0, 0);
    for ((d, ok), g) in field.d.iter().zip(&field.valid).zip(gt) {
        if *ok {
            n += 1;
            hits += ((d - g).abs() <= 1.0) as usize;
        }
    }
    println!("valid {:.1}%", 100.0 * field.valid_fraction());
    println!("within 1 px: {hits}/{n}");
    field.save_png(dir.join("disp.png"), dir.join("valid.png"))?;
    println!("wrote {}", dir.join("disp.png").display());
    Ok(())
}
