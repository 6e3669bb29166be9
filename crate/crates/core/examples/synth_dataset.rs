//! Writes a small synthetic stereo dataset and prints its manifest.
//!
//! cargo run --release --example synth_dataset -- /tmp/synth

use stereoinr::imaging::{load_dataset, synth_stereo_dataset};

fn main() -> stereoinr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_data".into());
    synth_stereo_dataset(4, (64, 96), 1, &out)?;
    let ds = load_dataset(&out)?;
    for p in &ds.pairs {
        let d = p.disp_left.as_ref().expect("synthetic pairs carry disparity");
        let max = d.iter().cloned().fold(0.0, f64::max);
        println!("{} {:?} max disparity {max}", p.name, p.pair.dims());
    }
    Ok(())
}
