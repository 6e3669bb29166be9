//! Encodes a stereo pair into latent code grids and shows that a fresh
//! model's adapters leave the backbone output untouched.

use stereoinr::encoder::{encode, ScaleConditioning};
use stereoinr::imaging::{Image, StereoPair};
use stereoinr::model::{Model, ModelConfig};
use stereoinr::params::ParamGroup;

fn main() -> stereoinr::Result<()> {
    let left = Image::from_fn(32, 48, |y, x, c| 0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos()));
    let right = Image::from_fn(32, 48, |y, x, c| left.get(y, x.saturating_sub(2), c));
    let pair = StereoPair::new(left, right)?;

    let model = Model::new(ModelConfig::compact(), 0)?;
    for g in ParamGroup::ALL {
        println!("{g:?}: {} parameters", model.params.count(g));
    }
    let s = ScaleConditioning::for_output(2.0, 64, 96)?;
    let z = encode(&pair, &s, &model.params, &model.config.encoder)?;
    println!("codes {}x{} with {} channels", z.height, z.width, z.channels());
    let swapped = encode(&pair.swapped(), &s, &model.params, &model.config.encoder)?;
    let diff = (&z.z_left - &swapped.z_right).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("view swap commutes: max diff {diff:e}");
    Ok(())
}
