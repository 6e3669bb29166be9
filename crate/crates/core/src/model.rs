//! The full stereo super-resolution model: encoder, disparity guidance and
//! upsampler wired together over one parameter store.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, RowMix, Tape, Var};
use crate::dgasu::{
    cross_view_fuse_on_tape, decode_on_tape, init_upsampler, prepare_view, se_refine_on_tape, PreparedGrids,
    UpsamplerConfig,
};
use crate::disparity::{warp_mix, BlockMatcher, DisparityConfig, DisparityEstimator, DisparityField};
use crate::encoder::{encode_on_tape, init_encoder, view_key, EncoderConfig, ScaleConditioning};
use crate::error::{Error, Result};
use crate::imaging::{make_query_grid, Image, QueryGrid, StereoPair};
use crate::params::{Binder, Init, ParamStore};
use crate::View;

/// Scales seen during training; others still work but are extrapolation.
pub const TRAINED_SCALE_RANGE: (f64, f64) = (1.0, 4.0);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub upsampler: UpsamplerConfig,
    pub disparity: DisparityConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.upsampler.validate()?;
        if self.disparity.window.is_multiple_of(2) || self.disparity.window == 0 {
            return Err(Error::Config("disparity window must be odd".into()));
        }
        Ok(())
    }

    /// A small configuration suited to single-core experiments.
    pub fn compact() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: 32,
                n_blocks: 2,
                adapter_bottleneck: 8,
                share_view_weights: true,
                scale_embed_dim: 16,
            },
            upsampler: UpsamplerConfig {
                hidden: 64,
                mlp_layers: 3,
                posenc_freqs: 6,
                ..UpsamplerConfig::default()
            },
            disparity: DisparityConfig {
                max_disparity: 12,
                window: 7,
            },
        }
    }
}

/// Warp operator for one direction plus its validity mask. Rows whose every
/// pixel is invalid read the unwarped other-view codes instead.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub disparity: DisparityField,
    pub mix: Rc<RowMix>,
    pub mask: Vec<bool>,
    pub fallback_rows: Vec<usize>,
}

impl Guidance {
    pub fn new(disparity: DisparityField) -> Self {
        let (mut mix, mask) = warp_mix(&disparity);
        let (h, w) = (disparity.height, disparity.width);
        let mut fallback_rows = Vec::new();
        for y in 0..h {
            if mask[y * w..(y + 1) * w].iter().all(|m| !m) {
                fallback_rows.push(y);
                for x in 0..w {
                    let p = y * w + x;
                    mix.set(p, 0, p, 1.0);
                    mix.set(p, 1, p, 0.0);
                }
            }
        }
        Self {
            disparity,
            mix: Rc::new(mix),
            mask,
            fallback_rows,
        }
    }
}

/// Disparity both ways: `left` maps right-view codes into the left frame.
#[derive(Clone, Debug)]
pub struct StereoGuidance {
    pub left: Guidance,
    pub right: Guidance,
}

impl StereoGuidance {
    pub fn estimate(pair: &StereoPair, estimator: &dyn DisparityEstimator) -> Result<Self> {
        Ok(Self {
            left: Guidance::new(estimator.estimate(&pair.left, &pair.right)?),
            right: Guidance::new(estimator.estimate(&pair.right, &pair.left)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        init_encoder(&mut init, &config.encoder)?;
        init_upsampler(
            &mut init,
            &config.upsampler,
            config.encoder.channels,
            config.encoder.share_view_weights,
        )?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// fresh initialization of `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config, 0)?;
        let want: Vec<_> = reference.params.iter().map(|(n, m)| (n.clone(), m.dim())).collect();
        let got: Vec<_> = params.iter().map(|(n, m)| (n.clone(), m.dim())).collect();
        if want != got {
            let missing = want.iter().find(|x| !got.contains(x));
            let extra = got.iter().find(|x| !want.contains(x));
            return Err(Error::Checkpoint(format!(
                "parameters do not match the model config (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        Ok(Self {
            config: reference.config,
            params,
        })
    }

    pub fn estimator(&self) -> BlockMatcher {
        BlockMatcher::new(self.config.disparity.clone())
    }

    fn prefix(&self, v: View) -> String {
        format!("upsampler.{}", view_key(self.config.encoder.share_view_weights, v))
    }

    /// Encoder, warping, fusion and refinement; returns the per-view decoder
    /// inputs `(left, right)`.
    pub fn prepare_on_tape(
        &self,
        tape: &mut Tape,
        b: &mut Binder<'_>,
        pair: &StereoPair,
        guidance: &StereoGuidance,
        s: &ScaleConditioning,
    ) -> Result<[crate::dgasu::PreparedView; 2]> {
        let (h, w) = pair.dims();
        if guidance.left.disparity.height != h || guidance.left.disparity.width != w {
            return Err(Error::shape("disparity field does not match the input pair"));
        }
        let (zl, zr) = encode_on_tape(tape, b, &self.config.encoder, pair, s)?;
        let zrl = tape.row_mix(zr, guidance.left.mix.clone());
        let zlr = tape.row_mix(zl, guidance.right.mix.clone());
        let k = self.config.upsampler.window_radius;
        let mut out = Vec::with_capacity(2);
        for (view, own, other) in [(View::Left, zl, zrl), (View::Right, zr, zlr)] {
            let p = self.prefix(view);
            let f = cross_view_fuse_on_tape(tape, b, &p, own, other, h, w, k);
            let refined = se_refine_on_tape(tape, b, &p, own, f, h, w);
            out.push(prepare_view(tape, b, &p, &self.config.upsampler, refined, other));
        }
        let r = out.pop().expect("two views");
        let l = out.pop().expect("two views");
        Ok([l, r])
    }

    /// Predicts RGB at `queries` for both views, `(N x 3, N x 3)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        b: &mut Binder<'_>,
        pair: &StereoPair,
        guidance: &StereoGuidance,
        queries: &QueryGrid,
        s: &ScaleConditioning,
    ) -> Result<(Var, Var)> {
        queries.validate()?;
        let (h, w) = pair.dims();
        let [pl, pr] = self.prepare_on_tape(tape, b, pair, guidance, s)?;
        let cfg = &self.config.upsampler;
        let ol = decode_on_tape(tape, b, &self.prefix(View::Left), cfg, &pl, h, w, queries, &pair.left)?;
        let or = decode_on_tape(tape, b, &self.prefix(View::Right), cfg, &pr, h, w, queries, &pair.right)?;
        Ok((ol, or))
    }

    /// Inference at arbitrary query coordinates, decoded in chunks of
    /// `chunk_size` queries.
    pub fn predict_queries(
        &self,
        pair: &StereoPair,
        queries: &QueryGrid,
        s: &ScaleConditioning,
        chunk_size: usize,
    ) -> Result<(Mat, Mat)> {
        queries.validate()?;
        if chunk_size == 0 {
            return Err(Error::arg("chunk size must be positive"));
        }
        let guidance = StereoGuidance::estimate(pair, &self.estimator())?;
        let grids = {
            let mut tape = Tape::inference();
            let mut b = Binder::new(&self.params, false);
            let prepared = self.prepare_on_tape(&mut tape, &mut b, pair, &guidance, s)?;
            prepared.map(|p| PreparedGrids::capture(&tape, &p))
        };
        let (h, w) = pair.dims();
        let n = queries.len();
        let mut outs = [Mat::zeros((n, 3)), Mat::zeros((n, 3))];
        let mut start = 0;
        while start < n {
            let end = (start + chunk_size).min(n);
            let chunk = queries.chunk(start, end);
            for (i, view) in [View::Left, View::Right].into_iter().enumerate() {
                let mut tape = Tape::inference();
                let mut b = Binder::new(&self.params, false);
                let prep = grids[i].place(&mut tape);
                let img: &Image = pair.view(view);
                let o = decode_on_tape(
                    &mut tape,
                    &mut b,
                    &self.prefix(view),
                    &self.config.upsampler,
                    &prep,
                    h,
                    w,
                    &chunk,
                    img,
                )?;
                outs[i].slice_mut(ndarray::s![start..end, ..]).assign(tape.value(o));
            }
            start = end;
        }
        let [l, r] = outs;
        Ok((l, r))
    }

    /// Dense super-resolution to `round(r*H) x round(r*W)`, clipped to `[0, 1]`.
    pub fn super_resolve(&self, pair: &StereoPair, r: f64) -> Result<StereoPair> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::arg(format!("scale factor must be positive, got {r}")));
        }
        if r < TRAINED_SCALE_RANGE.0 || r > TRAINED_SCALE_RANGE.1 {
            log::warn!("scale x{r} is outside the training range [1, 4]");
        }
        let (h, w) = pair.dims();
        let (ho, wo) = ((r * h as f64).round() as usize, (r * w as f64).round() as usize);
        let grid = make_query_grid(ho, wo, r)?;
        let s = ScaleConditioning::for_output(r, ho, wo)?;
        let (l, rr) = self.predict_queries(pair, &grid, &s, self.config.upsampler.chunk_size)?;
        let to_img = |m: Mat| Image::new(ho, wo, m).map(Image::clamp01);
        StereoPair::new(to_img(l)?, to_img(rr)?)
    }
}
