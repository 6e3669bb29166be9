//! Horizontal disparity estimation between rectified views and bilinear
//! warping along a disparity field.
//!
//! Sign convention, used throughout the crate: a disparity `d` at reference
//! pixel `(x, y)` means `reference(x, y)` corresponds to `target(x - d, y)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, RowMix};
use crate::error::{Error, Result};
use crate::imaging::{save_gray16, save_gray8, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisparityConfig {
    pub max_disparity: usize,
    /// Odd side length of the matching window.
    pub window: usize,
}

impl Default for DisparityConfig {
    fn default() -> Self {
        Self {
            max_disparity: 24,
            window: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityField {
    pub height: usize,
    pub width: usize,
    pub d: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisparityField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            d: vec![0.0; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, d: f64) -> Self {
        Self {
            d: vec![d; height * width],
            ..Self::zeros(height, width)
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }

    /// Writes `(d + 32) * 256` as 16-bit PNG and the validity mask as 8-bit PNG.
    pub fn save_png(&self, disp_path: impl AsRef<Path>, valid_path: impl AsRef<Path>) -> Result<()> {
        let enc: Vec<u16> = self
            .d
            .iter()
            .map(|&d| ((d + 32.0) * 256.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        save_gray16(&enc, self.height, self.width, disp_path)?;
        let mask: Vec<u8> = self.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
        save_gray8(&mask, self.height, self.width, valid_path)
    }
}

/// Anything that can produce a horizontal disparity field for a rectified pair.
pub trait DisparityEstimator: Send + Sync {
    fn id(&self) -> &str;
    fn estimate(&self, reference: &Image, target: &Image) -> Result<DisparityField>;
}

/// Windowed zero-mean NCC block matching with parabolic sub-pixel refinement.
#[derive(Clone, Debug, Default)]
pub struct BlockMatcher {
    pub cfg: DisparityConfig,
}

impl BlockMatcher {
    pub fn new(cfg: DisparityConfig) -> Self {
        Self { cfg }
    }
}

impl DisparityEstimator for BlockMatcher {
    fn id(&self) -> &str {
        "block-ncc"
    }

    fn estimate(&self, reference: &Image, target: &Image) -> Result<DisparityField> {
        estimate_disparity(reference, target, &self.cfg)
    }
}

pub fn estimate_disparity(reference: &Image, target: &Image, cfg: &DisparityConfig) -> Result<DisparityField> {
    if reference.dims() != target.dims() {
        return Err(Error::shape(format!(
            "disparity inputs differ: {:?} vs {:?}",
            reference.dims(),
            target.dims()
        )));
    }
    let (h, w) = reference.dims();
    estimate_disparity_planes(&reference.luma(), &target.luma(), h, w, cfg)
}

/// Summed-area table with a zero first row/column.
struct Integral {
    w1: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(v: &[f64], h: usize, w: usize) -> Self {
        let w1 = w + 1;
        let mut s = vec![0.0; (h + 1) * w1];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += v[y * w + x];
                s[(y + 1) * w1 + x + 1] = s[y * w1 + x + 1] + row;
            }
        }
        Self { w1, s }
    }

    /// Sum over rows `[y0, y1)` and columns `[x0, x1)`.
    #[inline]
    fn sum(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let w1 = self.w1;
        self.s[y1 * w1 + x1] - self.s[y0 * w1 + x1] - self.s[y1 * w1 + x0] + self.s[y0 * w1 + x0]
    }
}

const VAR_EPS: f64 = 1e-10;

/// Block matching on single-channel planes (row-major `h*w`).
pub fn estimate_disparity_planes(
    reference: &[f64],
    target: &[f64],
    h: usize,
    w: usize,
    cfg: &DisparityConfig,
) -> Result<DisparityField> {
    if reference.len() != h * w || target.len() != h * w {
        return Err(Error::shape("disparity planes do not match h*w"));
    }
    if cfg.window.is_multiple_of(2) || cfg.window == 0 {
        return Err(Error::arg("matching window must be odd"));
    }
    let rad = cfg.window / 2;
    let n = (cfg.window * cfg.window) as f64;
    let dmax = cfg.max_disparity as i64;
    let mut field = DisparityField {
        height: h,
        width: w,
        d: vec![0.0; h * w],
        valid: vec![false; h * w],
    };
    if h < cfg.window || w < cfg.window {
        return Ok(field);
    }

    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let (ir, ir2) = (Integral::new(reference, h, w), Integral::new(&sq(reference), h, w));
    let (it, it2) = (Integral::new(target, h, w), Integral::new(&sq(target), h, w));

    // Window statistics centered at (y, x): (mean, centered sum of squares).
    let stats = |i: &Integral, i2: &Integral, y: usize, x: usize| {
        let (y0, x0, y1, x1) = (y - rad, x - rad, y + rad + 1, x + rad + 1);
        let s = i.sum(y0, x0, y1, x1);
        let s2 = i2.sum(y0, x0, y1, x1);
        (s / n, s2 - s * s / n)
    };

    // Search order 0, -1, +1, -2, +2, ...: strict improvement keeps the
    // smallest |shift| among ties.
    let shifts: Vec<i64> = std::iter::once(0)
        .chain((1..=dmax).flat_map(|k| [-k, k]))
        .collect();
    let n_shift = (2 * dmax + 1) as usize;
    // scores[(y*w + x) * n_shift + (delta + dmax)]
    let mut scores = vec![f64::NAN; h * w * n_shift];
    let mut prod = vec![0.0; h * w];
    for delta in -dmax..=dmax {
        for y in 0..h {
            for x in 0..w {
                let sx = x as i64 - delta;
                prod[y * w + x] = if sx >= 0 && sx < w as i64 {
                    reference[y * w + x] * target[y * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
        let ip = Integral::new(&prod, h, w);
        for y in rad..h - rad {
            for x in rad..w - rad {
                let tx = x as i64 - delta;
                if tx < rad as i64 || tx >= (w - rad) as i64 {
                    continue;
                }
                let (mr, vr) = stats(&ir, &ir2, y, x);
                let (mt, vt) = stats(&it, &it2, y, tx as usize);
                let cross = ip.sum(y - rad, x - rad, y + rad + 1, x + rad + 1) - n * mr * mt;
                let score = if vr > VAR_EPS && vt > VAR_EPS {
                    cross / (vr * vt).sqrt()
                } else {
                    0.0
                };
                scores[(y * w + x) * n_shift + (delta + dmax) as usize] = score;
            }
        }
    }

    for y in rad..h - rad {
        for x in rad..w - rad {
            let p = y * w + x;
            let s = &scores[p * n_shift..(p + 1) * n_shift];
            let (_, vr) = stats(&ir, &ir2, y, x);
            let mut best: Option<(i64, f64)> = None;
            for &delta in &shifts {
                let v = s[(delta + dmax) as usize];
                if v.is_nan() {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((delta, v));
                }
            }
            let Some((delta, c0)) = best else {
                continue;
            };
            let at = |k: i64| -> Option<f64> {
                if k < -dmax || k > dmax {
                    return None;
                }
                let v = s[(k + dmax) as usize];
                (!v.is_nan()).then_some(v)
            };
            let (cm, cp) = (at(delta - 1), at(delta + 1));
            // A winner on a search edge cut short by the image border is unreliable.
            let truncated = (cm.is_none() && delta > -dmax) || (cp.is_none() && delta < dmax);
            let mut d = delta as f64;
            // A perfect correlation is an exact integer match; skip refinement.
            let exact = c0 >= 1.0 - 1e-9;
            if let (Some(cm), Some(cp), false) = (cm, cp, exact) {
                let denom = cm - 2.0 * c0 + cp;
                if denom < 0.0 {
                    d += (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                }
            }
            field.d[p] = d;
            field.valid[p] = vr > VAR_EPS && !truncated;
            if !field.valid[p] && vr <= VAR_EPS {
                field.d[p] = 0.0;
            }
        }
    }
    Ok(field)
}

/// Bilinear horizontal warping operator: output `(y, x)` samples the grid at
/// `(y, x - d(y, x))`. Returns the operator and a mask that is false where
/// the sample was clamped or the disparity itself was invalid.
pub fn warp_mix(disp: &DisparityField) -> (RowMix, Vec<bool>) {
    let (h, w) = (disp.height, disp.width);
    let mut mix = RowMix::new(h * w, 2);
    let mut mask = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut sx = x as f64 - disp.d[p];
            if sx < 0.0 || sx > (w - 1) as f64 {
                sx = sx.clamp(0.0, (w - 1) as f64);
                mask[p] = false;
            }
            if !disp.valid[p] {
                mask[p] = false;
            }
            let x0 = sx.floor() as usize;
            let a = sx - x0 as f64;
            if a == 0.0 {
                mix.set(p, 0, y * w + x0, 1.0);
            } else {
                mix.set(p, 0, y * w + x0, 1.0 - a);
                mix.set(p, 1, y * w + x0 + 1, a);
            }
        }
    }
    (mix, mask)
}

/// Warps an `(h*w) x C` grid along `disp`.
pub fn warp(grid: &Mat, disp: &DisparityField) -> Result<(Mat, Vec<bool>)> {
    if grid.nrows() != disp.height * disp.width {
        return Err(Error::shape(format!(
            "grid has {} sites but disparity is {}x{}",
            grid.nrows(),
            disp.height,
            disp.width
        )));
    }
    let (mix, mask) = warp_mix(disp);
    Ok((mix.apply(grid), mask))
}
