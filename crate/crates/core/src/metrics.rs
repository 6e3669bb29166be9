//! Image fidelity and stereo consistency metrics.

use serde::{Deserialize, Serialize};

use crate::disparity::{DisparityEstimator, DisparityField};
use crate::error::{Error, Result};
use crate::imaging::{Image, StereoPair};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Kahan-compensated mean.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Removes `border` pixels from every side.
pub fn crop_border(img: &Image, border: usize) -> Result<Image> {
    let (h, w) = img.dims();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::arg(format!("border {border} leaves nothing of a {h}x{w} image")));
    }
    img.crop(border, border, h - 2 * border, w - 2 * border)
}

/// `10 log10(1 / MSE)` over RGB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let mse = mean(a.pixels().iter().zip(b.pixels().iter()).map(|(x, y)| (x - y) * (x - y)));
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean of the two single-view PSNRs.
pub fn stereo_psnr(a: &StereoPair, b: &StereoPair) -> Result<f64> {
    Ok(0.5 * (psnr(&a.left, &b.left)? + psnr(&a.right, &b.right)?))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|k| g[k] * rows[(yo + k) * wo + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma, averaged over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (la, lb) = (a.luma(), b.luma());
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &g);
    let mu_b = filter_valid(&lb, h, w, &g);
    let saa = filter_valid(&prod(&la, &la), h, w, &g);
    let sbb = filter_valid(&prod(&lb, &lb), h, w, &g);
    let sab = filter_valid(&prod(&la, &lb), h, w, &g);
    Ok(mean((0..mu_a.len()).map(|i| {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    })))
}

/// Mean absolute difference over pixels valid in both fields.
pub fn disparity_mae(d1: &DisparityField, d2: &DisparityField) -> Result<f64> {
    if (d1.height, d1.width) != (d2.height, d2.width) {
        return Err(Error::shape("disparity fields differ in shape"));
    }
    let diffs: Vec<f64> = (0..d1.d.len())
        .filter(|&i| d1.valid[i] && d2.valid[i])
        .map(|i| (d1.d[i] - d2.d[i]).abs())
        .collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedMetric("no pixel is valid in both disparity fields".into()));
    }
    Ok(mean(diffs))
}

/// A perceptual distance: 0 for identical images, larger is worse.
pub trait PerceptualDistance {
    fn id(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// `clamp(1 - SSIM, 0, 1)`. Not comparable to learned perceptual metrics.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsimProxy;

impl PerceptualDistance for SsimProxy {
    fn id(&self) -> &str {
        "ssim-proxy"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok((1.0 - ssim(a, b)?).clamp(0.0, 1.0))
    }
}

pub fn score_formula(p_left: f64, p_right: f64, disparity_mae: f64) -> f64 {
    1.0 - 0.5 * (p_left + p_right) - 0.1 * disparity_mae
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub perceptual_left: f64,
    pub perceptual_right: f64,
    pub disparity_mae: f64,
    pub score: f64,
}

pub fn score_metric(
    sr: &StereoPair,
    hr: &StereoPair,
    perceptual: &dyn PerceptualDistance,
    estimator: &dyn DisparityEstimator,
) -> Result<ScoreParts> {
    same_dims(&sr.left, &hr.left)?;
    let pl = perceptual.distance(&sr.left, &hr.left)?;
    let pr = perceptual.distance(&sr.right, &hr.right)?;
    let d_sr = estimator.estimate(&sr.left, &sr.right)?;
    let d_hr = estimator.estimate(&hr.left, &hr.right)?;
    let l = disparity_mae(&d_sr, &d_hr)?;
    Ok(ScoreParts {
        perceptual_left: pl,
        perceptual_right: pr,
        disparity_mae: l,
        score: score_formula(pl, pr, l),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMetrics {
    pub name: String,
    pub psnr_left: f64,
    pub psnr_right: f64,
    pub psnr: f64,
    pub ssim_left: f64,
    pub ssim_right: f64,
    pub ssim: f64,
    pub perceptual_left: f64,
    pub perceptual_right: f64,
    pub perceptual: f64,
    pub disparity_mae: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub disparity_mae: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub method: String,
    pub scale: f64,
    pub out_of_training_range: bool,
    pub border_crop: usize,
    pub perceptual_backend: String,
    pub disparity_backend: String,
    pub note: String,
    pub config_hash: Option<String>,
    pub code_version: String,
    pub pairs: Vec<PairMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Border crop used at scale `r`.
pub fn border_for_scale(r: f64) -> usize {
    (2.0 * r).round() as usize
}

pub fn evaluate_pair(
    name: &str,
    sr: &StereoPair,
    hr: &StereoPair,
    border: usize,
    perceptual: &dyn PerceptualDistance,
    estimator: &dyn DisparityEstimator,
) -> Result<PairMetrics> {
    let c = |i: &Image| crop_border(i, border);
    let (sl, sr_r, hl, hr_r) = (c(&sr.left)?, c(&sr.right)?, c(&hr.left)?, c(&hr.right)?);
    let (psnr_left, psnr_right) = (psnr(&sl, &hl)?, psnr(&sr_r, &hr_r)?);
    let (ssim_left, ssim_right) = (ssim(&sl, &hl)?, ssim(&sr_r, &hr_r)?);
    let s = score_metric(sr, hr, perceptual, estimator)?;
    Ok(PairMetrics {
        name: name.to_string(),
        psnr_left,
        psnr_right,
        psnr: 0.5 * (psnr_left + psnr_right),
        ssim_left,
        ssim_right,
        ssim: 0.5 * (ssim_left + ssim_right),
        perceptual_left: s.perceptual_left,
        perceptual_right: s.perceptual_right,
        perceptual: 0.5 * (s.perceptual_left + s.perceptual_right),
        disparity_mae: s.disparity_mae,
        score: s.score,
    })
}

impl MetricsReport {
    pub fn new(
        method: &str,
        scale: f64,
        border_crop: usize,
        perceptual: &dyn PerceptualDistance,
        estimator: &dyn DisparityEstimator,
        pairs: Vec<PairMetrics>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no pairs to report".into()));
        }
        let agg = |f: fn(&PairMetrics) -> f64| mean(pairs.iter().map(f));
        let aggregate = AggregateMetrics {
            psnr: agg(|p| p.psnr),
            ssim: agg(|p| p.ssim),
            perceptual: agg(|p| p.perceptual),
            disparity_mae: agg(|p| p.disparity_mae),
            score: agg(|p| p.score),
        };
        Ok(Self {
            method: method.to_string(),
            scale,
            out_of_training_range: !(1.0..=4.0).contains(&scale),
            border_crop,
            perceptual_backend: perceptual.id().to_string(),
            disparity_backend: estimator.id().to_string(),
            note: "SCORE uses proxy perceptual and disparity backends; values are not comparable to \
                   LPIPS/learned-stereo based numbers"
                .to_string(),
            config_hash: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            pairs,
            aggregate,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
