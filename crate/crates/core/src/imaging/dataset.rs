use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

use super::query::{cell_center, QueryGrid};
use super::resample::bicubic_resample;
use super::{load_gray16, load_stereo_pair, save_gray16, save_png, Image, StereoPair};

pub const MAX_CROP_ATTEMPTS: usize = 100;

const MANIFEST_FORMAT: &str = "stereoinr-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub has_disparity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub pairs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct DatasetPair {
    pub name: String,
    pub pair: StereoPair,
    /// Ground-truth disparity of the left view (positive, in pixels).
    pub disp_left: Option<Vec<f64>>,
    /// Ground-truth disparity magnitude of the right view.
    pub disp_right: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct StereoDataset {
    pub root: PathBuf,
    pub pairs: Vec<DatasetPair>,
}

impl StereoDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `n_holdout` pairs for validation.
    pub fn split(&self, n_holdout: usize) -> (Vec<StereoPair>, Vec<StereoPair>) {
        let cut = self.pairs.len().saturating_sub(n_holdout);
        let hr: Vec<StereoPair> = self.pairs.iter().map(|p| p.pair.clone()).collect();
        let val = hr[cut..].to_vec();
        let mut train = hr;
        train.truncate(cut);
        (train, val)
    }

    pub fn hr_pairs(&self) -> Vec<StereoPair> {
        self.pairs.iter().map(|p| p.pair.clone()).collect()
    }
}

/// Loads a directory with a `manifest.json`, or, lacking one, every
/// `<name>_L.png` / `<name>_R.png` pair in name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<StereoDataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    if !mpath.exists() && dir.is_dir() {
        return load_plain_pairs(dir);
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", mpath.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Dataset(format!("unknown manifest format {:?}", manifest.format)));
    }
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let pair = load_stereo_pair(
            dir.join(format!("{}_L.png", entry.name)),
            dir.join(format!("{}_R.png", entry.name)),
        )?;
        if pair.dims() != (entry.height, entry.width) {
            return Err(Error::Dataset(format!(
                "{}: manifest size {}x{} but images are {:?}",
                entry.name,
                entry.height,
                entry.width,
                pair.dims()
            )));
        }
        let read_disp = |suffix: &str| -> Result<Option<Vec<f64>>> {
            let p = dir.join(format!("{}_{suffix}.png", entry.name));
            if !p.exists() {
                return Ok(None);
            }
            let (vals, h, w) = load_gray16(&p)?;
            if (h, w) != pair.dims() {
                return Err(Error::Dataset(format!("{}: disparity size mismatch", p.display())));
            }
            Ok(Some(vals.iter().map(|&v| v as f64 / 256.0).collect()))
        };
        pairs.push(DatasetPair {
            name: entry.name.clone(),
            disp_left: read_disp("dL")?,
            disp_right: read_disp("dR")?,
            pair,
        });
    }
    Ok(StereoDataset {
        root: dir.to_path_buf(),
        pairs,
    })
}

fn load_plain_pairs(dir: &Path) -> Result<StereoDataset> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix("_L.png").map(str::to_string))
        .filter(|n| dir.join(format!("{n}_R.png")).exists())
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let pair = load_stereo_pair(dir.join(format!("{name}_L.png")), dir.join(format!("{name}_R.png")))?;
        pairs.push(DatasetPair {
            name,
            pair,
            disp_left: None,
            disp_right: None,
        });
    }
    Ok(StereoDataset {
        root: dir.to_path_buf(),
        pairs,
    })
}

// --- synthetic scenes -------------------------------------------------------

#[derive(Clone, Debug)]
struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    grad_y: [f64; 3],
    grad_x: [f64; 3],
    waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, n_waves: usize, fmin: f64, fmax: f64, amp: f64, span: (f64, f64)) -> Self {
        let mut base = [0.0; 3];
        let mut grad_y = [0.0; 3];
        let mut grad_x = [0.0; 3];
        for c in 0..3 {
            base[c] = rng.gen_range(0.25..0.75);
            grad_y[c] = rng.gen_range(-0.15..0.15) / span.0;
            grad_x[c] = rng.gen_range(-0.15..0.15) / span.1;
        }
        let waves = (0..n_waves)
            .map(|_| {
                let f = rng.gen_range(fmin..fmax);
                let theta = rng.gen_range(0.0..PI);
                let a = rng.gen_range(0.3..1.0) * amp;
                let mut amps = [0.0; 3];
                for v in &mut amps {
                    *v = a * rng.gen_range(0.6..1.4);
                }
                Wave {
                    fy: f * theta.sin(),
                    fx: f * theta.cos(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: amps,
                }
            })
            .collect();
        Texture {
            base,
            grad_y,
            grad_x,
            waves,
        }
    }

    fn eval(&self, y: f64, x: f64, c: usize) -> f64 {
        let mut v = self.base[c] + self.grad_y[c] * y + self.grad_x[c] * x;
        for w in &self.waves {
            v += w.amp[c] * (2.0 * PI * (w.fy * y + w.fx * x) + w.phase).sin();
        }
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    /// Rectangle in right-view coordinates; `None` covers the whole frame.
    rect: Option<(i64, i64, i64, i64)>,
    disparity: i64,
    texture: Texture,
}

impl Layer {
    fn covers(&self, y: i64, u: i64) -> bool {
        match self.rect {
            None => true,
            Some((y0, x0, h, w)) => y >= y0 && y < y0 + h && u >= x0 && u < x0 + w,
        }
    }
}

struct Scene {
    /// Back to front.
    layers: Vec<Layer>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let span = (h as f64, w as f64);
        let bg_disp = rng.gen_range(0..=2);
        let mut layers = vec![Layer {
            rect: None,
            disparity: bg_disp,
            texture: Texture::random(rng, 14, 0.01, 0.2, 0.05, span),
        }];
        let n_rects = rng.gen_range(2..=5);
        let mut rects = Vec::with_capacity(n_rects);
        for _ in 0..n_rects {
            let rh = rng.gen_range((h as f64 * 0.2)..(h as f64 * 0.45)) as i64;
            let rw = rng.gen_range((w as f64 * 0.15)..(w as f64 * 0.35)) as i64;
            let y0 = rng.gen_range(0..(h as i64 - rh).max(1));
            let x0 = rng.gen_range(-4..(w as i64 - rw).max(1));
            let d = rng.gen_range((bg_disp + 1)..=8);
            rects.push(Layer {
                rect: Some((y0, x0, rh, rw)),
                disparity: d,
                texture: Texture::random(rng, 10, 0.02, 0.22, 0.07, span),
            });
        }
        rects.sort_by_key(|l| l.disparity);
        layers.extend(rects);
        Scene { layers }
    }

    /// Top-most layer visible at view pixel `(y, x)`; the left view sees
    /// layer coordinates shifted by that layer's disparity.
    fn top(&self, y: i64, x: i64, left: bool) -> &Layer {
        self.layers
            .iter()
            .rev()
            .find(|l| l.covers(y, if left { x - l.disparity } else { x }))
            .expect("background covers every pixel")
    }

    fn render(&self, h: usize, w: usize, left: bool) -> (Image, Vec<u16>) {
        let mut img = Image::filled(h, w, 0.0);
        let mut disp = vec![0u16; h * w];
        for y in 0..h {
            for x in 0..w {
                let layer = self.top(y as i64, x as i64, left);
                let u = if left { x as i64 - layer.disparity } else { x as i64 };
                for c in 0..3 {
                    img.set(y, x, c, layer.texture.eval(y as f64, u as f64, c));
                }
                disp[y * w + x] = (layer.disparity * 256) as u16;
            }
        }
        (img, disp)
    }
}

/// Writes `n_pairs` procedurally generated rectified stereo pairs.
///
/// Each scene is a textured background plus 2-5 textured rectangles, every
/// layer carrying an integer disparity in `[0, 8]`. With `d` the left-view
/// disparity, `left(x, y) = right(x - d, y)`. `<name>_dL.png` stores `d·256`
/// for the left view and `<name>_dR.png` the magnitude for the right view.
pub fn synth_stereo_dataset(
    n_pairs: usize,
    size: (usize, usize),
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let (h, w) = size;
    if h < 64 || w < 64 {
        return Err(Error::arg(format!("synthetic images must be at least 64x64, got {h}x{w}")));
    }
    if n_pairs == 0 {
        return Err(Error::arg("n_pairs must be at least 1"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let scene = Scene::random(&mut rng, h, w);
        let (left, dl) = scene.render(h, w, true);
        let (right, dr) = scene.render(h, w, false);
        let name = format!("synth_{k:04}");
        save_png(&left, out_dir.join(format!("{name}_L.png")))?;
        save_png(&right, out_dir.join(format!("{name}_R.png")))?;
        save_gray16(&dl, h, w, out_dir.join(format!("{name}_dL.png")))?;
        save_gray16(&dr, h, w, out_dir.join(format!("{name}_dR.png")))?;
        entries.push(ManifestEntry {
            name,
            height: h,
            width: w,
            has_disparity: true,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: 1,
        seed: Some(seed),
        pairs: entries,
    };
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

// --- training batches -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub lr_height: usize,
    pub lr_width: usize,
    pub n_queries: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            lr_height: 64,
            lr_width: 96,
            n_queries: 6144,
            min_scale: 1.0,
            max_scale: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub lr_pair: StereoPair,
    pub queries: QueryGrid,
    pub gt_left: Mat,
    pub gt_right: Mat,
    pub scale: f64,
    pub hr_shape: (usize, usize),
    /// Seed of the generator that produced this batch.
    pub seed: u64,
}

pub fn sample_scale(rng: &mut impl Rng, min: f64, max: f64) -> f64 {
    rng.gen_range(min..=max)
}

/// Draws a random-scale crop, its bicubic LR counterpart and a set of
/// coordinate/RGB ground-truth samples from the HR crop's cell centers.
pub fn sample_training_batch(
    dataset: &[StereoPair],
    rng: &mut ChaCha8Rng,
    cfg: &BatchConfig,
) -> Result<TrainingBatch> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    let seed = rng.next_u64();
    let mut brng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_CROP_ATTEMPTS {
        let idx = brng.gen_range(0..dataset.len());
        let r = sample_scale(&mut brng, cfg.min_scale, cfg.max_scale);
        let ph = (cfg.lr_height as f64 * r).round() as usize;
        let pw = (cfg.lr_width as f64 * r).round() as usize;
        let hr = &dataset[idx];
        let (h, w) = hr.dims();
        if ph > h || pw > w {
            continue;
        }
        let y0 = brng.gen_range(0..=h - ph);
        let x0 = brng.gen_range(0..=w - pw);
        let left = hr.left.crop(y0, x0, ph, pw)?;
        let right = hr.right.crop(y0, x0, ph, pw)?;
        let lr_pair = StereoPair::new(
            bicubic_resample(&left, (cfg.lr_height, cfg.lr_width))?,
            bicubic_resample(&right, (cfg.lr_height, cfg.lr_width))?,
        )?;
        let n = cfg.n_queries.min(ph * pw);
        let picks = sample_indices(&mut brng, ph * pw, n);
        let mut coords = Vec::with_capacity(n);
        let mut gt_left = Mat::zeros((n, 3));
        let mut gt_right = Mat::zeros((n, 3));
        for (q, p) in picks.iter().enumerate() {
            let (py, px) = (p / pw, p % pw);
            coords.push([cell_center(py, ph), cell_center(px, pw)]);
            for c in 0..3 {
                gt_left[[q, c]] = left.get(py, px, c);
                gt_right[[q, c]] = right.get(py, px, c);
            }
        }
        return Ok(TrainingBatch {
            lr_pair,
            queries: QueryGrid {
                coords,
                cell: [2.0 / ph as f64, 2.0 / pw as f64],
                scale: r,
                shape: None,
            },
            gt_left,
            gt_right,
            scale: r,
            hr_shape: (ph, pw),
            seed,
        });
    }
    Err(Error::Dataset(format!(
        "no HR pair large enough for a {}x{} LR patch after {MAX_CROP_ATTEMPTS} attempts",
        cfg.lr_height, cfg.lr_width
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set() -> Vec<StereoPair> {
        let img = Image::from_fn(80, 120, |y, x, c| ((y * 3 + x * 5 + c * 7) % 23) as f64 / 22.0);
        vec![StereoPair::new(img.clone(), img).unwrap()]
    }

    fn small_cfg() -> BatchConfig {
        BatchConfig {
            lr_height: 16,
            lr_width: 24,
            n_queries: 384,
            ..BatchConfig::default()
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let data = small_set();
        let a = sample_training_batch(&data, &mut ChaCha8Rng::seed_from_u64(5), &small_cfg()).unwrap();
        let b = sample_training_batch(&data, &mut ChaCha8Rng::seed_from_u64(5), &small_cfg()).unwrap();
        assert_eq!(a, b);
        assert!((1.0..=4.0).contains(&a.scale));
        assert_eq!(a.queries.len(), 384);
        assert_eq!(a.lr_pair.dims(), (16, 24));
        assert!(a.gt_left.iter().all(|v| (0.0..=1.0).contains(v)));
        a.queries.validate().unwrap();
    }

    #[test]
    fn queries_are_distinct_cell_centers() {
        let data = small_set();
        let b = sample_training_batch(&data, &mut ChaCha8Rng::seed_from_u64(8), &small_cfg()).unwrap();
        let (ph, pw) = b.hr_shape;
        let mut seen = std::collections::HashSet::new();
        for c in &b.queries.coords {
            let iy = ((c[0] + 1.0) * ph as f64 / 2.0 - 0.5).round() as i64;
            let ix = ((c[1] + 1.0) * pw as f64 / 2.0 - 0.5).round() as i64;
            assert!((cell_center(iy as usize, ph) - c[0]).abs() < 1e-12);
            assert!(seen.insert((iy, ix)));
        }
    }

    #[test]
    fn scale_mean_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let r = sample_scale(&mut rng, 1.0, 4.0);
            assert!((1.0..=4.0).contains(&r));
            sum += r;
        }
        let mean = sum / n as f64;
        assert!((mean - 2.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn oversized_patch_errors_after_retries() {
        let img = Image::filled(10, 10, 0.5);
        let data = vec![StereoPair::new(img.clone(), img).unwrap()];
        let err = sample_training_batch(&data, &mut ChaCha8Rng::seed_from_u64(1), &BatchConfig::default());
        assert!(matches!(err, Err(Error::Dataset(_))));
    }

    #[test]
    fn synth_is_deterministic_and_consistent() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_stereo_dataset(1, (64, 96), 3, d1.path()).unwrap();
        synth_stereo_dataset(1, (64, 96), 3, d2.path()).unwrap();
        for f in ["synth_0000_L.png", "synth_0000_R.png", "synth_0000_dL.png", "manifest.json"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let ds = load_dataset(d1.path()).unwrap();
        let p = &ds.pairs[0];
        let dl = p.disp_left.as_ref().unwrap();
        let (h, w) = p.pair.dims();
        // left(x) = right(x - d) wherever the same layer is visible in both views.
        let mut checked = 0;
        for y in 0..h {
            for x in 8..w {
                let d = dl[y * w + x];
                assert!((0.0..=8.0).contains(&d) && d.fract() == 0.0);
                let xr = x - d as usize;
                let dr = p.disp_right.as_ref().unwrap()[y * w + xr];
                if dr == d {
                    for c in 0..3 {
                        assert_eq!(p.pair.left.get(y, x, c), p.pair.right.get(y, xr, c));
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > h * w / 2);
    }

    #[test]
    fn directories_without_manifest_pair_by_suffix() {
        let d = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 5, 0.25);
        for f in ["b_L.png", "b_R.png", "a_L.png", "a_R.png", "orphan_L.png"] {
            crate::imaging::save_png(&img, d.path().join(f)).unwrap();
        }
        let ds = load_dataset(d.path()).unwrap();
        let names: Vec<&str> = ds.pairs.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(ds.pairs[0].pair.dims(), (4, 5));
    }

    #[test]
    fn synth_rejects_small_images() {
        let d = tempfile::tempdir().unwrap();
        assert!(synth_stereo_dataset(1, (32, 96), 0, d.path()).is_err());
    }
}
