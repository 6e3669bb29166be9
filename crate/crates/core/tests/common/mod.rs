#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereoinr::autograd::{gelu_scalar, im2col3x3, Mat, Tape, Var};
use stereoinr::dgasu::UpsamplerConfig;
use stereoinr::disparity::DisparityConfig;
use stereoinr::encoder::EncoderConfig;
use stereoinr::imaging::{Image, StereoPair};
use stereoinr::model::ModelConfig;
use stereoinr::params::{Binder, ParamGroup, ParamStore};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: 6,
            n_blocks: 2,
            adapter_bottleneck: 3,
            share_view_weights: true,
            scale_embed_dim: 4,
        },
        upsampler: UpsamplerConfig {
            window_radius: 1,
            n_rounds: 2,
            posenc_freqs: 2,
            hidden: 8,
            mlp_layers: 3,
            chunk_size: 64,
        },
        disparity: DisparityConfig {
            max_disparity: 3,
            window: 3,
        },
    }
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, Mat::from_shape_fn((h * w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
}

/// A smooth textured pair where the left view is the right view shifted by
/// `shift` pixels.
pub fn shifted_pair(h: usize, w: usize, shift: usize) -> StereoPair {
    let tex = |y: usize, x: f64, c: usize| {
        0.5 + 0.2 * (0.9 * x + 0.3 * c as f64).sin() * (0.7 * y as f64).cos() + 0.15 * (0.37 * x * (1.0 + y as f64 * 0.1)).sin()
    };
    let right = Image::from_fn(h, w, |y, x, c| tex(y, x as f64, c));
    let left = Image::from_fn(h, w, |y, x, c| tex(y, x as f64 - shift as f64, c));
    StereoPair::new(left, right).unwrap()
}

/// Adds noise to every tunable parameter so zero-initialized branches carry
/// gradient.
pub fn perturb_tunable(params: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in params.tunable_names() {
        let m = params.get_mut(&name).unwrap();
        m.mapv_inplace(|v| v + rng.gen_range(-scale..scale));
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-5)` over sampled entries of each
/// tunable tensor, using central differences. Returns the worst tensor.
pub fn grad_check(
    params: &ParamStore,
    samples_per_tensor: usize,
    eps: f64,
    seed: u64,
    loss: &dyn Fn(&mut Tape, &mut Binder<'_>) -> Var,
) -> (String, f64) {
    let mut tape = Tape::new();
    let mut b = Binder::new(params, true);
    let l = loss(&mut tape, &mut b);
    let grads = b.collect_grads(&tape.backward(l));

    let eval = |p: &ParamStore| {
        let mut t = Tape::inference();
        let mut b = Binder::new(p, false);
        let l = loss(&mut t, &mut b);
        t.value(l)[[0, 0]]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (String::new(), 0.0);
    let mut work = params.clone();
    for (name, g) in &grads {
        assert!(ParamGroup::of(name).unwrap().is_tunable());
        let n = g.len();
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for _ in 0..samples_per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let (r, c) = (i / g.ncols(), i % g.ncols());
            let orig = work.get(name).unwrap()[[r, c]];
            work.get_mut(name).unwrap()[[r, c]] = orig + eps;
            let lp = eval(&work);
            work.get_mut(name).unwrap()[[r, c]] = orig - eps;
            let lm = eval(&work);
            work.get_mut(name).unwrap()[[r, c]] = orig;
            an.push(g[[r, c]]);
            nu.push((lp - lm) / (2.0 * eps));
        }
        let diff: f64 = an.iter().zip(&nu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = nu.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Entries with no true gradient (e.g. attention key biases) only carry
        // finite-difference noise; the floor keeps them from dominating.
        let rel = diff / na.max(nn).max(1e-5);
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    worst
}

fn conv(x: &Mat, p: &ParamStore, name: &str, h: usize, w: usize) -> Mat {
    im2col3x3(x, h, w).dot(p.get(&format!("{name}.w")).unwrap()) + p.get(&format!("{name}.b")).unwrap()
}

/// The encoder with every adapter removed.
pub fn backbone_oracle(img: &Mat, p: &ParamStore, cfg: &EncoderConfig, h: usize, w: usize) -> Mat {
    let head = conv(img, p, "backbone.head", h, w);
    let mut x = head.clone();
    for g in 0..cfg.n_blocks {
        let t = conv(&x, p, &format!("backbone.g{g}.conv1"), h, w).mapv(gelu_scalar);
        let t = conv(&t, p, &format!("backbone.g{g}.conv2"), h, w);
        x = x + t;
    }
    conv(&x, p, "backbone.tail", h, w) + head
}

pub fn store<S: Into<String>>(entries: Vec<(S, Mat)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, m) in entries {
        s.insert(n, m).unwrap();
    }
    s
}
