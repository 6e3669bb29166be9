//! Disparity-guided arbitrary-scale upsampler.
//!
//! Per view: cross-view window attention against the other view's codes
//! warped into this view's frame, a squeeze-and-excitation style refinement,
//! then per-query decoding. Each query starts from the refined code of its
//! nearest LR cell plus a sinusoidal encoding of its offset from that cell,
//! alternates self-attention (own window) with cross-attention (warped
//! other-view window), and an MLP predicts an RGB residual on top of a
//! bilinear sample of the LR input.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{KeyIndex, Mat, Tape, Var, NONE};
use crate::encoder::view_key;
use crate::error::{Error, Result};
use crate::imaging::{bilinear_sample, nearest_cell, Image, QueryGrid};
use crate::params::{Binder, Init, ParamStore};
use crate::View;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpsamplerConfig {
    /// Attention windows are `(2k+1)^2` sites.
    pub window_radius: usize,
    pub n_rounds: usize,
    /// Frequency count of the positional encoding.
    pub posenc_freqs: usize,
    pub hidden: usize,
    /// Number of linear layers in the RGB head.
    pub mlp_layers: usize,
    /// Queries decoded per chunk at inference.
    pub chunk_size: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            window_radius: 1,
            n_rounds: 2,
            posenc_freqs: 10,
            hidden: 256,
            mlp_layers: 4,
            chunk_size: 4096,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp_layers < 1 || self.hidden == 0 || self.chunk_size == 0 {
            return Err(Error::Config("upsampler widths and chunk size must be positive".into()));
        }
        Ok(())
    }

    pub fn posenc_dim(&self) -> usize {
        2 * (1 + 2 * self.posenc_freqs)
    }
}

/// `(u, cos(pi u), sin(pi u), ..., cos(n pi u), sin(n pi u))` per axis,
/// axes concatenated.
pub fn positional_encode(rel: &[[f64; 2]], n: usize) -> Mat {
    let per = 1 + 2 * n;
    let mut out = Mat::zeros((rel.len(), 2 * per));
    for (i, r) in rel.iter().enumerate() {
        for (axis, &u) in r.iter().enumerate() {
            let base = axis * per;
            out[[i, base]] = u;
            for f in 1..=n {
                let a = f as f64 * PI * u;
                out[[i, base + 2 * f - 1]] = a.cos();
                out[[i, base + 2 * f]] = a.sin();
            }
        }
    }
    out
}

/// `(2k+1)^2` window around each center on an `h x w` lattice; sites outside
/// the lattice are absent.
pub fn window_keys(h: usize, w: usize, centers: &[(usize, usize)], k: usize) -> KeyIndex {
    let side = 2 * k + 1;
    let mut index = Vec::with_capacity(centers.len() * side * side);
    let k = k as isize;
    for &(cy, cx) in centers {
        for dy in -k..=k {
            for dx in -k..=k {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                index.push(if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                    (y as usize * w + x as usize) as u32
                } else {
                    NONE
                });
            }
        }
    }
    KeyIndex {
        n: centers.len(),
        keys: side * side,
        index,
    }
}

pub fn all_sites(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect()
}

pub(crate) fn init_upsampler(init: &mut Init<'_>, cfg: &UpsamplerConfig, channels: usize, share: bool) -> Result<()> {
    let c = channels;
    let p_dim = cfg.posenc_dim();
    let views: &[View] = if share { &[View::Left] } else { &[View::Left, View::Right] };
    for &v in views {
        let p = format!("upsampler.{}", view_key(share, v));
        for r in ["wq", "wk", "wv"] {
            init.uniform(&format!("{p}.fuse.{r}"), c, c, c, 1.0)?;
        }
        init.zeros(&format!("{p}.refine.conv1"), 9 * c, c)?;
        init.uniform(&format!("{p}.refine.conv2"), 9 * c, c, 9 * c, 1.0)?;
        init.uniform(&format!("{p}.token.w"), c + p_dim, c, c + p_dim, 1.0)?;
        init.zeros(&format!("{p}.token.b"), 1, c)?;
        for i in 0..cfg.n_rounds {
            for kind in ["self", "cross"] {
                for r in ["wq", "wk", "wv"] {
                    init.uniform(&format!("{p}.r{i}.{kind}.{r}"), c, c, c, 1.0)?;
                }
                init.uniform(&format!("{p}.r{i}.{kind}.wo"), c, c, c, 0.5)?;
            }
        }
        let mut dims = vec![2 * c + p_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.mlp_layers - 1));
        dims.push(3);
        for j in 0..cfg.mlp_layers {
            let (din, dout) = (dims[j], dims[j + 1]);
            if j + 1 == cfg.mlp_layers {
                init.zeros(&format!("{p}.mlp.l{j}.w"), din, dout)?;
            } else {
                init.uniform(&format!("{p}.mlp.l{j}.w"), din, dout, din, 2.0)?;
            }
            init.zeros(&format!("{p}.mlp.l{j}.b"), 1, dout)?;
        }
    }
    Ok(())
}

/// Windowed cross-view attention: queries from `own`, keys and values from
/// the warped other-view grid in a window around the same site.
#[allow(clippy::too_many_arguments)]
pub fn cross_view_fuse_on_tape(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    prefix: &str,
    own: Var,
    warped_other: Var,
    h: usize,
    w: usize,
    k: usize,
) -> Var {
    let c = tape.value(own).ncols();
    let wq = b.get(tape, &format!("{prefix}.fuse.wq"));
    let wk = b.get(tape, &format!("{prefix}.fuse.wk"));
    let wv = b.get(tape, &format!("{prefix}.fuse.wv"));
    let q = tape.matmul(own, wq);
    let kk = tape.matmul(warped_other, wk);
    let v = tape.matmul(warped_other, wv);
    let idx = Rc::new(window_keys(h, w, &all_sites(h, w), k));
    tape.attend(q, kk, v, idx, 1.0 / (c as f64).sqrt())
}

/// `z + Conv1(F) + F * sigmoid(Conv2(F))` with bias-free 3x3 convolutions.
pub fn se_refine_on_tape(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    prefix: &str,
    z: Var,
    f: Var,
    h: usize,
    w: usize,
) -> Var {
    let c1 = b.get(tape, &format!("{prefix}.refine.conv1"));
    let c2 = b.get(tape, &format!("{prefix}.refine.conv2"));
    let a = tape.conv3x3(f, c1, h, w);
    let g = tape.conv3x3(f, c2, h, w);
    let g = tape.sigmoid(g);
    let e = tape.mul(f, g);
    let y = tape.add(z, a);
    tape.add(y, e)
}

fn check_grid(m: &Mat, h: usize, w: usize, what: &str) -> Result<()> {
    if m.nrows() != h * w {
        return Err(Error::shape(format!("{what}: {} sites, expected {h}x{w}", m.nrows())));
    }
    Ok(())
}

/// Fuses both views: returns `(F_L, F_R)`.
#[allow(clippy::too_many_arguments)]
pub fn cross_view_fuse(
    z_left: &Mat,
    z_right: &Mat,
    z_right_to_left: &Mat,
    z_left_to_right: &Mat,
    h: usize,
    w: usize,
    params: &ParamStore,
    k: usize,
    share: bool,
) -> Result<(Mat, Mat)> {
    for (m, n) in [(z_left, "z_left"), (z_right, "z_right"), (z_right_to_left, "z_rl"), (z_left_to_right, "z_lr")] {
        check_grid(m, h, w, n)?;
        if m.ncols() != z_left.ncols() {
            return Err(Error::shape(format!("{n}: channel count differs")));
        }
    }
    let mut tape = Tape::inference();
    let mut b = Binder::new(params, false);
    let mut run = |own: &Mat, other: &Mat, view: View| {
        let o = tape.constant(own.clone());
        let t = tape.constant(other.clone());
        let p = format!("upsampler.{}", view_key(share, view));
        let f = cross_view_fuse_on_tape(&mut tape, &mut b, &p, o, t, h, w, k);
        tape.value(f).clone()
    };
    let fl = run(z_left, z_right_to_left, View::Left);
    let fr = run(z_right, z_left_to_right, View::Right);
    Ok((fl, fr))
}

pub fn se_refine(z: &Mat, f: &Mat, h: usize, w: usize, params: &ParamStore, prefix: &str) -> Result<Mat> {
    check_grid(z, h, w, "z")?;
    if z.dim() != f.dim() {
        return Err(Error::shape("se_refine: z and F differ in shape"));
    }
    let mut tape = Tape::inference();
    let mut b = Binder::new(params, false);
    let zv = tape.constant(z.clone());
    let fv = tape.constant(f.clone());
    let out = se_refine_on_tape(&mut tape, &mut b, prefix, zv, fv, h, w);
    Ok(tape.value(out).clone())
}

/// Grid-level inputs to the per-query decoder of one view, with the
/// attention keys and values of every round projected once.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub own: Var,
    pub other: Var,
    /// Per round: `[self_k, self_v, cross_k, cross_v]`.
    pub rounds: Vec<[Var; 4]>,
}

/// Plain-matrix snapshot of a [`PreparedView`] for chunked inference.
#[derive(Clone, Debug)]
pub struct PreparedGrids {
    pub own: Mat,
    pub other: Mat,
    pub rounds: Vec<[Mat; 4]>,
}

impl PreparedGrids {
    pub fn capture(tape: &Tape, v: &PreparedView) -> Self {
        Self {
            own: tape.value(v.own).clone(),
            other: tape.value(v.other).clone(),
            rounds: v.rounds.iter().map(|r| r.map(|x| tape.value(x).clone())).collect(),
        }
    }

    pub fn place(&self, tape: &mut Tape) -> PreparedView {
        PreparedView {
            own: tape.constant(self.own.clone()),
            other: tape.constant(self.other.clone()),
            rounds: self
                .rounds
                .iter()
                .map(|r| [0, 1, 2, 3].map(|i| tape.constant(r[i].clone())))
                .collect(),
        }
    }
}

pub fn prepare_view(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    prefix: &str,
    cfg: &UpsamplerConfig,
    refined: Var,
    warped_other: Var,
) -> PreparedView {
    let rounds = (0..cfg.n_rounds)
        .map(|i| {
            let mut proj = |src: Var, kind: &str, r: &str| {
                let wt = b.get(tape, &format!("{prefix}.r{i}.{kind}.{r}"));
                tape.matmul(src, wt)
            };
            [
                proj(refined, "self", "wk"),
                proj(refined, "self", "wv"),
                proj(warped_other, "cross", "wk"),
                proj(warped_other, "cross", "wv"),
            ]
        })
        .collect();
    PreparedView {
        own: refined,
        other: warped_other,
        rounds,
    }
}

/// Nearest LR cell of each query and its offset from that cell's center,
/// normalized by the LR cell extent to `[-1, 1]`.
pub fn locate_queries(coords: &[[f64; 2]], h: usize, w: usize) -> (Vec<(usize, usize)>, Vec<[f64; 2]>) {
    let mut cells = Vec::with_capacity(coords.len());
    let mut rel = Vec::with_capacity(coords.len());
    for &[y, x] in coords {
        let (iy, ix) = (nearest_cell(y, h), nearest_cell(x, w));
        let cy = -1.0 + (2 * iy + 1) as f64 / h as f64;
        let cx = -1.0 + (2 * ix + 1) as f64 / w as f64;
        cells.push((iy, ix));
        rel.push([((y - cy) * h as f64).clamp(-1.0, 1.0), ((x - cx) * w as f64).clamp(-1.0, 1.0)]);
    }
    (cells, rel)
}

/// Decodes RGB for every query of one view, `N x 3`.
#[allow(clippy::too_many_arguments)]
pub fn decode_on_tape(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    prefix: &str,
    cfg: &UpsamplerConfig,
    prep: &PreparedView,
    h: usize,
    w: usize,
    queries: &QueryGrid,
    lr_image: &Image,
) -> Result<Var> {
    queries.validate()?;
    if lr_image.dims() != (h, w) {
        return Err(Error::shape("LR image does not match the latent grid"));
    }
    let c = tape.value(prep.own).ncols();
    let scale = 1.0 / (c as f64).sqrt();
    let (cells, rel) = locate_queries(&queries.coords, h, w);
    let sites: Vec<usize> = cells.iter().map(|&(y, x)| y * w + x).collect();
    let idx = Rc::new(window_keys(h, w, &cells, cfg.window_radius));

    let pe = tape.constant(positional_encode(&rel, cfg.posenc_freqs));
    let own_at = tape.gather_rows(prep.own, &sites);
    let other_at = tape.gather_rows(prep.other, &sites);

    let tin = tape.concat_cols(&[own_at, pe]);
    let tw = b.get(tape, &format!("{prefix}.token.w"));
    let tb = b.get(tape, &format!("{prefix}.token.b"));
    let mut t = tape.linear(tin, tw, Some(tb));

    for (i, kv) in prep.rounds.iter().enumerate() {
        for (kind, k, v) in [("self", kv[0], kv[1]), ("cross", kv[2], kv[3])] {
            let wq = b.get(tape, &format!("{prefix}.r{i}.{kind}.wq"));
            let wo = b.get(tape, &format!("{prefix}.r{i}.{kind}.wo"));
            let q = tape.matmul(t, wq);
            let a = tape.attend(q, k, v, idx.clone(), scale);
            let a = tape.matmul(a, wo);
            t = tape.add(t, a);
        }
    }

    let mut x = tape.concat_cols(&[t, other_at, pe]);
    for j in 0..cfg.mlp_layers {
        let wt = b.get(tape, &format!("{prefix}.mlp.l{j}.w"));
        let bias = b.get(tape, &format!("{prefix}.mlp.l{j}.b"));
        x = tape.linear(x, wt, Some(bias));
        if j + 1 < cfg.mlp_layers {
            x = tape.gelu(x);
        }
    }
    let skip = tape.constant(bilinear_sample(lr_image, &queries.coords));
    Ok(tape.add(x, skip))
}
