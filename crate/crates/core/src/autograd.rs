//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Feature grids are stored as
//! `(h*w) x C` row-major matrices so that pointwise projections become plain
//! matrix products; spatial operators (3x3 convolution, windowed attention,
//! bilinear resampling) carry their own lattice metadata.
//!
//! Ops are coarse-grained and fused: each one records a single backward
//! closure. Nodes that do not depend on any gradient-requiring leaf store no
//! closure, so frozen sub-networks only pay for the input gradients they must
//! propagate.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Sentinel index marking an absent tap or key.
pub const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[Node], &Mat, &Mat) -> Vec<(usize, Mat)>>;

struct Node {
    value: Mat,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every gradient-requiring node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A fixed fan-in linear resampling operator: output row `i` is
/// `sum_t weights[i, t] * input[index[i, t]]`. Taps with index [`NONE`] are
/// skipped.
#[derive(Clone, Debug)]
pub struct RowMix {
    pub n_out: usize,
    pub taps: usize,
    pub index: Vec<u32>,
    pub weight: Vec<f64>,
}

impl RowMix {
    pub fn new(n_out: usize, taps: usize) -> Self {
        Self {
            n_out,
            taps,
            index: vec![NONE; n_out * taps],
            weight: vec![0.0; n_out * taps],
        }
    }

    pub fn set(&mut self, row: usize, tap: usize, index: usize, weight: f64) {
        self.index[row * self.taps + tap] = index as u32;
        self.weight[row * self.taps + tap] = weight;
    }

    /// Pure application of the operator outside of any tape.
    pub fn apply(&self, x: &Mat) -> Mat {
        let c = x.ncols();
        let mut out = Mat::zeros((self.n_out, c));
        for i in 0..self.n_out {
            let mut row = out.row_mut(i);
            for t in 0..self.taps {
                let j = self.index[i * self.taps + t];
                if j == NONE {
                    continue;
                }
                let wgt = self.weight[i * self.taps + t];
                row.scaled_add(wgt, &x.row(j as usize));
            }
        }
        out
    }
}

/// Key sets for attention: row `i` attends over `index[i*keys .. (i+1)*keys]`.
#[derive(Clone, Debug)]
pub struct KeyIndex {
    pub n: usize,
    pub keys: usize,
    pub index: Vec<u32>,
}

impl KeyIndex {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.index[i * self.keys..(i + 1) * self.keys]
    }
}

/// Softmax attention probabilities for every query row, laid out like
/// `idx.index` (zero where the key is absent).
pub fn attention_probs(q: &Mat, k: &Mat, idx: &KeyIndex, scale: f64) -> Vec<f64> {
    let mut probs = vec![0.0; idx.n * idx.keys];
    let mut logits = vec![0.0; idx.keys];
    for i in 0..idx.n {
        let qi = q.row(i);
        let keys = idx.row(i);
        let mut max = f64::NEG_INFINITY;
        for (t, &j) in keys.iter().enumerate() {
            if j == NONE {
                continue;
            }
            let l = scale * qi.dot(&k.row(j as usize));
            logits[t] = l;
            max = max.max(l);
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let p = &mut probs[i * idx.keys..(i + 1) * idx.keys];
        let mut total = 0.0;
        for (t, &j) in keys.iter().enumerate() {
            if j == NONE {
                continue;
            }
            let e = (logits[t] - max).exp();
            p[t] = e;
            total += e;
        }
        for v in p.iter_mut() {
            *v /= total;
        }
    }
    probs
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds the `(h*w) x (9*cin)` patch matrix for a zero-padded 3x3 convolution.
pub fn im2col3x3(x: &Mat, h: usize, w: usize) -> Mat {
    let cin = x.ncols();
    let mut cols = Mat::zeros((h * w, 9 * cin));
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let mut row = cols.row_mut(p);
            let row = row.as_slice_mut().expect("standard layout");
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = x.row(sy as usize * w + sx as usize);
                    let off = (ky * 3 + kx) * cin;
                    row[off..off + cin].copy_from_slice(src.as_slice().expect("standard layout"));
                }
            }
        }
    }
    cols
}

fn col2im3x3(cols: &Mat, h: usize, w: usize, cin: usize) -> Mat {
    let mut x = Mat::zeros((h * w, cin));
    for y in 0..h {
        for xx in 0..w {
            let row = cols.row(y * w + xx);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let off = (ky * 3 + kx) * cin;
                    let mut dst = x.row_mut(sy as usize * w + sx as usize);
                    for c in 0..cin {
                        dst[c] += row[off + c];
                    }
                }
            }
        }
    }
    x
}

fn sum_rows(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn check_same(a: &Mat, b: &Mat, op: &str) {
    assert_eq!(a.dim(), b.dim(), "{op}: operand shapes differ");
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records no backward closures.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Mat, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let root = &self.nodes[loss.0];
        grads[loss.0] = Some(Mat::ones(root.value.dim()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (pid, pg) in backward(&self.nodes, &node.value, &g) {
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "add");
        let value = self.value(a) + self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, g.clone()));
                }
                if nodes[ib].requires_grad {
                    out.push((ib, g.clone()));
                }
                out
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "sub");
        let value = self.value(a) - self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, g.clone()));
                }
                if nodes[ib].requires_grad {
                    out.push((ib, -g));
                }
                out
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "mul");
        let value = self.value(a) * self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, g * &nodes[ib].value));
                }
                if nodes[ib].requires_grad {
                    out.push((ib, g * &nodes[ia].value));
                }
                out
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ia = a.0;
        self.push(value, &[a], Box::new(move |_, _, g| vec![(ia, g * s)]))
    }

    /// Adds a `1 x C` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(vb.nrows() == 1 && vb.ncols() == va.ncols(), "add_row: bias must be 1 x C");
        let value = va + vb;
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, g.clone()));
                }
                if nodes[ib].requires_grad {
                    out.push((ib, sum_rows(g)));
                }
                out
            }),
        )
    }

    /// Multiplies every row of `a` elementwise by the `1 x C` row `gate`.
    pub fn mul_row(&mut self, a: Var, gate: Var) -> Var {
        let (va, vg) = (self.value(a), self.value(gate));
        assert!(vg.nrows() == 1 && vg.ncols() == va.ncols(), "mul_row: gate must be 1 x C");
        let value = va * vg;
        let (ia, ig) = (a.0, gate.0);
        self.push(
            value,
            &[a, gate],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, g * &nodes[ig].value));
                }
                if nodes[ig].requires_grad {
                    out.push((ig, sum_rows(&(g * &nodes[ia].value))));
                }
                out
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimensions differ");
        let value = va.dot(vb);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, g.dot(&nodes[ib].value.t())));
                }
                if nodes[ib].requires_grad {
                    out.push((ib, nodes[ia].value.t().dot(g)));
                }
                out
            }),
        )
    }

    /// `x * w + b` with `w: Cin x Cout` and optional `b: 1 x Cout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |nodes, _, g| {
                let mut d = nodes[ia].value.mapv(gelu_grad_scalar);
                d *= g;
                vec![(ia, d)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |_, y, g| {
                let mut d = y.mapv(|s| s * (1.0 - s));
                d *= g;
                vec![(ia, d)]
            }),
        )
    }

    /// Normalizes every row to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |_, xhat, g| {
                let mut gx = Mat::zeros(g.dim());
                Zip::from(gx.rows_mut())
                    .and(g.rows())
                    .and(xhat.rows())
                    .and(&inv_std)
                    .for_each(|mut gx, g, xh, &is| {
                        let mg = g.sum() / c;
                        let mgx = g.dot(&xh) / c;
                        for ((o, &gv), &xv) in gx.iter_mut().zip(g.iter()).zip(xh.iter()) {
                            *o = is * (gv - mg - xv * mgx);
                        }
                    });
                vec![(ia, gx)]
            }),
        )
    }

    /// Zero-padded 3x3 convolution of an `(h*w) x Cin` grid with `w: 9Cin x Cout`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, h: usize, w: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(weight));
        assert_eq!(vx.nrows(), h * w, "conv3x3: grid rows must equal h*w");
        assert_eq!(vw.nrows(), 9 * vx.ncols(), "conv3x3: weight must be 9*Cin x Cout");
        let value = im2col3x3(vx, h, w).dot(vw);
        let (ix, iw) = (x.0, weight.0);
        self.push(
            value,
            &[x, weight],
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                let cin = nodes[ix].value.ncols();
                if nodes[iw].requires_grad {
                    let cols = im2col3x3(&nodes[ix].value, h, w);
                    out.push((iw, cols.t().dot(g)));
                }
                if nodes[ix].requires_grad {
                    let gcols = g.dot(&nodes[iw].value.t());
                    out.push((ix, col2im3x3(&gcols, h, w, cin)));
                }
                out
            }),
        )
    }

    /// Scaled dot-product attention where query row `i` attends over the key
    /// rows listed in `idx.row(i)`. Queries with no valid key produce zeros.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, idx: Rc<KeyIndex>, scale: f64) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(vq.nrows(), idx.n, "attend: query count differs from index");
        assert_eq!(vq.ncols(), vk.ncols(), "attend: query/key widths differ");
        assert_eq!(vk.nrows(), vv.nrows(), "attend: key/value counts differ");
        let probs = attention_probs(vq, vk, &idx, scale);
        let mut value = Mat::zeros((idx.n, vv.ncols()));
        for i in 0..idx.n {
            let mut row = value.row_mut(i);
            for (t, &j) in idx.row(i).iter().enumerate() {
                if j != NONE {
                    row.scaled_add(probs[i * idx.keys + t], &vv.row(j as usize));
                }
            }
        }
        let (iq, ik, iv) = (q.0, k.0, v.0);
        self.push(
            value,
            &[q, k, v],
            Box::new(move |nodes, _, g| {
                let (vq, vk, vv) = (&nodes[iq].value, &nodes[ik].value, &nodes[iv].value);
                let (need_q, need_k, need_v) = (
                    nodes[iq].requires_grad,
                    nodes[ik].requires_grad,
                    nodes[iv].requires_grad,
                );
                let mut gq = Mat::zeros(vq.dim());
                let mut gk = Mat::zeros(vk.dim());
                let mut gv = Mat::zeros(vv.dim());
                let mut dlogit = vec![0.0; idx.keys];
                for i in 0..idx.n {
                    let keys = idx.row(i);
                    let p = &probs[i * idx.keys..(i + 1) * idx.keys];
                    let gi = g.row(i);
                    let mut weighted = 0.0;
                    for (t, &j) in keys.iter().enumerate() {
                        if j == NONE {
                            dlogit[t] = 0.0;
                            continue;
                        }
                        let dp = gi.dot(&vv.row(j as usize));
                        dlogit[t] = dp;
                        weighted += p[t] * dp;
                        if need_v {
                            gv.row_mut(j as usize).scaled_add(p[t], &gi);
                        }
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    for (t, &j) in keys.iter().enumerate() {
                        if j == NONE {
                            continue;
                        }
                        let dl = scale * p[t] * (dlogit[t] - weighted);
                        if need_q {
                            gq.row_mut(i).scaled_add(dl, &vk.row(j as usize));
                        }
                        if need_k {
                            gk.row_mut(j as usize).scaled_add(dl, &vq.row(i));
                        }
                    }
                }
                let mut out = Vec::new();
                if need_q {
                    out.push((iq, gq));
                }
                if need_k {
                    out.push((ik, gk));
                }
                if need_v {
                    out.push((iv, gv));
                }
                out
            }),
        )
    }

    /// Applies a fixed sparse resampling operator to the rows of `x`.
    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMix>) -> Var {
        let value = mix.apply(self.value(x));
        let ix = x.0;
        self.push(
            value,
            &[x],
            Box::new(move |nodes, _, g| {
                let mut gx = Mat::zeros(nodes[ix].value.dim());
                for i in 0..mix.n_out {
                    for t in 0..mix.taps {
                        let j = mix.index[i * mix.taps + t];
                        if j == NONE {
                            continue;
                        }
                        gx.row_mut(j as usize)
                            .scaled_add(mix.weight[i * mix.taps + t], &g.row(i));
                    }
                }
                vec![(ix, gx)]
            }),
        )
    }

    /// Selects rows of `x` by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let mut mix = RowMix::new(rows.len(), 1);
        for (i, &r) in rows.iter().enumerate() {
            mix.set(i, 0, r, 1.0);
        }
        self.row_mix(x, Rc::new(mix))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Mat::zeros((n, total));
        let mut off = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            assert_eq!(v.nrows(), n, "concat_cols: row counts differ");
            value.slice_mut(ndarray::s![.., off..off + wd]).assign(v);
            off += wd;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            parts,
            Box::new(move |nodes, _, g| {
                let mut out = Vec::new();
                let mut off = 0;
                for (&id, &wd) in ids.iter().zip(&widths) {
                    if nodes[id].requires_grad {
                        out.push((id, g.slice(ndarray::s![.., off..off + wd]).to_owned()));
                    }
                    off += wd;
                }
                out
            }),
        )
    }

    /// Mean absolute difference over all elements, as a `1 x 1` value.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "mean_abs_diff");
        let diff = self.value(a) - self.value(b);
        let n = diff.len() as f64;
        let value = Mat::from_elem((1, 1), diff.iter().map(|d| d.abs()).sum::<f64>() / n);
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |nodes, _, g| {
                let s = g[[0, 0]] / n;
                let sign = diff.mapv(|d| if d > 0.0 { s } else if d < 0.0 { -s } else { 0.0 });
                let mut out = Vec::new();
                if nodes[ia].requires_grad {
                    out.push((ia, sign.clone()));
                }
                if nodes[ib].requires_grad {
                    out.push((ib, -sign));
                }
                out
            }),
        )
    }

    /// Mean of two `1 x 1` values or any same-shaped values.
    pub fn mean2(&mut self, a: Var, b: Var) -> Var {
        let s = self.add(a, b);
        self.scale(s, 0.5)
    }

    /// Sum of all elements, as a `1 x 1` value.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |nodes, _, g| vec![(ia, Mat::from_elem(nodes[ia].value.dim(), g[[0, 0]]))]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx for the first input.
    fn check_unary<F>(x0: Mat, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = f(&mut tape, x);
        let probe = rand_mat(&mut rng, tape.value(y).nrows(), tape.value(y).ncols());
        let pv = tape.constant(probe.clone());
        let yp = tape.mul(y, pv);
        let loss = tape.sum_all(yp);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).unwrap().clone();

        let eval = |xv: Mat| {
            let mut t = Tape::inference();
            let x = t.leaf(xv, false);
            let y = f(&mut t, x);
            (t.value(y) * &probe).sum()
        };
        let h = 1e-5;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "grad mismatch at {idx}: analytic {a} fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 4, 5);
        check_unary(x.clone(), |t, x| t.gelu(x));
        check_unary(x.clone(), |t, x| t.sigmoid(x));
        check_unary(x.clone(), |t, x| t.layer_norm_rows(x, 1e-5));
        check_unary(x.clone(), |t, x| {
            let y = t.scale(x, 3.0);
            t.mul(y, x)
        });
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_mat(&mut rng, 5, 3);
        let b = rand_mat(&mut rng, 1, 3);
        let x = rand_mat(&mut rng, 4, 5);
        check_unary(x.clone(), |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            t.linear(x, w, Some(b))
        });
        let xs = x.clone();
        check_unary(w.clone(), move |t, w| {
            let x = t.constant(xs.clone());
            t.matmul(x, w)
        });
        let xs = rand_mat(&mut rng, 4, 3);
        check_unary(b.clone(), move |t, b| {
            let x = t.constant(xs.clone());
            let y = t.mul_row(x, b);
            t.add_row(y, b)
        });
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (4, 5);
        let x = rand_mat(&mut rng, h * w, 2);
        let wt = rand_mat(&mut rng, 18, 3);
        let wt2 = wt.clone();
        check_unary(x.clone(), move |t, x| {
            let k = t.constant(wt2.clone());
            t.conv3x3(x, k, h, w)
        });
        check_unary(wt, move |t, k| {
            let x = t.constant(x.clone());
            t.conv3x3(x, k, h, w)
        });
    }

    #[test]
    fn attend_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, c) = (5, 6, 3);
        let mut index = Vec::new();
        for i in 0..n {
            for t in 0..4 {
                index.push(if (i + t) % 5 == 0 { NONE } else { ((i + 2 * t) % m) as u32 });
            }
        }
        let idx = Rc::new(KeyIndex { n, keys: 4, index });
        let q = rand_mat(&mut rng, n, c);
        let k = rand_mat(&mut rng, m, c);
        let v = rand_mat(&mut rng, m, c);
        {
            let (k, v, idx) = (k.clone(), v.clone(), idx.clone());
            check_unary(q.clone(), move |t, q| {
                let k = t.constant(k.clone());
                let v = t.constant(v.clone());
                t.attend(q, k, v, idx.clone(), 0.7)
            });
        }
        {
            let (q, v, idx) = (q.clone(), v.clone(), idx.clone());
            check_unary(k.clone(), move |t, k| {
                let q = t.constant(q.clone());
                let v = t.constant(v.clone());
                t.attend(q, k, v, idx.clone(), 0.7)
            });
        }
        check_unary(v, move |t, v| {
            let q = t.constant(q.clone());
            let k = t.constant(k.clone());
            t.attend(q, k, v, idx.clone(), 0.7)
        });
    }

    #[test]
    fn mix_and_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 6, 2);
        let mut mix = RowMix::new(4, 2);
        mix.set(0, 0, 1, 0.25);
        mix.set(0, 1, 2, 0.75);
        mix.set(2, 0, 5, 1.0);
        mix.set(3, 1, 1, -0.5);
        let mix = Rc::new(mix);
        check_unary(x.clone(), move |t, x| {
            let y = t.row_mix(x, mix.clone());
            let z = t.gather_rows(x, &[0, 0, 3, 4]);
            t.concat_cols(&[y, z, y])
        });
    }

    #[test]
    fn mean_abs_diff_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 5, 3);
        let b = rand_mat(&mut rng, 5, 3);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), true);
        let vb = tape.constant(b.clone());
        let l = tape.mean_abs_diff(va, vb);
        let mut expect = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                expect += (a[[i, j]] - b[[i, j]]).abs();
            }
        }
        assert!((tape.value(l)[[0, 0]] - expect / 15.0).abs() < 1e-15);
        let g = tape.backward(l);
        let ga = g.wrt(va).unwrap();
        assert!((ga[[0, 0]].abs() - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_paths_store_no_closures() {
        let mut tape = Tape::new();
        let a = tape.constant(Mat::ones((2, 2)));
        let b = tape.gelu(a);
        assert!(!tape.requires_grad(b));
        let p = tape.leaf(Mat::ones((2, 2)), true);
        let c = tape.mul(b, p);
        assert!(tape.requires_grad(c));
        let g = tape.backward(c);
        assert!(g.wrt(a).is_none());
    }
}
