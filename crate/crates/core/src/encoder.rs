//! Latent code encoder: a compact convolutional backbone with stereo,
//! spatial and scale adapters inserted after/inside each residual group.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{KeyIndex, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::StereoPair;
use crate::params::{Binder, Init, ParamStore};
use crate::View;

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 8;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub n_blocks: usize,
    pub adapter_bottleneck: usize,
    pub share_view_weights: bool,
    pub scale_embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            n_blocks: 4,
            adapter_bottleneck: 16,
            share_view_weights: true,
            scale_embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.scale_embed_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= self.channels {
            return Err(Error::Config(format!(
                "adapter bottleneck {} must be in [1, channels={})",
                self.adapter_bottleneck, self.channels
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scale conditioning `(r, 2/H_out, 2/W_out)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleConditioning {
    pub s: [f64; 3],
}

impl ScaleConditioning {
    pub fn new(r: f64, cell_h: f64, cell_w: f64) -> Result<Self> {
        if !(r > 0.0 && cell_h > 0.0 && cell_w > 0.0) || !(r.is_finite() && cell_h.is_finite() && cell_w.is_finite()) {
            return Err(Error::arg(format!("invalid scale conditioning ({r}, {cell_h}, {cell_w})")));
        }
        Ok(Self { s: [r, cell_h, cell_w] })
    }

    pub fn for_output(r: f64, h_out: usize, w_out: usize) -> Result<Self> {
        Self::new(r, 2.0 / h_out as f64, 2.0 / w_out as f64)
    }

    fn as_mat(&self) -> Mat {
        Mat::from_shape_vec((1, 3), self.s.to_vec()).expect("1x3")
    }
}

/// Per-view latent code grids, each `(h*w) x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGridPair {
    pub height: usize,
    pub width: usize,
    pub z_left: Mat,
    pub z_right: Mat,
}

impl FeatureGridPair {
    pub fn channels(&self) -> usize {
        self.z_left.ncols()
    }

    pub fn swapped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            z_left: self.z_right.clone(),
            z_right: self.z_left.clone(),
        }
    }
}

pub(crate) fn view_key(share: bool, view: View) -> &'static str {
    match (share, view) {
        (true, _) => "shared",
        (false, View::Left) => "left",
        (false, View::Right) => "right",
    }
}

pub(crate) fn init_encoder(init: &mut Init<'_>, cfg: &EncoderConfig) -> Result<()> {
    let c = cfg.channels;
    let m = cfg.adapter_bottleneck;
    let e = cfg.scale_embed_dim;
    init.uniform("backbone.head.w", 27, c, 27, 2.0)?;
    init.zeros("backbone.head.b", 1, c)?;
    for g in 0..cfg.n_blocks {
        for conv in ["conv1", "conv2"] {
            // Residual branches start small so the frozen stack stays well scaled.
            let gain = if conv == "conv1" { 2.0 } else { 0.5 };
            init.uniform(&format!("backbone.g{g}.{conv}.w"), 9 * c, c, 9 * c, gain)?;
            init.zeros(&format!("backbone.g{g}.{conv}.b"), 1, c)?;
        }

        let p = format!("adapter.spatial.g{g}");
        init.uniform(&format!("{p}.down.w"), c, m, c, 2.0)?;
        init.zeros(&format!("{p}.down.b"), 1, m)?;
        init.zeros(&format!("{p}.up.w"), m, c)?;
        init.zeros(&format!("{p}.up.b"), 1, c)?;

        let p = format!("adapter.scale.g{g}");
        init.uniform(&format!("{p}.embed1.w"), 3, e, 3, 2.0)?;
        init.zeros(&format!("{p}.embed1.b"), 1, e)?;
        init.uniform(&format!("{p}.embed2.w"), e, e, e, 1.0)?;
        init.zeros(&format!("{p}.embed2.b"), 1, e)?;
        init.uniform(&format!("{p}.gate.w"), e, c, e, 1.0)?;
        init.zeros(&format!("{p}.gate.b"), 1, c)?;
        init.zeros(&format!("{p}.ln.gamma"), 1, c)?;
        init.zeros(&format!("{p}.ln.beta"), 1, c)?;

        let views: &[View] = if cfg.share_view_weights { &[View::Left] } else { &[View::Left, View::Right] };
        for &v in views {
            let p = format!("adapter.stereo.g{g}.{}", view_key(cfg.share_view_weights, v));
            for proj in ["q", "k", "v"] {
                init.uniform(&format!("{p}.w{proj}"), c, c, c, 1.0)?;
                init.zeros(&format!("{p}.b{proj}"), 1, c)?;
            }
            init.zeros(&format!("{p}.gate"), 1, c)?;
        }
    }
    init.uniform("backbone.tail.w", 9 * c, c, 9 * c, 0.5)?;
    init.zeros("backbone.tail.b", 1, c)?;
    Ok(())
}

fn conv(tape: &mut Tape, b: &mut Binder<'_>, name: &str, x: Var, h: usize, w: usize) -> Var {
    let wt = b.get(tape, &format!("{name}.w"));
    let bias = b.get(tape, &format!("{name}.b"));
    let y = tape.conv3x3(x, wt, h, w);
    tape.add_row(y, bias)
}

fn linear(tape: &mut Tape, b: &mut Binder<'_>, name: &str, x: Var) -> Var {
    let wt = b.get(tape, &format!("{name}.w"));
    let bias = b.get(tape, &format!("{name}.b"));
    tape.linear(x, wt, Some(bias))
}

/// `x + Up(GELU(Down(x)))` with 1x1 projections through a bottleneck.
pub fn spatial_adapter(tape: &mut Tape, b: &mut Binder<'_>, prefix: &str, x: Var) -> Var {
    let d = linear(tape, b, &format!("{prefix}.down"), x);
    let d = tape.gelu(d);
    let u = linear(tape, b, &format!("{prefix}.up"), d);
    tape.add(x, u)
}

/// Per-channel sigmoid gate computed from the scale conditioning.
pub fn scale_gate(tape: &mut Tape, b: &mut Binder<'_>, prefix: &str, s: &ScaleConditioning) -> Var {
    let sv = tape.constant(s.as_mat());
    let e = linear(tape, b, &format!("{prefix}.embed1"), sv);
    let e = tape.gelu(e);
    let e = linear(tape, b, &format!("{prefix}.embed2"), e);
    let g = linear(tape, b, &format!("{prefix}.gate"), e);
    tape.sigmoid(g)
}

/// `LN(x) * gate(s) + x`, layer norm over channels at each site.
pub fn scale_adapter(tape: &mut Tape, b: &mut Binder<'_>, prefix: &str, x: Var, s: &ScaleConditioning) -> Var {
    let gate = scale_gate(tape, b, prefix, s);
    let n = tape.layer_norm_rows(x, LN_EPS);
    let gamma = b.get(tape, &format!("{prefix}.ln.gamma"));
    let beta = b.get(tape, &format!("{prefix}.ln.beta"));
    let n = tape.mul_row(n, gamma);
    let n = tape.add_row(n, beta);
    let m = tape.mul_row(n, gate);
    tape.add(x, m)
}

/// Every site attends over all sites of the same row.
pub fn row_keys(h: usize, w: usize) -> KeyIndex {
    let mut index = Vec::with_capacity(h * w * w);
    for y in 0..h {
        for _ in 0..w {
            index.extend((0..w).map(|x| (y * w + x) as u32));
        }
    }
    KeyIndex { n: h * w, keys: w, index }
}

/// Epipolar cross-attention between views: each row of one view attends
/// over the same row of the other, added back through a zero-initialized
/// per-channel gate.
#[allow(clippy::too_many_arguments)]
pub fn stereo_adapter(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    prefix: &str,
    share: bool,
    left: Var,
    right: Var,
    h: usize,
    w: usize,
) -> (Var, Var) {
    let keys = Rc::new(row_keys(h, w));
    let pl = format!("{prefix}.{}", view_key(share, View::Left));
    let pr = format!("{prefix}.{}", view_key(share, View::Right));
    let out_l = row_attention(tape, b, &pl, left, right, &keys);
    let out_r = row_attention(tape, b, &pr, right, left, &keys);
    (out_l, out_r)
}

fn row_attention(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    p: &str,
    own: Var,
    other: Var,
    keys: &Rc<KeyIndex>,
) -> Var {
    let c = tape.value(own).ncols();
    let mut proj = |tape: &mut Tape, x: Var, r: &str| {
        let w = b.get(tape, &format!("{p}.w{r}"));
        let bias = b.get(tape, &format!("{p}.b{r}"));
        tape.linear(x, w, Some(bias))
    };
    let q = proj(tape, own, "q");
    let k = proj(tape, other, "k");
    let v = proj(tape, other, "v");
    let a = tape.attend(q, k, v, keys.clone(), 1.0 / (c as f64).sqrt());
    let gate = b.get(tape, &format!("{p}.gate"));
    let a = tape.mul_row(a, gate);
    tape.add(own, a)
}

pub(crate) fn check_input(pair: &StereoPair) -> Result<()> {
    let (h, w) = pair.dims();
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::shape(format!(
            "encoder input {h}x{w} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}"
        )));
    }
    Ok(())
}

/// Builds the encoder on `tape`, returning the left and right code grids.
pub fn encode_on_tape(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    cfg: &EncoderConfig,
    pair: &StereoPair,
    s: &ScaleConditioning,
) -> Result<(Var, Var)> {
    check_input(pair)?;
    let (h, w) = pair.dims();
    let il = tape.constant(pair.left.pixels().clone());
    let ir = tape.constant(pair.right.pixels().clone());
    let heads = [il, ir].map(|img| conv(tape, b, "backbone.head", img, h, w));
    let mut xs = heads;
    for g in 0..cfg.n_blocks {
        for x in xs.iter_mut() {
            let t = conv(tape, b, &format!("backbone.g{g}.conv1"), *x, h, w);
            let t = tape.gelu(t);
            let t = spatial_adapter(tape, b, &format!("adapter.spatial.g{g}"), t);
            let t = conv(tape, b, &format!("backbone.g{g}.conv2"), t, h, w);
            let y = tape.add(*x, t);
            *x = scale_adapter(tape, b, &format!("adapter.scale.g{g}"), y, s);
        }
        let (l, r) = stereo_adapter(
            tape,
            b,
            &format!("adapter.stereo.g{g}"),
            cfg.share_view_weights,
            xs[0],
            xs[1],
            h,
            w,
        );
        xs = [l, r];
    }
    let mut out = [xs[0], xs[1]];
    for (o, head) in out.iter_mut().zip(heads) {
        let t = conv(tape, b, "backbone.tail", *o, h, w);
        *o = tape.add(t, head);
    }
    Ok((out[0], out[1]))
}

/// Inference-only encoding.
pub fn encode(
    pair: &StereoPair,
    s: &ScaleConditioning,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<FeatureGridPair> {
    let mut tape = Tape::inference();
    let mut b = Binder::new(params, false);
    let (l, r) = encode_on_tape(&mut tape, &mut b, cfg, pair, s)?;
    let (h, w) = pair.dims();
    Ok(FeatureGridPair {
        height: h,
        width: w,
        z_left: tape.value(l).clone(),
        z_right: tape.value(r).clone(),
    })
}
