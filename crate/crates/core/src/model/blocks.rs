//! Building blocks of a reconstruction stage. Every block has a `declare_*`
//! function that registers its parameters and a forward function that
//! looks them up by the same names. Features are single images laid out
//! `C×H×W`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

use super::params::{BoundParams, Declarations, Init};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub(crate) fn declare_conv(d: &mut Declarations, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
    d.declare(format!("{name}.w"), &[c_out, c_in, k, k], Init::Uniform(fan_in_bound(c_in * k * k)));
    if bias {
        d.declare(format!("{name}.b"), &[c_out], Init::Zeros);
    }
}

fn declare_depthwise(d: &mut Declarations, name: &str, c: usize, k: usize) {
    d.declare(format!("{name}.w"), &[c, 1, k, k], Init::Uniform(fan_in_bound(k * k)));
}

fn declare_norm(d: &mut Declarations, name: &str, c: usize) {
    d.declare(format!("{name}.g"), &[c], Init::Const(1.0));
    d.declare(format!("{name}.b"), &[c], Init::Zeros);
}

/// Adds a per-channel bias `b: [C]` to `x: C×H×W`.
pub(crate) fn channel_bias<T: Real>(g: &mut Graph<T>, x: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = g.shape(b)[0];
    let b3 = g.reshape(b, &[c, 1, 1])?;
    let bb = g.broadcast_to(b3, &shape)?;
    g.add(x, bb)
}

/// Same-padded convolution `{name}.w` plus optional bias `{name}.b`.
pub(crate) fn conv<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var, bias: bool) -> Result<Var> {
    let y = g.conv2d(x, p.get(&format!("{name}.w"))?)?;
    if bias {
        channel_bias(g, y, p.get(&format!("{name}.b"))?)
    } else {
        Ok(y)
    }
}

fn depthwise<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var) -> Result<Var> {
    g.depthwise_conv2d(x, p.get(&format!("{name}.w"))?)
}

/// Layer normalisation over the channel axis.
pub(crate) fn norm<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{name}.g"))?;
    let bias = p.get(&format!("{name}.b"))?;
    g.layernorm(x, 0, gain, bias)
}

// ---------------------------------------------------------------------------
// spectral unmixing

pub fn declare_unmix(d: &mut Declarations, name: &str, c: usize) {
    declare_conv(d, &format!("{name}.fuse"), c, 2 * c, 1, true);
    for k in [3, 5, 7] {
        declare_conv(d, &format!("{name}.k{k}"), c, c, k, true);
    }
}

/// Concatenates the shifted-back cube with the mask, fuses back to `C`
/// channels with a 1×1 convolution, then sums parallel 3×3, 5×5 and 7×7
/// convolutions.
pub fn unmix<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, shifted: Var, mask: Var) -> Result<Var> {
    let (ss, ms) = (g.shape(shifted).to_vec(), g.shape(mask).to_vec());
    if ss.len() != 3 || ss != ms {
        return Err(Error::shape("unmix", &ss, &ms));
    }
    let x = g.concat(&[shifted, mask], 0)?;
    let x = conv(g, p, &format!("{name}.fuse"), x, true)?;
    let a = conv(g, p, &format!("{name}.k3"), x, true)?;
    let b = conv(g, p, &format!("{name}.k5"), x, true)?;
    let c = conv(g, p, &format!("{name}.k7"), x, true)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

// ---------------------------------------------------------------------------
// feed-forward network

pub fn declare_ffn(d: &mut Declarations, name: &str, c: usize, mult: usize) {
    declare_conv(d, &format!("{name}.in"), c * mult, c, 1, true);
    declare_depthwise(d, &format!("{name}.dw"), c * mult, 3);
    declare_conv(d, &format!("{name}.out"), c, c * mult, 1, true);
}

/// 1×1 expand, GELU, depthwise 3×3, GELU, 1×1 project.
pub fn ffn<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.in"), x, true)?;
    let h = g.gelu(h);
    let h = depthwise(g, p, &format!("{name}.dw"), h)?;
    let h = g.gelu(h);
    conv(g, p, &format!("{name}.out"), h, true)
}

// ---------------------------------------------------------------------------
// spectral attention

const L2_EPS: f64 = 1e-12;

pub fn declare_spectral_msa(d: &mut Declarations, name: &str, c: usize, heads: usize) {
    for w in ["q", "k", "v"] {
        declare_conv(d, &format!("{name}.{w}"), c, c, 1, false);
    }
    d.declare(format!("{name}.sigma"), &[heads], Init::Const(1.0));
    declare_conv(d, &format!("{name}.proj"), c, c, 1, true);
    declare_depthwise(d, &format!("{name}.pos"), c, 3);
}

/// Divides each row of `x: B×n×L` by its L2 norm.
fn l2_normalize_rows<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, shape.len() - 1)?;
    let ss = g.add_scalar(ss, lit(L2_EPS));
    let n = g.sqrt(ss)?;
    let n = g.broadcast_to(n, &shape)?;
    g.div(x, n)
}

/// Attention with channel maps as tokens: per head,
/// `softmax(σ_j · q̂_j k̂_jᵀ) v_j` where `q̂, k̂` are L2-normalised over pixels.
/// Returns the attended values (`C×H×W`) and `v`.
pub fn spectral_attention_core<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    sigma: Var,
) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let heads = g.shape(sigma)[0];
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid("spectral_attention", format!("{heads} heads do not divide {c} channels")));
    }
    let dh = c / heads;
    let split = [heads, dh, h * w];
    let q = g.reshape(q, &split)?;
    let k = g.reshape(k, &split)?;
    let v3 = g.reshape(v, &split)?;
    let q = l2_normalize_rows(g, q)?;
    let k = l2_normalize_rows(g, k)?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let logits = g.batch_matmul(q, kt)?;
    let s3 = g.reshape(sigma, &[heads, 1, 1])?;
    let s3 = g.broadcast_to(s3, &[heads, dh, dh])?;
    let logits = g.mul(logits, s3)?;
    let attn = g.softmax(logits, 2)?;
    let out = g.batch_matmul(attn, v3)?;
    g.reshape(out, &[c, h, w])
}

/// Spectral multi-head self-attention: `concat(heads)·W + f(V)`.
pub fn spectral_msa<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var) -> Result<Var> {
    let q = conv(g, p, &format!("{name}.q"), x, false)?;
    let k = conv(g, p, &format!("{name}.k"), x, false)?;
    let v = conv(g, p, &format!("{name}.v"), x, false)?;
    let att = spectral_attention_core(g, q, k, v, p.get(&format!("{name}.sigma"))?)?;
    let out = conv(g, p, &format!("{name}.proj"), att, true)?;
    let pos = depthwise(g, p, &format!("{name}.pos"), v)?;
    g.add(out, pos)
}

pub fn declare_spectral_ab(d: &mut Declarations, name: &str, c: usize, heads: usize, ffn_mult: usize) {
    declare_norm(d, &format!("{name}.norm1"), c);
    declare_spectral_msa(d, &format!("{name}.msa"), c, heads);
    declare_norm(d, &format!("{name}.norm2"), c);
    declare_ffn(d, &format!("{name}.ffn"), c, ffn_mult);
}

/// Pre-norm spectral attention followed by a pre-norm feed-forward, both residual.
pub fn spectral_ab<T: Real>(g: &mut Graph<T>, p: &BoundParams<'_, T>, name: &str, x: Var) -> Result<Var> {
    let h = norm(g, p, &format!("{name}.norm1"), x)?;
    let h = spectral_msa(g, p, &format!("{name}.msa"), h)?;
    let x = g.add(x, h)?;
    let h = norm(g, p, &format!("{name}.norm2"), x)?;
    let h = ffn(g, p, &format!("{name}.ffn"), h)?;
    g.add(x, h)
}

// ---------------------------------------------------------------------------
// windowed spatial attention

/// Static geometry of one windowed-attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowGeom {
    pub fn new(channels: usize, heads: usize, window: usize, h: usize, w: usize) -> Result<Self> {
        if window == 0 || heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::invalid(
                "spatial_attention",
                format!("window {window}, {heads} heads for {channels} channels"),
            ));
        }
        Ok(WindowGeom {
            channels,
            heads,
            window,
            padded_h: h.div_ceil(window) * window,
            padded_w: w.div_ceil(window) * window,
        })
    }

    pub fn windows(&self) -> (usize, usize) {
        (self.padded_h / self.window, self.padded_w / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Half-window cyclic shift, disabled when a single window spans an axis.
    pub fn shift(&self) -> usize {
        if self.padded_h > self.window && self.padded_w > self.window {
            self.window / 2
        } else {
            0
        }
    }
}

/// `C×Hp×Wp` → `(nWh·nWw·heads) × s² × dh`.
pub fn window_partition<T: Real>(g: &mut Graph<T>, x: Var, geom: &WindowGeom) -> Result<Var> {
    let (nh, nw) = geom.windows();
    let s = geom.window;
    let dh = geom.head_dim();
    let x = g.reshape(x, &[geom.heads, dh, nh, s, nw, s])?;
    let x = g.permute(x, &[2, 4, 0, 3, 5, 1])?;
    g.reshape(x, &[nh * nw * geom.heads, s * s, dh])
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Real>(g: &mut Graph<T>, x: Var, geom: &WindowGeom) -> Result<Var> {
    let (nh, nw) = geom.windows();
    let s = geom.window;
    let dh = geom.head_dim();
    let x = g.reshape(x, &[nh, nw, geom.heads, s, s, dh])?;
    let x = g.permute(x, &[2, 5, 0, 3, 1, 4])?;
    g.reshape(x, &[geom.channels, geom.padded_h, geom.padded_w])
}

/// Flat indices into a `heads × (2s−1)²` bias table giving `heads × s² × s²`.
pub fn relative_position_index(heads: usize, s: usize) -> Vec<usize> {
    let span = 2 * s - 1;
    let t = s * s;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            let (ri, ci) = (i / s, i % s);
            for j in 0..t {
                let (rj, cj) = (j / s, j % s);
                let rel = (ri + s - 1 - rj) * span + (ci + s - 1 - cj);
                idx.push(h * span * span + rel);
            }
        }
    }
    idx
}

/// Additive mask `nW × s² × s²` that blocks attention between pixels that
/// were not neighbours before the cyclic shift.
pub fn shifted_window_mask<T: Real>(geom: &WindowGeom) -> Tensor<T> {
    let (hp, wp, s, sh) = (geom.padded_h, geom.padded_w, geom.window, geom.shift());
    let region = |v: usize, extent: usize| -> usize {
        if v < extent - s {
            0
        } else if v < extent - sh {
            1
        } else {
            2
        }
    };
    let (nh, nw) = geom.windows();
    let t = s * s;
    let mut data = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let label = |i: usize| {
                let (r, c) = (wy * s + i / s, wx * s + i % s);
                region(r, hp) * 3 + region(c, wp)
            };
            for i in 0..t {
                for j in 0..t {
                    data.push(if label(i) == label(j) { T::zero() } else { lit(-100.0) });
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, t, t], data).expect("mask extents are consistent")
}

pub fn declare_window_msa(d: &mut Declarations, name: &str, c: usize, heads: usize, s: usize) {
    for w in ["q", "k", "v"] {
        declare_conv(d, &format!("{name}.{w}"), c, c, 1, false);
    }
    d.declare(format!("{name}.bias_table"), &[heads, (2 * s - 1) * (2 * s - 1)], Init::Zeros);
    declare_conv(d, &format!("{name}.proj"), c, c, 1, true);
}

/// Per-window attention `softmax(q kᵀ/√d + B [+ mask]) v` on partitioned
/// `q, k, v` of shape `(nW·heads) × s² × dh`. `bias` is `heads × s² × s²`.
pub fn window_attention_core<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    mask: Option<&Tensor<T>>,
    geom: &WindowGeom,
) -> Result<Var> {
    let (nh, nw) = geom.windows();
    let n_win = nh * nw;
    let t = geom.tokens();
    let heads = geom.heads;
    let scale = T::one() / lit::<T>(geom.head_dim() as f64).sqrt();
    let q = g.scale(q, scale);
    let kt = g.permute(k, &[0, 2, 1])?;
    let logits = g.batch_matmul(q, kt)?;
    let b4 = g.reshape(bias, &[1, heads, t, t])?;
    let b4 = g.broadcast_to(b4, &[n_win, heads, t, t])?;
    let b3 = g.reshape(b4, &[n_win * heads, t, t])?;
    let mut logits = g.add(logits, b3)?;
    if let Some(m) = mask {
        let m = g.constant(m.clone().reshaped(&[n_win, 1, t, t])?);
        let m = g.broadcast_to(m, &[n_win, heads, t, t])?;
        let m = g.reshape(m, &[n_win * heads, t, t])?;
        logits = g.add(logits, m)?;
    }
    let attn = g.softmax(logits, 2)?;
    g.batch_matmul(attn, v)
}

/// Window (optionally shifted-window) multi-head self-attention on `C×H×W`.
pub fn window_msa<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    name: &str,
    x: Var,
    heads: usize,
    window: usize,
    shifted: bool,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let geom = WindowGeom::new(c, heads, window, h, w)?;
    let mut x = x;
    if (geom.padded_h, geom.padded_w) != (h, w) {
        x = g.pad(x, &[(0, 0), (0, geom.padded_h - h), (0, geom.padded_w - w)])?;
    }
    let shift = if shifted { geom.shift() } else { 0 };
    if shift > 0 {
        x = g.roll(x, &[0, -(shift as isize), -(shift as isize)])?;
    }
    let q = conv(g, p, &format!("{name}.q"), x, false)?;
    let k = conv(g, p, &format!("{name}.k"), x, false)?;
    let v = conv(g, p, &format!("{name}.v"), x, false)?;
    let q = window_partition(g, q, &geom)?;
    let k = window_partition(g, k, &geom)?;
    let v = window_partition(g, v, &geom)?;
    let t = geom.tokens();
    let table = p.get(&format!("{name}.bias_table"))?;
    let bias = g.gather(table, &relative_position_index(heads, window), &[heads, t, t])?;
    let mask = (shift > 0).then(|| shifted_window_mask::<T>(&geom));
    let out = window_attention_core(g, q, k, v, bias, mask.as_ref(), &geom)?;
    let out = window_merge(g, out, &geom)?;
    let mut out = conv(g, p, &format!("{name}.proj"), out, true)?;
    if shift > 0 {
        out = g.roll(out, &[0, shift as isize, shift as isize])?;
    }
    if (geom.padded_h, geom.padded_w) != (h, w) {
        out = g.slice(out, &[0, 0, 0], &[c, h, w])?;
    }
    Ok(out)
}

pub fn declare_spatial_ab(d: &mut Declarations, name: &str, c: usize, heads: usize, s: usize, ffn_mult: usize) {
    declare_norm(d, &format!("{name}.norm1"), c);
    declare_window_msa(d, &format!("{name}.wmsa"), c, heads, s);
    declare_norm(d, &format!("{name}.norm2"), c);
    declare_window_msa(d, &format!("{name}.swmsa"), c, heads, s);
    declare_norm(d, &format!("{name}.norm3"), c);
    declare_ffn(d, &format!("{name}.ffn"), c, ffn_mult);
}

/// W-MSA, shifted W-MSA and FFN, each pre-normed and residual.
pub fn spatial_ab<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams<'_, T>,
    name: &str,
    x: Var,
    heads: usize,
    window: usize,
) -> Result<Var> {
    let h = norm(g, p, &format!("{name}.norm1"), x)?;
    let h = window_msa(g, p, &format!("{name}.wmsa"), h, heads, window, false)?;
    let x = g.add(x, h)?;
    let h = norm(g, p, &format!("{name}.norm2"), x)?;
    let h = window_msa(g, p, &format!("{name}.swmsa"), h, heads, window, true)?;
    let x = g.add(x, h)?;
    let h = norm(g, p, &format!("{name}.norm3"), x)?;
    let h = ffn(g, p, &format!("{name}.ffn"), h)?;
    g.add(x, h)
}
