//! Slice-level kernels used by the graph operations. Every reduction runs in
//! a fixed loop order so results depend only on the inputs.

use crate::tensor::{lit, strides, Real};

/// `c (+)= a · b` with `a: n×k`, `b: k×m`, `c: n×m`.
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: n×k`, `b: m×k`, `c: n×m`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * m + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: k×n`, `b: k×m`, `c: n×m`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// Geometry of a grouped 2-D convolution over a single `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output index range `[lo, hi)` for which `o*stride + tap - pad` lands in `[0, extent)`.
    fn valid(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let off = tap as i64 - self.pad as i64;
        // o*s + off >= 0  and  o*s + off <= extent - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_incl = (extent as i64 - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_extent as i64);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Visits every (output channel, input channel, tap) triple with the valid
/// output ranges for that tap.
#[inline]
fn for_each_tap(
    g: &ConvGeom,
    mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), (usize, usize)),
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    for co in 0..g.c_out {
        let grp = co / cout_g;
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let kbase = (co * cin_g + cil) * g.k * g.k;
            for ky in 0..g.k {
                let ry = g.valid(ky, g.h, oh);
                for kx in 0..g.k {
                    let rx = g.valid(kx, g.w, ow);
                    f(co, ci, kbase + ky * g.k + kx, ky, kx, ry, rx);
                }
            }
        }
    }
}

/// Kernel layout `[c_out, c_in/groups, k, k]`. Accumulates into `out`.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], kernel: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, s, pad) = (g.h, g.w, g.stride, g.pad);
    for_each_tap(g, |co, ci, kidx, ky, kx, (y0, y1), (x0, x1)| {
        let wv = kernel[kidx];
        if wv == T::zero() || x0 >= x1 {
            return;
        }
        for oy in y0..y1 {
            let iy = oy * s + ky - pad;
            let orow = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
            let irow = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
            if s == 1 {
                let ix0 = x0 + kx - pad;
                for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                    *o += wv * i;
                }
            } else {
                for ox in x0..x1 {
                    orow[ox] += wv * irow[ox * s + kx - pad];
                }
            }
        }
    });
}

/// Gradient with respect to the input, accumulated into `dx`.
pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, dout: &[T], kernel: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, s, pad) = (g.h, g.w, g.stride, g.pad);
    for_each_tap(g, |co, ci, kidx, ky, kx, (y0, y1), (x0, x1)| {
        let wv = kernel[kidx];
        if wv == T::zero() || x0 >= x1 {
            return;
        }
        for oy in y0..y1 {
            let iy = oy * s + ky - pad;
            let orow = &dout[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
            let irow = &mut dx[(ci * h + iy) * w..(ci * h + iy + 1) * w];
            if s == 1 {
                let ix0 = x0 + kx - pad;
                for (i, &o) in irow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&orow[x0..x1]) {
                    *i += wv * o;
                }
            } else {
                for ox in x0..x1 {
                    irow[ox * s + kx - pad] += wv * orow[ox];
                }
            }
        }
    });
}

/// Gradient with respect to the kernel, accumulated into `dk`.
pub fn conv2d_backward_kernel<T: Real>(g: &ConvGeom, dout: &[T], x: &[T], dk: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, s, pad) = (g.h, g.w, g.stride, g.pad);
    for_each_tap(g, |co, ci, kidx, ky, kx, (y0, y1), (x0, x1)| {
        if x0 >= x1 {
            return;
        }
        let mut acc = T::zero();
        for oy in y0..y1 {
            let iy = oy * s + ky - pad;
            let orow = &dout[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
            let irow = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
            if s == 1 {
                let ix0 = x0 + kx - pad;
                for (&o, &i) in orow[x0..x1].iter().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                    acc += o * i;
                }
            } else {
                for ox in x0..x1 {
                    acc += orow[ox] * irow[ox * s + kx - pad];
                }
            }
        }
        dk[kidx] += acc;
    });
}

/// Transposed convolution without padding: kernel `[c_in, c_out, k, k]`,
/// output `[c_out, (h-1)·stride + k, (w-1)·stride + k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.stride + self.k
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.stride + self.k
    }
}

pub fn conv_t_forward<T: Real>(g: &ConvTGeom, x: &[T], kernel: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for ci in 0..g.c_in {
        for co in 0..g.c_out {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = kernel[((ci * g.c_out + co) * g.k + ky) * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for iy in 0..g.h {
                        let oy = iy * g.stride + ky;
                        let irow = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        let obase = (co * oh + oy) * ow + kx;
                        for (ix, &v) in irow.iter().enumerate() {
                            out[obase + ix * g.stride] += wv * v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_t_backward<T: Real>(
    g: &ConvTGeom,
    dout: &[T],
    x: &[T],
    kernel: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for ci in 0..g.c_in {
        for co in 0..g.c_out {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let kidx = ((ci * g.c_out + co) * g.k + ky) * g.k + kx;
                    let wv = kernel[kidx];
                    let mut acc = T::zero();
                    for iy in 0..g.h {
                        let oy = iy * g.stride + ky;
                        let obase = (co * oh + oy) * ow + kx;
                        let ibase = (ci * g.h + iy) * g.w;
                        for ix in 0..g.w {
                            let o = dout[obase + ix * g.stride];
                            acc += o * x[ibase + ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[ibase + ix] += wv * o;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
}

/// Softmax over the middle extent of an `(outer, len, inner)` view.
pub fn softmax_forward<T: Real>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(x[at(l)]);
            }
            let mut z = T::zero();
            for l in 0..len {
                let e = (x[at(l)] - mx).exp();
                out[at(l)] = e;
                z += e;
            }
            let inv = T::one() / z;
            for l in 0..len {
                out[at(l)] *= inv;
            }
        }
    }
}

/// `dx += y ⊙ (dy − Σ dy⊙y)` along the softmax axis.
pub fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut dot = T::zero();
            for l in 0..len {
                dot += dy[at(l)] * y[at(l)];
            }
            for l in 0..len {
                dx[at(l)] += y[at(l)] * (dy[at(l)] - dot);
            }
        }
    }
}

/// Per-slice statistics saved by the layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    (outer, len, inner): (usize, usize, usize),
    eps: T,
) -> NormStats<T> {
    let mut mean = vec![T::zero(); outer * inner];
    let mut rstd = vec![T::zero(); outer * inner];
    let inv_len = T::one() / lit::<T>(len as f64);
    for o in 0..outer {
        let m = &mut mean[o * inner..(o + 1) * inner];
        for l in 0..len {
            let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (mv, &v) in m.iter_mut().zip(row) {
                *mv += v;
            }
        }
        m.iter_mut().for_each(|v| *v *= inv_len);
        let r = &mut rstd[o * inner..(o + 1) * inner];
        for l in 0..len {
            let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
            for ((rv, &v), &mv) in r.iter_mut().zip(row).zip(m.iter()) {
                let d = v - mv;
                *rv += d * d;
            }
        }
        r.iter_mut()
            .for_each(|v| *v = T::one() / (*v * inv_len + eps).sqrt());
        for l in 0..len {
            let span = (o * len + l) * inner..(o * len + l + 1) * inner;
            let (gv, bv) = (gain[l], bias[l]);
            for (((ov, &v), &mv), &rv) in out[span.clone()]
                .iter_mut()
                .zip(&x[span])
                .zip(m.iter())
                .zip(r.iter())
            {
                *ov = (v - mv) * rv * gv + bv;
            }
        }
    }
    NormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    stats: &NormStats<T>,
    dy: &[T],
    dims: (usize, usize, usize),
    mut dx: Option<&mut [T]>,
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (outer, len, inner) = dims;
    let inv_len = T::one() / lit::<T>(len as f64);
    let mut s1 = vec![T::zero(); inner];
    let mut s2 = vec![T::zero(); inner];
    for o in 0..outer {
        let m = &stats.mean[o * inner..(o + 1) * inner];
        let r = &stats.rstd[o * inner..(o + 1) * inner];
        s1.iter_mut().for_each(|v| *v = T::zero());
        s2.iter_mut().for_each(|v| *v = T::zero());
        for l in 0..len {
            let base = (o * len + l) * inner;
            let gv = gain[l];
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..inner {
                let xhat = (x[base + i] - m[i]) * r[i];
                let d = dy[base + i];
                dg += d * xhat;
                db += d;
                let dxhat = d * gv;
                s1[i] += dxhat;
                s2[i] += dxhat * xhat;
            }
            if let Some(dgain) = dgain.as_deref_mut() {
                dgain[l] += dg;
            }
            if let Some(dbias) = dbias.as_deref_mut() {
                dbias[l] += db;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let gv = gain[l];
                for i in 0..inner {
                    let xhat = (x[base + i] - m[i]) * r[i];
                    let dxhat = dy[base + i] * gv;
                    dx[base + i] += r[i] * (dxhat - s1[i] * inv_len - xhat * s2[i] * inv_len);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Iterates a row-major odometer over `shape`, calling `f(out_offset, src_offset)`
/// where the source offset advances by `src_strides`.
pub fn strided_walk(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let (inner, inner_stride) = (shape[last], src_strides[last]);
    let mut out = 0usize;
    loop {
        let mut s = src;
        for _ in 0..inner {
            f(out, s);
            out += 1;
            s += inner_stride;
        }
        // carry into the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `dst = permute(src)` where `dst.shape[i] = shape[perm[i]]`.
pub fn permute_into<T: Real>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T], add: bool) {
    let st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    if add {
        strided_walk(&out_shape, &src_strides, |o, s| dst[o] += src[s]);
    } else {
        strided_walk(&out_shape, &src_strides, |o, s| dst[o] = src[s]);
    }
}

/// Copies (or adds) the box `extent` from `src` at `src_off` into `dst` at `dst_off`.
#[allow(clippy::too_many_arguments)]
pub fn box_transfer<T: Real>(
    src: &[T],
    src_shape: &[usize],
    src_off: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    dst_off: &[usize],
    extent: &[usize],
    add: bool,
) {
    if extent.contains(&0) {
        return;
    }
    let rank = extent.len();
    let ss = strides(src_shape);
    let ds = strides(dst_shape);
    let s0: usize = src_off.iter().zip(&ss).map(|(a, b)| a * b).sum();
    let d0: usize = dst_off.iter().zip(&ds).map(|(a, b)| a * b).sum();
    if rank == 0 {
        if add {
            dst[d0] += src[s0];
        } else {
            dst[d0] = src[s0];
        }
        return;
    }
    let run = extent[rank - 1];
    let outer_shape = &extent[..rank - 1];
    let mut idx = vec![0usize; rank - 1];
    loop {
        let so = s0 + idx.iter().zip(&ss).map(|(a, b)| a * b).sum::<usize>();
        let dof = d0 + idx.iter().zip(&ds).map(|(a, b)| a * b).sum::<usize>();
        let s = &src[so..so + run];
        let d = &mut dst[dof..dof + run];
        if add {
            d.iter_mut().zip(s).for_each(|(a, &b)| *a += b);
        } else {
            d.copy_from_slice(s);
        }
        let mut ax = outer_shape.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < outer_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Cyclic shift: `dst[(i + shift) mod n] (+)= src[i]` along every axis.
pub fn roll_into<T: Real>(src: &[T], shape: &[usize], shifts: &[isize], dst: &mut [T], add: bool) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let st = strides(shape);
    let rank = shape.len();
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &e)| s.rem_euclid(e as isize) as usize)
        .collect();
    let mut idx = vec![0usize; rank];
    for (i, &v) in src.iter().enumerate() {
        let mut rem = i;
        for ax in 0..rank {
            idx[ax] = rem / st[ax];
            rem %= st[ax];
        }
        let mut o = 0;
        for ax in 0..rank {
            o += ((idx[ax] + norm[ax]) % shape[ax]) * st[ax];
        }
        if add {
            dst[o] += v;
        } else {
            dst[o] = v;
        }
    }
}
