use crate::error::{Error, Result};
use crate::optics;
use crate::tensor::{lit, split_axis, strides, Real, Tensor};

use super::kernels::{self, ConvGeom, ConvTGeom};
use super::{Graph, NodesView, Op, Var};

const LAYERNORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    fn unary_out(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.any_requires_grad(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x · s` for a scalar `s`.
    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.unary_out(x, out, Op::Scale(x, s))
    }

    /// `x + s` for a scalar `s`.
    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.unary_out(x, out, Op::AddScalar(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::invalid("sqrt", "input must be strictly positive"));
        }
        let out = self.value(x).map(|v| v.sqrt());
        Ok(self.unary_out(x, out, Op::Sqrt(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.unary_out(x, out, Op::Gelu(x))
    }

    /// Matrix product of `a: n×k` and `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b, n, k, m }, rg))
    }

    /// Batched matrix product of `a: B×n×k` and `b: B×k×m`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * n * m];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::matmul_nn(
                &da[bi * n * k..(bi + 1) * n * k],
                &db[bi * k * m..(bi + 1) * k * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let rg = self.any_requires_grad(&[a, b]);
        let value = Tensor::new(vec![batch, n, m], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, batch, n, k, m }, rg))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let dims = split_axis(&shape, axis);
        let mut out = vec![T::zero(); shape.iter().product()];
        kernels::softmax_forward(self.value(x).data(), &mut out, dims.0, dims.1, dims.2);
        let value = Tensor::new(shape, out)?;
        Ok(self.unary_out(x, value, Op::Softmax { x, dims }))
    }

    /// Same-size convolution of `x: C_in×H×W` with `kernel: C_out×C_in×k×k`, stride 1.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let k = self.kernel_extent("conv2d", kernel)?;
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("same padding needs an odd kernel, got {k}")));
        }
        self.conv2d_general(x, kernel, 1, k / 2, 1)
    }

    /// Depthwise same-size convolution with `kernel: C×1×k×k`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let k = self.kernel_extent("depthwise_conv2d", kernel)?;
        if k % 2 == 0 {
            return Err(Error::invalid(
                "depthwise_conv2d",
                format!("same padding needs an odd kernel, got {k}"),
            ));
        }
        let c = self.shape(x).first().copied().unwrap_or(0);
        self.conv2d_general(x, kernel, 1, k / 2, c)
    }

    fn kernel_extent(&self, op: &'static str, kernel: Var) -> Result<usize> {
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[2] != ks[3] || ks[2] == 0 {
            return Err(Error::invalid(op, format!("kernel must be [C_out, C_in, k, k], got {ks:?}")));
        }
        Ok(ks[2])
    }

    /// Grouped convolution with explicit stride and symmetric zero padding.
    pub fn conv2d_general(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 3 || ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", xs, ks));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ks[0],
            h: xs[1],
            w: xs[2],
            k: ks[2],
            stride,
            pad,
            groups,
        };
        if stride == 0
            || groups == 0
            || !geom.c_in.is_multiple_of(groups)
            || !geom.c_out.is_multiple_of(groups)
            || ks[1] * groups != geom.c_in
            || geom.h + 2 * pad < geom.k
            || geom.w + 2 * pad < geom.k
        {
            return Err(Error::shape("conv2d", xs, ks));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); geom.c_out * oh * ow];
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data(), &mut out);
        let rg = self.any_requires_grad(&[x, kernel]);
        let value = Tensor::new(vec![geom.c_out, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, geom }, rg))
    }

    /// Transposed convolution (no padding) with `kernel: C_in×C_out×k×k`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] || ks[2] != ks[3] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", xs, ks));
        }
        let geom = ConvTGeom {
            c_in: xs[0],
            c_out: ks[1],
            h: xs[1],
            w: xs[2],
            k: ks[2],
            stride,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); geom.c_out * oh * ow];
        kernels::conv_t_forward(&geom, self.value(x).data(), self.value(kernel).data(), &mut out);
        let rg = self.any_requires_grad(&[x, kernel]);
        let value = Tensor::new(vec![geom.c_out, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, kernel, geom }, rg))
    }

    /// Standardises `x` along `axis` then applies `gain` and `bias` (both of
    /// that axis' extent).
    pub fn layernorm(&mut self, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid("layernorm", format!("bad axis {axis} for {shape:?}")));
        }
        let len = shape[axis];
        for p in [gain, bias] {
            if self.value(p).len() != len {
                return Err(Error::shape("layernorm", &[len], self.shape(p)));
            }
        }
        let dims = split_axis(&shape, axis);
        let mut out = vec![T::zero(); shape.iter().product()];
        let stats = kernels::layernorm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            dims,
            lit(LAYERNORM_EPS),
        );
        let rg = self.any_requires_grad(&[x, gain, bias]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, dims, stats }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.unary_out(x, value, Op::Reshape(x)))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::permute_into(self.value(x).data(), &shape, perm, &mut out, false);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary_out(x, value, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Sub-box starting at `offset` with extents `extent`.
    pub fn slice(&mut self, x: Var, offset: &[usize], extent: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if offset.len() != shape.len()
            || extent.len() != shape.len()
            || offset.iter().zip(extent).zip(&shape).any(|((o, e), s)| o + e > *s)
        {
            return Err(Error::invalid(
                "slice",
                format!("offset {offset:?} + extent {extent:?} outside {shape:?}"),
            ));
        }
        let mut out = vec![T::zero(); extent.iter().product()];
        let zeros = vec![0; shape.len()];
        kernels::box_transfer(self.value(x).data(), &shape, offset, &mut out, extent, &zeros, extent, false);
        let value = Tensor::new(extent.to_vec(), out)?;
        Ok(self.unary_out(x, value, Op::Slice { x, offset: offset.to_vec() }))
    }

    /// Range `start..start+len` along one axis.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("slice", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut offset = vec![0; shape.len()];
        let mut extent = shape;
        offset[axis] = start;
        extent[axis] = len;
        self.slice(x, &offset, &extent)
    }

    /// Zero padding with `(before, after)` counts per axis.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if pads.len() != shape.len() {
            return Err(Error::invalid("pad", format!("{} pad pairs for rank {}", pads.len(), shape.len())));
        }
        let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(s, (b, a))| s + b + a).collect();
        let before: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let zeros = vec![0; shape.len()];
        kernels::box_transfer(self.value(x).data(), &shape, &zeros, &mut out, &out_shape, &before, &shape, false);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary_out(x, value, Op::Pad { x, before }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut off = vec![0; first.len()];
        let zeros = vec![0; first.len()];
        for &v in inputs {
            let s = self.shape(v).to_vec();
            kernels::box_transfer(self.value(v).data(), &s, &zeros, &mut out, &out_shape, &off, &s, false);
            off[axis] += s[axis];
        }
        let rg = self.any_requires_grad(inputs);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Cyclic shift along every axis; positive shifts move data to higher indices.
    pub fn roll(&mut self, x: Var, shifts: &[isize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shifts.len() != shape.len() {
            return Err(Error::invalid("roll", format!("{} shifts for rank {}", shifts.len(), shape.len())));
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::roll_into(self.value(x).data(), &shape, shifts, &mut out, false);
        let value = Tensor::new(shape, out)?;
        Ok(self.unary_out(x, value, Op::Roll { x, shifts: shifts.to_vec() }))
    }

    /// Numpy-style broadcast of `x` to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let src_strides = broadcast_strides(&xs, shape).ok_or_else(|| Error::shape("broadcast_to", &xs, shape))?;
        let mut out = vec![T::zero(); shape.iter().product()];
        let src = self.value(x).data();
        kernels::strided_walk(shape, &src_strides, |o, s| out[o] = src[s]);
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.unary_out(x, value, Op::BroadcastTo { x }))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary_out(x, value, Op::SumAxis { x, axis }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.unary_out(x, Tensor::scalar(s), Op::SumAll(x))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / lit::<T>(n as f64))
    }

    /// `out.flat[i] = x.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::invalid("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.value(x).data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.unary_out(x, value, Op::Gather { x, index: index.to_vec() }))
    }

    /// Shears each channel of `x: C×H×W` by `step·m` columns and sums over
    /// channels, giving `H × (W + step·(C−1))`.
    pub fn disperse_integrate(&mut self, x: Var, step: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("disperse_integrate", format!("expected C×H×W, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let wide = w + step * c.saturating_sub(1);
        let mut out = vec![T::zero(); h * wide];
        optics::disperse_integrate_into(self.value(x).data(), c, h, w, step, &mut out);
        let value = Tensor::new(vec![h, wide], out)?;
        Ok(self.unary_out(x, value, Op::DisperseIntegrate { x, step }))
    }

    /// Reads `channels` width-`w` windows out of `y: H×W'` at offsets `step·m`.
    pub fn shift_back(&mut self, y: Var, channels: usize, step: usize) -> Result<Var> {
        let s = self.shape(y).to_vec();
        let needed = step * channels.saturating_sub(1);
        if s.len() != 2 || channels == 0 || s[1] <= needed {
            return Err(Error::invalid(
                "shift_back",
                format!("measurement {s:?} too narrow for {channels} channels at step {step}"),
            ));
        }
        let (h, w) = (s[0], s[1] - needed);
        let mut out = vec![T::zero(); channels * h * w];
        optics::shift_back_into(self.value(y).data(), channels, h, w, step, &mut out, false);
        let value = Tensor::new(vec![channels, h, w], out)?;
        Ok(self.unary_out(y, value, Op::ShiftBack { y, step }))
    }
}

/// Strides into `from` that realise a broadcast to `to`, or `None` if incompatible.
pub(crate) fn broadcast_strides(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let lead = to.len() - from.len();
    let st = strides(from);
    let mut out = vec![0; to.len()];
    for (i, &t) in to.iter().enumerate().skip(lead) {
        let f = from[i - lead];
        if f == t {
            out[i] = st[i - lead];
        } else if f != 1 {
            return None;
        }
    }
    Some(out)
}

fn acc_into<T: Real>(
    nodes: &NodesView<'_, T>,
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes.requires_grad(v) {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes.value(v).len()]);
    f(g);
}

/// Accumulates the vector-Jacobian product of node `idx` for upstream `g`.
pub(crate) fn vjp<T: Real>(nodes: &NodesView<'_, T>, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match nodes.op(idx) {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_into(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            acc_into(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Sub(a, b) => {
            acc_into(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            acc_into(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes.value(*a).data(), nodes.value(*b).data());
            acc_into(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            });
            acc_into(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (nodes.value(*a).data(), nodes.value(*b).data());
            acc_into(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / vb[i];
                }
            });
            acc_into(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            });
        }
        Op::Scale(x, s) => {
            let s = *s;
            acc_into(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s));
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            acc_into(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Sqrt(x) => {
            let y = nodes.value(Var(idx)).data();
            let half: T = lit(0.5);
            acc_into(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * half / y[i];
                }
            });
        }
        Op::Gelu(x) => {
            let xv = nodes.value(*x).data();
            acc_into(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            });
        }
        Op::MatMul { a, b, n, k, m } => {
            let (n, k, m) = (*n, *k, *m);
            let (va, vb) = (nodes.value(*a).data(), nodes.value(*b).data());
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            acc_into(nodes, grads, *a, |d| kernels::matmul_nt(g, vb, d, n, m, k));
            acc_into(nodes, grads, *b, |d| kernels::matmul_tn(va, g, d, k, n, m));
        }
        Op::BatchMatMul { a, b, batch, n, k, m } => {
            let (batch, n, k, m) = (*batch, *n, *k, *m);
            let (va, vb) = (nodes.value(*a).data(), nodes.value(*b).data());
            acc_into(nodes, grads, *a, |d| {
                for bi in 0..batch {
                    kernels::matmul_nt(
                        &g[bi * n * m..(bi + 1) * n * m],
                        &vb[bi * k * m..(bi + 1) * k * m],
                        &mut d[bi * n * k..(bi + 1) * n * k],
                        n,
                        m,
                        k,
                    );
                }
            });
            acc_into(nodes, grads, *b, |d| {
                for bi in 0..batch {
                    kernels::matmul_tn(
                        &va[bi * n * k..(bi + 1) * n * k],
                        &g[bi * n * m..(bi + 1) * n * m],
                        &mut d[bi * k * m..(bi + 1) * k * m],
                        k,
                        n,
                        m,
                    );
                }
            });
        }
        Op::Softmax { x, dims } => {
            let y = nodes.value(Var(idx)).data();
            let (o, l, i) = *dims;
            acc_into(nodes, grads, *x, |d| kernels::softmax_backward(y, g, d, o, l, i));
        }
        Op::Conv2d { x, kernel, geom } => {
            let (vx, vk) = (nodes.value(*x).data(), nodes.value(*kernel).data());
            acc_into(nodes, grads, *x, |d| kernels::conv2d_backward_input(geom, g, vk, d));
            acc_into(nodes, grads, *kernel, |d| kernels::conv2d_backward_kernel(geom, g, vx, d));
        }
        Op::ConvTranspose2d { x, kernel, geom } => {
            let (vx, vk) = (nodes.value(*x).data(), nodes.value(*kernel).data());
            acc_into(nodes, grads, *x, |d| kernels::conv_t_backward(geom, g, vx, vk, Some(d), None));
            acc_into(nodes, grads, *kernel, |d| kernels::conv_t_backward(geom, g, vx, vk, None, Some(d)));
        }
        Op::LayerNorm { x, gain, bias, dims, stats } => {
            let (vx, vg) = (nodes.value(*x).data(), nodes.value(*gain).data());
            let run = |dx: Option<&mut [T]>, dg: Option<&mut [T]>, db: Option<&mut [T]>| {
                kernels::layernorm_backward(vx, vg, stats, g, *dims, dx, dg, db)
            };
            acc_into(nodes, grads, *x, |d| run(Some(d), None, None));
            acc_into(nodes, grads, *gain, |d| run(None, Some(d), None));
            acc_into(nodes, grads, *bias, |d| run(None, None, Some(d)));
        }
        Op::Permute { x, perm } => {
            let out_shape = nodes.value(Var(idx)).shape();
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            acc_into(nodes, grads, *x, |d| kernels::permute_into(g, out_shape, &inv, d, true));
        }
        Op::Slice { x, offset } => {
            let xs = nodes.value(*x).shape();
            let os = nodes.value(Var(idx)).shape();
            let zeros = vec![0; os.len()];
            acc_into(nodes, grads, *x, |d| kernels::box_transfer(g, os, &zeros, d, xs, offset, os, true));
        }
        Op::Pad { x, before } => {
            let xs = nodes.value(*x).shape();
            let os = nodes.value(Var(idx)).shape();
            let zeros = vec![0; xs.len()];
            acc_into(nodes, grads, *x, |d| kernels::box_transfer(g, os, before, d, xs, &zeros, xs, true));
        }
        Op::Concat { inputs, axis } => {
            let os = nodes.value(Var(idx)).shape();
            let mut off = vec![0; os.len()];
            let zeros = vec![0; os.len()];
            for &v in inputs {
                let s = nodes.value(v).shape();
                acc_into(nodes, grads, v, |d| kernels::box_transfer(g, os, &off, d, s, &zeros, s, true));
                off[*axis] += s[*axis];
            }
        }
        Op::Roll { x, shifts } => {
            let shape = nodes.value(*x).shape();
            let neg: Vec<isize> = shifts.iter().map(|s| -s).collect();
            acc_into(nodes, grads, *x, |d| kernels::roll_into(g, shape, &neg, d, true));
        }
        Op::BroadcastTo { x } => {
            let xs = nodes.value(*x).shape();
            let os = nodes.value(Var(idx)).shape();
            let st = broadcast_strides(xs, os).expect("validated in forward");
            acc_into(nodes, grads, *x, |d| kernels::strided_walk(os, &st, |o, s| d[s] += g[o]));
        }
        Op::SumAxis { x, axis } => {
            let xs = nodes.value(*x).shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            acc_into(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for l in 0..len {
                        let row = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dv, &gv) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv += gv;
                        }
                    }
                }
            });
        }
        Op::SumAll(x) => {
            let g0 = g[0];
            acc_into(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::Gather { x, index } => {
            acc_into(nodes, grads, *x, |d| {
                for (&i, &gv) in index.iter().zip(g) {
                    d[i] += gv;
                }
            });
        }
        Op::DisperseIntegrate { x, step } => {
            let xs = nodes.value(*x).shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            acc_into(nodes, grads, *x, |d| optics::shift_back_into(g, c, h, w, *step, d, true));
        }
        Op::ShiftBack { y, step } => {
            let os = nodes.value(Var(idx)).shape();
            let (c, h, w) = (os[0], os[1], os[2]);
            acc_into(nodes, grads, *y, |d| optics::disperse_integrate_into(g, c, h, w, *step, d));
        }
    }
}
