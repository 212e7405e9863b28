//! CASSI image formation: coded-aperture modulation, prism dispersion,
//! sensor integration, and the shift-back that undoes the shear.
//!
//! Cubes are stored channel-major, element `(x, y, m)` at `(m·H + x)·W + y`,
//! so a cube is also a `C×H×W` tensor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An `H×W×C` radiance cube.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube<T> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> SpectralCube<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("cube", format!("extents must be positive, got {h}×{w}×{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::invalid(
                "cube",
                format!("{h}×{w}×{c} cube needs {} values, got {}", h * w * c, data.len()),
            ));
        }
        Ok(SpectralCube { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        SpectralCube { h, w, c, data: vec![T::zero(); h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for m in 0..c {
            for x in 0..h {
                for y in 0..w {
                    data.push(f(x, y, m));
                }
            }
        }
        SpectralCube { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, m: usize) -> T {
        self.data[(m * self.h + x) * self.w + y]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, m: usize) -> &mut T {
        &mut self.data[(m * self.h + x) * self.w + y]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// One channel as an `H×W` row-major plane.
    pub fn channel(&self, m: usize) -> &[T] {
        &self.data[m * self.h * self.w..(m + 1) * self.h * self.w]
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.c, self.h, self.w], self.data.clone()).expect("cube extents are consistent")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(h, w, c, t.data().to_vec()),
            _ => Err(Error::invalid("cube", format!("expected C×H×W tensor, got {:?}", t.shape()))),
        }
    }

    pub fn cast<U: Real>(&self) -> SpectralCube<U> {
        SpectralCube {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// `H×W` transmission pattern with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedMask<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> CodedMask<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(Error::invalid("mask", format!("{h}×{w} mask with {} values", data.len())));
        }
        if data.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::invalid("mask", "transmission values must lie in [0, 1]"));
        }
        Ok(CodedMask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: T) -> Self {
        CodedMask { h, w, data: vec![value; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[x * self.w + y]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.h, self.w], self.data.clone()).expect("mask extents are consistent")
    }

    pub fn cast<U: Real>(&self) -> CodedMask<U> {
        CodedMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Linear prism dispersion: channel `m` (0-based) lands `step·m` columns to
/// the right on the widened sensor canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispersionConfig {
    pub step: usize,
    /// Channel whose image is not sheared in physical coordinates.
    pub reference_channel: usize,
}

impl DispersionConfig {
    pub fn new(step: usize) -> Self {
        DispersionConfig { step, reference_channel: 0 }
    }

    /// Column at which channel `m` starts on the sensor canvas.
    #[inline]
    pub fn offset(&self, m: usize) -> usize {
        self.step * m
    }

    /// Signed shear of channel `m` relative to the reference channel.
    pub fn relative_shift(&self, m: usize) -> isize {
        self.step as isize * (m as isize - self.reference_channel as isize)
    }

    pub fn sensor_width(&self, w: usize, c: usize) -> usize {
        w + self.step * c.saturating_sub(1)
    }
}

impl Default for DispersionConfig {
    fn default() -> Self {
        DispersionConfig::new(1)
    }
}

/// A cube sheared onto the widened canvas, `H × (W + d·(C−1)) × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct DispersedCube<T> {
    pub h: usize,
    pub wide: usize,
    pub c: usize,
    /// Channel-major, element `(x, col, m)` at `(m·H + x)·wide + col`.
    pub data: Vec<T>,
}

/// `H × (W + d·(C−1))` sensor image.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Measurement<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid("measurement", format!("{h}×{w} measurement with {} values", data.len())));
        }
        Ok(Measurement { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Measurement { h, w, data: vec![T::zero(); h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[x * self.w + y]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.h, self.w], self.data.clone()).expect("measurement extents are consistent")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w] => Self::new(h, w, t.data().to_vec()),
            _ => Err(Error::invalid("measurement", format!("expected H×W tensor, got {:?}", t.shape()))),
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn cast<U: Real>(&self) -> Measurement<U> {
        Measurement {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Additive sensor noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    None,
    Gaussian { sigma: f64, seed: u64 },
}

impl NoiseModel {
    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid("noise", format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(NoiseModel::Gaussian { sigma, seed })
    }
}

/// `out(:,:,m) = x(:,:,m) ⊙ M` for every channel.
pub fn modulate<T: Real>(x: &SpectralCube<T>, mask: &CodedMask<T>) -> Result<SpectralCube<T>> {
    if (x.h, x.w) != (mask.h, mask.w) {
        return Err(Error::shape("modulate", &[x.h, x.w], &[mask.h, mask.w]));
    }
    let plane = x.h * x.w;
    let mut out = x.clone();
    for ch in out.data.chunks_mut(plane) {
        ch.iter_mut().zip(&mask.data).for_each(|(v, &m)| *v *= m);
    }
    Ok(out)
}

/// Places channel `m` into a zero canvas at column offset `d·m`.
pub fn disperse<T: Real>(x: &SpectralCube<T>, cfg: &DispersionConfig) -> DispersedCube<T> {
    let wide = cfg.sensor_width(x.w, x.c);
    let mut data = vec![T::zero(); x.h * wide * x.c];
    for m in 0..x.c {
        let off = cfg.offset(m);
        for r in 0..x.h {
            let src = &x.data[(m * x.h + r) * x.w..(m * x.h + r + 1) * x.w];
            let base = (m * x.h + r) * wide + off;
            data[base..base + x.w].copy_from_slice(src);
        }
    }
    DispersedCube { h: x.h, wide, c: x.c, data }
}

/// Sums the dispersed channels onto the sensor and adds noise.
pub fn integrate<T: Real>(x: &DispersedCube<T>, noise: &NoiseModel) -> Measurement<T> {
    let plane = x.h * x.wide;
    let mut out = vec![T::zero(); plane];
    for ch in x.data.chunks(plane) {
        out.iter_mut().zip(ch).for_each(|(o, &v)| *o += v);
    }
    add_noise(&mut out, noise);
    Measurement { h: x.h, w: x.wide, data: out }
}

/// Adds seeded Gaussian noise in row-major order.
pub fn add_noise<T: Real>(values: &mut [T], noise: &NoiseModel) {
    if let NoiseModel::Gaussian { sigma, seed } = *noise {
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            for v in values.iter_mut() {
                *v += T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }
}

/// The full sensing operator: modulate, disperse, integrate.
pub fn forward_project<T: Real>(
    x: &SpectralCube<T>,
    mask: &CodedMask<T>,
    cfg: &DispersionConfig,
    noise: &NoiseModel,
) -> Result<Measurement<T>> {
    let modulated = modulate(x, mask)?;
    Ok(integrate(&disperse(&modulated, cfg), noise))
}

/// Input to the next reconstruction stage: `y` for the first stage, `y − z`
/// afterwards.
pub fn residual_input<T: Real>(y: &Measurement<T>, z: Option<&Measurement<T>>) -> Result<Measurement<T>> {
    match z {
        None => Ok(y.clone()),
        Some(z) => {
            if (y.h, y.w) != (z.h, z.w) {
                return Err(Error::shape("residual_input", &[y.h, y.w], &[z.h, z.w]));
            }
            let data = y.data.iter().zip(&z.data).map(|(&a, &b)| a - b).collect();
            Ok(Measurement { h: y.h, w: y.w, data })
        }
    }
}

/// Splits a measurement into `channels` windows of width `W`, the window for
/// channel `m` starting at column `d·m`.
pub fn shift_back<T: Real>(
    y: &Measurement<T>,
    channels: usize,
    cfg: &DispersionConfig,
) -> Result<SpectralCube<T>> {
    let needed = cfg.step * channels.saturating_sub(1);
    if channels == 0 || y.w <= needed {
        return Err(Error::invalid(
            "shift_back",
            format!("measurement width {} too narrow for {channels} channels at step {}", y.w, cfg.step),
        ));
    }
    let w = y.w - needed;
    let mut data = vec![T::zero(); channels * y.h * w];
    shift_back_into(&y.data, channels, y.h, w, cfg.step, &mut data, false);
    SpectralCube::new(y.h, w, channels, data)
}

/// Shift-back with an explicit expected cube width; rejects a measurement
/// whose width is not `W + d·(C−1)`.
pub fn shift_back_checked<T: Real>(
    y: &Measurement<T>,
    w: usize,
    channels: usize,
    cfg: &DispersionConfig,
) -> Result<SpectralCube<T>> {
    let expected = cfg.sensor_width(w, channels);
    if y.w != expected {
        return Err(Error::shape("shift_back", &[y.h, y.w], &[y.h, expected]));
    }
    shift_back(y, channels, cfg)
}

/// `out[m, r, col] (+)= y[r, col + step·m]`.
pub(crate) fn shift_back_into<T: Real>(
    y: &[T],
    c: usize,
    h: usize,
    w: usize,
    step: usize,
    out: &mut [T],
    add: bool,
) {
    let wide = w + step * c.saturating_sub(1);
    for m in 0..c {
        let off = step * m;
        for r in 0..h {
            let src = &y[r * wide + off..r * wide + off + w];
            let dst = &mut out[(m * h + r) * w..(m * h + r + 1) * w];
            if add {
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
}

/// `out[r, col + step·m] += x[m, r, col]`; the adjoint of [`shift_back_into`].
pub(crate) fn disperse_integrate_into<T: Real>(x: &[T], c: usize, h: usize, w: usize, step: usize, out: &mut [T]) {
    let wide = w + step * c.saturating_sub(1);
    for m in 0..c {
        let off = step * m;
        for r in 0..h {
            let src = &x[(m * h + r) * w..(m * h + r + 1) * w];
            let dst = &mut out[r * wide + off..r * wide + off + w];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
}
