//! Image-quality metrics.

use crate::error::{Error, Result};
use crate::optics::SpectralCube;
use crate::tensor::Real;

/// Side of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB, `10·log10(peak² / MSE)`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", &[a.len()], &[b.len()]));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn cube_psnr<T: Real>(a: &SpectralCube<T>, b: &SpectralCube<T>, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        let (x, y) = (a.dims(), b.dims());
        return Err(Error::shape("psnr", &[x.0, x.1, x.2], &[y.0, y.1, y.2]));
    }
    psnr(a.data(), b.data(), peak)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h×w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, &v)| v * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, &v)| v * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity of two single-channel `h×w` images with an
/// 11×11 Gaussian window (σ = 1.5) over valid positions.
pub fn ssim<T: Real>(a: &[T], b: &[T], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let a: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let aa = filter_valid(&prod(&a, &a), h, w, &taps);
    let bb = filter_valid(&prod(&b, &b), h, w, &taps);
    let ab = filter_valid(&prod(&a, &b), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Mean of per-channel SSIM.
pub fn cube_ssim<T: Real>(a: &SpectralCube<T>, b: &SpectralCube<T>, data_range: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        let (x, y) = (a.dims(), b.dims());
        return Err(Error::shape("ssim", &[x.0, x.1, x.2], &[y.0, y.1, y.2]));
    }
    let (h, w, c) = a.dims();
    let mut s = 0.0;
    for m in 0..c {
        s += ssim(a.channel(m), b.channel(m), h, w, data_range)?;
    }
    Ok(s / c as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&[0.5f64, 0.2], &[0.5, 0.2], 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&[1.0f64, 1.0], &[0.0, 2.0], 1.0).unwrap() - 0.0).abs() < 1e-12);
        let a = vec![0.3f64; 16];
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&[1.0f64], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn ssim_self_is_one_and_rejects_small_images() {
        let img: Vec<f64> = (0..144).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        assert_eq!(ssim(&img, &img, 12, 12, 1.0).unwrap(), 1.0);
        assert!(ssim(&img[..100], &img[..100], 10, 10, 1.0).is_err());
    }

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        // Checkerboard with varying amplitude: every local mean is near zero.
        let a: Vec<f64> = (0..196)
            .map(|i| {
                let sign = if (i / 14 + i % 14) % 2 == 0 { 1.0 } else { -1.0 };
                sign * (0.5 + ((i * 53) % 17) as f64 / 40.0)
            })
            .collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(ssim(&a, &neg, 14, 14, 2.0).unwrap() < 0.0);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(
            a in proptest::collection::vec(0.0f64..1.0, 169),
            b in proptest::collection::vec(0.0f64..1.0, 169),
        ) {
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            prop_assert_eq!(ssim(&a, &b, 13, 13, 1.0).unwrap(), ssim(&b, &a, 13, 13, 1.0).unwrap());
        }
    }
}
