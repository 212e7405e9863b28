use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optics::{CodedMask, SpectralCube};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    GaussianBlobs,
    GradientRamps,
    CheckerSpectra,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::GaussianBlobs, SceneKind::GradientRamps, SceneKind::CheckerSpectra];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::GaussianBlobs => "gaussian-blobs",
            SceneKind::GradientRamps => "gradient-ramps",
            SceneKind::CheckerSpectra => "checker-spectra",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("scene kind", format!("unknown kind `{s}`")))
    }
}

/// `smoothness` in (0, ∞) widens spatial features and spectral bumps; 1 is typical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub kind: SceneKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub smoothness: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(kind: SceneKind, h: usize, w: usize, c: usize, seed: u64) -> Self {
        SyntheticSceneSpec { kind, h, w, c, smoothness: 1.0, seed }
    }
}

/// Smooth spectrum: baseline plus one Gaussian bump.
fn bump_spectrum(rng: &mut ChaCha8Rng, c: usize, smoothness: f64) -> Vec<f64> {
    let center = rng.random_range(0.0..c as f64);
    let width = (rng.random_range(0.25..0.6) * c as f64 * smoothness).max(1.0);
    let base = rng.random_range(0.0..0.3);
    (0..c)
        .map(|m| {
            let t = (m as f64 - center) / width;
            base + (1.0 - base) * (-0.5 * t * t).exp()
        })
        .collect()
}

pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<SpectralCube<f32>> {
    let SyntheticSceneSpec { kind, h, w, c, smoothness, seed } = *spec;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid("generate_scene", format!("empty dims {h}x{w}x{c}")));
    }
    if !(smoothness.is_finite() && smoothness > 0.0) {
        return Err(Error::invalid("generate_scene", format!("smoothness must be positive, got {smoothness}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cube = vec![0.0f64; h * w * c];
    let idx = |x: usize, y: usize, m: usize| (m * h + x) * w + y;
    match kind {
        SceneKind::GaussianBlobs => {
            let background = bump_spectrum(&mut rng, c, smoothness);
            let level = rng.random_range(0.05..0.2);
            for x in 0..h {
                for y in 0..w {
                    for m in 0..c {
                        cube[idx(x, y, m)] = level * background[m];
                    }
                }
            }
            let n = rng.random_range(4..=8);
            let scale = smoothness * h.min(w) as f64 / 6.0;
            for _ in 0..n {
                let (cx, cy) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                let r = (scale * rng.random_range(0.5..1.5)).max(0.5);
                let amp = rng.random_range(0.3..1.0);
                let spectrum = bump_spectrum(&mut rng, c, smoothness);
                for x in 0..h {
                    for y in 0..w {
                        let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r);
                        let s = amp * (-0.5 * d2).exp();
                        for m in 0..c {
                            cube[idx(x, y, m)] += s * spectrum[m];
                        }
                    }
                }
            }
        }
        SceneKind::GradientRamps => {
            let n = rng.random_range(2..=3);
            for _ in 0..n {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let (ax, ay) = (angle.cos(), angle.sin());
                let spectrum = bump_spectrum(&mut rng, c, smoothness);
                let norm = (h.max(2) - 1) as f64 * ax.abs() + (w.max(2) - 1) as f64 * ay.abs();
                let x0 = if ax < 0.0 { (h - 1) as f64 * -ax } else { 0.0 };
                let y0 = if ay < 0.0 { (w - 1) as f64 * -ay } else { 0.0 };
                for x in 0..h {
                    for y in 0..w {
                        let t = (x as f64 * ax + y as f64 * ay + x0 + y0) / norm.max(1e-9);
                        for m in 0..c {
                            cube[idx(x, y, m)] += t * spectrum[m];
                        }
                    }
                }
            }
        }
        SceneKind::CheckerSpectra => {
            let tile = ((4.0 * smoothness).round() as usize).max(1);
            let (th, tw) = (h.div_ceil(tile), w.div_ceil(tile));
            let spectra: Vec<f64> = (0..th * tw * c).map(|_| rng.random::<f64>()).collect();
            for x in 0..h {
                for y in 0..w {
                    let t = (x / tile) * tw + y / tile;
                    for m in 0..c {
                        cube[idx(x, y, m)] = spectra[t * c + m];
                    }
                }
            }
        }
    }
    let peak = cube.iter().copied().fold(0.0, f64::max);
    let inv = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let data = cube.into_iter().map(|v| ((v * inv).clamp(0.0, 1.0)) as f32).collect();
    SpectralCube::new(h, w, c, data)
}

/// Seeded Bernoulli(`density`) binary mask.
pub fn generate_mask(h: usize, w: usize, density: f64, seed: u64) -> Result<CodedMask<f32>> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::invalid("generate_mask", format!("density {density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
    CodedMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_boundaries() {
        assert!(generate_mask(5, 7, 1.0, 3).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(generate_mask(5, 7, 0.0, 3).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(generate_mask(2, 2, 1.5, 0).is_err());
    }

    #[test]
    fn kind_names_parse() {
        for k in SceneKind::ALL {
            assert_eq!(k.name().parse::<SceneKind>().unwrap(), k);
        }
        assert!("plaid".parse::<SceneKind>().is_err());
    }
}
