use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::optics::SpectralCube;
use crate::tensor::Real;

/// Min-max range used to map one channel to 8 bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelScale {
    pub min: f64,
    pub max: f64,
}

/// Writes `<stem>_chNN.png` per channel, each stretched to its own range.
pub fn write_channel_pngs<T: Real>(cube: &SpectralCube<T>, dir: &Path, stem: &str) -> Result<Vec<(PathBuf, ChannelScale)>> {
    let (h, w, c) = cube.dims();
    let mut out = Vec::with_capacity(c);
    for m in 0..c {
        let ch = cube.channel(m);
        let (min, max) = ch
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
        let span = if max > min { max - min } else { 1.0 };
        let img = GrayImage::from_fn(w as u32, h as u32, |y, x| {
            let v = (ch[x as usize * w + y as usize].as_f64() - min) / span;
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let path = dir.join(format!("{stem}_ch{m:02}.png"));
        img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        out.push((path, ChannelScale { min, max }));
    }
    Ok(out)
}

/// Line plot of `values` on a white background, log-scaled when all positive.
pub fn write_loss_curve_png(path: &Path, values: &[f64]) -> Result<()> {
    const W: u32 = 480;
    const H: u32 = 240;
    const M: u32 = 12;
    let mut img = GrayImage::from_pixel(W, H, Luma([255]));
    for x in M..W - M {
        img.put_pixel(x, H - M, Luma([160]));
    }
    for y in M..H - M {
        img.put_pixel(M, y, Luma([160]));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() >= 2 {
        let log = finite.iter().all(|&v| v > 0.0);
        let tf = |v: f64| if log { v.ln() } else { v };
        let lo = finite.iter().map(|&v| tf(v)).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(|&v| tf(v)).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (pw, ph) = ((W - 2 * M) as f64, (H - 2 * M) as f64);
        let point = |i: usize, v: f64| {
            let px = M as f64 + pw * i as f64 / (finite.len() - 1) as f64;
            let py = (H - M) as f64 - ph * (tf(v) - lo) / span;
            (px, py)
        };
        for i in 1..finite.len() {
            let (x0, y0) = point(i - 1, finite[i - 1]);
            let (x1, y1) = point(i, finite[i]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                img.put_pixel((x.round() as u32).min(W - 1), (y.round() as u32).min(H - 1), Luma([0]));
            }
        }
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
