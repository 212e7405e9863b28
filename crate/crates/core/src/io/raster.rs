use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optics::SpectralCube;

/// Builds a cube from one grayscale raster per channel, taken in file-name
/// order. Values are mapped to [0, 1] by the format's full range and then
/// divided by the cube maximum; that maximum is returned as the peak.
pub fn import_raster_dir(dir: &Path) -> Result<(SpectralCube<f32>, f64)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid("import_raster_dir", format!("no rasters in {}", dir.display())));
    }
    let mut dims = None;
    let mut data = Vec::new();
    for p in &files {
        let img = image::open(p).map_err(|source| Error::Image { path: p.clone(), source })?.into_luma16();
        let (w, h) = img.dimensions();
        match dims {
            None => dims = Some((h as usize, w as usize)),
            Some(d) if d != (h as usize, w as usize) => {
                return Err(Error::Format { path: p.clone(), msg: format!("raster is {h}x{w}, expected {}x{}", d.0, d.1) })
            }
            _ => {}
        }
        data.extend(img.pixels().map(|px| px.0[0] as f32 / u16::MAX as f32));
    }
    let (h, w) = dims.expect("at least one raster");
    let peak = data.iter().copied().fold(0.0f32, f32::max);
    if peak > 0.0 {
        data.iter_mut().for_each(|v| *v /= peak);
    }
    Ok((SpectralCube::new(h, w, files.len(), data)?, peak as f64))
}
