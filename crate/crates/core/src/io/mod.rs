//! On-disk formats, synthetic data and previews.
//!
//! * HSC: `"HSC1"`, little-endian `u32` H, W, C and dtype (0 = f32), then the
//!   payload in channel-major order `((m·H + x)·W + y)`.
//! * HSCW: `"HSCW"`, `u32` tensor count, then per tensor a `u32` name length,
//!   UTF-8 name bytes, `u32` rank, `u32` extents and an f32 payload.
//! * `<name>.meta`: plain `key=value` lines.

mod hsc;
mod meta;
mod png;
mod raster;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use hsc::{
    decode_hsc, decode_hscw, encode_hsc, encode_hscw, read_hsc, read_hscw, read_mask, read_measurement, write_hsc,
    write_hscw, write_mask, write_measurement, HscHeader, HSC_HEADER_LEN, HSC_MAGIC, HSCW_MAGIC,
};
pub use meta::{meta_path, Meta};
pub use png::{write_channel_pngs, write_loss_curve_png, ChannelScale};
pub use raster::import_raster_dir;
pub use synth::{generate_mask, generate_scene, SceneKind, SyntheticSceneSpec};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}
