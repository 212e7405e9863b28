use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::optics::{CodedMask, Measurement, SpectralCube};
use crate::tensor::{Real, Tensor};

use super::write_atomic;

pub const HSC_MAGIC: [u8; 4] = *b"HSC1";
pub const HSCW_MAGIC: [u8; 4] = *b"HSCW";
/// Magic, three extents and the dtype code.
pub const HSC_HEADER_LEN: usize = 20;
const DTYPE_F32: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HscHeader {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

pub fn encode_hsc<T: Real>(header: HscHeader, data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HSC_HEADER_LEN + data.len() * 4);
    out.extend_from_slice(&HSC_MAGIC);
    for v in [header.h, header.w, header.c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.narrow_f32().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { path: self.path.to_path_buf(), needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let b = self.take(4)?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(Error::BadMagic { path: self.path.to_path_buf(), found, expected });
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.format("payload size overflows"))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    fn format(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg: msg.into() }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parses an HSC byte buffer; `path` is only used in diagnostics.
pub fn decode_hsc(bytes: &[u8], path: &Path) -> Result<(HscHeader, Vec<f32>)> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(HSC_MAGIC)?;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let code = r.u32()?;
    if code != DTYPE_F32 {
        return Err(Error::UnknownDtype { path: path.to_path_buf(), code });
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.format("extents overflow"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok((HscHeader { h, w, c }, data))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_hsc<T: Real>(cube: &SpectralCube<T>, path: &Path) -> Result<()> {
    let (h, w, c) = cube.dims();
    write_atomic(path, &encode_hsc(HscHeader { h, w, c }, cube.data()))
}

pub fn read_hsc(path: &Path) -> Result<SpectralCube<f32>> {
    let (hd, data) = decode_hsc(&read_bytes(path)?, path)?;
    SpectralCube::new(hd.h, hd.w, hd.c, data).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

/// Measurements are stored as single-channel HSC files.
pub fn write_measurement<T: Real>(y: &Measurement<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_hsc(HscHeader { h: y.height(), w: y.width(), c: 1 }, y.data()))
}

pub fn read_measurement(path: &Path) -> Result<Measurement<f32>> {
    let (hd, data) = decode_hsc(&read_bytes(path)?, path)?;
    if hd.c != 1 {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("measurement has {} channels", hd.c) });
    }
    Measurement::new(hd.h, hd.w, data)
}

pub fn write_mask<T: Real>(m: &CodedMask<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_hsc(HscHeader { h: m.height(), w: m.width(), c: 1 }, m.data()))
}

pub fn read_mask(path: &Path) -> Result<CodedMask<f32>> {
    let (hd, data) = decode_hsc(&read_bytes(path)?, path)?;
    if hd.c != 1 {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("mask has {} channels", hd.c) });
    }
    CodedMask::new(hd.h, hd.w, data).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn encode_hscw<T: Real>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&HSCW_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.narrow_f32().to_le_bytes());
        }
    }
    out
}

pub fn decode_hscw(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(HSCW_MAGIC)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.format("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| r.format("extents overflow"))?;
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data)?;
        store
            .insert(name.clone(), t)
            .map_err(|_| r.format(format!("duplicate tensor name `{name}`")))?;
    }
    r.finish()?;
    Ok(store)
}

pub fn write_hscw<T: Real>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_hscw(params))
}

pub fn read_hscw(path: &Path) -> Result<ParamStore<f32>> {
    decode_hscw(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("test.hsc")
    }

    #[test]
    fn tiny_cube_byte_layout() {
        let bytes = encode_hsc(HscHeader { h: 2, w: 2, c: 1 }, &[1.0f32, 2.0, 3.0, 4.0]);
        // magic + three u32 extents + u32 dtype + 4 f32 values
        assert_eq!(bytes.len(), 4 + 12 + 4 + 16);
        assert_eq!(&bytes[..4], b"HSC1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn distinct_diagnostics() {
        let good = encode_hsc(HscHeader { h: 2, w: 2, c: 1 }, &[1.0f32; 4]);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_hsc(&bad, &p()), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_hsc(&good[..30], &p()), Err(Error::Truncated { .. })));
        let mut dtype = good.clone();
        dtype[16] = 7;
        assert!(matches!(decode_hsc(&dtype, &p()), Err(Error::UnknownDtype { code: 7, .. })));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode_hsc(&long, &p()), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_message_names_the_problem() {
        let err = decode_hsc(b"NOPE\0\0\0\0", &p()).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn hscw_rejects_duplicate_names() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HSCW");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.push(b'a');
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&0.5f32.to_le_bytes());
        }
        let err = decode_hscw(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }
}
