//! `SPCD` dataset cache.
//!
//! ```text
//! "SPCD" | version u32 | start f64 | end f64 | step f64 | L u32 | stamp str
//! then until EOF, per spectrum:
//!   class_id u32 | sample_id str | L x f32
//! ```
//! All integers and floats little-endian; `str` is a u32 byte length
//! followed by UTF-8.

use std::fs;
use std::path::Path;

use super::{Dataset, Grid, Spectrum};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPCD";
pub const VERSION: u32 = 1;

pub fn encode(ds: &Dataset, stamp: &str) -> Result<Vec<u8>> {
    let grid = ds.grid().ok_or_else(|| Error::Format("cannot cache an empty dataset".into()))?;
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.f64(grid.start);
    w.f64(grid.end);
    w.f64(grid.step());
    w.u32(grid.len as u32);
    w.str(stamp);
    for s in ds.spectra() {
        w.u32(s.class_id);
        w.str(&s.sample_id);
        w.f32s(&s.intensities);
    }
    Ok(w.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<(Dataset, String)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SPCD version {version}")));
    }
    let start = r.f64()?;
    let end = r.f64()?;
    let _step = r.f64()?;
    let len = r.u32()? as usize;
    let grid = Grid::new(start, end, len)?;
    let stamp = r.str()?;
    let mut spectra = Vec::new();
    while !r.is_at_end() {
        let class_id = r.u32()?;
        let sample_id = r.str()?;
        let intensities = r.f32s(len)?;
        spectra.push(Spectrum { intensities, class_id, sample_id, grid });
    }
    Ok((Dataset::new(spectra)?, stamp))
}

pub fn save(ds: &Dataset, stamp: &str, path: &Path) -> Result<()> {
    fs::write(path, encode(ds, stamp)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Dataset, String)> {
    decode(&fs::read(path)?)
}
