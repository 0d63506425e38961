//! CNFG grid files: `"CNFG"`, u32 version, u32 rank, u32 extents, f64 values,
//! then the f64 `(min, max)` range metadata. All little-endian.

use std::fs;
use std::path::Path;

use flowscale_core::{GridField, ValueRange};

use crate::binary::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CNFG";
pub const VERSION: u32 = 1;

pub fn encode_grid(field: &GridField) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    w.u32(3);
    let (c, h, wd) = field.extents();
    for e in [c, h, wd] {
        w.u32(e as u32);
    }
    w.f64s(field.values());
    w.f64(field.range.min);
    w.f64(field.range.max);
    w.buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridField> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let rank = r.u32()? as usize;
    if !(2..=3).contains(&rank) {
        return Err(Error::Malformed(format!("grid rank must be 2 or 3, got {rank}")));
    }
    let mut ext = [1usize; 3];
    for e in &mut ext[3 - rank..] {
        *e = r.u32()? as usize;
    }
    let n = ext
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Malformed("extents overflow".into()))?;
    let values = r.f64s(n)?;
    let range = ValueRange {
        min: r.f64()?,
        max: r.f64()?,
    };
    r.finish()?;
    Ok(GridField::new(ext[0], ext[1], ext[2], values)?.with_range(range))
}

pub fn write_grid(path: &Path, field: &GridField) -> Result<()> {
    fs::write(path, encode_grid(field)).map_err(Error::io(path))
}

pub fn read_grid(path: &Path) -> Result<GridField> {
    decode_grid(&fs::read(path).map_err(Error::io(path))?)
}
