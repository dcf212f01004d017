//! Float grids on disk: a 16-byte header (`DGRD`, dtype, height, width as
//! little-endian `u32`) followed by row-major little-endian `f32` values.

use std::path::Path;

use diad_core::image::Grid;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"DGRD";
pub const DTYPE_F32: u32 = 1;

pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * grid.data().len());
    out.extend_from_slice(MAGIC);
    for v in [DTYPE_F32, grid.height() as u32, grid.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Grid> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a float grid file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != DTYPE_F32 as usize {
        return Err(Error::format(
            path,
            format!("unsupported dtype {}", word(4)),
        ));
    }
    let (h, w) = (word(8), word(12));
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::format(path, "truncated float grid"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Grid::from_vec(h, w, data).map_err(Error::from)
}

pub fn write(path: &Path, grid: &Grid) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, encode(grid)).at(path)
}

pub fn read(path: &Path) -> Result<Grid> {
    decode(&std::fs::read(path).at(path)?, path)
}
