//! The `MGT1` tile-grid format.
//!
//! ```text
//! "MGT1"
//! u32 rows, u32 cols, u32 dim, u32 occupied        (little-endian)
//! ceil(rows*cols / 8) bytes occupancy bitmap       (row-major, LSB first, zero padding)
//! occupied * dim f32 features                      (little-endian, row-major cell order)
//! ```

use std::fs;
use std::path::Path;

use super::{put_len, ByteReader};
use crate::error::{Error, Result};
use crate::graph::FeatureGrid;

pub const MAGIC: &[u8; 4] = b"MGT1";

/// Encodes a grid. Features are narrowed to `f32`.
pub fn encode_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let cells = grid.rows() * grid.cols();
    let mut out = Vec::with_capacity(20 + cells.div_ceil(8) + 4 * grid.num_occupied() * grid.dim());
    out.extend_from_slice(MAGIC);
    put_len(&mut out, grid.rows(), "rows")?;
    put_len(&mut out, grid.cols(), "cols")?;
    put_len(&mut out, grid.dim(), "dim")?;
    put_len(&mut out, grid.num_occupied(), "occupied count")?;
    let mut bitmap = vec![0u8; cells.div_ceil(8)];
    for (i, _) in grid.occupancy().iter().enumerate().filter(|(_, &o)| o) {
        bitmap[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&bitmap);
    for v in grid.features().iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(buf: &[u8]) -> Result<FeatureGrid> {
    let mut r = ByteReader::new(buf);
    r.magic(MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let dim_at = r.offset();
    let dim = r.u32("dim")? as usize;
    let count_at = r.offset();
    let occupied = r.u32("occupied count")? as usize;
    let cells = rows
        .checked_mul(cols)
        .filter(|&c| c <= u32::MAX as usize)
        .ok_or_else(|| Error::parse(4, format!("grid {rows}x{cols} overflows")))?;
    if cells == 0 {
        return Err(Error::parse(4, "grid has no cells"));
    }
    if dim == 0 {
        return Err(Error::parse(dim_at, "feature dimension is zero"));
    }
    if occupied == 0 || occupied > cells {
        return Err(Error::parse(
            count_at,
            format!("occupied count {occupied} outside 1..={cells}"),
        ));
    }
    let payload = occupied
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(dim_at, "feature block size overflows"))?;

    let bitmap_at = r.offset();
    let bitmap = r.bytes(cells.div_ceil(8), "occupancy bitmap")?;
    let occupancy: Vec<bool> = (0..cells)
        .map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1)
        .collect();
    if cells % 8 != 0 && bitmap[cells / 8] >> (cells % 8) != 0 {
        return Err(Error::parse(
            bitmap_at + cells / 8,
            "nonzero padding bits in bitmap",
        ));
    }
    let set = occupancy.iter().filter(|&&o| o).count();
    if set != occupied {
        return Err(Error::parse(
            count_at,
            format!("header says {occupied} occupied cells, bitmap has {set}"),
        ));
    }
    if r.remaining() < payload {
        return Err(Error::parse(
            r.offset(),
            format!(
                "truncated features: need {payload} bytes, {} left",
                r.remaining()
            ),
        ));
    }
    let mut features = Vec::with_capacity(occupied);
    for _ in 0..occupied {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.offset();
            let b = r.bytes(4, "feature")?;
            let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::parse(at, "non-finite feature value"));
            }
            row.push(v as f64);
        }
        features.push(row);
    }
    r.finish()?;
    FeatureGrid::new(rows, cols, dim, occupancy, features)
}

pub fn save_graph_file(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_grid(grid)?)?;
    Ok(())
}

pub fn load_graph_file(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    decode_grid(&fs::read(path)?)
}
