//! Breadth-first octree occupancy coding for the latent coordinate set.
//!
//! Cells live on a cubic grid of power-of-two extent. Each internal node
//! emits one occupancy byte (bit j set when octant j is non-empty, octant
//! index 4z + 2y + x), nodes in breadth-first order, children in octant
//! order. Because octant order equals Morton digit order, leaves decode in
//! canonical order directly. The byte stream is squeezed through the
//! adaptive byte model.

use crate::{Error, Result};

use super::models::AdaptiveByteModel;
use super::range::{RangeDecoder, RangeEncoder};

fn levels_of(extent: u32) -> u32 {
    assert!(extent.is_power_of_two(), "octree extent {extent} must be a power of two");
    extent.trailing_zeros()
}

/// Raw occupancy bytes, before entropy coding. Cells must be distinct,
/// inside the cube, and sorted in Morton order.
pub fn occupancy_bytes(cells: &[[u32; 3]], extent: u32) -> Vec<u8> {
    let levels = levels_of(extent);
    debug_assert!(cells.iter().all(|c| c.iter().all(|&v| v < extent)));
    let mut out = Vec::new();
    if cells.is_empty() || levels == 0 {
        return out;
    }
    // (lo, hi) index ranges into the sorted cell list, breadth-first
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((0usize, cells.len(), 0u32));
    while let Some((lo, hi, depth)) = queue.pop_front() {
        if depth == levels {
            continue;
        }
        let shift = levels - 1 - depth;
        let octant = |c: &[u32; 3]| ((c[2] >> shift & 1) << 2 | (c[1] >> shift & 1) << 1 | (c[0] >> shift & 1)) as u8;
        let mut byte = 0u8;
        let mut i = lo;
        while i < hi {
            let o = octant(&cells[i]);
            let mut j = i + 1;
            while j < hi && octant(&cells[j]) == o {
                j += 1;
            }
            byte |= 1 << o;
            queue.push_back((i, j, depth + 1));
            i = j;
        }
        out.push(byte);
    }
    out
}

/// Occupancy bytes entropy-coded into a standalone payload.
pub fn encode(cells: &[[u32; 3]], extent: u32) -> Vec<u8> {
    let bytes = occupancy_bytes(cells, extent);
    let mut enc = RangeEncoder::new();
    let mut model = AdaptiveByteModel::new();
    for &b in &bytes {
        model.encode(&mut enc, b);
    }
    enc.finish()
}

/// Decode exactly `n_cells` cells; anything else is a corrupt payload.
pub fn decode(buf: &[u8], extent: u32, n_cells: usize) -> Result<Vec<[u32; 3]>> {
    let levels = levels_of(extent);
    if n_cells == 0 {
        return Ok(Vec::new());
    }
    if levels == 0 {
        if n_cells == 1 {
            return Ok(vec![[0, 0, 0]]);
        }
        return Err(Error::Format(format!("octree extent 1 cannot hold {n_cells} cells")));
    }
    if n_cells > (extent as usize).pow(3) {
        return Err(Error::Format(format!("{n_cells} cells exceed {extent}^3 capacity")));
    }
    let mut dec = RangeDecoder::new(buf);
    let mut model = AdaptiveByteModel::new();
    let mut cells = Vec::with_capacity(n_cells);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(([0u32; 3], 0u32));
    while let Some((origin, depth)) = queue.pop_front() {
        let byte = model.decode(&mut dec);
        let shift = levels - 1 - depth;
        for o in 0..8u32 {
            if byte >> o & 1 == 0 {
                continue;
            }
            let child = [
                origin[0] | (o & 1) << shift,
                origin[1] | (o >> 1 & 1) << shift,
                origin[2] | (o >> 2 & 1) << shift,
            ];
            if depth + 1 == levels {
                cells.push(child);
            } else {
                queue.push_back((child, depth + 1));
            }
        }
        if cells.len() > n_cells {
            return Err(Error::Format("octree decoded more cells than declared".into()));
        }
    }
    if dec.excessive_overrun() {
        return Err(Error::Format("octree payload truncated".into()));
    }
    if cells.len() != n_cells {
        return Err(Error::Format(format!("octree decoded {} cells, expected {n_cells}", cells.len())));
    }
    Ok(cells)
}
