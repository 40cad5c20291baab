//! Morton (z-order) interleaving.
//!
//! A coordinate's key interleaves the bits of (x, y, z) with x in the least
//! significant position, so sorting by key orders points z-major, then y,
//! then x within each octant. This is the canonical ordering for sparse
//! tensor rows and entropy-coded symbols, and it makes breadth-first octree
//! traversal emit leaves in key order (octant index = 4z + 2y + x).

/// Coordinates must fit in 21 bits per axis after biasing.
pub const BIAS: i64 = 1 << 20;
const MASK21: u64 = (1 << 21) - 1;

#[inline]
fn spread(v: u64) -> u64 {
    let mut x = v & MASK21;
    x = (x | x << 32) & 0x1f00000000ffff;
    x = (x | x << 16) & 0x1f0000ff0000ff;
    x = (x | x << 8) & 0x100f00f00f00f00f;
    x = (x | x << 4) & 0x10c30c30c30c30c3;
    x = (x | x << 2) & 0x1249249249249249;
    x
}

#[inline]
fn compact(v: u64) -> u64 {
    let mut x = v & 0x1249249249249249;
    x = (x | x >> 2) & 0x10c30c30c30c30c3;
    x = (x | x >> 4) & 0x100f00f00f00f00f;
    x = (x | x >> 8) & 0x1f0000ff0000ff;
    x = (x | x >> 16) & 0x1f00000000ffff;
    x = (x | x >> 32) & MASK21;
    x
}

/// Interleave non-negative coordinates already in [0, 2^21).
#[inline]
pub fn encode_u32(x: u32, y: u32, z: u32) -> u64 {
    spread(x as u64) | spread(y as u64) << 1 | spread(z as u64) << 2
}

#[inline]
pub fn decode_u32(key: u64) -> [u32; 3] {
    [compact(key) as u32, compact(key >> 1) as u32, compact(key >> 2) as u32]
}

/// Key for signed coordinates; biased by 2^20 so intermediate tensors with
/// negative coordinates still order correctly. Panics outside the supported
/// range, which only a bug can produce.
#[inline]
pub fn key(c: [i64; 3]) -> u64 {
    let x = c[0] + BIAS;
    let y = c[1] + BIAS;
    let z = c[2] + BIAS;
    debug_assert!(
        x >= 0 && x <= MASK21 as i64 && y >= 0 && y <= MASK21 as i64 && z >= 0 && z <= MASK21 as i64,
        "coordinate out of morton range: {c:?}"
    );
    encode_u32(x as u32, y as u32, z as u32)
}

#[inline]
pub fn unkey(k: u64) -> [i64; 3] {
    let d = decode_u32(k);
    [d[0] as i64 - BIAS, d[1] as i64 - BIAS, d[2] as i64 - BIAS]
}

/// Sort coordinates (with payload indices) into canonical key order.
pub fn argsort(coords: &[[i64; 3]]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..coords.len() as u32).collect();
    idx.sort_by_key(|&i| key(coords[i as usize]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let x = rng.gen_range(0..1 << 21);
            let y = rng.gen_range(0..1 << 21);
            let z = rng.gen_range(0..1 << 21);
            assert_eq!(decode_u32(encode_u32(x, y, z)), [x, y, z]);
        }
    }

    #[test]
    fn key_handles_negative_coords() {
        let a = key([-5, 3, -1]);
        assert_eq!(unkey(a), [-5, 3, -1]);
        // biased ordering is still coordinate-wise consistent
        assert!(key([-5, 3, -1]) < key([-4, 3, -1]));
    }

    #[test]
    fn octant_order_is_zyx_major() {
        // within a 2x2x2 cube, key order enumerates x fastest, z slowest
        let mut cells: Vec<[i64; 3]> = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    cells.push([x, y, z]);
                }
            }
        }
        let mut sorted = cells.clone();
        sorted.sort_by_key(|&c| key(c));
        assert_eq!(sorted, cells);
    }

    #[test]
    fn interleaved_bit_positions() {
        assert_eq!(encode_u32(1, 0, 0), 0b001);
        assert_eq!(encode_u32(0, 1, 0), 0b010);
        assert_eq!(encode_u32(0, 0, 1), 0b100);
        assert_eq!(encode_u32(3, 0, 0), 0b001001);
    }
}
