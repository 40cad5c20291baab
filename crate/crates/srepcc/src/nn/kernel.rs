//! Kernel offset enumeration and kernel maps.
//!
//! A kernel map lists, for every kernel offset, the (input row, output row)
//! pairs that offset connects. Offsets are enumerated in a fixed z-major,
//! y, then x order; pairs within an offset follow output-row order for
//! standard and strided convolutions and input-row order for generative
//! transposed convolutions. That fixed enumeration makes accumulation order,
//! and therefore every bit of the result, reproducible.

use crate::morton;

use super::tensor::CoordMap;

/// How the convolution moves between coordinate grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Same grid in and out.
    Stride1,
    /// Downsampling by the factor: output grid is coarser.
    Down(u32),
    /// Generative transposed upsampling by the factor: output grid is finer,
    /// and every input spawns a full kernel footprint of candidate outputs.
    Up(u32),
}

/// Offsets in grid steps: centered for odd kernels, `0..k` for even ones.
pub fn kernel_offsets(kernel: u32) -> Vec<[i64; 3]> {
    let k = kernel as i64;
    let (lo, hi) = if k % 2 == 1 { (-(k - 1) / 2, (k - 1) / 2) } else { (0, k - 1) };
    let mut out = Vec::with_capacity((k * k * k) as usize);
    for dz in lo..=hi {
        for dy in lo..=hi {
            for dx in lo..=hi {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct KernelMap {
    pub offsets: Vec<[i64; 3]>,
    /// Per offset: (input row, output row) pairs, in the fixed build order.
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub out_coords: Vec<[i64; 3]>,
    pub out_stride: i64,
    pub n_in: usize,
}

impl KernelMap {
    pub fn n_out(&self) -> usize {
        self.out_coords.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(|p| p.len()).sum()
    }
}

fn dedup_sorted(mut coords: Vec<[i64; 3]>) -> Vec<[i64; 3]> {
    coords.sort_by_key(|&c| morton::key(c));
    coords.dedup();
    coords
}

/// Floor a coordinate to a multiple of `step` (toward negative infinity).
#[inline]
fn floor_to(c: i64, step: i64) -> i64 {
    c.div_euclid(step) * step
}

pub fn build_kernel_map(in_coords: &[[i64; 3]], in_stride: i64, kernel: u32, kind: ConvKind) -> KernelMap {
    let offsets = kernel_offsets(kernel);
    match kind {
        ConvKind::Stride1 | ConvKind::Down(_) => {
            let (out_coords, out_stride) = match kind {
                ConvKind::Stride1 => (in_coords.to_vec(), in_stride),
                ConvKind::Down(u) => {
                    let s = in_stride * u as i64;
                    let floored: Vec<[i64; 3]> =
                        in_coords.iter().map(|c| [floor_to(c[0], s), floor_to(c[1], s), floor_to(c[2], s)]).collect();
                    (dedup_sorted(floored), s)
                }
                ConvKind::Up(_) => unreachable!(),
            };
            let in_map = CoordMap::build(in_coords);
            let mut pairs = Vec::with_capacity(offsets.len());
            for off in &offsets {
                let mut p = Vec::new();
                for (o, oc) in out_coords.iter().enumerate() {
                    let probe = [
                        oc[0] + off[0] * in_stride,
                        oc[1] + off[1] * in_stride,
                        oc[2] + off[2] * in_stride,
                    ];
                    if let Some(i) = in_map.get(probe) {
                        p.push((i, o as u32));
                    }
                }
                pairs.push(p);
            }
            KernelMap { offsets, pairs, out_coords, out_stride, n_in: in_coords.len() }
        }
        ConvKind::Up(u) => {
            assert!(in_stride % u as i64 == 0, "stride {in_stride} not divisible by upsampling factor {u}");
            let s_out = in_stride / u as i64;
            let mut candidates = Vec::with_capacity(in_coords.len() * offsets.len());
            for c in in_coords {
                for off in &offsets {
                    candidates.push([c[0] + off[0] * s_out, c[1] + off[1] * s_out, c[2] + off[2] * s_out]);
                }
            }
            let out_coords = dedup_sorted(candidates);
            let out_map = CoordMap::build(&out_coords);
            let mut pairs = Vec::with_capacity(offsets.len());
            for off in &offsets {
                let mut p = Vec::with_capacity(in_coords.len());
                for (i, c) in in_coords.iter().enumerate() {
                    let target = [c[0] + off[0] * s_out, c[1] + off[1] * s_out, c[2] + off[2] * s_out];
                    let o = out_map.get(target).expect("generated coordinate must be in output set");
                    p.push((i as u32, o));
                }
                pairs.push(p);
            }
            KernelMap { offsets, pairs, out_coords, out_stride: s_out, n_in: in_coords.len() }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_odd_centered_even_forward() {
        let o3 = kernel_offsets(3);
        assert_eq!(o3.len(), 27);
        assert_eq!(o3[0], [-1, -1, -1]);
        assert_eq!(o3[13], [0, 0, 0]);
        assert_eq!(o3[26], [1, 1, 1]);
        let o2 = kernel_offsets(2);
        assert_eq!(o2.len(), 8);
        assert_eq!(o2[0], [0, 0, 0]);
        assert_eq!(o2[7], [1, 1, 1]);
        assert_eq!(kernel_offsets(5).len(), 125);
    }

    #[test]
    fn stride1_map_connects_neighbors() {
        // two adjacent points: each offset connects at most one pair
        let coords = vec![[0, 0, 0], [1, 0, 0]];
        let m = build_kernel_map(&coords, 1, 3, ConvKind::Stride1);
        assert_eq!(m.out_coords, coords);
        // offset [0,0,0] connects both to themselves
        let center = m.offsets.iter().position(|&o| o == [0, 0, 0]).unwrap();
        assert_eq!(m.pairs[center], vec![(0, 0), (1, 1)]);
        // offset [1,0,0]: output o gathers input at o + [1,0,0]
        let dx = m.offsets.iter().position(|&o| o == [1, 0, 0]).unwrap();
        assert_eq!(m.pairs[dx], vec![(1, 0)]);
        let total: usize = m.total_pairs();
        assert_eq!(total, 4); // 2 self + 2 cross
    }

    #[test]
    fn down_map_floors_coords() {
        let coords = vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 0, 0]];
        let m = build_kernel_map(&coords, 1, 2, ConvKind::Down(2));
        assert_eq!(m.out_coords, vec![[0, 0, 0], [2, 0, 0], [4, 0, 0]]);
        assert_eq!(m.out_stride, 2);
    }

    #[test]
    fn up_map_generates_full_footprint() {
        // single point, kernel 2, upsample 2: exactly the 8 children
        let m = build_kernel_map(&[[4, 4, 4]], 4, 2, ConvKind::Up(2));
        assert_eq!(m.out_stride, 2);
        assert_eq!(m.n_out(), 8);
        for oc in &m.out_coords {
            assert!(oc.iter().all(|&c| c == 4 || c == 6));
        }
        assert_eq!(m.total_pairs(), 8);
    }

    #[test]
    fn up_map_overlapping_footprints_dedup() {
        // 125-candidate footprint check: kernel 5, factor 4, stride 4 input
        let m = build_kernel_map(&[[0, 0, 0]], 4, 5, ConvKind::Up(4));
        assert_eq!(m.out_stride, 1);
        assert_eq!(m.n_out(), 125);
        // two inputs 4 apart share part of their footprints
        let m2 = build_kernel_map(&[[0, 0, 0], [4, 0, 0]], 4, 5, ConvKind::Up(4));
        assert!(m2.n_out() < 250);
        assert_eq!(m2.total_pairs(), 250);
    }

    #[test]
    fn down_then_up_is_superset() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(1..80);
            let mut coords: Vec<[i64; 3]> =
                (0..n).map(|_| [rng.gen_range(0..16) * 2, rng.gen_range(0..16) * 2, rng.gen_range(0..16) * 2]).collect();
            coords.sort_by_key(|&c| morton::key(c));
            coords.dedup();
            let down = build_kernel_map(&coords, 2, 3, ConvKind::Down(2));
            let up = build_kernel_map(&down.out_coords, 4, 2, ConvKind::Up(2));
            let set: std::collections::HashSet<[i64; 3]> = up.out_coords.iter().copied().collect();
            for c in &coords {
                assert!(set.contains(c), "{c:?} lost by down/up");
            }
        }
    }
}
