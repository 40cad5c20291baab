//! Voxelized point cloud geometry: clouds, blocks, sampling.
//!
//! A cloud is a set of integer voxel coordinates inside a cubic grid of
//! 2^bit_depth cells per axis. Coding operates on cubic blocks cut from that
//! grid; a block stores block-local coordinates. Both keep their points
//! deduplicated and sorted in Morton order, which every downstream stage
//! relies on.

use crate::{morton, Error, Result};

/// Resolution scaling applied before encoding / undone after decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingFactor {
    S1,
    S2,
    S4,
}

impl SamplingFactor {
    pub fn value(self) -> u32 {
        match self {
            SamplingFactor::S1 => 1,
            SamplingFactor::S2 => 2,
            SamplingFactor::S4 => 4,
        }
    }

    pub fn from_value(v: u32) -> Result<Self> {
        match v {
            1 => Ok(SamplingFactor::S1),
            2 => Ok(SamplingFactor::S2),
            4 => Ok(SamplingFactor::S4),
            _ => Err(Error::Parse(format!("sampling factor must be 1, 2 or 4, got {v}"))),
        }
    }
}

fn canonicalize(points: &mut Vec<[u32; 3]>) {
    points.sort_by_key(|&p| morton::encode_u32(p[0], p[1], p[2]));
    points.dedup();
}

/// Full-resolution cloud over a 2^bit_depth grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointCloud {
    points: Vec<[u32; 3]>,
    bit_depth: u8,
}

impl PointCloud {
    /// Duplicates are dropped silently; out-of-range coordinates are an error.
    pub fn new(mut points: Vec<[u32; 3]>, bit_depth: u8) -> Result<Self> {
        if bit_depth == 0 || bit_depth > 21 {
            return Err(Error::Parse(format!("bit depth {bit_depth} out of range 1..=21")));
        }
        let max = (1u64 << bit_depth) - 1;
        for p in &points {
            if p.iter().any(|&c| c as u64 > max) {
                return Err(Error::Parse(format!(
                    "point {p:?} outside {0}x{0}x{0} grid (bit depth {bit_depth})",
                    max + 1
                )));
            }
        }
        canonicalize(&mut points);
        Ok(PointCloud { points, bit_depth })
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One cubic block of a partitioned cloud. Coordinates are block-local.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub origin: [u32; 3],
    pub block_size: u32,
    points: Vec<[u32; 3]>,
}

impl Block {
    pub fn new(origin: [u32; 3], block_size: u32, mut points: Vec<[u32; 3]>) -> Result<Self> {
        if !block_size.is_power_of_two() {
            return Err(Error::Parse(format!("block size {block_size} is not a power of two")));
        }
        for p in &points {
            if p.iter().any(|&c| c >= block_size) {
                return Err(Error::Invariant(format!("local point {p:?} outside block of size {block_size}")));
            }
        }
        canonicalize(&mut points);
        Ok(Block { origin, block_size, points })
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Floor-divide local coordinates by the factor, deduplicating collisions.
    /// The result lives on a grid `sf` times smaller.
    pub fn downsample(&self, sf: SamplingFactor) -> Block {
        let s = sf.value();
        let mut pts: Vec<[u32; 3]> = self.points.iter().map(|p| [p[0] / s, p[1] / s, p[2] / s]).collect();
        canonicalize(&mut pts);
        Block { origin: self.origin, block_size: self.block_size / s, points: pts }
    }

    /// Coordinate-scaled upsampling: each point maps to the corner voxel of
    /// its cell at full resolution. `downsample(upsample(b, sf), sf) == b`.
    pub fn upsample(&self, sf: SamplingFactor) -> Block {
        let s = sf.value();
        let pts: Vec<[u32; 3]> = self.points.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect();
        // scaling preserves morton order and cannot create duplicates
        Block { origin: self.origin, block_size: self.block_size * s, points: pts }
    }
}

/// Cut the cloud into cubic blocks, dropping empty ones. Blocks come out
/// ordered by origin, z then y then x.
pub fn partition_blocks(pc: &PointCloud, block_size: u32) -> Result<Vec<Block>> {
    if !block_size.is_power_of_two() {
        return Err(Error::Parse(format!("block size {block_size} is not a power of two")));
    }
    let mut groups: std::collections::BTreeMap<[u32; 3], Vec<[u32; 3]>> = std::collections::BTreeMap::new();
    for &p in &pc.points {
        let origin = [p[2] / block_size, p[1] / block_size, p[0] / block_size]; // zyx sort key
        groups.entry(origin).or_default().push([p[0] % block_size, p[1] % block_size, p[2] % block_size]);
    }
    groups
        .into_iter()
        .map(|(zyx, pts)| Block::new([zyx[2], zyx[1], zyx[0]], block_size, pts))
        .collect()
}

/// Inverse of [`partition_blocks`].
pub fn merge_blocks(blocks: &[Block], bit_depth: u8) -> Result<PointCloud> {
    let mut points = Vec::new();
    for b in blocks {
        for p in &b.points {
            points.push([
                b.origin[0] * b.block_size + p[0],
                b.origin[1] * b.block_size + p[1],
                b.origin[2] * b.block_size + p[2],
            ]);
        }
    }
    PointCloud::new(points, bit_depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, bit_depth: u8) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1u32 << bit_depth;
        let pts = (0..n).map(|_| [rng.gen_range(0..m), rng.gen_range(0..m), rng.gen_range(0..m)]).collect();
        PointCloud::new(pts, bit_depth).unwrap()
    }

    #[test]
    fn new_rejects_out_of_range() {
        assert!(PointCloud::new(vec![[256, 0, 0]], 8).is_err());
        assert!(PointCloud::new(vec![[255, 255, 255]], 8).is_ok());
    }

    #[test]
    fn duplicates_are_dropped() {
        let pc = PointCloud::new(vec![[1, 2, 3], [1, 2, 3], [0, 0, 0]], 4).unwrap();
        assert_eq!(pc.len(), 2);
    }

    #[test]
    fn partition_counts_are_preserved() {
        // 10k distinct points: sum of block sizes must match exactly
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = std::collections::HashSet::new();
        while set.len() < 10_000 {
            set.insert([rng.gen_range(0..1024u32), rng.gen_range(0..1024), rng.gen_range(0..1024)]);
        }
        let pc = PointCloud::new(set.into_iter().collect(), 10).unwrap();
        for bs in [32u32, 64, 128, 1024] {
            let blocks = partition_blocks(&pc, bs).unwrap();
            let total: usize = blocks.iter().map(|b| b.len()).sum();
            assert_eq!(total, 10_000, "block size {bs}");
            assert!(blocks.iter().all(|b| !b.is_empty()));
        }
    }

    #[test]
    fn partition_merge_roundtrip() {
        for seed in 0..8 {
            let pc = random_cloud(seed, 3000, 9);
            let blocks = partition_blocks(&pc, 64).unwrap();
            let back = merge_blocks(&blocks, 9).unwrap();
            assert_eq!(back, pc);
        }
    }

    #[test]
    fn partition_order_is_zyx_major() {
        let pc = PointCloud::new(vec![[0, 0, 200], [200, 0, 0], [0, 200, 0], [0, 0, 0]], 8).unwrap();
        let blocks = partition_blocks(&pc, 128).unwrap();
        let origins: Vec<[u32; 3]> = blocks.iter().map(|b| b.origin).collect();
        assert_eq!(origins, vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]);
    }

    #[test]
    fn single_block_when_size_covers_cloud() {
        let pc = random_cloud(11, 500, 6);
        let blocks = partition_blocks(&pc, 64).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].points(), pc.points());
    }

    #[test]
    fn downsample_merges_cell_mates() {
        let b = Block::new([0, 0, 0], 8, vec![[0, 0, 0], [1, 0, 0], [0, 1, 1], [4, 4, 4]]).unwrap();
        let d = b.downsample(SamplingFactor::S2);
        assert_eq!(d.points(), &[[0, 0, 0], [2, 2, 2]]);
        assert_eq!(d.block_size, 4);
    }

    #[test]
    fn down_after_up_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.gen_range(1..200);
            let pts = (0..n).map(|_| [rng.gen_range(0..32u32), rng.gen_range(0..32), rng.gen_range(0..32)]).collect();
            let b = Block::new([0, 0, 0], 32, pts).unwrap();
            for sf in [SamplingFactor::S2, SamplingFactor::S4] {
                assert_eq!(b.upsample(sf).downsample(sf), b);
            }
        }
    }

    #[test]
    fn sf4_equals_sf2_twice() {
        let b = random_cloud(5, 400, 5);
        let blk = Block::new([0, 0, 0], 32, b.points().to_vec()).unwrap();
        let once = blk.downsample(SamplingFactor::S4);
        let twice = blk.downsample(SamplingFactor::S2).downsample(SamplingFactor::S2);
        assert_eq!(once, twice);
    }
}
