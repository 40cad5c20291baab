//! Synthetic occupancy blocks: small voxelized 2-manifold patches that train
//! the codec at desk scale.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::morton;
use crate::nn::SparseTensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    SphereShell,
    Plane,
    NoisySurface,
}

impl SurfaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceKind::SphereShell => "sphere_shell",
            SurfaceKind::Plane => "plane",
            SurfaceKind::NoisySurface => "noisy_surface",
        }
    }

    pub fn parse(s: &str) -> Option<SurfaceKind> {
        match s {
            "sphere_shell" => Some(SurfaceKind::SphereShell),
            "plane" => Some(SurfaceKind::Plane),
            "noisy_surface" => Some(SurfaceKind::NoisySurface),
            _ => None,
        }
    }
}

fn sorted_cells(set: BTreeSet<u64>) -> Vec<[i64; 3]> {
    set.into_iter().map(morton::unkey).collect()
}

/// All cells of a block whose center lies within half a voxel of the sphere
/// of the given radius.
pub fn sphere_shell_cells(block_size: i64, center: [f64; 3], radius: f64) -> Vec<[i64; 3]> {
    let mut set = BTreeSet::new();
    let lo = |c: f64| ((c - radius - 1.0).floor() as i64).max(0);
    let hi = |c: f64| ((c + radius + 1.0).ceil() as i64).min(block_size - 1);
    for x in lo(center[0])..=hi(center[0]) {
        for y in lo(center[1])..=hi(center[1]) {
            for z in lo(center[2])..=hi(center[2]) {
                let d = ((x as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (z as f64 - center[2]).powi(2))
                .sqrt();
                if (d - radius).abs() <= 0.5 {
                    set.insert(morton::key([x, y, z]));
                }
            }
        }
    }
    sorted_cells(set)
}

/// All cells within half a voxel of the plane n·p = d (n unit length).
pub fn plane_cells(block_size: i64, normal: [f64; 3], offset: f64) -> Vec<[i64; 3]> {
    let mut set = BTreeSet::new();
    for x in 0..block_size {
        for y in 0..block_size {
            for z in 0..block_size {
                let v = normal[0] * x as f64 + normal[1] * y as f64 + normal[2] * z as f64 - offset;
                if v.abs() <= 0.5 {
                    set.insert(morton::key([x, y, z]));
                }
            }
        }
    }
    sorted_cells(set)
}

/// A low-frequency heightfield with per-column jitter; roughly one occupied
/// cell per column, sometimes two.
pub fn noisy_surface_cells(block_size: i64, rng: &mut ChaCha8Rng) -> Vec<[i64; 3]> {
    let b = block_size as f64;
    let a1 = rng.gen_range(b / 12.0..b / 6.0);
    let a2 = rng.gen_range(b / 12.0..b / 6.0);
    let f1 = rng.gen_range(0.5..1.5);
    let f2 = rng.gen_range(0.5..1.5);
    let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
    let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut set = BTreeSet::new();
    for x in 0..block_size {
        for y in 0..block_size {
            let h = b / 2.0
                + a1 * (std::f64::consts::TAU * f1 * x as f64 / b + p1).sin()
                + a2 * (std::f64::consts::TAU * f2 * y as f64 / b + p2).cos()
                + rng.gen_range(-0.5..0.5);
            let z = (h.round() as i64).clamp(0, block_size - 1);
            set.insert(morton::key([x, y, z]));
            if rng.gen_bool(0.15) && z + 1 < block_size {
                set.insert(morton::key([x, y, z + 1]));
            }
        }
    }
    sorted_cells(set)
}

fn unit_normal(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.2 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn one_block(kind: SurfaceKind, block_size: i64, rng: &mut ChaCha8Rng) -> Vec<[i64; 3]> {
    let b = block_size as f64;
    match kind {
        SurfaceKind::SphereShell => {
            let center = [
                rng.gen_range(0.4 * b..0.6 * b),
                rng.gen_range(0.4 * b..0.6 * b),
                rng.gen_range(0.4 * b..0.6 * b),
            ];
            let radius = rng.gen_range(0.25 * b..0.35 * b);
            sphere_shell_cells(block_size, center, radius)
        }
        SurfaceKind::Plane => {
            let n = unit_normal(rng);
            let p0 = [
                rng.gen_range(0.3 * b..0.7 * b),
                rng.gen_range(0.3 * b..0.7 * b),
                rng.gen_range(0.3 * b..0.7 * b),
            ];
            let d = n[0] * p0[0] + n[1] * p0[1] + n[2] * p0[2];
            plane_cells(block_size, n, d)
        }
        SurfaceKind::NoisySurface => noisy_surface_cells(block_size, rng),
    }
}

/// Deterministic dataset of one surface kind. Occupancy stays between 0.1%
/// and 10% of the block volume by construction; asserted anyway.
pub fn generate_training_blocks<T: Scalar>(
    kind: SurfaceKind,
    count: usize,
    block_size: i64,
    seed: u64,
) -> Vec<SparseTensor<T>> {
    assert!(count >= 1, "count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let cells = one_block(kind, block_size, &mut rng);
            let volume = (block_size * block_size * block_size) as f64;
            let frac = cells.len() as f64 / volume;
            assert!(
                (0.001..=0.10).contains(&frac),
                "occupancy fraction {frac:.4} outside [0.001, 0.10]"
            );
            SparseTensor::occupancy(cells, 1).expect("generated cells are canonical")
        })
        .collect()
}

/// Round-robin over the three kinds; the mix the training stages consume.
pub fn mixed_training_blocks<T: Scalar>(count: usize, block_size: i64, seed: u64) -> Vec<SparseTensor<T>> {
    assert!(count >= 1, "count must be at least 1");
    let kinds = [SurfaceKind::SphereShell, SurfaceKind::Plane, SurfaceKind::NoisySurface];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let cells = one_block(kinds[i % 3], block_size, &mut rng);
            SparseTensor::occupancy(cells, 1).expect("generated cells are canonical")
        })
        .collect()
}
