//! Point-to-point (D1) and point-to-plane (D2) geometry PSNR.
//!
//! Each direction's MSE is the mean (projected) squared nearest-neighbor
//! distance; the symmetric figure takes the worse direction. PSNR uses the
//! 3 p^2 peak with p = 2^bit_depth - 1 and caps at 999.99 dB when the error
//! is exactly zero. D2 estimates normals on the first (reference) cloud by
//! PCA over the 12 nearest neighbors and uses them for both directions: a
//! reference point projects onto its own normal, a degraded point onto the
//! normal of its matched reference point.

use crate::pc::PointCloud;
use crate::{Error, Result};

use super::kdtree::KdTree;

pub const PSNR_CAP: f64 = 999.99;

const NORMAL_NEIGHBORS: usize = 12;

pub fn psnr_from_mse(mse: f64, bit_depth: u8) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    let p = ((1u64 << bit_depth) - 1) as f64;
    (10.0 * (3.0 * p * p / mse).log10()).min(PSNR_CAP)
}

fn to_f64(points: &[[u32; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
}

fn mean_sq_nn(from: &[[f64; 3]], to: &KdTree) -> f64 {
    let s: f64 = from.iter().map(|q| to.nearest(*q).0).sum();
    s / from.len() as f64
}

/// Symmetric point-to-point PSNR over raw coordinate sets.
pub fn psnr_d1_points(a: &[[u32; 3]], b: &[[u32; 3]], bit_depth: u8) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invariant("point-to-point PSNR of an empty point set".into()));
    }
    let (af, bf) = (to_f64(a), to_f64(b));
    let (ta, tb) = (KdTree::build(&af), KdTree::build(&bf));
    let mse = mean_sq_nn(&af, &tb).max(mean_sq_nn(&bf, &ta));
    Ok(psnr_from_mse(mse, bit_depth))
}

pub fn psnr_d1(reference: &PointCloud, degraded: &PointCloud) -> Result<f64> {
    check_depths(reference, degraded)?;
    psnr_d1_points(reference.points(), degraded.points(), reference.bit_depth())
}

/// Symmetric point-to-plane PSNR; `a` is the reference whose normals are used.
pub fn psnr_d2_points(a: &[[u32; 3]], b: &[[u32; 3]], bit_depth: u8) -> Result<f64> {
    if a.len() < NORMAL_NEIGHBORS {
        return Err(Error::Invariant(format!(
            "point-to-plane PSNR needs at least {NORMAL_NEIGHBORS} reference points, got {}",
            a.len()
        )));
    }
    if b.is_empty() {
        return Err(Error::Invariant("point-to-plane PSNR of an empty point set".into()));
    }
    let (af, bf) = (to_f64(a), to_f64(b));
    let (ta, tb) = (KdTree::build(&af), KdTree::build(&bf));
    let normals = estimate_normals(&af, &ta);

    let mut s_ab = 0.0;
    for (i, q) in af.iter().enumerate() {
        let (d2, id) = tb.nearest(*q);
        let m = bf[id as usize];
        let disp = [m[0] - q[0], m[1] - q[1], m[2] - q[2]];
        s_ab += projected_sq(disp, normals[i], d2);
    }
    let mut s_ba = 0.0;
    for q in &bf {
        let (d2, id) = ta.nearest(*q);
        let m = af[id as usize];
        let disp = [q[0] - m[0], q[1] - m[1], q[2] - m[2]];
        s_ba += projected_sq(disp, normals[id as usize], d2);
    }
    let mse = (s_ab / af.len() as f64).max(s_ba / bf.len() as f64);
    Ok(psnr_from_mse(mse, bit_depth))
}

pub fn psnr_d2(reference: &PointCloud, degraded: &PointCloud) -> Result<f64> {
    check_depths(reference, degraded)?;
    psnr_d2_points(reference.points(), degraded.points(), reference.bit_depth())
}

fn check_depths(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.bit_depth() != b.bit_depth() {
        return Err(Error::Invariant(format!(
            "PSNR between clouds of different bit depth ({} vs {})",
            a.bit_depth(),
            b.bit_depth()
        )));
    }
    Ok(())
}

#[inline]
fn projected_sq(disp: [f64; 3], normal: Option<[f64; 3]>, d2: f64) -> f64 {
    match normal {
        Some(n) => {
            let p = disp[0] * n[0] + disp[1] * n[1] + disp[2] * n[2];
            p * p
        }
        // degenerate neighborhood: fall back to the full displacement
        None => d2,
    }
}

/// Unit normal per point: PCA over the 12 nearest neighbors (the point
/// itself included), smallest-eigenvalue eigenvector. Neighborhoods of rank
/// < 2 get None.
fn estimate_normals(pts: &[[f64; 3]], tree: &KdTree) -> Vec<Option<[f64; 3]>> {
    pts.iter()
        .map(|&p| {
            let nb = tree.knn(p, NORMAL_NEIGHBORS);
            let m = nb.len() as f64;
            let mut c = [0.0f64; 3];
            for &(_, id) in &nb {
                let q = pts[id as usize];
                for a in 0..3 {
                    c[a] += q[a];
                }
            }
            for v in &mut c {
                *v /= m;
            }
            let mut cov = [[0.0f64; 3]; 3];
            for &(_, id) in &nb {
                let q = pts[id as usize];
                let d = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
                for i in 0..3 {
                    for j in 0..3 {
                        cov[i][j] += d[i] * d[j];
                    }
                }
            }
            let (vals, vecs) = jacobi3(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
            let (l1, l2) = (vals[order[0]].max(0.0), vals[order[1]].max(0.0));
            if l2 <= l1.max(1e-12) * 1e-9 {
                return None; // collinear or single-point neighborhood
            }
            let k = order[2];
            let n = [vecs[0][k], vecs[1][k], vecs[2][k]];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            Some([n[0] / len, n[1] / len, n[2] / len])
        })
        .collect()
}

/// Eigen-decomposition of a symmetric 3x3 by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let diag = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off <= diag * 1e-15 || off == 0.0 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let diff = a[q][q] - a[p][p];
            let t = if diff == 0.0 {
                1.0f64.copysign(apq)
            } else {
                let theta = diff / (2.0 * apq);
                theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
            };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let r = 3 - p - q; // the index outside {p, q}
            let (arp, arq) = (a[r][p], a[r][q]);
            a[r][p] = c * arp - s * arq;
            a[p][r] = a[r][p];
            a[r][q] = s * arp + c * arq;
            a[q][r] = a[r][q];
            a[p][p] -= t * apq;
            a[q][q] += t * apq;
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}
