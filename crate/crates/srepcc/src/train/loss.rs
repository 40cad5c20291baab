//! Scalar loss mathematics shared by the tape ops and the evaluation paths.
//!
//! Everything here is plain f64 in/out with hand-written partials; the tape
//! wraps these into graph nodes and the finite-difference suite checks the
//! partials directly.

use crate::math;

/// Probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] before any log.
pub const PROB_FLOOR: f64 = 1e-7;

/// Occupied-class weight of the focal loss.
pub const FOCAL_ALPHA: f64 = 0.7;

/// Focusing exponent of the focal loss.
pub const FOCAL_GAMMA: f64 = 2.0;

const LN_2: f64 = std::f64::consts::LN_2;

/// One voxel's focal term -a_t (1-p_t)^g ln(p_t) and its derivative in p.
/// `label` true means occupied: p_t = p and a_t = alpha; otherwise p_t = 1-p
/// and a_t = 1-alpha. Saturated probabilities get zero gradient.
pub fn focal_term(p: f64, label: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (pt_raw, sign, at) = if label { (p, 1.0, alpha) } else { (1.0 - p, -1.0, 1.0 - alpha) };
    let pt = pt_raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let q = 1.0 - pt;
    let val = -at * q.powf(gamma) * pt.ln();
    if pt_raw <= PROB_FLOOR || pt_raw >= 1.0 - PROB_FLOOR {
        return (val, 0.0);
    }
    let focusing = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt.ln() };
    let d_dpt = at * (focusing - q.powf(gamma) / pt);
    (val, sign * d_dpt)
}

/// The penalty charged per ground-truth point the candidate set cannot
/// represent: an occupied voxel at the worst admissible probability.
pub fn max_focal_term(alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - PROB_FLOOR).powf(gamma) * PROB_FLOOR.ln()
}

/// Code length in bits of a unit interval around `t` under N(0, sigma^2),
/// with partials in t and sigma. The caller clamps sigma (>= 1e-6); the
/// probability itself is floored at 1e-12, where gradients go to zero.
pub fn gauss_bits(t: f64, sigma: f64) -> (f64, f64, f64) {
    let u = (t + 0.5) / sigma;
    let v = (t - 0.5) / sigma;
    let p = math::normal_cdf_diff(u, v);
    if p <= 1e-12 {
        return (-(1e-12f64).log2(), 0.0, 0.0);
    }
    let pu = math::normal_pdf(u);
    let pv = math::normal_pdf(v);
    let bits = -p.log2();
    let denom = sigma * p * LN_2;
    (bits, -(pu - pv) / denom, (pu * u - pv * v) / denom)
}

/// Scale floor for the training-time rate computation.
pub const TRAIN_SIGMA_FLOOR: f64 = 1e-6;

/// Rate-distortion objective: distortion plus lambda times bits per point.
pub fn rd_loss(distortion: f64, rate_bits: f64, lambda: f64, n_points: usize) -> f64 {
    distortion + lambda * rate_bits / n_points as f64
}
