//! Deterministic transcendentals.
//!
//! Entropy coding requires the decoder to rebuild the encoder's probability
//! tables bit-for-bit, so every function on that path is implemented here with
//! plain IEEE 754 add/mul/div (correctly rounded on every conforming target,
//! and rustc does not contract to FMA), never via the platform libm. The same
//! functions back the training-time rate proxy and sigmoid so that evaluation
//! and coding agree.
//!
//! `exp` uses base-2 range reduction with a split ln(2) and a degree-13 Taylor
//! polynomial; worst-case error is a few ulp. `erf`/`erfc` follow the
//! well-known three-region rational approximation scheme used by the classic
//! Fortran special-function libraries (relative error ~1e-16).

const LOG2_E: f64 = 1.4426950408889634074;
// ln(2) split so that x - k*LN2_HI is exact for |k| < 2^26.
const LN2_HI: f64 = 6.93147180369123816490e-01;
const LN2_LO: f64 = 1.90821492927058770002e-10;

/// Multiply by 2^k exactly (up to subnormal rounding), without libm ldexp.
#[inline]
pub fn scale_by_pow2(v: f64, mut k: i32) -> f64 {
    let mut v = v;
    while k > 1000 {
        v *= f64::from_bits(((1023u64 + 1000) & 0x7ff) << 52);
        k -= 1000;
    }
    while k < -1000 {
        v *= f64::from_bits(((1023i64 - 1000) as u64) << 52);
        k += 1000;
    }
    v * f64::from_bits(((1023 + k as i64) as u64) << 52)
}

/// e^x, deterministic across platforms. Monotone enough for table building;
/// max error a few ulp.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.782712893384 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let k = (x * LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series around 0, |r| <= ln(2)/2. Horner, highest term first.
    let mut p = 1.0 / 6227020800.0; // 1/13!
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    scale_by_pow2(p, k as i32)
}

const THRESH: f64 = 0.46875;
const SQRPI: f64 = 5.6418958354775628695e-1; // 1/sqrt(pi)
const XBIG: f64 = 26.543; // erfc underflows to 0 beyond this

const EA: [f64; 5] = [
    3.16112374387056560e00,
    1.13864154151050156e02,
    3.77485237685302021e02,
    3.20937758913846947e03,
    1.85777706184603153e-1,
];
const EB: [f64; 4] = [
    2.36012909523441209e01,
    2.44024637934444173e02,
    1.28261652607737228e03,
    2.84423683343917062e03,
];
const EC: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e00,
    6.61191906371416295e01,
    2.98635138197400131e02,
    8.81952221241769090e02,
    1.71204761263407058e03,
    2.05107837782607147e03,
    1.23033935479799725e03,
    2.15311535474403846e-8,
];
const ED: [f64; 8] = [
    1.57449261107098347e01,
    1.17693950891312499e02,
    5.37181101862009858e02,
    1.62138957456669019e03,
    3.29079923573345963e03,
    4.36261909014324716e03,
    3.43936767414372164e03,
    1.23033935480374942e03,
];
const EP: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const EQ: [f64; 5] = [
    2.56852019228982242e00,
    1.87295284992346047e00,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

// Central region rational fit; valid for |x| <= THRESH. Returns erf(x).
fn erf_small(x: f64) -> f64 {
    let y = x * x;
    let mut xnum = EA[4] * y;
    let mut xden = y;
    for i in 0..3 {
        xnum = (xnum + EA[i]) * y;
        xden = (xden + EB[i]) * y;
    }
    x * (xnum + EA[3]) / (xden + EB[3])
}

// erfc(x)*exp(x^2) is fit rationally; the exp(-x^2) factor is applied with the
// argument split at a 1/16 grid to keep cancellation error down.
fn erfc_mid(y: f64) -> f64 {
    let mut xnum = EC[8] * y;
    let mut xden = y;
    for i in 0..7 {
        xnum = (xnum + EC[i]) * y;
        xden = (xden + ED[i]) * y;
    }
    let result = (xnum + EC[7]) / (xden + ED[7]);
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    exp(-ysq * ysq) * exp(-del) * result
}

fn erfc_large(y: f64) -> f64 {
    if y >= XBIG {
        return 0.0;
    }
    let ysq = 1.0 / (y * y);
    let mut xnum = EP[5] * ysq;
    let mut xden = ysq;
    for i in 0..4 {
        xnum = (xnum + EP[i]) * ysq;
        xden = (xden + EQ[i]) * ysq;
    }
    let mut result = ysq * (xnum + EP[4]) / (xden + EQ[4]);
    result = (SQRPI - result) / y;
    let ysq16 = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq16) * (y + ysq16);
    exp(-ysq16 * ysq16) * exp(-del) * result
}

/// Complementary error function, deterministic across platforms.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    let r = if y <= THRESH {
        return 1.0 - erf_small(x);
    } else if y <= 4.0 {
        erfc_mid(y)
    } else {
        erfc_large(y)
    };
    if x < 0.0 {
        2.0 - r
    } else {
        r
    }
}

/// Error function, deterministic across platforms.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.abs() <= THRESH {
        erf_small(x)
    } else if x < 0.0 {
        erfc(-x) - 1.0 // -erf(-x) without the cancellation of 1 - erfc(x)
    } else {
        1.0 - erfc(x)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.39894228040143267794;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * exp(-0.5 * x * x)
}

/// Phi(hi) - Phi(lo) without cancellation. When both arguments sit in the
/// upper tail the direct difference loses the tail entirely (both CDFs round
/// to ~1), so that case is reflected onto the lower tail where erfc keeps
/// full precision.
#[inline]
pub fn normal_cdf_diff(hi: f64, lo: f64) -> f64 {
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Logistic sigmoid on deterministic `exp`; safe for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn exp_matches_reference_values() {
        close(exp(0.0), 1.0, 0.0);
        close(exp(1.0), std::f64::consts::E, 1e-15);
        close(exp(-1.0), 1.0 / std::f64::consts::E, 1e-15);
        for i in -60..=60 {
            let x = i as f64 * 0.25;
            let r = exp(x);
            let s = x.exp();
            assert!((r - s).abs() <= 4.0 * f64::EPSILON * s.abs().max(1e-300), "x={x}");
        }
    }

    #[test]
    fn exp_extremes() {
        assert_eq!(exp(-1000.0), 0.0);
        assert!(exp(800.0).is_infinite());
        assert!(exp(-745.0) > 0.0); // subnormal but nonzero
    }

    #[test]
    fn erf_reference_values() {
        close(erf(0.0), 0.0, 0.0);
        close(erf(0.1), 0.1124629160182848922, 1e-15);
        close(erf(0.5), 0.5204998778130465377, 1e-15);
        close(erf(1.0), 0.8427007929497148693, 1e-15);
        close(erf(-1.0), -0.8427007929497148693, 1e-15);
        close(erfc(2.0), 0.0046777349810472658, 1e-17);
        close(erfc(5.0), 1.5374597944280348502e-12, 1e-26);
        close(erfc(-1.0), 1.8427007929497148693, 1e-15);
    }

    #[test]
    fn erf_consistency_and_monotone() {
        let mut prev = -1.0;
        for i in -400..=400 {
            let x = i as f64 * 0.02;
            let e = erf(x);
            close(e + erfc(x), 1.0, 1e-14); // identity
            assert!(e >= prev - 1e-16);
            prev = e;
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        close(normal_cdf(0.0), 0.5, 1e-16);
        close(normal_cdf(1.0), 0.8413447460685429486, 1e-15);
        close(normal_cdf(-1.96), 0.0249978951482204356, 1e-15);
        close(normal_cdf(6.0), 0.999999999013412354, 1e-15);
    }

    #[test]
    fn sigmoid_behaves() {
        close(sigmoid(0.0), 0.5, 0.0);
        close(sigmoid(1.0), 1.0 / (1.0 + (-1.0f64).exp()), 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        close(sigmoid(3.0) + sigmoid(-3.0), 1.0, 1e-15);
    }

    #[test]
    fn scale_by_pow2_exact() {
        assert_eq!(scale_by_pow2(1.5, 3), 12.0);
        assert_eq!(scale_by_pow2(1.0, -3), 0.125);
        assert_eq!(scale_by_pow2(1.0, 1023) / 2f64.powi(1023), 1.0);
    }
}
