//! Bjontegaard deltas between two rate-distortion curves: average bitrate
//! difference at equal quality (BD-Rate, %) and average quality difference at
//! equal bitrate (BD-PSNR, dB). Classic whole-range cubic fit in the log-rate
//! domain.

use crate::{Error, Result};

/// One operating point: bits per point and PSNR in dB.
pub type RdPoint = (f64, f64);

/// Cubic polynomial in a mean-centered variable. Centering keeps the normal
/// equations well conditioned for PSNR-sized abscissas.
struct Cubic {
    xbar: f64,
    c: [f64; 4],
}

impl Cubic {
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let f = |t: f64| {
            let t = t - self.xbar;
            t * (self.c[0] + t * (self.c[1] / 2.0 + t * (self.c[2] / 3.0 + t * self.c[3] / 4.0)))
        };
        f(hi) - f(lo)
    }
}

/// Gaussian elimination with partial pivoting; None when singular.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= scale * 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..4).rev() {
        let mut s = b[col];
        for k in col + 1..4 {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

fn fit_cubic(xs: &[f64], ys: &[f64]) -> Result<Cubic> {
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut a = [[0.0; 4]; 4];
    let mut b = [0.0; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let t = x - xbar;
        let pows = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            b[i] += pows[i] * y;
            for j in 0..4 {
                a[i][j] += pows[i] * pows[j];
            }
        }
    }
    let c = solve4(a, b).ok_or_else(|| {
        Error::Parse("rate-distortion curve is degenerate (needs 4 distinct abscissas)".into())
    })?;
    Ok(Cubic { xbar, c })
}

fn validate(curve: &[RdPoint], name: &str) -> Result<()> {
    if curve.len() < 4 {
        return Err(Error::Parse(format!("{name} curve has {} points, need at least 4", curve.len())));
    }
    for &(bpp, psnr) in curve {
        if !(bpp.is_finite() && bpp > 0.0 && psnr.is_finite()) {
            return Err(Error::Parse(format!("{name} curve point ({bpp}, {psnr}) is not usable")));
        }
    }
    Ok(())
}

fn overlap(a: &[f64], b: &[f64], what: &str) -> Result<(f64, f64)> {
    let span = |v: &[f64]| {
        v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (alo, ahi) = span(a);
    let (blo, bhi) = span(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if lo >= hi {
        return Err(Error::Parse(format!("rate-distortion curves share no {what} range")));
    }
    Ok((lo, hi))
}

/// Average differences between the `test` and `reference` curves:
/// `(bd_rate_percent, bd_psnr_db)`. Negative BD-Rate means the test codec
/// spends less rate for the same quality; positive BD-PSNR means it delivers
/// more quality at the same rate.
pub fn bd_metrics(test: &[RdPoint], reference: &[RdPoint]) -> Result<(f64, f64)> {
    validate(test, "test")?;
    validate(reference, "reference")?;
    let lr_t: Vec<f64> = test.iter().map(|p| p.0.log10()).collect();
    let ps_t: Vec<f64> = test.iter().map(|p| p.1).collect();
    let lr_r: Vec<f64> = reference.iter().map(|p| p.0.log10()).collect();
    let ps_r: Vec<f64> = reference.iter().map(|p| p.1).collect();

    let (plo, phi) = overlap(&ps_t, &ps_r, "quality")?;
    let rate_t = fit_cubic(&ps_t, &lr_t)?;
    let rate_r = fit_cubic(&ps_r, &lr_r)?;
    let dlog = (rate_t.integral(plo, phi) - rate_r.integral(plo, phi)) / (phi - plo);
    let bd_rate = 100.0 * (10f64.powf(dlog) - 1.0);

    let (rlo, rhi) = overlap(&lr_t, &lr_r, "rate")?;
    let psnr_t = fit_cubic(&lr_t, &ps_t)?;
    let psnr_r = fit_cubic(&lr_r, &ps_r)?;
    let bd_psnr = (psnr_t.integral(rlo, rhi) - psnr_r.integral(rlo, rhi)) / (rhi - rlo);

    Ok((bd_rate, bd_psnr))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(f: impl Fn(f64) -> f64, bpps: &[f64]) -> Vec<RdPoint> {
        bpps.iter().map(|&r| (r, f(r.log10()))).collect()
    }

    #[test]
    fn identical_curves_have_zero_deltas() {
        let a = curve(|t| 40.0 + 10.0 * t - 0.8 * t * t, &[0.05, 0.1, 0.25, 0.6, 1.2]);
        let (r, p) = bd_metrics(&a, &a).unwrap();
        assert!(r.abs() < 1e-9, "bd-rate {r}");
        assert!(p.abs() < 1e-9, "bd-psnr {p}");
    }

    #[test]
    fn uniformly_doubled_rate_costs_one_hundred_percent() {
        let reference = curve(|t| 42.0 + 9.0 * t - 0.5 * t * t, &[0.04, 0.12, 0.3, 0.9]);
        let test: Vec<RdPoint> = reference.iter().map(|&(r, p)| (2.0 * r, p)).collect();
        let (r, p) = bd_metrics(&test, &reference).unwrap();
        assert!((r - 100.0).abs() < 0.1, "bd-rate {r}");
        assert!(p < 0.0, "paying double for the same quality must read as a loss, got {p}");
    }

    #[test]
    fn swapping_arguments_inverts_both_deltas() {
        let a = curve(|t| 39.0 + 11.0 * t - 0.9 * t * t, &[0.05, 0.15, 0.4, 1.0, 2.0]);
        let b = curve(|t| 37.5 + 10.0 * t - 0.4 * t * t, &[0.06, 0.2, 0.5, 1.1, 1.9]);
        let (r_ab, p_ab) = bd_metrics(&a, &b).unwrap();
        let (r_ba, p_ba) = bd_metrics(&b, &a).unwrap();
        // log-area differences negate exactly, so rate factors multiply to 1
        assert!(((1.0 + r_ab / 100.0) * (1.0 + r_ba / 100.0) - 1.0).abs() < 1e-9);
        assert!((p_ab + p_ba).abs() < 1e-9);
    }

    /// Independent oracle: with exactly 4 points the least-squares cubic is
    /// the unique interpolating polynomial, so Lagrange evaluation plus a
    /// fine trapezoid sum reproduces the whole computation without sharing
    /// any code with the implementation.
    #[test]
    fn matches_lagrange_trapezoid_oracle() {
        fn lagrange(xs: &[f64], ys: &[f64], x: f64) -> f64 {
            let mut s = 0.0;
            for i in 0..xs.len() {
                let mut w = ys[i];
                for j in 0..xs.len() {
                    if j != i {
                        w *= (x - xs[j]) / (xs[i] - xs[j]);
                    }
                }
                s += w;
            }
            s
        }
        fn trapezoid(xs: &[f64], ys: &[f64], lo: f64, hi: f64) -> f64 {
            let n = 200_000;
            let h = (hi - lo) / n as f64;
            let mut acc = (lagrange(xs, ys, lo) + lagrange(xs, ys, hi)) / 2.0;
            for i in 1..n {
                acc += lagrange(xs, ys, lo + h * i as f64);
            }
            acc * h
        }

        let test = curve(|t| 41.0 + 12.0 * t - 1.2 * t * t, &[0.05, 0.14, 0.4, 1.1]);
        let reference = curve(|t| 40.0 + 10.5 * t - 0.7 * t * t, &[0.06, 0.16, 0.45, 1.2]);
        let (got_rate, got_psnr) = bd_metrics(&test, &reference).unwrap();

        let lr_t: Vec<f64> = test.iter().map(|p| p.0.log10()).collect();
        let ps_t: Vec<f64> = test.iter().map(|p| p.1).collect();
        let lr_r: Vec<f64> = reference.iter().map(|p| p.0.log10()).collect();
        let ps_r: Vec<f64> = reference.iter().map(|p| p.1).collect();

        // recompute the overlap plainly
        let lo = ps_t.iter().fold(f64::INFINITY, |m, &v| m.min(v))
            .max(ps_r.iter().fold(f64::INFINITY, |m, &v| m.min(v)));
        let hi = ps_t.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            .min(ps_r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)));

        let dlog = (trapezoid(&ps_t, &lr_t, lo, hi) - trapezoid(&ps_r, &lr_r, lo, hi)) / (hi - lo);
        let want_rate = 100.0 * (10f64.powf(dlog) - 1.0);
        assert!(
            (got_rate - want_rate).abs() <= want_rate.abs().max(1.0) * 0.001,
            "bd-rate {got_rate} vs oracle {want_rate}"
        );

        let rlo = lr_t.iter().fold(f64::INFINITY, |m, &v| m.min(v))
            .max(lr_r.iter().fold(f64::INFINITY, |m, &v| m.min(v)));
        let rhi = lr_t.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            .min(lr_r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)));
        let want_psnr =
            (trapezoid(&lr_t, &ps_t, rlo, rhi) - trapezoid(&lr_r, &ps_r, rlo, rhi)) / (rhi - rlo);
        assert!((got_psnr - want_psnr).abs() < 1e-3, "bd-psnr {got_psnr} vs oracle {want_psnr}");
    }

    #[test]
    fn disjoint_quality_ranges_error() {
        let a = curve(|t| 30.0 + 5.0 * t, &[0.05, 0.1, 0.2, 0.4]);
        let b: Vec<RdPoint> = a.iter().map(|&(r, p)| (r, p + 50.0)).collect();
        assert!(matches!(bd_metrics(&a, &b), Err(Error::Parse(_))));
    }

    #[test]
    fn short_curves_and_bad_points_error() {
        let a = curve(|t| 40.0 + 8.0 * t, &[0.05, 0.1, 0.2]);
        let b = curve(|t| 40.0 + 8.0 * t, &[0.05, 0.1, 0.2, 0.4]);
        assert!(matches!(bd_metrics(&a, &b), Err(Error::Parse(_))));
        let mut c = b.clone();
        c[1].0 = 0.0;
        assert!(matches!(bd_metrics(&c, &b), Err(Error::Parse(_))));
        // duplicated quality values leave fewer than 4 distinct abscissas
        let d: Vec<RdPoint> = vec![(0.05, 40.0), (0.1, 40.0), (0.2, 40.0), (0.4, 40.0)];
        assert!(matches!(bd_metrics(&d, &b), Err(Error::Parse(_))));
    }
}
