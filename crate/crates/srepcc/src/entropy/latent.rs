//! Payload coding for latent and hyper features.
//!
//! Latents are coded as integer residuals r = round(y / qs - mu) against a
//! zero-mean Gaussian table picked by the (quantized) scale; the reconstruction
//! y_hat = (r + mu) * qs is computed the same way on both ends, so encoder-side
//! and decoder-side reconstructions are identical by construction. Hyper
//! features use the same machinery with mu = 0, qs = 1 and one static scale
//! per channel. Elements stream in row-major order (point outer, channel
//! inner).

use crate::math;
use crate::nn::FeatMat;
use crate::scalar::Scalar;
use crate::Result;

use super::models::{
    check_overrun, decode_escape_value, encode_escape_value, TableCache, ESCAPE_SYMBOL, SIGMA_MAX, SIGMA_MIN,
};
use super::range::{RangeDecoder, RangeEncoder};

fn put_residual(enc: &mut RangeEncoder, cache: &mut TableCache, r: i32, sigma: f64) {
    let t = cache.for_sigma(sigma);
    let s = t.symbol_of(r);
    t.cdf.encode(enc, s);
    if s == ESCAPE_SYMBOL {
        encode_escape_value(enc, r);
    }
}

fn get_residual(dec: &mut RangeDecoder, cache: &mut TableCache, sigma: f64) -> i32 {
    let t = cache.for_sigma(sigma);
    let s = t.cdf.decode(dec);
    if s == ESCAPE_SYMBOL {
        decode_escape_value(dec)
    } else {
        t.value_of(s)
    }
}

fn round_residual(v: f64) -> i32 {
    v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

/// The quantizer both ends agree on: residual r = round(y/q - mu) and the
/// dequantized value (r + mu) q. Training's frozen-coding stages use this
/// directly so their features match the deployed decoder bit for bit.
pub fn quantize_value(y: f64, mu: f64, q: f64) -> (i32, f64) {
    let r = round_residual(y / q - mu);
    (r, (r as f64 + mu) * q)
}

/// Code latent features; returns the payload and the dequantized features the
/// decoder will reproduce exactly.
pub fn encode_latents<T: Scalar>(
    y: &FeatMat<T>,
    mu: &FeatMat<T>,
    sigma: &FeatMat<T>,
    qs: f32,
    cache: &mut TableCache,
) -> (Vec<u8>, FeatMat<T>) {
    assert_eq!(y.rows(), mu.rows());
    assert_eq!(y.cols(), mu.cols());
    assert_eq!(y.rows(), sigma.rows());
    assert_eq!(y.cols(), sigma.cols());
    let q = qs as f64;
    let mut enc = RangeEncoder::new();
    let mut hat = FeatMat::<T>::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        for c in 0..y.cols() {
            let m = mu.get(i, c).dbl();
            let (r, deq) = quantize_value(y.get(i, c).dbl(), m, q);
            put_residual(&mut enc, cache, r, sigma.get(i, c).dbl());
            hat.set(i, c, T::from_dbl(deq));
        }
    }
    (enc.finish(), hat)
}

pub fn decode_latents<T: Scalar>(
    buf: &[u8],
    mu: &FeatMat<T>,
    sigma: &FeatMat<T>,
    qs: f32,
    cache: &mut TableCache,
) -> Result<FeatMat<T>> {
    assert_eq!(mu.rows(), sigma.rows());
    assert_eq!(mu.cols(), sigma.cols());
    let q = qs as f64;
    let mut dec = RangeDecoder::new(buf);
    let mut hat = FeatMat::<T>::zeros(mu.rows(), mu.cols());
    for i in 0..mu.rows() {
        for c in 0..mu.cols() {
            let r = get_residual(&mut dec, cache, sigma.get(i, c).dbl());
            let m = mu.get(i, c).dbl();
            hat.set(i, c, T::from_dbl((r as f64 + m) * q));
        }
    }
    check_overrun(&dec)?;
    Ok(hat)
}

/// Code hyper features as round(z) against static per-channel scales.
pub fn encode_hyper<T: Scalar>(z: &FeatMat<T>, sigma_ch: &[f32], cache: &mut TableCache) -> (Vec<u8>, FeatMat<T>) {
    assert_eq!(z.cols(), sigma_ch.len());
    let mut enc = RangeEncoder::new();
    let mut hat = FeatMat::<T>::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        for c in 0..z.cols() {
            let r = round_residual(z.get(i, c).dbl());
            put_residual(&mut enc, cache, r, sigma_ch[c] as f64);
            hat.set(i, c, T::from_dbl(r as f64));
        }
    }
    (enc.finish(), hat)
}

pub fn decode_hyper<T: Scalar>(buf: &[u8], rows: usize, sigma_ch: &[f32], cache: &mut TableCache) -> Result<FeatMat<T>> {
    let mut dec = RangeDecoder::new(buf);
    let mut hat = FeatMat::<T>::zeros(rows, sigma_ch.len());
    for i in 0..rows {
        for c in 0..sigma_ch.len() {
            let r = get_residual(&mut dec, cache, sigma_ch[c] as f64);
            hat.set(i, c, T::from_dbl(r as f64));
        }
    }
    check_overrun(&dec)?;
    Ok(hat)
}

/// Ideal bits for one hard-rounded residual under the continuous Gaussian:
/// -log2(Phi((r + 1/2) / s) - Phi((r - 1/2) / s)), with the scale clamped to
/// the coding range. This is the eval-mode counterpart of the training rate
/// term.
pub fn residual_proxy_bits(r: f64, sigma: f64) -> f64 {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let p = math::normal_cdf_diff((r + 0.5) / s, (r - 0.5) / s);
    -p.max(1e-12).log2()
}

/// Proxy bits for a full latent payload.
pub fn latent_proxy_bits<T: Scalar>(y: &FeatMat<T>, mu: &FeatMat<T>, sigma: &FeatMat<T>, qs: f32) -> f64 {
    let q = qs as f64;
    let mut bits = 0.0;
    for i in 0..y.rows() {
        for c in 0..y.cols() {
            let r = round_residual(y.get(i, c).dbl() / q - mu.get(i, c).dbl());
            bits += residual_proxy_bits(r as f64, sigma.get(i, c).dbl());
        }
    }
    bits
}

/// Proxy bits for a hyper payload.
pub fn hyper_proxy_bits<T: Scalar>(z: &FeatMat<T>, sigma_ch: &[f32]) -> f64 {
    let mut bits = 0.0;
    for i in 0..z.rows() {
        for c in 0..z.cols() {
            let r = round_residual(z.get(i, c).dbl());
            bits += residual_proxy_bits(r as f64, sigma_ch[c] as f64);
        }
    }
    bits
}

/// Framing bits the range coder's flush appends beyond the per-symbol costs,
/// on average: the flush itself settles inside the final bytes, so the gap to
/// the true length is byte rounding, 0..8 bits.
pub const RANGE_FLUSH_BITS: f64 = 4.0;

fn residual_table_bits(cache: &mut TableCache, r: i32, sigma: f64) -> f64 {
    let t = cache.for_sigma(sigma);
    let s = t.symbol_of(r);
    // escaped residuals spend four bypass bytes on top of the escape symbol
    t.cdf.bits(s) + if s == ESCAPE_SYMBOL { 32.0 } else { 0.0 }
}

/// Expected coded size of a latent payload in bits: per-symbol costs under
/// the exact quantized tables the coder uses, plus flush framing. This is
/// the evaluation-mode rate estimate; it tracks the true payload length to
/// within range-coder slack without running the coder.
pub fn latent_coded_bits_estimate<T: Scalar>(
    y: &FeatMat<T>,
    mu: &FeatMat<T>,
    sigma: &FeatMat<T>,
    qs: f32,
    cache: &mut TableCache,
) -> f64 {
    let q = qs as f64;
    let mut bits = RANGE_FLUSH_BITS;
    for i in 0..y.rows() {
        for c in 0..y.cols() {
            let r = round_residual(y.get(i, c).dbl() / q - mu.get(i, c).dbl());
            bits += residual_table_bits(cache, r, sigma.get(i, c).dbl());
        }
    }
    bits
}

/// Expected coded size of a hyper payload in bits, as above.
pub fn hyper_coded_bits_estimate<T: Scalar>(z: &FeatMat<T>, sigma_ch: &[f32], cache: &mut TableCache) -> f64 {
    let mut bits = RANGE_FLUSH_BITS;
    for i in 0..z.rows() {
        for c in 0..z.cols() {
            let r = round_residual(z.get(i, c).dbl());
            bits += residual_table_bits(cache, r, sigma_ch[c] as f64);
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn coded_size_tracks_cross_entropy() {
        // 10^4 draws from N(0, 2), rounded; coded size within 7% of the ideal
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 10_000;
        let sigma = 2.0f64;
        let mut cache = TableCache::new();
        let mut enc = RangeEncoder::new();
        let mut ideal = 0.0;
        let mut residuals = Vec::with_capacity(n);
        for _ in 0..n {
            let r = (box_muller(&mut rng) * sigma).round() as i32;
            ideal += residual_proxy_bits(r as f64, sigma);
            put_residual(&mut enc, &mut cache, r, sigma);
            residuals.push(r);
        }
        let buf = enc.finish();
        let coded = (buf.len() * 8) as f64;
        assert!(coded <= ideal * 1.07, "coded {coded} bits vs ideal {ideal}");
        let mut dec = RangeDecoder::new(&buf);
        for &r in &residuals {
            assert_eq!(get_residual(&mut dec, &mut cache, sigma), r);
        }
    }

    #[test]
    fn proxy_matches_actual_within_five_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 5_000;
        let mut cache = TableCache::new();
        let mut enc = RangeEncoder::new();
        let mut proxy = 0.0;
        for _ in 0..n {
            let sigma = math::exp(rng.gen_range(-1.5..2.0));
            let r = (box_muller(&mut rng) * sigma).round() as i32;
            proxy += residual_proxy_bits(r as f64, sigma);
            put_residual(&mut enc, &mut cache, r, sigma);
        }
        let actual = (enc.finish().len() * 8) as f64;
        let rel = (proxy - actual).abs() / actual;
        assert!(rel < 0.05, "proxy {proxy} vs actual {actual} ({rel})");
    }

    #[test]
    fn latent_roundtrip_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..300 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..8);
            let qs = [0.5f32, 1.0, 2.0][trial % 3];
            let mut y = FeatMat::<f32>::zeros(rows, cols);
            let mut mu = FeatMat::<f32>::zeros(rows, cols);
            let mut sg = FeatMat::<f32>::zeros(rows, cols);
            for i in 0..rows {
                for c in 0..cols {
                    y.set(i, c, rng.gen_range(-30.0..30.0));
                    mu.set(i, c, rng.gen_range(-5.0..5.0));
                    sg.set(i, c, math::exp(rng.gen_range(-3.2..2.0) as f64) as f32);
                }
            }
            let mut cache = TableCache::new();
            let (buf, enc_hat) = encode_latents(&y, &mu, &sg, qs, &mut cache);
            let dec_hat = decode_latents::<f32>(&buf, &mu, &sg, qs, &mut cache).unwrap();
            assert_eq!(enc_hat.as_slice(), dec_hat.as_slice(), "trial {trial}");
        }
    }

    #[test]
    fn near_zero_latents_cost_under_an_eighth_bit_each() {
        let n = 4096;
        let y = FeatMat::<f32>::zeros(n, 1);
        let mu = FeatMat::<f32>::zeros(n, 1);
        let sg = FeatMat::<f32>::filled(n, 1, 0.04);
        let mut cache = TableCache::new();
        let (buf, hat) = encode_latents(&y, &mu, &sg, 1.0, &mut cache);
        assert!(hat.as_slice().iter().all(|&v| v == 0.0));
        assert!(buf.len() * 8 <= n / 8, "{} bits for {n} flat symbols", buf.len() * 8);
    }

    #[test]
    fn outliers_escape_and_survive() {
        let mut y = FeatMat::<f32>::zeros(3, 1);
        y.set(0, 0, 10_000.0);
        y.set(1, 0, -77_777.0);
        y.set(2, 0, 1.0);
        let mu = FeatMat::<f32>::zeros(3, 1);
        let sg = FeatMat::<f32>::filled(3, 1, 0.04);
        let mut cache = TableCache::new();
        let (buf, enc_hat) = encode_latents(&y, &mu, &sg, 1.0, &mut cache);
        let dec_hat = decode_latents::<f32>(&buf, &mu, &sg, 1.0, &mut cache).unwrap();
        assert_eq!(enc_hat.as_slice(), dec_hat.as_slice());
        assert_eq!(dec_hat.get(0, 0), 10_000.0);
        assert_eq!(dec_hat.get(1, 0), -77_777.0);
    }

    #[test]
    fn hyper_roundtrip_per_channel_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let sigma_ch = [0.5f32, 2.0, 9.0, 0.04];
        let mut z = FeatMat::<f32>::zeros(200, 4);
        for i in 0..200 {
            for c in 0..4 {
                z.set(i, c, (box_muller(&mut rng) * sigma_ch[c] as f64) as f32);
            }
        }
        let mut cache = TableCache::new();
        let (buf, enc_hat) = encode_hyper(&z, &sigma_ch, &mut cache);
        let dec_hat = decode_hyper::<f32>(&buf, 200, &sigma_ch, &mut cache).unwrap();
        assert_eq!(enc_hat.as_slice(), dec_hat.as_slice());
        for i in 0..200 {
            for c in 0..4 {
                assert_eq!(dec_hat.get(i, c), z.get(i, c).round());
            }
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let y = FeatMat::<f32>::filled(500, 2, 3.0);
        let mu = FeatMat::<f32>::zeros(500, 2);
        let sg = FeatMat::<f32>::filled(500, 2, 1.0);
        let mut cache = TableCache::new();
        let (buf, _) = encode_latents(&y, &mu, &sg, 1.0, &mut cache);
        let cut = &buf[..buf.len() / 4];
        assert!(decode_latents::<f32>(cut, &mu, &sg, 1.0, &mut cache).is_err());
    }

    #[test]
    fn coded_size_estimate_is_tight_on_small_streams() {
        // the pipeline's rate proxy runs on per-block payloads of tens to a
        // few hundred symbols; the table-exact estimate must stay tight there
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut cache = TableCache::new();
        let mut worst: f64 = 0.0;
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for &n in &[30usize, 80, 150, 400] {
            for _ in 0..8 {
                let sigma = rng.gen_range(0.3..4.0);
                let mut enc = RangeEncoder::new();
                let mut est = RANGE_FLUSH_BITS;
                for _ in 0..n {
                    let r = (box_muller(&mut rng) * sigma).round() as i32;
                    est += residual_table_bits(&mut cache, r, sigma);
                    put_residual(&mut enc, &mut cache, r, sigma);
                }
                let coded = (enc.finish().len() * 8) as f64;
                let rel = (est - coded).abs() / coded;
                worst = worst.max(rel);
                sum += rel;
                cnt += 1.0;
            }
        }
        assert!(sum / cnt < 0.02, "mean relative gap {}", sum / cnt);
        assert!(worst < 0.10, "worst relative gap {worst}");
    }
}
