//! Deterministic entropy coding.
//!
//! A carry-aware range coder drives three symbol models: quantized Gaussian
//! tables for latent and hyper residuals, an adaptive order-0 byte model for
//! octree occupancy, and a flat 256-ary bypass for escaped values. Table
//! construction goes through `crate::math` only, so encoder and decoder always
//! agree bit for bit, across platforms.

pub mod latent;
pub mod models;
pub mod octree;
pub mod range;

pub use latent::{
    decode_hyper, decode_latents, encode_hyper, encode_latents, hyper_coded_bits_estimate, hyper_proxy_bits,
    latent_coded_bits_estimate, latent_proxy_bits, quantize_value, residual_proxy_bits, RANGE_FLUSH_BITS,
};
pub use models::{
    level_sigma, sigma_level, AdaptiveByteModel, CdfTable, GaussianTable, TableCache, CDF_TOTAL, ESCAPE_SYMBOL,
    SIGMA_LEVELS, SIGMA_MAX, SIGMA_MIN,
};
pub use range::{RangeDecoder, RangeEncoder};
