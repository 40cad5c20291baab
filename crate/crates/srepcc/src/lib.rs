//! Learned geometry codec for voxelized point clouds.
//!
//! The coding model is a sparse-convolutional autoencoder with a hyperprior:
//! occupancy geometry is analyzed into a low-rate latent grid, the latents are
//! entropy-coded against Gaussian parameters predicted from a second (hyper)
//! latent level, and a generative synthesis network reconstructs occupancy
//! probabilities that are binarized by keeping the top-k most likely voxels.
//! Optional super-resolution branches upsample the decoded block 2x or 4x in
//! the compressed domain, so a cloud can be downsampled before encoding and
//! restored to full resolution after decoding.
//!
//! The numeric core is generic over the scalar type (`f32` for deployment,
//! `f64` for gradient checking); see [`scalar::Scalar`]. All accumulation
//! happens in `f64` regardless of the storage scalar, and every transcendental
//! that affects coded bits goes through [`math`] so encoder and decoder agree
//! bit-for-bit across platforms.

pub mod codec;
pub mod entropy;
pub mod math;
pub mod metrics;
pub mod morton;
pub mod nn;
pub mod pc;
pub mod ply;
pub mod scalar;
pub mod train;

/// Deployment scalar: parameters and features are stored in `f32`.
pub type S = f32;
/// Sparse tensor over the deployment scalar.
pub type SparseTensorS = nn::SparseTensor<S>;
/// Parameter store over the deployment scalar.
pub type ParameterStoreS = nn::ParameterStore<S>;
/// Full codec model over the deployment scalar.
pub type CodecModelS = codec::CodecModel<S>;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// Malformed input the caller handed us (bad PLY, bad config value, ...).
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Bitstream or checkpoint violates its format contract.
    Format(String),
    /// An internal invariant was violated; indicates a bug, not bad input.
    Invariant(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
