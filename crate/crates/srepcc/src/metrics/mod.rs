//! Geometry quality metrics, rate accounting, and curve comparisons.

pub mod bd;
pub mod channels;
pub mod kdtree;
pub mod psnr;
pub mod rd;

pub use bd::{bd_metrics, RdPoint};
pub use channels::{channel_variance_analysis, latent_channel_order, ChannelCurvePoint};
pub use kdtree::KdTree;
pub use psnr::{psnr_d1, psnr_d1_points, psnr_d2, psnr_d2_points, psnr_from_mse, PSNR_CAP};
pub use rd::{from_csv as rd_from_csv, to_csv as rd_to_csv, RdRow};
