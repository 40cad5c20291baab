//! The codec proper: model architectures, block pipelines, and the container.

pub mod bitstream;
pub mod checkpoint;
pub mod model;
pub mod pipeline;

pub use bitstream::{parse, serialize, Bitstream, BlockHeader, BlockRecord, FileHeader};
pub use model::{CodecModel, CodecSpecs, ModelConfig, LAMBDAS};
pub use pipeline::{
    decode_block, decode_cloud, encode_block, encode_cloud, optimize_top_k, select_coding_config,
    BlockEncoding, BlockStats, CodingChoice,
};
