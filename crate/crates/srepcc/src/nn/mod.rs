//! Sparse convolutional engine.
//!
//! Everything here is deterministic by construction: coordinates stay in
//! canonical Morton order, kernel maps enumerate in a fixed order, and
//! accumulation is f64 with a fixed summation order.

pub mod kernel;
pub mod layer;
pub mod ops;
pub mod params;
pub mod tensor;

pub use kernel::{build_kernel_map, kernel_offsets, ConvKind, KernelMap};
pub use layer::{count_parameters, expand_model, irb_layers, irb_param_count, Activation, LayerSpec, ModelItem, ModelSpec};
pub use ops::{irb_forward, prune_top_k, run_model, run_model_with_tap, sparse_conv, top_k_indices};
pub use params::{init_store, LayerParams, ParameterStore};
pub use tensor::{CoordMap, FeatMat, SparseTensor};
