//! Training: loss terms, reverse-mode tape, model graphs, Adam, synthetic
//! data, and the staged schedule.

pub mod data;
pub mod graph;
pub mod loss;
pub mod optim;
pub mod stages;
pub mod tape;

pub use data::{generate_training_blocks, mixed_training_blocks, SurfaceKind};
pub use stages::{trace_csv, train_lambda_chain, train_stage, LossTraceRow, TrainRun};
pub use graph::{sr_loss, stage1_loss, tape_input, tape_model, SrGraph, Stage1Graph, TapedTensor};
pub use loss::{focal_term, gauss_bits, max_focal_term, rd_loss, FOCAL_ALPHA, FOCAL_GAMMA, TRAIN_SIGMA_FLOOR};
pub use optim::{pack_grads, pack_stores, write_back, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{LayerGrad, MapRef, NetGrads, NodeId, Tape};
