//! The searchable U-Net mask estimator.
//!
//! A [`Genome`] expands into a [`Topology`] (concrete layer widths), which a
//! [`NetworkInstance`] pairs with weights. The same weights run through two
//! independent forward implementations: the differentiable batch pass on a
//! [`crate::tensor::Tape`] used for training, and the frame-by-frame
//! [`Streamer`] used at run time.

mod cirm;
mod file;
mod genome;
mod infer;
mod network;

use thiserror::Error;

pub use cirm::{
    apply_mask, compress, compute_cirm, raw_ratio, uncompress, MaskFrame, CLAMP_MARGIN, MASK_BOUND,
    MASK_STEEPNESS, POWER_FLOOR,
};
pub use file::{decode, encode, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use genome::{
    Activation, Bottleneck, BottleneckKind, Genome, LayerId, LayerShape, LevelGene, LevelTopology, Topology,
    BOTTLENECK_KERNEL, CHANNEL_RANGE, HIDDEN_RANGE, KERNELS, MAX_LEVELS, NETWORK_BINS, STRIDES,
};
pub use infer::Streamer;
pub use network::{offline_features, param_shapes, FeatureNormalizer, NetworkInstance, ParamLayout};

use crate::tensor::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid genome: {0}")]
    InvalidGenome(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("frame has {got} bins, network expects {want}")]
    BinMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Multiply-accumulate operations per frame.
pub fn count_macs(net: &NetworkInstance) -> u64 {
    net.topology().macs()
}
