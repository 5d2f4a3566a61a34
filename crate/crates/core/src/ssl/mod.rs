//! Self-supervised pre-training: redundancy-reduction pair loss over
//! embeddings gathered at corresponding pixels, with analytic gradients
//! throughout (no autodiff).

mod barlow;
mod encoder;
mod mat;
mod pretrain;

pub use barlow::{barlow_backward, barlow_loss, cross_correlation, BarlowGrads};
pub use encoder::{
    image_to_tensor, ConvLayer, Encoder, EncoderCache, EncoderConfig, EncoderGrads, Tensor,
};
pub use mat::Mat;
pub use pretrain::{feature_cell, lr_at, pretrain, LossRecord, PretrainConfig, PretrainStep};

#[derive(Debug, thiserror::Error)]
pub enum SslError {
    #[error("embedding dimension {dim} has zero variance across the batch")]
    ZeroVariance { dim: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFinite { iter: u64 },
    #[error("checkpoint tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
    #[error("empty batch: no pixel pairs survived augmentation")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, SslError>;
