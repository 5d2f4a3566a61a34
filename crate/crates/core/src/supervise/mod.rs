//! Supervised fine-tuning and evaluation: a linear classifier head over
//! encoder features, trained with focal loss, scored by mIoU.

mod eval;
mod finetune;
mod focal;

pub use eval::{confusion_matrix, evaluate_miou, write_class_overlay, MiouReport};
pub use finetune::{
    finetune, predict_labels, split_labeled, ClassifierHead, FinetuneConfig, FinetuneMode,
    LabeledImage,
};
pub use focal::focal_loss;

#[derive(Debug, thiserror::Error)]
pub enum SuperviseError {
    #[error("no labeled pixels in batch")]
    NoLabeledPixels,
    #[error("need at least 2 frames to split, got {0}")]
    TooFewFrames(usize),
    #[error("label fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },
    #[error("non-finite loss at iteration {iter}")]
    NonFinite { iter: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, SuperviseError>;
