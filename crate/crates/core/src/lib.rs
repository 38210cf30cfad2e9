//! Pseudo segmentation labels from a vision-transformer classifier.
//!
//! The pipeline trains a multi-label ViT on image-level labels, explains each
//! present class with relevance propagation through the attention blocks,
//! smooths the resulting maps with soft erase, gates background with saliency
//! and finally marks uncertain background pixels as ignored before scoring the
//! labels with mIoU.

pub mod error;
pub mod explain;
pub mod imaging;
pub mod labeler;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
