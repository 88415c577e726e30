//! Ultrasound frame retrieval against a tracked reference sweep.
//!
//! A convolutional encoder is trained with intra-sweep contrastive learning:
//! two overlapping batches from the same sweep are scored against each other,
//! pairs closer than 10 mm in probe space are positives, and a learnable
//! dustbin score lets the model reject frames with no confident match.

mod binio;

pub mod augment;
pub mod baselines;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod objective;
pub mod retrieval;
pub mod sampler;
pub mod tensor;

pub use baselines::{BaselineKind, TrainingMode};
pub use data::{GrayImage, ProbePose, Sweep, SweepFrame};
pub use encoder::{EncoderConfig, EncoderParams};
pub use objective::{AblationMode, LossConfig};
pub use retrieval::{EmbeddingIndex, RetrievalResult, RetrievalStatus};
pub use tensor::{Scalar, Tensor};
