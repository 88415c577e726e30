//! Training loop, query simulation, retrieval metrics and run configuration.

mod config;
mod evaluate;
mod train;

pub use config::{
    load_split, DataConfig, EvaluationConfig, OptimizerConfig, Splits, SynthConfig, TrainConfig, TrainingConfig,
};
pub use evaluate::{evaluate, evaluate_model, evaluate_ncc, simulate_queries, EvalReport, QueryRecord, SimulatedQuery};
pub use train::{epoch_schedule, train, EpochRecord, TrainOutcome};

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::data::DataError;
use crate::encoder::{CheckpointError, EncoderError};
use crate::retrieval::RetrievalError;
use crate::sampler::SamplerError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("baseline `{0}` has no trainable parameters")]
    NothingToTrain(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("optimizer failed at epoch {epoch}, step {step}: {source}")]
    Optimizer {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}
