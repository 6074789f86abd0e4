//! Miniature post-LN transformer classifier with attention-weighted pooling,
//! masked-token pretraining and joint cross-entropy + alignment fine-tuning.

mod checkpoint;
mod config;
mod forward;
mod optim;
mod params;
mod pretrain;
mod selfcheck;
mod train;

use thiserror::Error;

use crate::grammar::GrammarError;
use crate::numerics::NumericsError;

pub use checkpoint::{load_model, save_model, sidecar_path, ModelSidecar};
pub use config::{EncoderConfig, TrainConfig};
pub use forward::{
    argmax, classify, explanation_target, forward, forward_suffix, layer_gradients, predict, token_row, ForwardTrace,
    LayerGradients,
};
pub use optim::Adam;
pub use params::{EncoderParams, LayerParams};
pub use pretrain::{mlm_loss, mlm_pretrain, PretrainOutcome, MASK_RATE};
pub use selfcheck::{selfcheck, selfcheck_instance, GradientCheck, SelfcheckConfig, SelfcheckReport};
pub use train::{evaluate, sample_gradient, train, EpochMetrics, LossWeights, SplitMetrics, TrainOutcome};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("input length {got} differs from max_len {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(usize),
    #[error("input does not start with a valid CLS token")]
    MissingCls,
    #[error("no poolable position: the input has no valid non-special token")]
    PoolingDegenerate,
    #[error("target class {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("training data has no labels")]
    NoLabels,
    #[error("label does not fit the model: {0}")]
    BadLabel(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Explain(Box<crate::explain::ExplainError>),
}

impl From<crate::explain::ExplainError> for EncoderError {
    fn from(e: crate::explain::ExplainError) -> Self {
        match e {
            crate::explain::ExplainError::Encoder(inner) => inner,
            other => EncoderError::Explain(Box::new(other)),
        }
    }
}
