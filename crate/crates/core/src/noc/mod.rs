//! Architecture strings and the heads they describe.

mod checkpoint;
mod net;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{ForwardCache, InitMode, InitProvenance, NocGrads, NocLayer, NocNet};
pub use spec::{parse_spec, NocSpec, NocToken, SpecError};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NocError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("shape: {0}")]
    Shape(String),
    #[error("inputs: {0}")]
    Inputs(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("spec {0} has a single fc layer and no feature layer; use the logits instead")]
    NoFeatureLayer(String),
    #[error("identity extension: {0}")]
    DonorMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests;
