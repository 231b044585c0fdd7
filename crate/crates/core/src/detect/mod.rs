//! Proposal labels, NoC training, SVM and box-regression heads, scoring.

mod bbox;
mod label;
mod score;
mod svm;
mod train;

pub use bbox::{
    apply_bbox, apply_deltas, encode_deltas, train_bbox_regressor, BBoxRegressor, MAX_LOG_SCALE,
};
pub use label::{assign_labels, iou, GroundTruth, LabeledProposal, ProposalLabel};
pub use score::{pool_region, score_pooled, score_regions, Detection, PoolSpec, ScoreMode};
pub use svm::{svm_primal, train_binary_svm, train_svm, LinearSvm, SvmConfig, SvmHead, SvmTrace};
pub use train::{
    accuracy, batch_gradient, mean_loss, sgd_train, RoiDataset, RoiSample, TrainConfig, TrainReport,
};

use thiserror::Error;

use crate::noc::NocError;
use crate::pyramid::PyramidError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("training diverged at step {step} (learning rate {lr})")]
    Diverged { step: usize, lr: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("{0}")]
    Config(String),
    #[error("normal matrix for category {category} is singular; use lambda > 0")]
    Singular { category: usize },
    #[error(transparent)]
    Noc(#[from] NocError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DetectError {
    pub(crate) fn is_non_finite(&self) -> bool {
        matches!(
            self,
            DetectError::Tensor(TensorError::NonFinite { .. })
                | DetectError::Noc(NocError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}
