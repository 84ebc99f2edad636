//! Run orchestration shared by the command-line tool and the test suites.

mod benchmark;
mod checkpoint;
mod config;
mod gradcheck;
mod metrics;
mod plot;
mod train;

pub use benchmark::{synthetic_run, SyntheticRun};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use config::RunConfig;
pub use gradcheck::{run_gradcheck, GradCheckSuite, GroupResult, SuiteOptions};
pub use metrics::{Confusion, MetricsReport, SCHEMA_VERSION};
pub use plot::loss_curve_svg;
pub use train::{
    eval_sampler, evaluate, overfit, split_corpus, train, DataSplit, EpochLog, OverfitReport, TrainOutcome, EPOCH_LOG_HEADER,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::preprocess::PreprocessError;
use crate::siamese::PairError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(TensorError::NonFinite(what)) => HarnessError::Numerical(format!("non-finite {what}")),
            ModelError::Config(msg) => HarnessError::Config(msg),
            ModelError::Tensor(t) => HarnessError::Data(t.to_string()),
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        ModelError::from(e).into()
    }
}

impl HarnessError {
    /// 1 usage or configuration, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Rows `(n_blocks, kernel, base, receptive field)` over the given ranges.
pub fn rfs_table(
    blocks: impl IntoIterator<Item = u64> + Clone,
    kernels: impl IntoIterator<Item = u64> + Clone,
    bases: impl IntoIterator<Item = u64> + Clone,
) -> Vec<(u64, u64, u64, u64)> {
    let mut rows = Vec::new();
    for n in blocks {
        for k in kernels.clone() {
            for b in bases.clone() {
                rows.push((n, k, b, crate::model::receptive_field(n, k, b)));
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfs_rows() {
        let rows = rfs_table(1..=4, [10], [2]);
        assert_eq!(rows.last().unwrap(), &(4, 10, 2, 271));
        assert_eq!(rfs_table([1], [1], [2]), vec![(1, 1, 2, 1)]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
        assert_eq!(HarnessError::Data("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Numerical("x".into()).exit_code(), 3);
        let e: HarnessError = ModelError::Tensor(TensorError::NonFinite("loss".into())).into();
        assert_eq!(e.exit_code(), 3);
    }
}
