use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::backend::BackendError;
use crate::bench::BenchError;
use crate::pooling::PoolingError;
use crate::strategy::StrategyError;
use crate::templating::TemplateError;
use crate::trainer::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Any failure surfaced by the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}
