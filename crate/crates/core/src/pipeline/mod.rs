//! Annotation files, dataset generation, box adjustment, evaluation and the
//! run configuration used by the command-line tool.

pub mod adjust;
pub mod annotations;
pub mod config;
pub mod dataset;
pub mod eval;

use thiserror::Error;

use crate::env::EnvError;
use crate::oracle::OracleError;
use crate::qnet::QNetError;
use crate::rl::RlError;
use crate::spatial::SpatialError;

pub use adjust::{
    adjust_box, adjust_dataset, adjust_dataset_parallel, grid_search_adjust, pseudo_label_flow,
    AdjustRecord, AdjustReport, AdjustSummary, Adjuster, Adjustment,
};
pub use annotations::{load_annotations, save_annotations, AnnotationRecord, Source};
pub use config::{OracleConfig, RunConfig};
pub use dataset::{make_synthetic_dataset, Dataset, Split};
pub use eval::{eval_report, EvalSummary, GainRow, ScoreSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{file}:{line}: malformed annotation: {msg}")]
    MalformedAnnotation { file: String, line: usize, msg: String },
    #[error("no image for id {0}")]
    MissingImage(String),
    #[error("record sets do not match: {0}")]
    MismatchedRecords(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    QNet(#[from] QNetError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 4 for oracle
    /// protocol failures, 3 for everything else (bad or missing data).
    pub fn exit_code(&self) -> u8 {
        const CONFIG: u8 = 2;
        const DATA: u8 = 3;
        const ORACLE: u8 = 4;
        let oracle = |e: &OracleError| match e {
            OracleError::InvalidParams(_) | OracleError::EmptyEnsemble | OracleError::BadEndpoint(_) => CONFIG,
            OracleError::OracleTimeout(_)
            | OracleError::ProtocolViolation(_)
            | OracleError::LengthMismatch { .. }
            | OracleError::ConfidenceOutOfRange(_) => ORACLE,
            _ => DATA,
        };
        let env = |e: &EnvError| match e {
            EnvError::InvalidConfig(_) => CONFIG,
            EnvError::Oracle(o) => oracle(o),
            _ => DATA,
        };
        let qnet = |e: &QNetError| match e {
            QNetError::InvalidConfig(_) => CONFIG,
            _ => DATA,
        };
        match self {
            PipelineError::Config(_) | PipelineError::InvalidArgument(_) => CONFIG,
            PipelineError::Oracle(o) => oracle(o),
            PipelineError::Env(e) => env(e),
            PipelineError::QNet(q) => qnet(q),
            PipelineError::Rl(r) => match r {
                RlError::InvalidConfig(_) => CONFIG,
                RlError::Env(e) => env(e),
                RlError::QNet(q) => qnet(q),
                _ => DATA,
            },
            _ => DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
