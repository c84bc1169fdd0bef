use std::path::PathBuf;

use thiserror::Error;

use quantlab_core::checkpoint::CheckpointError;
use quantlab_core::corpus::CorpusError;
use quantlab_core::gptq::GptqError;
use quantlab_core::lgp::LgpError;
use quantlab_core::lgr::LgrError;
use quantlab_core::model::ModelError;
use quantlab_core::quant::QuantError;
use quantlab_core::tensor::TensorError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
    #[error("input error: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => EXIT_CONFIG,
            Self::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_FAILURE,
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::SeqLen { .. } | ModelError::LayerIndex { .. } => {
                Self::Config(e.to_string())
            }
            ModelError::Diverged { .. } => Self::Numerical(e.to_string()),
            ModelError::Tensor(t) => t.into(),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<QuantError> for HarnessError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::InvalidSpec(_) => Self::Config(e.to_string()),
            QuantError::NonFinite => Self::Numerical(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<GptqError> for HarnessError {
    fn from(e: GptqError) -> Self {
        match e {
            GptqError::Cholesky { .. } | GptqError::NonFinite => Self::Numerical(e.to_string()),
            GptqError::Quant(q) => q.into(),
            GptqError::Model(m) => m.into(),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<LgpError> for HarnessError {
    fn from(e: LgpError) -> Self {
        match e {
            LgpError::Config(_) => Self::Config(e.to_string()),
            LgpError::Diverged { .. } => Self::Numerical(e.to_string()),
            LgpError::Model(m) => m.into(),
            LgpError::Quant(q) => q.into(),
            LgpError::Tensor(t) => t.into(),
        }
    }
}

impl From<LgrError> for HarnessError {
    fn from(e: LgrError) -> Self {
        match e {
            LgrError::Config(_) => Self::Config(e.to_string()),
            LgrError::Diverged { .. } => Self::Numerical(e.to_string()),
            LgrError::Model(m) => m.into(),
            LgrError::Tensor(t) => t.into(),
        }
    }
}

impl From<CorpusError> for HarnessError {
    fn from(e: CorpusError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::Internal(format!("csv: {e}"))
    }
}
