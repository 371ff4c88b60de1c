use thiserror::Error;

use textrec::bbpe::BbpeError;
use textrec::corpus::CorpusError;
use textrec::curvature::CurvatureError;
use textrec::eval::EvalError;
use textrec::model::ModelError;
use textrec::numerics::NumericsError;
use textrec::training::TrainError;
use textrec::transfer::TransferError;

/// Failures grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn missing(what: &str, path: &std::path::Path) -> Self {
        CliError::Data(format!("{what} not found at {}", path.display()))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<BbpeError> for CliError {
    fn from(e: BbpeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => n.into(),
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Plan(m) => CliError::Config(m),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Train(t) => t.into(),
            TransferError::Model(m) => m.into(),
            TransferError::TargetInPretraining(_) | TransferError::HeadCount { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Transfer(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::NanScore(_) => CliError::Numeric(e.to_string()),
            EvalError::BadK(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CurvatureError> for CliError {
    fn from(e: CurvatureError) -> Self {
        match e {
            CurvatureError::Numerics(n) => n.into(),
            CurvatureError::NonFiniteParams => CliError::Numeric(e.to_string()),
            CurvatureError::Train(t) => t.into(),
            CurvatureError::Model(m) => m.into(),
            CurvatureError::BadK { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
