use hlab::data::DataError;
use hlab::experiments::ExperimentError;
use hlab::hessian::HessianError;
use hlab::io::IoError;
use hlab::limits::LimitError;
use hlab::models::ModelError;
use hlab::params::ParamError;
use hlab::quadrature::QuadratureError;
use hlab::spectral::SpectralError;
use thiserror::Error;

/// Every way a subcommand can fail, grouped by exit status.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Validation(String),
    #[error("numerical nonconvergence: {0}")]
    NonConvergence(String),
    #[error("file error: {0}")]
    File(#[from] IoError),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) | Failure::File(_) => 1,
            Failure::NonConvergence(_) => 2,
        }
    }
}

fn validation(e: impl ToString) -> Failure {
    Failure::Validation(e.to_string())
}

fn numeric(e: impl ToString) -> Failure {
    Failure::NonConvergence(e.to_string())
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        validation(e)
    }
}

impl From<ParamError> for Failure {
    fn from(e: ParamError) -> Self {
        validation(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) => numeric(e),
            ModelError::ShapeMismatch(_) => validation(e),
        }
    }
}

impl From<HessianError> for Failure {
    fn from(e: HessianError) -> Self {
        match e {
            HessianError::Model(inner) => inner.into(),
            other => validation(other),
        }
    }
}

impl From<QuadratureError> for Failure {
    fn from(e: QuadratureError) -> Self {
        numeric(e)
    }
}

impl From<LimitError> for Failure {
    fn from(e: LimitError) -> Self {
        match e {
            LimitError::InvalidParameter(_) => validation(e),
            LimitError::Quadrature(_) | LimitError::OracleDisagreement { .. } => numeric(e),
        }
    }
}

impl From<SpectralError> for Failure {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::NonConvergence { .. } | SpectralError::IllConditioned { .. } => numeric(e),
            other => validation(other),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Divergence { .. } => numeric(e),
            ExperimentError::Hessian(inner) => inner.into(),
            ExperimentError::Model(inner) => inner.into(),
            other => validation(other),
        }
    }
}
