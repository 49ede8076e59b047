use serde::{Deserialize, Serialize};
use serde_json::Value;

use selfserve_core::eventlog::EventLogError;
use selfserve_core::features::FeatureError;
use selfserve_core::lifecycle::LifecycleError;
use selfserve_core::usecase::SpecErrors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    UnknownUseCase,
    NoChampion,
    TypeMismatch,
    UnknownMetric,
    ValidationFailed,
    NoTuningRun,
    UnknownCandidate,
    CanaryRejected,
    UnknownJob,
    Conflict,
    BadRequest,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> u16 {
        match self {
            ErrorCode::UnknownUseCase | ErrorCode::NoTuningRun | ErrorCode::UnknownCandidate | ErrorCode::UnknownJob => 404,
            ErrorCode::NoChampion | ErrorCode::CanaryRejected | ErrorCode::Conflict => 409,
            ErrorCode::TypeMismatch | ErrorCode::UnknownMetric => 422,
            ErrorCode::ValidationFailed | ErrorCode::BadRequest => 400,
            ErrorCode::Internal => 500,
        }
    }
}

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), details: None }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn status(&self) -> u16 {
        self.code.status()
    }

    pub fn unknown_use_case(id: &str) -> Self {
        Self::new(ErrorCode::UnknownUseCase, format!("unknown use case `{id}`"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(ErrorCode::Internal, message.to_string())
    }
}

impl From<SpecErrors> for ApiError {
    fn from(e: SpecErrors) -> Self {
        let details = serde_json::to_value(&e.0).expect("spec errors serialize");
        ApiError::new(ErrorCode::ValidationFailed, e.to_string()).with_details(details)
    }
}

impl From<FeatureError> for ApiError {
    fn from(e: FeatureError) -> Self {
        ApiError::new(ErrorCode::TypeMismatch, e.to_string())
    }
}

impl From<EventLogError> for ApiError {
    fn from(e: EventLogError) -> Self {
        let code = match &e {
            EventLogError::UnknownUseCase(_) => ErrorCode::UnknownUseCase,
            EventLogError::UnknownMetric(_) => ErrorCode::UnknownMetric,
            EventLogError::UnknownAction(_) | EventLogError::BadPropensity(_) | EventLogError::InsufficientData { .. } => ErrorCode::BadRequest,
            EventLogError::DuplicateDecision(_) => ErrorCode::Conflict,
            EventLogError::CorruptSnapshot { .. } | EventLogError::Io(_) | EventLogError::Serde(_) => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> Self {
        let code = match &e {
            LifecycleError::NoParent | LifecycleError::StaleReport { .. } => ErrorCode::Conflict,
            LifecycleError::Io(_) | LifecycleError::ManifestUnreproducible { .. } | LifecycleError::DatasetMismatch { .. } => ErrorCode::Internal,
            _ => ErrorCode::BadRequest,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::internal(e)
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::internal(e)
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
