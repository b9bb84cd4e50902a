use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("unknown record {0:?}")]
    UnknownRecord(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("unknown prompt set version {0}")]
    UnknownVersion(u32),
    #[error("malformed cursor")]
    BadCursor,
    #[error("{0}")]
    BadRequest(String),
    #[error("path escapes the image root")]
    Forbidden,
    #[error("{0}")]
    NotFound(String),
    #[error("need at least {required} keep/offensive verdicts, have {available}")]
    InsufficientVerdicts { required: usize, available: usize },
    #[error("{0}")]
    Unavailable(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error(transparent)]
    Core(#[from] offscan_core::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownRun(_) => "unknown_run",
            Self::UnknownRecord(_) => "unknown_record",
            Self::UnknownJob(_) => "unknown_job",
            Self::UnknownVersion(_) => "unknown_version",
            Self::BadCursor => "bad_cursor",
            Self::BadRequest(_) => "bad_request",
            Self::Forbidden => "forbidden",
            Self::NotFound(_) => "not_found",
            Self::InsufficientVerdicts { .. } => "insufficient_verdicts",
            Self::Unavailable(_) => "unavailable",
            Self::Storage(_) => "storage_failure",
            Self::Core(_) => "processing_error",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownRun(_)
            | Self::UnknownRecord(_)
            | Self::UnknownJob(_)
            | Self::UnknownVersion(_)
            | Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::BadCursor | Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Forbidden => StatusCode::FORBIDDEN,
            Self::InsufficientVerdicts { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Unavailable(_) => StatusCode::CONFLICT,
            Self::Storage(_) | Self::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
