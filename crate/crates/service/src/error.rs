use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use rla_core::api::ErrorBody;
use rla_core::parliament::ParliamentError;
use rla_core::session::{LogError, SessionError};

/// An error as the API reports it: a status code and a message.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn not_found(what: &str, id: &str) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: format!("no {what} with id {id:?}") }
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, message: message.into() }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::CONFLICT, message: message.into() }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Log(e) => e.into(),
            e if e.is_conflict() => ApiError::conflict(e.to_string()),
            e => ApiError::unprocessable(e.to_string()),
        }
    }
}

impl From<ParliamentError> for ApiError {
    fn from(e: ParliamentError) -> Self {
        match e {
            ParliamentError::NotContinuing => ApiError::conflict(e.to_string()),
            e => ApiError::unprocessable(e.to_string()),
        }
    }
}

impl From<LogError> for ApiError {
    fn from(e: LogError) -> Self {
        tracing::error!("{e}");
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}
