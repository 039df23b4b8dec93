use std::fmt::Display;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use taskprompt::eval::EvalError;
use taskprompt::session::SessionError;

/// Error body: a machine code, a human message, and whether retrying the
/// same request may succeed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Display) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.to_string(),
            retryable: false,
        }
    }

    pub fn bad_request(code: &str, message: impl Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &str, message: impl Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownProposal(_) => StatusCode::NOT_FOUND,
            SessionError::SessionNotActive | SessionError::NoAcceptedSteps => StatusCode::CONFLICT,
            SessionError::UneditableParse(_)
            | SessionError::MissingEditText
            | SessionError::InvalidTarget { .. }
            | SessionError::Prompt(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Gateway(_) => StatusCode::BAD_GATEWAY,
            SessionError::BadLog(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            retryable: e.is_retryable(),
            ..Self::new(status, e.code(), &e)
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::UnknownResponse(_) => StatusCode::NOT_FOUND,
            EvalError::MissingConsensus(_) | EvalError::MissingGoldEntry { .. } => StatusCode::CONFLICT,
            EvalError::Config(_) | EvalError::Prompt(_) => StatusCode::BAD_REQUEST,
            EvalError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), &e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}
