use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use saferoad::apcam::CamError;
use saferoad::classifier::ClassifierError;
use saferoad::evalreport::EvalError;
use saferoad::events::EventsError;
use saferoad::hotspot::HotspotError;
use saferoad::imagery::ImageryError;
use saferoad::inpaint::InpaintError;
use saferoad::maskkit::MaskError;
use saferoad::saliency::SaliencyError;

/// Error surfaced by both the CLI (as one JSON line) and the HTTP API.
#[derive(Debug, Clone, PartialEq)]
pub struct GatewayError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

#[derive(Serialize)]
struct Body<'a> {
    error: Detail<'a>,
}

#[derive(Serialize)]
struct Detail<'a> {
    code: &'a str,
    message: &'a str,
}

impl GatewayError {
    pub fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", format!("unknown {what} `{id}`"))
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn unavailable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    /// `{"error":{"code":..,"message":..}}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Body {
            error: Detail {
                code: &self.code,
                message: &self.message,
            },
        })
        .expect("error body serializes")
    }
}

impl std::fmt::Display for GatewayError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for GatewayError {}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

fn with(status: StatusCode, code: &str, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::new(status, code, e.to_string())
}

impl From<std::io::Error> for GatewayError {
    fn from(e: std::io::Error) -> Self {
        with(StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR", e)
    }
}

impl From<EventsError> for GatewayError {
    fn from(e: EventsError) -> Self {
        let status = match e {
            EventsError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        with(status, e.code(), e)
    }
}

impl From<HotspotError> for GatewayError {
    fn from(e: HotspotError) -> Self {
        with(StatusCode::BAD_REQUEST, e.code(), e)
    }
}

impl From<ImageryError> for GatewayError {
    fn from(e: ImageryError) -> Self {
        let status = match e {
            ImageryError::ProviderQuotaExceeded | ImageryError::NetworkFailure(_) | ImageryError::MissingCredentials => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            ImageryError::NoImageryAtLocation(_) | ImageryError::FixtureMissing(_) => StatusCode::NOT_FOUND,
            ImageryError::InvalidPlan(_) | ImageryError::InvalidTestFraction(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        with(status, e.code(), e)
    }
}

impl From<ClassifierError> for GatewayError {
    fn from(e: ClassifierError) -> Self {
        let status = match e {
            ClassifierError::UnknownBackbone(_)
            | ClassifierError::InvalidSpec(_)
            | ClassifierError::InvalidConfig(_)
            | ClassifierError::LayerNotFound(_)
            | ClassifierError::EmptyDataset
            | ClassifierError::SingleClassDataset
            | ClassifierError::EmptyTestSplit => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        with(status, e.code(), e)
    }
}

impl From<CamError> for GatewayError {
    fn from(e: CamError) -> Self {
        let status = match e {
            CamError::LayerNotFound(_) | CamError::InvalidThreshold(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        with(status, e.code(), e)
    }
}

impl From<MaskError> for GatewayError {
    fn from(e: MaskError) -> Self {
        let status = match e {
            MaskError::AdapterUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            MaskError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        with(status, e.code(), e)
    }
}

impl From<InpaintError> for GatewayError {
    fn from(e: InpaintError) -> Self {
        let status = match e {
            InpaintError::BackendUnavailable(_) | InpaintError::BackendTimeout(_) => StatusCode::SERVICE_UNAVAILABLE,
            InpaintError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        with(status, e.code(), e)
    }
}

impl From<SaliencyError> for GatewayError {
    fn from(e: SaliencyError) -> Self {
        match e {
            SaliencyError::Mask(m) => m.into(),
            SaliencyError::Cam(c) => c.into(),
            SaliencyError::AdapterUnavailable(_) => with(StatusCode::SERVICE_UNAVAILABLE, e.code(), e),
            SaliencyError::Io(_) => with(StatusCode::INTERNAL_SERVER_ERROR, e.code(), e),
            _ => with(StatusCode::BAD_REQUEST, e.code(), e),
        }
    }
}

impl From<EvalError> for GatewayError {
    fn from(e: EvalError) -> Self {
        let status = match e {
            EvalError::MissingCandidate(..) | EvalError::MissingOriginal(..) | EvalError::NoScoredSessions => {
                StatusCode::NOT_FOUND
            }
            EvalError::InvalidSession(..) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        with(status, e.code(), e)
    }
}
