use styleprobe_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

impl ServiceError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, ServiceError::Core(e) if e.is_numeric())
    }

    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            2
        } else {
            1
        }
    }

    /// Short machine-readable kind for API payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Core(CoreError::FingerprintMismatch { .. }) => "fingerprint-mismatch",
            ServiceError::Core(e) if e.is_numeric() => "numeric",
            ServiceError::Core(_) => "invalid",
            ServiceError::NotFound(_) => "not-found",
            ServiceError::BadRequest(_) => "bad-request",
            ServiceError::Io(_) => "io",
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
