use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl BackendRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.7,
            max_tokens: 1024,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A text generator standing in for the teacher and judge LLMs.
pub trait Backend: Send + Sync {
    /// Returns non-empty completion text for a valid request.
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError>;
}

/// Validates the request, calls the backend and rejects empty completions.
pub fn backend_complete(backend: &dyn Backend, request: &BackendRequest) -> Result<String, BackendError> {
    request.validate()?;
    let text = backend.complete(request)?;
    if text.trim().is_empty() {
        return Err(BackendError::Malformed("empty completion".into()));
    }
    Ok(text)
}
