//! Chat-completions style HTTP backend.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::backend::{Backend, BackendError, BackendRequest};

pub const DEFAULT_TOKEN_ENV: &str = "DISTILKD_API_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpBackend {
    /// Backend for `url`, reading the bearer token from [`DEFAULT_TOKEN_ENV`] if set.
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            token: std::env::var(DEFAULT_TOKEN_ENV).ok(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    fn body(&self, req: &BackendRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "seed": req.seed,
        })
    }

    fn attempt(&self, agent: &ureq::Agent, body: &Value) -> Result<String, (bool, BackendError)> {
        let mut call = agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(tok) = &self.token {
            call = call.set("Authorization", &format!("Bearer {tok}"));
        }
        let resp = match call.send_string(&body.to_string()) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let body = r.into_string().unwrap_or_default();
                let retryable = status == 429 || status >= 500;
                return Err((retryable, BackendError::Status { status, body }));
            }
            Err(e) => {
                return Err((
                    true,
                    BackendError::Transport {
                        attempts: 1,
                        message: e.to_string(),
                    },
                ))
            }
        };
        let text = resp.into_string().map_err(|e| {
            (
                true,
                BackendError::Transport {
                    attempts: 1,
                    message: e.to_string(),
                },
            )
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| (false, BackendError::Malformed(e.to_string())))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                (
                    false,
                    BackendError::Malformed("missing choices[0].message.content".into()),
                )
            })
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let body = self.body(req);
        let attempts = self.retry.max_attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut last = None;
        for n in 1..=attempts {
            match self.attempt(&agent, &body) {
                Ok(text) => return Ok(text),
                Err((false, e)) => return Err(e),
                Err((true, e)) => {
                    log::warn!("backend attempt {n}/{attempts} failed: {e}");
                    last = Some(e);
                    if n < attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(match last {
            Some(BackendError::Transport { message, .. }) => BackendError::Transport { attempts, message },
            Some(e) => e,
            None => unreachable!("at least one attempt is made"),
        })
    }
}
