use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{CompletionRequest, GatewayError, Transport};

pub const ENV_ENDPOINT: &str = "TASKPROMPT_ENDPOINT";
pub const ENV_API_KEY: &str = "TASKPROMPT_API_KEY";
pub const ENV_MODEL: &str = "TASKPROMPT_MODEL";

const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/completions";

/// Where the live backend lives and how to reach it. Values come from the
/// environment first; a config file, when given, overrides them.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_parallel: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.to_string(),
            api_key: None,
            model: "gpt-3.5-turbo-instruct".to_string(),
            timeout_secs: 60,
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    endpoint: Option<String>,
    api_key: Option<String>,
    model: Option<String>,
    timeout_secs: Option<u64>,
    max_parallel: Option<usize>,
}

impl BackendConfig {
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Ok(v) = std::env::var(ENV_ENDPOINT) {
            config.endpoint = v;
        }
        if let Ok(v) = std::env::var(ENV_API_KEY) {
            config.api_key = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            config.model = v;
        }
        config
    }

    /// Applies the TOML overrides in `text` on top of `self`.
    pub fn with_overrides(mut self, text: &str) -> Result<Self, String> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if let Some(v) = file.endpoint {
            self.endpoint = v;
        }
        if file.api_key.is_some() {
            self.api_key = file.api_key;
        }
        if let Some(v) = file.model {
            self.model = v;
        }
        if let Some(v) = file.timeout_secs {
            self.timeout_secs = v;
        }
        if let Some(v) = file.max_parallel {
            self.max_parallel = v;
        }
        Ok(self)
    }

    pub fn load(config_path: Option<&Path>) -> Result<Self, String> {
        let base = Self::from_env();
        match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                base.with_overrides(&text)
            }
            None => Ok(base),
        }
    }
}

/// Blocking HTTP+JSON transport for a text-completion endpoint.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &BackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            endpoint: config.endpoint.clone(),
            api_key: config.api_key.clone(),
        }
    }
}

fn retry_after_ms(value: Option<&str>) -> Option<u64> {
    let secs: f64 = value?.trim().parse().ok()?;
    (secs >= 0.0).then(|| (secs * 1000.0).round() as u64)
}

impl Transport for HttpTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut builder = self.agent.post(&self.endpoint).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let mut response = builder
            .send_json(request)
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let retry_after = retry_after_ms(response.headers().get("retry-after").and_then(|v| v.to_str().ok()));
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        match status {
            200..=299 => Ok(body),
            401 | 403 => Err(GatewayError::AuthFailure(format!("HTTP {status}"))),
            429 => Err(GatewayError::RateLimited {
                retry_after_ms: retry_after,
            }),
            500..=599 | 408 => Err(GatewayError::BackendUnavailable(format!("HTTP {status}"))),
            _ => Err(GatewayError::MalformedBackendReply(format!("HTTP {status}: {body}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_only_given_fields() {
        let base = BackendConfig {
            api_key: Some("env-key".into()),
            ..BackendConfig::default()
        };
        let merged = base.with_overrides("model = \"other\"\nmax_parallel = 2\n").unwrap();
        assert_eq!(merged.model, "other");
        assert_eq!(merged.max_parallel, 2);
        assert_eq!(merged.api_key.as_deref(), Some("env-key"));
        assert_eq!(merged.endpoint, DEFAULT_ENDPOINT);
    }

    #[test]
    fn retry_after_parsing() {
        assert_eq!(retry_after_ms(Some("2")), Some(2000));
        assert_eq!(retry_after_ms(Some("0.25")), Some(250));
        assert_eq!(retry_after_ms(Some("soon")), None);
        assert_eq!(retry_after_ms(None), None);
    }
}
