//! JSON-over-HTTP prediction backend.
//!
//! `POST /predict` with `{"inputs": [[f64, ...], ...]}` answers
//! `{"scores": [[f64, ...], ...]}`; failures answer `{"error": "..."}` with a
//! 4xx/5xx status. `GET /info` reports the model shape.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Backend;
use crate::error::{Error, Result};

/// Environment variable naming the oracle base URL.
pub const ENDPOINT_ENV: &str = "BAR_ORACLE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub input_dims: usize,
    pub classes: usize,
    pub max_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    /// Inputs per request.
    pub max_batch: usize,
    /// Retries after the first attempt, on transport failures only.
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            max_batch: 64,
            retries: 3,
            backoff: Duration::from_millis(100),
            timeout: Duration::from_secs(30),
        }
    }

    /// Reads the base URL from [`ENDPOINT_ENV`].
    pub fn from_env() -> Result<Self> {
        std::env::var(ENDPOINT_ENV)
            .map(Self::new)
            .map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))
    }
}

/// Remote oracle speaking the JSON protocol above.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
    input_dims: usize,
    classes: usize,
}

impl HttpBackend {
    /// Uses a known model shape without contacting the server.
    pub fn with_shape(cfg: HttpConfig, input_dims: usize, classes: usize) -> Result<Self> {
        if cfg.max_batch == 0 {
            return Err(Error::Config("max batch must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Ok(Self { cfg, agent, input_dims, classes })
    }

    /// Learns the model shape from `GET /info`.
    pub fn connect(cfg: HttpConfig) -> Result<Self> {
        let mut backend = Self::with_shape(cfg, 0, 0)?;
        let url = format!("{}/info", backend.cfg.base_url);
        let info: OracleInfo = backend.with_retries(|| {
            let mut resp = backend.agent.get(&url).call().map_err(|e| Error::Transport(e.to_string()))?;
            read_body(&mut resp)
        })?;
        backend.input_dims = info.input_dims;
        backend.classes = info.classes;
        backend.cfg.max_batch = backend.cfg.max_batch.min(info.max_batch.max(1));
        Ok(backend)
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.cfg.backoff;
        let mut tries = 0;
        loop {
            match attempt() {
                Err(e) if e.is_retriable() && tries < self.cfg.retries => {
                    log::warn!("oracle request failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    tries += 1;
                }
                other => return other,
            }
        }
    }

    fn post_chunk(&self, chunk: &[Vec<f64>], answered: &mut dyn FnMut(usize)) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/predict", self.cfg.base_url);
        let body = PredictRequest { inputs: chunk.to_vec() };
        let mut resp = self.with_retries(|| {
            self.agent
                .post(&url)
                .send_json(&body)
                .map_err(|e| Error::Transport(e.to_string()))
        })?;
        // a response arrived: these queries are spent whatever it says
        answered(chunk.len());
        let parsed: PredictResponse = read_body(&mut resp)?;
        if parsed.scores.len() != chunk.len() {
            return Err(Error::Contract(format!(
                "server returned {} rows for {} inputs",
                parsed.scores.len(),
                chunk.len()
            )));
        }
        Ok(parsed.scores)
    }
}

fn read_body<T: serde::de::DeserializeOwned>(resp: &mut ureq::http::Response<ureq::Body>) -> Result<T> {
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::Contract(format!("unreadable response body: {e}")))?;
    if status != 200 {
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        return Err(Error::Remote { status, message });
    }
    serde_json::from_str(&text).map_err(|e| Error::Contract(format!("malformed response: {e}")))
}

impl Backend for HttpBackend {
    fn input_dims(&self) -> usize {
        self.input_dims
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn predict_raw(&self, inputs: &[Vec<f64>], answered: &mut dyn FnMut(usize)) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.cfg.max_batch) {
            rows.extend(self.post_chunk(chunk, answered)?);
        }
        Ok(rows)
    }
}
