//! HTTP client for a remote backend speaking the [`super::protocol`] wire format.

use std::time::Duration;

use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{self, *};
use super::{Assessment, BackendError, Embedding, ImageRef, QualityBackend};

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Additional attempts after a transport failure.
    pub retries: u32,
    pub prob_clip: f64,
}

impl ExternalConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(30),
            retries: 2,
            prob_clip: crate::fusion::DEFAULT_PROB_CLIP,
        }
    }
}

pub struct ExternalBackend {
    cfg: ExternalConfig,
    agent: ureq::Agent,
}

impl ExternalBackend {
    pub fn new(cfg: ExternalConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.cfg
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, BackendError> {
        let url = format!("{}{}", self.cfg.base_url, path);
        let mut attempt = 0;
        loop {
            match self.agent.post(&url).send_json(req) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let body = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| BackendError::Transport(e.to_string()))?;
                    if status == 404 {
                        let msg = serde_json::from_str::<ErrorResponse>(&body)
                            .map(|e| e.error)
                            .unwrap_or(body);
                        return Err(BackendError::UnknownImage(msg));
                    }
                    if status != 200 {
                        return Err(BackendError::Protocol(format!("{path} returned HTTP {status}: {body}")));
                    }
                    return serde_json::from_str(&body)
                        .map_err(|e| BackendError::Protocol(format!("{path}: malformed response: {e}")));
                }
                Err(e) if attempt < self.cfg.retries => {
                    attempt += 1;
                    warn!("{url}: {e}; retry {attempt}/{}", self.cfg.retries);
                }
                Err(e) => return Err(BackendError::Transport(format!("{url}: {e}"))),
            }
        }
    }
}

impl QualityBackend for ExternalBackend {
    fn assess(&self, image: &ImageRef) -> Result<Assessment, BackendError> {
        let resp: AssessResponse = self.call(protocol::ASSESS, &AssessRequest { image_ref: image.clone() })?;
        if !resp.raw_score.is_finite() {
            return Err(BackendError::Protocol(format!("non-finite raw_score {}", resp.raw_score)));
        }
        Ok(Assessment { reasoning: resp.reasoning, raw_score: resp.raw_score })
    }

    fn compare(&self, a: &ImageRef, b: &ImageRef) -> Result<f64, BackendError> {
        let resp: CompareResponse =
            self.call(protocol::COMPARE, &CompareRequest { image_a: a.clone(), image_b: b.clone() })?;
        if !(resp.p_a > 0.0 && resp.p_a < 1.0) {
            return Err(BackendError::Protocol(format!("p_a = {} is outside (0, 1)", resp.p_a)));
        }
        Ok(resp.p_a.clamp(self.cfg.prob_clip, 1.0 - self.cfg.prob_clip))
    }

    fn summarize(&self, reasoning: &str) -> Result<String, BackendError> {
        if reasoning.trim().is_empty() {
            warn!("summarize called with empty reasoning");
        }
        let resp: DescriptionResponse =
            self.call(protocol::SUMMARIZE, &SummarizeRequest { reasoning: reasoning.to_string() })?;
        Ok(resp.description)
    }

    fn reflect(&self, image: &ImageRef, reasoning: &str, initial: f64, target: f64) -> Result<String, BackendError> {
        let req = ReflectRequest {
            image_ref: image.clone(),
            reasoning: reasoning.to_string(),
            initial_score: initial,
            target_score: target,
        };
        let resp: DescriptionResponse = self.call(protocol::REFLECT, &req)?;
        Ok(resp.description)
    }

    fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let resp: EmbedResponse = self.call(protocol::EMBED, &EmbedRequest { text: text.to_string() })?;
        Ok(Embedding::normalized(resp.vector)?)
    }
}
