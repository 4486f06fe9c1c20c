//! HTTP cue provider: `POST {endpoint}/embed` with
//! `{"kind", "id", "payload"}`, answered by `{"id", "embedding"}`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use gazeward_core::cues::{CueDims, CueProvider, CueProviderConfig, PromptTemplate, TextCue, VisualCue};
use gazeward_core::data::Sample;
use gazeward_core::diff::Tensor;
use gazeward_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EMBED_URL_ENV: &str = "OMNIGAZE_EMBED_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueKind {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Features(Vec<f32>),
    Prompt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: CueKind,
    pub id: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub id: String,
    pub embedding: Vec<f32>,
}

/// Delays before each retry; one initial attempt plus one per delay.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: [100, 400, 1600].map(Duration::from_millis).to_vec(),
        }
    }
}

/// Endpoint after applying the environment override.
pub fn resolve_endpoint(config: &CueProviderConfig) -> Option<String> {
    std::env::var(EMBED_URL_ENV)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .or_else(|| config.endpoint.clone())
}

pub struct RemoteCueProvider {
    endpoint: String,
    dims: CueDims,
    agent: ureq::Agent,
    retry: RetryPolicy,
    max_in_flight: usize,
    cache: Mutex<HashMap<(CueKind, String), Vec<f32>>>,
}

impl RemoteCueProvider {
    /// Uses `config.endpoint` as given; see [`resolve_endpoint`].
    pub fn new(config: &CueProviderConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::invalid("remote cue provider needs an endpoint"))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            dims: config.dims(),
            agent,
            retry: RetryPolicy::default(),
            max_in_flight: config.max_in_flight.max(1),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn expected_len(&self, kind: CueKind) -> usize {
        match kind {
            CueKind::Visual => self.dims.visual_len(),
            CueKind::Text => self.dims.text_len(),
        }
    }

    fn attempt(&self, req: &EmbedRequest) -> Result<Vec<f32>> {
        let url = format!("{}/embed", self.endpoint);
        let mut resp = self.agent.post(&url).send_json(req).map_err(|e| Error::Provider {
            retryable: true,
            message: format!("{url}: {e}"),
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(Error::Provider {
                retryable: status >= 500 || status == 429,
                message: format!("{url} answered HTTP {status}"),
            });
        }
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| match e {
            ureq::Error::Timeout(_) | ureq::Error::Io(_) => Error::Provider {
                retryable: true,
                message: format!("{url}: {e}"),
            },
            other => Error::Protocol(format!("malformed response from {url}: {other}")),
        })?;
        if body.id != req.id {
            return Err(Error::Protocol(format!(
                "response for {} answered request {}",
                body.id, req.id
            )));
        }
        let expected = self.expected_len(req.kind);
        if body.embedding.len() != expected {
            return Err(Error::Protocol(format!(
                "{:?} embedding for {} has {} values, expected {expected}",
                req.kind,
                req.id,
                body.embedding.len()
            )));
        }
        if body.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol(format!("non-finite embedding for {}", req.id)));
        }
        Ok(body.embedding)
    }

    /// One embedding, served from the per-run cache when possible.
    pub fn embed(&self, kind: CueKind, id: &str, payload: Payload) -> Result<Vec<f32>> {
        let key = (kind, id.to_string());
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let req = EmbedRequest {
            kind,
            id: id.to_string(),
            payload,
        };
        let mut delays = self.retry.backoff.iter();
        let embedding = loop {
            match self.attempt(&req) {
                Ok(v) => break v,
                Err(e) if e.is_retryable() => match delays.next() {
                    Some(d) => std::thread::sleep(*d),
                    None => return Err(e),
                },
                Err(e) => return Err(e),
            }
        };
        self.cache.lock().unwrap().insert(key, embedding.clone());
        Ok(embedding)
    }

    /// Fetches both cues for every sample with at most `max_in_flight`
    /// concurrent requests. Results land in the cache keyed by id, so
    /// completion order does not matter.
    pub fn prefetch(&self, samples: &[Sample], prompt: &PromptTemplate) -> Result<()> {
        let jobs: Vec<(CueKind, &Sample)> = samples
            .iter()
            .flat_map(|s| [(CueKind::Visual, s), (CueKind::Text, s)])
            .collect();
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<(usize, Error)>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..self.max_in_flight.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(kind, s)) = jobs.get(i) else { break };
                    if let Err(e) = self.embed(kind, &s.id, payload_for(kind, s, prompt)) {
                        let mut slot = first_error.lock().unwrap();
                        if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                            *slot = Some((i, e));
                        }
                        break;
                    }
                });
            }
        });
        match first_error.into_inner().unwrap() {
            Some((_, e)) => Err(e),
            None => Ok(()),
        }
    }
}

fn payload_for(kind: CueKind, sample: &Sample, prompt: &PromptTemplate) -> Payload {
    match kind {
        CueKind::Visual => Payload::Features(sample.features.clone()),
        CueKind::Text => Payload::Prompt(prompt.text.clone()),
    }
}

impl CueProvider for RemoteCueProvider {
    fn dims(&self) -> CueDims {
        self.dims
    }

    fn visual_cue(&self, sample: &Sample) -> Result<VisualCue> {
        let v = self.embed(CueKind::Visual, &sample.id, Payload::Features(sample.features.clone()))?;
        Ok(VisualCue {
            tokens: Tensor::new(&[self.dims.visual_tokens(), self.dims.visual_width], v)?,
        })
    }

    fn text_cue(&self, sample: &Sample, prompt: &PromptTemplate) -> Result<TextCue> {
        let v = self.embed(CueKind::Text, &sample.id, Payload::Prompt(prompt.text.clone()))?;
        Ok(TextCue {
            tokens: Tensor::new(&[self.dims.text_tokens, self.dims.text_width], v)?,
        })
    }
}
