//! HTTP-backed policy, scorer and annotator clients, and the `scripted:`
//! specs that stand in for them offline.

use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use uniact_core::agent::{PolicyClient, PolicyError, PolicyProvider, PromptContext};
use uniact_core::augment::{
    Annotation, AnnotatorClient, AnnotatorError, Language, ReasoningPattern, ScriptedAnnotator,
};
use uniact_core::filter::{FilterError, ScorerClient, ScriptedScorer};
use uniact_core::sim::{NoisyProvider, OracleProvider, ScriptedPolicy};
use uniact_core::store::TraceRecord;
use uniact_core::{Action, Task, TaskRegistry, Trace};

const TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unknown client spec `{0}`; expected an http(s) URL or scripted:<name>")]
    Unknown(String),
    #[error("bad parameter in `{spec}`: {reason}")]
    BadParam { spec: String, reason: String },
    #[error("cannot build HTTP client: {0}")]
    Http(String),
}

fn http_client() -> Result<Client, SpecError> {
    Client::builder()
        .timeout(TIMEOUT)
        .build()
        .map_err(|e| SpecError::Http(e.to_string()))
}

fn is_url(spec: &str) -> bool {
    spec.starts_with("http://") || spec.starts_with("https://")
}

/// Posts the prompt context as JSON; the response body is the raw policy text.
pub struct HttpPolicy {
    client: Client,
    url: String,
}

impl HttpPolicy {
    pub fn new(url: &str) -> Result<Self, SpecError> {
        Ok(Self {
            client: http_client()?,
            url: url.to_string(),
        })
    }
}

impl PolicyClient for HttpPolicy {
    fn id(&self) -> String {
        format!("http({})", self.url)
    }

    fn respond(&mut self, ctx: &PromptContext) -> Result<String, PolicyError> {
        let resp = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(ctx.to_json())
            .send()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(PolicyError::Transport(format!("{status}: {text}")));
        }
        Ok(text)
    }
}

pub struct HttpProvider {
    client: Client,
    url: String,
}

impl PolicyProvider for HttpProvider {
    fn id(&self) -> String {
        format!("http({})", self.url)
    }

    fn policy_for(&self, _task: &Task, _seed: u64) -> Box<dyn PolicyClient> {
        Box::new(HttpPolicy {
            client: self.client.clone(),
            url: self.url.clone(),
        })
    }
}

struct WaitingProvider;

impl PolicyProvider for WaitingProvider {
    fn id(&self) -> String {
        "wait".into()
    }

    fn policy_for(&self, _task: &Task, _seed: u64) -> Box<dyn PolicyClient> {
        Box::new(ScriptedPolicy::waiting())
    }
}

/// Policy specs: an http(s) URL, `scripted:oracle`, `scripted:oracle-bare`
/// (no thoughts), `scripted:wait` or `scripted:noisy:<p>`.
pub fn policy_provider(spec: &str) -> Result<Arc<dyn PolicyProvider>, SpecError> {
    if is_url(spec) {
        return Ok(Arc::new(HttpProvider {
            client: http_client()?,
            url: spec.to_string(),
        }));
    }
    let name = spec
        .strip_prefix("scripted:")
        .ok_or_else(|| SpecError::Unknown(spec.into()))?;
    match name {
        "oracle" => Ok(Arc::new(OracleProvider::new())),
        "oracle-bare" => Ok(Arc::new(OracleProvider::without_thoughts())),
        "wait" => Ok(Arc::new(WaitingProvider)),
        _ => {
            let p = name
                .strip_prefix("noisy:")
                .ok_or_else(|| SpecError::Unknown(spec.into()))?;
            let p: f64 = p.parse().map_err(|_| SpecError::BadParam {
                spec: spec.into(),
                reason: format!("`{p}` is not a number"),
            })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(SpecError::BadParam {
                    spec: spec.into(),
                    reason: "noise must be in [0, 1]".into(),
                });
            }
            Ok(Arc::new(NoisyProvider::new(
                Arc::new(OracleProvider::new()),
                p,
            )))
        }
    }
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    instruction: &'a str,
    trace: TraceRecord,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// Posts `{instruction, trace}` and expects `{"score": <0..1>}`.
pub struct HttpScorer {
    client: Client,
    url: String,
}

impl HttpScorer {
    pub fn new(url: &str) -> Result<Self, SpecError> {
        Ok(Self {
            client: http_client()?,
            url: url.to_string(),
        })
    }
}

impl ScorerClient for HttpScorer {
    fn id(&self) -> String {
        format!("http({})", self.url)
    }

    fn score(&self, instruction: &str, trace: &Trace) -> Result<f64, FilterError> {
        let fail = |e: String| FilterError::ScorerFailure(format!("{}: {e}", self.url));
        let body = ScoreRequest {
            instruction,
            trace: TraceRecord::from(trace),
        };
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(resp.status().to_string()));
        }
        let r: ScoreResponse = resp.json().map_err(|e| fail(e.to_string()))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(fail(format!("score {} outside [0, 1]", r.score)));
        }
        Ok(r.score)
    }
}

/// `scripted` replays the trace in the simulator; anything else is a URL.
pub fn scorer(spec: &str, registry: &TaskRegistry) -> Result<Box<dyn ScorerClient>, SpecError> {
    match spec {
        "scripted" => Ok(Box::new(ScriptedScorer::new(registry.clone()))),
        s if is_url(s) => Ok(Box::new(HttpScorer::new(s)?)),
        s => Err(SpecError::Unknown(s.into())),
    }
}

#[derive(Debug, Serialize)]
struct AnnotateRequest<'a> {
    context: &'a PromptContext,
    target: Option<&'a Action>,
    language: Language,
}

#[derive(Debug, Deserialize)]
struct AnnotateResponse {
    thought: String,
    #[serde(default)]
    pattern: Option<String>,
}

/// Posts `{context, target, language}` and expects `{"thought", "pattern"?}`.
pub struct HttpAnnotator {
    client: Client,
    url: String,
}

impl HttpAnnotator {
    pub fn new(url: &str) -> Result<Self, SpecError> {
        Ok(Self {
            client: http_client()?,
            url: url.to_string(),
        })
    }
}

impl AnnotatorClient for HttpAnnotator {
    fn id(&self) -> String {
        format!("http({})", self.url)
    }

    fn annotate(
        &mut self,
        ctx: &PromptContext,
        target: Option<&Action>,
        language: Language,
    ) -> Result<Annotation, AnnotatorError> {
        let body = AnnotateRequest {
            context: ctx,
            target,
            language,
        };
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| AnnotatorError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(AnnotatorError::Transport(resp.status().to_string()));
        }
        let r: AnnotateResponse = resp
            .json()
            .map_err(|e| AnnotatorError::BadResponse(e.to_string()))?;
        if r.thought.trim().is_empty() {
            return Err(AnnotatorError::BadResponse("empty thought".into()));
        }
        let pattern = match r.pattern {
            None => None,
            Some(p) => Some(
                p.parse::<ReasoningPattern>()
                    .map_err(|e| AnnotatorError::BadResponse(e.to_string()))?,
            ),
        };
        Ok(Annotation {
            thought: r.thought,
            pattern,
        })
    }
}

/// `scripted` or `scripted:<seed>`, or a URL.
pub fn annotator(spec: &str) -> Result<Box<dyn AnnotatorClient>, SpecError> {
    if is_url(spec) {
        return Ok(Box::new(HttpAnnotator::new(spec)?));
    }
    match spec.split_once(':') {
        None if spec == "scripted" => Ok(Box::new(ScriptedAnnotator::new(0))),
        Some(("scripted", seed)) => {
            let seed = seed.parse().map_err(|_| SpecError::BadParam {
                spec: spec.into(),
                reason: format!("`{seed}` is not a seed"),
            })?;
            Ok(Box::new(ScriptedAnnotator::new(seed)))
        }
        _ => Err(SpecError::Unknown(spec.into())),
    }
}
