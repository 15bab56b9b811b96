//! HTTP client for a logits-serving sidecar.
//!
//! Wire protocol (JSON bodies):
//!
//! * `POST /v1/logits` `{context, top_logits: "full" | N}` →
//!   `{vocab_size, model_id, logits?: [f64], top?: [[id, logit]]}`
//! * `POST /v1/generate` `{context, max_tokens, stop, forced_first_token?,
//!   logit_bias?: {"id": delta}, temperature, seed}` →
//!   `{text, token_trace: [{token_id, logit, adjusted?}], prompt_tokens?, completion_tokens}`
//! * `POST /v1/tokenize` `{text}` → `{count}`
//!
//! `temperature: 0` requests greedy decoding.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    GenerationRequest, GenerationResult, LanguageModel, LmError, LogitVector, SamplingMode, TokenId,
    TraceEntry, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub max_parallelism: usize,
    /// `None` asks for the full vector.
    pub top_logits: Option<usize>,
    /// Expected vocabulary size; checked against every logits response.
    pub vocab_size: Option<usize>,
    /// Decoded vocabulary (JSON list or `{piece: id}` map), needed for
    /// preference biasing.
    pub vocab_path: Option<PathBuf>,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000".into(),
            timeout_ms: 60_000,
            max_parallelism: 4,
            top_logits: None,
            vocab_size: None,
            vocab_path: None,
            retries: 3,
            backoff_ms: 200,
        }
    }
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    context: &'a str,
    top_logits: TopLogits,
}

#[derive(Serialize)]
#[serde(untagged)]
enum TopLogits {
    Full(&'static str),
    Top(usize),
}

#[derive(Deserialize)]
struct LogitsResponse {
    vocab_size: usize,
    #[serde(default)]
    model_id: Option<String>,
    #[serde(default)]
    logits: Option<Vec<f64>>,
    #[serde(default)]
    top: Option<Vec<(u32, f64)>>,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    context: &'a str,
    max_tokens: usize,
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    forced_first_token: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logit_bias: Option<BTreeMap<String, f64>>,
    temperature: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct WireTrace {
    token_id: u32,
    logit: f64,
    #[serde(default)]
    adjusted: Option<bool>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
    token_trace: Vec<WireTrace>,
    #[serde(default)]
    prompt_tokens: Option<usize>,
    #[serde(default)]
    completion_tokens: Option<usize>,
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    count: usize,
}

pub struct HttpModel {
    config: HttpConfig,
    agent: ureq::Agent,
    model_id: String,
    vocab: Option<Vocabulary>,
    vocab_size: usize,
}

impl HttpModel {
    /// Connects and probes the server once to learn the vocabulary size and model id.
    pub fn connect(config: HttpConfig) -> Result<Self, LmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        let vocab = match &config.vocab_path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| LmError::InvalidRequest(format!("reading {}: {e}", p.display())))?;
                Some(
                    Vocabulary::from_json(&text)
                        .map_err(|e| LmError::InvalidRequest(format!("parsing {}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        let mut model = Self {
            vocab_size: config.vocab_size.or(vocab.as_ref().map(Vocabulary::len)).unwrap_or(0),
            config,
            agent,
            model_id: String::new(),
            vocab,
        };
        let probe: LogitsResponse = model.post("/v1/logits", &LogitsRequest { context: "", top_logits: TopLogits::Top(1) })?;
        if model.vocab_size != 0 && model.vocab_size != probe.vocab_size {
            return Err(LmError::VocabularyMismatch { expected: model.vocab_size, actual: probe.vocab_size });
        }
        model.vocab_size = probe.vocab_size;
        model.model_id = probe.model_id.unwrap_or_else(|| model.config.url.clone());
        Ok(model)
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, LmError> {
        let url = format!("{}{}", self.config.url.trim_end_matches('/'), path);
        let attempts = self.config.retries.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<R>()
                        .map_err(|e| LmError::BackendUnavailable(format!("{url}: malformed response: {e}")));
                }
                // client errors are not transient
                Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) => {
                    return Err(LmError::InvalidRequest(format!("{url}: HTTP {code}")));
                }
                Err(e) => {
                    log::debug!("{url}: attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(LmError::BackendUnavailable(format!("{url}: {last}")))
    }
}

impl LanguageModel for HttpModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }

    fn next_logits(&self, context: &str) -> Result<LogitVector, LmError> {
        let top_logits = match self.config.top_logits {
            Some(n) => TopLogits::Top(n),
            None => TopLogits::Full("full"),
        };
        let resp: LogitsResponse = self.post("/v1/logits", &LogitsRequest { context, top_logits })?;
        if resp.vocab_size != self.vocab_size {
            return Err(LmError::VocabularyMismatch { expected: self.vocab_size, actual: resp.vocab_size });
        }
        match (resp.logits, resp.top) {
            (Some(values), _) => {
                if values.len() != resp.vocab_size {
                    return Err(LmError::VocabularyMismatch { expected: resp.vocab_size, actual: values.len() });
                }
                LogitVector::full(values)
            }
            (None, Some(top)) => LogitVector::truncated(
                resp.vocab_size,
                top.into_iter().map(|(id, v)| (TokenId(id), v)).collect(),
            ),
            (None, None) => Err(LmError::BackendUnavailable("logits response carried no values".into())),
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, LmError> {
        req.validate()?;
        let bias = req.logit_transform.as_deref().filter(|b| !b.is_identity());
        let wire = GenerateRequest {
            context: &req.context,
            max_tokens: req.max_tokens,
            stop: &req.stop_sequences,
            forced_first_token: req.forced_first_token.map(|t| t.0),
            logit_bias: bias.map(|b| b.deltas().iter().map(|(id, d)| (id.0.to_string(), *d)).collect()),
            temperature: match req.sampling.mode {
                SamplingMode::Greedy => 0.0,
                SamplingMode::Temperature => req.sampling.temperature,
            },
            seed: req.sampling.rng_seed,
        };
        let resp: GenerateResponse = self.post("/v1/generate", &wire)?;
        if resp.token_trace.is_empty() {
            return Err(LmError::EmptyGeneration);
        }
        let mut trace = Vec::with_capacity(resp.token_trace.len());
        for t in resp.token_trace {
            if !t.logit.is_finite() {
                return Err(LmError::NonFinite(t.token_id));
            }
            let token = TokenId(t.token_id);
            trace.push(TraceEntry {
                token,
                logit: t.logit,
                adjusted: t.adjusted.unwrap_or_else(|| bias.map(|b| b.delta(token) != 0.0).unwrap_or(false)),
            });
        }
        if let Some(n) = resp.completion_tokens {
            if n != trace.len() {
                log::warn!("server reported {n} completion tokens for a {}-token trace", trace.len());
            }
        }
        let prompt_tokens = match resp.prompt_tokens {
            Some(n) => n,
            None => self.count_tokens(&req.context)?,
        };
        Ok(GenerationResult {
            text: resp.text,
            completion_tokens: trace.len(),
            token_trace: trace,
            prompt_tokens,
        })
    }

    fn count_tokens(&self, text: &str) -> Result<usize, LmError> {
        if text.is_empty() {
            return Ok(0);
        }
        if let Some(v) = &self.vocab {
            return Ok(v.count(text));
        }
        let resp: TokenizeResponse = self.post("/v1/tokenize", &TokenizeRequest { text })?;
        Ok(resp.count)
    }

    fn max_parallelism(&self) -> Option<usize> {
        Some(self.config.max_parallelism.max(1))
    }
}
