//! Token-level language-model interface.
//!
//! Everything above this module talks to a model through [`LanguageModel`]:
//! full next-token logit vectors for branching, and autoregressive
//! generation with an optional additive [`LogitBias`] applied at every
//! position before the token is chosen.

mod http;
mod scripted;
mod vocab;

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpConfig, HttpModel};
pub use scripted::{Rule, RuleSpec, ScriptSpec, ScriptedModel, ScriptedModelBuilder};
pub use vocab::{split_pieces, Vocabulary};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("vocabulary mismatch: expected {expected} entries, backend reported {actual}")]
    VocabularyMismatch { expected: usize, actual: usize },
    #[error("generation produced no tokens")]
    EmptyGeneration,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("logit for token {0} is not finite")]
    NonFinite(u32),
}

/// Index into a backend vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Next-token logits.
///
/// Servers that can only report the top-N entries produce a truncated
/// vector; entries outside the reported set are unknown rather than
/// implicitly `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub enum LogitVector {
    Full(Vec<f64>),
    Truncated { vocab_size: usize, top: Vec<(TokenId, f64)> },
}

impl LogitVector {
    pub fn full(values: Vec<f64>) -> Result<Self, LmError> {
        if values.is_empty() {
            return Err(LmError::InvalidRequest("empty logit vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LmError::NonFinite(i as u32));
        }
        Ok(Self::Full(values))
    }

    pub fn truncated(vocab_size: usize, mut top: Vec<(TokenId, f64)>) -> Result<Self, LmError> {
        if top.is_empty() {
            return Err(LmError::InvalidRequest("empty top-logit list".into()));
        }
        for &(id, v) in &top {
            if id.index() >= vocab_size {
                return Err(LmError::UnknownToken(id.0));
            }
            if !v.is_finite() {
                return Err(LmError::NonFinite(id.0));
            }
        }
        top.sort_by_key(|(id, _)| *id);
        top.dedup_by_key(|(id, _)| *id);
        Ok(Self::Truncated { vocab_size, top })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Full(v) => v.len(),
            Self::Truncated { vocab_size, .. } => *vocab_size,
        }
    }

    /// Number of entries whose value is known.
    pub fn width(&self) -> usize {
        match self {
            Self::Full(v) => v.len(),
            Self::Truncated { top, .. } => top.len(),
        }
    }

    pub fn is_truncated(&self) -> bool {
        matches!(self, Self::Truncated { .. })
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        match self {
            Self::Full(v) => v.get(id.index()).copied(),
            Self::Truncated { top, .. } => top
                .binary_search_by_key(&id, |(t, _)| *t)
                .ok()
                .map(|i| top[i].1),
        }
    }

    /// Known `(id, logit)` entries in ascending id order.
    pub fn entries(&self) -> Box<dyn Iterator<Item = (TokenId, f64)> + '_> {
        match self {
            Self::Full(v) => Box::new(v.iter().enumerate().map(|(i, &x)| (TokenId(i as u32), x))),
            Self::Truncated { top, .. } => Box::new(top.iter().copied()),
        }
    }

    /// Highest logit, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best: Option<(TokenId, f64)> = None;
        for (id, v) in self.entries() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((id, v)),
            }
        }
        best.map(|(id, _)| id).unwrap_or(TokenId(0))
    }
}

/// Additive per-token logit adjustment, `z'_j = z_j + delta_j`.
///
/// Identity when empty. This is also the wire form of a transform: the HTTP
/// backend ships it to the server as a `logit_bias` map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitBias {
    name: String,
    deltas: Vec<(TokenId, f64)>,
}

impl LogitBias {
    /// Deltas for the same id are summed.
    pub fn new(name: impl Into<String>, deltas: impl IntoIterator<Item = (TokenId, f64)>) -> Self {
        let mut deltas: Vec<(TokenId, f64)> = deltas.into_iter().collect();
        deltas.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(TokenId, f64)> = Vec::with_capacity(deltas.len());
        for (id, d) in deltas {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => *acc += d,
                _ => merged.push((id, d)),
            }
        }
        merged.retain(|(_, d)| *d != 0.0);
        Self { name: name.into(), deltas: merged }
    }

    pub fn identity() -> Self {
        Self::new("identity", [])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_identity(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn deltas(&self) -> &[(TokenId, f64)] {
        &self.deltas
    }

    pub fn delta(&self, id: TokenId) -> f64 {
        self.deltas
            .binary_search_by_key(&id, |(t, _)| *t)
            .map(|i| self.deltas[i].1)
            .unwrap_or(0.0)
    }

    /// Dense delta vector over a vocabulary of `vocab_size` entries.
    pub fn dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(id, d) in &self.deltas {
            if let Some(slot) = out.get_mut(id.index()) {
                *slot += d;
            }
        }
        out
    }

    pub fn apply(&self, z: &LogitVector) -> LogitVector {
        if self.is_identity() {
            return z.clone();
        }
        match z {
            LogitVector::Full(values) => {
                let mut out = values.clone();
                for &(id, d) in &self.deltas {
                    if let Some(slot) = out.get_mut(id.index()) {
                        *slot += d;
                    }
                }
                LogitVector::Full(out)
            }
            LogitVector::Truncated { vocab_size, top } => LogitVector::Truncated {
                vocab_size: *vocab_size,
                top: top.iter().map(|&(id, v)| (id, v + self.delta(id))).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub rng_seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { mode: SamplingMode::Greedy, temperature: 1.0, rng_seed: 0 }
    }
}

impl Sampling {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub context: String,
    pub max_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub forced_first_token: Option<TokenId>,
    pub logit_transform: Option<Arc<LogitBias>>,
    pub sampling: Sampling,
}

impl GenerationRequest {
    pub fn new(context: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            context: context.into(),
            max_tokens,
            stop_sequences: Vec::new(),
            forced_first_token: None,
            logit_transform: None,
            sampling: Sampling::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.max_tokens == 0 {
            return Err(LmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.sampling.mode == SamplingMode::Temperature
            && !(self.sampling.temperature > 0.0 && self.sampling.temperature.is_finite())
        {
            return Err(LmError::InvalidRequest("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub token: TokenId,
    /// Post-transform logit of the emitted token.
    pub logit: f64,
    pub adjusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub token_trace: Vec<TraceEntry>,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

impl GenerationResult {
    pub fn logits(&self) -> Vec<f64> {
        self.token_trace.iter().map(|t| t.logit).collect()
    }
}

pub trait LanguageModel: Send + Sync {
    fn model_id(&self) -> &str;

    fn vocab_size(&self) -> usize;

    /// Decoded vocabulary, when the backend knows it.
    fn vocabulary(&self) -> Option<&Vocabulary>;

    fn next_logits(&self, context: &str) -> Result<LogitVector, LmError>;

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, LmError>;

    fn count_tokens(&self, text: &str) -> Result<usize, LmError>;

    /// `None` means unbounded.
    fn max_parallelism(&self) -> Option<usize>;
}

/// Picks the next token from post-transform logits.
pub(crate) fn select_token(z: &LogitVector, sampling: &Sampling, rng: &mut ChaCha8Rng) -> TokenId {
    match sampling.mode {
        SamplingMode::Greedy => z.argmax(),
        SamplingMode::Temperature => {
            let t = sampling.temperature;
            let entries: Vec<(TokenId, f64)> = z.entries().collect();
            let max = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = entries.iter().map(|e| ((e.1 - max) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.random::<f64>() * total;
            for (e, w) in entries.iter().zip(&weights) {
                if r < *w {
                    return e.0;
                }
                r -= w;
            }
            entries.last().map(|e| e.0).unwrap_or(TokenId(0))
        }
    }
}

/// Autoregressive decoding against a stateless `next_logits` oracle.
///
/// Shared by local backends: each position re-queries the model with the
/// full context so far, applies the request's transform, and records the
/// post-transform logit of the emitted token.
pub(crate) fn decode_with<F>(
    req: &GenerationRequest,
    vocab: &Vocabulary,
    prompt_tokens: usize,
    mut next: F,
) -> Result<GenerationResult, LmError>
where
    F: FnMut(&str) -> Result<LogitVector, LmError>,
{
    req.validate()?;
    if let Some(forced) = req.forced_first_token {
        if forced.index() >= vocab.len() {
            return Err(LmError::UnknownToken(forced.0));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.sampling.rng_seed);
    let bias = req.logit_transform.as_deref();
    let mut text = String::new();
    let mut trace = Vec::new();
    let mut context = req.context.clone();

    for pos in 0..req.max_tokens {
        let raw = next(&context)?;
        let z = match bias {
            Some(b) => b.apply(&raw),
            None => raw,
        };
        let token = match (pos, req.forced_first_token) {
            (0, Some(forced)) => forced,
            _ => select_token(&z, &req.sampling, &mut rng),
        };
        if Some(token) == vocab.eos() && !(pos == 0 && req.forced_first_token.is_some()) {
            break;
        }
        let logit = z.get(token).ok_or(LmError::UnknownToken(token.0))?;
        let piece = vocab.piece(token).ok_or(LmError::UnknownToken(token.0))?;
        trace.push(TraceEntry {
            token,
            logit,
            adjusted: bias.map(|b| b.delta(token) != 0.0).unwrap_or(false),
        });
        text.push_str(piece);
        context.push_str(piece);
        if let Some(cut) = req
            .stop_sequences
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| text.find(s.as_str()))
            .min()
        {
            text.truncate(cut);
            break;
        }
    }

    if trace.is_empty() {
        return Err(LmError::EmptyGeneration);
    }
    Ok(GenerationResult {
        text,
        completion_tokens: trace.len(),
        token_trace: trace,
        prompt_tokens,
    })
}
