//! Engine configuration: one TOML document with a section per module.
//!
//! ```toml
//! seed = 0
//! workers = 1
//!
//! [backend]
//! kind = "mock"            # or "http"
//! script = "script.json"   # mock only
//! url = "http://127.0.0.1:8000"
//!
//! [lpd]
//! mode = "off"             # "ratio" needs `table`; "fixed" uses the shipped word lists
//!
//! [lrbps]
//! k = 3
//!
//! [aggregate]
//! mode = "dynamic"
//!
//! [pipeline]
//! rollout_budget = 20
//!
//! [executor]
//! wall_ms = 10000
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the current
//! directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateConfig, AggregationMode};
use crate::executor::{Limits, SandboxConfig};
use crate::lm::{HttpConfig, HttpModel, LanguageModel, LmError, LogitBias, Sampling, SamplingMode, ScriptSpec, ScriptedModel, Vocabulary};
use crate::lpd::{builtin_static_table, compile_transform, load_static_table, PreferenceTable};
use crate::lrbps::Fanout;
use crate::pipeline::prompts::PromptSet;
use crate::pipeline::{LpdStage, PipelineConfig};

pub const BACKEND_URL_ENV: &str = "LOGITS_BACKEND_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    /// The configuration is fine but the backend could not be brought up.
    #[error("backend bootstrap failed: {0}")]
    Bootstrap(LmError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown backend {other:?} (expected mock or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Scripted-model rules for the mock backend.
    pub script: Option<PathBuf>,
    pub url: String,
    pub timeout_ms: u64,
    pub max_parallelism: usize,
    pub top_logits: Option<usize>,
    pub vocab_size: Option<usize>,
    pub vocab_path: Option<PathBuf>,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let h = HttpConfig::default();
        Self {
            kind: BackendKind::Mock,
            script: None,
            url: h.url,
            timeout_ms: h.timeout_ms,
            max_parallelism: h.max_parallelism,
            top_logits: h.top_logits,
            vocab_size: h.vocab_size,
            vocab_path: h.vocab_path,
            retries: h.retries,
            backoff_ms: h.backoff_ms,
        }
    }
}

impl BackendConfig {
    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            url: self.url.clone(),
            timeout_ms: self.timeout_ms,
            max_parallelism: self.max_parallelism,
            top_logits: self.top_logits,
            vocab_size: self.vocab_size,
            vocab_path: self.vocab_path.clone(),
            retries: self.retries,
            backoff_ms: self.backoff_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpdMode {
    Off,
    Ratio,
    Fixed,
}

impl FromStr for LpdMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Self::Off),
            "ratio" => Ok(Self::Ratio),
            "fixed" => Ok(Self::Fixed),
            other => Err(format!("unknown LPD mode {other:?} (expected off, ratio or fixed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpdConfig {
    pub mode: LpdMode,
    /// Ratio: a preference table built by `build-prefs`. Fixed: an optional
    /// word-list file replacing the shipped lists.
    pub table: Option<PathBuf>,
    /// Fixed-mode magnitude.
    pub alpha: f64,
}

impl Default for LpdConfig {
    fn default() -> Self {
        Self { mode: LpdMode::Off, table: None, alpha: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrbpsConfig {
    pub k: usize,
    pub max_tokens_per_path: usize,
    /// Only `mean_then_rank` is implemented.
    pub tie_break: String,
    pub fanout: Fanout,
}

impl Default for LrbpsConfig {
    fn default() -> Self {
        Self { k: 3, max_tokens_per_path: 256, tie_break: "mean_then_rank".into(), fanout: Fanout::Serial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub max_steps: usize,
    pub refinement_rounds_per_step: usize,
    pub rollout_budget: u32,
    pub final_reserve: u32,
    pub lpd_stages: BTreeSet<LpdStage>,
    pub prompt_set: String,
    /// Load templates from this directory instead of the built-in set.
    pub prompt_dir: Option<PathBuf>,
    pub max_tokens_step: usize,
    pub max_tokens_code: usize,
    pub feedback_cap_bytes: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            max_steps: p.max_steps,
            refinement_rounds_per_step: p.refinement_rounds_per_step,
            rollout_budget: p.rollout_budget,
            final_reserve: p.final_reserve,
            lpd_stages: p.lpd_stages,
            prompt_set: p.prompt_set,
            prompt_dir: None,
            max_tokens_step: p.max_tokens_step,
            max_tokens_code: p.max_tokens_code,
            feedback_cap_bytes: p.feedback_cap_bytes,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub interpreter: PathBuf,
    pub interpreter_args: Vec<String>,
    pub audit_guard: bool,
    pub landlock: bool,
    pub slots: usize,
    pub wall_ms: u64,
    pub memory_bytes: u64,
    pub output_bytes: usize,
    pub file_bytes: u64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        let s = SandboxConfig::default();
        let l = Limits::default();
        Self {
            interpreter: s.interpreter,
            interpreter_args: s.interpreter_args,
            audit_guard: s.audit_guard,
            landlock: s.landlock,
            slots: s.slots,
            wall_ms: l.wall_ms,
            memory_bytes: l.memory_bytes,
            output_bytes: l.output_bytes,
            file_bytes: l.file_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    pub workers: usize,
    pub backend: BackendConfig,
    pub lpd: LpdConfig,
    pub lrbps: LrbpsConfig,
    pub aggregate: AggregateConfig,
    pub pipeline: PipelineSection,
    pub executor: ExecutorConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            backend: BackendConfig::default(),
            lpd: LpdConfig::default(),
            lrbps: LrbpsConfig::default(),
            aggregate: AggregateConfig::default(),
            pipeline: PipelineSection::default(),
            executor: ExecutorConfig::default(),
        }
    }
}

/// Named presets for the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// k = 1, no preference biasing, best-path aggregation.
    Base,
    /// Base with frequency-ratio biasing.
    Decoding,
    /// Base with fixed word-list biasing.
    SoftDecoding,
    /// Ratio biasing, full width, best-path aggregation.
    DecodingBest,
    /// Ratio biasing, full width, summary always adopted.
    DecodingAgg,
    /// Ratio biasing, full width, validated aggregation.
    Full,
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "base" => Self::Base,
            "decoding" => Self::Decoding,
            "softdecoding" => Self::SoftDecoding,
            "decoding-best" => Self::DecodingBest,
            "decoding-agg" => Self::DecodingAgg,
            "full" => Self::Full,
            other => {
                return Err(format!(
                    "unknown ablation {other:?} (expected base, decoding, softdecoding, decoding-best, decoding-agg or full)"
                ))
            }
        })
    }
}

impl Ablation {
    /// Overrides width, biasing mode and aggregation mode; `k` is the width
    /// used by the full-width presets.
    pub fn apply(self, cfg: &mut EngineConfig, k: usize) {
        let (width, lpd, mode) = match self {
            Self::Base => (1, LpdMode::Off, AggregationMode::Best),
            Self::Decoding => (1, LpdMode::Ratio, AggregationMode::Best),
            Self::SoftDecoding => (1, LpdMode::Fixed, AggregationMode::Best),
            Self::DecodingBest => (k, LpdMode::Ratio, AggregationMode::Best),
            Self::DecodingAgg => (k, LpdMode::Ratio, AggregationMode::Summarize),
            Self::Full => (k, LpdMode::Ratio, AggregationMode::Dynamic),
        };
        cfg.lrbps.k = width;
        cfg.lpd.mode = lpd;
        cfg.aggregate.mode = mode;
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::File { path: path.display().to_string(), message: e.to_string() })?;
        toml::from_str(&text).map_err(|e| ConfigError::File { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Environment overrides; currently only the backend URL.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(url) = lookup(BACKEND_URL_ENV).filter(|u| !u.is_empty()) {
            self.backend.url = url;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        if self.lrbps.tie_break != "mean_then_rank" {
            return invalid(format!("unsupported lrbps.tie_break {:?}", self.lrbps.tie_break));
        }
        if self.backend.kind == BackendKind::Mock && self.backend.script.is_none() {
            return invalid("the mock backend needs backend.script");
        }
        if self.lpd.mode == LpdMode::Ratio && self.lpd.table.is_none() {
            return invalid("lpd.mode = \"ratio\" needs lpd.table (build one with build-prefs)");
        }
        if !(self.lpd.alpha > 0.0) {
            return invalid("lpd.alpha must be positive");
        }
        if !(self.pipeline.temperature >= 0.0) {
            return invalid("pipeline.temperature must be non-negative");
        }
        if self.executor.slots == 0 || self.executor.wall_ms == 0 {
            return invalid("executor.slots and executor.wall_ms must be positive");
        }
        self.pipeline_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        let sampling = if p.temperature > 0.0 {
            Sampling { mode: SamplingMode::Temperature, temperature: p.temperature, rng_seed: self.seed }
        } else {
            Sampling::greedy().with_seed(self.seed)
        };
        PipelineConfig {
            k: self.lrbps.k,
            max_steps: p.max_steps,
            refinement_rounds_per_step: p.refinement_rounds_per_step,
            rollout_budget: p.rollout_budget,
            final_reserve: p.final_reserve,
            lpd_stages: p.lpd_stages.clone(),
            aggregate: self.aggregate.clone(),
            sampling,
            prompt_set: p.prompt_set.clone(),
            max_tokens_step: p.max_tokens_step,
            max_tokens_path: self.lrbps.max_tokens_per_path,
            max_tokens_code: p.max_tokens_code,
            feedback_cap_bytes: p.feedback_cap_bytes,
            fanout: self.lrbps.fanout,
        }
    }

    pub fn sandbox_config(&self) -> SandboxConfig {
        let e = &self.executor;
        SandboxConfig {
            interpreter: e.interpreter.clone(),
            interpreter_args: e.interpreter_args.clone(),
            audit_guard: e.audit_guard,
            landlock: e.landlock,
            slots: e.slots,
            ..SandboxConfig::default()
        }
    }

    pub fn limits(&self) -> Limits {
        let e = &self.executor;
        Limits { wall_ms: e.wall_ms, memory_bytes: e.memory_bytes, output_bytes: e.output_bytes, file_bytes: e.file_bytes }
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ConfigError> {
        let p = &self.pipeline;
        match &p.prompt_dir {
            Some(dir) => PromptSet::load_dir(&p.prompt_set, dir),
            None => PromptSet::builtin(&p.prompt_set),
        }
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical JSON of the effective configuration, as stored in reports.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Brings up the configured backend. A missing or malformed script is a
    /// configuration error; an unreachable server is a bootstrap error.
    pub fn connect(&self) -> Result<Box<dyn LanguageModel>, ConfigError> {
        match self.backend.kind {
            BackendKind::Mock => {
                let path = self.backend.script.as_deref().ok_or_else(|| ConfigError::Invalid("the mock backend needs backend.script".into()))?;
                let file = |message: String| ConfigError::File { path: path.display().to_string(), message };
                let text = std::fs::read_to_string(path).map_err(|e| file(e.to_string()))?;
                let spec: ScriptSpec = serde_json::from_str(&text).map_err(|e| file(e.to_string()))?;
                Ok(Box::new(ScriptedModel::from_spec(&spec).map_err(|e| file(e.to_string()))?))
            }
            BackendKind::Http => {
                if let Some(v) = &self.backend.vocab_path {
                    if !v.exists() {
                        return Err(ConfigError::File { path: v.display().to_string(), message: "no such file".into() });
                    }
                }
                Ok(Box::new(HttpModel::connect(self.backend.http()).map_err(ConfigError::Bootstrap)?))
            }
        }
    }

    /// Compiles the configured preference table against `vocab`.
    pub fn preference_bias(&self, vocab: Option<&Vocabulary>) -> Result<Option<Arc<LogitBias>>, ConfigError> {
        let table = match self.lpd.mode {
            LpdMode::Off => return Ok(None),
            LpdMode::Ratio => {
                let path = self.lpd.table.as_deref().ok_or_else(|| ConfigError::Invalid("lpd.table is required".into()))?;
                PreferenceTable::load(path)
                    .map_err(|e| ConfigError::File { path: path.display().to_string(), message: e.to_string() })?
            }
            LpdMode::Fixed => match &self.lpd.table {
                Some(path) => load_static_table(path, self.lpd.alpha)
                    .map_err(|e| ConfigError::File { path: path.display().to_string(), message: e.to_string() })?,
                None => builtin_static_table(self.lpd.alpha),
            },
        };
        let vocab = vocab.ok_or_else(|| {
            ConfigError::Invalid("preference biasing needs the backend vocabulary (set backend.vocab_path)".into())
        })?;
        let compiled = compile_transform(&table, vocab);
        if !compiled.unmatched.is_empty() {
            log::info!("{} preference words have no token in this vocabulary", compiled.unmatched.len());
        }
        Ok(Some(Arc::new(compiled.bias)))
    }
}
