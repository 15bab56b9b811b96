//! Preference decoding: word-level logit deltas learned from labeled
//! reasoning traces, compiled into an additive token bias.
//!
//! Two table sources exist. The frequency-ratio builder contrasts how often
//! each word appears in high-accuracy versus low-accuracy traces; the fixed
//! mode assigns `+alpha` / `-alpha` to a curated word list shipped with the
//! crate. Either table compiles against a decoded vocabulary into a
//! [`LogitBias`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LogitBias, TokenId, Vocabulary};

/// Curated high/low quality word lists.
pub const BUILTIN_WORD_LISTS: &str = include_str!("../assets/preference_words.json");

/// Samples with accuracy strictly above this are high quality.
pub const QUALITY_THRESHOLD: f64 = 0.5;

pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LpdError {
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate word {0:?}")]
    DuplicateWord(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableMode {
    Ratio,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEntry {
    pub word: String,
    pub delta: f64,
    pub count_high: u64,
    pub count_low: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTable {
    pub version: u32,
    pub mode: TableMode,
    pub alpha: f64,
    pub clamp: f64,
    pub tokenizer_id: String,
    #[serde(default)]
    pub source: String,
    pub entries: Vec<PreferenceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotSample {
    pub steps: Vec<String>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledCotCorpus {
    pub samples: Vec<CotSample>,
}

impl LabeledCotCorpus {
    /// One `{"steps": [...], "accuracy": x}` object per non-blank line.
    pub fn from_jsonl(text: &str) -> Result<Self, LpdError> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: CotSample =
                serde_json::from_str(line).map_err(|e| LpdError::Parse(format!("line {}: {e}", n + 1)))?;
            if !(0.0..=1.0).contains(&s.accuracy) {
                return Err(LpdError::Parse(format!("line {}: accuracy {} outside [0, 1]", n + 1, s.accuracy)));
            }
            samples.push(s);
        }
        Ok(Self { samples })
    }

    pub fn load(path: &Path) -> Result<Self, LpdError> {
        Self::from_jsonl(&read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatioParams {
    pub alpha: f64,
    pub clamp: f64,
    pub epsilon: f64,
    pub min_count: u64,
    /// Entries with `|delta|` below this are dropped.
    pub floor: f64,
}

impl Default for RatioParams {
    fn default() -> Self {
        Self { alpha: 2.0, clamp: 4.0, epsilon: 0.01, min_count: 3, floor: 0.1 }
    }
}

/// Lowercases and strips whitespace markers and surrounding punctuation.
///
/// `"ĠVerify,"` and `" verify"` both normalize to `"verify"`; interior
/// characters such as the underscore in `p_1` are kept.
pub fn normalize_word(text: &str) -> String {
    let trimmed = text.trim_start_matches(|c: char| c.is_whitespace() || c == 'Ġ' || c == '▁' || c == 'Ċ');
    let is_punct = |c: char| c.is_ascii_punctuation() || c.is_whitespace() || matches!(c, '“' | '”' | '‘' | '’' | '…');
    trimmed.trim_matches(is_punct).to_lowercase()
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(normalize_word).filter(|w| !w.is_empty())
}

pub fn build_preference_table(corpus: &LabeledCotCorpus, params: &RatioParams) -> Result<PreferenceTable, LpdError> {
    if !(params.alpha > 0.0) || !(params.epsilon > 0.0) || !(params.clamp > 0.0) {
        return Err(LpdError::InvalidParams(format!(
            "alpha, clamp and epsilon must be positive (got {}, {}, {})",
            params.alpha, params.clamp, params.epsilon
        )));
    }
    if !(params.floor >= 0.0) {
        return Err(LpdError::InvalidParams("floor must be non-negative".into()));
    }

    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let (mut total_high, mut total_low) = (0u64, 0u64);
    let (mut n_high, mut n_low) = (0usize, 0usize);
    for sample in &corpus.samples {
        let high = sample.accuracy > QUALITY_THRESHOLD;
        if high {
            n_high += 1;
        } else {
            n_low += 1;
        }
        for w in sample.steps.iter().flat_map(|s| words(s)) {
            let slot = counts.entry(w).or_default();
            if high {
                slot.0 += 1;
                total_high += 1;
            } else {
                slot.1 += 1;
                total_low += 1;
            }
        }
    }
    if n_high == 0 || n_low == 0 {
        return Err(LpdError::DegenerateCorpus(format!(
            "{n_high} high-quality and {n_low} low-quality samples; both sides are required"
        )));
    }
    if total_high == 0 || total_low == 0 {
        return Err(LpdError::DegenerateCorpus("one side contains no words".into()));
    }

    let mut entries: Vec<PreferenceEntry> = counts
        .into_iter()
        .filter(|(_, (h, l))| h + l >= params.min_count)
        .filter_map(|(word, (h, l))| {
            let f_high = h as f64 / total_high as f64;
            let f_low = l as f64 / total_low as f64;
            let ratio = ((f_high + params.epsilon) / (f_low + params.epsilon)).ln();
            let delta = params.alpha * ratio.clamp(-params.clamp, params.clamp);
            (delta.abs() >= params.floor && delta != 0.0).then_some(PreferenceEntry {
                word,
                delta,
                count_high: h,
                count_low: l,
            })
        })
        .collect();
    entries.sort_by(|a, b| b.delta.total_cmp(&a.delta).then_with(|| a.word.cmp(&b.word)));

    Ok(PreferenceTable {
        version: TABLE_VERSION,
        mode: TableMode::Ratio,
        alpha: params.alpha,
        clamp: params.clamp,
        tokenizer_id: "word".into(),
        source: format!(
            "frequency ratio over {} samples ({n_high} high / {n_low} low, epsilon {}, min_count {})",
            corpus.samples.len(),
            params.epsilon,
            params.min_count
        ),
        entries,
    })
}

#[derive(Deserialize)]
struct WordLists {
    high_quality: Vec<String>,
    low_quality: Vec<String>,
}

/// Fixed-delta table from a `{high_quality: [...], low_quality: [...]}` file.
pub fn load_static_table(path: &Path, alpha: f64) -> Result<PreferenceTable, LpdError> {
    let mut table = static_table_from_str(&read(path)?, alpha)?;
    table.source = format!("fixed word lists from {}", path.display());
    Ok(table)
}

/// Fixed-delta table from the word lists embedded in the crate.
pub fn builtin_static_table(alpha: f64) -> PreferenceTable {
    let mut t = static_table_from_str(BUILTIN_WORD_LISTS, alpha).expect("embedded word lists are valid");
    t.source = "built-in word lists".into();
    t
}

pub fn static_table_from_str(text: &str, alpha: f64) -> Result<PreferenceTable, LpdError> {
    if !(alpha > 0.0) {
        return Err(LpdError::InvalidParams(format!("alpha must be positive (got {alpha})")));
    }
    let lists: WordLists = serde_json::from_str(text).map_err(|e| LpdError::Parse(e.to_string()))?;
    let mut seen = HashMap::new();
    let mut entries = Vec::with_capacity(lists.high_quality.len() + lists.low_quality.len());
    for (list, delta) in [(&lists.high_quality, alpha), (&lists.low_quality, -alpha)] {
        for raw in list {
            let word = normalize_word(raw);
            if word.is_empty() {
                return Err(LpdError::Parse(format!("word {raw:?} is empty after normalization")));
            }
            if seen.insert(word.clone(), ()).is_some() {
                return Err(LpdError::DuplicateWord(word));
            }
            entries.push(PreferenceEntry { word, delta, count_high: 0, count_low: 0 });
        }
    }
    Ok(PreferenceTable {
        version: TABLE_VERSION,
        mode: TableMode::Fixed,
        alpha,
        clamp: 1.0,
        tokenizer_id: "word".into(),
        source: String::new(),
        entries,
    })
}

impl PreferenceTable {
    pub fn empty() -> Self {
        Self {
            version: TABLE_VERSION,
            mode: TableMode::Fixed,
            alpha: 1.0,
            clamp: 1.0,
            tokenizer_id: "word".into(),
            source: "empty".into(),
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn delta(&self, word: &str) -> Option<f64> {
        let w = normalize_word(word);
        self.entries.iter().find(|e| e.word == w).map(|e| e.delta)
    }

    /// Checks word uniqueness, count signs and the delta bound.
    pub fn validate(&self) -> Result<(), LpdError> {
        if !(self.alpha > 0.0) || !(self.clamp > 0.0) {
            return Err(LpdError::InvalidParams("alpha and clamp must be positive".into()));
        }
        let bound = self.alpha * self.clamp;
        let mut seen = HashMap::new();
        for e in &self.entries {
            let w = normalize_word(&e.word);
            if w != e.word || w.is_empty() {
                return Err(LpdError::Parse(format!("word {:?} is not normalized", e.word)));
            }
            if seen.insert(w, ()).is_some() {
                return Err(LpdError::DuplicateWord(e.word.clone()));
            }
            if !e.delta.is_finite() || e.delta.abs() > bound * (1.0 + 1e-12) {
                return Err(LpdError::InvalidParams(format!("delta {} for {:?} exceeds {bound}", e.delta, e.word)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, LpdError> {
        let t: Self = serde_json::from_str(text).map_err(|e| LpdError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, LpdError> {
        Self::from_json(&read(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), LpdError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|source| LpdError::Io { path: path.display().to_string(), source })
    }
}

/// A table compiled against one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPreferences {
    pub bias: LogitBias,
    /// Table words no vocabulary token could carry.
    pub unmatched: Vec<String>,
}

fn starts_word(piece: &str) -> bool {
    piece.starts_with(|c: char| c.is_whitespace() || c == 'Ġ' || c == '▁')
}

/// Maps every vocabulary token whose normalized text equals a table word to
/// that word's delta. A word with no whole-word token biases its first
/// subword instead: the word-initial token whose normalized text is the
/// longest proper prefix of the word.
pub fn compile_transform(table: &PreferenceTable, vocab: &Vocabulary) -> CompiledPreferences {
    let name = format!("lpd-{}", match table.mode {
        TableMode::Ratio => "ratio",
        TableMode::Fixed => "fixed",
    });
    if table.is_empty() {
        return CompiledPreferences { bias: LogitBias::new(name, []), unmatched: Vec::new() };
    }
    let by_word: HashMap<&str, f64> = table.entries.iter().map(|e| (e.word.as_str(), e.delta)).collect();
    let normalized: Vec<(TokenId, String, bool)> =
        vocab.pieces().map(|(id, p)| (id, normalize_word(p), starts_word(p))).collect();

    let mut deltas = Vec::new();
    let mut matched: HashMap<&str, ()> = HashMap::new();
    for (id, norm, _) in &normalized {
        if let Some((&word, &d)) = by_word.get_key_value(norm.as_str()) {
            deltas.push((*id, d));
            matched.insert(word, ());
        }
    }

    let mut unmatched = Vec::new();
    for e in &table.entries {
        if matched.contains_key(e.word.as_str()) {
            continue;
        }
        let best = normalized
            .iter()
            .filter(|(_, norm, initial)| {
                *initial && norm.chars().count() >= 2 && norm.len() < e.word.len() && e.word.starts_with(norm.as_str())
            })
            .map(|(_, norm, _)| norm.len())
            .max();
        match best {
            Some(len) => {
                for (id, norm, initial) in &normalized {
                    if *initial && norm.len() == len && e.word.starts_with(norm.as_str()) {
                        deltas.push((*id, e.delta));
                    }
                }
            }
            None => unmatched.push(e.word.clone()),
        }
    }
    if !unmatched.is_empty() {
        log::debug!("{} preference words have no vocabulary token: {:?}", unmatched.len(), unmatched);
    }
    CompiledPreferences { bias: LogitBias::new(name, deltas), unmatched }
}

fn read(path: &Path) -> Result<String, LpdError> {
    std::fs::read_to_string(path).map_err(|source| LpdError::Io { path: path.display().to_string(), source })
}
