//! Deterministic scripted backend.
//!
//! The model is a pure function of the context text: rules are tried in
//! order and the first match supplies the next-token logits. A continuation
//! rule works out how much of its reply is already at the end of the context
//! and scores the next reply token above everything else, so generation
//! replays the reply while each position stays reproducible through
//! [`LanguageModel::next_logits`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    decode_with, split_pieces, GenerationRequest, GenerationResult, LanguageModel, LmError,
    LogitVector, TokenId, Vocabulary,
};

/// Gap between a scripted token's logit and every other entry at that position.
const SCRIPT_MARGIN: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// Fixed logits whenever the context contains every pattern.
    Logits { patterns: Vec<String>, logits: LogitVector },
    /// Replays `tokens` after the context; `min_progress` tokens must already
    /// be present before the rule applies (1 for seed-forced branches).
    Continuation {
        patterns: Vec<String>,
        tokens: Vec<(TokenId, f64)>,
        min_progress: usize,
        end_logit: f64,
    },
}

impl Rule {
    fn patterns(&self) -> &[String] {
        match self {
            Rule::Logits { patterns, .. } | Rule::Continuation { patterns, .. } => patterns,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedModel {
    model_id: String,
    vocab: Vocabulary,
    rules: Vec<Rule>,
    default_logits: LogitVector,
    // cumulative decoded prefixes per continuation rule
    prefixes: Vec<Vec<String>>,
}

impl ScriptedModel {
    pub fn new(vocab: Vocabulary, rules: Vec<Rule>, default_logits: LogitVector) -> Result<Self, LmError> {
        let n = vocab.len();
        let check = |z: &LogitVector| -> Result<(), LmError> {
            if z.vocab_size() != n || z.is_truncated() {
                return Err(LmError::VocabularyMismatch { expected: n, actual: z.vocab_size() });
            }
            Ok(())
        };
        check(&default_logits)?;
        let mut prefixes = Vec::with_capacity(rules.len());
        for rule in &rules {
            match rule {
                Rule::Logits { logits, .. } => {
                    check(logits)?;
                    prefixes.push(Vec::new());
                }
                Rule::Continuation { tokens, end_logit, .. } => {
                    let mut acc = String::new();
                    let mut cum = vec![String::new()];
                    for &(id, logit) in tokens {
                        if !logit.is_finite() {
                            return Err(LmError::NonFinite(id.0));
                        }
                        acc.push_str(vocab.piece(id).ok_or(LmError::UnknownToken(id.0))?);
                        cum.push(acc.clone());
                    }
                    if !end_logit.is_finite() {
                        return Err(LmError::InvalidRequest("end logit must be finite".into()));
                    }
                    prefixes.push(cum);
                }
            }
        }
        Ok(Self { model_id: "scripted".into(), vocab, rules, default_logits, prefixes })
    }

    pub fn builder() -> ScriptedModelBuilder {
        ScriptedModelBuilder::default()
    }

    pub fn from_spec(spec: &ScriptSpec) -> Result<Self, LmError> {
        let mut b = ScriptedModel::builder().model_id(&spec.model_id).default_logit(spec.default_logit);
        for p in &spec.vocabulary {
            b = b.piece(p);
        }
        for r in &spec.rules {
            b = match r {
                RuleSpec::Logits { when, logits } => {
                    let pairs: Vec<(&str, f64)> = logits.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                    b.logits_rule(when, &pairs)
                }
                RuleSpec::Reply { when, reply, token_logits, token_logit, after_first } => {
                    let pieces = split_pieces(reply).len();
                    let logits = match token_logits {
                        Some(l) if l.len() == pieces => l.clone(),
                        Some(l) => {
                            return Err(LmError::InvalidRequest(format!(
                                "reply {reply:?} has {pieces} pieces but {} token logits",
                                l.len()
                            )))
                        }
                        None => vec![*token_logit; pieces],
                    };
                    b.reply_with_logits(when, reply, &logits, if *after_first { 1 } else { 0 })
                }
            };
        }
        b.build()
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn id_of(&self, piece: &str) -> Option<TokenId> {
        self.vocab.id(piece)
    }

    fn continuation_logits(&self, rule_idx: usize, context: &str) -> Option<LogitVector> {
        let Rule::Continuation { tokens, min_progress, end_logit, .. } = &self.rules[rule_idx] else {
            return None;
        };
        let cum = &self.prefixes[rule_idx];
        let done = (*min_progress..cum.len()).rev().find(|&i| context.ends_with(cum[i].as_str()))?;
        let n = self.vocab.len();
        if done < tokens.len() {
            let (id, logit) = tokens[done];
            let mut v = vec![logit - SCRIPT_MARGIN; n];
            v[id.index()] = logit;
            Some(LogitVector::Full(v))
        } else {
            let eos = self.vocab.eos()?;
            let mut v = vec![end_logit - SCRIPT_MARGIN; n];
            v[eos.index()] = *end_logit;
            Some(LogitVector::Full(v))
        }
    }
}

impl LanguageModel for ScriptedModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn next_logits(&self, context: &str) -> Result<LogitVector, LmError> {
        for (i, rule) in self.rules.iter().enumerate() {
            if !rule.patterns().iter().all(|p| context.contains(p.as_str())) {
                continue;
            }
            match rule {
                Rule::Logits { logits, .. } => return Ok(logits.clone()),
                Rule::Continuation { .. } => {
                    if let Some(z) = self.continuation_logits(i, context) {
                        return Ok(z);
                    }
                }
            }
        }
        Ok(self.default_logits.clone())
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, LmError> {
        let prompt_tokens = self.vocab.count(&req.context);
        decode_with(req, &self.vocab, prompt_tokens, |ctx| self.next_logits(ctx))
    }

    fn count_tokens(&self, text: &str) -> Result<usize, LmError> {
        Ok(self.vocab.count(text))
    }

    fn max_parallelism(&self) -> Option<usize> {
        None
    }
}

/// Collects pieces while rules are added; ids are assigned at `build`.
#[derive(Debug, Clone)]
pub struct ScriptedModelBuilder {
    model_id: String,
    pieces: Vec<String>,
    default_logit: f64,
    end_logit: f64,
    rules: Vec<PendingRule>,
}

#[derive(Debug, Clone)]
enum PendingRule {
    Logits { patterns: Vec<String>, entries: Vec<(String, f64)> },
    Reply { patterns: Vec<String>, tokens: Vec<(String, f64)>, min_progress: usize },
}

impl Default for ScriptedModelBuilder {
    fn default() -> Self {
        Self {
            model_id: "scripted".into(),
            pieces: Vec::new(),
            default_logit: 0.0,
            end_logit: 10.0,
            rules: Vec::new(),
        }
    }
}

impl ScriptedModelBuilder {
    pub fn model_id(mut self, id: &str) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn default_logit(mut self, v: f64) -> Self {
        self.default_logit = v;
        self
    }

    pub fn piece(mut self, p: &str) -> Self {
        self.add_piece(p);
        self
    }

    fn add_piece(&mut self, p: &str) {
        if !self.pieces.iter().any(|q| q == p) {
            self.pieces.push(p.to_string());
        }
    }

    pub fn logits_rule<S: AsRef<str>>(mut self, when: &[S], entries: &[(&str, f64)]) -> Self {
        for (p, _) in entries {
            self.add_piece(p);
        }
        self.rules.push(PendingRule::Logits {
            patterns: when.iter().map(|s| s.as_ref().to_string()).collect(),
            entries: entries.iter().map(|(p, v)| (p.to_string(), *v)).collect(),
        });
        self
    }

    /// Reply with a constant per-token logit.
    pub fn reply<S: AsRef<str>>(self, when: &[S], text: &str, token_logit: f64) -> Self {
        let n = split_pieces(text).len();
        self.reply_with_logits(when, text, &vec![token_logit; n], 0)
    }

    /// Reply whose tokens carry the given logits. `min_progress` is the
    /// number of reply tokens that must already be in the context.
    ///
    /// Panics if `logits` does not have one entry per piece of `text`.
    pub fn reply_with_logits<S: AsRef<str>>(
        mut self,
        when: &[S],
        text: &str,
        logits: &[f64],
        min_progress: usize,
    ) -> Self {
        let pieces = split_pieces(text);
        assert_eq!(pieces.len(), logits.len(), "one logit per reply piece");
        for p in &pieces {
            self.add_piece(p);
        }
        self.rules.push(PendingRule::Reply {
            patterns: when.iter().map(|s| s.as_ref().to_string()).collect(),
            tokens: pieces.iter().map(|p| p.to_string()).zip(logits.iter().copied()).collect(),
            min_progress,
        });
        self
    }

    pub fn build(self) -> Result<ScriptedModel, LmError> {
        let vocab = Vocabulary::with_specials(self.pieces);
        let n = vocab.len();
        let id = |p: &str| vocab.id(p).expect("piece registered");
        let rules = self
            .rules
            .into_iter()
            .map(|r| match r {
                PendingRule::Logits { patterns, entries } => {
                    let mut v = vec![self.default_logit; n];
                    for (p, x) in entries {
                        v[id(&p).index()] = x;
                    }
                    Ok(Rule::Logits { patterns, logits: LogitVector::full(v)? })
                }
                PendingRule::Reply { patterns, tokens, min_progress } => Ok(Rule::Continuation {
                    patterns,
                    tokens: tokens.into_iter().map(|(p, x)| (id(&p), x)).collect(),
                    min_progress,
                    end_logit: self.end_logit,
                }),
            })
            .collect::<Result<Vec<_>, LmError>>()?;
        let default = LogitVector::full(vec![self.default_logit; n])?;
        Ok(ScriptedModel::new(vocab, rules, default)?.with_model_id(self.model_id))
    }
}

/// File form of a scripted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSpec {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub vocabulary: Vec<String>,
    #[serde(default)]
    pub default_logit: f64,
    pub rules: Vec<RuleSpec>,
}

fn default_model_id() -> String {
    "scripted".into()
}

fn default_token_logit() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RuleSpec {
    Logits {
        when: Vec<String>,
        logits: BTreeMap<String, f64>,
    },
    Reply {
        when: Vec<String>,
        reply: String,
        #[serde(default)]
        token_logits: Option<Vec<f64>>,
        #[serde(default = "default_token_logit")]
        token_logit: f64,
        #[serde(default)]
        after_first: bool,
    },
}
