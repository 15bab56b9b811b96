//! Combining ranked candidate clues into the one that is adopted.
//!
//! A step can adopt the best-ranked path as is, an LLM summary of all paths,
//! or (dynamic mode) whichever of the two scores higher when provisional code
//! built from each is executed. Ties go to the best path.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{GenerationRequest, LanguageModel, LmError, LogitBias, Sampling};
use crate::pipeline::parse::{extract_clue, normalize_clue};
use crate::pipeline::prompts::{render, render_candidates, PromptSet};
use crate::report::{LmCall, Stage};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no parseable clue after {attempts} attempt(s)")]
    MalformedLLMReply { attempts: u32, last_reply: String },
    #[error("rollout budget exhausted")]
    BudgetExhausted,
    #[error("no candidate paths to aggregate")]
    EmptyCandidates,
    #[error(transparent)]
    Backend(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Dynamic,
    Best,
    Summarize,
}

impl FromStr for AggregationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(Self::Dynamic),
            "best" => Ok(Self::Best),
            "summarize" => Ok(Self::Summarize),
            other => Err(format!("unknown aggregation mode {other:?} (expected dynamic, best or summarize)")),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dynamic => "dynamic",
            Self::Best => "best",
            Self::Summarize => "summarize",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSource {
    Summarized,
    BestPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub adopted_text: String,
    pub source: OutcomeSource,
    pub score_agg: Option<f64>,
    pub score_best: Option<f64>,
    pub rollouts_spent: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    pub mode: AggregationMode,
    /// Dynamic validation needs two rollouts; anything lower disables it.
    pub max_validation_rollouts_per_step: u32,
    pub reask_limit: u32,
    pub max_tokens: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self { mode: AggregationMode::Dynamic, max_validation_rollouts_per_step: 2, reask_limit: 1, max_tokens: 256 }
    }
}

/// Per-problem rollout allowance. `used` never exceeds `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutBudget {
    total: u32,
    used: u32,
}

impl RolloutBudget {
    pub fn new(total: u32) -> Self {
        Self { total, used: 0 }
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn used(&self) -> u32 {
        self.used
    }

    pub fn remaining(&self) -> u32 {
        self.total - self.used
    }

    /// True when `n` rollouts fit and `reserve` are still left afterwards.
    pub fn affords(&self, n: u32, reserve: u32) -> bool {
        self.remaining() >= n.saturating_add(reserve)
    }

    pub fn try_consume(&mut self) -> Result<(), AggregateError> {
        if self.used >= self.total {
            return Err(AggregateError::BudgetExhausted);
        }
        self.used += 1;
        Ok(())
    }
}

/// Strict rule: the summary is adopted only when it validates strictly
/// better. Without scores the best path is adopted.
pub fn choose_final(agg_text: &str, best_text: &str, scores: Option<(f64, f64)>) -> AggregationOutcome {
    let (source, text) = match scores {
        Some((agg, best)) if agg > best => (OutcomeSource::Summarized, agg_text),
        _ => (OutcomeSource::BestPath, best_text),
    };
    AggregationOutcome {
        adopted_text: text.to_string(),
        source,
        score_agg: scores.map(|s| s.0),
        score_best: scores.map(|s| s.1),
        rollouts_spent: 0,
        diagnostics: Vec::new(),
    }
}

/// A ranked candidate as shown to the summarizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'a> {
    pub text: &'a str,
    pub sigma: f64,
}

/// Everything the summarizer prompt and decode need besides the candidates.
#[derive(Debug, Clone)]
pub struct SummaryContext<'a> {
    pub prompts: &'a PromptSet,
    pub problem: &'a str,
    /// Rendered clues before the step being aggregated.
    pub previous_steps: &'a str,
    pub step: usize,
    pub max_tokens: usize,
    pub reask_limit: u32,
    pub sampling: Sampling,
    pub transform: Option<Arc<LogitBias>>,
}

pub fn render_summary_prompt(candidates: &[Candidate<'_>], ctx: &SummaryContext<'_>) -> String {
    let step = ctx.step.to_string();
    let cands = render_candidates(candidates.iter().map(|c| (c.text, c.sigma)));
    render(
        &ctx.prompts.aggregate,
        &[("problem", ctx.problem), ("steps", ctx.previous_steps), ("candidates", &cands), ("step", &step)],
    )
}

/// A merged clue and the chosen-token logits of the reply that held it.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    pub trace: Vec<f64>,
}

/// Asks the model for one merged clue, re-asking with a format reminder up
/// to `reask_limit` times. Every call is appended to `calls`.
pub fn summarize_paths(
    lm: &dyn LanguageModel,
    candidates: &[Candidate<'_>],
    ctx: &SummaryContext<'_>,
    calls: &mut Vec<LmCall>,
) -> Result<Summary, AggregateError> {
    if candidates.is_empty() {
        return Err(AggregateError::EmptyCandidates);
    }
    let base = render_summary_prompt(candidates, ctx);
    let step = ctx.step.to_string();
    let reminder = render(&ctx.prompts.reask, &[("step", &step)]);
    let mut last_reply = String::new();
    for attempt in 0..=ctx.reask_limit {
        let prompt = if attempt == 0 { base.clone() } else { format!("{base}\n\n{reminder}") };
        let mut req = GenerationRequest::new(prompt.clone(), ctx.max_tokens);
        req.sampling = ctx.sampling.with_seed(ctx.sampling.rng_seed.wrapping_add(attempt as u64));
        req.logit_transform = ctx.transform.clone();
        match lm.generate(&req) {
            Ok(res) => {
                calls.push(LmCall::new(Stage::Aggregate, prompt, res.prompt_tokens, res.completion_tokens));
                if let Some(clue) = extract_clue(&res.text, Some(ctx.step)) {
                    return Ok(Summary { text: normalize_clue(&clue), trace: res.logits() });
                }
                last_reply = res.text;
            }
            Err(LmError::EmptyGeneration) => {
                calls.push(LmCall::new(Stage::Aggregate, prompt.clone(), lm.count_tokens(&prompt)?, 0));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(AggregateError::MalformedLLMReply { attempts: ctx.reask_limit + 1, last_reply })
}

/// Result of one validation rollout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Validation {
    pub score: f64,
    pub calls: Vec<LmCall>,
    pub diagnostic: Option<String>,
}

/// Scores a candidate clue by building and executing provisional code.
/// Failures are reported as score 0 with a diagnostic.
pub trait StepValidator: Sync {
    fn score(&self, candidate: &str) -> Validation;
}

fn scored(v: &dyn StepValidator, candidate: &str) -> Validation {
    let mut out = v.score(candidate);
    out.score = if out.score.is_finite() { out.score.clamp(0.0, 1.0) } else { 0.0 };
    out
}

/// Spends exactly one rollout, then scores.
pub fn validate(v: &dyn StepValidator, candidate: &str, budget: &mut RolloutBudget) -> Result<Validation, AggregateError> {
    budget.try_consume()?;
    Ok(scored(v, candidate))
}

/// Validates both candidates concurrently; spends exactly two rollouts.
pub fn validate_pair(
    v: &dyn StepValidator,
    agg: &str,
    best: &str,
    budget: &mut RolloutBudget,
) -> Result<(Validation, Validation), AggregateError> {
    if budget.remaining() < 2 {
        return Err(AggregateError::BudgetExhausted);
    }
    budget.try_consume()?;
    budget.try_consume()?;
    Ok(std::thread::scope(|s| {
        let ha = s.spawn(|| scored(v, agg));
        let vb = scored(v, best);
        (ha.join().expect("validation thread panicked"), vb)
    }))
}

/// Inputs of one aggregation round. `best` is the top-ranked path and
/// `reserve` rollouts are kept back for final code evaluation.
pub struct Round<'a> {
    pub mode: AggregationMode,
    pub config: &'a AggregateConfig,
    pub candidates: &'a [Candidate<'a>],
    pub best: &'a str,
    pub summary: &'a SummaryContext<'a>,
    pub validator: &'a dyn StepValidator,
    pub reserve: u32,
}

/// Runs one aggregation round; returns the outcome and, when the summary
/// was adopted, its reply trace (`None` means the best path's trace stands).
pub fn aggregate(
    lm: &dyn LanguageModel,
    round: &Round<'_>,
    budget: &mut RolloutBudget,
    calls: &mut Vec<LmCall>,
) -> Result<(AggregationOutcome, Option<Vec<f64>>), AggregateError> {
    let Round { mode, config: cfg, candidates, best, summary: ctx, validator, reserve } = *round;
    if candidates.is_empty() {
        return Err(AggregateError::EmptyCandidates);
    }
    let fallback = |why: String| {
        let mut o = choose_final(best, best, None);
        o.diagnostics.push(why);
        o
    };
    match mode {
        AggregationMode::Best => Ok((choose_final(best, best, None), None)),
        AggregationMode::Summarize => match summarize_paths(lm, candidates, ctx, calls) {
            Ok(s) => Ok((
                AggregationOutcome {
                    adopted_text: s.text,
                    source: OutcomeSource::Summarized,
                    score_agg: None,
                    score_best: None,
                    rollouts_spent: 0,
                    diagnostics: Vec::new(),
                },
                Some(s.trace),
            )),
            Err(e @ AggregateError::MalformedLLMReply { .. }) => {
                Ok((fallback(format!("summary discarded: {e}")), None))
            }
            Err(e) => Err(e),
        },
        AggregationMode::Dynamic => {
            if cfg.max_validation_rollouts_per_step < 2 || !budget.affords(2, reserve) {
                return Ok((
                    fallback(format!("validation skipped: {} rollout(s) left, {reserve} reserved", budget.remaining())),
                    None,
                ));
            }
            let summary = match summarize_paths(lm, candidates, ctx, calls) {
                Ok(s) => s,
                Err(e @ AggregateError::MalformedLLMReply { .. }) => {
                    return Ok((fallback(format!("summary discarded: {e}")), None))
                }
                Err(e) => return Err(e),
            };
            let before = budget.used();
            let (va, vb) = validate_pair(validator, &summary.text, best, budget)?;
            let mut out = choose_final(&summary.text, best, Some((va.score, vb.score)));
            out.rollouts_spent = budget.used() - before;
            for v in [va, vb] {
                calls.extend(v.calls);
                out.diagnostics.extend(v.diagnostic);
            }
            let trace = (out.source == OutcomeSource::Summarized).then_some(summary.trace);
            Ok((out, trace))
        }
    }
}
