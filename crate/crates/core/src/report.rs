//! Per-problem records, batch metrics, and token accounting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::AggregationOutcome;
use crate::executor::{GeneratedProgram, Verdict};
use crate::pipeline::ReasoningChain;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("efficiency is undefined at a zero pass rate")]
    ZeroPassRate,
    #[error("stored {field} = {stored} but records give {recomputed}")]
    MetricMismatch { field: String, stored: String, recomputed: String },
    #[error("invalid record {problem_id}: {reason}")]
    InvalidRecord { problem_id: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Probe,
    Refine,
    Aggregate,
    Feedback,
    Validate,
    Codegen,
}

/// One backend call and what it cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmCall {
    pub stage: Stage,
    pub prompt: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl LmCall {
    pub fn new(stage: Stage, prompt: String, prompt_tokens: usize, completion_tokens: usize) -> Self {
        Self { stage, prompt, prompt_tokens: prompt_tokens as u64, completion_tokens: completion_tokens as u64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Every private test passed.
    Passed,
    /// The pipeline finished but some private test failed.
    Failed,
    /// A stage error stopped the pipeline; scored as 0.
    Error,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Passed => "passed",
            Self::Failed => "failed",
            Self::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAggregation {
    pub step: usize,
    pub outcome: AggregationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_id: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub pass_fraction_private: f64,
    pub passed_all: bool,
    pub pass_fraction_public: Option<f64>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub rollouts_used: u32,
    pub rollout_budget: u32,
    pub chain: ReasoningChain,
    pub program: Option<GeneratedProgram>,
    pub aggregations: Vec<StepAggregation>,
    pub private_verdicts: Vec<Verdict>,
    pub prompts_log: Vec<LmCall>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl RunRecord {
    pub fn check(&self) -> Result<(), ReportError> {
        let bad = |reason: String| Err(ReportError::InvalidRecord { problem_id: self.problem_id.clone(), reason });
        if !(0.0..=1.0).contains(&self.pass_fraction_private) {
            return bad(format!("pass fraction {} outside [0, 1]", self.pass_fraction_private));
        }
        if self.passed_all && self.pass_fraction_private != 1.0 {
            return bad("passed_all with a pass fraction below 1".into());
        }
        if self.rollouts_used > self.rollout_budget {
            return bad(format!("{} rollouts used of {}", self.rollouts_used, self.rollout_budget));
        }
        let input: u64 = self.prompts_log.iter().map(|c| c.prompt_tokens).sum();
        let output: u64 = self.prompts_log.iter().map(|c| c.completion_tokens).sum();
        if (input, output) != (self.input_tokens, self.output_tokens) {
            return bad(format!(
                "token totals ({}, {}) differ from logged calls ({input}, {output})",
                self.input_tokens, self.output_tokens
            ));
        }
        Ok(())
    }
}

/// `(pass_rate, pass_at_1)` over `(fraction, passed_all)` pairs.
pub fn pass_metrics_from<I>(items: I) -> Result<(f64, f64), ReportError>
where
    I: IntoIterator<Item = (f64, bool)>,
{
    let (mut n, mut sum, mut all) = (0usize, 0.0, 0usize);
    for (fraction, passed_all) in items {
        n += 1;
        sum += fraction;
        all += passed_all as usize;
    }
    if n == 0 {
        return Err(ReportError::EmptyBatch);
    }
    Ok((sum / n as f64, all as f64 / n as f64))
}

pub fn pass_metrics(records: &[RunRecord]) -> Result<(f64, f64), ReportError> {
    pass_metrics_from(records.iter().map(|r| (r.pass_fraction_private, r.passed_all)))
}

/// Weighted token cost per percentage point of pass rate; lower is better.
/// Tokens are in thousands and `pass_rate` is a fraction in (0, 1].
pub fn efficiency(input_k: f64, output_k: f64, pass_rate: f64) -> Result<f64, ReportError> {
    if pass_rate <= 0.0 || !pass_rate.is_finite() {
        return Err(ReportError::ZeroPassRate);
    }
    Ok((input_k + 2.0 * output_k) / (pass_rate * 100.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Tsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown report format {other:?} (expected json or tsv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub pass_rate: f64,
    pub pass_at_1: f64,
    pub total_input_k: f64,
    pub total_output_k: f64,
    pub efficiency: Option<f64>,
    pub config_hash: String,
    pub prompt_set: String,
    pub prompt_digest: String,
    /// Effective configuration the batch ran with.
    pub config: serde_json::Value,
    pub records: Vec<RunRecord>,
}

/// Hex SHA-256 of the configuration's canonical JSON (keys sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

struct Totals {
    pass_rate: f64,
    pass_at_1: f64,
    input_k: f64,
    output_k: f64,
    efficiency: Option<f64>,
}

fn totals(records: &[RunRecord]) -> Result<Totals, ReportError> {
    let (pass_rate, pass_at_1) = pass_metrics(records)?;
    let input_k = records.iter().map(|r| r.input_tokens).sum::<u64>() as f64 / 1000.0;
    let output_k = records.iter().map(|r| r.output_tokens).sum::<u64>() as f64 / 1000.0;
    let efficiency = efficiency(input_k, output_k, pass_rate).ok();
    Ok(Totals { pass_rate, pass_at_1, input_k, output_k, efficiency })
}

impl BatchReport {
    pub fn new(
        records: Vec<RunRecord>,
        config: serde_json::Value,
        prompt_set: &str,
        prompt_digest: &str,
    ) -> Result<Self, ReportError> {
        for r in &records {
            r.check()?;
        }
        let t = totals(&records)?;
        Ok(Self {
            pass_rate: t.pass_rate,
            pass_at_1: t.pass_at_1,
            total_input_k: t.input_k,
            total_output_k: t.output_k,
            efficiency: t.efficiency,
            config_hash: config_hash(&config),
            prompt_set: prompt_set.into(),
            prompt_digest: prompt_digest.into(),
            config,
            records,
        })
    }

    /// Recomputes every aggregate from the records and compares.
    pub fn verify(&self) -> Result<(), ReportError> {
        for r in &self.records {
            r.check()?;
        }
        let t = totals(&self.records)?;
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        let mismatch = |field: &str, stored: String, recomputed: String| {
            Err(ReportError::MetricMismatch { field: field.into(), stored, recomputed })
        };
        for (field, stored, fresh) in [
            ("pass_rate", self.pass_rate, t.pass_rate),
            ("pass_at_1", self.pass_at_1, t.pass_at_1),
            ("total_input_k", self.total_input_k, t.input_k),
            ("total_output_k", self.total_output_k, t.output_k),
        ] {
            if !same(stored, fresh) {
                return mismatch(field, stored.to_string(), fresh.to_string());
            }
        }
        match (self.efficiency, t.efficiency) {
            (Some(a), Some(b)) if same(a, b) => {}
            (None, None) => {}
            (a, b) => return mismatch("efficiency", format!("{a:?}"), format!("{b:?}")),
        }
        let hash = config_hash(&self.config);
        if hash != self.config_hash {
            return mismatch("config_hash", self.config_hash.clone(), hash);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("problem_id\tstatus\tpass_fraction\tpassed_all\tinput_tokens\toutput_tokens\trollouts\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{}\t{}\t{}\t{}",
                r.problem_id.replace(['\t', '\n'], " "),
                r.status.as_str(),
                r.pass_fraction_private,
                r.passed_all,
                r.input_tokens,
                r.output_tokens,
                r.rollouts_used
            );
        }
        let passed = self.records.iter().filter(|r| r.passed_all).count();
        let _ = writeln!(
            out,
            "TOTAL\tpass@1={:.4}\t{:.4}\t{}/{}\t{}\t{}\t{}",
            self.pass_at_1,
            self.pass_rate,
            passed,
            self.records.len(),
            self.records.iter().map(|r| r.input_tokens).sum::<u64>(),
            self.records.iter().map(|r| r.output_tokens).sum::<u64>(),
            self.records.iter().map(|r| r.rollouts_used as u64).sum::<u64>()
        );
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Tsv => self.to_tsv(),
        }
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<(), ReportError> {
        std::fs::write(path, self.render(format)).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Short human summary.
    pub fn summary(&self) -> String {
        let eff = self.efficiency.map(|e| format!("{e:.1}")).unwrap_or_else(|| "n/a".into());
        format!(
            "problems {}  pass rate {:.4}  pass@1 {:.4}  input {:.3}k  output {:.3}k  efficiency {eff}  config {}  prompts {}",
            self.records.len(),
            self.pass_rate,
            self.pass_at_1,
            self.total_input_k,
            self.total_output_k,
            &self.config_hash[..12.min(self.config_hash.len())],
            self.prompt_set
        )
    }
}

/// Parses an incremental JSONL record log, one record per line. A torn last
/// line from an interrupted run is skipped.
pub fn parse_record_log(text: &str) -> Result<Vec<RunRecord>, ReportError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(ReportError::Parse(format!("record {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, fraction: f64, passed_all: bool, tokens: (u64, u64)) -> RunRecord {
        RunRecord {
            problem_id: id.into(),
            status: if passed_all { RunStatus::Passed } else { RunStatus::Failed },
            error: None,
            pass_fraction_private: fraction,
            passed_all,
            pass_fraction_public: None,
            input_tokens: tokens.0,
            output_tokens: tokens.1,
            rollouts_used: 1,
            rollout_budget: 20,
            chain: ReasoningChain::default(),
            program: None,
            aggregations: Vec::new(),
            private_verdicts: Vec::new(),
            prompts_log: vec![LmCall { stage: Stage::Codegen, prompt: "p".into(), prompt_tokens: tokens.0, completion_tokens: tokens.1 }],
            diagnostics: Vec::new(),
        }
    }

    #[test]
    fn pass_metric_examples() {
        assert_eq!(pass_metrics_from([(1.0, true), (0.5, false)]).unwrap(), (0.75, 0.5));
        assert_eq!(pass_metrics_from([(1.0, true), (1.0, true)]).unwrap(), (1.0, 1.0));
        assert!(matches!(pass_metrics_from([]), Err(ReportError::EmptyBatch)));
    }

    #[test]
    fn efficiency_examples() {
        assert!((efficiency(13072.0, 1922.0, 0.5995).unwrap() - 282.2).abs() < 0.05);
        assert!((efficiency(12835.0, 1140.0, 0.6221).unwrap() - 243.0).abs() < 0.05);
        assert_eq!(efficiency(500.0, 0.0, 1.0).unwrap(), 5.0);
        assert!(matches!(efficiency(1.0, 1.0, 0.0), Err(ReportError::ZeroPassRate)));
    }

    fn batch() -> BatchReport {
        let records = vec![record("a", 1.0, true, (1200, 300)), record("b", 0.5, false, (800, 100))];
        BatchReport::new(records, serde_json::json!({"k": 3, "mode": "dynamic"}), "set", "digest").unwrap()
    }

    #[test]
    fn batch_totals_are_sums() {
        let b = batch();
        assert_eq!((b.total_input_k, b.total_output_k), (2.0, 0.4));
        assert_eq!((b.pass_rate, b.pass_at_1), (0.75, 0.5));
        assert!((b.efficiency.unwrap() - 2.8 / 75.0).abs() < 1e-12);
        b.verify().unwrap();
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let b = batch();
        let back = BatchReport::from_json(&b.to_json()).unwrap();
        assert_eq!(back, b);
        back.verify().unwrap();
    }

    #[test]
    fn tampering_is_detected() {
        let mut b = batch();
        b.records[1].pass_fraction_private = 0.75;
        assert!(matches!(b.verify(), Err(ReportError::MetricMismatch { .. })));
        let mut b = batch();
        b.config = serde_json::json!({"k": 4});
        assert!(matches!(b.verify(), Err(ReportError::MetricMismatch { ref field, .. }) if field == "config_hash"));
        let mut b = batch();
        b.records[0].input_tokens += 1;
        assert!(matches!(b.verify(), Err(ReportError::InvalidRecord { .. })));
    }

    #[test]
    fn tsv_has_a_row_per_record_plus_total() {
        let tsv = batch().to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "problem_id\tstatus\tpass_fraction\tpassed_all\tinput_tokens\toutput_tokens\trollouts");
        assert_eq!(lines[2], "b\tfailed\t0.5000\tfalse\t800\t100\t1");
        assert!(lines[3].starts_with("TOTAL\t"));
    }

    #[test]
    fn zero_pass_rate_leaves_efficiency_empty() {
        let b = BatchReport::new(vec![record("a", 0.0, false, (10, 10))], serde_json::json!({}), "s", "d").unwrap();
        assert_eq!(b.efficiency, None);
        b.verify().unwrap();
    }

    #[test]
    fn record_log_tolerates_a_torn_tail() {
        let line = serde_json::to_string(&record("a", 1.0, true, (1, 1))).unwrap();
        let text = format!("{line}\n{}", &line[..line.len() / 2]);
        assert_eq!(parse_record_log(&text).unwrap().len(), 1);
        let broken = format!("{}\n{line}\n", &line[..10]);
        assert!(parse_record_log(&broken).is_err());
    }
}
