//! Versioned prompt templates with named `{slot}` placeholders.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const DEFAULT_PROMPT_SET: &str = "logitcot-v1";

const SLOTS: &[&str] = &["problem", "steps", "code", "feedback", "candidates", "step", "example"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub id: String,
    pub generate_first: String,
    pub generate_next: String,
    pub refine: String,
    pub aggregate: String,
    pub codegen: String,
    pub reask: String,
    /// Sample plan shown to the model while it writes clues.
    pub example: String,
}

impl PromptSet {
    pub fn builtin(id: &str) -> Result<Self, PipelineError> {
        match id {
            DEFAULT_PROMPT_SET => Ok(Self {
                id: id.into(),
                generate_first: include_str!("../../assets/prompts/v1/generate_first.txt").into(),
                generate_next: include_str!("../../assets/prompts/v1/generate_next.txt").into(),
                refine: include_str!("../../assets/prompts/v1/refine.txt").into(),
                aggregate: include_str!("../../assets/prompts/v1/aggregate.txt").into(),
                codegen: include_str!("../../assets/prompts/v1/codegen.txt").into(),
                reask: include_str!("../../assets/prompts/v1/reask.txt").into(),
                example: include_str!("../../assets/prompts/v1/example.txt").into(),
            }),
            other => Err(PipelineError::Config(format!("unknown prompt set {other:?}"))),
        }
    }

    /// Reads a directory laid out like `assets/prompts/v1`; the id is the
    /// caller's choice and is recorded in every run.
    pub fn load_dir(id: &str, dir: &Path) -> Result<Self, PipelineError> {
        let read = |name: &str| {
            let path = dir.join(format!("{name}.txt"));
            std::fs::read_to_string(&path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
        };
        Ok(Self {
            id: id.into(),
            generate_first: read("generate_first")?,
            generate_next: read("generate_next")?,
            refine: read("refine")?,
            aggregate: read("aggregate")?,
            codegen: read("codegen")?,
            reask: read("reask")?,
            example: read("example")?,
        })
    }

    /// SHA-256 over every template, so a run pins the exact wording.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in [
            &self.id,
            &self.generate_first,
            &self.generate_next,
            &self.refine,
            &self.aggregate,
            &self.codegen,
            &self.reask,
            &self.example,
        ] {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Single-pass substitution: slot values are never rescanned, and braces
/// that do not name a known slot are left alone.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[..close];
            if !SLOTS.contains(&name) {
                return None;
            }
            slots.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out.trim_end().to_string()
}

/// One `Step i: clue` line per step.
pub fn render_steps<'a>(clues: impl IntoIterator<Item = &'a str>) -> String {
    let lines: Vec<String> = clues.into_iter().enumerate().map(|(i, c)| format!("Step {}: {c}", i + 1)).collect();
    if lines.is_empty() {
        "(none yet)".into()
    } else {
        lines.join("\n")
    }
}

pub fn render_candidates<'a>(candidates: impl IntoIterator<Item = (&'a str, f64)>) -> String {
    candidates
        .into_iter()
        .enumerate()
        .map(|(i, (text, sigma))| format!("Candidate {} (sigma distance {sigma:.4}): {text}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Opens the JSON answer so that branching starts on the first clue token.
pub fn clue_prefill(step: usize) -> String {
    format!("\n[{{\"Clue of Step {step}\": \"")
}
