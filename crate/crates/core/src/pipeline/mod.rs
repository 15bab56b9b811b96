//! The solve loop: write clues one step at a time, refine each new step by
//! branching and aggregation, then generate and score the final program.

pub mod parse;
pub mod prompts;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    aggregate, AggregateConfig, AggregateError, AggregationMode, Candidate, Round, RolloutBudget, StepValidator,
    SummaryContext, Validation,
};
use crate::executor::{
    fnv1a, format_feedback, Evaluation, ExecError, GeneratedProgram, Limits, Problem, Sandbox, TestCase,
};
use crate::lm::{GenerationRequest, GenerationResult, LanguageModel, LmError, LogitBias, Sampling};
use crate::lrbps::{generate_ranked_paths, Fanout, LrbpsError, PathParams};
use crate::report::{LmCall, RunRecord, RunStatus, Stage, StepAggregation};

use parse::{extract_clue, extract_code, is_done, normalize_clue, path_clue};
use prompts::{clue_prefill, render, render_steps, PromptSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(#[from] LmError),
    #[error("path ranking: {0}")]
    Ranking(#[from] LrbpsError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregateError),
    #[error("executor: {0}")]
    Executor(#[from] ExecError),
    #[error("reply holds no extractable code")]
    UnparseableCode,
    #[error("model declared the plan complete before writing any step")]
    PrematureDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpdStage {
    Generation,
    Refinement,
    Codegen,
}

impl std::str::FromStr for LpdStage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generation" => Ok(Self::Generation),
            "refinement" => Ok(Self::Refinement),
            "codegen" => Ok(Self::Codegen),
            other => Err(format!("unknown LPD stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThoughtStep {
    /// 1-based.
    pub index: usize,
    pub text: String,
    pub trace: Vec<f64>,
    pub refined: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub steps: Vec<ThoughtStep>,
    pub complete: bool,
}

impl ReasoningChain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clues(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub max_steps: usize,
    pub refinement_rounds_per_step: usize,
    pub rollout_budget: u32,
    /// Rollouts held back for the final public-test evaluation.
    pub final_reserve: u32,
    pub lpd_stages: BTreeSet<LpdStage>,
    pub aggregate: AggregateConfig,
    pub sampling: Sampling,
    pub prompt_set: String,
    pub max_tokens_step: usize,
    pub max_tokens_path: usize,
    pub max_tokens_code: usize,
    pub feedback_cap_bytes: usize,
    pub fanout: Fanout,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 3,
            max_steps: 8,
            refinement_rounds_per_step: 1,
            rollout_budget: 20,
            final_reserve: 1,
            lpd_stages: BTreeSet::from([LpdStage::Generation]),
            aggregate: AggregateConfig::default(),
            sampling: Sampling::greedy(),
            prompt_set: prompts::DEFAULT_PROMPT_SET.into(),
            max_tokens_step: 256,
            max_tokens_path: 256,
            max_tokens_code: 1024,
            feedback_cap_bytes: 512,
            fanout: Fanout::Serial,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.rollout_budget == 0 {
            return bad("rollout_budget must be at least 1");
        }
        if self.final_reserve > self.rollout_budget {
            return bad("final_reserve exceeds rollout_budget");
        }
        if self.max_tokens_step == 0 || self.max_tokens_path == 0 || self.max_tokens_code == 0 {
            return bad("token limits must be positive");
        }
        Ok(())
    }
}

/// Shared, read-only context for solving problems. Cheap to share across
/// worker threads.
pub struct Engine<'a> {
    pub lm: &'a dyn LanguageModel,
    pub sandbox: &'a Sandbox,
    pub limits: Limits,
    pub prompts: &'a PromptSet,
    pub config: &'a PipelineConfig,
    /// Compiled preference bias; applied only in `config.lpd_stages`.
    pub lpd: Option<Arc<LogitBias>>,
}

impl Engine<'_> {
    /// Solves one problem. Stage errors are recorded, never raised.
    pub fn solve(&self, problem: &Problem) -> RunRecord {
        Run::new(self, problem).finish()
    }

    /// Solves a batch on `workers` threads. `on_record` sees records in
    /// corpus order, each as soon as it and every earlier one are done.
    pub fn solve_batch(&self, problems: &[Problem], workers: usize, mut on_record: impl FnMut(&RunRecord)) -> Vec<RunRecord> {
        let workers = workers.clamp(1, problems.len().max(1));
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<RunRecord>> = vec![None; problems.len()];
        std::thread::scope(|s| {
            let (tx, rx) = mpsc::channel();
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                s.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(p) = problems.get(i) else { break };
                    if tx.send((i, self.solve(p))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut emitted = 0;
            for (i, record) in rx {
                slots[i] = Some(record);
                while let Some(Some(r)) = slots.get(emitted) {
                    on_record(r);
                    emitted += 1;
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every problem yields a record")).collect()
    }
}

/// Mutable state of one problem's solve.
struct Run<'e, 'p> {
    engine: &'e Engine<'e>,
    problem: &'p Problem,
    budget: RolloutBudget,
    calls: Vec<LmCall>,
    aggregations: Vec<StepAggregation>,
    diagnostics: Vec<String>,
    draws: u64,
    seed_base: u64,
}

impl<'e, 'p> Run<'e, 'p> {
    fn new(engine: &'e Engine<'e>, problem: &'p Problem) -> Self {
        Self {
            engine,
            problem,
            budget: RolloutBudget::new(engine.config.rollout_budget),
            calls: Vec::new(),
            aggregations: Vec::new(),
            diagnostics: Vec::new(),
            draws: 0,
            seed_base: engine.config.sampling.rng_seed ^ fnv1a(problem.id.as_bytes()),
        }
    }

    fn cfg(&self) -> &'e PipelineConfig {
        self.engine.config
    }

    fn reserve(&self) -> u32 {
        self.cfg().final_reserve
    }

    fn transform(&self, stage: LpdStage) -> Option<Arc<LogitBias>> {
        self.cfg().lpd_stages.contains(&stage).then(|| self.engine.lpd.clone()).flatten()
    }

    /// A fresh sampling seed per call keeps temperature runs reproducible.
    fn sampling(&mut self) -> Sampling {
        self.draws += 1;
        self.cfg().sampling.with_seed(self.seed_base.wrapping_add(self.draws))
    }

    fn generate(
        &mut self,
        stage: Stage,
        prompt: String,
        max_tokens: usize,
        transform: Option<Arc<LogitBias>>,
    ) -> Result<GenerationResult, PipelineError> {
        let mut req = GenerationRequest::new(prompt, max_tokens);
        req.sampling = self.sampling();
        req.logit_transform = transform;
        let lm = self.engine.lm;
        match lm.generate(&req) {
            Ok(res) => {
                self.calls.push(LmCall::new(stage, req.context, res.prompt_tokens, res.completion_tokens));
                Ok(res)
            }
            Err(e) => {
                if let Ok(n) = lm.count_tokens(&req.context) {
                    self.calls.push(LmCall::new(stage, req.context, n, 0));
                }
                Err(e.into())
            }
        }
    }

    fn generate_thought_step(&mut self, chain: &ReasoningChain) -> Result<Option<ThoughtStep>, PipelineError> {
        let step = chain.len() + 1;
        let step_s = step.to_string();
        let prompts = self.engine.prompts;
        let problem = self.problem.description.as_str();
        let prompt = if chain.is_empty() {
            render(&prompts.generate_first, &[("problem", problem), ("example", &prompts.example), ("step", &step_s)])
        } else {
            let steps = render_steps(chain.clues());
            render(
                &prompts.generate_next,
                &[("problem", problem), ("example", &prompts.example), ("steps", &steps), ("step", &step_s)],
            )
        };
        let transform = self.transform(LpdStage::Generation);
        let max_tokens = self.cfg().max_tokens_step;
        let mut last_err = None;
        for _ in 0..2 {
            match self.generate(Stage::Generate, prompt.clone(), max_tokens, transform.clone()) {
                Ok(res) => {
                    if is_done(&res.text) {
                        return if chain.is_empty() { Err(PipelineError::PrematureDone) } else { Ok(None) };
                    }
                    let text = normalize_clue(&extract_clue(&res.text, Some(step)).unwrap_or(res.text.clone()));
                    if !text.is_empty() {
                        return Ok(Some(ThoughtStep { index: step, text, trace: res.logits(), refined: false }));
                    }
                    last_err = Some(PipelineError::Backend(LmError::EmptyGeneration));
                }
                Err(PipelineError::Backend(LmError::EmptyGeneration)) => {
                    last_err = Some(PipelineError::Backend(LmError::EmptyGeneration));
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("loop ran"))
    }

    fn refine_step(&mut self, chain: &mut ReasoningChain) -> Result<(), PipelineError> {
        let Some(last) = chain.steps.last() else {
            return Ok(());
        };
        let step = last.index;
        let step_s = step.to_string();
        let clues: Vec<String> = chain.steps.iter().map(|s| s.text.clone()).collect();
        let has_public = !self.problem.public_tests.is_empty();

        let (code, feedback) = if has_public && self.budget.affords(1, self.reserve()) {
            self.budget.try_consume()?;
            let (program, outcome) = rollout_at(self.engine, self.problem, &clues, self.sampling(), Stage::Feedback);
            self.calls.extend(outcome.calls);
            if let Some(d) = outcome.diagnostic {
                self.diagnostics.push(format!("step {step} feedback: {d}"));
            }
            (
                program.map(|p| p.source_text).unwrap_or_else(|| "(no code could be extracted)".into()),
                outcome.feedback,
            )
        } else {
            ("(no code yet)".to_string(), "No feedback available.".to_string())
        };

        let prompts = self.engine.prompts;
        let steps = render_steps(clues.iter().map(String::as_str));
        let prompt = render(
            &prompts.refine,
            &[
                ("problem", &self.problem.description),
                ("steps", &steps),
                ("code", &code),
                ("feedback", &feedback),
                ("step", &step_s),
            ],
        );
        let prefill = clue_prefill(step);
        let context = format!("{prompt}{prefill}");
        let transform = self.transform(LpdStage::Refinement);
        let params = PathParams {
            k: self.cfg().k,
            max_tokens: self.cfg().max_tokens_path,
            stop_sequences: vec!["\"}]".into()],
            sampling: self.sampling(),
            transform: transform.clone(),
            fanout: self.cfg().fanout,
        };
        let ranked = match generate_ranked_paths(self.engine.lm, &context, &params) {
            Ok(r) => r,
            Err(LrbpsError::AllPathsEmpty) => {
                self.diagnostics.push(format!("step {step}: every branch was empty; step kept unrefined"));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        self.calls.push(LmCall::new(Stage::Probe, context.clone(), ranked.probe_prompt_tokens, 0));
        for p in &ranked.paths {
            self.calls.push(LmCall::new(Stage::Refine, context.clone(), p.result.prompt_tokens, p.result.completion_tokens));
        }
        if !ranked.empty_seeds.is_empty() {
            self.diagnostics.push(format!("step {step}: {} empty branch(es)", ranked.empty_seeds.len()));
        }

        let mut parsed: Vec<(String, f64, Vec<f64>)> = Vec::new();
        for p in &ranked.paths {
            match path_clue(&prefill, &p.result.text, step).map(|c| normalize_clue(&c)).filter(|c| !c.is_empty()) {
                Some(c) => parsed.push((c, p.score.sigma_distance, p.result.logits())),
                None => self.diagnostics.push(format!("step {step}: branch seeded by token {} held no clue", p.seed_token.0)),
            }
        }
        if parsed.is_empty() {
            self.diagnostics.push(format!("step {step}: no branch produced a clue; step kept unrefined"));
            return Ok(());
        }

        let mut mode = self.cfg().aggregate.mode;
        if mode == AggregationMode::Dynamic && !has_public {
            self.diagnostics.push(format!("step {step}: no public tests, validation replaced by best path"));
            mode = AggregationMode::Best;
        }
        let candidates: Vec<Candidate<'_>> = parsed.iter().map(|(t, s, _)| Candidate { text: t, sigma: *s }).collect();
        let previous = render_steps(clues[..clues.len() - 1].iter().map(String::as_str));
        let summary = SummaryContext {
            prompts,
            problem: &self.problem.description,
            previous_steps: &previous,
            step,
            max_tokens: self.cfg().aggregate.max_tokens,
            reask_limit: self.cfg().aggregate.reask_limit,
            sampling: self.sampling(),
            transform,
        };
        let validator = ChainValidator {
            engine: self.engine,
            problem: self.problem,
            prior: &clues[..clues.len() - 1],
            sampling: self.sampling(),
        };
        let round = Round {
            mode,
            config: &self.cfg().aggregate,
            candidates: &candidates,
            best: &parsed[0].0,
            summary: &summary,
            validator: &validator,
            reserve: self.reserve(),
        };
        let (outcome, summary_trace) = aggregate(self.engine.lm, &round, &mut self.budget, &mut self.calls)?;

        let last = chain.steps.last_mut().expect("checked above");
        last.text = outcome.adopted_text.clone();
        last.trace = summary_trace.unwrap_or_else(|| parsed[0].2.clone());
        last.refined = true;
        self.aggregations.push(StepAggregation { step, outcome });
        Ok(())
    }

    fn build_chain(&mut self, chain: &mut ReasoningChain) -> Result<GeneratedProgram, PipelineError> {
        while !chain.complete {
            match self.generate_thought_step(chain)? {
                None => {
                    chain.complete = true;
                    break;
                }
                Some(step) => chain.steps.push(step),
            }
            for _ in 0..self.cfg().refinement_rounds_per_step {
                self.refine_step(chain)?;
            }
            if chain.len() >= self.cfg().max_steps {
                chain.complete = true;
            }
        }
        let clues: Vec<String> = chain.steps.iter().map(|s| s.text.clone()).collect();
        let sampling = self.sampling();
        let (program, calls) = generate_code(self.engine, self.problem, &clues, Stage::Codegen, sampling);
        self.calls.extend(calls);
        program
    }

    fn finish(mut self) -> RunRecord {
        let mut chain = ReasoningChain::default();
        let built = self.build_chain(&mut chain);
        let mut error = None;
        let mut program = None;
        let mut public_fraction = None;
        let mut private = None;

        match built {
            Ok(p) => {
                if !self.problem.public_tests.is_empty() {
                    match self.budget.try_consume() {
                        Ok(()) => match self.evaluate(&p, &self.problem.public_tests) {
                            Ok(e) => public_fraction = Some(e.fraction),
                            Err(e) => error = Some(e.to_string()),
                        },
                        Err(_) => self.diagnostics.push("no rollout left for the final public evaluation".into()),
                    }
                }
                if error.is_none() {
                    match self.evaluate(&p, &self.problem.private_tests) {
                        Ok(e) => private = Some(e),
                        Err(e) => error = Some(e.to_string()),
                    }
                }
                program = Some(p);
            }
            Err(e) => error = Some(e.to_string()),
        }

        let (fraction, passed_all, verdicts) = match &private {
            Some(e) if error.is_none() => (e.fraction, e.passed_all(), e.verdicts()),
            _ => (0.0, false, Vec::new()),
        };
        let status = match (&error, passed_all) {
            (Some(_), _) => RunStatus::Error,
            (None, true) => RunStatus::Passed,
            (None, false) => RunStatus::Failed,
        };
        let input_tokens = self.calls.iter().map(|c| c.prompt_tokens).sum();
        let output_tokens = self.calls.iter().map(|c| c.completion_tokens).sum();
        RunRecord {
            problem_id: self.problem.id.clone(),
            status,
            error,
            pass_fraction_private: fraction,
            passed_all,
            pass_fraction_public: public_fraction,
            input_tokens,
            output_tokens,
            rollouts_used: self.budget.used(),
            rollout_budget: self.budget.total(),
            chain,
            program,
            aggregations: self.aggregations,
            private_verdicts: verdicts,
            prompts_log: self.calls,
            diagnostics: self.diagnostics,
        }
    }

    fn evaluate(&self, program: &GeneratedProgram, tests: &[TestCase]) -> Result<Evaluation, ExecError> {
        self.engine.sandbox.evaluate(program, tests, &self.engine.limits)
    }
}

/// Renders the code prompt for `clues` and extracts the program.
pub fn generate_code(
    engine: &Engine<'_>,
    problem: &Problem,
    clues: &[String],
    stage: Stage,
    sampling: Sampling,
) -> (Result<GeneratedProgram, PipelineError>, Vec<LmCall>) {
    let steps = render_steps(clues.iter().map(String::as_str));
    let prompt = render(&engine.prompts.codegen, &[("problem", &problem.description), ("steps", &steps)]);
    let mut req = GenerationRequest::new(prompt, engine.config.max_tokens_code);
    req.sampling = sampling;
    if engine.config.lpd_stages.contains(&LpdStage::Codegen) {
        req.logit_transform = engine.lpd.clone();
    }
    let mut calls = Vec::new();
    let res = match engine.lm.generate(&req) {
        Ok(r) => r,
        Err(e) => {
            if let Ok(n) = engine.lm.count_tokens(&req.context) {
                calls.push(LmCall::new(stage, req.context, n, 0));
            }
            return (Err(e.into()), calls);
        }
    };
    calls.push(LmCall::new(stage, req.context, res.prompt_tokens, res.completion_tokens));
    let program = extract_code(&res.text)
        .map(|src| GeneratedProgram { source_text: src, language_tag: engine.sandbox.config().language_tag.clone() })
        .ok_or(PipelineError::UnparseableCode);
    (program, calls)
}

struct RolloutOutcome {
    fraction: f64,
    feedback: String,
    calls: Vec<LmCall>,
    diagnostic: Option<String>,
}

/// Generates provisional code for `clues` and runs it on the public tests.
/// The caller has already paid the rollout.
fn rollout_at(
    engine: &Engine<'_>,
    problem: &Problem,
    clues: &[String],
    sampling: Sampling,
    stage: Stage,
) -> (Option<GeneratedProgram>, RolloutOutcome) {
    let (program, calls) = generate_code(engine, problem, clues, stage, sampling);
    let program = match program {
        Ok(p) => p,
        Err(e) => {
            let msg = format!("code generation failed: {e}");
            return (
                None,
                RolloutOutcome { fraction: 0.0, feedback: format!("No program to run ({msg})."), calls, diagnostic: Some(msg) },
            );
        }
    };
    let tests = &problem.public_tests;
    match engine.sandbox.evaluate(&program, tests, &engine.limits) {
        Ok(e) => {
            let feedback = format_feedback(&e.results, tests, engine.config.feedback_cap_bytes);
            (Some(program), RolloutOutcome { fraction: e.fraction, feedback, calls, diagnostic: None })
        }
        Err(e) => {
            let msg = format!("execution failed: {e}");
            (
                Some(program),
                RolloutOutcome { fraction: 0.0, feedback: "The program could not be run.".into(), calls, diagnostic: Some(msg) },
            )
        }
    }
}

/// Scores a candidate clue as the chain's last step.
struct ChainValidator<'a> {
    engine: &'a Engine<'a>,
    problem: &'a Problem,
    prior: &'a [String],
    sampling: Sampling,
}

impl StepValidator for ChainValidator<'_> {
    fn score(&self, candidate: &str) -> Validation {
        let mut clues = self.prior.to_vec();
        clues.push(candidate.to_string());
        let (_, o) = rollout_at(self.engine, self.problem, &clues, self.sampling, Stage::Validate);
        Validation { score: o.fraction, calls: o.calls, diagnostic: o.diagnostic.map(|d| format!("validation: {d}")) }
    }
}
