//! `logitcot` command-line front end.
//!
//! Exit codes: 0 success, 1 some problem ended in an error (or a report
//! failed verification), 2 configuration error, 3 backend or sandbox
//! bootstrap failure.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use logitcot::aggregate::AggregationMode;
use logitcot::config::{Ablation, BackendKind, ConfigError, EngineConfig, LpdMode};
use logitcot::executor::{load_problems, parse_unsplit_problems, split_tests, Sandbox};
use logitcot::lpd::{build_preference_table, builtin_static_table, load_static_table, LabeledCotCorpus, PreferenceTable, RatioParams};
use logitcot::pipeline::Engine;
use logitcot::report::{parse_record_log, BatchReport, ReportError, ReportFormat, RunStatus};

#[derive(Parser)]
#[command(name = "logitcot", version, about = "Logit-guided chain-of-thought search for code generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a word preference table from a labeled reasoning corpus.
    BuildPrefs(BuildPrefs),
    /// Solve every problem in a corpus and write records plus a report.
    Solve(Solve),
    /// Recompute and check the metrics of a report or record log.
    Report(Report),
    /// Split each problem's tests into public and private halves.
    SplitCorpus(SplitCorpus),
}

#[derive(Args)]
struct BuildPrefs {
    /// Labeled corpus (JSONL of {"steps": [...], "accuracy": x}); ratio mode only.
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "ratio")]
    mode: LpdMode,
    /// Word-list file for fixed mode; defaults to the shipped lists.
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = RatioParams::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = RatioParams::default().clamp)]
    clamp: f64,
    #[arg(long, default_value_t = RatioParams::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = RatioParams::default().min_count)]
    min_count: u64,
    #[arg(long, default_value_t = RatioParams::default().floor)]
    floor: f64,
}

#[derive(Args)]
struct Solve {
    /// Problems (JSONL with public and private tests).
    problems: PathBuf,
    /// TOML configuration; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory for records.jsonl and report.json.
    #[arg(long, short, default_value = "logitcot-out")]
    out: PathBuf,
    /// mock or http.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Script for the mock backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Preset: base, decoding, softdecoding, decoding-best, decoding-agg, full.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Seed tokens per branch point; ignored by width-1 presets.
    #[arg(long)]
    k: Option<usize>,
    /// Maximum reasoning steps per problem.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Rollouts per problem, final code generation included.
    #[arg(long)]
    rollout_budget: Option<u32>,
    /// best, summarize or dynamic.
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    /// Preference decoding: off, ratio or fixed.
    #[arg(long)]
    lpd: Option<LpdMode>,
    /// Preference table written by build-prefs.
    #[arg(long)]
    lpd_table: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Problems solved in parallel; records are identical for any value.
    #[arg(long)]
    workers: Option<usize>,
    /// json, or tsv alongside report.json.
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Args)]
struct Report {
    /// A report.json written by `solve`, or a records.jsonl log.
    path: PathBuf,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Args)]
struct SplitCorpus {
    /// Problems with a flat `tests` list.
    input: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome = Result<ExitCode, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn bootstrap_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: e.into() }
}

fn run_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: e.into() }
}

fn from_config(e: ConfigError) -> Failure {
    match e {
        ConfigError::Bootstrap(_) => bootstrap_err(e),
        _ => config_err(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildPrefs(a) => build_prefs(a),
        Command::Solve(a) => solve(a),
        Command::Report(a) => report(a),
        Command::SplitCorpus(a) => split_corpus(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn build_prefs(a: BuildPrefs) -> Outcome {
    let table = match a.mode {
        LpdMode::Ratio => {
            let path = a.corpus.as_deref().ok_or_else(|| config_err(anyhow!("ratio mode needs a corpus path")))?;
            if !path.exists() {
                return Err(config_err(anyhow!("{}: no such file", path.display())));
            }
            let corpus = LabeledCotCorpus::load(path).map_err(config_err)?;
            let params = RatioParams { alpha: a.alpha, clamp: a.clamp, epsilon: a.epsilon, min_count: a.min_count, floor: a.floor };
            build_preference_table(&corpus, &params).map_err(run_err)?
        }
        LpdMode::Fixed => match &a.words {
            Some(p) => load_static_table(p, a.alpha).map_err(config_err)?,
            None => builtin_static_table(a.alpha),
        },
        LpdMode::Off => return Err(config_err(anyhow!("build-prefs needs --mode ratio or fixed"))),
    };
    table.save(&a.out).map_err(run_err)?;
    print_top_words(&table);
    println!("wrote {} entries to {}", table.entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn print_top_words(table: &PreferenceTable) {
    let mut pos: Vec<_> = table.entries.iter().filter(|e| e.delta > 0.0).collect();
    let mut neg: Vec<_> = table.entries.iter().filter(|e| e.delta < 0.0).collect();
    pos.sort_by(|x, y| y.delta.total_cmp(&x.delta).then_with(|| x.word.cmp(&y.word)));
    neg.sort_by(|x, y| x.delta.total_cmp(&y.delta).then_with(|| x.word.cmp(&y.word)));
    for (label, list) in [("positive", pos), ("negative", neg)] {
        println!("top {label}:");
        for e in list.iter().take(20) {
            println!("  {:+.4}\t{}", e.delta, e.word);
        }
    }
}

fn effective_config(a: &Solve) -> Result<EngineConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => EngineConfig::load(p).map_err(from_config)?,
        None => EngineConfig::default(),
    };
    if let Some(ab) = a.ablation {
        let width = a.k.unwrap_or(cfg.lrbps.k);
        ab.apply(&mut cfg, width);
    }
    if let Some(b) = a.backend {
        cfg.backend.kind = b;
    }
    if let Some(s) = &a.script {
        cfg.backend.script = Some(s.clone());
    }
    // an explicit width wins over the preset's, except that width-1 presets stay at 1
    if let Some(k) = a.k {
        if !matches!(a.ablation, Some(Ablation::Base | Ablation::Decoding | Ablation::SoftDecoding)) {
            cfg.lrbps.k = k;
        }
    }
    if let Some(n) = a.max_steps {
        cfg.pipeline.max_steps = n;
    }
    if let Some(n) = a.rollout_budget {
        cfg.pipeline.rollout_budget = n;
    }
    if let Some(m) = a.aggregation {
        cfg.aggregate.mode = m;
    }
    if let Some(m) = a.lpd {
        cfg.lpd.mode = m;
    }
    if let Some(t) = &a.lpd_table {
        cfg.lpd.table = Some(t.clone());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.apply_env(|k| std::env::var(k).ok());
    cfg.validate().map_err(from_config)?;
    Ok(cfg)
}

fn solve(a: Solve) -> Outcome {
    let cfg = effective_config(&a)?;
    if !a.problems.exists() {
        return Err(config_err(anyhow!("{}: no such file", a.problems.display())));
    }
    let problems = load_problems(&a.problems).map_err(config_err)?;
    let prompts = cfg.prompt_set().map_err(from_config)?;
    let pipeline = cfg.pipeline_config();

    let lm = cfg.connect().map_err(from_config)?;
    let lpd = cfg.preference_bias(lm.vocabulary()).map_err(from_config)?;
    let sandbox = Sandbox::new(cfg.sandbox_config());
    sandbox.probe().map_err(bootstrap_err)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).map_err(config_err)?;
    let records_path = a.out.join("records.jsonl");
    let log_file = File::create(&records_path).with_context(|| records_path.display().to_string()).map_err(config_err)?;
    let mut log = BufWriter::new(log_file);
    let mut write_error = None;

    let engine = Engine { lm: lm.as_ref(), sandbox: &sandbox, limits: cfg.limits(), prompts: &prompts, config: &pipeline, lpd };
    let records = engine.solve_batch(&problems, cfg.workers, |r| {
        log::info!("{}: {}", r.problem_id, r.status.as_str());
        // one complete line per record, flushed so an interrupted run leaves a parseable prefix
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(run_err(anyhow!("writing {}: {e}", records_path.display())));
    }

    let any_error = records.iter().any(|r| r.status == RunStatus::Error);
    let report = BatchReport::new(records, cfg.to_json_value(), &prompts.id, &prompts.digest()).map_err(run_err)?;
    let report_path = a.out.join(match a.format {
        ReportFormat::Json => "report.json",
        ReportFormat::Tsv => "report.tsv",
    });
    report.write(&report_path, a.format).map_err(run_err)?;
    if a.format == ReportFormat::Tsv {
        // keep the JSON form too; `report` verifies against it
        report.write(&a.out.join("report.json"), ReportFormat::Json).map_err(run_err)?;
    }
    println!("{}", report.summary());
    for r in report.records.iter().filter(|r| r.status == RunStatus::Error) {
        eprintln!("{}: {}", r.problem_id, r.error.as_deref().unwrap_or("error"));
    }
    Ok(if any_error { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn report(a: Report) -> Outcome {
    if !a.path.exists() {
        return Err(config_err(anyhow!("{}: no such file", a.path.display())));
    }
    let text = std::fs::read_to_string(&a.path).with_context(|| a.path.display().to_string()).map_err(config_err)?;
    let report = match BatchReport::from_json(&text) {
        Ok(stored) => {
            stored.verify().map_err(|e| match e {
                ReportError::MetricMismatch { .. } | ReportError::InvalidRecord { .. } => run_err(e),
                other => config_err(other),
            })?;
            stored
        }
        // a bare record log carries no stored aggregates to compare against
        Err(_) => {
            let records = parse_record_log(&text).map_err(config_err)?;
            BatchReport::new(records, serde_json::Value::Null, "", "").map_err(run_err)?
        }
    };
    match a.format {
        ReportFormat::Tsv => print!("{}", report.to_tsv()),
        ReportFormat::Json => println!("{}", report.summary()),
    }
    Ok(ExitCode::SUCCESS)
}

fn split_corpus(a: SplitCorpus) -> Outcome {
    let text = read_input(&a.input)?;
    let unsplit = parse_unsplit_problems(&text).map_err(config_err)?;
    let mut out = BufWriter::new(OpenOptions::new().write(true).create(true).truncate(true).open(&a.out).map_err(|e| run_err(anyhow!("{}: {e}", a.out.display())))?);
    let n = unsplit.len();
    for p in unsplit {
        let split = split_tests(p, a.seed).map_err(config_err)?;
        writeln!(out, "{}", serde_json::to_string(&split).expect("problem serializes")).map_err(run_err)?;
    }
    out.flush().map_err(run_err)?;
    println!("split {n} problems into {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| config_err(anyhow!("{}: {e}", path.display())))
}
