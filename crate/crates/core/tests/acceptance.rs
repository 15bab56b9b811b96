//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Tolerances and runtime limits are the
//! constants below.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logitcot::aggregate::{
    aggregate, choose_final, AggregateConfig, AggregationMode, Candidate, OutcomeSource, Round, RolloutBudget,
    StepValidator, SummaryContext, Validation,
};
use logitcot::executor::{
    load_problems, GeneratedProgram, Limits, Problem, Sandbox, SandboxConfig, TestCase, Verdict,
};
use logitcot::lm::{
    GenerationResult, LanguageModel, LogitVector, Sampling, ScriptSpec, ScriptedModel, TokenId, Vocabulary,
};
use logitcot::lpd::{
    build_preference_table, builtin_static_table, compile_transform, LabeledCotCorpus, CotSample, PreferenceTable,
    RatioParams, BUILTIN_WORD_LISTS,
};
use logitcot::lrbps::{
    generate_ranked_paths, select_best, sigma_distance, top_k_seeds, CandidatePath, Fanout, PathParams, PathScore,
};
use logitcot::pipeline::prompts::{PromptSet, DEFAULT_PROMPT_SET};
use logitcot::pipeline::{Engine, PipelineConfig};
use logitcot::report::{efficiency, pass_metrics_from, RunRecord, RunStatus};

const SIGMA_TOL: f64 = 1e-9;
const AFFINE_TOL: f64 = 1e-7;
const LPD_TOL: f64 = 1e-12;
const EFFICIENCY_TOL: f64 = 1.0;
const SIGMA_LIMIT: Duration = Duration::from_secs(5);
const LPD_LIMIT: Duration = Duration::from_secs(5);
const FIXTURE_LIMIT: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fixture_model() -> ScriptedModel {
    let spec: ScriptSpec = serde_json::from_str(&std::fs::read_to_string(fixture("script.json")).unwrap()).unwrap();
    ScriptedModel::from_spec(&spec).unwrap()
}

fn fixture_problems() -> Vec<Problem> {
    load_problems(&fixture("problems.jsonl")).unwrap()
}

fn run_fixture(config: &PipelineConfig) -> Vec<RunRecord> {
    let lm = fixture_model();
    let sandbox = Sandbox::new(SandboxConfig::default());
    let prompts = PromptSet::builtin(DEFAULT_PROMPT_SET).unwrap();
    let engine = Engine { lm: &lm, sandbox: &sandbox, limits: Limits::default(), prompts: &prompts, config, lpd: None };
    engine.solve_batch(&fixture_problems(), 3, |_| {})
}

// ---------------------------------------------------------------- sigma

/// Straightforward two-pass reference.
fn sigma_oracle(t: &[f64]) -> f64 {
    let n = t.len();
    if n < 2 {
        return 0.0;
    }
    let mut mean = 0.0;
    for v in t {
        mean += v;
    }
    mean /= n as f64;
    let mut ss = 0.0;
    for v in t {
        ss += (v - mean) * (v - mean);
    }
    let sd = (ss / (n as f64 - 1.0)).sqrt();
    if sd == 0.0 {
        return 0.0;
    }
    let mut max = t[0];
    for &v in t {
        if v > max {
            max = v;
        }
    }
    (max - mean) / sd
}

fn random_trace(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=64);
    let scale = [0.01, 1.0, 10.0, 100.0][rng.random_range(0..4)];
    let offset = rng.random_range(-50.0..50.0);
    (0..n).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect()
}

fn sigma_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5157);
    let (mut worst, mut worst_affine) = (0.0f64, 0.0f64);
    let cases = 1000;
    for i in 0..cases {
        let t = random_trace(&mut rng);
        let s = sigma_distance(&t).map_err(|e| format!("case {i}: {e}"))?.sigma_distance;
        let o = sigma_oracle(&t);
        let d = (s - o).abs();
        worst = worst.max(d);
        check(d <= SIGMA_TOL, || format!("case {i}: {s} vs oracle {o}"))?;

        let n = t.len() as f64;
        let bound = (n - 1.0) / n.sqrt();
        check((0.0..=bound + 1e-12).contains(&s), || format!("case {i}: sigma {s} outside [0, {bound}]"))?;

        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-100.0..100.0);
        let moved: Vec<f64> = t.iter().map(|v| a * v + b).collect();
        let s2 = sigma_distance(&moved).unwrap().sigma_distance;
        let da = (s - s2).abs() / s.abs().max(1.0);
        worst_affine = worst_affine.max(da);
        check(da <= AFFINE_TOL, || format!("case {i}: affine image {s2} vs {s}"))?;
    }
    for (name, t) in [("single", vec![3.5]), ("constant", vec![2.0; 9]), ("constant pair", vec![-1.0, -1.0])] {
        let s = sigma_distance(&t).unwrap().sigma_distance;
        check(s == 0.0, || format!("{name} trace scored {s}"))?;
    }
    // Samuelson bound is attained by one outlier among equal values
    let mut t = vec![0.0; 10];
    t[3] = 1.0;
    let s = sigma_distance(&t).unwrap().sigma_distance;
    check((s - 9.0 / 10f64.sqrt()).abs() < 1e-12, || format!("extremal trace scored {s}"))?;
    let elapsed = start.elapsed();
    within(elapsed, SIGMA_LIMIT)?;
    Ok(format!("{cases} traces, max |Δ| {worst:.1e}, max affine drift {worst_affine:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- lpd

fn lpd_vocab() -> Vocabulary {
    let lists: serde_json::Value = serde_json::from_str(BUILTIN_WORD_LISTS).unwrap();
    let mut pieces: Vec<String> = Vec::new();
    for key in ["high_quality", "low_quality"] {
        for w in lists[key].as_array().unwrap() {
            pieces.push(format!(" {}", w.as_str().unwrap()));
        }
    }
    pieces.extend([" the", " a", " loop", "x", "+", "\n"].map(String::from));
    Vocabulary::with_specials(pieces)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn dense(z: &LogitVector) -> Vec<f64> {
    match z {
        LogitVector::Full(v) => v.clone(),
        _ => unreachable!("full vectors only"),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Independent counting reference for the frequency-ratio table.
fn ratio_oracle(samples: &[(Vec<String>, f64)], p: &RatioParams) -> BTreeMap<String, f64> {
    let norm = |w: &str| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase();
    let mut high: HashMap<String, u64> = HashMap::new();
    let mut low: HashMap<String, u64> = HashMap::new();
    for (steps, acc) in samples {
        let side = if *acc > 0.5 { &mut high } else { &mut low };
        for s in steps {
            for w in s.split_whitespace() {
                let w = norm(w);
                if !w.is_empty() {
                    *side.entry(w).or_insert(0) += 1;
                }
            }
        }
    }
    let th: u64 = high.values().sum();
    let tl: u64 = low.values().sum();
    let mut words: Vec<&String> = high.keys().chain(low.keys()).collect();
    words.sort();
    words.dedup();
    let mut out = BTreeMap::new();
    for w in words {
        let h = *high.get(w).unwrap_or(&0);
        let l = *low.get(w).unwrap_or(&0);
        if h + l < p.min_count {
            continue;
        }
        let r = ((h as f64 / th as f64 + p.epsilon) / (l as f64 / tl as f64 + p.epsilon)).ln();
        let d = p.alpha * r.max(-p.clamp).min(p.clamp);
        if d.abs() >= p.floor && d != 0.0 {
            out.insert(w.clone(), d);
        }
    }
    out
}

fn synthetic_corpus(rng: &mut ChaCha8Rng) -> Vec<(Vec<String>, f64)> {
    const WORDS: [&str; 12] =
        ["verify", "Check", "edge,", "sort", "guess", "maybe.", "loop", "index", "Assume", "just", "sum", "prefix"];
    let n = rng.random_range(2..30);
    let mut samples: Vec<(Vec<String>, f64)> = (0..n)
        .map(|_| {
            let steps = (0..rng.random_range(1..4))
                .map(|_| {
                    (0..rng.random_range(1..12)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
                })
                .collect();
            let acc = [0.0, 0.25, 0.5, 0.75, 1.0][rng.random_range(0..5)];
            (steps, acc)
        })
        .collect();
    // both classes present
    samples[0].1 = 1.0;
    samples[1].1 = 0.5;
    samples
}

fn lpd_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1bd);
    let vocab = lpd_vocab();
    let n = vocab.len();
    let compiled = compile_transform(&builtin_static_table(2.0), &vocab);
    check(compiled.unmatched.is_empty(), || format!("unmatched words {:?}", compiled.unmatched))?;
    let bias = compiled.bias;

    // additivity: the shift transform(z) - z does not depend on z
    let shift = bias.dense(n);
    for case in 0..200 {
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let out = dense(&bias.apply(&LogitVector::full(z.clone()).unwrap()));
        for i in 0..n {
            check(((out[i] - z[i]) - shift[i]).abs() <= LPD_TOL, || format!("case {case}: token {i} not additive"))?;
        }
        // uniform shift of the input: same argmax, same softmax
        let c = rng.random_range(-100.0..100.0);
        let zc: Vec<f64> = z.iter().map(|v| v + c).collect();
        let outc = dense(&bias.apply(&LogitVector::full(zc).unwrap()));
        check(argmax(&out) == argmax(&outc), || format!("case {case}: argmax moved under uniform shift"))?;
        for (p, q) in softmax(&out).iter().zip(softmax(&outc)) {
            check((p - q).abs() <= 1e-9, || format!("case {case}: softmax moved under uniform shift"))?;
        }
    }

    // identity on the empty table
    let empty = compile_transform(&PreferenceTable::empty(), &vocab).bias;
    check(empty.is_identity(), || "empty table compiled to a non-identity bias".into())?;
    let z = LogitVector::full((0..n).map(|i| i as f64 * 0.5).collect()).unwrap();
    check(empty.apply(&z) == z, || "empty bias changed the logits".into())?;

    // sign discipline of the shipped word lists
    let lists: serde_json::Value = serde_json::from_str(BUILTIN_WORD_LISTS).unwrap();
    let table = builtin_static_table(2.0);
    let (mut pos, mut neg) = (0, 0);
    for (key, sign) in [("high_quality", 1.0), ("low_quality", -1.0)] {
        for w in lists[key].as_array().unwrap() {
            let w = w.as_str().unwrap();
            let d = table.delta(w).ok_or_else(|| format!("{w} missing from the table"))?;
            check(d == sign * 2.0, || format!("{w}: delta {d}"))?;
            let id = vocab.id(&format!(" {w}")).unwrap();
            check(bias.delta(id) == d, || format!("{w}: token delta {}", bias.delta(id)))?;
            if sign > 0.0 {
                pos += 1
            } else {
                neg += 1
            }
        }
    }
    check(pos > 0 && neg > 0, || "a word list is empty".into())?;

    // frequency-ratio construction against the counting oracle
    let corpora = 300;
    for case in 0..corpora {
        let samples = synthetic_corpus(&mut rng);
        let params = RatioParams {
            alpha: rng.random_range(0.5..3.0),
            clamp: rng.random_range(0.5..5.0),
            epsilon: [1e-3, 1e-2, 0.1][rng.random_range(0..3)],
            min_count: rng.random_range(1..4),
            floor: [0.0, 0.05, 0.2][rng.random_range(0..3)],
        };
        let corpus = LabeledCotCorpus {
            samples: samples.iter().map(|(s, a)| CotSample { steps: s.clone(), accuracy: *a }).collect(),
        };
        let table = build_preference_table(&corpus, &params).map_err(|e| format!("corpus {case}: {e}"))?;
        let got: BTreeMap<String, f64> = table.entries.iter().map(|e| (e.word.clone(), e.delta)).collect();
        let want = ratio_oracle(&samples, &params);
        check(got.len() == want.len() && got.keys().eq(want.keys()), || {
            format!("corpus {case}: words {:?} vs oracle {:?}", got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>())
        })?;
        for (w, d) in &want {
            check((got[w] - d).abs() <= LPD_TOL, || format!("corpus {case}: {w} {} vs {d}", got[w]))?;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, LPD_LIMIT)?;
    Ok(format!("200 vectors, {pos}+{neg} listed words, {corpora} synthetic corpora, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- lrbps

fn topk_oracle(v: &[f64], k: usize) -> Vec<TokenId> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort on descending value keeps ascending ids among ties
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
    idx.into_iter().take(k).map(|i| TokenId(i as u32)).collect()
}

fn path(sigma: f64, mean: f64, rank: usize) -> CandidatePath {
    CandidatePath {
        seed_token: TokenId(rank as u32),
        seed_rank: rank,
        result: GenerationResult { text: format!("path {rank}"), token_trace: Vec::new(), prompt_tokens: 0, completion_tokens: 0 },
        score: PathScore { sigma_distance: sigma, mean, std: 1.0, max_logit: 0.0, n_tokens: 2, entropy_diag: None },
    }
}

fn lrbps_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e5);
    let cases = 1000;
    for case in 0..cases {
        let n = rng.random_range(1..60);
        // coarse grid so ties are common
        let v: Vec<f64> = (0..n).map(|_| (rng.random_range(-8.0f64..8.0) * 2.0).round() / 2.0).collect();
        let k = rng.random_range(1..=n);
        let got = top_k_seeds(&LogitVector::full(v.clone()).unwrap(), k).map_err(|e| e.to_string())?;
        check(got == topk_oracle(&v, k), || format!("case {case}: top-{k} of {v:?} gave {got:?}"))?;
    }

    // every path starts with its seed
    let mut paths_seen = 0;
    for case in 0..60 {
        let pieces = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
        let entries: Vec<(&str, f64)> = pieces.iter().map(|p| (*p, rng.random_range(-3.0..3.0))).collect();
        let lm = ScriptedModel::builder()
            .default_logit(-1.0)
            .logits_rule(&["ctx"], &entries)
            .reply(&["ctx beta"], " and more", 2.0)
            .build()
            .unwrap();
        let k = rng.random_range(1..=lm.vocab_size());
        let params = PathParams {
            k,
            max_tokens: 4,
            stop_sequences: Vec::new(),
            sampling: Sampling::greedy(),
            transform: None,
            fanout: if case % 2 == 0 { Fanout::Serial } else { Fanout::Parallel },
        };
        let ranked = generate_ranked_paths(&lm, "ctx", &params).map_err(|e| format!("case {case}: {e}"))?;
        let seeds = top_k_seeds(&lm.next_logits("ctx").unwrap(), k).unwrap();
        check(ranked.paths.len() + ranked.empty_seeds.len() == seeds.len(), || format!("case {case}: lost a seed"))?;
        for p in &ranked.paths {
            check(p.result.token_trace[0].token == p.seed_token, || format!("case {case}: path does not start with its seed"))?;
            check(seeds[p.seed_rank] == p.seed_token, || format!("case {case}: seed rank mismatch"))?;
            paths_seen += 1;
        }
    }
    // select_best on an exhaustive grid of three paths
    let levels = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (2.0, 0.0), (2.0, 1.0)];
    let mut grid = 0;
    for a in levels {
        for b in levels {
            for c in levels {
                let paths = vec![path(a.0, a.1, 2), path(b.0, b.1, 0), path(c.0, c.1, 1)];
                let best = select_best(&paths).unwrap();
                let top_sigma = paths.iter().map(|p| p.score.sigma_distance).fold(f64::NEG_INFINITY, f64::max);
                let top_mean = paths
                    .iter()
                    .filter(|p| p.score.sigma_distance == top_sigma)
                    .map(|p| p.score.mean)
                    .fold(f64::NEG_INFINITY, f64::max);
                let want = paths
                    .iter()
                    .filter(|p| p.score.sigma_distance == top_sigma && p.score.mean == top_mean)
                    .map(|p| p.seed_rank)
                    .min()
                    .unwrap();
                check(best.seed_rank == want, || format!("grid {a:?} {b:?} {c:?}: chose rank {}", best.seed_rank))?;
                grid += 1;
            }
        }
    }
    Ok(format!("{cases} top-k cases, {paths_seen} seeded paths, {grid} select_best grid points"))
}

// ---------------------------------------------------------------- aggregation

struct Scores {
    agg: f64,
    best: f64,
}

impl StepValidator for Scores {
    fn score(&self, candidate: &str) -> Validation {
        Validation { score: if candidate == "merged" { self.agg } else { self.best }, ..Validation::default() }
    }
}

fn aggregation_suite() -> Outcome {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let prompts = PromptSet::builtin(DEFAULT_PROMPT_SET).unwrap();
    let lm = ScriptedModel::builder()
        .default_logit(-50.0)
        .reply(&["Merge the candidate clues"], "[{\"Clue of Step 1\": \"merged\"}]", 5.0)
        .build()
        .unwrap();
    let ctx = SummaryContext {
        prompts: &prompts,
        problem: "p",
        previous_steps: "(none yet)",
        step: 1,
        max_tokens: 64,
        reask_limit: 1,
        sampling: Sampling::greedy(),
        transform: None,
    };
    let config = AggregateConfig { mode: AggregationMode::Dynamic, ..AggregateConfig::default() };
    let candidates = [Candidate { text: "top path", sigma: 2.0 }, Candidate { text: "other", sigma: 1.0 }];
    let mut points = 0;
    for &a in &grid {
        for &b in &grid {
            let want = if a > b { OutcomeSource::Summarized } else { OutcomeSource::BestPath };
            let direct = choose_final("merged", "top path", Some((a, b)));
            check(direct.source == want, || format!("choose_final({a}, {b}) chose {:?}", direct.source))?;
            let want_text = if a > b { "merged" } else { "top path" };
            check(direct.adopted_text == want_text, || format!("choose_final({a}, {b}) adopted {}", direct.adopted_text))?;

            let validator = Scores { agg: a, best: b };
            let round = Round {
                mode: AggregationMode::Dynamic,
                config: &config,
                candidates: &candidates,
                best: "top path",
                summary: &ctx,
                validator: &validator,
                reserve: 1,
            };
            let mut budget = RolloutBudget::new(20);
            let (out, _) = aggregate(&lm, &round, &mut budget, &mut Vec::new()).map_err(|e| e.to_string())?;
            check(out.source == want && out.score_agg == Some(a) && out.score_best == Some(b), || {
                format!("dynamic round at ({a}, {b}) gave {out:?}")
            })?;
            check(out.rollouts_spent == 2 && budget.used() == 2, || format!("({a}, {b}): spent {}", budget.used()))?;
            points += 1;
        }
    }

    // budget conservation over the scripted pipeline
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0d6e7);
    let mut budgets = vec![1, 2, 20];
    budgets.extend((0..4).map(|_| rng.random_range(1..=20)));
    let mut records = 0;
    for &budget in &budgets {
        let config = PipelineConfig { rollout_budget: budget, ..PipelineConfig::default() };
        for r in run_fixture(&config) {
            check(r.error.is_none(), || format!("budget {budget}: {} errored: {:?}", r.problem_id, r.error))?;
            check(r.rollouts_used <= budget && r.rollout_budget == budget, || {
                format!("budget {budget}: {} used {}", r.problem_id, r.rollouts_used)
            })?;
            let spent: u32 = r.aggregations.iter().map(|a| a.outcome.rollouts_spent).sum();
            // the final evaluation always keeps one rollout
            check(spent < budget, || format!("budget {budget}: validation spent {spent}"))?;
            records += 1;
        }
    }
    Ok(format!("{points} grid points through choose_final and dynamic rounds, budgets {budgets:?} over {records} records"))
}

// ---------------------------------------------------------------- efficiency

struct Cell {
    row: &'static str,
    column: &'static str,
    input_k: f64,
    output_k: f64,
    pass_rate: f64,
    printed: f64,
}

const fn cell(row: &'static str, column: &'static str, input_k: f64, output_k: f64, pass_rate: f64, printed: f64) -> Cell {
    Cell { row, column, input_k, output_k, pass_rate, printed }
}

/// Reference token usage, pass rates and printed efficiency for two
/// methods on five benchmark splits.
const CELLS: [Cell; 10] = [
    cell("tree-search", "APPS intro", 13072.0, 1922.0, 0.5995, 282.0),
    cell("tree-search", "APPS inter", 12900.0, 1966.0, 0.5888, 286.0),
    cell("tree-search", "APPS comp", 15163.0, 2414.0, 0.2700, 740.0),
    cell("tree-search", "CodeContests basic", 12311.0, 1766.0, 0.4003, 396.0),
    cell("tree-search", "CodeContests adv", 8184.0, 1166.0, 0.4238, 248.0),
    cell("logit-search", "APPS intro", 12835.0, 1140.0, 0.6221, 243.0),
    cell("logit-search", "APPS inter", 12777.0, 207.0, 0.6130, 248.0),
    cell("logit-search", "APPS comp", 12403.0, 1733.0, 0.3500, 453.0),
    cell("logit-search", "CodeContests basic", 11561.0, 124.0, 0.4999, 250.0),
    cell("logit-search", "CodeContests adv", 6068.0, 649.0, 0.5040, 158.0),
];

/// Cells whose printed value cannot be derived from their own row inputs.
const INCONSISTENT: [(&str, &str); 3] =
    [("logit-search", "APPS inter"), ("logit-search", "CodeContests basic"), ("logit-search", "CodeContests adv")];

fn efficiency_suite() -> Outcome {
    let mut reproduced = 0;
    let mut notes = Vec::new();
    for c in &CELLS {
        let e = efficiency(c.input_k, c.output_k, c.pass_rate).map_err(|e| e.to_string())?;
        let consistent = !INCONSISTENT.contains(&(c.row, c.column));
        let ok = (e - c.printed).abs() <= EFFICIENCY_TOL;
        if consistent {
            check(ok, || format!("{} {}: {e:.1} vs {}", c.row, c.column, c.printed))?;
            reproduced += 1;
        } else {
            // these must stay irreproducible, otherwise the list above is stale
            check(!ok, || format!("{} {} is listed as inconsistent but reproduces", c.row, c.column))?;
            notes.push(format!("{} {} recomputes to {e:.1} (printed {})", c.row, c.column, c.printed));
        }
    }
    check(efficiency(1.0, 1.0, 0.0).is_err(), || "zero pass rate must be rejected".into())?;
    Ok(format!("{reproduced}/{} self-consistent cells within ±{EFFICIENCY_TOL}; excluded: {}", CELLS.len(), notes.join("; ")))
}

// ---------------------------------------------------------------- metrics

fn metrics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let batches = 1000;
    for case in 0..batches {
        let n = rng.random_range(1..80);
        let items: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let total = rng.random_range(1..12);
                let passed = rng.random_range(0..=total);
                (passed as f64 / total as f64, passed == total)
            })
            .collect();
        let (rate, at1) = pass_metrics_from(items.iter().copied()).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        let mut all = 0usize;
        for (f, p) in &items {
            sum += f;
            if *p {
                all += 1;
            }
        }
        let want_rate = sum / n as f64;
        let want_at1 = all as f64 / n as f64;
        check(rate == want_rate && at1 == want_at1, || format!("batch {case}: ({rate}, {at1}) vs ({want_rate}, {want_at1})"))?;
        check(at1 <= rate, || format!("batch {case}: pass@1 {at1} above pass rate {rate}"))?;
    }
    check(pass_metrics_from(std::iter::empty()).is_err(), || "empty batch must be rejected".into())?;
    Ok(format!("{batches} random batches"))
}

// ---------------------------------------------------------------- determinism

fn determinism_suite() -> Outcome {
    let start = Instant::now();
    let config = PipelineConfig::default();
    let first = run_fixture(&config);
    let second = run_fixture(&config);
    let a = serde_json::to_string(&first).unwrap();
    let b = serde_json::to_string(&second).unwrap();
    check(a == b, || "two runs at the same seed produced different records".into())?;

    let sum = &first[0];
    check(sum.problem_id == "fixture-sum" && sum.status == RunStatus::Passed, || format!("fixture-sum: {:?}", sum.status))?;
    check(sum.aggregations[0].outcome.source == OutcomeSource::BestPath, || "fixture-sum was not decided by ranking".into())?;
    let probe = sum.prompts_log.iter().find(|c| c.stage == logitcot::report::Stage::Probe);
    check(probe.is_some(), || "no ranking probe logged".into())?;

    let max = &first[1];
    let o = &max.aggregations[0].outcome;
    check(
        max.status == RunStatus::Passed && o.source == OutcomeSource::Summarized && o.score_agg > o.score_best,
        || format!("fixture-max: {:?} {o:?}", max.status),
    )?;
    // without validation the same problem keeps the wrong top path
    let best_only = PipelineConfig {
        aggregate: AggregateConfig { mode: AggregationMode::Best, ..AggregateConfig::default() },
        ..PipelineConfig::default()
    };
    let flipped = run_fixture(&best_only);
    check(flipped[1].status == RunStatus::Failed, || "fixture-max passes without dynamic aggregation".into())?;
    // width one takes the top seed and fails where ranking succeeds
    let narrow = PipelineConfig { k: 1, ..best_only };
    check(run_fixture(&narrow)[0].status == RunStatus::Failed, || "fixture-sum passes at width one".into())?;

    let elapsed = start.elapsed();
    within(elapsed, FIXTURE_LIMIT)?;
    Ok(format!("{} bytes of records identical across runs, 4 fixture runs in {elapsed:.2?}", a.len()))
}

// ---------------------------------------------------------------- sandbox

fn sandbox_suite() -> Outcome {
    let sandbox = Sandbox::new(SandboxConfig::default());
    sandbox.probe().map_err(|e| e.to_string())?;
    let quick = Limits { wall_ms: 2_000, ..Limits::default() };
    let run = |src: &str, expected: &str| {
        sandbox.run_program(&GeneratedProgram::python(src), &TestCase::new("", expected), &quick).unwrap()
    };

    let r = run("while True:\n    pass\n", "x");
    check(r.verdict == Verdict::Timeout, || format!("infinite loop: {:?}", r.verdict))?;
    let r = run("print(4)\n", "5");
    check(r.verdict == Verdict::WrongAnswer, || format!("wrong output: {:?}", r.verdict))?;
    let r = run("print(5)\n", "5");
    check(r.verdict == Verdict::Pass, || format!("right output: {:?}", r.verdict))?;
    let r = run("raise SystemExit(3)\n", "5");
    check(r.verdict == Verdict::RuntimeError, || format!("nonzero exit: {:?}", r.verdict))?;

    let outside = tempfile::tempdir().map_err(|e| e.to_string())?;
    let target = outside.path().join("escape.txt");
    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    listener.set_nonblocking(true).unwrap();
    let port = listener.local_addr().unwrap().port();
    let probes = [
        ("write outside scratch", format!("try:\n    open({:?}, 'w').write('x')\n    print('escaped')\nexcept Exception:\n    print('ok')\n", target.display().to_string())),
        ("network", format!("import socket\ntry:\n    socket.create_connection(('127.0.0.1', {port}), timeout=1)\n    print('escaped')\nexcept Exception:\n    print('ok')\n")),
        ("subprocess", "import subprocess\ntry:\n    subprocess.run(['true'])\n    print('escaped')\nexcept Exception:\n    print('ok')\n".to_string()),
    ];
    for (name, src) in &probes {
        let r = run(src, "ok");
        check(r.verdict == Verdict::Pass, || format!("{name} probe: {:?} {:?}", r.verdict, r.stdout))?;
    }
    check(!target.exists(), || "a file escaped the scratch directory".into())?;
    check(listener.accept().is_err(), || "a connection reached the host".into())?;

    // no private test text in any logged prompt of a full fixture run
    let problems = fixture_problems();
    let records = run_fixture(&PipelineConfig::default());
    let mut scanned = 0;
    for (p, r) in problems.iter().zip(&records) {
        for call in &r.prompts_log {
            scanned += 1;
            for t in &p.private_tests {
                check(!call.prompt.contains(t.input.trim()), || format!("{}: private input in a {:?} prompt", p.id, call.stage))?;
                let out = t.expected_output.trim();
                check(out.len() < 2 || !call.prompt.contains(out), || format!("{}: private output in a {:?} prompt", p.id, call.stage))?;
            }
        }
    }
    Ok(format!("timeout/wrong-answer/runtime verdicts, {} isolation probes blocked, {scanned} prompts scanned", probes.len()))
}

// ---------------------------------------------------------------- runner

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("sigma-distance", sigma_suite),
        ("preference-decoding", lpd_suite),
        ("path-ranking", lrbps_suite),
        ("aggregation-rule", aggregation_suite),
        ("efficiency-arithmetic", efficiency_suite),
        ("pass-metrics", metrics_suite),
        ("end-to-end-determinism", determinism_suite),
        ("sandbox", sandbox_suite),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  {name:<24} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
