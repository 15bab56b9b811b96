//! Rank-based path selection.
//!
//! The context's first-token logits seed `K` forced continuations, one per
//! top-K token. Each continuation is scored by the sigma distance of its
//! chosen-token logits, `(max(s) - mean(s)) / std(s)` with the `n - 1`
//! standard deviation, and the paths are ranked most stable first.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{GenerationRequest, GenerationResult, LanguageModel, LmError, LogitBias, LogitVector, Sampling, TokenId};

#[derive(Debug, Error)]
pub enum LrbpsError {
    #[error("k = {k} exceeds the {width} available logits")]
    KTooLarge { k: usize, width: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("empty logit trace")]
    EmptyTrace,
    #[error("non-finite logit at trace position {0}")]
    NonFiniteLogit(usize),
    #[error("every seeded path came back empty")]
    AllPathsEmpty,
    #[error("no candidate paths")]
    EmptyInput,
    #[error(transparent)]
    Backend(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub sigma_distance: f64,
    pub mean: f64,
    pub std: f64,
    pub max_logit: f64,
    pub n_tokens: usize,
    /// Entropy (nats) of the softmax over the trace logits. Not used for ranking.
    pub entropy_diag: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePath {
    pub seed_token: TokenId,
    /// Position of the seed in the top-K list (0 = highest logit).
    pub seed_rank: usize,
    pub result: GenerationResult,
    pub score: PathScore,
}

/// The `k` highest logits, ties broken by lower token id.
pub fn top_k_seeds(z: &LogitVector, k: usize) -> Result<Vec<TokenId>, LrbpsError> {
    if k == 0 {
        return Err(LrbpsError::ZeroK);
    }
    if k > z.width() {
        return Err(LrbpsError::KTooLarge { k, width: z.width() });
    }
    let mut entries: Vec<(TokenId, f64)> = z.entries().collect();
    let by_rank = |a: &(TokenId, f64), b: &(TokenId, f64)| cmp_desc(a.1, b.1).then(a.0.cmp(&b.0));
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, by_rank);
        entries.truncate(k);
    }
    entries.sort_by(by_rank);
    Ok(entries.into_iter().map(|(id, _)| id).collect())
}

/// Scores a chosen-token logit trace.
///
/// Constant traces and single-token traces carry no spread and score 0.
pub fn sigma_distance(trace: &[f64]) -> Result<PathScore, LrbpsError> {
    if trace.is_empty() {
        return Err(LrbpsError::EmptyTrace);
    }
    if let Some(i) = trace.iter().position(|v| !v.is_finite()) {
        return Err(LrbpsError::NonFiniteLogit(i));
    }
    let n = trace.len();
    let mean = trace.iter().sum::<f64>() / n as f64;
    let max_logit = trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let std = if n > 1 {
        (trace.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let sigma_distance = if n > 1 && std > 0.0 { ((max_logit - mean) / std).max(0.0) } else { 0.0 };
    Ok(PathScore { sigma_distance, mean, std, max_logit, n_tokens: n, entropy_diag: Some(softmax_entropy(trace)) })
}

fn softmax_entropy(trace: &[f64]) -> f64 {
    let max = trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = trace.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    -exps.iter().map(|e| e / total).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Ranking order: higher sigma distance, then higher mean, then lower seed rank.
pub fn rank_order(a: &CandidatePath, b: &CandidatePath) -> Ordering {
    cmp_desc(a.score.sigma_distance, b.score.sigma_distance)
        .then(cmp_desc(a.score.mean, b.score.mean))
        .then(a.seed_rank.cmp(&b.seed_rank))
}

/// Descending order on finite values; `-0.0` and `0.0` compare equal so ties
/// fall through to the next key.
fn cmp_desc(a: f64, b: f64) -> Ordering {
    (b + 0.0).total_cmp(&(a + 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fanout {
    /// Seeds are generated one after another in rank order.
    #[default]
    Serial,
    /// Seeds are generated concurrently up to the backend's parallelism.
    Parallel,
}

#[derive(Debug, Clone)]
pub struct PathParams {
    pub k: usize,
    pub max_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub sampling: Sampling,
    pub transform: Option<Arc<LogitBias>>,
    pub fanout: Fanout,
}

/// Everything one ranking round cost, for token accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPaths {
    /// Sorted best first.
    pub paths: Vec<CandidatePath>,
    /// Prompt tokens of the initial logits query.
    pub probe_prompt_tokens: usize,
    /// Seeds whose generation returned no tokens.
    pub empty_seeds: Vec<TokenId>,
}

pub fn generate_ranked_paths(
    lm: &dyn LanguageModel,
    context: &str,
    params: &PathParams,
) -> Result<RankedPaths, LrbpsError> {
    let raw = lm.next_logits(context)?;
    let z = match &params.transform {
        Some(b) => b.apply(&raw),
        None => raw,
    };
    let seeds = top_k_seeds(&z, params.k)?;
    let probe_prompt_tokens = lm.count_tokens(context)?;

    let request = |seed: TokenId| {
        let mut req = GenerationRequest::new(context, params.max_tokens);
        req.stop_sequences = params.stop_sequences.clone();
        req.forced_first_token = Some(seed);
        req.logit_transform = params.transform.clone();
        req.sampling = params.sampling;
        req
    };

    let results: Vec<Result<GenerationResult, LmError>> = match params.fanout {
        Fanout::Serial => seeds.iter().map(|&s| lm.generate(&request(s))).collect(),
        Fanout::Parallel => {
            let width = lm.max_parallelism().unwrap_or(seeds.len()).max(1);
            let mut out = Vec::with_capacity(seeds.len());
            for chunk in seeds.chunks(width) {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&s| {
                            let req = request(s);
                            scope.spawn(move || lm.generate(&req))
                        })
                        .collect();
                    for h in handles {
                        out.push(h.join().expect("generation thread panicked"));
                    }
                });
            }
            out
        }
    };

    let mut paths = Vec::with_capacity(seeds.len());
    let mut empty_seeds = Vec::new();
    for (rank, (seed, res)) in seeds.iter().zip(results).enumerate() {
        match res {
            Ok(result) => {
                let score = sigma_distance(&result.logits())?;
                paths.push(CandidatePath { seed_token: *seed, seed_rank: rank, result, score });
            }
            Err(LmError::EmptyGeneration) => empty_seeds.push(*seed),
            Err(e) => return Err(e.into()),
        }
    }
    if paths.is_empty() {
        return Err(LrbpsError::AllPathsEmpty);
    }
    paths.sort_by(rank_order);
    Ok(RankedPaths { paths, probe_prompt_tokens, empty_seeds })
}

/// Best path under [`rank_order`]; does not assume the input is sorted.
pub fn select_best(paths: &[CandidatePath]) -> Result<&CandidatePath, LrbpsError> {
    paths.iter().min_by(|a, b| rank_order(a, b)).ok_or(LrbpsError::EmptyInput)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ScriptedModel;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn top_k_direct_ordering() {
        let z = LogitVector::full(vec![0.1, 0.9, 0.5]).unwrap();
        assert_eq!(top_k_seeds(&z, 2).unwrap(), vec![TokenId(1), TokenId(2)]);
    }

    #[test]
    fn top_k_tie_breaks_to_lower_id() {
        let z = LogitVector::full(vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(top_k_seeds(&z, 1).unwrap(), vec![TokenId(0)]);
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        let z = LogitVector::full(vec![1.0, 2.0]).unwrap();
        assert!(matches!(top_k_seeds(&z, 3), Err(LrbpsError::KTooLarge { k: 3, width: 2 })));
        let t = LogitVector::truncated(100, vec![(TokenId(5), 1.0), (TokenId(9), 2.0)]).unwrap();
        assert!(matches!(top_k_seeds(&t, 3), Err(LrbpsError::KTooLarge { k: 3, width: 2 })));
        assert_eq!(top_k_seeds(&t, 2).unwrap(), vec![TokenId(9), TokenId(5)]);
    }

    #[test]
    fn sigma_distance_hand_example() {
        let s = sigma_distance(&[1.0, 2.0, 3.0]).unwrap();
        assert!(close(s.mean, 2.0) && close(s.std, 1.0) && close(s.max_logit, 3.0));
        assert!(close(s.sigma_distance, 1.0));
    }

    #[test]
    fn degenerate_traces_score_zero() {
        assert_eq!(sigma_distance(&[5.0, 5.0, 5.0]).unwrap().sigma_distance, 0.0);
        assert_eq!(sigma_distance(&[5.0]).unwrap().sigma_distance, 0.0);
        assert!(matches!(sigma_distance(&[]), Err(LrbpsError::EmptyTrace)));
        assert!(matches!(sigma_distance(&[1.0, f64::INFINITY]), Err(LrbpsError::NonFiniteLogit(1))));
    }

    #[test]
    fn affine_images_share_sigma_distance() {
        let a = sigma_distance(&[1.0, 2.0, 3.0]).unwrap().sigma_distance;
        let b = sigma_distance(&[9.0, 11.0, 13.0]).unwrap().sigma_distance;
        assert!(close(a, 1.0) && close(b, 1.0));
    }

    #[test]
    fn entropy_is_diagnostic_only() {
        let s = sigma_distance(&[0.0, 0.0]).unwrap();
        assert!(close(s.entropy_diag.unwrap(), 2f64.ln()));
    }

    fn branching_model() -> ScriptedModel {
        ScriptedModel::builder()
            .default_logit(-5.0)
            .reply_with_logits(&["CTX"], " A a a x", &[4.0, 4.0, 4.0, 9.0], 1)
            .reply_with_logits(&["CTX"], " B b b y", &[4.0, 5.0, 4.0, 5.0], 1)
            .reply_with_logits(&["CTX"], " C c", &[1.0, 1.0], 1)
            // branch point; the seed's logit comes from here, not from the reply
            .logits_rule(&["CTX"], &[(" A", 4.0), (" B", 4.0), (" C", 1.0)])
            .build()
            .unwrap()
    }

    fn params(k: usize) -> PathParams {
        PathParams {
            k,
            max_tokens: 16,
            stop_sequences: vec![],
            sampling: Sampling::greedy(),
            transform: None,
            fanout: Fanout::Serial,
        }
    }

    #[test]
    fn stable_spike_path_ranks_first() {
        let m = branching_model();
        let ranked = generate_ranked_paths(&m, "CTX", &params(2)).unwrap();
        let first = &ranked.paths[0];
        assert_eq!(first.result.text, " A a a x");
        assert!(close(first.score.sigma_distance, 1.5));
        assert!((ranked.paths[1].score.sigma_distance - 0.8660254037844386).abs() < 1e-12);
    }

    #[test]
    fn k_one_collapses_to_plain_generation() {
        let m = branching_model();
        let ranked = generate_ranked_paths(&m, "CTX", &params(1)).unwrap();
        let plain = m.generate(&GenerationRequest::new("CTX", 16)).unwrap();
        assert_eq!(ranked.paths.len(), 1);
        assert_eq!(ranked.paths[0].result, plain);
    }

    #[test]
    fn seeds_are_distinct_and_forced() {
        let m = branching_model();
        let mut p = params(3);
        p.fanout = Fanout::Parallel;
        let ranked = generate_ranked_paths(&m, "CTX", &p).unwrap();
        let firsts: Vec<TokenId> = ranked.paths.iter().map(|c| c.result.token_trace[0].token).collect();
        for (c, f) in ranked.paths.iter().zip(&firsts) {
            assert_eq!(c.seed_token, *f);
        }
        let mut dedup = firsts.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 3);
    }

    #[test]
    fn parallel_and_serial_agree() {
        let m = branching_model();
        let serial = generate_ranked_paths(&m, "CTX", &params(3)).unwrap();
        let mut p = params(3);
        p.fanout = Fanout::Parallel;
        assert_eq!(generate_ranked_paths(&m, "CTX", &p).unwrap(), serial);
    }

    fn path(sigma: f64, mean: f64, rank: usize) -> CandidatePath {
        CandidatePath {
            seed_token: TokenId(rank as u32),
            seed_rank: rank,
            result: GenerationResult { text: String::new(), token_trace: vec![], prompt_tokens: 0, completion_tokens: 0 },
            score: PathScore { sigma_distance: sigma, mean, std: 1.0, max_logit: mean, n_tokens: 2, entropy_diag: None },
        }
    }

    #[test]
    fn select_best_is_argmax_with_tie_breaks() {
        assert!(matches!(select_best(&[]), Err(LrbpsError::EmptyInput)));
        let single = [path(0.3, 0.0, 0)];
        assert_eq!(select_best(&single).unwrap().seed_rank, 0);
        let ps = [path(0.5, 0.0, 0), path(1.2, 0.0, 1), path(0.9, 0.0, 2)];
        assert_eq!(select_best(&ps).unwrap().seed_rank, 1);
        let tied = [path(1.0, 3.0, 0), path(1.0, 4.0, 1)];
        assert_eq!(select_best(&tied).unwrap().seed_rank, 1);
        let full_tie = [path(1.0, 4.0, 1), path(1.0, 4.0, 0)];
        assert_eq!(select_best(&full_tie).unwrap().seed_rank, 0);
    }

    #[test]
    fn signed_zeros_tie() {
        let z = LogitVector::full(vec![0.0, -0.0, 0.0]).unwrap();
        assert_eq!(top_k_seeds(&z, 3).unwrap(), [TokenId(0), TokenId(1), TokenId(2)]);
        let ps = [path(0.0, 0.0, 1), path(0.0, -0.0, 0)];
        assert_eq!(select_best(&ps).unwrap().seed_rank, 0);
    }
}
