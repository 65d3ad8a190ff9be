//! Entropy, information gain and greedy region selection.
//!
//! Uncertainty is the base-2 Shannon entropy of the next-token distribution. The gain of a
//! region is the drop in entropy when it is appended to the context. Selection follows the
//! greedy scheme: at every step recompute the base uncertainty with the regions chosen so
//! far, evaluate every remaining candidate as a one-region extension in a single batch, and
//! keep the candidate with the largest gain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{GenerationContext, RegionSegment, StepBackend};
use crate::candidates::{CandidateSet, Source};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::scalar::Real;

/// Normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenDistribution<T> {
    probs: Vec<T>,
}

impl<T: Real> TokenDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::Contract("probabilities must be finite and non-negative".into()));
        }
        let sum: T = probs.iter().copied().sum();
        if (sum - T::one()).abs() > T::norm_tolerance() {
            return Err(Error::Contract(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![T::one() / T::lit(n as f64); n] }
    }

    pub fn one_hot(n: usize, at: usize) -> Self {
        let mut probs = vec![T::zero(); n];
        probs[at] = T::one();
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Shannon entropy in bits. Zero-probability terms contribute nothing.
pub fn entropy<T: Real>(d: &TokenDistribution<T>) -> T {
    let h = d.probs.iter().filter(|p| **p > T::zero()).map(|&p| -p * p.log2()).sum::<T>();
    h.max(T::zero())
}

/// Entropy reduction from `base` to `conditioned`. Negative when the region adds uncertainty.
pub fn information_gain<T: Real>(base: &TokenDistribution<T>, conditioned: &TokenDistribution<T>) -> T {
    entropy(base) - entropy(conditioned)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GreedyOptions {
    /// Keep per-step gain tables for later inspection.
    pub diagnostics: bool,
    /// Stop early once the best remaining gain falls below this floor.
    pub min_gain: Option<f64>,
}

/// Gains of every candidate still available at one greedy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRanking {
    /// Entropy with the regions selected before this step.
    pub base_entropy: f64,
    /// `(candidate index, gain)` in candidate order.
    pub gains: Vec<(usize, f64)>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<Region>,
    /// Candidate indices of `selected`.
    pub indices: Vec<usize>,
    pub sources: Vec<Source>,
    /// Realized gain of each pick, conditioned on the earlier picks.
    pub gains: Vec<f64>,
    /// Contexts evaluated: one base per step plus every lookahead.
    pub backend_calls: usize,
    pub per_step: Option<Vec<StepRanking>>,
    /// Embedded form of `selected`, ready for insertion.
    pub segments: Vec<RegionSegment>,
}

impl SelectionResult {
    pub fn total_gain(&self) -> f64 {
        self.gains.iter().sum()
    }
}

/// Embeds every candidate once so lookahead suffixes can be reused across steps.
pub fn embed_candidates<B: StepBackend + ?Sized>(
    backend: &mut B,
    image: &str,
    regions: &[Region],
) -> Result<Vec<RegionSegment>> {
    let (boi, eoi) = (backend.info().boi, backend.info().eoi);
    regions
        .iter()
        .map(|region| {
            let vokens = backend.embed_region(image, region)?;
            Ok(RegionSegment { region: *region, vokens, boi, eoi })
        })
        .collect()
}

fn entropy_of<B: StepBackend + ?Sized>(backend: &mut B, ctx: &GenerationContext, step: usize) -> Result<f64> {
    backend.evaluate(ctx).map(|r| entropy(&r.distribution)).map_err(|source| Error::Step { step, source })
}

/// Greedy information-gain selection of `k` regions from `cands`.
pub fn greedy_select<B: StepBackend + ?Sized>(
    backend: &mut B,
    ctx: &GenerationContext,
    cands: &CandidateSet,
    k: usize,
    opts: GreedyOptions,
) -> Result<SelectionResult> {
    if k > cands.len() {
        return Err(Error::Capacity { requested: k, available: cands.len() });
    }
    let segments = embed_candidates(backend, ctx.image(), cands.regions())?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    let mut per_step = opts.diagnostics.then(Vec::new);
    let mut calls = 0;
    let mut current = ctx.clone();

    for step in 0..k {
        let base_entropy = entropy_of(backend, &current, step)?;
        calls += 1;
        let remaining: Vec<usize> = (0..cands.len()).filter(|i| !chosen.contains(i)).collect();
        let suffixes: Vec<RegionSegment> = remaining.iter().map(|&i| segments[i].clone()).collect();
        let results = if backend.supports_batching() {
            backend.evaluate_batch(&current, &suffixes).map_err(|source| Error::Step { step, source })?
        } else {
            suffixes
                .iter()
                .map(|s| backend.evaluate(&current.extended([s])).map_err(|source| Error::Step { step, source }))
                .collect::<Result<Vec<_>>>()?
        };
        if results.len() != suffixes.len() {
            return Err(Error::Contract(format!(
                "backend returned {} lookahead results for {} candidates",
                results.len(),
                suffixes.len()
            )));
        }
        calls += suffixes.len();

        let step_gains: Vec<(usize, f64)> =
            remaining.iter().zip(&results).map(|(&i, r)| (i, base_entropy - entropy(&r.distribution))).collect();
        // first maximum in candidate order
        let (best, best_gain) = step_gains
            .iter()
            .copied()
            .fold(None, |acc: Option<(usize, f64)>, (i, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((i, g)),
            })
            .expect("at least one remaining candidate");
        if opts.min_gain.is_some_and(|floor| best_gain < floor) {
            break;
        }
        if let Some(steps) = per_step.as_mut() {
            steps.push(StepRanking { base_entropy, gains: step_gains, chosen: best });
        }
        chosen.push(best);
        gains.push(best_gain);
        current.push_region(segments[best].clone());
    }

    Ok(SelectionResult {
        selected: chosen.iter().map(|&i| cands.regions()[i]).collect(),
        sources: chosen.iter().map(|&i| cands.sources()[i]).collect(),
        segments: chosen.iter().map(|&i| segments[i].clone()).collect(),
        indices: chosen,
        gains,
        backend_calls: calls,
        per_step,
    })
}

/// Evaluation requests issued by [`greedy_select`] for `k` picks out of `n_c` candidates.
pub fn greedy_call_count(k: usize, n_c: usize) -> usize {
    k + k * n_c - k * k.saturating_sub(1) / 2
}

/// Whether the selection passed over a candidate that led the step-0 gain ranking in favour
/// of another one, because the earlier picks had eroded its gain.
pub fn redundancy_skip_check(result: &SelectionResult) -> Result<bool> {
    let steps = result.per_step.as_ref().ok_or_else(|| Error::Contract("selection ran without diagnostics".into()))?;
    let Some(first) = steps.first() else {
        return Ok(false);
    };
    let initial = |idx: usize| first.gains.iter().find(|(i, _)| *i == idx).map_or(f64::NEG_INFINITY, |g| g.1);
    for step in steps.iter().skip(1) {
        let leader = step.gains.iter().map(|&(i, _)| i).fold(None, |acc: Option<usize>, i| match acc {
            Some(a) if initial(a) >= initial(i) => Some(a),
            _ => Some(i),
        });
        if let Some(leader) = leader {
            if leader != step.chosen {
                let leader_gain = step.gains.iter().find(|(i, _)| *i == leader).map(|g| g.1);
                let chosen_gain = step.gains.iter().find(|(i, _)| *i == step.chosen).map(|g| g.1);
                if let (Some(l), Some(c)) = (leader_gain, chosen_gain) {
                    if l < c {
                        return Ok(true);
                    }
                }
            }
        }
    }
    Ok(false)
}

/// Tolerance applied to the diminishing-returns comparison.
pub const SUBMOD_TOLERANCE: f64 = 1e-9;

/// One diminishing-returns check. The four `u_*` fields are next-token entropies with the
/// context extended by `S_small`, `S_small ∪ {R_test}`, `S_large` and `S_large ∪ {R_test}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmodProbeRecord {
    pub k_small: usize,
    pub test_region: Region,
    pub u_s: f64,
    pub u_s_star: f64,
    pub u_l: f64,
    pub u_l_star: f64,
    /// Gain of the test region on the small set is at least its gain on the large set.
    pub holds: bool,
}

impl SubmodProbeRecord {
    pub fn gain_small(&self) -> f64 {
        self.u_s - self.u_s_star
    }

    pub fn gain_large(&self) -> f64 {
        self.u_l - self.u_l_star
    }
}

/// Greedy-selects `k_small` then one more region, samples a test region from the rest and
/// compares its gain on both sets.
pub fn submodularity_probe<B: StepBackend + ?Sized>(
    backend: &mut B,
    ctx: &GenerationContext,
    cands: &CandidateSet,
    k_small: usize,
    seed: u64,
) -> Result<SubmodProbeRecord> {
    let k_large = k_small + 1;
    if k_large + 1 > cands.len() {
        return Err(Error::Capacity { requested: k_large + 1, available: cands.len() });
    }
    let selection = greedy_select(backend, ctx, cands, k_large, GreedyOptions::default())?;
    if selection.indices.len() != k_large {
        return Err(Error::Contract("greedy stopped before the large set was complete".into()));
    }
    let rest: Vec<usize> = (0..cands.len()).filter(|i| !selection.indices.contains(i)).collect();
    let pick = rest[ChaCha8Rng::seed_from_u64(seed).random_range(0..rest.len())];

    let segments = embed_candidates(backend, ctx.image(), cands.regions())?;
    let small: Vec<&RegionSegment> = selection.indices[..k_small].iter().map(|&i| &segments[i]).collect();
    let large: Vec<&RegionSegment> = selection.indices.iter().map(|&i| &segments[i]).collect();
    let test = &segments[pick];

    let s_ctx = ctx.extended(small.iter().copied());
    let l_ctx = ctx.extended(large.iter().copied());
    let u_s = entropy_of(backend, &s_ctx, k_large)?;
    let u_s_star = entropy_of(backend, &s_ctx.extended([test]), k_large)?;
    let u_l = entropy_of(backend, &l_ctx, k_large)?;
    let u_l_star = entropy_of(backend, &l_ctx.extended([test]), k_large)?;
    let holds = (u_s - u_s_star) >= (u_l - u_l_star) - SUBMOD_TOLERANCE;
    Ok(SubmodProbeRecord { k_small, test_region: test.region, u_s, u_s_star, u_l, u_l_star, holds })
}
