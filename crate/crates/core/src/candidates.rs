//! Candidate region pools: attention-driven top cells plus an exploratory sample.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::GridAttentionMap;
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Region};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Attention,
    Exploratory,
}

impl Source {
    pub fn short(&self) -> &'static str {
        match self {
            Source::Attention => "attn",
            Source::Exploratory => "exp",
        }
    }
}

/// Ordered candidate pool: `n` attention candidates followed by `m` exploratory ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    regions: Vec<Region>,
    sources: Vec<Source>,
    n: usize,
    m: usize,
}

impl CandidateSet {
    pub fn new(attention: Vec<Region>, exploratory: Vec<Region>) -> Result<Self> {
        let (n, m) = (attention.len(), exploratory.len());
        let regions: Vec<Region> = attention.into_iter().chain(exploratory).collect();
        let mut seen = HashSet::new();
        for r in &regions {
            if !seen.insert(r.key()) {
                return Err(Error::Contract(format!("duplicate candidate region {:?}", r.key())));
            }
        }
        let sources =
            std::iter::repeat_n(Source::Attention, n).chain(std::iter::repeat_n(Source::Exploratory, m)).collect();
        Ok(Self { regions, sources, n, m })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn attention_count(&self) -> usize {
        self.n
    }

    pub fn exploratory_count(&self) -> usize {
        self.m
    }
}

/// Distinct regions reachable from anchors, in row-major order of their first anchor.
fn reachable_regions(spec: &GridSpec) -> Result<Vec<Region>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..spec.cell_count() {
        let (r, c) = spec.cell_at(i);
        let region = spec.region_from_cell(r, c)?;
        if seen.insert(region.key()) {
            out.push(region);
        }
    }
    Ok(out)
}

/// Regions anchored at the `n` highest-scoring cells, best first. Ties go to the smaller
/// row-major index. Anchors whose clamped region repeats an earlier pick are skipped.
pub fn top_n_attention<T: Real>(map: &GridAttentionMap<T>, n: usize, spec: &GridSpec) -> Result<Vec<Region>> {
    if map.grid_size() != spec.grid_size {
        return Err(Error::Shape(format!("{0}x{0} map for a {1}x{1} grid", map.grid_size(), spec.grid_size)));
    }
    if n > spec.cell_count() {
        return Err(Error::Capacity { requested: n, available: spec.cell_count() });
    }
    let scores = map.scores();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for idx in order {
        if out.len() == n {
            break;
        }
        let (r, c) = spec.cell_at(idx);
        let region = spec.region_from_cell(r, c)?;
        if seen.insert(region.key()) {
            out.push(region);
        }
    }
    if out.len() < n {
        return Err(Error::Capacity { requested: n, available: out.len() });
    }
    Ok(out)
}

/// Source of exploratory candidates. Only uniform sampling ships; segmentation or
/// proposal-network pools plug in here.
pub trait ExploratorySampler {
    fn sample(&self, spec: &GridSpec, m: usize, exclude: &[Region], seed: u64) -> Result<Vec<Region>>;
}

/// Uniform sampling without replacement over regions not already excluded.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSampler;

impl ExploratorySampler for UniformSampler {
    fn sample(&self, spec: &GridSpec, m: usize, exclude: &[Region], seed: u64) -> Result<Vec<Region>> {
        if m == 0 {
            return Ok(Vec::new());
        }
        let excluded: HashSet<_> = exclude.iter().map(Region::key).collect();
        let eligible: Vec<Region> =
            reachable_regions(spec)?.into_iter().filter(|r| !excluded.contains(&r.key())).collect();
        if m > eligible.len() {
            return Err(Error::Capacity { requested: m, available: eligible.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(rand::seq::index::sample(&mut rng, eligible.len(), m).into_iter().map(|i| eligible[i]).collect())
    }
}

pub fn exploratory_sample(spec: &GridSpec, m: usize, exclude: &[Region], seed: u64) -> Result<Vec<Region>> {
    UniformSampler.sample(spec, m, exclude, seed)
}

pub fn build_candidates<T: Real>(
    map: &GridAttentionMap<T>,
    n: usize,
    m: usize,
    spec: &GridSpec,
    seed: u64,
) -> Result<CandidateSet> {
    build_candidates_with(&UniformSampler, map, n, m, spec, seed)
}

pub fn build_candidates_with<T: Real, S: ExploratorySampler + ?Sized>(
    sampler: &S,
    map: &GridAttentionMap<T>,
    n: usize,
    m: usize,
    spec: &GridSpec,
    seed: u64,
) -> Result<CandidateSet> {
    if n + m > spec.cell_count() {
        return Err(Error::Capacity { requested: n + m, available: spec.cell_count() });
    }
    let attention = top_n_attention(map, n, spec)?;
    let exploratory = sampler.sample(spec, m, &attention, seed)?;
    CandidateSet::new(attention, exploratory)
}
