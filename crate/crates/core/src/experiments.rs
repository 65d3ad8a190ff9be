//! Seeded experiments on the planted-evidence oracle: the region-selection contrast, the
//! diminishing-returns probe batch, the masking sweep and the ablation matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::sim::{SimOracle, SimOracleSpec};
use crate::backend::{GenerationContext, StepBackend, TextRole};
use crate::candidates::build_candidates;
use crate::config::{Resolved, RunConfig, SelectionMode};
use crate::decode::encode_text;
use crate::error::{Error, Result};
use crate::geometry::{Cell, GridSpec};
use crate::infogain::submodularity_probe;
use crate::orchestrator::{candidate_seed, generate, grid_map_from_snapshot, mask_probe, Request};
use crate::stats::binom_test_one_sided;
use crate::trace::TraceRecord;
use crate::trigger::TriggerMode;

pub const DEFAULT_QUESTION: &str = "What in the image answers the question?";

/// `count` distinct evidence cells drawn uniformly for instance `seed`.
pub fn planted_evidence(grid: &GridSpec, count: usize, seed: u64) -> Result<Vec<Cell>> {
    let cells = grid.cell_count();
    if count > cells {
        return Err(Error::Capacity { requested: count, available: cells });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE71D_E7CE);
    let mut picked: Vec<Cell> = sample(&mut rng, cells, count).into_iter().map(|i| grid.cell_at(i)).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Oracle spec for instance `seed`: the configured settings with fresh evidence and noise.
pub fn planted_spec(base: &Resolved, evidence_count: usize, seed: u64) -> Result<SimOracleSpec> {
    let mut spec = base.sim_spec()?;
    spec.evidence_cells = planted_evidence(&spec.grid, evidence_count, seed)?.into_iter().collect();
    spec.noise_seed = seed;
    Ok(spec)
}

/// Share of evidence cells covered by any inserted region.
pub fn evidence_recall(trace: &TraceRecord, evidence: &BTreeSet<Cell>) -> f64 {
    if evidence.is_empty() {
        return 0.0;
    }
    trace.inserted_cells().intersection(evidence).count() as f64 / evidence.len() as f64
}

fn run_one(
    spec: SimOracleSpec,
    cfg: &RunConfig,
    question_id: String,
    echo: BTreeMap<String, serde_json::Value>,
) -> Result<TraceRecord> {
    let mut oracle = SimOracle::new(spec)?;
    generate(&mut oracle, &Request::new(question_id, DEFAULT_QUESTION), cfg, echo)?.into_result()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub attention_bias: f64,
    pub seeds: usize,
    /// Per-seed `(information-gain recall, top-k recall)`.
    pub pairs: Vec<(f64, f64)>,
    pub mean_avp: f64,
    pub mean_topk: f64,
    pub wins: u64,
    pub losses: u64,
    /// One-sided sign test of wins among non-tied seeds.
    pub sign_p: f64,
}

impl ContrastReport {
    pub fn difference(&self) -> f64 {
        self.mean_avp - self.mean_topk
    }
}

/// Runs both selection modes on `seeds` planted instances with one insertion each and
/// compares the share of evidence they insert.
pub fn selection_contrast(
    base: &Resolved,
    attention_bias: f64,
    evidence_count: usize,
    seeds: std::ops::Range<u64>,
) -> Result<ContrastReport> {
    let mut pairs = Vec::new();
    for seed in seeds.clone() {
        let mut spec = planted_spec(base, evidence_count, seed)?;
        spec.attention_bias = attention_bias;
        let evidence = spec.evidence_cells.clone();
        let recall = |selection| -> Result<f64> {
            let cfg = RunConfig { selection, max_insertions: 1, seed, ..base.run.clone() };
            let t = run_one(spec.clone(), &cfg, format!("s{seed}"), BTreeMap::new())?;
            Ok(evidence_recall(&t, &evidence))
        };
        pairs.push((recall(SelectionMode::Avp)?, recall(SelectionMode::TopK)?));
    }
    let n = pairs.len().max(1) as f64;
    let wins = pairs.iter().filter(|(a, t)| a > t).count() as u64;
    let losses = pairs.iter().filter(|(a, t)| a < t).count() as u64;
    let sign_p = if wins + losses == 0 { 1.0 } else { binom_test_one_sided(wins, wins + losses, 0.5)? };
    Ok(ContrastReport {
        attention_bias,
        seeds: pairs.len(),
        mean_avp: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_topk: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        pairs,
        wins,
        losses,
        sign_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmodRow {
    pub k_small: usize,
    pub n: u64,
    pub holds: u64,
    pub proportion: f64,
    pub p_value: f64,
}

/// Runs `n` diminishing-returns probes for every `k_small` and tests each row's success
/// count against a fair coin.
pub fn submodularity_batch(
    base: &Resolved,
    evidence_count: usize,
    n: u64,
    k_smalls: &[usize],
    seed: u64,
) -> Result<Vec<SubmodRow>> {
    let grid = base.run.grid()?;
    let mut rows = Vec::new();
    for &k_small in k_smalls {
        let mut holds = 0;
        for i in 0..n {
            let inst = seed.wrapping_add(i).wrapping_add((k_small as u64) << 32);
            let spec = planted_spec(base, evidence_count, inst)?;
            let mut oracle = SimOracle::new(spec)?;
            let mut ctx = GenerationContext::new(base.run.image.clone(), oracle.info().n_patches);
            ctx.push_text(TextRole::Prompt, &encode_text(DEFAULT_QUESTION));
            let step = oracle.evaluate(&ctx)?;
            let map = grid_map_from_snapshot(&step.attention, &ctx, base.run.trigger.n_layers, grid.grid_size)?;
            let cands = build_candidates(&map, base.run.n, base.run.m, &grid, candidate_seed(inst, 0))?;
            if submodularity_probe(&mut oracle, &ctx, &cands, k_small, inst)?.holds {
                holds += 1;
            }
        }
        rows.push(SubmodRow {
            k_small,
            n,
            holds,
            proportion: if n == 0 { 0.0 } else { holds as f64 / n as f64 },
            p_value: binom_test_one_sided(holds, n, 0.5)?,
        });
    }
    Ok(rows)
}

fn fmt_p(p: f64) -> String {
    if p < 1e-6 {
        "<1e-6".into()
    } else {
        format!("{p:.4}")
    }
}

pub fn render_submod_table(rows: &[SubmodRow]) -> String {
    let mut out = String::new();
    let header: Vec<String> = rows.iter().map(|r| r.k_small.to_string()).collect();
    let props: Vec<String> = rows.iter().map(|r| format!("{:.2}%", 100.0 * r.proportion)).collect();
    let ps: Vec<String> = rows.iter().map(|r| fmt_p(r.p_value)).collect();
    let _ = writeln!(out, "K_small\t{}", header.join("\t"));
    let _ = writeln!(out, "Proportion\t{}", props.join("\t"));
    let _ = writeln!(out, "p-value\t{}", ps.join("\t"));
    let _ = writeln!(out, "n\t{}", rows.iter().map(|r| r.n.to_string()).collect::<Vec<_>>().join("\t"));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub k_mask: usize,
    /// Mean share of evidence cells hidden by the mask.
    pub evidence_masked: f64,
    /// Mean share of evidence cells inserted and still visible.
    pub recall: f64,
    /// Relative recall loss against the unmasked run, in percent.
    pub degradation: f64,
}

/// Masks the most attended cells before generating, for each `k_mask` (capped at the
/// number of cells), and measures how much reachable evidence is lost.
pub fn mask_sweep(
    base: &Resolved,
    evidence_count: usize,
    k_masks: &[usize],
    seeds: std::ops::Range<u64>,
) -> Result<Vec<MaskRow>> {
    let cells = base.run.grid()?.cell_count();
    let mut rows: Vec<MaskRow> = Vec::new();
    for &k in k_masks {
        let k = k.min(cells);
        let (mut masked_sum, mut recall_sum) = (0.0, 0.0);
        for seed in seeds.clone() {
            let spec = planted_spec(base, evidence_count, seed)?;
            let evidence = spec.evidence_cells.clone();
            let mut oracle = SimOracle::new(spec)?;
            let cfg = RunConfig { seed, ..base.run.clone() };
            let t =
                mask_probe(&mut oracle, &Request::new(format!("s{seed}"), DEFAULT_QUESTION), k, &cfg, BTreeMap::new())?
                    .into_result()?;
            let mask: BTreeSet<Cell> = t.mask.iter().copied().collect();
            let visible: BTreeSet<Cell> = evidence.difference(&mask).copied().collect();
            masked_sum += (evidence.len() - visible.len()) as f64 / evidence.len().max(1) as f64;
            recall_sum += t.inserted_cells().intersection(&visible).count() as f64 / evidence.len().max(1) as f64;
        }
        let n = seeds.clone().count().max(1) as f64;
        let recall = recall_sum / n;
        let degradation = match rows.first() {
            Some(r0) if r0.recall > 0.0 => 100.0 * (r0.recall - recall) / r0.recall,
            _ => 0.0,
        };
        rows.push(MaskRow { k_mask: k, evidence_masked: masked_sum / n, recall, degradation });
    }
    Ok(rows)
}

pub fn render_mask_table(rows: &[MaskRow]) -> String {
    let mut out = String::from("K_mask\tevidence_masked\trecall\tdegradation\n");
    for r in rows {
        let _ =
            writeln!(out, "{}\t{:.2}%\t{:.4}\t{:.2}%", r.k_mask, 100.0 * r.evidence_masked, r.recall, r.degradation);
    }
    out
}

/// One cell of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub name: String,
    pub cag: bool,
    pub selection: SelectionMode,
    pub trigger: TriggerMode,
}

impl AblationMode {
    fn new(name: &str, cag: bool, selection: SelectionMode, trigger: TriggerMode) -> Self {
        Self { name: name.into(), cag, selection, trigger }
    }

    /// Named modes: `aimcot`, `wo_cag`, `wo_avp`, `wo_dat`, or a matrix cell written as
    /// `cag|nocag` + `avp|topk` + `shift|newline` joined by `-`, e.g. `nocag-topk-newline`.
    pub fn parse(name: &str) -> Result<Self> {
        use SelectionMode::*;
        use TriggerMode::*;
        Ok(match name {
            "aimcot" => Self::new(name, true, Avp, AttentionShift),
            "wo_cag" => Self::new(name, false, Avp, AttentionShift),
            "wo_avp" => Self::new(name, true, TopK, AttentionShift),
            "wo_dat" => Self::new(name, true, Avp, Newline),
            _ => {
                let parts: Vec<&str> = name.split('-').collect();
                let [c, s, t] = parts.as_slice() else {
                    return Err(Error::Config(format!("unknown ablation mode {name:?}")));
                };
                let cag = match *c {
                    "cag" => true,
                    "nocag" => false,
                    _ => return Err(Error::Config(format!("unknown ablation mode {name:?}"))),
                };
                let selection = match *s {
                    "avp" => Avp,
                    "topk" => TopK,
                    _ => return Err(Error::Config(format!("unknown ablation mode {name:?}"))),
                };
                let trigger = match *t {
                    "shift" => AttentionShift,
                    "newline" => Newline,
                    _ => return Err(Error::Config(format!("unknown ablation mode {name:?}"))),
                };
                Self::new(name, cag, selection, trigger)
            }
        })
    }

    /// All eight combinations.
    pub fn full_matrix() -> Vec<Self> {
        let mut out = Vec::new();
        for c in ["cag", "nocag"] {
            for s in ["avp", "topk"] {
                for t in ["shift", "newline"] {
                    out.push(Self::parse(&format!("{c}-{s}-{t}")).expect("matrix names parse"));
                }
            }
        }
        out
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.cag = self.cag;
        c.selection = self.selection;
        c.trigger.mode = self.trigger;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub recall: f64,
    pub insertions: f64,
    /// Mean exploratory share over responses with insertions.
    pub p_exp: Option<f64>,
}

pub fn ablation(
    base: &Resolved,
    modes: &[AblationMode],
    evidence_count: usize,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<AblationRow>> {
    if modes.is_empty() {
        return Err(Error::Config("no ablation modes given".into()));
    }
    let mut rows = Vec::new();
    for mode in modes {
        let cfg = mode.apply(&base.run);
        let (mut recall, mut ins, mut pexp, mut pexp_n) = (0.0, 0.0, 0.0, 0usize);
        for seed in seeds.clone() {
            let spec = planted_spec(base, evidence_count, seed)?;
            let evidence = spec.evidence_cells.clone();
            let t = run_one(spec, &RunConfig { seed, ..cfg.clone() }, format!("s{seed}"), BTreeMap::new())?;
            recall += evidence_recall(&t, &evidence);
            ins += t.insertion_count() as f64;
            if let Some(p) = t.p_exp() {
                pexp += p;
                pexp_n += 1;
            }
        }
        let n = seeds.clone().count().max(1) as f64;
        rows.push(AblationRow {
            mode: mode.clone(),
            recall: recall / n,
            insertions: ins / n,
            p_exp: (pexp_n > 0).then(|| pexp / pexp_n as f64),
        });
    }
    Ok(rows)
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode\tcag\tselection\ttrigger\trecall\tinsertions\tp_exp\n");
    for r in rows {
        let sel = match r.mode.selection {
            SelectionMode::Avp => "avp",
            SelectionMode::TopK => "topk",
        };
        let p = r.p_exp.map_or("-".to_string(), |p| format!("{:.2}%", 100.0 * p));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}\t{:.2}\t{}",
            r.mode.name,
            if r.mode.cag { "on" } else { "off" },
            sel,
            r.mode.trigger.name(),
            r.recall,
            r.insertions,
            p
        );
    }
    out
}

/// Generates `count` planted instances and scores each response by its evidence recall.
pub fn scored_corpus(base: &Resolved, evidence_count: usize, count: u64) -> Result<Vec<(TraceRecord, f64)>> {
    let echo = base.echo();
    (0..count)
        .map(|i| {
            let seed = base.run.seed.wrapping_add(i);
            let spec = planted_spec(base, evidence_count, seed)?;
            let evidence = spec.evidence_cells.clone();
            let t = run_one(spec, &RunConfig { seed, ..base.run.clone() }, format!("q{i:04}"), echo.clone())?;
            let score = evidence_recall(&t, &evidence);
            Ok((t, score))
        })
        .collect()
}
