//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNATTAINABLE` are still checked exactly as stated and reported
//! as FAIL when they fail; they do not fail the run. Any other failure does.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use aimcot_core::backend::sim::{SimOracle, SimOracleSpec};
use aimcot_core::backend::{CountingBackend, GenerationContext, StepBackend, TextRole};
use aimcot_core::candidates::CandidateSet;
use aimcot_core::config::Resolved;
use aimcot_core::decode::encode_text;
use aimcot_core::experiments::selection_contrast;
use aimcot_core::infogain::{embed_candidates, entropy, greedy_select, information_gain, GreedyOptions};
use aimcot_core::stats::{
    binom_test_one_sided, group_analysis, synchronized_insertion_analysis, ResponseScorePair, TTestVariant,
};
use aimcot_core::trace::{Insertion, TokenEntry, TraceRecord};
use aimcot_core::trigger::{count_fires, TriggerConfig, TriggerMode};
use aimcot_core::{GridSpec, Region, TokenDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The 38/60 row: the exact upper tail is 0.025947, outside 0.0249 ± 0.0005.
const KNOWN_UNATTAINABLE: &[&str] = &["binomial"];

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, || format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn binomial() -> Check {
    let started = Instant::now();
    let rows = [(37u64, 0.0462), (41, 0.0031), (38, 0.0249)];
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for (k, want) in rows {
        let got = binom_test_one_sided(k, 60, 0.5).map_err(|e| e.to_string())?;
        notes.push(format!("{k}/60={got:.6}"));
        if (got - want).abs() > 0.0005 {
            failures.push(format!("{k}/60 gives {got:.6}, expected {want} ± 0.0005"));
        }
    }
    let k = (0.72f64 * 2318.0).round() as u64;
    let big = binom_test_one_sided(k, 2318, 0.5).map_err(|e| e.to_string())?;
    notes.push(format!("{k}/2318={big:.3e}"));
    if big >= 1e-6 {
        failures.push(format!("{k}/2318 gives {big}"));
    }
    within_budget(started.elapsed(), Duration::from_secs(1))?;
    if failures.is_empty() {
        Ok(notes.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

fn entropy_ig() -> Check {
    let started = Instant::now();
    let d = |p: &[f64]| TokenDistribution::new(p.to_vec()).map_err(|e| e.to_string());
    let cases = [(vec![0.25; 4], 2.0), (vec![0.5, 0.25, 0.25], 1.5), (vec![0.5, 0.5], 1.0), (vec![0.0, 1.0, 0.0], 0.0)];
    for (p, bits) in &cases {
        let h = entropy(&d(p)?);
        ensure((h - bits).abs() < 1e-9, || format!("H({p:?}) = {h}, expected {bits}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let p = d(&raw.iter().map(|x| x / total).collect::<Vec<_>>())?;
        let h = entropy(&p);
        ensure(h >= -1e-9 && h <= (n as f64).log2() + 1e-9, || format!("H out of [0, log2 {n}]: {h}"))?;
    }
    let (sharp, flat) = (d(&[0.5, 0.25, 0.25])?, d(&[0.25; 4])?);
    let ig = information_gain(&flat, &sharp);
    ensure((ig - 0.5).abs() < 1e-9, || format!("IG(flat -> sharp) = {ig}"))?;
    ensure((information_gain(&sharp, &flat) + 0.5).abs() < 1e-9, || "negative IG case".into())?;
    ensure(information_gain(&flat, &flat).abs() < 1e-9, || "zero IG case".into())?;
    within_budget(started.elapsed(), Duration::from_secs(1))?;
    Ok("dyadic values, bounds and IG sign cases exact to 1e-9".into())
}

struct Instance {
    oracle: SimOracle,
    ctx: GenerationContext,
    cands: CandidateSet,
    k: usize,
}

fn instance(seed: u64, complementary: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_g = rng.random_range(3..=4);
    let grid = GridSpec::new(s_g, 1, 48, 48).expect("valid grid");
    let mut cells: Vec<_> = (0..grid.cell_count()).map(|i| grid.cell_at(i)).collect();
    let evidence: Vec<_> =
        (0..rng.random_range(1..=4)).map(|_| cells.swap_remove(rng.random_range(0..cells.len()))).collect();
    let mut spec = SimOracleSpec::new(grid, evidence.clone());
    spec.noise_seed = seed;
    spec.base_entropy_bits = 6.0;
    spec.per_cell_reduction_bits = rng.random_range(0.5..1.5);
    if complementary && evidence.len() >= 2 {
        spec.complementary_pairs = vec![(evidence[0], evidence[1])];
        spec.pair_bonus_bits = rng.random_range(0.5..2.0);
    }
    let n_c = rng.random_range(1..=8);
    let mut regions: Vec<Region> = Vec::new();
    while regions.len() < n_c {
        let span = if rng.random_bool(0.3) { 2 } else { 1 };
        let region = Region::new(&grid, rng.random_range(0..=s_g - span), rng.random_range(0..=s_g - span), span)
            .expect("in range");
        if !regions.iter().any(|x| x.key() == region.key()) {
            regions.push(region);
        }
    }
    let exploratory = regions.split_off(rng.random_range(0..=n_c));
    let cands = CandidateSet::new(regions, exploratory).expect("distinct");
    let k = rng.random_range(1..=3.min(n_c));
    let oracle = SimOracle::new(spec).expect("valid spec");
    let mut ctx = GenerationContext::new("image", oracle.info().n_patches);
    ctx.push_text(TextRole::Prompt, &encode_text("what is shown?"));
    Instance { oracle, ctx, cands, k }
}

fn optimum(inst: &mut Instance) -> Result<f64, String> {
    let segs = embed_candidates(&mut inst.oracle, "image", inst.cands.regions()).map_err(|e| e.to_string())?;
    let base = entropy(&inst.oracle.evaluate(&inst.ctx).map_err(|e| e.to_string())?.distribution);
    let n = inst.cands.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != inst.k {
            continue;
        }
        let ctx = inst.ctx.extended((0..n).filter(|i| mask >> i & 1 == 1).map(|i| &segs[i]));
        let h = entropy(&inst.oracle.evaluate(&ctx).map_err(|e| e.to_string())?.distribution);
        best = best.max(base - h);
    }
    Ok(best)
}

fn greedy_vs_oracle() -> Check {
    let started = Instant::now();
    let mut below = 0;
    for seed in 0..200 {
        for complementary in [false, true] {
            let mut inst = instance(seed + if complementary { 10_000 } else { 0 }, complementary);
            let got = greedy_select(&mut inst.oracle, &inst.ctx, &inst.cands, inst.k, GreedyOptions::default())
                .map_err(|e| e.to_string())?
                .total_gain();
            let best = optimum(&mut inst)?;
            if complementary {
                ensure(got <= best + 1e-9, || format!("seed {seed}: greedy {got} exceeds optimum {best}"))?;
                below += usize::from(got < best - 1e-9);
            } else {
                ensure((got - best).abs() < 1e-9, || format!("seed {seed}: greedy {got} vs optimum {best}"))?;
            }
        }
    }
    within_budget(started.elapsed(), Duration::from_secs(30))?;
    Ok(format!("200 additive exact, 200 complementary bounded ({below} strictly below)"))
}

fn call_accounting() -> Check {
    let started = Instant::now();
    let grid = GridSpec::new(4, 1, 64, 64).expect("valid grid");
    let mut cases = 0;
    for n_c in 1..=8 {
        for k in 1..=n_c {
            let regions: Vec<Region> = (0..n_c)
                .map(|i| {
                    let (r, c) = grid.cell_at(i);
                    grid.region_from_cell(r, c).expect("in range")
                })
                .collect();
            let cands = CandidateSet::new(regions, vec![]).expect("distinct");
            let mut backend =
                CountingBackend::new(SimOracle::new(SimOracleSpec::new(grid, [(1, 1)])).expect("valid spec"));
            let ctx = GenerationContext::new("image", backend.info().n_patches);
            greedy_select(&mut backend, &ctx, &cands, k, GreedyOptions::default()).map_err(|e| e.to_string())?;
            let expected = k + k * n_c - k * (k - 1) / 2;
            let got = backend.counts().evaluation_requests;
            ensure(got == expected, || format!("K={k} N_C={n_c}: {got} requests, expected {expected}"))?;
            cases += 1;
        }
    }
    within_budget(started.elapsed(), Duration::from_secs(5))?;
    Ok(format!("{cases} (K, N_C) pairs"))
}

fn trigger_monotonicity() -> Check {
    let started = Instant::now();
    let deltas = [0.0, 0.05, 0.1, 0.2, 0.35, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut totals = vec![0usize; deltas.len()];
    for seq in 0..100 {
        let len = rng.random_range(20..200);
        let masses: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let counts: Vec<usize> = deltas
            .iter()
            .map(|&delta| {
                count_fires(&TriggerConfig { delta, n_layers: 1, mode: TriggerMode::AttentionShift }, &masses)
            })
            .collect();
        ensure(counts.windows(2).all(|w| w[0] >= w[1]), || format!("sequence {seq}: fires {counts:?}"))?;
        totals.iter_mut().zip(&counts).for_each(|(t, c)| *t += c);
    }
    within_budget(started.elapsed(), Duration::from_secs(5))?;
    Ok(format!("total fires over the sweep {totals:?}"))
}

fn planted_contrast() -> Check {
    let started = Instant::now();
    let base = Resolved::defaults();
    let weak = selection_contrast(&base, 0.0, 3, 0..100).map_err(|e| e.to_string())?;
    ensure(weak.mean_avp > weak.mean_topk, || format!("bias 0: AVP {} vs TopK {}", weak.mean_avp, weak.mean_topk))?;
    ensure(weak.sign_p < 0.05, || format!("bias 0: sign test p = {}", weak.sign_p))?;
    let strong = selection_contrast(&base, 8.0, 3, 0..100).map_err(|e| e.to_string())?;
    ensure(strong.difference().abs() <= 0.05, || format!("bias 8: difference {}", strong.difference()))?;
    within_budget(started.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "bias 0: AVP {:.3} vs TopK {:.3} ({}W/{}L, p={:.2e}); bias 8: difference {:+.3}",
        weak.mean_avp,
        weak.mean_topk,
        weak.wins,
        weak.losses,
        weak.sign_p,
        strong.difference()
    ))
}

fn fixture(id: &str, synced: usize) -> TraceRecord {
    let mut entries =
        vec![TokenEntry { index: 0, token: 300, a_visual: 0.5, delta: None, fired: false, insertion: None }];
    for d in 1..=20usize {
        let inserted = [17, 18, 19, 20][..synced].contains(&d) || [2, 4, 6, 8][..4 - synced].contains(&d);
        let insertion =
            inserted.then(|| Insertion { regions: vec![], sources: vec![], gains: vec![], backend_calls: 0 });
        entries.push(TokenEntry {
            index: d,
            token: 300,
            a_visual: 0.5,
            delta: Some(d as f64),
            fired: inserted,
            insertion,
        });
    }
    TraceRecord { question_id: id.into(), entries, ..Default::default() }
}

fn synchronized_pipeline() -> Check {
    let mut traces = Vec::new();
    let mut scores = BTreeMap::new();
    for (i, synced) in [0, 1, 2, 3, 4, 2, 1, 3, 0, 4].into_iter().enumerate() {
        let id = format!("r{i:02}");
        traces.push(fixture(&id, synced));
        scores.insert(id, synced as f64 / 4.0);
    }
    let sync = synchronized_insertion_analysis(&traces, &scores, 0.8).map_err(|e| e.to_string())?;
    ensure((sync.r - 1.0).abs() <= 1e-9, || format!("r = {}", sync.r))?;

    let pairs: Vec<ResponseScorePair> = (0..10)
        .map(|i| ResponseScorePair {
            question_id: format!("g{i}"),
            proportion_synchronized: if i >= 5 { 1.0 } else { 0.0 },
            score: i as f64,
        })
        .collect();
    let g = group_analysis(&pairs, TTestVariant::Student).map_err(|e| e.to_string())?;
    ensure(g.mean_high == 1.0 && g.mean_low == 0.0, || format!("means {} / {}", g.mean_high, g.mean_low))?;
    Ok(format!("r = {:.12}, mean_high = {}, mean_low = {}", sync.r, g.mean_high, g.mean_low))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let args =
            ["aimcot", "generate", "--seed", "7", "--set", "delta=0.2", "--out", out.to_str().expect("utf-8 path")];
        let (mut so, mut se) = (Vec::new(), Vec::new());
        let code = aimcot_cli::run(args, vec![], &mut so, &mut se);
        ensure(code == 0, || format!("generate exited {code}: {}", String::from_utf8_lossy(&se)))?;
        outputs.push(std::fs::read(out.join("trace.jsonl")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "trace files differ".into())?;
    Ok(format!("{} identical bytes", outputs[0].len()))
}

fn tiling() -> Check {
    let mut specs = 0;
    for s_g in 1..=8 {
        for w in 8..=33u32 {
            for h in 8..=33u32 {
                let g = GridSpec::new(s_g, 1, w, h).map_err(|e| e.to_string())?;
                let mut seen = vec![false; (w * h) as usize];
                for i in 0..g.cell_count() {
                    let (r, c) = g.cell_at(i);
                    let b = g.cell_bbox(r, c).map_err(|e| e.to_string())?;
                    for y in b.y0..b.y1 {
                        for x in b.x0..b.x1 {
                            let slot = &mut seen[(y * w + x) as usize];
                            ensure(!*slot, || format!("overlap at ({x},{y}) for s_g={s_g} {w}x{h}"))?;
                            *slot = true;
                        }
                    }
                }
                ensure(seen.iter().all(|&s| s), || format!("gap for s_g={s_g} {w}x{h}"))?;
                specs += 1;
            }
        }
    }
    Ok(format!("{specs} grid specs tile exactly"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("binomial", binomial),
        ("entropy_ig", entropy_ig),
        ("greedy_vs_oracle", greedy_vs_oracle),
        ("call_accounting", call_accounting),
        ("trigger_monotonicity", trigger_monotonicity),
        ("planted_contrast", planted_contrast),
        ("synchronized_pipeline", synchronized_pipeline),
        ("determinism", determinism),
        ("tiling", tiling),
    ];
    let mut unexpected = Vec::new();
    let mut known = Vec::new();
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                println!("FAIL {name} ({secs:.2}s): {why}");
                if KNOWN_UNATTAINABLE.contains(&name) {
                    known.push(name);
                } else {
                    unexpected.push(name);
                }
            }
        }
    }
    println!(
        "acceptance: {} passed, {} failed ({} known unattainable: {})",
        criteria.len() - known.len() - unexpected.len(),
        known.len() + unexpected.len(),
        known.len(),
        if known.is_empty() { "none".to_string() } else { known.join(", ") }
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
