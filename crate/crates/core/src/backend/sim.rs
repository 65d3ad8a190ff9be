//! Deterministic planted-evidence backend.
//!
//! The next-token entropy is an exact function of which evidence cells the inserted
//! regions cover:
//!
//! ```text
//! H = clamp(base − per_cell · |covered ∩ E| − pair_bonus · #complete_pairs, 0, log2 |V|)
//! ```
//!
//! The distribution realizing `H` puts elevated mass on one answer token and spreads the
//! rest uniformly. Attention over image patches is seeded noise plus `attention_bias` on
//! evidence cells; a description produced by [`SimOracle::describe`] in the prompt
//! multiplies that bias by `1 + cag_gain`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{BackendInfo, GenerationContext, RegionSegment, Segment, StepBackend, StepResult, TextRole, TokenId};
use crate::attention::{softmax_in_place, AttentionSnapshot};
use crate::error::{BackendError, Error, Result};
use crate::geometry::{Cell, GridSpec, Region};
use crate::infogain::TokenDistribution;

pub const END_TOKEN: TokenId = 3;
pub const BOI_TOKEN: TokenId = 4;
pub const EOI_TOKEN: TokenId = 5;
pub const NEWLINE_TOKEN: TokenId = 10;
/// First id above the byte range; answer tokens and vokens live here.
pub const WORD_BASE: TokenId = 256;

/// Prefix of every description the oracle writes; its presence in the prompt switches on
/// the enhancement boost.
pub const DESCRIPTION_MARKER: &str = "Relevant areas:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOracleSpec {
    pub grid: GridSpec,
    pub evidence_cells: BTreeSet<Cell>,
    pub vocab_size: usize,
    pub base_entropy_bits: f64,
    pub per_cell_reduction_bits: f64,
    pub attention_bias: f64,
    /// Relative bias boost when the prompt carries an oracle description.
    pub cag_gain: f64,
    pub noise_seed: u64,
    #[serde(default)]
    pub complementary_pairs: Vec<(Cell, Cell)>,
    #[serde(default)]
    pub pair_bonus_bits: f64,
    pub v_sub: usize,
    pub n_layers: usize,
    /// Generated position from which the answer token becomes the end token.
    pub response_len: usize,
    /// Generated positions whose answer token is a newline.
    #[serde(default)]
    pub newline_at: Vec<usize>,
    /// Reply to `describe` with the prompt itself.
    #[serde(default)]
    pub echo_describe: bool,
}

impl SimOracleSpec {
    pub fn new(grid: GridSpec, evidence_cells: impl IntoIterator<Item = Cell>) -> Self {
        Self {
            grid,
            evidence_cells: evidence_cells.into_iter().collect(),
            vocab_size: 1024,
            base_entropy_bits: 4.0,
            per_cell_reduction_bits: 1.0,
            attention_bias: 0.0,
            cag_gain: 1.0,
            noise_seed: 0,
            complementary_pairs: Vec::new(),
            pair_bonus_bits: 0.0,
            v_sub: 4,
            n_layers: 3,
            response_len: 40,
            newline_at: vec![11, 23, 35],
            echo_describe: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= WORD_BASE as usize + 4 {
            return fail(format!("vocab_size {} must exceed {}", self.vocab_size, WORD_BASE + 4));
        }
        let max_bits = (self.vocab_size as f64).log2();
        if !(0.0..=max_bits).contains(&self.base_entropy_bits) {
            return fail(format!("base entropy {} outside [0, {max_bits}]", self.base_entropy_bits));
        }
        if self.per_cell_reduction_bits < 0.0 || self.pair_bonus_bits < 0.0 {
            return fail("entropy reductions must be non-negative".into());
        }
        if !self.attention_bias.is_finite() || !self.cag_gain.is_finite() {
            return fail("attention bias and gain must be finite".into());
        }
        if self.v_sub < 3 {
            return fail(format!("v_sub {} < 3 cannot encode a region", self.v_sub));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        let g = self.grid.grid_size;
        let in_grid = |&(r, c): &Cell| r < g && c < g;
        if !self.evidence_cells.iter().all(in_grid)
            || !self.complementary_pairs.iter().all(|(a, b)| in_grid(a) && in_grid(b))
        {
            return fail("evidence or pair cell outside the grid".into());
        }
        Ok(())
    }
}

/// The simulated backend.
#[derive(Debug, Clone)]
pub struct SimOracle {
    spec: SimOracleSpec,
    info: BackendInfo,
}

impl SimOracle {
    pub fn new(spec: SimOracleSpec) -> Result<Self> {
        spec.validate()?;
        let info = BackendInfo {
            v_sub: spec.v_sub,
            vocab_size: spec.vocab_size,
            n_layers: spec.n_layers,
            n_patches: spec.grid.cell_count(),
            end_token: END_TOKEN,
            newline_token: NEWLINE_TOKEN,
            boi: BOI_TOKEN,
            eoi: EOI_TOKEN,
        };
        Ok(Self { spec, info })
    }

    pub fn spec(&self) -> &SimOracleSpec {
        &self.spec
    }

    /// Evidence-relevant cells covered by inserted regions, excluding masked cells.
    pub fn covered_cells(&self, ctx: &GenerationContext) -> BTreeSet<Cell> {
        let mask: BTreeSet<Cell> = ctx.mask().iter().copied().collect();
        ctx.regions()
            .filter_map(|r| self.decode_vokens(&r.vokens))
            .flat_map(|(row, col, span)| (row..row + span).flat_map(move |r| (col..col + span).map(move |c| (r, c))))
            .filter(|c| !mask.contains(c))
            .collect()
    }

    /// Entropy the oracle assigns to `ctx`, in bits.
    pub fn target_entropy(&self, ctx: &GenerationContext) -> f64 {
        let covered = self.covered_cells(ctx);
        let hits = covered.intersection(&self.spec.evidence_cells).count();
        let pairs =
            self.spec.complementary_pairs.iter().filter(|(a, b)| covered.contains(a) && covered.contains(b)).count();
        let h = self.spec.base_entropy_bits
            - self.spec.per_cell_reduction_bits * hits as f64
            - self.spec.pair_bonus_bits * pairs as f64;
        h.clamp(0.0, (self.spec.vocab_size as f64).log2())
    }

    fn decode_vokens(&self, vokens: &[TokenId]) -> Option<(usize, usize, usize)> {
        let g = self.spec.grid.grid_size;
        let field = |i: usize| vokens.get(i).and_then(|v| v.checked_sub(WORD_BASE)).map(|v| v as usize);
        let (row, col, span) = (field(0)?, field(1)?, field(2)?);
        (span > 0 && row + span <= g && col + span <= g).then_some((row, col, span))
    }

    fn answer_token(&self, position: usize) -> TokenId {
        if self.spec.newline_at.contains(&position) {
            NEWLINE_TOKEN
        } else if position >= self.spec.response_len {
            END_TOKEN
        } else {
            let span = (self.spec.vocab_size as u64) - u64::from(WORD_BASE);
            WORD_BASE + (mix(self.spec.noise_seed, 0x5EED, position as u64) % span) as TokenId
        }
    }

    fn has_description(&self, ctx: &GenerationContext) -> bool {
        let marker = DESCRIPTION_MARKER.as_bytes();
        ctx.segments().iter().any(|s| match s {
            Segment::Text { role: TextRole::Prompt, tokens } => {
                tokens.windows(marker.len()).any(|w| w.iter().zip(marker).all(|(&t, &b)| t == TokenId::from(b)))
            }
            _ => false,
        })
    }

    fn patch_weights(&self, ctx: &GenerationContext, position: usize, n_patches: usize) -> Vec<f64> {
        let g = self.spec.grid.grid_size;
        let boost = if self.has_description(ctx) { 1.0 + self.spec.cag_gain } else { 1.0 };
        let mask: BTreeSet<Cell> = ctx.mask().iter().copied().collect();
        let cell_of = |p: usize| {
            let side = (n_patches as f64).sqrt().round() as usize;
            if side * side == n_patches && side > 0 {
                ((p / side) * g / side, (p % side) * g / side)
            } else {
                let i = p * g * g / n_patches;
                (i / g, i % g)
            }
        };
        let mut logits: Vec<f64> = (0..n_patches)
            .map(|p| {
                let cell = cell_of(p);
                let noise = 4.0 * (unit(self.spec.noise_seed, p as u64 + 1, position as u64) - 0.5);
                let bias =
                    if self.spec.evidence_cells.contains(&cell) { self.spec.attention_bias * boost } else { 0.0 };
                noise + bias
            })
            .collect();
        softmax_in_place(&mut logits);
        for (p, w) in logits.iter_mut().enumerate() {
            if mask.contains(&cell_of(p)) {
                *w = 0.0;
            }
        }
        logits
    }

    fn attention(&self, ctx: &GenerationContext) -> AttentionSnapshot<f64> {
        let position = ctx.response_len();
        let len = ctx.cursor();
        let mut patches = Vec::new();
        let mut vokens = Vec::new();
        let mut text = Vec::new();
        let mut n_patches = 0;
        let mut offset = 0;
        for seg in ctx.segments() {
            match seg {
                Segment::VisualBase { n_tokens, .. } => {
                    patches.extend(offset..offset + n_tokens);
                    n_patches = *n_tokens;
                }
                Segment::Text { tokens, .. } => text.extend(offset..offset + tokens.len()),
                Segment::VisualRegion(r) => {
                    text.push(offset);
                    vokens.extend(offset + 1..offset + 1 + r.vokens.len());
                    text.push(offset + r.len() - 1);
                }
            }
            offset += seg.len();
        }

        let weights = self.patch_weights(ctx, position, n_patches);
        let patch_total: f64 = weights.iter().sum();
        let mut visual = 0.15 + 0.7 * unit(self.spec.noise_seed, 0xA11, position as u64);
        if text.is_empty() {
            visual = 1.0;
        }
        let voken_share = if vokens.is_empty() { 0.0 } else { 0.3 };
        let patch_share = if patch_total > 0.0 { 1.0 - voken_share } else { 0.0 };
        if patch_share + voken_share == 0.0 {
            visual = 0.0;
        }
        let norm = patch_share + voken_share;

        let mut row = vec![0.0; len];
        if visual > 0.0 {
            for (&pos, w) in patches.iter().zip(&weights) {
                row[pos] = visual * patch_share / norm * w / patch_total.max(f64::MIN_POSITIVE);
            }
            for &pos in &vokens {
                row[pos] = visual * voken_share / norm / vokens.len() as f64;
            }
        }
        for &pos in &text {
            row[pos] = (1.0 - visual) / text.len() as f64;
        }
        if row.iter().sum::<f64>() == 0.0 {
            row.iter_mut().for_each(|v| *v = 1.0 / len as f64);
        }

        let per_layer = (0..self.spec.n_layers)
            .map(|l| {
                let eps = 0.05 * l as f64 / self.spec.n_layers as f64;
                row.iter().map(|v| (1.0 - eps) * v + eps / len as f64).collect()
            })
            .collect();
        let mut visual_indices: Vec<usize> = patches.into_iter().chain(vokens).collect();
        visual_indices.sort_unstable();
        AttentionSnapshot { per_layer, context_len: len, visual_indices }
    }
}

impl StepBackend for SimOracle {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError> {
        let entropy = self.target_entropy(ctx);
        let answer = self.answer_token(ctx.response_len()) as usize;
        let probs = two_level_distribution(entropy, self.spec.vocab_size, answer);
        let distribution = TokenDistribution::new(probs).map_err(|e| BackendError::Invalid(e.to_string()))?;
        Ok(StepResult { distribution, attention: self.attention(ctx) })
    }

    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        suffixes.iter().map(|s| self.evaluate(&base.extended([s]))).collect()
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError> {
        region.validate(&self.spec.grid).map_err(|e| BackendError::Invalid(e.to_string()))?;
        let salt = fnv1a(image.as_bytes());
        let mut ids = vec![
            WORD_BASE + region.row as TokenId,
            WORD_BASE + region.col as TokenId,
            WORD_BASE + region.span as TokenId,
        ];
        ids.extend((3..self.spec.v_sub).map(|i| WORD_BASE + (mix(salt, i as u64, 0) % 64) as TokenId));
        Ok(ids)
    }

    fn describe(&mut self, _image: &str, prompt: &str) -> Result<String, BackendError> {
        if self.spec.echo_describe {
            return Ok(prompt.to_string());
        }
        let cells: Vec<String> = self.spec.evidence_cells.iter().map(|(r, c)| format!("row {r} column {c}")).collect();
        let listed = if cells.is_empty() { "none".to_string() } else { cells.join(", ") };
        Ok(format!("{DESCRIPTION_MARKER} {listed}."))
    }
}

/// Distribution over `vocab` tokens with entropy `bits`: `answer` gets probability `p`,
/// every other token `(1 − p)/(vocab − 1)`, with `p` found by bisection.
pub fn two_level_distribution(bits: f64, vocab: usize, answer: usize) -> Vec<f64> {
    let max_bits = (vocab as f64).log2();
    if vocab == 1 || bits >= max_bits {
        return vec![1.0 / vocab as f64; vocab];
    }
    let mut probs = vec![0.0; vocab];
    if bits <= 0.0 {
        probs[answer] = 1.0;
        return probs;
    }
    let rest = (vocab - 1) as f64;
    let h = |p: f64| {
        let q = 1.0 - p;
        let a = if p > 0.0 { -p * p.log2() } else { 0.0 };
        let b = if q > 0.0 { -q * (q / rest).log2() } else { 0.0 };
        a + b
    };
    // h decreases from log2(vocab) at p = 1/vocab to 0 at p = 1
    let (mut lo, mut hi) = (1.0 / vocab as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > bits {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    let tail = (1.0 - p) / rest;
    probs.iter_mut().for_each(|v| *v = tail);
    probs[answer] = p;
    probs
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(seed: u64, a: u64, b: u64) -> f64 {
    (mix(seed, a, b) >> 11) as f64 / (1u64 << 53) as f64
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::visual_attention_mass;
    use crate::infogain::entropy;

    fn grid() -> GridSpec {
        GridSpec::new(4, 1, 64, 64).unwrap()
    }

    fn oracle(evidence: &[Cell]) -> SimOracle {
        SimOracle::new(SimOracleSpec::new(grid(), evidence.iter().copied())).unwrap()
    }

    fn ctx_with(o: &mut SimOracle, cells: &[Cell]) -> GenerationContext {
        let mut ctx = GenerationContext::new("img", 16);
        ctx.push_text(TextRole::Prompt, b"what is shown?".map(TokenId::from).as_slice());
        for &(r, c) in cells {
            let region = grid().region_from_cell(r, c).unwrap();
            let vokens = o.embed_region("img", &region).unwrap();
            ctx.push_region(RegionSegment { region, vokens, boi: BOI_TOKEN, eoi: EOI_TOKEN });
        }
        ctx
    }

    #[test]
    fn two_level_hits_target_entropy() {
        for vocab in [2usize, 3, 7, 300, 1024] {
            let max = (vocab as f64).log2();
            for i in 0..=20 {
                let target = max * i as f64 / 20.0;
                let d = TokenDistribution::new(two_level_distribution(target, vocab, 0)).unwrap();
                assert!((entropy(&d) - target).abs() < 1e-9, "vocab {vocab} target {target}");
            }
        }
    }

    #[test]
    fn entropy_law_examples() {
        let mut o = oracle(&[(0, 0), (1, 1), (2, 2)]);
        let base = ctx_with(&mut o, &[]);
        assert!((entropy(&o.evaluate(&base).unwrap().distribution) - 4.0).abs() < 1e-9);

        let all = ctx_with(&mut o, &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!((entropy(&o.evaluate(&all).unwrap().distribution) - 1.0).abs() < 1e-9);

        let dup = ctx_with(&mut o, &[(1, 1), (1, 1)]);
        let single = ctx_with(&mut o, &[(1, 1)]);
        let h_dup = entropy(&o.evaluate(&dup).unwrap().distribution);
        assert!((h_dup - 3.0).abs() < 1e-9);
        assert_eq!(h_dup, entropy(&o.evaluate(&single).unwrap().distribution));
    }

    #[test]
    fn entropy_clamped_at_zero_and_pairs_bonus() {
        let mut spec = SimOracleSpec::new(grid(), [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]);
        spec.complementary_pairs = vec![((3, 0), (3, 1))];
        spec.pair_bonus_bits = 1.5;
        let mut o = SimOracle::new(spec).unwrap();
        let all = ctx_with(&mut o, &[(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]);
        assert_eq!(entropy(&o.evaluate(&all).unwrap().distribution), 0.0);
        let one = ctx_with(&mut o, &[(3, 0)]);
        assert!((entropy(&o.evaluate(&one).unwrap().distribution) - 4.0).abs() < 1e-9);
        let both = ctx_with(&mut o, &[(3, 0), (3, 1)]);
        assert!((entropy(&o.evaluate(&both).unwrap().distribution) - 2.5).abs() < 1e-9);
    }

    #[test]
    fn masked_evidence_is_unreachable() {
        let mut o = oracle(&[(0, 0)]);
        let mut ctx = GenerationContext::with_mask("img", 16, vec![(0, 0)]);
        let region = grid().region_from_cell(0, 0).unwrap();
        let vokens = o.embed_region("img", &region).unwrap();
        ctx.push_region(RegionSegment { region, vokens, boi: BOI_TOKEN, eoi: EOI_TOKEN });
        assert!((entropy(&o.evaluate(&ctx).unwrap().distribution) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_are_stochastic_and_sized() {
        let mut o = oracle(&[(0, 0)]);
        let mut ctx = ctx_with(&mut o, &[(2, 3)]);
        ctx.push_text(TextRole::Response, &[300, 301]);
        let res = o.evaluate(&ctx).unwrap();
        res.attention.validate().unwrap();
        assert_eq!(res.attention.context_len, ctx.cursor());
        assert_eq!(res.attention.per_layer.len(), 3);
        // patches plus the four vokens of the inserted region
        assert_eq!(res.attention.visual_indices.len(), 16 + 4);
        let mass = visual_attention_mass(&res.attention).unwrap();
        assert!((0.0..=1.0).contains(&mass));
    }

    #[test]
    fn embed_is_injective_and_fixed_length() {
        let mut o = SimOracle::new(SimOracleSpec::new(GridSpec::new(4, 2, 64, 64).unwrap(), [])).unwrap();
        let g = GridSpec::new(4, 2, 64, 64).unwrap();
        let mut seen = std::collections::HashMap::new();
        for r in 0..3 {
            for c in 0..3 {
                let region = Region::new(&g, r, c, 2).unwrap();
                let ids = o.embed_region("img", &region).unwrap();
                assert_eq!(ids.len(), o.info().v_sub);
                assert_eq!(ids, o.embed_region("img", &region).unwrap());
                assert!(seen.insert(ids, region.key()).is_none());
            }
        }
        let foreign = Region::new(&GridSpec::new(4, 1, 32, 32).unwrap(), 0, 0, 1).unwrap();
        assert!(o.embed_region("img", &foreign).is_err());
    }

    #[test]
    fn description_names_evidence_and_is_deterministic() {
        let mut o = oracle(&[(1, 2)]);
        let a = o.describe("img", "p").unwrap();
        assert_eq!(a, o.describe("img", "p").unwrap());
        assert!(a.starts_with(DESCRIPTION_MARKER) && a.contains("row 1 column 2"));
        let mut spec = o.spec().clone();
        spec.echo_describe = true;
        assert_eq!(SimOracle::new(spec).unwrap().describe("img", "prompt text").unwrap(), "prompt text");
    }

    #[test]
    fn spec_validation() {
        let mut s = SimOracleSpec::new(grid(), [(0, 0)]);
        s.base_entropy_bits = 11.0;
        assert!(SimOracle::new(s.clone()).is_err());
        s.base_entropy_bits = 4.0;
        s.evidence_cells.insert((4, 0));
        assert!(SimOracle::new(s.clone()).is_err());
        s.evidence_cells.remove(&(4, 0));
        s.v_sub = 2;
        assert!(SimOracle::new(s).is_err());
    }
}
