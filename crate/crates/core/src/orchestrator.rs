//! The generation loop: context enhancement, decoding, trigger-gated region insertion and
//! trace emission.

use std::collections::BTreeMap;

use crate::attention::{pool_to_grid, AttentionSnapshot, Matrix, PatchMap, RowReduction};
use crate::backend::{GenerationContext, RegionSegment, StepBackend, TextRole};
use crate::candidates::{build_candidates, top_n_attention, Source};
use crate::config::{MapSource, RunConfig, SelectionMode};
use crate::decode::{decode_tokens, encode_text, token_text, Sampler};
use crate::error::{Error, Result};
use crate::geometry::{Cell, GridSpec};
use crate::infogain::{embed_candidates, greedy_select, GreedyOptions};
use crate::trace::{Insertion, TokenEntry, TraceRecord};
use crate::trigger::{Decision, TriggerState};
use crate::GridAttentionMap;

/// Description prompt; `{question}` is replaced by the question text.
pub const CAG_TEMPLATE: &str = "Describe the image in detail, focusing on the visual content that helps \
answer the following question.\nQuestion: {question}";

pub const MULTIPLE_CHOICE_PREAMBLE: &str =
    "This is a multiple-choice question. The question is based on the image provided.";

/// Placed between the question and the generated description.
pub const CAG_SEPARATOR: &str = "\n[Image description]\n";

const QUESTION_PLACEHOLDER: &str = "{question}";

/// Renders the description prompt for `question`.
pub fn render_cag_prompt(template: &str, question: &str, multiple_choice: bool) -> Result<String> {
    if !template.contains(QUESTION_PLACEHOLDER) {
        return Err(Error::Template(QUESTION_PLACEHOLDER));
    }
    let body = template.replace(QUESTION_PLACEHOLDER, question);
    Ok(if multiple_choice { format!("{MULTIPLE_CHOICE_PREAMBLE}\n{body}") } else { body })
}

/// Grid map of the base-image patches in one attention snapshot, averaged over the last
/// `n_layers` layers.
pub fn grid_map_from_snapshot(
    snap: &AttentionSnapshot<f64>,
    ctx: &GenerationContext,
    n_layers: usize,
    grid_size: usize,
) -> Result<GridAttentionMap> {
    let row = snap.last_layers(n_layers)?.mean_row()?;
    let base = ctx.base_positions();
    if base.end > row.len() {
        return Err(Error::Shape(format!("attention row of {} misses the base image", row.len())));
    }
    let n_patches = base.len();
    let raw = Matrix::new(1, n_patches, row[base].to_vec())?;
    pool_to_grid(&raw, &PatchMap::square(n_patches, grid_size), RowReduction::Last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CagOutcome {
    /// Question followed by the separator and description, or the bare question.
    pub enhanced_question: String,
    /// Saliency map of the enhanced context.
    pub map: GridAttentionMap,
    pub warnings: Vec<String>,
}

fn base_context<B: StepBackend + ?Sized>(backend: &B, cfg: &RunConfig, mask: &[Cell]) -> GenerationContext {
    GenerationContext::with_mask(cfg.image.clone(), backend.info().n_patches, mask.to_vec())
}

/// Context-enhanced attention: asks the backend for a description, appends it to the
/// question and reads the attention map of the enhanced prompt.
pub fn run_cag<B: StepBackend + ?Sized>(
    backend: &mut B,
    question: &str,
    cfg: &RunConfig,
    mask: &[Cell],
) -> Result<CagOutcome> {
    let mut warnings = Vec::new();
    let enhanced_question = if cfg.cag {
        let prompt = render_cag_prompt(CAG_TEMPLATE, question, cfg.multiple_choice)?;
        let description = backend.describe(&cfg.image, &prompt)?;
        if description.trim().is_empty() {
            warnings.push("empty image description; using the raw question".to_string());
            question.to_string()
        } else {
            format!("{question}{CAG_SEPARATOR}{}", description.trim())
        }
    } else {
        question.to_string()
    };
    let mut ctx = base_context(backend, cfg, mask);
    ctx.push_text(TextRole::Prompt, &encode_text(&enhanced_question));
    let step = backend.evaluate(&ctx)?;
    let map = grid_map_from_snapshot(&step.attention, &ctx, cfg.trigger.n_layers, cfg.grid_size)?;
    Ok(CagOutcome { enhanced_question, map, warnings })
}

/// Seed of the exploratory sampler for the trigger at token `index`.
pub fn candidate_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Request {
    pub question_id: String,
    pub question: String,
    /// Cells blanked in the base image.
    pub mask: Vec<Cell>,
}

impl Request {
    pub fn new(question_id: impl Into<String>, question: impl Into<String>) -> Self {
        Self { question_id: question_id.into(), question: question.into(), mask: Vec::new() }
    }
}

/// Result of one generation. `error` is set when the backend failed part way; the trace
/// then holds everything produced before the failure.
#[derive(Debug)]
pub struct Outcome {
    pub trace: TraceRecord,
    pub error: Option<Error>,
}

impl Outcome {
    pub fn into_result(self) -> Result<TraceRecord> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.trace),
        }
    }
}

fn select_regions<B: StepBackend + ?Sized>(
    backend: &mut B,
    ctx: &GenerationContext,
    map: &GridAttentionMap,
    grid: &GridSpec,
    cfg: &RunConfig,
    index: usize,
) -> Result<(Vec<RegionSegment>, Insertion)> {
    match cfg.selection {
        SelectionMode::Avp => {
            let cands = build_candidates(map, cfg.n, cfg.m, grid, candidate_seed(cfg.seed, index))?;
            let opts = GreedyOptions { diagnostics: false, min_gain: cfg.min_gain() };
            let sel = greedy_select(backend, ctx, &cands, cfg.k, opts)?;
            let insertion = Insertion {
                regions: sel.selected.clone(),
                sources: sel.sources.clone(),
                gains: sel.gains.clone(),
                backend_calls: sel.backend_calls,
            };
            Ok((sel.segments, insertion))
        }
        SelectionMode::TopK => {
            let regions = top_n_attention(map, cfg.k, grid)?;
            let segments = embed_candidates(backend, ctx.image(), &regions)?;
            let insertion = Insertion {
                sources: vec![Source::Attention; regions.len()],
                regions,
                gains: Vec::new(),
                backend_calls: 0,
            };
            Ok((segments, insertion))
        }
    }
}

/// Runs one full generation.
///
/// Configuration errors are returned directly; backend failures end the loop and come back
/// inside the [`Outcome`] together with the partial trace.
pub fn generate<B: StepBackend + ?Sized>(
    backend: &mut B,
    request: &Request,
    cfg: &RunConfig,
    config_echo: BTreeMap<String, serde_json::Value>,
) -> Result<Outcome> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    if let Some(&(r, c)) = request.mask.iter().find(|&&(r, c)| r >= grid.grid_size || c >= grid.grid_size) {
        return Err(Error::Index(format!("masked cell ({r}, {c}) outside the grid")));
    }
    let mut trace = TraceRecord {
        question_id: request.question_id.clone(),
        question: request.question.clone(),
        enhanced_question: request.question.clone(),
        mask: request.mask.clone(),
        config: config_echo,
        ..Default::default()
    };
    let error = run_loop(backend, request, cfg, &grid, &mut trace).err();
    if let Some(e) = &error {
        trace.error = Some(e.to_string());
    }
    Ok(Outcome { trace, error })
}

fn run_loop<B: StepBackend + ?Sized>(
    backend: &mut B,
    request: &Request,
    cfg: &RunConfig,
    grid: &GridSpec,
    trace: &mut TraceRecord,
) -> Result<()> {
    let cag = run_cag(backend, &request.question, cfg, &request.mask)?;
    trace.enhanced_question = cag.enhanced_question.clone();
    trace.warnings = cag.warnings.clone();

    let end_token = backend.info().end_token;
    let mut ctx = base_context(backend, cfg, &request.mask);
    ctx.push_text(TextRole::Prompt, &encode_text(&cag.enhanced_question));
    let mut sampler = Sampler::new(cfg.seed);
    let mut trigger = TriggerState::new();
    let mut generated = Vec::new();
    let mut inserted = 0usize;

    for index in 0..cfg.decode.max_new_tokens {
        let step = backend.evaluate(&ctx)?;
        let token = sampler.sample(step.distribution.probs(), &generated, end_token, &cfg.decode);
        if token == end_token {
            break;
        }
        let decision = trigger.observe(&cfg.trigger, &step.attention, &token_text(token))?;
        let obs = *trigger.history().last().expect("just observed");
        generated.push(token);
        ctx.push_text(TextRole::Response, &[token]);
        trace.response = decode_tokens(&generated);

        let mut entry =
            TokenEntry { index, token, a_visual: obs.mass, delta: obs.delta, fired: obs.fired, insertion: None };
        let room = cfg.max_insertions == 0 || inserted < cfg.max_insertions;
        if decision == Decision::Fire && room {
            let map = match cfg.map_source {
                MapSource::Live => grid_map_from_snapshot(&step.attention, &ctx, cfg.trigger.n_layers, cfg.grid_size)?,
                MapSource::Static => cag.map.clone(),
            };
            // Record the token before a failing selection so the partial trace shows it.
            trace.entries.push(entry.clone());
            let (segments, insertion) = select_regions(backend, &ctx, &map, grid, cfg, index)?;
            trace.entries.pop();
            for s in segments {
                ctx.push_region(s);
            }
            entry.insertion = Some(insertion);
            inserted += 1;
        }
        trace.entries.push(entry);
    }
    Ok(())
}

/// Cells of the `k_mask` highest scores, ties to the smaller row-major index.
pub fn top_cells(map: &GridAttentionMap, k_mask: usize) -> Result<Vec<Cell>> {
    let g = map.grid_size();
    if k_mask > g * g {
        return Err(Error::Capacity { requested: k_mask, available: g * g });
    }
    let s = map.scores();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    Ok(order[..k_mask].iter().map(|&i| (i / g, i % g)).collect())
}

/// Masks the `k_mask` most attended cells of the question's attention map, then generates.
pub fn mask_probe<B: StepBackend + ?Sized>(
    backend: &mut B,
    request: &Request,
    k_mask: usize,
    cfg: &RunConfig,
    config_echo: BTreeMap<String, serde_json::Value>,
) -> Result<Outcome> {
    cfg.validate()?;
    let g = cfg.grid_size;
    if k_mask > g * g {
        return Err(Error::Capacity { requested: k_mask, available: g * g });
    }
    let mut masked = request.clone();
    if k_mask > 0 {
        let cag = run_cag(backend, &request.question, cfg, &request.mask)?;
        let mut cells = request.mask.clone();
        for c in top_cells(&cag.map, k_mask)? {
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        masked.mask = cells;
    }
    generate(backend, &masked, cfg, config_echo)
}
