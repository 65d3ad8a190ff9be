//! Step backends: anything that turns a generation context into a next-token distribution
//! plus the attention rows of that step.

mod context;
pub mod sim;
pub mod wire;

pub use context::{GenerationContext, RegionSegment, Segment, TextRole, TokenId};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionSnapshot;
use crate::error::BackendError;
use crate::geometry::Region;
use crate::infogain::TokenDistribution;

/// Constants a backend declares once at initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    /// Visual tokens per inserted region.
    pub v_sub: usize,
    pub vocab_size: usize,
    /// Attention layers reported per step.
    pub n_layers: usize,
    /// Tokens occupied by the base image.
    pub n_patches: usize,
    pub end_token: TokenId,
    pub newline_token: TokenId,
    pub boi: TokenId,
    pub eoi: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub distribution: TokenDistribution<f64>,
    pub attention: AttentionSnapshot<f64>,
}

pub trait StepBackend {
    fn info(&self) -> &BackendInfo;

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError>;

    /// Evaluates `base + suffix` for every suffix. Implementations may share the prefix
    /// computation; results must equal sequential [`StepBackend::evaluate`] calls.
    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        suffixes
            .iter()
            .enumerate()
            .map(|(index, s)| {
                self.evaluate(&base.extended([s])).map_err(|e| BackendError::Batch { index, message: e.to_string() })
            })
            .collect()
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError>;

    /// Free-text description of `image` for an already rendered prompt.
    fn describe(&mut self, image: &str, prompt: &str) -> Result<String, BackendError>;

    /// Whether lookahead requests should be sent as one batch.
    fn supports_batching(&self) -> bool {
        true
    }
}

impl<B: StepBackend + ?Sized> StepBackend for &mut B {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError> {
        (**self).evaluate(ctx)
    }

    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        (**self).evaluate_batch(base, suffixes)
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError> {
        (**self).embed_region(image, region)
    }

    fn describe(&mut self, image: &str, prompt: &str) -> Result<String, BackendError> {
        (**self).describe(image, prompt)
    }

    fn supports_batching(&self) -> bool {
        (**self).supports_batching()
    }
}

impl<B: StepBackend + ?Sized> StepBackend for Box<B> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError> {
        (**self).evaluate(ctx)
    }

    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        (**self).evaluate_batch(base, suffixes)
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError> {
        (**self).embed_region(image, region)
    }

    fn describe(&mut self, image: &str, prompt: &str) -> Result<String, BackendError> {
        (**self).describe(image, prompt)
    }

    fn supports_batching(&self) -> bool {
        (**self).supports_batching()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Single-context `evaluate` calls.
    pub evaluate: usize,
    /// Contexts evaluated, counting each batch element.
    pub evaluation_requests: usize,
    pub batch: usize,
    pub embed: usize,
    pub describe: usize,
}

/// Records how often each backend operation is used.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    counts: CallCounts,
    batching: bool,
}

impl<B: StepBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        let batching = inner.supports_batching();
        Self { inner, counts: CallCounts::default(), batching }
    }

    /// Advertise no batching support, forcing callers onto sequential evaluation.
    pub fn without_batching(mut self) -> Self {
        self.batching = false;
        self
    }

    pub fn counts(&self) -> CallCounts {
        self.counts
    }

    pub fn reset(&mut self) {
        self.counts = CallCounts::default();
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: StepBackend> StepBackend for CountingBackend<B> {
    fn info(&self) -> &BackendInfo {
        self.inner.info()
    }

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError> {
        self.counts.evaluate += 1;
        self.counts.evaluation_requests += 1;
        self.inner.evaluate(ctx)
    }

    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        self.counts.batch += 1;
        self.counts.evaluation_requests += suffixes.len();
        self.inner.evaluate_batch(base, suffixes)
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError> {
        self.counts.embed += 1;
        self.inner.embed_region(image, region)
    }

    fn describe(&mut self, image: &str, prompt: &str) -> Result<String, BackendError> {
        self.counts.describe += 1;
        self.inner.describe(image, prompt)
    }

    fn supports_batching(&self) -> bool {
        self.batching
    }
}
