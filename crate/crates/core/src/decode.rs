//! Sampling from a next-token distribution and the byte-level text codec.
//!
//! Filters run in a fixed order: repetition penalty, temperature, nucleus (top-p), then a
//! draw from a seeded ChaCha8 stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    /// The end token is suppressed until this many tokens were generated.
    pub min_new_tokens: usize,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 0.7, top_p: 0.9, repetition_penalty: 1.2, min_new_tokens: 32, max_new_tokens: 512 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::Config(format!("repetition_penalty {} below 1", self.repetition_penalty)));
        }
        if self.min_new_tokens > self.max_new_tokens {
            return Err(Error::Config(format!(
                "min_new_tokens {} exceeds max_new_tokens {}",
                self.min_new_tokens, self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// The sampling distribution after all filters. `generated` holds the response so far.
pub fn filtered_distribution(probs: &[f64], generated: &[TokenId], end_token: TokenId, cfg: &DecodeConfig) -> Vec<f64> {
    // Log-probabilities are never positive, so the usual "divide positive logits, multiply
    // negative ones" penalty reduces to a multiplication.
    let mut logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    if cfg.repetition_penalty != 1.0 {
        let mut seen = vec![false; logits.len()];
        for &t in generated {
            if let Some(s) = seen.get_mut(t as usize) {
                *s = true;
            }
        }
        for (l, s) in logits.iter_mut().zip(seen) {
            if s && l.is_finite() {
                *l *= cfg.repetition_penalty;
            }
        }
    }
    let end = end_token as usize;
    if generated.len() < cfg.min_new_tokens && end < logits.len() {
        let saved = logits[end];
        logits[end] = f64::NEG_INFINITY;
        if logits.iter().all(|l| *l == f64::NEG_INFINITY) {
            logits[end] = saved;
        }
    }

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| ((l - max) / cfg.temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);

    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (rank, &i) in order.iter().enumerate() {
            cum += p[i];
            if cum >= cfg.top_p - 1e-12 {
                keep = rank + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            p[i] = 0.0;
        }
        let kept: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= kept);
    }
    p
}

/// Seeded token sampler.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self, probs: &[f64], generated: &[TokenId], end_token: TokenId, cfg: &DecodeConfig) -> TokenId {
        let p = filtered_distribution(probs, generated, end_token, cfg);
        let u: f64 = self.rng.random();
        let mut cum = 0.0;
        let mut last = 0;
        for (i, &v) in p.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            cum += v;
            last = i;
            if u < cum {
                return i as TokenId;
            }
        }
        last as TokenId
    }
}

/// Prompt text as byte-level token ids.
pub fn encode_text(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Renders ids: bytes are decoded as UTF-8, every other id becomes a word `w<id>`
/// separated from neighbouring text by a space.
pub fn decode_tokens(ids: &[TokenId]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
        } else {
            flush(&mut bytes, &mut out);
            if !out.is_empty() && !out.ends_with(char::is_whitespace) {
                out.push(' ');
            }
            out.push_str(&format!("w{id}"));
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// Text of a single token, as seen by the newline trigger.
pub fn token_text(id: TokenId) -> String {
    decode_tokens(&[id])
}
