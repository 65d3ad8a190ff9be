use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Cell, Region};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRole {
    /// Question and any enhancement text.
    Prompt,
    /// Tokens produced by decoding.
    Response,
}

/// An inserted region: its visual tokens wrapped in begin/end-of-image markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSegment {
    pub region: Region,
    pub vokens: Vec<TokenId>,
    pub boi: TokenId,
    pub eoi: TokenId,
}

impl RegionSegment {
    pub fn len(&self) -> usize {
        self.vokens.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    VisualBase {
        image: String,
        n_tokens: usize,
        /// Cells whose pixels are blanked before encoding.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        mask: Vec<Cell>,
    },
    Text {
        role: TextRole,
        tokens: Vec<TokenId>,
    },
    VisualRegion(RegionSegment),
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::VisualBase { n_tokens, .. } => *n_tokens,
            Segment::Text { tokens, .. } => tokens.len(),
            Segment::VisualRegion(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The evolving interleaved context: one base image, prompt text, generated tokens and
/// inserted regions, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerationContext {
    segments: Vec<Segment>,
    cursor: usize,
}

impl GenerationContext {
    pub fn new(image: impl Into<String>, n_tokens: usize) -> Self {
        Self::with_mask(image, n_tokens, Vec::new())
    }

    pub fn with_mask(image: impl Into<String>, n_tokens: usize, mask: Vec<Cell>) -> Self {
        Self { segments: vec![Segment::VisualBase { image: image.into(), n_tokens, mask }], cursor: n_tokens }
    }

    /// Rebuilds a context from serialized segments, checking structural invariants.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let bases = segments.iter().filter(|s| matches!(s, Segment::VisualBase { .. })).count();
        if bases != 1 {
            return Err(Error::Contract(format!("context needs exactly one base image, found {bases}")));
        }
        let base_at = segments.iter().position(|s| matches!(s, Segment::VisualBase { .. })).unwrap();
        if segments[..base_at].iter().any(|s| matches!(s, Segment::VisualRegion(_))) {
            return Err(Error::Contract("region inserted before the base image".into()));
        }
        let cursor = segments.iter().map(Segment::len).sum();
        Ok(Self { segments, cursor })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn image(&self) -> &str {
        self.segments
            .iter()
            .find_map(|s| match s {
                Segment::VisualBase { image, .. } => Some(image.as_str()),
                _ => None,
            })
            .expect("context always holds a base image")
    }

    pub fn mask(&self) -> &[Cell] {
        self.segments
            .iter()
            .find_map(|s| match s {
                Segment::VisualBase { mask, .. } => Some(mask.as_slice()),
                _ => None,
            })
            .unwrap_or(&[])
    }

    /// Appends text, extending the trailing segment when it has the same role.
    pub fn push_text(&mut self, role: TextRole, tokens: &[TokenId]) {
        if tokens.is_empty() {
            return;
        }
        self.cursor += tokens.len();
        if let Some(Segment::Text { role: last, tokens: existing }) = self.segments.last_mut() {
            if *last == role {
                existing.extend_from_slice(tokens);
                return;
            }
        }
        self.segments.push(Segment::Text { role, tokens: tokens.to_vec() });
    }

    pub fn push_region(&mut self, region: RegionSegment) {
        self.cursor += region.len();
        self.segments.push(Segment::VisualRegion(region));
    }

    /// Copy of this context with `suffixes` appended.
    pub fn extended<'a>(&self, suffixes: impl IntoIterator<Item = &'a RegionSegment>) -> Self {
        let mut out = self.clone();
        for s in suffixes {
            out.push_region(s.clone());
        }
        out
    }

    pub fn regions(&self) -> impl Iterator<Item = &RegionSegment> {
        self.segments.iter().filter_map(|s| match s {
            Segment::VisualRegion(r) => Some(r),
            _ => None,
        })
    }

    pub fn response_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text { role: TextRole::Response, tokens } => tokens.len(),
                _ => 0,
            })
            .sum()
    }

    /// Context positions of base-image tokens.
    pub fn base_positions(&self) -> std::ops::Range<usize> {
        let mut offset = 0;
        for s in &self.segments {
            if let Segment::VisualBase { n_tokens, .. } = s {
                return offset..offset + n_tokens;
            }
            offset += s.len();
        }
        0..0
    }
}

impl<'de> Deserialize<'de> for GenerationContext {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            segments: Vec<Segment>,
        }
        let raw = Raw::deserialize(deserializer)?;
        GenerationContext::from_segments(raw.segments).map_err(serde::de::Error::custom)
    }
}
