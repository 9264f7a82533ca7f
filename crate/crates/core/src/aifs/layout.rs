use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    /// One-byte tag used in sample files.
    pub fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Visual),
            t => Err(Error::Format(format!("unknown modality tag {t}"))),
        }
    }
}

/// Half-open run `[start, end)` of tokens sharing a modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
}

/// Modality of every token in a sequence, stored as maximal contiguous runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct ModalityLayout {
    len: usize,
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for ModalityLayout {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        ModalityLayout::from_segments(segments)
    }
}

impl From<ModalityLayout> for Vec<Segment> {
    fn from(l: ModalityLayout) -> Self {
        l.segments
    }
}

impl ModalityLayout {
    /// Validates that segments are non-empty, contiguous and cover `[0, len)`.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for s in &segments {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Config(format!(
                    "segment {s:?} does not continue the layout at {cursor}"
                )));
            }
            cursor = s.end;
        }
        let tags: Vec<Modality> = segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.modality, s.end - s.start))
            .collect();
        Ok(Self::from_modalities(&tags))
    }

    pub fn from_modalities(tags: &[Modality]) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &m) in tags.iter().enumerate() {
            match segments.last_mut() {
                Some(s) if s.modality == m => s.end = i + 1,
                _ => segments.push(Segment {
                    modality: m,
                    start: i,
                    end: i + 1,
                }),
            }
        }
        Self {
            len: tags.len(),
            segments,
        }
    }

    pub fn from_tags(tags: &[u8]) -> Result<Self> {
        let m: Vec<Modality> = tags.iter().map(|&t| Modality::from_tag(t)).collect::<Result<_>>()?;
        Ok(Self::from_modalities(&m))
    }

    pub fn all_text(len: usize) -> Self {
        Self::from_modalities(&vec![Modality::Text; len])
    }

    /// `prefix` text tokens, `visual` visual tokens, then `suffix` text tokens.
    pub fn text_visual_text(prefix: usize, visual: usize, suffix: usize) -> Self {
        let mut tags = vec![Modality::Text; prefix];
        tags.extend(std::iter::repeat_n(Modality::Visual, visual));
        tags.extend(std::iter::repeat_n(Modality::Text, suffix));
        Self::from_modalities(&tags)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.len);
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.modality, s.end - s.start));
        }
        out
    }

    pub fn tags(&self) -> Vec<u8> {
        self.modalities().into_iter().map(Modality::tag).collect()
    }

    pub fn visual_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.modality == Modality::Visual)
    }

    pub fn visual_count(&self) -> usize {
        self.visual_segments().map(|s| s.end - s.start).sum()
    }

    /// Inclusive zero-based `(m, n)` when the layout has exactly one visual run.
    pub fn single_visual_span(&self) -> Option<(usize, usize)> {
        let mut it = self.visual_segments();
        match (it.next(), it.next()) {
            (Some(s), None) => Some((s.start, s.end - 1)),
            _ => None,
        }
    }

    pub fn check_rows(&self, x: &Tensor) -> Result<()> {
        if x.rows() != self.len {
            return Err(Error::Shape(format!(
                "layout covers {} tokens but tensor has {} rows",
                self.len,
                x.rows()
            )));
        }
        Ok(())
    }
}
