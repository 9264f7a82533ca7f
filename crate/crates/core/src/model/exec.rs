use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::aifs::{AifsPlan, Modality};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Vision,
    Projector,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinearKind {
    Qkv,
    Out,
    Up,
    Down,
    Projector,
}

impl LinearKind {
    fn name(self) -> &'static str {
        match self {
            LinearKind::Qkv => "qkv",
            LinearKind::Out => "out",
            LinearKind::Up => "up",
            LinearKind::Down => "down",
            LinearKind::Projector => "proj",
        }
    }
}

/// Identifies one quantizable linear layer, e.g. `vision.1.down` or `projector`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SiteId {
    pub part: Part,
    pub block: usize,
    pub kind: LinearKind,
}

impl SiteId {
    pub fn vision(block: usize, kind: LinearKind) -> Self {
        Self {
            part: Part::Vision,
            block,
            kind,
        }
    }

    pub fn llm(block: usize, kind: LinearKind) -> Self {
        Self {
            part: Part::Llm,
            block,
            kind,
        }
    }

    pub fn projector() -> Self {
        Self {
            part: Part::Projector,
            block: 0,
            kind: LinearKind::Projector,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.part {
            Part::Projector => f.write_str("projector"),
            Part::Vision => write!(f, "vision.{}.{}", self.block, self.kind.name()),
            Part::Llm => write!(f, "llm.{}.{}", self.block, self.kind.name()),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "projector" {
            return Ok(SiteId::projector());
        }
        let bad = || Error::Format(format!("unrecognised layer id {s:?}"));
        let mut it = s.split('.');
        let part = match it.next() {
            Some("vision") => Part::Vision,
            Some("llm") => Part::Llm,
            _ => return Err(bad()),
        };
        let block = it.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let kind = match it.next() {
            Some("qkv") => LinearKind::Qkv,
            Some("out") => LinearKind::Out,
            Some("up") => LinearKind::Up,
            Some("down") => LinearKind::Down,
            _ => return Err(bad()),
        };
        if it.next().is_some() {
            return Err(bad());
        }
        Ok(SiteId { part, block, kind })
    }
}

impl From<SiteId> for String {
    fn from(s: SiteId) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for SiteId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Row metadata for the tensor entering a linear layer.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub modalities: &'a [Modality],
    /// Present when rows are in visual-first order.
    pub plan: Option<&'a AifsPlan>,
}

/// Hooks the forward pass calls at every linear layer and normalization input.
///
/// Float inference, calibration recording and quantized simulation are all
/// implementations of this trait over the same model graph.
pub trait Exec {
    fn linear(&mut self, site: SiteId, x: &Tensor, layer: &Linear, rows: RowContext<'_>) -> Result<Tensor>;

    /// Called with the input of every normalization layer. `index` counts the
    /// norms of a part in order: two per block, then the final norm.
    fn observe_norm_input(&mut self, _part: Part, _index: usize, _x: &Tensor) {}
}

/// Plain real-valued execution.
#[derive(Debug, Default, Clone, Copy)]
pub struct FloatExec;

impl Exec for FloatExec {
    fn linear(&mut self, _: SiteId, x: &Tensor, layer: &Linear, _: RowContext<'_>) -> Result<Tensor> {
        layer.forward(x)
    }
}
