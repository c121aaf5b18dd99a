//! Flat parameter vectors with a named layout, plus their JSON checkpoint
//! format.
//!
//! Checkpoint layout (stable, `format = "nsde-params/1"`):
//!
//! ```json
//! {
//!   "format": "nsde-params/1",
//!   "layout": [ {"net": "f", "layer": 0, "kind": "weight", "start": 0, "len": 600}, ... ],
//!   "values": ["0.0123", "-1.5e-7", ...]
//! }
//! ```
//!
//! Values are decimal strings produced by Rust's shortest round-trip float
//! formatting, so reading a checkpoint reproduces every bit of the vector.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const PARAMS_FORMAT: &str = "nsde-params/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Weight,
    Bias,
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub net: String,
    pub layer: usize,
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub net: String,
    pub layer: usize,
    pub kind: BlockKind,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a network's parameters, one segment per weight/bias block.
    pub fn push_net(&mut self, name: &str, net: &Mlp, values: &[f64]) -> Result<Range<usize>> {
        if values.len() != net.n_params() {
            return Err(Error::InputShape {
                expected: net.n_params(),
                got: values.len(),
            });
        }
        let base = self.values.len();
        for l in 0..net.n_layers() {
            let (w, b) = net.layer_ranges(l);
            self.layout.push(Segment {
                net: name.to_string(),
                layer: l,
                kind: BlockKind::Weight,
                start: base + w.start,
                len: w.len(),
            });
            self.layout.push(Segment {
                net: name.to_string(),
                layer: l,
                kind: BlockKind::Bias,
                start: base + b.start,
                len: b.len(),
            });
        }
        self.values.extend_from_slice(values);
        Ok(base..self.values.len())
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) -> usize {
        let idx = self.values.len();
        self.layout.push(Segment {
            net: name.to_string(),
            layer: 0,
            kind: BlockKind::Scalar,
            start: idx,
            len: 1,
        });
        self.values.push(value);
        idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::InputShape {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index range covered by every segment of the named network.
    pub fn net_range(&self, name: &str) -> Option<Range<usize>> {
        let segs: Vec<_> = self.layout.iter().filter(|s| s.net == name).collect();
        let start = segs.iter().map(|s| s.start).min()?;
        let end = segs.iter().map(|s| s.start + s.len).max()?;
        Some(start..end)
    }

    pub fn scalar_index(&self, name: &str) -> Option<usize> {
        self.layout
            .iter()
            .find(|s| s.net == name && s.kind == BlockKind::Scalar)
            .map(|s| s.start)
    }

    pub fn unflatten(&self) -> Vec<ParamBlock> {
        self.layout
            .iter()
            .map(|s| ParamBlock {
                net: s.net.clone(),
                layer: s.layer,
                kind: s.kind,
                values: self.values[s.range()].to_vec(),
            })
            .collect()
    }

    pub fn flatten(blocks: &[ParamBlock]) -> Self {
        let mut pv = ParamVector::new();
        for b in blocks {
            pv.layout.push(Segment {
                net: b.net.clone(),
                layer: b.layer,
                kind: b.kind,
                start: pv.values.len(),
                len: b.values.len(),
            });
            pv.values.extend_from_slice(&b.values);
        }
        pv
    }

    /// SHA-256 over the exact bit patterns of the values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("parameter {i} is not finite")));
        }
        Ok(Checkpoint {
            format: PARAMS_FORMAT.to_string(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| v.to_string()).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != PARAMS_FORMAT {
            return Err(Error::Config(format!("unsupported parameter format `{}`", ck.format)));
        }
        let values = ck
            .values
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|e| Error::Config(format!("parameter {i} `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let covered: usize = ck.layout.iter().map(|s| s.len).sum();
        if covered != values.len() || ck.layout.iter().any(|s| s.start + s.len > values.len()) {
            return Err(Error::Config("checkpoint layout does not cover values".into()));
        }
        Ok(ParamVector {
            values,
            layout: ck.layout.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub layout: Vec<Segment>,
    pub values: Vec<String>,
}
