//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! b"MOELABCK"            magic
//! u32                    format version
//! u64, [u8]              metadata length, metadata JSON
//! u32                    tensor count
//! per tensor:
//!   u32, [u8]            name length, UTF-8 name
//!   u64, u64             rows, cols
//!   [f64; rows*cols]     row-major data
//! ```
//!
//! Metadata holds the resolved run config (as TOML text), the next step to
//! run, the optimizer step count and the run record so far. Token sampling is
//! keyed by step, so the step index is the whole RNG state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::experiment::Experiment;
use crate::harness::runconfig::RunConfig;
use crate::metrics::RunRecord;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"MOELABCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_toml: String,
    pub next_step: usize,
    pub optimizer_steps: u64,
    pub record: RunRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Matrix)>,
}

fn layer_tensors(exp: &Experiment) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    for (l, layer) in exp.layers.iter().enumerate() {
        out.push((
            format!("layers.{l}.router"),
            layer.router.gate_weights.clone(),
        ));
        let n = layer.router.bias.len();
        out.push((
            format!("layers.{l}.bias"),
            Matrix::from_vec(1, n, layer.router.bias.clone()).expect("bias row"),
        ));
        for (e, p) in layer.experts.iter().enumerate() {
            out.push((format!("layers.{l}.experts.{e}.w1"), p.w1.clone()));
            out.push((format!("layers.{l}.experts.{e}.w3"), p.w3.clone()));
            out.push((format!("layers.{l}.experts.{e}.w2"), p.w2.clone()));
        }
    }
    out
}

impl Checkpoint {
    pub fn capture(exp: &Experiment) -> Self {
        let mut tensors = layer_tensors(exp);
        for (kind, bufs) in [("m", &exp.optimizer.m), ("v", &exp.optimizer.v)] {
            for (i, b) in bufs.iter().enumerate() {
                tensors.push((
                    format!("optim.{kind}.{i}"),
                    Matrix::from_vec(1, b.len(), b.clone()).expect("moment row"),
                ));
            }
        }
        Self {
            meta: CheckpointMeta {
                config_toml: exp.config.to_toml(),
                next_step: exp.next_step,
                optimizer_steps: exp.optimizer.t,
                record: exp.record.clone(),
            },
            tensors,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.meta.config_toml, &[])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| LabError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| err("truncated header".into()))? != MAGIC {
            return Err(err("not a checkpoint file".into()));
        }
        let version = r.u32().ok_or_else(|| err("truncated header".into()))?;
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.u64().ok_or_else(|| err("truncated metadata".into()))? as usize;
        let meta_bytes = r
            .take(meta_len)
            .ok_or_else(|| err("truncated metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| err(format!("bad metadata: {e}")))?;
        let count = r
            .u32()
            .ok_or_else(|| err("truncated tensor table".into()))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let bad = || err("truncated tensor".into());
            let name_len = r.u32().ok_or_else(bad)? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(bad)?)
                .map_err(|_| err("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64().ok_or_else(bad)? as usize;
            let cols = r.u64().ok_or_else(bad)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(bad)?;
            let raw = r.take(n.checked_mul(8).ok_or_else(bad)?).ok_or_else(bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((
                name,
                Matrix::from_vec(rows, cols, data).map_err(|e| err(e.to_string()))?,
            ));
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Rebuilds an experiment for `config` from this checkpoint. Every tensor
    /// must be present with the shape `config` implies.
    pub fn restore(&self, config: RunConfig) -> Result<Experiment> {
        let mut exp = Experiment::new(config)?;
        let shape_err =
            |name: &str, want: (usize, usize), got: Option<(usize, usize)>| LabError::Checkpoint {
                path: Default::default(),
                msg: match got {
                    Some(g) => format!("tensor {name} has shape {g:?}, config expects {want:?}"),
                    None => format!("tensor {name} missing"),
                },
            };
        let wanted = layer_tensors(&exp);
        let expected_count = wanted.len() + 2 * exp.optimizer.m.len();
        for (name, want) in &wanted {
            let got = self.tensor(name);
            if got.map(Matrix::shape) != Some(want.shape()) {
                return Err(shape_err(name, want.shape(), got.map(Matrix::shape)));
            }
        }
        if self.tensors.len() != expected_count {
            return Err(LabError::Checkpoint {
                path: Default::default(),
                msg: format!(
                    "{} tensors, config expects {expected_count}",
                    self.tensors.len()
                ),
            });
        }
        for (l, layer) in exp.layers.iter_mut().enumerate() {
            let get = |n: String| self.tensor(&n).expect("checked above").clone();
            layer.router.gate_weights = get(format!("layers.{l}.router"));
            layer.router.bias = get(format!("layers.{l}.bias")).into_vec();
            for (e, p) in layer.experts.iter_mut().enumerate() {
                p.w1 = get(format!("layers.{l}.experts.{e}.w1"));
                p.w3 = get(format!("layers.{l}.experts.{e}.w3"));
                p.w2 = get(format!("layers.{l}.experts.{e}.w2"));
            }
        }
        for kind in ["m", "v"] {
            for i in 0..exp.optimizer.m.len() {
                let name = format!("optim.{kind}.{i}");
                let want = exp.optimizer.m[i].len();
                let t = self.tensor(&name);
                if t.map(|t| t.as_slice().len()) != Some(want) {
                    return Err(shape_err(&name, (1, want), t.map(Matrix::shape)));
                }
                let data = t.expect("checked").as_slice().to_vec();
                if kind == "m" {
                    exp.optimizer.m[i] = data;
                } else {
                    exp.optimizer.v[i] = data;
                }
            }
        }
        exp.optimizer.t = self.meta.optimizer_steps;
        exp.next_step = self.meta.next_step;
        exp.record = self.meta.record.clone();
        Ok(exp)
    }

    /// Restores using the config stored in the checkpoint itself.
    pub fn resume(&self) -> Result<Experiment> {
        self.restore(self.config()?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
