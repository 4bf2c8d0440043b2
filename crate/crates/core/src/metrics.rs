//! Load-balance diagnostics and their CSV / SVG emission.
//!
//! CSV columns (stable): `step, progress, lr, batch_size, task_loss,
//! balance_loss`, then for every layer `l` in order
//! `k_l{l}, tokens_l{l}, max_dev_l{l}, min_dev_l{l}, bias_norm_l{l}`.
//! Reals are written as `{:.8e}` (9 significant digits).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::plot::{BarChart, LineChart, Series};

/// Per-layer state of one logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub top_k: usize,
    /// Global-batch token counts per expert.
    pub counts: Vec<u64>,
    /// Global-batch mean gating probabilities.
    pub mean_probs: Vec<f64>,
    pub max_dev: f64,
    pub min_dev: f64,
    /// Max-abs of the selection bias.
    pub bias_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub progress: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub layers: Vec<LayerStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub layer: usize,
    pub fractions: Vec<f64>,
    pub mean_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: String,
    pub num_layers: usize,
    pub num_experts: usize,
    pub tracked_layers: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl RunRecord {
    pub fn new(
        run_id: impl Into<String>,
        strategy: impl Into<String>,
        num_layers: usize,
        num_experts: usize,
        tracked_layers: Vec<usize>,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            strategy: strategy.into(),
            num_layers,
            num_experts,
            tracked_layers,
            steps: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    /// Appends a step, enforcing strictly increasing step indices.
    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(LabError::Invalid(format!(
                    "step {} logged after step {}",
                    rec.step, last.step
                )));
            }
        }
        if rec.layers.len() != self.num_layers {
            return Err(LabError::shape(
                "step layers",
                self.num_layers,
                rec.layers.len(),
            ));
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn push_snapshot(&mut self, snap: Snapshot) -> Result<()> {
        if !self.tracked_layers.contains(&snap.layer) {
            return Err(LabError::Invalid(format!(
                "snapshot for untracked layer {}",
                snap.layer
            )));
        }
        self.snapshots.push(snap);
        Ok(())
    }

    /// Most recent snapshot of `layer`.
    pub fn last_snapshot(&self, layer: usize) -> Option<&Snapshot> {
        self.snapshots.iter().rev().find(|s| s.layer == layer)
    }
}

/// `(c_i − T/N_E) / (T/N_E)` with `T = Σc`.
pub fn relative_deviation(counts: &[u64], num_experts: usize) -> Result<Vec<f64>> {
    if counts.len() != num_experts {
        return Err(LabError::shape(
            "relative_deviation",
            num_experts,
            counts.len(),
        ));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(LabError::Invalid(
            "relative deviation of an empty batch".into(),
        ));
    }
    let ideal = total as f64 / num_experts as f64;
    Ok(counts.iter().map(|&c| (c as f64 - ideal) / ideal).collect())
}

/// `(max, min)` relative deviation for each entry of `history`.
pub fn max_min_deviation(history: &[Vec<u64>], num_experts: usize) -> Result<Vec<(f64, f64)>> {
    if history.is_empty() {
        return Err(LabError::Invalid("empty deviation history".into()));
    }
    history
        .iter()
        .map(|c| {
            let dev = relative_deviation(c, num_experts)?;
            let max = dev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = dev.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((max, min))
        })
        .collect()
}

fn real(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn csv_header(num_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "progress",
        "lr",
        "batch_size",
        "task_loss",
        "balance_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in 0..num_layers {
        for c in ["k", "tokens", "max_dev", "min_dev", "bias_norm"] {
            h.push(format!("{c}_l{l}"));
        }
    }
    h
}

pub fn emit_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(csv_header(record.num_layers))
        .map_err(|e| csv_err(path, e))?;
    for s in &record.steps {
        let mut row = vec![
            s.step.to_string(),
            real(s.progress),
            real(s.lr),
            s.batch_size.to_string(),
            real(s.task_loss),
            real(s.balance_loss),
        ];
        for l in &s.layers {
            row.push(l.top_k.to_string());
            row.push(l.counts.iter().sum::<u64>().to_string());
            row.push(real(l.max_dev));
            row.push(real(l.min_dev));
            row.push(real(l.bias_norm));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Long-format snapshot table: `step, layer, expert, fraction, mean_prob`.
pub fn emit_snapshot_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step", "layer", "expert", "fraction", "mean_prob"])
        .map_err(|e| csv_err(path, e))?;
    for s in &record.snapshots {
        for (e, (f, p)) in s.fractions.iter().zip(&s.mean_probs).enumerate() {
            w.write_record([
                s.step.to_string(),
                s.layer.to_string(),
                e.to_string(),
                real(*f),
                real(*p),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, std::io::Error::other(e.to_string()))
}

/// One row of a metrics CSV read back for comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(
                rec.map_err(|e| csv_err(path, e))?
                    .iter()
                    .map(str::to_string)
                    .collect(),
            );
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r.get(i)?.parse().ok()).collect()
    }
}

fn deviation_series(record: &RunRecord, layer: usize, prefix: &str) -> Vec<Series> {
    let pts = |f: fn(&LayerStep) -> f64| {
        record
            .steps
            .iter()
            .map(|s| (s.step as f64, f(&s.layers[layer])))
            .collect()
    };
    vec![
        Series {
            name: format!("{prefix}max_dev"),
            points: pts(|l| l.max_dev),
        },
        Series {
            name: format!("{prefix}min_dev"),
            points: pts(|l| l.min_dev),
        },
    ]
}

/// Deviation-vs-step charts per tracked layer (needs at least two steps) and
/// f / p distribution charts from the final snapshot of each tracked layer.
pub fn emit_plots(record: &RunRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if record.steps.is_empty() && record.snapshots.is_empty() {
        return Err(LabError::Invalid("cannot plot an empty record".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let mut written = Vec::new();
    for &layer in &record.tracked_layers {
        if record.steps.len() >= 2 && layer < record.num_layers {
            let chart = LineChart {
                title: format!("{} layer {layer}: relative deviation", record.run_id),
                x_label: "step".into(),
                y_label: "relative deviation".into(),
                series: deviation_series(record, layer, ""),
            };
            let path = out_dir.join(format!("{}_deviation_l{layer}.svg", record.run_id));
            write(&path, &chart.to_svg())?;
            written.push(path);
        }
        if let Some(snap) = record.last_snapshot(layer) {
            let chart = BarChart {
                title: format!(
                    "{} layer {layer}: f and p at step {}",
                    record.run_id, snap.step
                ),
                x_label: "expert".into(),
                y_label: "value".into(),
                series: vec![
                    ("f".into(), snap.fractions.clone()),
                    ("p".into(), snap.mean_probs.clone()),
                ],
            };
            let path = out_dir.join(format!("{}_distribution_l{layer}.svg", record.run_id));
            write(&path, &chart.to_svg())?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Overlays the deviation curves of several runs for one layer.
pub fn emit_overlay(records: &[&RunRecord], layer: usize, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for r in records {
        if layer >= r.num_layers {
            return Err(LabError::Invalid(format!(
                "run {} has no layer {layer}",
                r.run_id
            )));
        }
        series.extend(deviation_series(r, layer, &format!("{} ", r.run_id)));
    }
    let chart = LineChart {
        title: format!("layer {layer}: relative deviation"),
        x_label: "step".into(),
        y_label: "relative deviation".into(),
        series,
    };
    write(path, &chart.to_svg())
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| LabError::io(path, e))
}
