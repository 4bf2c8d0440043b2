//! Run configuration file: TOML, every key optional, unknown keys rejected.

use serde::{Deserialize, Serialize};

use crate::balance::{BalanceKind, BalanceStrategy};
use crate::config::{validate_config, LabConfig};
use crate::error::{LabError, Result};
use crate::harness::optim::AdamWConfig;
use crate::harness::task::TaskConfig;
use crate::schedule::{BatchRamp, LrSchedule, SparsitySchedule, TokenPlan};

/// Learning-rate phases; the step count comes from the run itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrPhases {
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub stable_fraction: f64,
    pub mid_lr: f64,
    pub mid_fraction: f64,
    pub final_lr: f64,
}

impl Default for LrPhases {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            peak_lr: 1e-2,
            stable_fraction: 0.6,
            mid_lr: 1e-2 * 1.6 / 2.6,
            mid_fraction: 0.3,
            final_lr: 1e-3,
        }
    }
}

impl LrPhases {
    pub fn to_schedule(&self, steps: usize) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            stable_fraction: self.stable_fraction,
            mid_lr: self.mid_lr,
            mid_fraction: self.mid_fraction,
            final_lr: self.final_lr,
            total_steps: steps.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub strategy: BalanceKind,
    pub steps: usize,
    pub output_dir: String,
    pub snapshot_every: usize,
    pub tracked_layers: Vec<usize>,
    /// Tokens per fixed-order reduction chunk; must divide each group's share.
    pub reduce_chunk: usize,
    pub model: LabConfig,
    pub sparsity: SparsitySchedule,
    pub lr: LrPhases,
    pub batch: BatchRamp,
    pub task: TaskConfig,
    pub optimizer: AdamWConfig,
}

/// Balance coefficient for desk runs. With 16 experts and 256 tokens a step
/// the model default is too weak to move the router at all.
pub const DESK_LBL_COEFFICIENT: f64 = 0.2;
/// Top-1 temperature for desk runs; at 1.0 the soft allocation hides the
/// hard one on the blurred layer.
pub const DESK_TEMPERATURE: f64 = 0.1;

impl Default for RunConfig {
    fn default() -> Self {
        let model = LabConfig {
            lbl_coefficient: DESK_LBL_COEFFICIENT,
            temperature: DESK_TEMPERATURE,
            ..LabConfig::desk()
        };
        let l = model.num_layers;
        let mut tracked = vec![0, l / 2, l - 1];
        tracked.dedup();
        Self {
            run_id: "run".into(),
            strategy: BalanceKind::LblGlobalBatch,
            steps: 2000,
            output_dir: "runs/run".into(),
            snapshot_every: 50,
            tracked_layers: tracked,
            reduce_chunk: 64,
            model,
            sparsity: SparsitySchedule::constant(1),
            lr: LrPhases::default(),
            batch: BatchRamp::constant(256),
            task: TaskConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn strategy(&self) -> Result<BalanceStrategy> {
        BalanceStrategy::new(
            self.strategy,
            self.model.lbl_coefficient,
            self.model.temperature,
            self.model.bias_step,
        )
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        self.lr.to_schedule(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        let m = validate_config(self.model.clone())?;
        self.strategy()?;
        self.sparsity.validate(m.num_experts)?;
        self.lr_schedule().validate()?;
        self.batch.validate()?;
        if self.snapshot_every == 0 {
            return Err(LabError::Config("snapshot_every must be at least 1".into()));
        }
        if let Some(&l) = self.tracked_layers.iter().find(|&&l| l >= m.num_layers) {
            return Err(LabError::Config(format!(
                "tracked layer {l} outside [0, {})",
                m.num_layers
            )));
        }
        if self.reduce_chunk == 0 {
            return Err(LabError::Config("reduce_chunk must be at least 1".into()));
        }
        if self.task.layer_difficulty.len() != m.num_layers {
            return Err(LabError::Config(format!(
                "task.layer_difficulty has {} entries for {} layers",
                self.task.layer_difficulty.len(),
                m.num_layers
            )));
        }
        let unit = m.num_parallel_groups * self.reduce_chunk;
        let plan = TokenPlan::new(self.steps, &self.batch);
        let mut sizes = plan.batch_sizes.clone();
        sizes.push(self.batch.start);
        if let Some(b) = sizes.iter().find(|&&b| b % unit != 0) {
            return Err(LabError::Config(format!(
                "batch size {b} is not a multiple of num_parallel_groups × reduce_chunk = {unit}"
            )));
        }
        Ok(())
    }

    /// Parses `text` and applies `key=value` overrides with dotted keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| LabError::Config(format!("malformed config: {e}")))?;
        let defaults = defaults_table();
        check_keys(&doc, &defaults, "")?;
        for o in overrides {
            apply_override(&mut doc, &defaults, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

fn defaults_table() -> toml::Table {
    match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn check_keys(doc: &toml::Table, defaults: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in doc {
        let path = format!("{prefix}{k}");
        match defaults.get(k) {
            None => return Err(LabError::Config(format!("unknown key `{path}`"))),
            Some(toml::Value::Table(dt)) => match v {
                toml::Value::Table(t) => check_keys(t, dt, &format!("{path}."))?,
                _ => return Err(LabError::Config(format!("key `{path}` must be a table"))),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(doc: &mut toml::Table, defaults: &toml::Table, raw: &str) -> Result<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{raw}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let mut def = defaults;
    for (i, p) in parts.iter().enumerate() {
        match def.get(*p) {
            Some(toml::Value::Table(t)) if i + 1 < parts.len() => def = t,
            Some(toml::Value::Table(_)) | None => {
                return Err(LabError::Config(format!("unknown key `{key}`")))
            }
            Some(_) if i + 1 < parts.len() => {
                return Err(LabError::Config(format!("unknown key `{key}`")))
            }
            Some(_) => {}
        }
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));

    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(LabError::Config(format!("key `{p}` must be a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
