//! The training loop: a residual stack of MoE layers trained on a
//! [`SyntheticTask`] with one of the balancing strategies.
//!
//! Each step's batch is cut into fixed-size chunks. Chunks run forward and
//! backward independently (possibly on worker threads) and every statistic
//! and gradient is summed over chunks in ascending order. Groups own
//! contiguous runs of chunks, so the arithmetic is the same for any group
//! count and `G = 4` reproduces `G = 1` bit for bit.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::balance::{
    bias_update, lbl_logit_grad, top1_logit_grad, BalanceKind, BalanceStrategy, Top1Sums,
};
use crate::error::{LabError, Result};
use crate::harness::optim::{adamw_step, OptimizerState};
use crate::harness::runconfig::RunConfig;
use crate::harness::task::{keyed_rng, make_task, SyntheticTask};
use crate::metrics::{relative_deviation, LayerStep, RunRecord, Snapshot, StepRecord};
use crate::moe_layer::{
    moe_backward, moe_forward, ForwardOptions, LayerGrads, MoELayer, MoeForward,
};
use crate::router::softmax_probs;
use crate::schedule::{
    activated_experts_at, batch_size_at, learning_rate_at_progress, LrSchedule, TokenPlan,
};
use crate::tensor::Matrix;

const INIT_STREAM: u64 = 3;

/// Forward state of one chunk through every layer.
struct ChunkPass {
    first: usize,
    layers: Vec<MoeForward>,
    outputs: Matrix,
}

/// Per-layer statistics summed over a span of tokens.
#[derive(Clone, Debug)]
struct LayerSums {
    counts: Vec<u64>,
    prob_sums: Vec<f64>,
    top1: Top1Sums,
}

impl LayerSums {
    fn zeros(n_e: usize) -> Self {
        Self {
            counts: vec![0; n_e],
            prob_sums: vec![0.0; n_e],
            top1: Top1Sums::zeros(n_e),
        }
    }

    fn add_forward(&mut self, f: &MoeForward, tau: f64) {
        for (a, b) in self.counts.iter_mut().zip(&f.stats.counts) {
            *a += b;
        }
        for (a, b) in self
            .prob_sums
            .iter_mut()
            .zip(f.decision.probs.column_sums())
        {
            *a += b;
        }
        self.top1
            .accumulate(&Top1Sums::from_probs(&top1_probs(f, tau)));
    }

    fn tokens(&self) -> usize {
        self.top1.tokens
    }

    fn fractions(&self) -> Vec<f64> {
        let n = self.tokens() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    fn mean_probs(&self) -> Vec<f64> {
        let n = self.tokens() as f64;
        self.prob_sums.iter().map(|&s| s / n).collect()
    }
}

/// Temperature-scaled probabilities used by the top-1 loss. The gate
/// probabilities are the `tau = 1` case.
fn top1_probs(f: &MoeForward, tau: f64) -> Cow<'_, Matrix> {
    if tau == 1.0 {
        Cow::Borrowed(&f.decision.probs)
    } else {
        Cow::Owned(softmax_probs(&f.decision.logits, tau))
    }
}

fn lbl_value(f: &[f64], p: &[f64]) -> f64 {
    f.len() as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
}

pub struct Experiment {
    pub config: RunConfig,
    pub task: SyntheticTask,
    pub layers: Vec<MoELayer>,
    pub optimizer: OptimizerState,
    pub record: RunRecord,
    pub next_step: usize,
    plan: TokenPlan,
    lr: LrSchedule,
    strategy: BalanceStrategy,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let task = make_task(
            &config.task,
            m.num_experts,
            m.hidden_size,
            m.num_layers,
            m.seed,
        )?;
        let mut rng = keyed_rng(m.seed, u64::MAX, 0, INIT_STREAM);
        let layers: Vec<MoELayer> = (0..m.num_layers)
            .map(|l| {
                MoELayer::init(
                    l,
                    m.hidden_size,
                    m.expert_intermediate_size,
                    m.num_experts,
                    &mut rng,
                )
            })
            .collect();
        let sizes: Vec<usize> = param_slices(&layers).iter().map(|s| s.len()).collect();
        let optimizer = OptimizerState::new(config.optimizer, &sizes);
        let record = RunRecord::new(
            config.run_id.clone(),
            config.strategy.as_str(),
            m.num_layers,
            m.num_experts,
            config.tracked_layers.clone(),
        );
        let mut exp = Self {
            plan: TokenPlan::new(config.steps, &config.batch),
            lr: config.lr_schedule(),
            strategy: config.strategy()?,
            config,
            task,
            layers,
            optimizer,
            record,
            next_step: 0,
        };
        exp.initial_snapshot()?;
        Ok(exp)
    }

    pub fn total_steps(&self) -> usize {
        self.plan.steps()
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.total_steps()
    }

    /// Runs every remaining step.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    /// Runs steps until `next_step == end` (clamped to the run length).
    pub fn run_until(&mut self, end: usize) -> Result<()> {
        while self.next_step < end.min(self.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        let s = self.next_step;
        self.step_inner(s).map_err(|e| LabError::AtStep {
            step: s,
            source: Box::new(e),
        })?;
        self.next_step += 1;
        Ok(())
    }

    fn top_ks(&self, progress: f64) -> Result<Vec<usize>> {
        (0..self.layers.len())
            .map(|l| activated_experts_at(l as i64, progress, &self.config.sparsity))
            .collect()
    }

    fn forward_options(&self, top_ks: &[usize]) -> Vec<ForwardOptions> {
        top_ks
            .iter()
            .map(|&k| ForwardOptions {
                top_k: k,
                renormalize: self.config.model.renormalize_gates,
                fp32_gating: self.config.model.fp32_gating,
                use_bias: self.strategy.uses_bias(),
            })
            .collect()
    }

    fn forward_chunk(
        &self,
        step: usize,
        first: usize,
        n: usize,
        opts: &[ForwardOptions],
    ) -> Result<ChunkPass> {
        let mut h = self.task.sample(step, first, n);
        let mut fwds = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let u = self.task.blur(l, &h);
            let f = moe_forward(&u, layer, &opts[l])?;
            h.add_assign(&f.outputs);
            fwds.push(f);
        }
        Ok(ChunkPass {
            first,
            layers: fwds,
            outputs: h,
        })
    }

    fn forward_all(
        &self,
        step: usize,
        batch: usize,
        opts: &[ForwardOptions],
    ) -> Result<Vec<ChunkPass>> {
        let chunk = self.config.reduce_chunk;
        (0..batch / chunk)
            .into_par_iter()
            .map(|c| self.forward_chunk(step, c * chunk, chunk, opts))
            .collect()
    }

    fn layer_sums(&self, passes: &[ChunkPass], layer: usize) -> LayerSums {
        let mut s = LayerSums::zeros(self.config.model.num_experts);
        for p in passes {
            s.add_forward(&p.layers[layer], self.strategy.tau);
        }
        s
    }

    fn initial_snapshot(&mut self) -> Result<()> {
        if self.config.tracked_layers.is_empty() {
            return Ok(());
        }
        let batch = self
            .plan
            .batch_sizes
            .first()
            .copied()
            .unwrap_or_else(|| batch_size_at(0.0, &self.config.batch));
        let opts = self.forward_options(&self.top_ks(0.0)?);
        let passes = self.forward_all(0, batch, &opts)?;
        for &l in &self.config.tracked_layers.clone() {
            let sums = self.layer_sums(&passes, l);
            self.record.push_snapshot(Snapshot {
                step: 0,
                layer: l,
                fractions: sums.fractions(),
                mean_probs: sums.mean_probs(),
            })?;
        }
        Ok(())
    }

    fn step_inner(&mut self, step: usize) -> Result<()> {
        let cfg = &self.config;
        let n_e = cfg.model.num_experts;
        let groups = cfg.model.num_parallel_groups;
        let chunk = cfg.reduce_chunk;
        let batch = self.plan.batch_sizes[step];
        let progress = self.plan.progress_at(step);
        let lr = learning_rate_at_progress(step, progress, &self.lr);
        let top_ks = self.top_ks(progress)?;
        let opts = self.forward_options(&top_ks);
        if !batch.is_multiple_of(groups * chunk) {
            return Err(LabError::Invalid(format!(
                "batch {batch} not divisible into {groups} groups of {chunk}-token chunks"
            )));
        }
        let chunks_per_group = batch / groups / chunk;

        let passes = self.forward_all(step, batch, &opts)?;

        // statistics: global and per group, summed in chunk order
        let mut global = Vec::with_capacity(self.layers.len());
        let mut per_group = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mut gs = Vec::with_capacity(groups);
            for g in 0..groups {
                let mut s = LayerSums::zeros(n_e);
                for p in &passes[g * chunks_per_group..(g + 1) * chunks_per_group] {
                    s.add_forward(&p.layers[l], self.strategy.tau);
                }
                gs.push(s);
            }
            global.push(self.layer_sums(&passes, l));
            per_group.push(gs);
        }

        let alpha = self.strategy.alpha;
        let mut balance_loss = 0.0;
        for l in 0..self.layers.len() {
            let gsum = &global[l];
            balance_loss += match self.strategy.kind {
                BalanceKind::LblGlobalBatch if cfg.model.sync_probs => {
                    alpha * lbl_value(&gsum.fractions(), &gsum.mean_probs())
                }
                BalanceKind::LblGlobalBatch => {
                    let f = gsum.fractions();
                    per_group[l]
                        .iter()
                        .map(|g| alpha * lbl_value(&f, &g.mean_probs()))
                        .sum::<f64>()
                        / groups as f64
                }
                BalanceKind::LblMicroBatch => {
                    per_group[l]
                        .iter()
                        .map(|g| alpha * lbl_value(&g.fractions(), &g.mean_probs()))
                        .sum::<f64>()
                        / groups as f64
                }
                BalanceKind::Top1Lbl => alpha * gsum.top1.value(),
                BalanceKind::LossFree | BalanceKind::None => 0.0,
            };
        }

        let n_total = batch as f64;
        let d = cfg.model.hidden_size as f64;
        let strategy = self.strategy;
        let layers = &self.layers;
        let task = &self.task;
        let global_ref = &global;
        let per_group_ref = &per_group;

        // backward, one chunk at a time
        let results: Vec<Result<(f64, Vec<LayerGrads>)>> = passes
            .into_par_iter()
            .enumerate()
            .map(|(c, pass)| {
                let n = pass.outputs.rows();
                let targets = task.targets_for(pass.first, n);
                let mut sq = 0.0;
                let mut upstream = Matrix::zeros(n, pass.outputs.cols());
                for j in 0..n {
                    for ((u, &y), &t) in upstream
                        .row_mut(j)
                        .iter_mut()
                        .zip(pass.outputs.row(j))
                        .zip(targets.row(j))
                    {
                        let r = y - t;
                        sq += r * r;
                        *u = 2.0 * r / (n_total * d);
                    }
                }
                let group = c / chunks_per_group;
                let mut grads: Vec<Option<LayerGrads>> = vec![None; layers.len()];
                let mut dh = upstream;
                for l in (0..layers.len()).rev() {
                    let fwd = &pass.layers[l];
                    let probs = &fwd.decision.probs;
                    let bal = match strategy.kind {
                        BalanceKind::LblGlobalBatch => Some(lbl_logit_grad(
                            probs,
                            &global_ref[l].fractions(),
                            strategy.alpha * n_e as f64 / n_total,
                            1.0,
                        )),
                        BalanceKind::LblMicroBatch => Some(lbl_logit_grad(
                            probs,
                            &per_group_ref[l][group].fractions(),
                            strategy.alpha * n_e as f64 / n_total,
                            1.0,
                        )),
                        BalanceKind::Top1Lbl => Some(top1_logit_grad(
                            &top1_probs(fwd, strategy.tau),
                            &global_ref[l].top1,
                            strategy.alpha,
                            strategy.tau,
                        )),
                        BalanceKind::LossFree | BalanceKind::None => None,
                    };
                    let (g, du) = moe_backward(fwd, &layers[l], &dh, bal.as_ref())?;
                    let s = task.layer_difficulty[l];
                    for (a, b) in dh.as_mut_slice().iter_mut().zip(du.as_slice()) {
                        *a += s * b;
                    }
                    grads[l] = Some(g);
                }
                Ok((
                    sq,
                    grads
                        .into_iter()
                        .map(|g| g.expect("every layer visited"))
                        .collect(),
                ))
            })
            .collect();

        let mut sq_total = 0.0;
        let mut grads: Vec<LayerGrads> = self.layers.iter().map(LayerGrads::zeros_like).collect();
        for r in results {
            let (sq, g) = r?;
            sq_total += sq;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
        let task_loss = sq_total / (n_total * d);
        if !task_loss.is_finite() {
            return Err(LabError::NonFinite("task loss"));
        }
        if !balance_loss.is_finite() {
            return Err(LabError::NonFinite("balance loss"));
        }

        {
            let gslices = grad_slices(&grads);
            let mut pslices = param_slices_mut(&mut self.layers);
            adamw_step(&mut pslices, &gslices, &mut self.optimizer, lr)?;
        }

        if self.strategy.uses_bias() {
            for (layer, sums) in self.layers.iter_mut().zip(&global) {
                layer.router.bias =
                    bias_update(&layer.router.bias, &sums.counts, self.strategy.gamma);
            }
        }

        let mut layer_steps = Vec::with_capacity(self.layers.len());
        for (l, sums) in global.iter().enumerate() {
            let dev = relative_deviation(&sums.counts, n_e)?;
            layer_steps.push(LayerStep {
                top_k: top_ks[l],
                counts: sums.counts.clone(),
                mean_probs: sums.mean_probs(),
                max_dev: dev.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                min_dev: dev.iter().copied().fold(f64::INFINITY, f64::min),
                bias_norm: self.layers[l]
                    .router
                    .bias
                    .iter()
                    .fold(0.0, |a: f64, b| a.max(b.abs())),
            });
        }
        self.record.push_step(StepRecord {
            step,
            progress,
            lr,
            batch_size: batch,
            task_loss,
            balance_loss,
            layers: layer_steps,
        })?;

        let last = step + 1 == self.total_steps();
        if step > 0 && (step.is_multiple_of(self.config.snapshot_every) || last) {
            for &l in &self.config.tracked_layers {
                self.record.push_snapshot(Snapshot {
                    step,
                    layer: l,
                    fractions: global[l].fractions(),
                    mean_probs: global[l].mean_probs(),
                })?;
            }
        }
        Ok(())
    }
}

/// Trainable tensors in a fixed order: per layer the router weights, then
/// `w1, w3, w2` of each expert.
pub(crate) fn param_slices(layers: &[MoELayer]) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for l in layers {
        out.push(l.router.gate_weights.as_slice());
        for e in &l.experts {
            out.push(e.w1.as_slice());
            out.push(e.w3.as_slice());
            out.push(e.w2.as_slice());
        }
    }
    out
}

fn param_slices_mut(layers: &mut [MoELayer]) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    for l in layers {
        out.push(l.router.gate_weights.as_mut_slice());
        for e in &mut l.experts {
            out.push(e.w1.as_mut_slice());
            out.push(e.w3.as_mut_slice());
            out.push(e.w2.as_mut_slice());
        }
    }
    out
}

fn grad_slices(grads: &[LayerGrads]) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for g in grads {
        out.push(g.router.as_slice());
        for e in &g.experts {
            out.push(e.w1.as_slice());
            out.push(e.w3.as_slice());
            out.push(e.w2.as_slice());
        }
    }
    out
}

/// Builds and runs an experiment to completion.
pub fn run_experiment(config: RunConfig) -> Result<Experiment> {
    let mut exp = Experiment::new(config)?;
    exp.run()?;
    Ok(exp)
}
