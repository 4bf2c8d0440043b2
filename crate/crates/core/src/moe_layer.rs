//! One MoE layer: SwiGLU experts, grouped dispatch, weighted combine, backward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::balance::BalanceStrategy;
use crate::config::{LoadStats, TokenBatch, INIT_STD};
use crate::error::{LabError, Result};
use crate::router::{
    accumulate_load, biased_scores, compute_logits, select_top_k, softmax_backward, softmax_probs,
    RouterState, RoutingDecision,
};
use crate::tensor::Matrix;

/// Gate (`w1`, `m x d`), up (`w3`, `m x d`) and down (`w2`, `d x m`)
/// projections of a bias-free SwiGLU FFN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub w3: Matrix,
    pub w2: Matrix,
}

impl ExpertParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, inter: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::randn(inter, hidden, INIT_STD, rng),
            w3: Matrix::randn(inter, hidden, INIT_STD, rng),
            w2: Matrix::randn(hidden, inter, INIT_STD, rng),
        }
    }

    pub fn zeros(hidden: usize, inter: usize) -> Self {
        Self {
            w1: Matrix::zeros(inter, hidden),
            w3: Matrix::zeros(inter, hidden),
            w2: Matrix::zeros(hidden, inter),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.cols()
    }

    pub fn intermediate_size(&self) -> usize {
        self.w1.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub router: RouterState,
    pub experts: Vec<ExpertParams>,
    pub layer_index: usize,
}

impl MoELayer {
    pub fn init<R: Rng + ?Sized>(
        layer_index: usize,
        hidden: usize,
        inter: usize,
        num_experts: usize,
        rng: &mut R,
    ) -> Self {
        let router = RouterState::init(hidden, num_experts, rng);
        let experts = (0..num_experts)
            .map(|_| ExpertParams::init(hidden, inter, rng))
            .collect();
        Self {
            router,
            experts,
            layer_index,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn check(&self) -> Result<()> {
        if self.experts.len() != self.router.num_experts() {
            return Err(LabError::shape(
                "MoELayer experts",
                self.router.num_experts(),
                self.experts.len(),
            ));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn swish_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

/// Intermediates of one expert application, kept for the backward pass.
#[derive(Clone, Debug)]
struct ExpertTrace {
    a1: Vec<f64>,
    a3: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn expert_apply(x: &[f64], e: &ExpertParams) -> ExpertTrace {
    let a1 = e.w1.matvec(x);
    let a3 = e.w3.matvec(x);
    let hidden: Vec<f64> = a1.iter().zip(&a3).map(|(&g, &u)| swish(g) * u).collect();
    let out = e.w2.matvec(&hidden);
    ExpertTrace {
        a1,
        a3,
        hidden,
        out,
    }
}

/// `W2 · (swish(W1 x) ⊙ (W3 x))`.
pub fn swiglu_forward(x: &[f64], e: &ExpertParams) -> Vec<f64> {
    expert_apply(x, e).out
}

/// Gate probabilities are always the plain softmax of the logits; the
/// temperature of the top-1 loss only enters its own statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub top_k: usize,
    pub renormalize: bool,
    pub fp32_gating: bool,
    /// Add the router's expert bias to the selection scores.
    pub use_bias: bool,
}

impl ForwardOptions {
    pub fn new(strategy: &BalanceStrategy, top_k: usize) -> Self {
        Self {
            top_k,
            renormalize: true,
            fp32_gating: false,
            use_bias: strategy.uses_bias(),
        }
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct MoeCache {
    inputs: Matrix,
    renormalize: bool,
    /// Per (token, slot): expert trace.
    traces: Vec<ExpertTrace>,
}

#[derive(Clone, Debug)]
pub struct MoeForward {
    pub outputs: Matrix,
    pub decision: RoutingDecision,
    pub stats: LoadStats,
    pub cache: MoeCache,
}

/// Token indices (with slot) per expert, token order preserved.
pub fn dispatch(decision: &RoutingDecision, num_experts: usize) -> Vec<Vec<(usize, usize)>> {
    let mut groups = vec![Vec::new(); num_experts];
    for j in 0..decision.num_tokens() {
        for (slot, &e) in decision.experts_of(j).iter().enumerate() {
            groups[e].push((j, slot));
        }
    }
    groups
}

pub fn moe_forward(inputs: &Matrix, layer: &MoELayer, opts: &ForwardOptions) -> Result<MoeForward> {
    layer.check()?;
    let n_e = layer.num_experts();
    if opts.top_k == 0 || opts.top_k > n_e {
        return Err(LabError::TopK {
            k: opts.top_k,
            n: n_e,
        });
    }
    let logits = compute_logits(inputs, &layer.router, opts.fp32_gating)?;
    let probs = softmax_probs(&logits, 1.0);
    let scores = if opts.use_bias {
        biased_scores(&logits, &layer.router.bias)
    } else {
        logits.clone()
    };
    let decision = select_top_k(&scores, logits, probs, opts.top_k, opts.renormalize)?;
    let stats = accumulate_load(&decision, n_e);

    let k = opts.top_k;
    let n = inputs.rows();
    let d = inputs.cols();
    let mut traces: Vec<Option<ExpertTrace>> = vec![None; n * k];
    for (e, toks) in dispatch(&decision, n_e).iter().enumerate() {
        let params = &layer.experts[e];
        for &(j, slot) in toks {
            traces[j * k + slot] = Some(expert_apply(inputs.row(j), params));
        }
    }
    let traces: Vec<ExpertTrace> = traces
        .into_iter()
        .map(|t| t.expect("every slot dispatched"))
        .collect();

    let mut outputs = Matrix::zeros(n, d);
    for j in 0..n {
        let gates = decision.gates_of(j);
        let row = outputs.row_mut(j);
        for slot in 0..k {
            let t = &traces[j * k + slot];
            for (o, &v) in row.iter_mut().zip(&t.out) {
                *o += gates[slot] * v;
            }
        }
    }

    Ok(MoeForward {
        outputs,
        decision,
        stats,
        cache: MoeCache {
            inputs: inputs.clone(),
            renormalize: opts.renormalize,
            traces,
        },
    })
}

/// Convenience wrapper taking a [`TokenBatch`] and a strategy.
pub fn moe_forward_batch(
    batch: &TokenBatch,
    layer: &MoELayer,
    strategy: &BalanceStrategy,
    top_k: usize,
) -> Result<MoeForward> {
    moe_forward(
        batch.embeddings(),
        layer,
        &ForwardOptions::new(strategy, top_k),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub router: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &MoELayer) -> Self {
        let d = layer.router.hidden_size();
        let m = layer
            .experts
            .first()
            .map_or(0, ExpertParams::intermediate_size);
        Self {
            router: Matrix::zeros(d, layer.num_experts()),
            experts: (0..layer.num_experts())
                .map(|_| ExpertParams::zeros(d, m))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        self.router.add_assign(&other.router);
        for (a, b) in self.experts.iter_mut().zip(&other.experts) {
            a.w1.add_assign(&b.w1);
            a.w3.add_assign(&b.w3);
            a.w2.add_assign(&b.w2);
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.router.sum_sq()
            + self
                .experts
                .iter()
                .map(|e| e.w1.sum_sq() + e.w3.sum_sq() + e.w2.sum_sq())
                .sum::<f64>()
    }
}

/// Backward pass of [`moe_forward`]. `upstream` is `∂L/∂outputs`;
/// `balance_grad`, when present, is the already-scaled `∂(α·loss)/∂logits`
/// for the same rows. Returns parameter gradients and `∂L/∂inputs`.
pub fn moe_backward(
    fwd: &MoeForward,
    layer: &MoELayer,
    upstream: &Matrix,
    balance_grad: Option<&Matrix>,
) -> Result<(LayerGrads, Matrix)> {
    let cache = &fwd.cache;
    let decision = &fwd.decision;
    let inputs = &cache.inputs;
    let (n, d) = inputs.shape();
    if upstream.shape() != (n, d) {
        return Err(LabError::shape(
            "moe_backward upstream",
            format!("{:?}", (n, d)),
            format!("{:?}", upstream.shape()),
        ));
    }
    if cache.traces.len() != n * decision.top_k {
        return Err(LabError::Invalid(
            "forward cache does not match decision".into(),
        ));
    }
    let n_e = layer.num_experts();
    let k = decision.top_k;
    let mut grads = LayerGrads::zeros_like(layer);
    let mut d_inputs = Matrix::zeros(n, d);
    let mut d_probs = Matrix::zeros(n, n_e);

    for (e, toks) in dispatch(decision, n_e).iter().enumerate() {
        let params = &layer.experts[e];
        let g = &mut grads.experts[e];
        for &(j, slot) in toks {
            let t = &cache.traces[j * k + slot];
            let gate = decision.gates_of(j)[slot];
            let up = upstream.row(j);
            let d_out: Vec<f64> = up.iter().map(|v| gate * v).collect();
            g.w2.add_outer(&d_out, &t.hidden);
            let d_hidden = params.w2.matvec_t(&d_out);
            let mut d_a1 = vec![0.0; t.a1.len()];
            let mut d_a3 = vec![0.0; t.a1.len()];
            for i in 0..t.a1.len() {
                d_a1[i] = d_hidden[i] * t.a3[i] * swish_grad(t.a1[i]);
                d_a3[i] = d_hidden[i] * swish(t.a1[i]);
            }
            let x = inputs.row(j);
            g.w1.add_outer(&d_a1, x);
            g.w3.add_outer(&d_a3, x);
            let dx1 = params.w1.matvec_t(&d_a1);
            let dx3 = params.w3.matvec_t(&d_a3);
            for ((o, a), b) in d_inputs.row_mut(j).iter_mut().zip(&dx1).zip(&dx3) {
                *o += a + b;
            }
        }
    }

    // gate values -> probabilities
    for j in 0..n {
        let experts = decision.experts_of(j);
        let gates = decision.gates_of(j);
        let up = upstream.row(j);
        let d_gate: Vec<f64> = (0..k)
            .map(|slot| {
                let out = &cache.traces[j * k + slot].out;
                up.iter().zip(out).map(|(a, b)| a * b).sum()
            })
            .collect();
        if k > 1 && cache.renormalize {
            let s: f64 = experts.iter().map(|&e| decision.probs.get(j, e)).sum();
            let inner: f64 = d_gate.iter().zip(gates).map(|(a, b)| a * b).sum();
            for (slot, &e) in experts.iter().enumerate() {
                d_probs.add_at(j, e, (d_gate[slot] - inner) / s);
            }
        } else {
            for (slot, &e) in experts.iter().enumerate() {
                d_probs.add_at(j, e, d_gate[slot]);
            }
        }
    }

    let mut d_logits = softmax_backward(&decision.probs, &d_probs, 1.0);
    if let Some(b) = balance_grad {
        if b.shape() != d_logits.shape() {
            return Err(LabError::shape(
                "moe_backward balance_grad",
                format!("{:?}", d_logits.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        d_logits.add_assign(b);
    }

    // logits = inputs · W
    let w = &layer.router.gate_weights;
    for j in 0..n {
        let dz = d_logits.row(j);
        grads.router.add_outer(inputs.row(j), dz);
        let dx = w.matvec(dz);
        for (o, v) in d_inputs.row_mut(j).iter_mut().zip(&dx) {
            *o += v;
        }
    }
    Ok((grads, d_inputs))
}
