//! Parameter fitting for a fixed structure.
//!
//! Sum weights move by flow-weighted EM (per-node sufficient statistics,
//! renormalized); leaf parameters move by Adam on exact per-logit gradients
//! from the same flow pass. Dirichlet leaves take conjugate updates from
//! flow-weighted counts.

use crate::circuit::{
    Circuit, CircuitError, FlowWorkspace, LeafParams, Node, NodeId, SumParamLayout, Var,
    LEAF_P_MAX, LEAF_P_MIN,
};
use crate::data::Dataset;
use crate::numeric::{logit, sigmoid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to EM statistics before renormalization so no weight dies.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Elementwise Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            cfg,
        }
    }

    /// One descent step on `params` along `grad` (pass the gradient of the
    /// loss being minimized).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / bias1;
            let vhat = self.v[i] / bias2;
            params[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptConfig {
    /// EM/Adam interleaved updates. 30 is enough for reward ranking; final
    /// fits use 100.
    pub anemone_steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Scale on flow-weighted counts in the Dirichlet update.
    pub dirichlet_eta: f64,
    /// Prior concentrations for value 0 and value 1.
    pub leaf_prior_alpha: (f64, f64),
    /// Mini-batch EM damping: new = (1-γ)·old + γ·EM target. Full-batch
    /// updates are undamped, which is what the monotonicity guarantee is
    /// about.
    pub em_damping: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            anemone_steps: 30,
            batch_size: 0,
            adam: AdamConfig::default(),
            dirichlet_eta: 1.0,
            leaf_prior_alpha: (1.0, 1.0),
            em_damping: 0.5,
        }
    }
}

impl OptConfig {
    pub fn final_fit() -> OptConfig {
        OptConfig {
            anemone_steps: 100,
            ..Default::default()
        }
    }
}

/// Per-leaf Adam state over leaf logits.
#[derive(Debug, Clone)]
pub struct LeafAdamState {
    pub leaves: Vec<NodeId>,
    pub logits: Vec<f64>,
    pub adam: AdamState,
}

impl LeafAdamState {
    pub fn from_circuit(circuit: &Circuit, cfg: AdamConfig) -> LeafAdamState {
        let leaves: Vec<NodeId> = circuit
            .node_ids()
            .filter(|id| matches!(circuit.node(*id), Node::Leaf { .. }))
            .collect();
        let logits: Vec<f64> = leaves
            .iter()
            .map(|id| match circuit.node(*id) {
                Node::Leaf { params, .. } => logit(params.mean_one().clamp(LEAF_P_MIN, LEAF_P_MAX)),
                _ => unreachable!(),
            })
            .collect();
        let n = leaves.len();
        LeafAdamState {
            leaves,
            logits,
            adam: AdamState::new(n, cfg),
        }
    }

    fn write_back(&self, circuit: &mut Circuit) {
        for (id, &w) in self.leaves.iter().zip(&self.logits) {
            circuit.set_leaf_params(*id, LeafParams::Bernoulli { p: sigmoid(w) });
        }
    }
}

/// Accumulated flow statistics for one batch: per sum-weight entry the sum
/// over rows of `f_n(x)·θ_{n,c}·p_c(x)/p_n(x)`, plus the batch mean log
/// likelihood measured at the current parameters.
pub fn accumulate_flow_stats(
    circuit: &Circuit,
    layout: &SumParamLayout,
    rows: impl Iterator<Item = impl AsRef<[u8]>>,
    ws: &mut FlowWorkspace,
) -> (Vec<f64>, f64, usize) {
    let mut stats = vec![0.0f64; layout.total];
    let mut total_ll = 0.0;
    let mut n = 0usize;
    for row in rows {
        let ll = circuit.flows_into(row.as_ref(), layout, ws);
        total_ll += ll;
        for (s, e) in stats.iter_mut().zip(&ws.edge_flows) {
            *s += e;
        }
        n += 1;
    }
    (stats, total_ll / n.max(1) as f64, n)
}

/// One flow-weighted EM update of all sum weights from one batch.
///
/// Per node, new weights are proportional to the accumulated statistics
/// with a small floor; a node that received zero flow on the batch keeps
/// its weights. `damping` = 1 is the raw EM target (use for full batches).
/// Returns the batch mean log likelihood before the update.
pub fn anemone_step<'a>(
    circuit: &mut Circuit,
    rows: impl Iterator<Item = &'a [u8]>,
    damping: f64,
) -> Result<f64, CircuitError> {
    let layout = circuit.sum_param_layout();
    let mut ws = FlowWorkspace::default();
    let (stats, ll, n) = accumulate_flow_stats(circuit, &layout, rows, &mut ws);
    if n == 0 {
        return Err(CircuitError::EmptyDataset);
    }
    apply_em_update(circuit, &layout, &stats, damping);
    Ok(ll)
}

pub(crate) fn apply_em_update(
    circuit: &mut Circuit,
    layout: &SumParamLayout,
    stats: &[f64],
    damping: f64,
) {
    for (k, &id) in layout.sums.iter().enumerate() {
        let block = &stats[layout.block(k)];
        let total: f64 = block.iter().sum();
        if total <= 0.0 {
            continue; // no flow reached this node on the batch
        }
        let floored: Vec<f64> = block.iter().map(|&s| s.max(WEIGHT_FLOOR)).collect();
        let norm: f64 = floored.iter().sum();
        let old = match circuit.node(id) {
            Node::Sum { weights, .. } => weights.clone(),
            _ => unreachable!(),
        };
        let mut new: Vec<f64> = floored
            .iter()
            .zip(&old)
            .map(|(s, o)| (1.0 - damping) * o + damping * (s / norm))
            .collect();
        let renorm: f64 = new.iter().sum();
        for w in &mut new {
            *w /= renorm;
        }
        circuit.set_sum_weights(id, &new);
    }
}

/// One Adam step on all leaf logits from exact gradients
/// `∂log p(x)/∂logit_ℓ = f_ℓ(x)·(x_v − p_ℓ)`, averaged over the batch.
/// Returns the batch mean log likelihood before the update.
pub fn adam_leaf_step<'a>(
    circuit: &mut Circuit,
    rows: impl Iterator<Item = &'a [u8]>,
    state: &mut LeafAdamState,
) -> Result<f64, CircuitError> {
    let layout = circuit.sum_param_layout();
    let mut ws = FlowWorkspace::default();
    let mut grad = vec![0.0f64; state.leaves.len()];
    let leaf_pos: std::collections::HashMap<NodeId, usize> = state
        .leaves
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut total_ll = 0.0;
    let mut n = 0usize;
    for row in rows {
        total_ll += circuit.flows_into(row, &layout, &mut ws);
        for (&id, &pos) in &leaf_pos {
            if let Node::Leaf { var, params } = circuit.node(id) {
                let p = params.mean_one();
                let x = row[var.index()] as f64;
                grad[pos] += ws.flows[id.index()] * (x - p);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(CircuitError::EmptyDataset);
    }
    // minimize negative mean log likelihood
    for g in &mut grad {
        *g = -*g / n as f64;
    }
    state.adam.step(&mut state.logits, &grad);
    for w in &mut state.logits {
        *w = w.clamp(logit(LEAF_P_MIN), logit(LEAF_P_MAX));
    }
    state.write_back(circuit);
    Ok(total_ll / n as f64)
}

/// Flow-weighted EM on the leaves themselves (p ← Σf·x / Σf). Collapses
/// mixtures when flows are uninformative; kept for the ablation that
/// motivates the hybrid split.
pub fn em_leaf_step<'a>(
    circuit: &mut Circuit,
    rows: impl Iterator<Item = &'a [u8]>,
) -> Result<f64, CircuitError> {
    let layout = circuit.sum_param_layout();
    let mut ws = FlowWorkspace::default();
    let leaves: Vec<(NodeId, Var)> = circuit
        .node_ids()
        .filter_map(|id| match circuit.node(id) {
            Node::Leaf { var, .. } => Some((id, *var)),
            _ => None,
        })
        .collect();
    let mut weighted_ones = vec![0.0f64; leaves.len()];
    let mut total_flow = vec![0.0f64; leaves.len()];
    let mut total_ll = 0.0;
    let mut n = 0usize;
    for row in rows {
        total_ll += circuit.flows_into(row, &layout, &mut ws);
        for (i, (id, var)) in leaves.iter().enumerate() {
            let f = ws.flows[id.index()];
            total_flow[i] += f;
            weighted_ones[i] += f * row[var.index()] as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Err(CircuitError::EmptyDataset);
    }
    for (i, (id, _)) in leaves.iter().enumerate() {
        if total_flow[i] > 0.0 {
            let p = weighted_ones[i] / total_flow[i];
            circuit.set_leaf_params(*id, LeafParams::Bernoulli { p });
        }
    }
    Ok(total_ll / n as f64)
}

/// One fitted-circuit trace entry: batch mean log likelihood at the start
/// of the step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitRecord {
    pub step: usize,
    pub train_ll: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub circuit: Circuit,
    pub trace: Vec<FitRecord>,
    pub final_train_ll: f64,
}

/// Initialize every leaf at the smoothed empirical marginal of its
/// variable, plus a small seeded logit jitter. The jitter breaks the exact
/// symmetry of sum children that share identical leaves (uniform weights
/// and shared initialization are a fixed point of both EM and the leaf
/// gradient, so mixtures could never differentiate without it).
pub fn init_leaves_empirical(circuit: &mut Circuit, data: &Dataset, alpha: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let marginals: Vec<f64> = (0..data.num_vars())
        .map(|v| data.smoothed_marginal(Var(v as u16), alpha))
        .collect();
    for id in circuit.node_ids() {
        if let Node::Leaf { var, .. } = circuit.node(id) {
            let base = logit(marginals[var.index()].clamp(LEAF_P_MIN, LEAF_P_MAX));
            let jitter = rng.random_range(-0.5..0.5);
            circuit.set_leaf_params(
                id,
                LeafParams::Bernoulli {
                    p: sigmoid(base + jitter),
                },
            );
        }
    }
}

/// Fit sum weights and leaves for a fixed structure: per batch, one
/// flow-weighted EM pass on the sums, then one Adam pass on the leaves.
pub fn hybrid_fit(
    circuit: &Circuit,
    data: &Dataset,
    config: &OptConfig,
    seed: u64,
) -> Result<FitResult, CircuitError> {
    if data.is_empty() {
        return Err(CircuitError::EmptyDataset);
    }
    let mut fitted = circuit.clone();
    init_leaves_empirical(&mut fitted, data, 0.1, seed);
    let mut leaf_state = LeafAdamState::from_circuit(&fitted, config.adam);

    let full_batch = config.batch_size == 0 || config.batch_size >= data.len();
    let damping = if full_batch { 1.0 } else { config.em_damping };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut cursor = 0usize;

    let mut trace = Vec::with_capacity(config.anemone_steps);
    for step in 0..config.anemone_steps {
        let batch: Vec<usize> = if full_batch {
            order.clone()
        } else {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                if cursor == 0 {
                    for i in (1..order.len()).rev() {
                        let j = rng.random_range(0..=i);
                        order.swap(i, j);
                    }
                }
                batch.push(order[cursor]);
                cursor = (cursor + 1) % order.len();
            }
            batch
        };
        let ll = anemone_step(&mut fitted, batch.iter().map(|&r| data.row(r)), damping)?;
        adam_leaf_step(&mut fitted, batch.iter().map(|&r| data.row(r)), &mut leaf_state)?;
        trace.push(FitRecord { step, train_ll: ll });
    }
    let final_train_ll = fitted.avg_loglik(data.iter_rows())?;
    Ok(FitResult {
        circuit: fitted,
        trace,
        final_train_ll,
    })
}

/// Conjugate Dirichlet refresh from flow-weighted counts:
/// `α_v = prior_v + η·Σ_x f_ℓ(x)·1[x_v = v]`. Every count is bounded by the
/// batch size since flows are at most one. Leaves that saw no flow keep
/// their current concentrations (Bernoulli leaves fall back to the prior).
pub fn dirichlet_update<'a>(
    circuit: &mut Circuit,
    rows: impl Iterator<Item = &'a [u8]>,
    eta: f64,
    prior: (f64, f64),
) -> Result<(), CircuitError> {
    let layout = circuit.sum_param_layout();
    let mut ws = FlowWorkspace::default();
    let leaves: Vec<(NodeId, Var)> = circuit
        .node_ids()
        .filter_map(|id| match circuit.node(id) {
            Node::Leaf { var, .. } => Some((id, *var)),
            _ => None,
        })
        .collect();
    let mut counts = vec![(0.0f64, 0.0f64); leaves.len()];
    let mut n = 0usize;
    for row in rows {
        circuit.flows_into(row, &layout, &mut ws);
        for (i, (id, var)) in leaves.iter().enumerate() {
            let f = ws.flows[id.index()];
            if row[var.index()] == 1 {
                counts[i].1 += f;
            } else {
                counts[i].0 += f;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(CircuitError::EmptyDataset);
    }
    for (i, (id, _)) in leaves.iter().enumerate() {
        let (n0, n1) = counts[i];
        debug_assert!(n0 <= n as f64 + 1e-9 && n1 <= n as f64 + 1e-9);
        if n0 + n1 > 0.0 {
            circuit.set_leaf_params(
                *id,
                LeafParams::Dirichlet {
                    alpha0: prior.0 + eta * n0,
                    alpha1: prior.1 + eta * n1,
                },
            );
        } else if let Node::Leaf {
            params: LeafParams::Bernoulli { .. },
            ..
        } = circuit.node(*id)
        {
            circuit.set_leaf_params(
                *id,
                LeafParams::Dirichlet {
                    alpha0: prior.0,
                    alpha1: prior.1,
                },
            );
        }
    }
    Ok(())
}
