//! Top-down flows and sum-weight derivatives.
//!
//! One forward pass computes per-node log values; one backward pass computes
//! the backprop coefficient `D_n = ∂p(x)/∂p_n` in log space. Everything else
//! is a stable exponentiation of differences:
//!
//! - flow (top-down probability)  f_n = D_n · p_n / p(x), in [0, 1]
//! - weight derivative            ∂p(x)/∂θ_{n,c} = D_n · p_c(x)
//! - weight score                 ∂log p(x)/∂θ_{n,c} = D_n · p_c(x) / p(x)

use super::{Circuit, CircuitError, Node, NodeId};
use crate::numeric::log_add_exp;

/// Per-input forward values and top-down flows.
#[derive(Debug, Clone)]
pub struct FlowCache {
    /// log p_n(x), arena order.
    pub log_values: Vec<f64>,
    /// log D_n, the derivative of the root output in the node's own value.
    pub log_coeff: Vec<f64>,
    /// Top-down probability f_n(x) ∈ [0, 1]; 1 at the root.
    pub flows: Vec<f64>,
    /// Per sum node: per-child flow contribution f_n·θ_c·p_c/p_n
    /// (empty vectors at non-sum nodes). Sums to f_n over children.
    pub edge_flows: Vec<Vec<f64>>,
}

impl FlowCache {
    pub fn root_log_value(&self, circuit: &Circuit) -> f64 {
        self.log_values[circuit.root().index()]
    }
}

/// Fixed flattening of all sum-weight entries into one vector, sums in
/// ascending id order, children in stored order.
#[derive(Debug, Clone)]
pub struct SumParamLayout {
    pub sums: Vec<NodeId>,
    pub arities: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl SumParamLayout {
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k] + self.arities[k]
    }
}

/// Reusable buffers for repeated flow passes over one circuit. Edge flows
/// are stored flat in [`SumParamLayout`] order.
#[derive(Debug, Clone, Default)]
pub struct FlowWorkspace {
    pub log_values: Vec<f64>,
    pub log_coeff: Vec<f64>,
    pub flows: Vec<f64>,
    pub edge_flows: Vec<f64>,
}

impl Circuit {
    /// Forward + backward pass into preallocated buffers; no input checks.
    /// Returns log p(x).
    pub fn flows_into(&self, x: &[u8], layout: &SumParamLayout, ws: &mut FlowWorkspace) -> f64 {
        let n = self.num_nodes();
        ws.log_values.clear();
        ws.log_values.resize(n, 0.0);
        ws.log_coeff.clear();
        ws.log_coeff.resize(n, f64::NEG_INFINITY);
        ws.flows.clear();
        ws.flows.resize(n, 0.0);
        ws.edge_flows.clear();
        ws.edge_flows.resize(layout.total, 0.0);

        for (i, node) in self.nodes().iter().enumerate() {
            ws.log_values[i] = match node {
                Node::Leaf { var, params } => params.log_prob(x[var.index()]),
                Node::Product { children } => {
                    children.iter().map(|c| ws.log_values[c.index()]).sum()
                }
                Node::Sum { children, weights } => {
                    let mut max = f64::NEG_INFINITY;
                    for (c, &w) in children.iter().zip(weights) {
                        if w > 0.0 {
                            max = max.max(w.ln() + ws.log_values[c.index()]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        let mut s = 0.0;
                        for (c, &w) in children.iter().zip(weights) {
                            if w > 0.0 {
                                s += (w.ln() + ws.log_values[c.index()] - max).exp();
                            }
                        }
                        max + s.ln()
                    }
                }
            };
        }

        let root = self.root().index();
        ws.log_coeff[root] = 0.0;
        for i in (0..n).rev() {
            let own = ws.log_coeff[i];
            if own == f64::NEG_INFINITY {
                continue;
            }
            match &self.nodes()[i] {
                Node::Leaf { .. } => {}
                Node::Sum { children, weights } => {
                    for (c, &w) in children.iter().zip(weights) {
                        if w > 0.0 {
                            let contrib = own + w.ln();
                            let slot = &mut ws.log_coeff[c.index()];
                            *slot = log_add_exp(*slot, contrib);
                        }
                    }
                }
                Node::Product { children } => {
                    let total: f64 = children.iter().map(|c| ws.log_values[c.index()]).sum();
                    let neg_inf = children
                        .iter()
                        .filter(|c| ws.log_values[c.index()] == f64::NEG_INFINITY)
                        .count();
                    for c in children {
                        let vc = ws.log_values[c.index()];
                        let siblings = if neg_inf == 0 {
                            total - vc
                        } else if neg_inf == 1 && vc == f64::NEG_INFINITY {
                            children
                                .iter()
                                .filter(|o| **o != *c)
                                .map(|o| ws.log_values[o.index()])
                                .sum()
                        } else {
                            f64::NEG_INFINITY
                        };
                        if siblings != f64::NEG_INFINITY {
                            let contrib = own + siblings;
                            let slot = &mut ws.log_coeff[c.index()];
                            *slot = log_add_exp(*slot, contrib);
                        }
                    }
                }
            }
        }

        let log_root = ws.log_values[root];
        for i in 0..n {
            let lf = ws.log_coeff[i] + ws.log_values[i] - log_root;
            ws.flows[i] = if lf.is_nan() || lf == f64::NEG_INFINITY {
                0.0
            } else {
                lf.exp().clamp(0.0, 1.0)
            };
        }
        ws.flows[root] = 1.0;

        for (k, &id) in layout.sums.iter().enumerate() {
            if let Node::Sum { children, weights } = self.node(id) {
                let pn = ws.log_values[id.index()];
                let base = layout.offsets[k];
                for (j, (c, &w)) in children.iter().zip(weights).enumerate() {
                    ws.edge_flows[base + j] =
                        if pn == f64::NEG_INFINITY || ws.flows[id.index()] == 0.0 || w == 0.0 {
                            0.0
                        } else {
                            ws.flows[id.index()] * w * (ws.log_values[c.index()] - pn).exp()
                        };
                }
            }
        }
        log_root
    }

    pub fn sum_param_layout(&self) -> SumParamLayout {
        let mut sums = Vec::new();
        let mut arities = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0;
        for id in self.node_ids() {
            if let Node::Sum { children, .. } = self.node(id) {
                sums.push(id);
                arities.push(children.len());
                offsets.push(total);
                total += children.len();
            }
        }
        SumParamLayout {
            sums,
            arities,
            offsets,
            total,
        }
    }

    /// Flatten current sum weights in layout order.
    pub fn sum_weights_flat(&self, layout: &SumParamLayout) -> Vec<f64> {
        let mut out = Vec::with_capacity(layout.total);
        for &id in &layout.sums {
            if let Node::Sum { weights, .. } = self.node(id) {
                out.extend_from_slice(weights);
            }
        }
        out
    }

    /// Write a flat weight vector back onto the sum nodes.
    pub fn set_sum_weights_flat(&mut self, layout: &SumParamLayout, flat: &[f64]) {
        assert_eq!(flat.len(), layout.total);
        for (k, &id) in layout.sums.iter().enumerate() {
            let block = &flat[layout.block(k)];
            self.set_sum_weights(id, block);
        }
    }

    /// One forward plus one backward pass over the arena.
    ///
    /// If p_n(x) = 0 exactly at a sum node, the flows of everything under it
    /// are 0 by convention.
    pub fn top_down_flows(&self, x: &[u8]) -> Result<FlowCache, CircuitError> {
        self.evaluate_log(x)?; // input checks
        let layout = self.sum_param_layout();
        let mut ws = FlowWorkspace::default();
        self.flows_into(x, &layout, &mut ws);
        let mut edge_flows = vec![Vec::new(); self.num_nodes()];
        for (k, &id) in layout.sums.iter().enumerate() {
            edge_flows[id.index()] = ws.edge_flows[layout.block(k)].to_vec();
        }
        Ok(FlowCache {
            log_values: ws.log_values,
            log_coeff: ws.log_coeff,
            flows: ws.flows,
            edge_flows,
        })
    }

    /// ∂p(x)/∂θ_{n,c} for every sum-weight entry, linear domain, layout order.
    pub fn grad_sum_weights(&self, x: &[u8]) -> Result<Vec<f64>, CircuitError> {
        let layout = self.sum_param_layout();
        let cache = self.top_down_flows(x)?;
        Ok(self.grad_sum_weights_cached(&layout, &cache))
    }

    /// Same as [`Circuit::grad_sum_weights`] from a precomputed cache.
    pub fn grad_sum_weights_cached(&self, layout: &SumParamLayout, cache: &FlowCache) -> Vec<f64> {
        let mut grad = vec![0.0; layout.total];
        for (k, &id) in layout.sums.iter().enumerate() {
            if let Node::Sum { children, .. } = self.node(id) {
                let base = layout.offsets[k];
                for (j, c) in children.iter().enumerate() {
                    let lg = cache.log_coeff[id.index()] + cache.log_values[c.index()];
                    grad[base + j] = if lg == f64::NEG_INFINITY { 0.0 } else { lg.exp() };
                }
            }
        }
        grad
    }

    /// ∂log p(x)/∂θ_{n,c} (the per-entry score), layout order.
    pub fn score_sum_weights_cached(&self, layout: &SumParamLayout, cache: &FlowCache) -> Vec<f64> {
        let log_root = cache.root_log_value(self);
        let mut score = vec![0.0; layout.total];
        for (k, &id) in layout.sums.iter().enumerate() {
            if let Node::Sum { children, .. } = self.node(id) {
                let base = layout.offsets[k];
                for (j, c) in children.iter().enumerate() {
                    let lg = cache.log_coeff[id.index()] + cache.log_values[c.index()] - log_root;
                    score[base + j] = if lg == f64::NEG_INFINITY || lg.is_nan() {
                        0.0
                    } else {
                        lg.exp()
                    };
                }
            }
        }
        score
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CircuitBuilder, Var};
    use super::*;

    /// Nested fixture: Sum(Product(Sum, Sum), Product(leaf, leaf)).
    /// Deep enough to distinguish D_n from the normalized flow.
    fn nested_circuit() -> Circuit {
        let mut b = CircuitBuilder::new(2);
        let a0 = b.leaf(Var(0), 0.8).unwrap();
        let a1 = b.leaf(Var(0), 0.2).unwrap();
        let s0 = b.sum(vec![a0, a1], vec![0.3, 0.7]).unwrap();
        let b0 = b.leaf(Var(1), 0.6).unwrap();
        let b1 = b.leaf(Var(1), 0.1).unwrap();
        let s1 = b.sum(vec![b0, b1], vec![0.5, 0.5]).unwrap();
        let p0 = b.product(vec![s0, s1]).unwrap();
        let c0 = b.leaf(Var(0), 0.5).unwrap();
        let c1 = b.leaf(Var(1), 0.9).unwrap();
        let p1 = b.product(vec![c0, c1]).unwrap();
        let root = b.sum(vec![p0, p1], vec![0.4, 0.6]).unwrap();
        b.build(root).unwrap()
    }

    fn finite_difference(c: &Circuit, x: &[u8], sum_idx: usize, child: usize, h: f64) -> f64 {
        let layout = c.sum_param_layout();
        let mut plus = c.clone();
        let mut minus = c.clone();
        let mut w = c.sum_weights_flat(&layout);
        let k = layout.offsets[sum_idx] + child;
        w[k] += h;
        // bypass simplex checks: write directly
        let mut flat_plus = w.clone();
        flat_plus[k] = w[k];
        set_weights_raw(&mut plus, &layout, &flat_plus);
        w[k] -= 2.0 * h;
        set_weights_raw(&mut minus, &layout, &w);
        let fp = plus.evaluate_log(x).unwrap().exp();
        let fm = minus.evaluate_log(x).unwrap().exp();
        (fp - fm) / (2.0 * h)
    }

    fn set_weights_raw(c: &mut Circuit, layout: &SumParamLayout, flat: &[f64]) {
        c.set_sum_weights_flat(layout, flat);
    }

    #[test]
    fn root_only_leaf_has_unit_flow() {
        let mut b = CircuitBuilder::new(1);
        let l = b.leaf(Var(0), 0.5).unwrap();
        let c = b.build(l).unwrap();
        let cache = c.top_down_flows(&[1]).unwrap();
        assert_eq!(cache.flows[l.index()], 1.0);
    }

    #[test]
    fn symmetric_sum_splits_flow_evenly() {
        let mut b = CircuitBuilder::new(1);
        let a = b.leaf(Var(0), 0.5).unwrap();
        let c2 = b.leaf(Var(0), 0.5).unwrap();
        let s = b.sum(vec![a, c2], vec![0.5, 0.5]).unwrap();
        let c = b.build(s).unwrap();
        let cache = c.top_down_flows(&[1]).unwrap();
        assert!((cache.flows[a.index()] - 0.5).abs() < 1e-12);
        assert!((cache.flows[c2.index()] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let c = nested_circuit();
        let layout = c.sum_param_layout();
        for x in [[0u8, 0], [0, 1], [1, 0], [1, 1]] {
            let grad = c.grad_sum_weights(&x).unwrap();
            for (k, _) in layout.sums.iter().enumerate() {
                for j in 0..layout.arities[k] {
                    let fd = finite_difference(&c, &x, k, j, 1e-6);
                    let an = grad[layout.offsets[k] + j];
                    let rel = (an - fd).abs() / fd.abs().max(1e-12);
                    assert!(rel < 1e-6, "entry ({k},{j}) at {x:?}: fd={fd}, analytic={an}");
                }
            }
        }
    }

    #[test]
    fn single_sum_gradient_is_child_probability() {
        let mut b = CircuitBuilder::new(1);
        let a = b.leaf(Var(0), 0.8).unwrap();
        let c2 = b.leaf(Var(0), 0.3).unwrap();
        let s = b.sum(vec![a, c2], vec![0.6, 0.4]).unwrap();
        let c = b.build(s).unwrap();
        let grad = c.grad_sum_weights(&[1]).unwrap();
        assert!((grad[0] - 0.8).abs() < 1e-12);
        assert!((grad[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn output_is_multilinear_in_each_weight() {
        // Second central difference vanishes to machine precision.
        let c = nested_circuit();
        let layout = c.sum_param_layout();
        let x = [1u8, 0];
        let h = 1e-3;
        for k in 0..layout.sums.len() {
            for j in 0..layout.arities[k] {
                let flat = c.sum_weights_flat(&layout);
                let eval_at = |delta: f64| {
                    let mut w = flat.clone();
                    w[layout.offsets[k] + j] += delta;
                    let mut cc = c.clone();
                    cc.set_sum_weights_flat(&layout, &w);
                    cc.evaluate_log(&x).unwrap().exp()
                };
                let second = eval_at(h) - 2.0 * eval_at(0.0) + eval_at(-h);
                assert!(second.abs() < 1e-12, "second difference {second} at ({k},{j})");
            }
        }
    }

    #[test]
    fn flow_conservation_at_sum_nodes() {
        let c = nested_circuit();
        for x in [[0u8, 0], [0, 1], [1, 0], [1, 1]] {
            let cache = c.top_down_flows(&x).unwrap();
            for id in c.node_ids() {
                if c.node(id).is_sum() {
                    let total: f64 = cache.edge_flows[id.index()].iter().sum();
                    assert!(
                        (total - cache.flows[id.index()]).abs() < 1e-12,
                        "flow not conserved at {}",
                        id.0
                    );
                }
            }
        }
    }

    #[test]
    fn zero_probability_sum_gives_zero_child_flows() {
        let mut b = CircuitBuilder::new(1);
        let a = b.leaf(Var(0), 0.5).unwrap();
        let c2 = b.leaf(Var(0), 0.5).unwrap();
        let s = b.sum(vec![a, c2], vec![0.0, 1.0]).unwrap();
        let c = b.build(s).unwrap();
        let cache = c.top_down_flows(&[1]).unwrap();
        // child a gets zero weight: no flow
        assert_eq!(cache.edge_flows[s.index()][0], 0.0);
        assert!((cache.edge_flows[s.index()][1] - 1.0).abs() < 1e-12);
    }
}
