//! Bottom-up evaluation in log space.

use super::{Circuit, CircuitError, LeafParams, Node};
use crate::numeric::log_sum_exp;

impl Circuit {
    fn check_input(&self, x: &[u8]) -> Result<(), CircuitError> {
        if x.len() != self.num_vars() {
            return Err(CircuitError::DimensionMismatch {
                expected: self.num_vars(),
                got: x.len(),
            });
        }
        for (i, &b) in x.iter().enumerate() {
            if b > 1 {
                return Err(CircuitError::NonBinaryInput(i, b));
            }
        }
        Ok(())
    }

    /// Per-node log values for a fully observed input, in arena order.
    pub(crate) fn log_values(&self, x: &[u8]) -> Vec<f64> {
        let mut values = vec![0.0f64; self.num_nodes()];
        for (i, node) in self.nodes().iter().enumerate() {
            values[i] = match node {
                Node::Leaf { var, params } => params.log_prob(x[var.index()]),
                Node::Product { children } => {
                    children.iter().map(|c| values[c.index()]).sum()
                }
                Node::Sum { children, weights } => {
                    let terms: Vec<f64> = children
                        .iter()
                        .zip(weights)
                        .map(|(c, &w)| {
                            if w == 0.0 {
                                f64::NEG_INFINITY
                            } else {
                                w.ln() + values[c.index()]
                            }
                        })
                        .collect();
                    log_sum_exp(&terms)
                }
            };
        }
        values
    }

    /// log p(x) for a fully observed binary input.
    pub fn evaluate_log(&self, x: &[u8]) -> Result<f64, CircuitError> {
        self.check_input(x)?;
        Ok(self.log_values(x)[self.root().index()])
    }

    /// log of the marginal probability of a partial assignment. Leaves of
    /// unassigned variables contribute value 1.
    pub fn evaluate_marginal(&self, evidence: &[Option<u8>]) -> Result<f64, CircuitError> {
        if evidence.len() != self.num_vars() {
            return Err(CircuitError::DimensionMismatch {
                expected: self.num_vars(),
                got: evidence.len(),
            });
        }
        for (i, e) in evidence.iter().enumerate() {
            if let Some(b) = e {
                if *b > 1 {
                    return Err(CircuitError::NonBinaryInput(i, *b));
                }
            }
        }
        let mut values = vec![0.0f64; self.num_nodes()];
        for (i, node) in self.nodes().iter().enumerate() {
            values[i] = match node {
                Node::Leaf { var, params } => match evidence[var.index()] {
                    Some(bit) => params.log_prob(bit),
                    None => 0.0,
                },
                Node::Product { children } => {
                    children.iter().map(|c| values[c.index()]).sum()
                }
                Node::Sum { children, weights } => {
                    let terms: Vec<f64> = children
                        .iter()
                        .zip(weights)
                        .map(|(c, &w)| {
                            if w == 0.0 {
                                f64::NEG_INFINITY
                            } else {
                                w.ln() + values[c.index()]
                            }
                        })
                        .collect();
                    log_sum_exp(&terms)
                }
            };
        }
        Ok(values[self.root().index()])
    }

    /// Mean of `evaluate_log` over dataset rows.
    pub fn avg_loglik<'a, I>(&self, rows: I) -> Result<f64, CircuitError>
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        let mut total = 0.0;
        let mut n = 0usize;
        for row in rows {
            total += self.evaluate_log(row)?;
            n += 1;
        }
        if n == 0 {
            return Err(CircuitError::EmptyDataset);
        }
        Ok(total / n as f64)
    }

    /// Convenience: a circuit where every leaf is Bernoulli(0.5) assigns
    /// every point mass 2^-d. Used by tests as a fixed point.
    pub fn is_uniform_leaf(&self) -> bool {
        self.nodes().iter().all(|n| match n {
            Node::Leaf { params, .. } => matches!(params, LeafParams::Bernoulli { p } if *p == 0.5),
            _ => true,
        })
    }
}

/// Enumerate all 2^d binary vectors for small d (oracle helper).
pub fn all_inputs(d: usize) -> impl Iterator<Item = Vec<u8>> {
    assert!(d <= 24, "exhaustive enumeration only for small d");
    (0u32..1 << d).map(move |bits| (0..d).map(|i| ((bits >> i) & 1) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{CircuitBuilder, Var};
    use super::*;

    #[test]
    fn leaf_log_prob() {
        let mut b = CircuitBuilder::new(1);
        let l = b.leaf(Var(0), 0.5).unwrap();
        let c = b.build(l).unwrap();
        assert!((c.evaluate_log(&[1]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn product_rule() {
        let mut b = CircuitBuilder::new(2);
        let l0 = b.leaf(Var(0), 0.3).unwrap();
        let l1 = b.leaf(Var(1), 0.7).unwrap();
        let p = b.product(vec![l0, l1]).unwrap();
        let c = b.build(p).unwrap();
        assert!((c.evaluate_log(&[1, 1]).unwrap() - 0.21f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut b = CircuitBuilder::new(2);
        let l0 = b.leaf(Var(0), 0.3).unwrap();
        let l1 = b.leaf(Var(1), 0.7).unwrap();
        let p = b.product(vec![l0, l1]).unwrap();
        let c = b.build(p).unwrap();
        assert!(matches!(
            c.evaluate_log(&[1]),
            Err(CircuitError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            c.evaluate_log(&[1, 2]),
            Err(CircuitError::NonBinaryInput(1, 2))
        ));
    }

    #[test]
    fn marginal_with_nothing_assigned_is_one() {
        let mut b = CircuitBuilder::new(2);
        let l0 = b.leaf(Var(0), 0.3).unwrap();
        let l1 = b.leaf(Var(1), 0.7).unwrap();
        let p = b.product(vec![l0, l1]).unwrap();
        let s0 = b.leaf(Var(0), 0.9).unwrap();
        let s1 = b.leaf(Var(1), 0.1).unwrap();
        let q = b.product(vec![s0, s1]).unwrap();
        let root = b.sum(vec![p, q], vec![0.4, 0.6]).unwrap();
        let c = b.build(root).unwrap();
        assert!(c.evaluate_marginal(&[None, None]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn full_evidence_marginal_equals_evaluate_log() {
        let mut b = CircuitBuilder::new(2);
        let l0 = b.leaf(Var(0), 0.3).unwrap();
        let l1 = b.leaf(Var(1), 0.7).unwrap();
        let p = b.product(vec![l0, l1]).unwrap();
        let c = b.build(p).unwrap();
        let full = c.evaluate_marginal(&[Some(1), Some(0)]).unwrap();
        let point = c.evaluate_log(&[1, 0]).unwrap();
        assert!((full - point).abs() < 1e-14);
    }

    #[test]
    fn uniform_circuit_loglik() {
        let d = 16;
        let mut b = CircuitBuilder::new(d);
        let leaves: Vec<_> = (0..d).map(|v| b.leaf(Var(v as u16), 0.5).unwrap()).collect();
        let p = b.product(leaves).unwrap();
        let c = b.build(p).unwrap();
        let rows: Vec<Vec<u8>> = vec![vec![0; d], vec![1; d], {
            let mut r = vec![0; d];
            r[3] = 1;
            r
        }];
        let ll = c
            .avg_loglik(rows.iter().map(|r| r.as_slice()))
            .unwrap();
        let expected = -(d as f64) * 2.0f64.ln();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut b = CircuitBuilder::new(1);
        let l = b.leaf(Var(0), 0.5).unwrap();
        let c = b.build(l).unwrap();
        assert!(matches!(
            c.avg_loglik(std::iter::empty()),
            Err(CircuitError::EmptyDataset)
        ));
    }
}
