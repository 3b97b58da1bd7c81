//! Dataset loading, ancestral sampling, and synthetic fixtures.
//!
//! Datasets are dense binary matrices in the usual benchmark text layout:
//! comma-separated 0/1 cells, one row per line, extensions
//! `.train.data` / `.valid.data` / `.test.data`.

use crate::circuit::{Circuit, CircuitBuilder, LeafParams, Node, NodeId, Scope, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: file is empty")]
    Empty { path: String },
    #[error("{path}: line {line}: expected {expected} columns, found {found}")]
    Ragged {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}, column {column}: `{cell}` is not 0 or 1")]
    NonBinary {
        path: String,
        line: usize,
        column: usize,
        cell: String,
    },
}

/// N x d binary matrix with a provenance tag.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    num_vars: usize,
    rows: Vec<u8>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_vars: usize, rows: Vec<u8>) -> Dataset {
        assert!(num_vars > 0);
        assert_eq!(rows.len() % num_vars, 0);
        Dataset {
            name: name.into(),
            num_vars,
            rows,
        }
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<u8>]) -> Dataset {
        let num_vars = rows.first().map(|r| r.len()).unwrap_or(0);
        let flat = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Dataset::new(name, num_vars.max(1), flat)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.num_vars
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.rows[i * self.num_vars..(i + 1) * self.num_vars]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[u8]> + Clone {
        self.rows.chunks_exact(self.num_vars)
    }

    /// Rows selected by index, with repetition allowed (bootstrap views).
    pub fn gather(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let mut rows = Vec::with_capacity(indices.len() * self.num_vars);
        for &i in indices {
            rows.extend_from_slice(self.row(i));
        }
        Dataset::new(name, self.num_vars, rows)
    }

    /// Empirical P(x_v = 1) with Laplace smoothing `alpha`.
    pub fn smoothed_marginal(&self, var: Var, alpha: f64) -> f64 {
        let ones: f64 = self.iter_rows().map(|r| r[var.index()] as f64).sum();
        (ones + alpha) / (self.len() as f64 + 2.0 * alpha)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 2);
        for row in self.iter_rows() {
            for (i, b) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push(if *b == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|source| DataError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }
}

/// Parse benchmark text (comma-separated 0/1 rows). The variable count is
/// inferred from the first row; ragged rows and non-binary cells are
/// rejected with their position.
pub fn parse_debd(text: &str, name: &str) -> Result<Dataset, DataError> {
    let mut rows: Vec<u8> = Vec::new();
    let mut num_vars = 0usize;
    let mut n = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut found = 0usize;
        for (col, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            let bit = match cell {
                "0" => 0u8,
                "1" => 1u8,
                _ => {
                    return Err(DataError::NonBinary {
                        path: name.to_string(),
                        line: lineno + 1,
                        column: col + 1,
                        cell: cell.to_string(),
                    })
                }
            };
            rows.push(bit);
            found += 1;
        }
        if n == 0 {
            num_vars = found;
        } else if found != num_vars {
            return Err(DataError::Ragged {
                path: name.to_string(),
                line: lineno + 1,
                expected: num_vars,
                found,
            });
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Empty {
            path: name.to_string(),
        });
    }
    Ok(Dataset::new(name, num_vars, rows))
}

pub fn load_debd(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_debd(&text, &path.display().to_string())
}

/// Top-down ancestral sampling: sums pick one child by weight, products
/// recurse into all children, leaves draw a Bernoulli bit.
pub fn sample_from_circuit(circuit: &Circuit, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = circuit.num_vars();
    let mut rows = Vec::with_capacity(n * d);
    let mut stack: Vec<NodeId> = Vec::new();
    for _ in 0..n {
        let mut row = vec![0u8; d];
        stack.clear();
        stack.push(circuit.root());
        while let Some(id) = stack.pop() {
            match circuit.node(id) {
                Node::Leaf { var, params } => {
                    let p = params.mean_one();
                    row[var.index()] = u8::from(rng.random::<f64>() < p);
                }
                Node::Product { children } => stack.extend_from_slice(children),
                Node::Sum { children, weights } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = *children.last().unwrap();
                    for (c, w) in children.iter().zip(weights) {
                        acc += w;
                        if u < acc {
                            chosen = *c;
                            break;
                        }
                    }
                    stack.push(chosen);
                }
            }
        }
        rows.extend_from_slice(&row);
    }
    Dataset::new(format!("sampled-{}", circuit.num_vars()), d, rows)
}

/// Synthetic fixtures with known ground truth.
pub mod synth {
    use super::*;

    /// Knobs for random tree-circuit generation.
    #[derive(Debug, Clone)]
    pub struct RandomCircuitConfig {
        pub max_depth: usize,
        /// Chance of expanding a multi-variable scope as a sum.
        pub sum_prob: f64,
        pub max_sum_arity: usize,
        pub max_product_arity: usize,
        /// Allow mixtures over a single variable (valid circuits the token
        /// grammar cannot express).
        pub allow_singleton_sums: bool,
    }

    impl Default for RandomCircuitConfig {
        fn default() -> Self {
            RandomCircuitConfig {
                max_depth: 6,
                sum_prob: 0.5,
                max_sum_arity: 3,
                max_product_arity: 4,
                allow_singleton_sums: false,
            }
        }
    }

    /// A random valid tree circuit over `d` variables.
    pub fn random_circuit(d: usize, cfg: &RandomCircuitConfig, rng: &mut ChaCha8Rng) -> Circuit {
        let mut builder = CircuitBuilder::new(d).with_node_cap(usize::MAX);
        let full: Scope = (0..d).map(|v| Var(v as u16)).collect();
        let root = expand(&mut builder, full, 0, cfg, rng);
        builder.build(root).unwrap()
    }

    fn random_leaf_p(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(0.05..0.95)
    }

    fn random_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    fn expand(
        b: &mut CircuitBuilder,
        scope: Scope,
        depth: usize,
        cfg: &RandomCircuitConfig,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let vars: Vec<Var> = scope.iter().collect();
        if vars.len() == 1 {
            let var = vars[0];
            if cfg.allow_singleton_sums && depth < cfg.max_depth && rng.random::<f64>() < 0.2 {
                let a = b.leaf(var, random_leaf_p(rng)).unwrap();
                let c = b.leaf(var, random_leaf_p(rng)).unwrap();
                let w = random_weights(2, rng);
                return b.sum(vec![a, c], w).unwrap();
            }
            return b.leaf(var, random_leaf_p(rng)).unwrap();
        }
        if depth >= cfg.max_depth {
            // out of budget: fully factorize
            let leaves: Vec<NodeId> = vars
                .iter()
                .map(|v| b.leaf(*v, random_leaf_p(rng)).unwrap())
                .collect();
            return b.product(leaves).unwrap();
        }
        if rng.random::<f64>() < cfg.sum_prob {
            let arity = rng.random_range(2..=cfg.max_sum_arity.max(2));
            let children: Vec<NodeId> = (0..arity)
                .map(|_| expand(b, scope, depth + 1, cfg, rng))
                .collect();
            let weights = random_weights(arity, rng);
            b.sum(children, weights).unwrap()
        } else {
            let max_k = cfg.max_product_arity.min(vars.len()).max(2);
            let k = rng.random_range(2..=max_k);
            // random partition of the scope into k nonempty parts
            let mut shuffled = vars.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            let mut parts: Vec<Scope> = vec![Scope::EMPTY; k];
            for (i, v) in shuffled.iter().enumerate() {
                let slot = if i < k { i } else { rng.random_range(0..k) };
                parts[slot].insert(*v);
            }
            let children: Vec<NodeId> = parts
                .into_iter()
                .map(|part| expand(b, part, depth + 1, cfg, rng))
                .collect();
            b.product(children).unwrap()
        }
    }

    /// Replace every leaf with a Dirichlet leaf whose predictive mean keeps
    /// the current probability and whose total concentration is `strength`.
    pub fn with_dirichlet_leaves(circuit: &Circuit, strength: f64) -> Circuit {
        let mut out = circuit.clone();
        for id in circuit.node_ids() {
            if let Node::Leaf { params, .. } = circuit.node(id) {
                let p = params.mean_one();
                out.set_leaf_params(
                    id,
                    LeafParams::Dirichlet {
                        alpha0: (1.0 - p) * strength,
                        alpha1: p * strength,
                    },
                );
            }
        }
        out
    }

    /// Ground-truth circuit with two independent blocks of strongly
    /// correlated variables; block structure is the expected output of
    /// variable partitioning.
    pub fn two_block_circuit(block_a: &[u16], block_b: &[u16], noise: f64) -> Circuit {
        let d = block_a.len() + block_b.len();
        let mut b = CircuitBuilder::new(d);
        let block = |b: &mut CircuitBuilder, vars: &[u16]| {
            // mixture of "all on" and "all off" modes
            let on: Vec<NodeId> = vars
                .iter()
                .map(|v| b.leaf(Var(*v), 1.0 - noise).unwrap())
                .collect();
            let off: Vec<NodeId> = vars
                .iter()
                .map(|v| b.leaf(Var(*v), noise).unwrap())
                .collect();
            let p_on = if on.len() >= 2 {
                b.product(on).unwrap()
            } else {
                on[0]
            };
            let p_off = if off.len() >= 2 {
                b.product(off).unwrap()
            } else {
                off[0]
            };
            b.sum(vec![p_on, p_off], vec![0.5, 0.5]).unwrap()
        };
        let sa = block(&mut b, block_a);
        let sb = block(&mut b, block_b);
        let root = b.product(vec![sa, sb]).unwrap();
        b.build(root).unwrap()
    }
}
