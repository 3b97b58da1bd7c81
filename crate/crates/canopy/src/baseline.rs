//! Greedy top-down structure learner.
//!
//! The classic recursion: try to split the variable scope by pairwise
//! independence tests (G-test, connected components under the rejection
//! graph); otherwise cluster rows into two groups and put a sum on top;
//! when the data runs thin, fully factorize into smoothed leaves. This is
//! both the comparison baseline and the generator of the imitation corpus.

use crate::circuit::{Circuit, CircuitBuilder, NodeId, Scope, Var};
use crate::data::Dataset;
use crate::grammar::{arity_decompose, serialize, GrammarConfig, GrammarError, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("dataset is empty")]
    EmptyData,
    #[error("corpus circuit not expressible after decomposition: {0}")]
    Inexpressible(#[from] GrammarError),
    #[error(transparent)]
    Circuit(#[from] crate::circuit::CircuitError),
}

/// Hyperparameters of the greedy learner. The defaults are this
/// implementation's own, tuned to land near published greedy-learner
/// numbers on the standard benchmarks, not to match any other codebase.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitConfig {
    pub independence_p_threshold: f64,
    pub min_instances: usize,
    pub cluster_count: usize,
    pub laplace_alpha: f64,
    pub rng_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            independence_p_threshold: 0.001,
            min_instances: 50,
            cluster_count: 2,
            laplace_alpha: 0.1,
            rng_seed: 0,
        }
    }
}

/// G-test of independence between binary columns `i` and `j` over the given
/// rows: `G = 2 Σ O·ln(O/E)` on the 2x2 table, chi-square with one degree
/// of freedom. Degenerate (constant) columns give statistic 0 by convention.
pub fn g_test_rows(data: &Dataset, rows: &[usize], i: Var, j: Var) -> (f64, f64) {
    let n = rows.len();
    if n < 2 {
        return (0.0, 1.0); // no evidence either way
    }
    let mut counts = [[0.0f64; 2]; 2];
    for &r in rows {
        let row = data.row(r);
        counts[row[i.index()] as usize][row[j.index()] as usize] += 1.0;
    }
    let ri = [counts[0][0] + counts[0][1], counts[1][0] + counts[1][1]];
    let cj = [counts[0][0] + counts[1][0], counts[0][1] + counts[1][1]];
    if ri[0] == 0.0 || ri[1] == 0.0 || cj[0] == 0.0 || cj[1] == 0.0 {
        return (0.0, 1.0);
    }
    let total = n as f64;
    let mut g = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let observed = counts[a][b];
            if observed > 0.0 {
                let expected = ri[a] * cj[b] / total;
                g += observed * (observed / expected).ln();
            }
        }
    }
    let g = (2.0 * g).max(0.0);
    let chi = ChiSquared::new(1.0).expect("dof 1");
    let p = chi.sf(g);
    (g, p)
}

pub fn g_test(data: &Dataset, i: Var, j: Var) -> (f64, f64) {
    let rows: Vec<usize> = (0..data.len()).collect();
    g_test_rows(data, &rows, i, j)
}

/// Connected components of the dependence graph over `scope` (edges where
/// the G-test rejects independence at the threshold). A single group means
/// no split was found.
pub fn partition_variables(
    data: &Dataset,
    rows: &[usize],
    scope: Scope,
    config: &SplitConfig,
) -> Vec<Scope> {
    let vars: Vec<Var> = scope.iter().collect();
    let m = vars.len();
    debug_assert!(m >= 2);
    let mut adjacent = vec![Vec::new(); m];
    for a in 0..m {
        for b in a + 1..m {
            let (_, p) = g_test_rows(data, rows, vars[a], vars[b]);
            if p < config.independence_p_threshold {
                adjacent[a].push(b);
                adjacent[b].push(a);
            }
        }
    }
    let mut component = vec![usize::MAX; m];
    let mut groups: Vec<Scope> = Vec::new();
    for start in 0..m {
        if component[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut group = Scope::EMPTY;
        let mut stack = vec![start];
        component[start] = id;
        while let Some(v) = stack.pop() {
            group.insert(vars[v]);
            for &w in &adjacent[v] {
                if component[w] == usize::MAX {
                    component[w] = id;
                    stack.push(w);
                }
            }
        }
        groups.push(group);
    }
    groups
}

/// Hard EM over a k-mixture of product-of-Bernoulli models restricted to
/// `scope`. Deterministic under `seed`; empty clusters are re-seeded with a
/// row drawn from the largest cluster, so no cluster comes back empty.
pub fn cluster_rows(
    data: &Dataset,
    rows: &[usize],
    scope: Scope,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, BaselineError> {
    if k == 1 {
        return Ok(vec![rows.to_vec()]);
    }
    if rows.len() < 2 * k {
        return Err(BaselineError::TooFewRows {
            needed: 2 * k,
            got: rows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars: Vec<Var> = scope.iter().collect();
    let mut assignment: Vec<usize> = rows.iter().map(|_| rng.random_range(0..k)).collect();

    fn fix_empties(assignment: &mut [usize], k: usize, rng: &mut ChaCha8Rng) {
        // guarantee nonempty clusters: move a random row out of the largest
        loop {
            let mut sizes = vec![0usize; k];
            for &a in assignment.iter() {
                sizes[a] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                return;
            };
            let largest = sizes
                .iter()
                .enumerate()
                .max_by_key(|(_, s)| **s)
                .map(|(i, _)| i)
                .unwrap();
            let members: Vec<usize> = assignment
                .iter()
                .enumerate()
                .filter(|(_, a)| **a == largest)
                .map(|(i, _)| i)
                .collect();
            let pick = members[rng.random_range(0..members.len())];
            assignment[pick] = empty;
        }
    }
    fix_empties(&mut assignment, k, &mut rng);

    for _ in 0..100 {
        // M-step: smoothed per-cluster Bernoulli means over the scope
        let mut counts = vec![0.0f64; k];
        let mut ones = vec![vec![0.0f64; vars.len()]; k];
        for (pos, &r) in rows.iter().enumerate() {
            let c = assignment[pos];
            counts[c] += 1.0;
            let row = data.row(r);
            for (vi, v) in vars.iter().enumerate() {
                ones[c][vi] += row[v.index()] as f64;
            }
        }
        let means: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                (0..vars.len())
                    .map(|vi| (ones[c][vi] + alpha) / (counts[c] + 2.0 * alpha))
                    .collect()
            })
            .collect();
        // E-step: hard assignment to the best cluster
        let mut changed = false;
        for (pos, &r) in rows.iter().enumerate() {
            let row = data.row(r);
            let mut best = assignment[pos];
            let mut best_ll = f64::NEG_INFINITY;
            for (c, mean) in means.iter().enumerate() {
                let mut ll = (counts[c] / rows.len() as f64).max(1e-12).ln();
                for (vi, v) in vars.iter().enumerate() {
                    let p = mean[vi];
                    ll += if row[v.index()] == 1 { p.ln() } else { (1.0 - p).ln() };
                }
                if ll > best_ll + 1e-12 {
                    best_ll = ll;
                    best = c;
                }
            }
            if best != assignment[pos] {
                assignment[pos] = best;
                changed = true;
            }
        }
        fix_empties(&mut assignment, k, &mut rng);
        if !changed {
            break;
        }
    }

    let mut clusters = vec![Vec::new(); k];
    for (pos, &r) in rows.iter().enumerate() {
        clusters[assignment[pos]].push(r);
    }
    debug_assert!(clusters.iter().all(|c| !c.is_empty()));
    Ok(clusters)
}

/// Learn a circuit by the greedy recursion. The result always validates.
pub fn learn_structure(data: &Dataset, config: &SplitConfig) -> Result<Circuit, BaselineError> {
    if data.is_empty() {
        return Err(BaselineError::EmptyData);
    }
    let mut builder = CircuitBuilder::new(data.num_vars()).with_node_cap(usize::MAX);
    let rows: Vec<usize> = (0..data.len()).collect();
    let scope: Scope = (0..data.num_vars()).map(|v| Var(v as u16)).collect();
    let root = recurse(data, &rows, scope, config, config.rng_seed, &mut builder)?;
    Ok(builder.build(root)?)
}

fn smoothed_leaf(
    data: &Dataset,
    rows: &[usize],
    var: Var,
    alpha: f64,
    b: &mut CircuitBuilder,
) -> NodeId {
    let ones: f64 = rows.iter().map(|&r| data.row(r)[var.index()] as f64).sum();
    let p = (ones + alpha) / (rows.len() as f64 + 2.0 * alpha);
    b.leaf(var, p.clamp(crate::circuit::LEAF_P_MIN, crate::circuit::LEAF_P_MAX))
        .unwrap()
}

/// Path-dependent sub-seed so identical subproblems cluster identically
/// regardless of what happens elsewhere in the recursion.
fn child_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

fn recurse(
    data: &Dataset,
    rows: &[usize],
    scope: Scope,
    config: &SplitConfig,
    seed: u64,
    b: &mut CircuitBuilder,
) -> Result<NodeId, BaselineError> {
    if scope.len() == 1 {
        return Ok(smoothed_leaf(data, rows, scope.min_var().unwrap(), config.laplace_alpha, b));
    }

    if rows.len() >= 2 {
        let groups = partition_variables(data, rows, scope, config);
        if groups.len() >= 2 {
            let mut children = Vec::with_capacity(groups.len());
            for (i, group) in groups.iter().enumerate() {
                children.push(recurse(data, rows, *group, config, child_seed(seed, i as u64), b)?);
            }
            return Ok(b.product(children).unwrap());
        }
    }

    let k = config.cluster_count;
    if rows.len() > config.min_instances && rows.len() >= 2 * k {
        let clusters = cluster_rows(data, rows, scope, k, config.laplace_alpha, child_seed(seed, 0xC1))?;
        let total = rows.len() as f64;
        let weights: Vec<f64> = clusters
            .iter()
            .map(|c| (c.len() as f64 + config.laplace_alpha) / (total + k as f64 * config.laplace_alpha))
            .collect();
        let norm: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.into_iter().map(|w| w / norm).collect();
        let mut children = Vec::with_capacity(k);
        for (i, cluster) in clusters.iter().enumerate() {
            children.push(recurse(
                data,
                cluster,
                scope,
                config,
                child_seed(seed, 0xA0 + i as u64),
                b,
            )?);
        }
        return Ok(b.sum(children, weights).unwrap());
    }

    // data exhausted: fully factorize into smoothed leaves
    let leaves: Vec<NodeId> = scope
        .iter()
        .map(|v| smoothed_leaf(data, rows, v, config.laplace_alpha, b))
        .collect();
    Ok(b.product(leaves).unwrap())
}

/// Corpus for imitation pretraining: `n` independent greedy runs under
/// bootstrap row resampling and log-uniform jitter of the independence
/// threshold, arity-decomposed into the token vocabulary.
pub fn generate_corpus(
    data: &Dataset,
    n_circuits: usize,
    config: &SplitConfig,
    grammar: GrammarConfig,
) -> Result<Vec<TokenSequence>, BaselineError> {
    (0..n_circuits)
        .into_par_iter()
        .map(|i| {
            let seed = child_seed(config.rng_seed, 0xB00 + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let indices: Vec<usize> =
                (0..data.len()).map(|_| rng.random_range(0..data.len())).collect();
            let boot = data.gather(&indices, format!("{}#boot{}", data.name, i));
            let jitter = rng.random_range(1e-4f64.ln()..=1e-2f64.ln()).exp();
            let jittered = SplitConfig {
                independence_p_threshold: jitter,
                rng_seed: child_seed(seed, 0xD1),
                ..config.clone()
            };
            let circuit = learn_structure(&boot, &jittered)?;
            let narrow = arity_decompose(&circuit, 3, grammar.max_factor_arity);
            Ok(serialize(&narrow, grammar)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::Node;
    use crate::data::{sample_from_circuit, synth};
    use crate::grammar::parse;

    fn coin_data(n: usize, seed: u64, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<u8> = (0..n * d).map(|_| rng.random_range(0..2u8)).collect();
        Dataset::new("coins", d, rows)
    }

    #[test]
    fn duplicated_columns_reject_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<u8> = (0..100)
            .flat_map(|_| {
                let b = rng.random_range(0..2u8);
                [b, b]
            })
            .collect();
        let data = Dataset::new("dup", 2, rows);
        let (g, p) = g_test(&data, Var(0), Var(1));
        assert!(g > 50.0, "statistic {g} too small for duplicated columns");
        assert!(p < 1e-10);
    }

    #[test]
    fn constant_column_scores_zero() {
        let data = Dataset::new("const", 2, vec![1, 0, 1, 1, 1, 0, 1, 1]);
        let (g, p) = g_test(&data, Var(0), Var(1));
        assert_eq!(g, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn g_test_symmetric_and_row_order_invariant() {
        let data = coin_data(500, 9, 3);
        let (gij, _) = g_test(&data, Var(0), Var(2));
        let (gji, _) = g_test(&data, Var(2), Var(0));
        assert!((gij - gji).abs() < 1e-12);
        let mut shuffled: Vec<usize> = (0..data.len()).collect();
        shuffled.reverse();
        let (gshuf, _) = g_test_rows(&data, &shuffled, Var(0), Var(2));
        assert!((gij - gshuf).abs() < 1e-12);
    }

    /// Monte Carlo calibration: at threshold 0.001 on independent coins the
    /// rejection rate is about one in a thousand.
    #[test]
    fn g_test_false_positive_rate_is_calibrated() {
        let mut rejections = 0usize;
        let trials = 1000;
        for seed in 0..trials {
            let data = coin_data(10_000, 1000 + seed, 2);
            let (_, p) = g_test(&data, Var(0), Var(1));
            if p < 0.001 {
                rejections += 1;
            }
        }
        // Binomial(1000, 0.001): P(X > 6) < 1e-4
        assert!(rejections <= 6, "rejected {rejections} of {trials}");
    }

    #[test]
    fn partition_recovers_two_blocks() {
        let truth = synth::two_block_circuit(&[0, 1, 2], &[3, 4], 0.05);
        let data = sample_from_circuit(&truth, 2000, 5);
        let config = SplitConfig::default();
        let rows: Vec<usize> = (0..data.len()).collect();
        let scope = Scope::full(5);
        let mut groups = partition_variables(&data, &rows, scope, &config);
        groups.sort_by_key(|g| g.min_var().unwrap().0);
        let expected_a: Scope = [Var(0), Var(1), Var(2)].into_iter().collect();
        let expected_b: Scope = [Var(3), Var(4)].into_iter().collect();
        assert_eq!(groups, vec![expected_a, expected_b]);
    }

    #[test]
    fn partition_of_independent_data_is_all_singletons() {
        let data = coin_data(5000, 2, 4);
        let config = SplitConfig::default();
        let rows: Vec<usize> = (0..data.len()).collect();
        let groups = partition_variables(&data, &rows, Scope::full(4), &config);
        assert_eq!(groups.len(), 4);
    }

    #[test]
    fn partition_of_correlated_data_is_one_group() {
        let truth = synth::two_block_circuit(&[0, 1, 2, 3], &[4], 0.02);
        let data = sample_from_circuit(&truth, 3000, 6);
        let config = SplitConfig::default();
        let rows: Vec<usize> = (0..data.len()).collect();
        let scope: Scope = [Var(0), Var(1), Var(2), Var(3)].into_iter().collect();
        let groups = partition_variables(&data, &rows, scope, &config);
        assert_eq!(groups.len(), 1);
    }

    #[test]
    fn clustering_separates_two_modes() {
        let truth = synth::two_block_circuit(&[0, 1, 2, 3, 4, 5], &[6], 0.02);
        let data = sample_from_circuit(&truth, 1000, 8);
        let scope: Scope = (0..6).map(Var).collect();
        let rows: Vec<usize> = (0..data.len()).collect();
        let clusters = cluster_rows(&data, &rows, scope, 2, 0.1, 3).unwrap();
        assert_eq!(clusters.len(), 2);
        // purity against the "mostly ones" / "mostly zeros" ground truth
        let mode = |r: usize| {
            let row = data.row(r);
            let ones: usize = (0..6).map(|v| row[v] as usize).sum();
            ones >= 3
        };
        let mut agree = 0usize;
        for cluster in &clusters {
            let majority = cluster.iter().filter(|&&r| mode(r)).count() * 2 >= cluster.len();
            agree += cluster.iter().filter(|&&r| mode(r) == majority).count();
        }
        let purity = agree as f64 / data.len() as f64;
        assert!(purity >= 0.95, "purity {purity}");
    }

    #[test]
    fn clustering_identical_rows_keeps_clusters_nonempty() {
        let data = Dataset::new("same", 2, vec![1, 0].repeat(40));
        let rows: Vec<usize> = (0..data.len()).collect();
        let clusters = cluster_rows(&data, &rows, Scope::full(2), 2, 0.1, 7).unwrap();
        assert_eq!(clusters.len(), 2);
        assert!(clusters.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn k_one_is_identity_partition() {
        let data = coin_data(10, 3, 2);
        let rows: Vec<usize> = (0..data.len()).collect();
        let clusters = cluster_rows(&data, &rows, Scope::full(2), 1, 0.1, 7).unwrap();
        assert_eq!(clusters, vec![rows]);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let data = coin_data(3, 3, 2);
        let rows: Vec<usize> = (0..data.len()).collect();
        assert!(matches!(
            cluster_rows(&data, &rows, Scope::full(2), 2, 0.1, 7),
            Err(BaselineError::TooFewRows { .. })
        ));
    }

    #[test]
    fn independent_data_learns_a_single_product_of_leaves() {
        let data = coin_data(4000, 4, 5);
        let config = SplitConfig::default();
        let c = learn_structure(&data, &config).unwrap();
        assert!(c.validate().is_valid());
        match c.node(c.root()) {
            Node::Product { children } => {
                assert_eq!(children.len(), 5);
                assert!(children.iter().all(|ch| matches!(c.node(*ch), Node::Leaf { .. })));
            }
            other => panic!("expected product root, got {other:?}"),
        }
    }

    #[test]
    fn two_block_structure_is_recovered() {
        let truth = synth::two_block_circuit(&[0, 1, 2], &[3, 4], 0.05);
        let data = sample_from_circuit(&truth, 3000, 12);
        let config = SplitConfig::default();
        let c = learn_structure(&data, &config).unwrap();
        assert!(c.validate().is_valid());
        match c.node(c.root()) {
            Node::Product { children } => {
                assert_eq!(children.len(), 2);
                let mut scopes: Vec<Scope> = children.iter().map(|ch| c.scope(*ch)).collect();
                scopes.sort_by_key(|s| s.min_var().unwrap().0);
                assert_eq!(scopes[0], [Var(0), Var(1), Var(2)].into_iter().collect::<Scope>());
                assert_eq!(scopes[1], [Var(3), Var(4)].into_iter().collect::<Scope>());
            }
            other => panic!("expected product root, got {other:?}"),
        }
    }

    #[test]
    fn doubling_min_instances_never_grows_the_circuit() {
        let truth = synth::two_block_circuit(&[0, 1, 2, 3], &[4, 5], 0.1);
        let data = sample_from_circuit(&truth, 1200, 21);
        for min in [25usize, 50, 100, 200] {
            let small = learn_structure(
                &data,
                &SplitConfig {
                    min_instances: min,
                    ..Default::default()
                },
            )
            .unwrap();
            let large = learn_structure(
                &data,
                &SplitConfig {
                    min_instances: 2 * min,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(
                large.num_nodes() <= small.num_nodes(),
                "min_instances {min}: {} -> {}",
                small.num_nodes(),
                large.num_nodes()
            );
        }
    }

    #[test]
    fn corpus_is_deterministic_and_roundtrips() {
        let truth = synth::two_block_circuit(&[0, 1, 2], &[3, 4, 5], 0.08);
        let data = sample_from_circuit(&truth, 600, 33);
        let grammar = GrammarConfig::new(6).with_depth_cap(16);
        let config = SplitConfig {
            min_instances: 60,
            ..Default::default()
        };
        let a = generate_corpus(&data, 4, &config, grammar).unwrap();
        let b = generate_corpus(&data, 4, &config, grammar).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
        }
        for seq in &a {
            let circuit = parse(&seq.tokens, grammar).unwrap();
            assert!(circuit.validate().is_valid());
            let re = serialize(&circuit, grammar).unwrap();
            assert_eq!(re.tokens, seq.tokens);
        }
    }
}
