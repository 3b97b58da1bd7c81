//! Bidirectional conversion between token sequences and circuits, plus the
//! arity decomposition that bridges arbitrary-arity circuits to the
//! Sum2/Sum3 vocabulary.

use super::sequence::{replay_complete, TokenSequence};
use super::{GrammarConfig, GrammarError, Token};
use crate::circuit::{Circuit, CircuitBuilder, Node, NodeId};

/// Build the circuit a complete sequence denotes. Sum weights are uniform
/// and leaves start at Bernoulli(0.5); fitting assigns real parameters.
pub fn parse(tokens: &[Token], cfg: GrammarConfig) -> Result<Circuit, GrammarError> {
    let (seq, _) = replay_complete(tokens, cfg)?;
    let n = seq.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, p) in seq.parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    let mut builder = CircuitBuilder::new(cfg.num_vars).with_node_cap(cfg.node_cap.max(n));
    let mut ids: Vec<Option<NodeId>> = vec![None; n];
    // children-before-parents over the token tree
    enum Step {
        Enter(usize),
        Emit(usize),
    }
    let mut stack = vec![Step::Enter(0)];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(i) => {
                stack.push(Step::Emit(i));
                for &c in children[i].iter().rev() {
                    stack.push(Step::Enter(c));
                }
            }
            Step::Emit(i) => {
                let id = match seq.tokens[i] {
                    Token::Leaf(v) => builder.leaf(v, 0.5)?,
                    Token::Sum2 | Token::Sum3 => {
                        let kids: Vec<NodeId> =
                            children[i].iter().map(|c| ids[*c].unwrap()).collect();
                        let w = vec![1.0 / kids.len() as f64; kids.len()];
                        builder.sum(kids, w)?
                    }
                    Token::Factorize(_) => {
                        let kids: Vec<NodeId> =
                            children[i].iter().map(|c| ids[*c].unwrap()).collect();
                        builder.product(kids)?
                    }
                    Token::Bos | Token::Eos => unreachable!("sentinels never parse"),
                };
                ids[i] = Some(id);
            }
        }
    }
    Ok(builder.build(ids[0].unwrap())?)
}

/// Pre-order token encoding of a circuit. Fails on circuits the grammar
/// cannot express (sum arity outside {2,3}, products wider than the
/// factorize vocabulary, single-variable sums, cap overruns); the error
/// names the offending node.
pub fn serialize(circuit: &Circuit, cfg: GrammarConfig) -> Result<TokenSequence, GrammarError> {
    // pre-order emission with the node each token came from
    let mut order: Vec<NodeId> = Vec::with_capacity(circuit.num_nodes());
    let mut tokens: Vec<Token> = Vec::with_capacity(circuit.num_nodes());
    let mut stack = vec![circuit.root()];
    while let Some(id) = stack.pop() {
        let token = match circuit.node(id) {
            Node::Leaf { var, .. } => Token::Leaf(*var),
            Node::Sum { children, .. } => match children.len() {
                2 => Token::Sum2,
                3 => Token::Sum3,
                a => {
                    return Err(GrammarError::Inexpressible {
                        node: id,
                        why: format!("sum arity {a} outside {{2, 3}}"),
                    })
                }
            },
            Node::Product { children } => {
                let k = children.len();
                if k > cfg.max_factor_arity {
                    return Err(GrammarError::Inexpressible {
                        node: id,
                        why: format!("product arity {k} exceeds factorize cap {}", cfg.max_factor_arity),
                    });
                }
                Token::Factorize(k as u8)
            }
        };
        order.push(id);
        tokens.push(token);
        for &c in circuit.node(id).children().iter().rev() {
            stack.push(c);
        }
    }
    // replay to validate against the grammar and collect tree bookkeeping
    match replay_complete(&tokens, cfg) {
        Ok((seq, _)) => Ok(seq),
        Err(GrammarError::InvalidToken { position, reason, .. }) => {
            Err(GrammarError::Inexpressible {
                node: order[position],
                why: reason.to_string(),
            })
        }
        Err(other) => Err(other),
    }
}

/// Rewrite a valid circuit so every sum has arity at most `max_sum_arity`
/// (weight products preserved) and every product at most
/// `max_product_arity`, via balanced binary/ternary cascades. The output
/// density is identical up to float rounding.
pub fn arity_decompose(
    circuit: &Circuit,
    max_sum_arity: usize,
    max_product_arity: usize,
) -> Circuit {
    assert!(max_sum_arity >= 2 && max_product_arity >= 2);
    let mut builder = CircuitBuilder::new(circuit.num_vars()).with_node_cap(usize::MAX);
    let root = rebuild(
        circuit,
        circuit.root(),
        &mut builder,
        max_sum_arity,
        max_product_arity,
    );
    builder.build(root).expect("rebuild preserves structure")
}

fn rebuild(
    c: &Circuit,
    id: NodeId,
    b: &mut CircuitBuilder,
    max_sum: usize,
    max_prod: usize,
) -> NodeId {
    match c.node(id) {
        Node::Leaf { var, params } => b.leaf_with(*var, *params).unwrap(),
        Node::Sum { children, weights } => {
            let rebuilt: Vec<(NodeId, f64)> = children
                .iter()
                .zip(weights)
                .map(|(ch, w)| (rebuild(c, *ch, b, max_sum, max_prod), *w))
                .collect();
            cascade_sum(&rebuilt, b, max_sum)
        }
        Node::Product { children } => {
            let rebuilt: Vec<NodeId> = children
                .iter()
                .map(|ch| rebuild(c, *ch, b, max_sum, max_prod))
                .collect();
            cascade_product(&rebuilt, b, max_prod)
        }
    }
}

/// Group children pairwise (halving) until the arity fits; outer weights
/// are group totals, inner weights renormalize within the group.
fn cascade_sum(entries: &[(NodeId, f64)], b: &mut CircuitBuilder, max_arity: usize) -> NodeId {
    if entries.len() == 1 {
        return entries[0].0;
    }
    if entries.len() <= max_arity {
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        let (kids, weights): (Vec<NodeId>, Vec<f64>) = entries
            .iter()
            .map(|(n, w)| (*n, if total > 0.0 { w / total } else { 1.0 / entries.len() as f64 }))
            .unzip();
        return b.sum(kids, weights).unwrap();
    }
    let mid = entries.len().div_ceil(2);
    let left = cascade_sum(&entries[..mid], b, max_arity);
    let right = cascade_sum(&entries[mid..], b, max_arity);
    let lw: f64 = entries[..mid].iter().map(|(_, w)| w).sum();
    let rw: f64 = entries[mid..].iter().map(|(_, w)| w).sum();
    let total = lw + rw;
    let (lw, rw) = if total > 0.0 {
        (lw / total, rw / total)
    } else {
        (0.5, 0.5)
    };
    b.sum(vec![left, right], vec![lw, rw]).unwrap()
}

fn cascade_product(kids: &[NodeId], b: &mut CircuitBuilder, max_arity: usize) -> NodeId {
    if kids.len() == 1 {
        return kids[0];
    }
    if kids.len() <= max_arity {
        return b.product(kids.to_vec()).unwrap();
    }
    let mid = kids.len().div_ceil(2);
    let left = cascade_product(&kids[..mid], b, max_arity);
    let right = cascade_product(&kids[mid..], b, max_arity);
    b.product(vec![left, right]).unwrap()
}

/// Structure key used by enumeration tests: product children sorted by
/// least scope variable, sum children in stored order, weights ignored.
pub fn canonical_key(circuit: &Circuit) -> String {
    fn go(c: &Circuit, id: NodeId, out: &mut String) {
        match c.node(id) {
            Node::Leaf { var, .. } => out.push_str(&format!("L{}", var.0)),
            Node::Sum { children, .. } => {
                out.push_str("S(");
                for (i, ch) in children.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    go(c, *ch, out);
                }
                out.push(')');
            }
            Node::Product { children } => {
                let mut sorted: Vec<NodeId> = children.clone();
                sorted.sort_by_key(|ch| c.scope(*ch).min_var().map(|v| v.0).unwrap_or(u16::MAX));
                out.push_str("P(");
                for (i, ch) in sorted.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    go(c, *ch, out);
                }
                out.push(')');
            }
        }
    }
    let mut s = String::new();
    go(circuit, circuit.root(), &mut s);
    s
}

#[cfg(test)]
mod tests {
    use super::super::{tokens_from_text, Vocab};
    use super::*;
    use crate::circuit::eval::all_inputs;
    use crate::circuit::{CircuitBuilder, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_single_leaf() {
        let cfg = GrammarConfig::new(1);
        let c = parse(&[Token::Leaf(Var(0))], cfg).unwrap();
        assert_eq!(c.num_nodes(), 1);
        assert!(c.validate().is_valid());
    }

    #[test]
    fn parse_product_of_leaves() {
        let cfg = GrammarConfig::new(2);
        let c = parse(
            &[Token::Factorize(2), Token::Leaf(Var(0)), Token::Leaf(Var(1))],
            cfg,
        )
        .unwrap();
        assert_eq!(c.num_nodes(), 3);
        assert!(c.validate().is_valid());
        assert!((c.evaluate_log(&[1, 1]).unwrap() - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn parse_rejects_incomplete() {
        let cfg = GrammarConfig::new(2);
        let err = parse(&[Token::Factorize(2), Token::Leaf(Var(0))], cfg).unwrap_err();
        assert!(matches!(err, GrammarError::IncompleteSequence { .. }));
    }

    #[test]
    fn parse_reports_bad_position() {
        let cfg = GrammarConfig::new(2);
        let err = parse(
            &[Token::Factorize(2), Token::Leaf(Var(0)), Token::Leaf(Var(0))],
            cfg,
        )
        .unwrap_err();
        match err {
            GrammarError::InvalidToken { position, .. } => assert_eq!(position, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn serialize_single_leaf() {
        let mut b = CircuitBuilder::new(1);
        let l = b.leaf(Var(0), 0.5).unwrap();
        let c = b.build(l).unwrap();
        let seq = serialize(&c, GrammarConfig::new(1)).unwrap();
        assert_eq!(seq.tokens, vec![Token::Leaf(Var(0))]);
    }

    #[test]
    fn serialize_sum_records_decisions() {
        let cfg = GrammarConfig::new(2);
        let toks = tokens_from_text("S2 F2 L0 L1 F2 L1 L0").unwrap();
        let c = parse(&toks, cfg).unwrap();
        let seq = serialize(&c, cfg).unwrap();
        assert_eq!(seq.tokens, toks);
        assert_eq!(seq.decision_indices, vec![0]);
    }

    #[test]
    fn serialize_rejects_wide_sum_with_node() {
        let mut b = CircuitBuilder::new(1);
        let kids: Vec<_> = (0..5).map(|i| b.leaf(Var(0), 0.1 + 0.1 * i as f64).unwrap()).collect();
        let s = b.sum(kids, vec![0.2; 5]).unwrap();
        let c = b.build(s).unwrap();
        match serialize(&c, GrammarConfig::new(1)) {
            Err(GrammarError::Inexpressible { node, .. }) => assert_eq!(node, s),
            other => panic!("expected inexpressible, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_random_grammar_circuits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GrammarConfig::new(6);
        let vocab = Vocab::new(&cfg);
        for _ in 0..100 {
            let mut b = super::super::sequence::SequenceBuilder::new(cfg).unwrap();
            while !b.state().is_complete() {
                let mask = b.state().valid_tokens(&vocab).unwrap();
                let options: Vec<usize> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, ok)| **ok)
                    .map(|(i, _)| i)
                    .collect();
                b.advance(vocab.token(options[rng.random_range(0..options.len())]))
                    .unwrap();
            }
            let (seq, _) = b.into_parts();
            let circuit = parse(&seq.tokens, cfg).unwrap();
            assert!(circuit.validate().is_valid());
            let reserialized = serialize(&circuit, cfg).unwrap();
            assert_eq!(reserialized.tokens, seq.tokens, "serialize∘parse drifted");
            let reparsed = parse(&reserialized.tokens, cfg).unwrap();
            assert_eq!(reparsed, circuit, "parse∘serialize drifted");
        }
    }

    #[test]
    fn arity_two_sum_unchanged() {
        let cfg = GrammarConfig::new(1);
        let mut b = CircuitBuilder::new(1);
        let x = b.leaf(Var(0), 0.2).unwrap();
        let y = b.leaf(Var(0), 0.9).unwrap();
        let s = b.sum(vec![x, y], vec![0.3, 0.7]).unwrap();
        let c = b.build(s).unwrap();
        let dec = arity_decompose(&c, 3, cfg.max_factor_arity);
        assert_eq!(dec, c);
    }

    #[test]
    fn arity_four_sum_decomposes_as_paired_halves() {
        // weights (0.4, 0.3, 0.2, 0.1): outer (0.7, 0.3), inner (4/7, 3/7)
        // and (2/3, 1/3); the density is unchanged on every input.
        let mut b = CircuitBuilder::new(1);
        let kids: Vec<_> = [0.1, 0.3, 0.5, 0.7]
            .iter()
            .map(|p| b.leaf(Var(0), *p).unwrap())
            .collect();
        let s = b.sum(kids, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let c = b.build(s).unwrap();
        let dec = arity_decompose(&c, 3, 8);
        assert!(dec.validate().is_valid());
        match dec.node(dec.root()) {
            crate::circuit::Node::Sum { children, weights } => {
                assert_eq!(children.len(), 2);
                assert!((weights[0] - 0.7).abs() < 1e-12);
                assert!((weights[1] - 0.3).abs() < 1e-12);
            }
            other => panic!("expected sum root, got {other:?}"),
        }
        for x in all_inputs(1) {
            let a = c.evaluate_log(&x).unwrap();
            let d = dec.evaluate_log(&x).unwrap();
            assert!((a.exp() - d.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn arity_five_cascade_preserves_density() {
        let mut b = CircuitBuilder::new(2);
        let mut kids = Vec::new();
        for i in 0..5 {
            let l0 = b.leaf(Var(0), 0.1 + 0.15 * i as f64).unwrap();
            let l1 = b.leaf(Var(1), 0.9 - 0.12 * i as f64).unwrap();
            kids.push(b.product(vec![l0, l1]).unwrap());
        }
        let s = b.sum(kids, vec![0.3, 0.25, 0.2, 0.15, 0.1]).unwrap();
        let c = b.build(s).unwrap();
        let dec = arity_decompose(&c, 3, 8);
        assert!(dec.validate().is_valid());
        for x in all_inputs(2) {
            let a = c.evaluate_log(&x).unwrap().exp();
            let d = dec.evaluate_log(&x).unwrap().exp();
            assert!((a - d).abs() < 1e-10);
        }
        // decomposed circuit serializes
        serialize(&dec, GrammarConfig::new(2)).unwrap();
    }

    #[test]
    fn wide_product_decomposes_for_vocabulary() {
        let d = 16usize;
        let mut b = CircuitBuilder::new(d);
        let kids: Vec<_> = (0..d).map(|v| b.leaf(Var(v as u16), 0.4).unwrap()).collect();
        let p = b.product(kids).unwrap();
        let c = b.build(p).unwrap();
        let cfg = GrammarConfig::new(d); // factorize capped at 8
        assert!(serialize(&c, cfg).is_err());
        let dec = arity_decompose(&c, 3, cfg.max_factor_arity);
        let seq = serialize(&dec, cfg).unwrap();
        let back = parse(&seq.tokens, cfg).unwrap();
        let x = vec![1u8; d];
        assert!((back.num_vars()) == d);
        assert!(
            (dec.evaluate_log(&x).unwrap() - c.evaluate_log(&x).unwrap()).abs() < 1e-10
        );
    }

    /// Exhaustive agreement: the grammar language for d=3 within a 3-level
    /// depth budget equals direct recursive enumeration of ordered trees,
    /// as multisets of canonical keys.
    #[test]
    fn exhaustive_language_agreement_d3() {
        use crate::circuit::Scope;
        use std::collections::HashMap;

        let cfg = GrammarConfig::new(3).with_depth_cap(2); // node depths 0..2
        let vocab = Vocab::new(&cfg);

        // grammar side: DFS over valid sequences
        let mut grammar_keys: HashMap<String, usize> = HashMap::new();
        let mut stack = vec![super::super::GrammarState::new(cfg).unwrap()];
        let mut seqs: Vec<Vec<Token>> = vec![Vec::new()];
        while let Some(state) = stack.pop() {
            let prefix = seqs.pop().unwrap();
            if state.is_complete() {
                let c = parse(&prefix, cfg).unwrap();
                *grammar_keys.entry(canonical_key(&c)).or_insert(0) += 1;
                continue;
            }
            let mask = state.valid_tokens(&vocab).unwrap();
            for (i, ok) in mask.iter().enumerate() {
                if *ok {
                    let tok = vocab.token(i);
                    stack.push(state.try_token(tok).unwrap());
                    let mut p = prefix.clone();
                    p.push(tok);
                    seqs.push(p);
                }
            }
        }

        // oracle side: recursive construction of ordered trees
        fn ordered_partitions(scope: Scope, parts: usize) -> Vec<Vec<Scope>> {
            // ordered lists of `parts` nonempty disjoint scopes covering `scope`
            if parts == 1 {
                return vec![vec![scope]];
            }
            let vars: Vec<_> = scope.iter().collect();
            let mut out = Vec::new();
            // enumerate nonempty proper subsets for the first part; remaining
            // vars must still feed parts-1 children
            let n = vars.len();
            for bits in 1u32..(1 << n) {
                let count = bits.count_ones() as usize;
                if count == 0 || n - count < parts - 1 {
                    continue;
                }
                let mut first = Scope::EMPTY;
                for (i, v) in vars.iter().enumerate() {
                    if bits >> i & 1 == 1 {
                        first.insert(*v);
                    }
                }
                let rest = scope.difference(first);
                for mut tail in ordered_partitions(rest, parts - 1) {
                    let mut p = vec![first];
                    p.append(&mut tail);
                    out.push(p);
                }
            }
            out
        }

        fn enumerate_trees(scope: Scope, depth: usize, cfg: &GrammarConfig) -> Vec<String> {
            let m = scope.len();
            let mut out = Vec::new();
            if m == 1 {
                return vec![format!("L{}", scope.min_var().unwrap().0)];
            }
            // sums: children recover the same scope one level deeper
            if depth + 1 + cfg.min_depth_to_cover(m) <= cfg.depth_cap {
                for arity in [2usize, 3] {
                    let subs = enumerate_trees(scope, depth + 1, cfg);
                    let mut combos: Vec<String> = vec![String::new()];
                    for _ in 0..arity {
                        let mut next = Vec::new();
                        for prefix in &combos {
                            for s in &subs {
                                let sep = if prefix.is_empty() { "" } else { "," };
                                next.push(format!("{prefix}{sep}{s}"));
                            }
                        }
                        combos = next;
                    }
                    for c in combos {
                        out.push(format!("S({c})"));
                    }
                }
            }
            // products: ordered partitions into k parts
            if depth + 1 <= cfg.depth_cap {
                for k in 2..=m.min(cfg.max_factor_arity) {
                    for parts in ordered_partitions(scope, k) {
                        // every part must complete within the budget
                        if parts
                            .iter()
                            .any(|p| depth + 1 + cfg.min_depth_to_cover(p.len()) > cfg.depth_cap)
                        {
                            continue;
                        }
                        let mut combos: Vec<String> = vec![String::new()];
                        for part in &parts {
                            let subs = enumerate_trees(*part, depth + 1, cfg);
                            let mut next = Vec::new();
                            for prefix in &combos {
                                for s in &subs {
                                    let sep = if prefix.is_empty() { "" } else { "," };
                                    next.push(format!("{prefix}{sep}{s}"));
                                }
                            }
                            combos = next;
                        }
                        for c in combos {
                            out.push(format!("P({c})"));
                        }
                    }
                }
            }
            out
        }

        let mut oracle_keys: HashMap<String, usize> = HashMap::new();
        // The oracle emits keys with product children in generated order;
        // canonicalize by sorting product child segments the same way the
        // circuit key does. Simplest: parse each oracle string? Instead,
        // build oracle keys already canonical: ordered partitions include
        // every order, so count each unordered structure len(order) times —
        // matching the grammar side, which also distinguishes orders.
        for key in enumerate_trees(Scope::full(3), 0, &cfg) {
            *oracle_keys.entry(canonicalize_oracle_key(&key)).or_insert(0) += 1;
        }

        assert_eq!(grammar_keys, oracle_keys);
        assert!(!grammar_keys.is_empty());
    }

    /// Sort product child segments by least leaf variable, recursively —
    /// the string-level twin of `canonical_key`.
    fn canonicalize_oracle_key(key: &str) -> String {
        fn parse_node(s: &str) -> (String, usize) {
            // returns canonical form and consumed length
            if let Some(rest) = s.strip_prefix("S(") {
                let (kids, used) = parse_children(rest);
                (format!("S({})", kids.join(",")), 2 + used)
            } else if let Some(rest) = s.strip_prefix("P(") {
                let (mut kids, used) = parse_children(rest);
                kids.sort_by_key(|k| min_leaf(k));
                (format!("P({})", kids.join(",")), 2 + used)
            } else {
                // leaf: L<digits>
                let end = s[1..]
                    .find(|c: char| !c.is_ascii_digit())
                    .map(|i| i + 1)
                    .unwrap_or(s.len());
                (s[..end].to_string(), end)
            }
        }
        fn parse_children(s: &str) -> (Vec<String>, usize) {
            let mut kids = Vec::new();
            let mut pos = 0;
            loop {
                let (kid, used) = parse_node(&s[pos..]);
                kids.push(kid);
                pos += used;
                match s.as_bytes()[pos] {
                    b',' => pos += 1,
                    b')' => return (kids, pos + 1),
                    _ => unreachable!("malformed key"),
                }
            }
        }
        fn min_leaf(s: &str) -> u16 {
            s.split(|c: char| !c.is_ascii_digit())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<u16>().unwrap())
                .min()
                .unwrap()
        }
        parse_node(key).0
    }
}
