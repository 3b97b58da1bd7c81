//! Token sequences with tree bookkeeping: per-token depth, parent links,
//! structural-decision indices, and pairwise tree relations.

use super::state::GrammarState;
use super::{GrammarConfig, GrammarError, Token};

/// Tree relation of token `i` to token `j` (`r(i, j) = Parent` means `i` is
/// the direct parent of `j`). `Ancestor` is the transitive closure of
/// parenthood excluding the direct parent.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Relation {
    Parent,
    Child,
    Sibling,
    Ancestor,
    Other,
}

impl Relation {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            Relation::Parent => 0,
            Relation::Child => 1,
            Relation::Sibling => 2,
            Relation::Ancestor => 3,
            Relation::Other => 4,
        }
    }
}

/// A (possibly partial) pre-order token encoding of a circuit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Node depth per token (root 0); depth in the tree, not the sequence.
    pub depths: Vec<usize>,
    /// Index of the parent token, None for the root.
    pub parents: Vec<Option<usize>>,
    /// Positions of Sum2/Sum3 tokens.
    pub decision_indices: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// (T, D, decision index set): token count excluding sentinels, number
    /// of structural decisions, and their positions.
    pub fn structural_decisions(&self) -> (usize, usize, &[usize]) {
        (
            self.tokens.len(),
            self.decision_indices.len(),
            &self.decision_indices,
        )
    }

    /// Relation of token `i` to token `j`.
    pub fn relation(&self, i: usize, j: usize) -> Relation {
        if i == j {
            return Relation::Other;
        }
        if self.parents[j] == Some(i) {
            return Relation::Parent;
        }
        if self.parents[i] == Some(j) {
            return Relation::Child;
        }
        if self.parents[i].is_some() && self.parents[i] == self.parents[j] {
            return Relation::Sibling;
        }
        // ancestor beyond the direct parent
        let mut a = self.parents[j];
        while let Some(p) = a {
            a = self.parents[p];
            if a == Some(i) {
                return Relation::Ancestor;
            }
        }
        Relation::Other
    }

    /// Row-major T x T matrix of `relation(i, j)`.
    pub fn relation_matrix(&self) -> Vec<Relation> {
        let t = self.len();
        let mut m = vec![Relation::Other; t * t];
        for i in 0..t {
            for j in 0..t {
                m[i * t + j] = self.relation(i, j);
            }
        }
        m
    }
}

/// Couples a grammar state with the sequence built so far; the single entry
/// point for incremental generation and replay.
#[derive(Clone, Debug)]
pub struct SequenceBuilder {
    state: GrammarState,
    seq: TokenSequence,
}

impl SequenceBuilder {
    pub fn new(cfg: GrammarConfig) -> Result<SequenceBuilder, GrammarError> {
        Ok(SequenceBuilder {
            state: GrammarState::new(cfg)?,
            seq: TokenSequence::default(),
        })
    }

    pub fn state(&self) -> &GrammarState {
        &self.state
    }

    pub fn sequence(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn advance(&mut self, token: Token) -> Result<(), GrammarError> {
        let depth = self.state.next_depth();
        let parent = self.state.next_parent();
        self.state.advance(token)?;
        if token.is_sum() {
            self.seq.decision_indices.push(self.seq.tokens.len());
        }
        self.seq.tokens.push(token);
        self.seq.depths.push(depth);
        self.seq.parents.push(parent);
        Ok(())
    }

    pub fn into_parts(self) -> (TokenSequence, GrammarState) {
        (self.seq, self.state)
    }
}

/// Replay a token slice through the grammar. Valid prefixes are fine; use
/// the returned state to check completeness.
pub fn replay(tokens: &[Token], cfg: GrammarConfig) -> Result<(TokenSequence, GrammarState), GrammarError> {
    let mut b = SequenceBuilder::new(cfg)?;
    for &t in tokens {
        b.advance(t)?;
    }
    Ok(b.into_parts())
}

/// Replay that additionally requires a complete parse.
pub fn replay_complete(
    tokens: &[Token],
    cfg: GrammarConfig,
) -> Result<(TokenSequence, GrammarState), GrammarError> {
    let (seq, state) = replay(tokens, cfg)?;
    if !state.is_complete() {
        return Err(GrammarError::IncompleteSequence {
            open: state.next_depth(),
        });
    }
    Ok((seq, state))
}

#[cfg(test)]
mod tests {
    use super::super::{tokens_from_text, GrammarConfig, Token};
    use super::*;
    use crate::circuit::Var;
    use rand::{Rng, SeedableRng};

    #[test]
    fn spec_example_relations_and_depths() {
        let cfg = GrammarConfig::new(2);
        let toks = vec![Token::Factorize(2), Token::Leaf(Var(0)), Token::Leaf(Var(1))];
        let (seq, state) = replay(&toks, cfg).unwrap();
        assert!(state.is_complete());
        assert_eq!(seq.depths, vec![0, 1, 1]);
        assert_eq!(seq.relation(0, 1), Relation::Parent);
        assert_eq!(seq.relation(1, 0), Relation::Child);
        assert_eq!(seq.relation(1, 2), Relation::Sibling);
    }

    #[test]
    fn single_token_prefix() {
        let cfg = GrammarConfig::new(3);
        let (seq, state) = replay(&[Token::Sum2], cfg).unwrap();
        assert!(!state.is_complete());
        assert_eq!(seq.depths, vec![0]);
        assert_eq!(seq.relation_matrix(), vec![Relation::Other]);
    }

    #[test]
    fn parent_child_symmetry() {
        let cfg = GrammarConfig::new(4);
        let toks =
            tokens_from_text("S2 F2 L0 F3 L1 L2 L3 F2 F2 L0 L1 F2 L2 L3").unwrap();
        let (seq, state) = replay(&toks, cfg).unwrap();
        assert!(state.is_complete());
        let t = seq.len();
        for i in 0..t {
            for j in 0..t {
                let r = seq.relation(i, j);
                let rt = seq.relation(j, i);
                assert_eq!(r == Relation::Parent, rt == Relation::Child);
                assert_eq!(r == Relation::Sibling, rt == Relation::Sibling);
            }
        }
        // decisions: exactly the one S2 at position 0
        let (t_count, d_count, idx) = seq.structural_decisions();
        assert_eq!(t_count, 14);
        assert_eq!(d_count, 1);
        assert_eq!(idx, &[0]);
    }

    /// Independent oracle: rebuild parent links from token arities alone
    /// (pre-order with known child counts) and compare relation matrices.
    fn parents_by_recursive_descent(tokens: &[Token]) -> Vec<Option<usize>> {
        let mut parents = vec![None; tokens.len()];
        // stack of (token index, children still expected)
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            parents[i] = stack.last().map(|(p, _)| *p);
            if let Some(top) = stack.last_mut() {
                top.1 -= 1;
            }
            let arity = match tok {
                Token::Sum2 => 2,
                Token::Sum3 => 3,
                Token::Factorize(k) => *k as usize,
                Token::Leaf(_) => 0,
                _ => unreachable!(),
            };
            if arity > 0 {
                stack.push((i, arity));
            }
            while matches!(stack.last(), Some((_, 0))) {
                stack.pop();
            }
        }
        parents
    }

    #[test]
    fn relations_match_recursive_descent_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let cfg = GrammarConfig::new(8);
        let vocab = super::super::Vocab::new(&cfg);
        for _ in 0..50 {
            let mut b = SequenceBuilder::new(cfg).unwrap();
            while !b.state().is_complete() {
                let mask = b.state().valid_tokens(&vocab).unwrap();
                let options: Vec<usize> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, ok)| **ok)
                    .map(|(i, _)| i)
                    .collect();
                let pick = options[rng.random_range(0..options.len())];
                b.advance(vocab.token(pick)).unwrap();
            }
            let (seq, _) = b.into_parts();
            assert_eq!(seq.parents, parents_by_recursive_descent(&seq.tokens));
        }
    }
}
