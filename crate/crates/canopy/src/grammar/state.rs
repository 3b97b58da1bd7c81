//! Incremental grammar state with dynamic masking.
//!
//! The state is a stack of open frames, one per internal node on the path
//! from the root to the current generation point. Scope bookkeeping follows
//! a deferred-commitment protocol:
//!
//! - Product children are generated left-to-right from an `available`
//!   variable pool. A child's scope commits (and is subtracted from the
//!   pool) when its subtree completes.
//! - A sum opened under a fixed-scope slot commits immediately; a sum
//!   opened under an uncommitted slot commits its scope at the completion
//!   of its first child, after which the remaining children are masked to
//!   exactly that scope.
//! - A token is admitted only if, afterwards, a concrete cheapest
//!   completion still fits the depth and node caps and every pending
//!   sibling can still be fed. Generation therefore never dead-ends.

use super::{GrammarConfig, GrammarError, MaskReason, Token, Vocab};
use crate::circuit::Scope;

/// One open internal node.
#[derive(Clone, Debug, PartialEq)]
enum Frame {
    /// Sum with a committed scope; each remaining child must cover exactly
    /// `scope`.
    Sum {
        scope: Scope,
        remaining: usize,
        token_index: usize,
    },
    /// Sum whose scope commits when its first child completes.
    PendingSum { arity: usize, token_index: usize },
    /// Product whose remaining children claim disjoint variables from
    /// `pool`. `exact` products (opened under a fixed scope) must drain the
    /// pool; flexible ones must leave at least `leave` variables for the
    /// enclosing context.
    Product {
        pool: Scope,
        remaining: usize,
        acquired: Scope,
        exact: bool,
        leave: usize,
        token_index: usize,
    },
}

/// The constraint on the subtree to be generated next.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    /// Subtree scope must equal this set exactly.
    Fixed(Scope),
    /// Subtree picks its own scope from `pool`, leaving at least `reserve`
    /// variables unclaimed and taking at least `min_take`.
    Avail {
        pool: Scope,
        reserve: usize,
        min_take: usize,
    },
}

/// Incremental parse/mask state for one generation episode.
#[derive(Clone, Debug)]
pub struct GrammarState {
    cfg: GrammarConfig,
    stack: Vec<Frame>,
    tokens_emitted: usize,
    decision_indices: Vec<usize>,
    complete: bool,
}

impl GrammarState {
    pub fn new(cfg: GrammarConfig) -> Result<GrammarState, GrammarError> {
        if !cfg.is_feasible() {
            return Err(GrammarError::InfeasibleConfig {
                num_vars: cfg.num_vars,
            });
        }
        Ok(GrammarState {
            cfg,
            stack: Vec::new(),
            tokens_emitted: 0,
            decision_indices: Vec::new(),
            complete: false,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.cfg
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Tokens emitted so far (sentinels are never emitted).
    pub fn len(&self) -> usize {
        self.tokens_emitted
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_emitted == 0
    }

    /// Positions of Sum2/Sum3 tokens so far.
    pub fn decision_indices(&self) -> &[usize] {
        &self.decision_indices
    }

    /// Depth the next node would be created at.
    pub fn next_depth(&self) -> usize {
        self.stack.len()
    }

    /// Token index of the open frame the next node attaches to.
    pub fn next_parent(&self) -> Option<usize> {
        self.stack.last().map(|f| match f {
            Frame::Sum { token_index, .. }
            | Frame::PendingSum { token_index, .. }
            | Frame::Product { token_index, .. } => *token_index,
        })
    }

    /// The constraint governing the next token.
    pub fn current_slot(&self) -> Option<Slot> {
        if self.complete {
            return None;
        }
        let mut min_take = 1usize;
        for frame in self.stack.iter().rev() {
            match frame {
                Frame::Sum { scope, .. } => return Some(Slot::Fixed(*scope)),
                Frame::PendingSum { .. } => {
                    // first child must commit a sum-sized scope
                    min_take = 2;
                }
                Frame::Product {
                    pool,
                    remaining,
                    exact,
                    leave,
                    ..
                } => {
                    if *exact && *remaining == 1 && min_take == 1 {
                        return Some(Slot::Fixed(*pool));
                    }
                    return Some(Slot::Avail {
                        pool: *pool,
                        reserve: (*remaining - 1) + *leave,
                        min_take,
                    });
                }
            }
        }
        // Empty stack and not complete: the root slot covers everything.
        Some(Slot::Fixed(Scope::full(self.cfg.num_vars)))
    }

    /// Cheapest-token validity, ignoring caps. Caps are handled by the
    /// completion check in [`GrammarState::try_token`].
    fn basic_check(&self, token: Token) -> Result<(), MaskReason> {
        if token.is_sentinel() {
            return Err(MaskReason::SentinelNotGenerable);
        }
        let slot = self.current_slot().expect("checked not complete");
        match (token, slot) {
            (Token::Leaf(v), Slot::Fixed(s)) => {
                if s == Scope::singleton(v) {
                    Ok(())
                } else {
                    Err(MaskReason::LeafScopeMismatch)
                }
            }
            (Token::Leaf(v), Slot::Avail { pool, reserve, min_take }) => {
                if min_take > 1 {
                    Err(MaskReason::LeafUnderPendingSum)
                } else if !pool.contains(v) || pool.len() < reserve + 1 {
                    Err(MaskReason::LeafNotAvailable)
                } else {
                    Ok(())
                }
            }
            (Token::Sum2 | Token::Sum3, Slot::Fixed(s)) => {
                if s.len() >= 2 {
                    Ok(())
                } else {
                    Err(MaskReason::SumScopeTooSmall)
                }
            }
            (Token::Sum2 | Token::Sum3, Slot::Avail { pool, reserve, .. }) => {
                if pool.len() >= reserve + 2 {
                    Ok(())
                } else {
                    Err(MaskReason::SumScopeTooSmall)
                }
            }
            (Token::Factorize(k), Slot::Fixed(s)) => {
                let k = k as usize;
                if k >= 2 && k <= s.len() && k <= self.cfg.max_factor_arity {
                    Ok(())
                } else {
                    Err(MaskReason::FactorizeTooWide {
                        arity: k,
                        capacity: s.len(),
                    })
                }
            }
            (Token::Factorize(k), Slot::Avail { pool, reserve, .. }) => {
                let k = k as usize;
                let capacity = pool.len().saturating_sub(reserve);
                if k >= 2 && k <= capacity && k <= self.cfg.max_factor_arity {
                    Ok(())
                } else {
                    Err(MaskReason::FactorizeTooWide { arity: k, capacity })
                }
            }
            (Token::Bos | Token::Eos, _) => unreachable!(),
        }
    }

    /// Apply a token assumed to pass `basic_check`.
    fn apply(&mut self, token: Token) {
        let slot = self.current_slot().expect("state not complete");
        let token_index = self.tokens_emitted;
        if token.is_sum() {
            self.decision_indices.push(token_index);
        }
        self.tokens_emitted += 1;
        match token {
            Token::Leaf(v) => {
                self.complete_subtree(Scope::singleton(v));
            }
            Token::Sum2 | Token::Sum3 => {
                let arity = token.sum_arity().unwrap();
                match slot {
                    Slot::Fixed(scope) => self.stack.push(Frame::Sum {
                        scope,
                        remaining: arity,
                        token_index,
                    }),
                    Slot::Avail { .. } => self.stack.push(Frame::PendingSum { arity, token_index }),
                }
            }
            Token::Factorize(k) => {
                let k = k as usize;
                match slot {
                    Slot::Fixed(scope) => self.stack.push(Frame::Product {
                        pool: scope,
                        remaining: k,
                        acquired: Scope::EMPTY,
                        exact: true,
                        leave: 0,
                        token_index,
                    }),
                    Slot::Avail { pool, reserve, .. } => self.stack.push(Frame::Product {
                        pool,
                        remaining: k,
                        acquired: Scope::EMPTY,
                        exact: false,
                        leave: reserve,
                        token_index,
                    }),
                }
            }
            Token::Bos | Token::Eos => unreachable!(),
        }
    }

    /// Close-out cascade: a child subtree completed with scope `scope`.
    fn complete_subtree(&mut self, mut scope: Scope) {
        loop {
            let Some(top) = self.stack.last_mut() else {
                // the root subtree completed
                debug_assert_eq!(scope, Scope::full(self.cfg.num_vars));
                self.complete = true;
                return;
            };
            match top {
                Frame::Sum {
                    scope: s,
                    remaining,
                    ..
                } => {
                    debug_assert_eq!(scope, *s, "sum child scope drifted");
                    *remaining -= 1;
                    if *remaining == 0 {
                        scope = *s;
                        self.stack.pop();
                        continue;
                    }
                    return;
                }
                Frame::PendingSum { arity, token_index } => {
                    debug_assert!(scope.len() >= 2);
                    let frame = Frame::Sum {
                        scope,
                        remaining: *arity - 1,
                        token_index: *token_index,
                    };
                    *self.stack.last_mut().unwrap() = frame;
                    return;
                }
                Frame::Product {
                    pool,
                    remaining,
                    acquired,
                    exact,
                    ..
                } => {
                    debug_assert!(scope.is_subset_of(*pool), "child claimed outside pool");
                    *pool = pool.difference(scope);
                    *acquired = acquired.union(scope);
                    *remaining -= 1;
                    if *remaining == 0 {
                        debug_assert!(!*exact || pool.is_empty(), "exact product left vars");
                        scope = *acquired;
                        self.stack.pop();
                        continue;
                    }
                    return;
                }
            }
        }
    }

    /// Token count of a concrete cheapest completion, or None if no
    /// completion fits the depth cap. The same completion realizes the node
    /// bound, so admission implies reachability of a complete sequence.
    fn completion_cost(&self) -> Option<usize> {
        if self.complete {
            return Some(0);
        }
        let cfg = &self.cfg;
        let mut nodes = 0usize;
        // Variables the in-progress child subtree (frames above the one
        // being visited) will claim from its enclosing pool, and the size of
        // the scope it commits.
        let mut claim = 0usize;
        let len = self.stack.len();
        if len == 0 {
            // fresh state: cover the full scope from depth zero
            if cfg.min_depth_to_cover(cfg.num_vars) > cfg.depth_cap {
                return None;
            }
            return Some(cfg.min_nodes_to_cover(cfg.num_vars));
        }
        for (j, frame) in self.stack.iter().enumerate().rev() {
            let in_progress = usize::from(j < len - 1);
            let child_depth = j + 1;
            match frame {
                Frame::Sum { scope, remaining, .. } => {
                    let m = scope.len();
                    let future = remaining - in_progress;
                    if future > 0 {
                        if child_depth + cfg.min_depth_to_cover(m) > cfg.depth_cap {
                            return None;
                        }
                        nodes += future * cfg.min_nodes_to_cover(m);
                    }
                    claim = m;
                }
                Frame::PendingSum { arity, .. } => {
                    let commit = if in_progress == 0 {
                        // unstarted first child: factorize two pool variables
                        if child_depth + 1 > cfg.depth_cap {
                            return None;
                        }
                        nodes += 3;
                        2
                    } else {
                        claim
                    };
                    debug_assert!(commit >= 2);
                    if arity - 1 > 0 {
                        if child_depth + cfg.min_depth_to_cover(commit) > cfg.depth_cap {
                            return None;
                        }
                        nodes += (arity - 1) * cfg.min_nodes_to_cover(commit);
                    }
                    claim = commit;
                }
                Frame::Product {
                    pool,
                    remaining,
                    acquired,
                    exact,
                    ..
                } => {
                    let future = remaining - in_progress;
                    let avail_after = pool.len().checked_sub(claim)?;
                    if *exact {
                        if future == 0 {
                            if avail_after != 0 {
                                return None;
                            }
                        } else {
                            if avail_after < future {
                                return None;
                            }
                            // even split of the leftover pool
                            let base = avail_after / future;
                            let extra = avail_after % future;
                            for i in 0..future {
                                let part = base + usize::from(i < extra);
                                if child_depth + cfg.min_depth_to_cover(part) > cfg.depth_cap {
                                    return None;
                                }
                                nodes += cfg.min_nodes_to_cover(part);
                            }
                        }
                        claim = acquired.len() + pool.len();
                    } else {
                        // flexible: each future child takes one leaf
                        if avail_after < future {
                            return None;
                        }
                        if future > 0 && child_depth > cfg.depth_cap {
                            return None;
                        }
                        nodes += future;
                        claim = acquired.len() + claim + future;
                    }
                }
            }
        }
        Some(nodes)
    }

    /// Check + apply in one step on a copy, so masking and transition agree
    /// exactly.
    pub fn try_token(&self, token: Token) -> Result<GrammarState, GrammarError> {
        if self.complete {
            return Err(GrammarError::CompleteState);
        }
        let position = self.tokens_emitted;
        if let Err(reason) = self.basic_check(token) {
            return Err(GrammarError::InvalidToken {
                position,
                token,
                reason,
            });
        }
        let mut next = self.clone();
        next.apply(token);
        match next.completion_cost() {
            None => Err(GrammarError::InvalidToken {
                position,
                token,
                reason: MaskReason::DepthCapExceeded,
            }),
            Some(cost) if next.tokens_emitted + cost > self.cfg.node_cap => {
                Err(GrammarError::InvalidToken {
                    position,
                    token,
                    reason: MaskReason::NodeCapExceeded,
                })
            }
            Some(_) => Ok(next),
        }
    }

    /// Advance in place; the token must be valid.
    pub fn advance(&mut self, token: Token) -> Result<(), GrammarError> {
        *self = self.try_token(token)?;
        Ok(())
    }

    /// Boolean mask over the vocabulary. Errors on a complete state; for
    /// incomplete states the mask is never empty.
    pub fn valid_tokens(&self, vocab: &Vocab) -> Result<Vec<bool>, GrammarError> {
        if self.complete {
            return Err(GrammarError::CompleteState);
        }
        Ok(vocab
            .tokens()
            .map(|t| self.try_token(t).is_ok())
            .collect())
    }
}
