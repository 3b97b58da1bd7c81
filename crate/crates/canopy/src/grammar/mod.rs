//! Token vocabulary and grammar machinery for circuit generation.
//!
//! Circuits are written as pre-order token sequences. The vocabulary for a
//! `d`-variable problem holds two sum-arity tokens, fixed-arity factorize
//! tokens, one leaf token per variable, and two sentinels. A
//! [`GrammarState`] tracks the partial parse and exposes a validity mask
//! over the vocabulary; every completed sequence parses to a circuit with
//! zero validation violations.

mod convert;
mod sequence;
mod state;

pub use convert::{arity_decompose, canonical_key, parse, serialize};
pub use sequence::{replay, replay_complete, Relation, SequenceBuilder, TokenSequence};
pub use state::{GrammarState, Slot};

use crate::circuit::{NodeId, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One vocabulary entry.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Token {
    Bos,
    Eos,
    Sum2,
    Sum3,
    /// Product with a fixed number of children; the arity is part of the
    /// token so parsing is unambiguous.
    Factorize(u8),
    Leaf(Var),
}

impl Token {
    pub fn is_sum(self) -> bool {
        matches!(self, Token::Sum2 | Token::Sum3)
    }

    pub fn sum_arity(self) -> Option<usize> {
        match self {
            Token::Sum2 => Some(2),
            Token::Sum3 => Some(3),
            _ => None,
        }
    }

    pub fn is_sentinel(self) -> bool {
        matches!(self, Token::Bos | Token::Eos)
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Token::Bos => write!(f, "<bos>"),
            Token::Eos => write!(f, "<eos>"),
            Token::Sum2 => write!(f, "S2"),
            Token::Sum3 => write!(f, "S3"),
            Token::Factorize(k) => write!(f, "F{k}"),
            Token::Leaf(v) => write!(f, "L{}", v.0),
        }
    }
}

/// Grammar shape parameters. `depth_cap` bounds node depth (root = 0) and
/// `node_cap` bounds the token count of one circuit; both are enforced by
/// masking, so generation terminates by construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub num_vars: usize,
    /// Largest factorize arity in the vocabulary, at most `num_vars`.
    pub max_factor_arity: usize,
    pub depth_cap: usize,
    pub node_cap: usize,
}

/// Default largest factorize arity (full `[2, d]` explodes the vocabulary
/// on wide problems).
pub const DEFAULT_MAX_FACTOR_ARITY: usize = 8;
pub const DEFAULT_DEPTH_CAP: usize = 8;

impl GrammarConfig {
    pub fn new(num_vars: usize) -> GrammarConfig {
        GrammarConfig {
            num_vars,
            max_factor_arity: DEFAULT_MAX_FACTOR_ARITY.min(num_vars).max(2),
            depth_cap: DEFAULT_DEPTH_CAP,
            node_cap: crate::circuit::DEFAULT_NODE_CAP,
        }
    }

    pub fn with_depth_cap(mut self, cap: usize) -> Self {
        self.depth_cap = cap;
        self
    }

    pub fn with_node_cap(mut self, cap: usize) -> Self {
        self.node_cap = cap;
        self
    }

    pub fn with_max_factor_arity(mut self, k: usize) -> Self {
        self.max_factor_arity = k.clamp(2, self.num_vars.max(2));
        self
    }

    /// Nodes of the cheapest product-tree covering `m` variables (balanced
    /// splits of arity up to `max_factor_arity`).
    pub(crate) fn min_nodes_to_cover(&self, m: usize) -> usize {
        if m <= 1 {
            return 1;
        }
        let k = self.max_factor_arity.min(m);
        // even split of m into k parts
        let base = m / k;
        let extra = m % k;
        let mut nodes = 1;
        for i in 0..k {
            nodes += self.min_nodes_to_cover(base + usize::from(i < extra));
        }
        nodes
    }

    /// Depth below a slot holding an `m`-variable scope for the cheapest
    /// completion (0 when a single leaf suffices).
    pub(crate) fn min_depth_to_cover(&self, m: usize) -> usize {
        if m <= 1 {
            return 0;
        }
        let k = self.max_factor_arity.min(m);
        1 + self.min_depth_to_cover(m.div_ceil(k))
    }

    /// A config is feasible when the full scope is coverable within caps.
    pub fn is_feasible(&self) -> bool {
        self.num_vars >= 1
            && self.num_vars <= crate::circuit::MAX_VARS
            && self.min_depth_to_cover(self.num_vars) <= self.depth_cap
            && self.min_nodes_to_cover(self.num_vars) <= self.node_cap
    }
}

/// Token <-> dense index mapping for one grammar config.
///
/// Layout: `BOS, EOS, S2, S3, F2..Fk, L0..L(d-1)`.
#[derive(Clone, Copy, Debug)]
pub struct Vocab {
    pub num_vars: usize,
    pub max_factor_arity: usize,
}

impl Vocab {
    pub fn new(cfg: &GrammarConfig) -> Vocab {
        Vocab {
            num_vars: cfg.num_vars,
            max_factor_arity: cfg.max_factor_arity,
        }
    }

    pub fn size(&self) -> usize {
        4 + (self.max_factor_arity - 1) + self.num_vars
    }

    pub fn index(&self, token: Token) -> usize {
        match token {
            Token::Bos => 0,
            Token::Eos => 1,
            Token::Sum2 => 2,
            Token::Sum3 => 3,
            Token::Factorize(k) => {
                debug_assert!(k >= 2 && (k as usize) <= self.max_factor_arity);
                4 + (k as usize - 2)
            }
            Token::Leaf(v) => 4 + (self.max_factor_arity - 1) + v.index(),
        }
    }

    pub fn token(&self, index: usize) -> Token {
        match index {
            0 => Token::Bos,
            1 => Token::Eos,
            2 => Token::Sum2,
            3 => Token::Sum3,
            i if i < 4 + (self.max_factor_arity - 1) => Token::Factorize((i - 4 + 2) as u8),
            i => {
                let v = i - 4 - (self.max_factor_arity - 1);
                debug_assert!(v < self.num_vars);
                Token::Leaf(Var(v as u16))
            }
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.size()).map(|i| self.token(i))
    }
}

/// Why a token is masked out (or a sequence rejected).
#[derive(Debug, Clone, PartialEq)]
pub enum MaskReason {
    SentinelNotGenerable,
    /// Leaf variable does not match the fixed scope of the slot.
    LeafScopeMismatch,
    /// Leaf variable is not in the available pool.
    LeafNotAvailable,
    /// The slot must commit a multi-variable scope (first child of a sum).
    LeafUnderPendingSum,
    /// Sums need a scope of at least two variables.
    SumScopeTooSmall,
    /// Factorize arity exceeds the variables this slot may take.
    FactorizeTooWide { arity: usize, capacity: usize },
    /// Taking the token leaves no completion within the depth cap.
    DepthCapExceeded,
    /// Taking the token leaves no completion within the node cap.
    NodeCapExceeded,
}

impl std::fmt::Display for MaskReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskReason::SentinelNotGenerable => write!(f, "sentinels are never generated"),
            MaskReason::LeafScopeMismatch => write!(f, "leaf does not match the committed scope"),
            MaskReason::LeafNotAvailable => write!(f, "leaf variable is not available here"),
            MaskReason::LeafUnderPendingSum => {
                write!(f, "first child of a sum must cover at least two variables")
            }
            MaskReason::SumScopeTooSmall => write!(f, "sum needs a scope of at least two variables"),
            MaskReason::FactorizeTooWide { arity, capacity } => {
                write!(f, "factorize arity {arity} exceeds available capacity {capacity}")
            }
            MaskReason::DepthCapExceeded => write!(f, "no completion within the depth cap"),
            MaskReason::NodeCapExceeded => write!(f, "no completion within the node cap"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("token {token} invalid at position {position}: {reason}")]
    InvalidToken {
        position: usize,
        token: Token,
        reason: MaskReason,
    },
    #[error("state is complete; no further tokens are valid")]
    CompleteState,
    #[error("sequence ends with an incomplete parse ({open} open frames)")]
    IncompleteSequence { open: usize },
    #[error("node {node:?} is not expressible in the grammar: {why}")]
    Inexpressible { node: NodeId, why: String },
    #[error("grammar config cannot cover {num_vars} variables within caps")]
    InfeasibleConfig { num_vars: usize },
    #[error("unknown token text `{0}`")]
    UnknownTokenText(String),
    #[error(transparent)]
    Circuit(#[from] crate::circuit::CircuitError),
}

/// Parse whitespace-separated token text (`S2 S3 F<k> L<v>`).
pub fn tokens_from_text(text: &str) -> Result<Vec<Token>, GrammarError> {
    text.split_whitespace()
        .map(|t| match t {
            "S2" => Ok(Token::Sum2),
            "S3" => Ok(Token::Sum3),
            _ if t.starts_with('F') => t[1..]
                .parse::<u8>()
                .map(Token::Factorize)
                .map_err(|_| GrammarError::UnknownTokenText(t.to_string())),
            _ if t.starts_with('L') => t[1..]
                .parse::<u16>()
                .map(|v| Token::Leaf(Var(v)))
                .map_err(|_| GrammarError::UnknownTokenText(t.to_string())),
            _ => Err(GrammarError::UnknownTokenText(t.to_string())),
        })
        .collect()
}

pub fn tokens_to_text(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
