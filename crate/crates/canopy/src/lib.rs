//! Canopy: structure learning for tree-shaped probabilistic circuits over
//! binary variables.
//!
//! The library is organized around a small set of subsystems:
//!
//! - [`circuit`]: the circuit representation itself — validation, exact
//!   log-domain evaluation, marginals, top-down flows, and sum-weight
//!   gradients.
//! - [`grammar`]: a token vocabulary and an incremental state machine that
//!   masks invalid tokens, so every generated sequence parses to a valid
//!   circuit.
//! - [`baseline`]: a greedy top-down structure learner (independence tests +
//!   row clustering) used both as a comparison point and as the generator of
//!   imitation-training corpora.
//! - [`opt`]: parameter fitting for a fixed structure — flow-weighted EM for
//!   sum weights, Adam for leaf parameters, conjugate updates for
//!   Dirichlet-Categorical leaves.
//! - [`policy`]: a small autoregressive attention network over token
//!   sequences with tree-relative attention bias and grammar masking.
//! - [`rl`]: the policy-gradient training loop (token- and option-level
//!   estimators), the exact tempered-posterior oracle on enumerable
//!   grammars, and the signal-to-noise probe.
//! - [`uq`]: the three-layer uncertainty decomposition — structural variance
//!   by model averaging, parameter variance by block Fisher + delta method,
//!   leaf variance by exact moment propagation.
//! - [`data`]: dataset loading, ancestral sampling, and synthetic fixtures
//!   with known ground-truth circuits.

pub mod baseline;
pub mod circuit;
pub mod data;
pub mod grammar;
pub mod opt;
pub mod policy;
pub mod rl;
pub mod uq;

pub(crate) mod numeric;
