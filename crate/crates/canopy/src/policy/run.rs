//! Sampling and teacher-forced scoring under grammar masks.

use super::net::{Decoder, NetInput, PolicyParams};
use super::PolicyError;
use crate::grammar::{
    GrammarConfig, Relation, SequenceBuilder, Token, TokenSequence, Vocab,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Masked log softmax: masked-out entries get exactly -inf (probability 0),
/// masked-in entries are normalized over the mask only.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, PolicyError> {
    debug_assert_eq!(logits.len(), mask.len());
    let mut max = f64::NEG_INFINITY;
    for (l, &ok) in logits.iter().zip(mask) {
        if ok && *l > max {
            max = *l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::EmptyMask);
    }
    let mut z = 0.0;
    for (l, &ok) in logits.iter().zip(mask) {
        if ok {
            z += (l - max).exp();
        }
    }
    let logz = max + z.ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(l, &ok)| if ok { l - logz } else { f64::NEG_INFINITY })
        .collect())
}

/// The BOS token occupies input position 0; grammar token `t` sits at input
/// position `t + 1`. Relations to/from BOS are `Other`. Returns, for every
/// existing input position, its relation to the token about to be emitted
/// (whose parent is already determined by the grammar state).
fn rels_for_new_input(seq: &TokenSequence, new_parent: Option<usize>) -> Vec<Relation> {
    // ancestors of the new token beyond its direct parent
    let mut beyond_parent = Vec::new();
    let mut a = new_parent.and_then(|p| seq.parents[p]);
    while let Some(p) = a {
        beyond_parent.push(p);
        a = seq.parents[p];
    }
    let mut rels = Vec::with_capacity(seq.len() + 1);
    rels.push(Relation::Other); // BOS
    for j in 0..seq.len() {
        let rel = if Some(j) == new_parent {
            Relation::Parent
        } else if new_parent.is_some() && seq.parents[j] == new_parent {
            Relation::Sibling
        } else if beyond_parent.contains(&j) {
            Relation::Ancestor
        } else {
            Relation::Other
        };
        rels.push(rel);
    }
    rels
}

/// One sampled generation episode.
#[derive(Debug, Clone)]
pub struct SampledEpisode {
    pub seq: TokenSequence,
    /// log π(a_t | s_t) under the policy itself (temperature 1, no
    /// exploration mixing), per step.
    pub step_logprobs: Vec<f64>,
}

impl SampledEpisode {
    pub fn total_logprob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

/// Autoregressive sampling under the grammar mask.
///
/// At each step the next token is drawn from
/// `(1-ε)·softmax(logits/temperature) + ε·uniform(valid)`; the recorded
/// per-step log probabilities are always the unmixed temperature-1 policy,
/// so they match a teacher-forced recomputation. `temperature = 0` means
/// greedy argmax. Episodes that hit `max_seq_len` abort with an error.
pub fn sample_structure(
    params: &PolicyParams,
    grammar: GrammarConfig,
    temperature: f64,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampledEpisode, PolicyError> {
    let vocab = Vocab::new(&grammar);
    debug_assert_eq!(vocab.size(), params.cfg.vocab_size);
    let mut builder = SequenceBuilder::new(grammar)?;
    let mut decoder = Decoder::new(params);
    let bos = vocab.index(Token::Bos);
    let mut logits = decoder.step(bos, 0, &[]);
    let mut step_logprobs = Vec::new();

    while !builder.state().is_complete() {
        if builder.sequence().len() + 1 >= params.cfg.max_seq_len {
            return Err(PolicyError::EpisodeTooLong {
                len: builder.sequence().len(),
                max: params.cfg.max_seq_len,
            });
        }
        let mask = builder.state().valid_tokens(&vocab)?;
        let logp = masked_log_softmax(&logits, &mask)?;
        let chosen = choose(&logp, &mask, temperature, epsilon, rng)?;
        step_logprobs.push(logp[chosen]);

        let token = vocab.token(chosen);
        let depth = builder.state().next_depth();
        let parent = builder.state().next_parent();
        let rels = rels_for_new_input(builder.sequence(), parent);
        builder.advance(token)?;
        logits = decoder.step(chosen, depth, &rels);
    }
    let (seq, _) = builder.into_parts();
    Ok(SampledEpisode { seq, step_logprobs })
}

fn choose(
    logp: &[f64],
    mask: &[bool],
    temperature: f64,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize, PolicyError> {
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, ok)| **ok)
        .map(|(i, _)| i)
        .collect();
    if valid.is_empty() {
        return Err(PolicyError::EmptyMask);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(valid[rng.random_range(0..valid.len())]);
    }
    if temperature <= 0.0 {
        // greedy, ties to the lowest index
        return Ok(valid
            .iter()
            .copied()
            .fold(valid[0], |best, i| if logp[i] > logp[best] { i } else { best }));
    }
    // softmax at the requested temperature over the valid entries
    let scaled: Vec<f64> = valid.iter().map(|&i| logp[i] / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, &i) in weights.iter().zip(&valid) {
        u -= w;
        if u <= 0.0 {
            return Ok(i);
        }
    }
    Ok(*valid.last().unwrap())
}

/// Grammar rollout with uniform choices over valid tokens — the exact
/// sampling distribution of an untrained policy (zero output projection),
/// without the network cost.
pub fn uniform_rollout(
    grammar: GrammarConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence, PolicyError> {
    let vocab = Vocab::new(&grammar);
    let mut builder = SequenceBuilder::new(grammar)?;
    while !builder.state().is_complete() {
        let mask = builder.state().valid_tokens(&vocab)?;
        let valid: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, ok)| **ok)
            .map(|(i, _)| i)
            .collect();
        if valid.is_empty() {
            return Err(PolicyError::EmptyMask);
        }
        let pick = valid[rng.random_range(0..valid.len())];
        builder.advance(vocab.token(pick))?;
    }
    Ok(builder.into_parts().0)
}

/// Network input for a teacher-forced pass over a complete or partial
/// sequence: BOS + tokens, with key-to-query relations per position.
pub fn net_input_for(seq: &TokenSequence, vocab: &Vocab) -> NetInput {
    let mut input = NetInput::default();
    input.push(vocab.index(Token::Bos), 0, Vec::new());
    for t in 0..seq.len() {
        let mut rels = Vec::with_capacity(t + 1);
        rels.push(Relation::Other); // BOS
        for j in 0..t {
            // relation of key j to query t
            rels.push(seq.relation(j, t));
        }
        input.push(vocab.index(seq.tokens[t]), seq.depths[t], rels);
    }
    input
}

/// Teacher-forced log probability of a complete sequence: replays the
/// grammar for masks, runs one full forward pass, and scores each step.
/// Forced steps (single valid token) contribute exactly zero.
pub fn sequence_logprob(
    params: &PolicyParams,
    tokens: &[Token],
    grammar: GrammarConfig,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let vocab = Vocab::new(&grammar);
    let (seq, masks) = replay_masks(tokens, grammar, &vocab)?;
    let input = net_input_for(&seq, &vocab);
    let trace = params.forward(&input);
    let v = vocab.size();
    let mut steps = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mask = &masks[t];
        if mask.iter().filter(|&&ok| ok).count() == 1 {
            steps.push(0.0);
            continue;
        }
        let logits = &trace.logits[t * v..(t + 1) * v];
        let logp = masked_log_softmax(logits, mask)?;
        steps.push(logp[vocab.index(seq.tokens[t])]);
    }
    Ok((steps.iter().sum(), steps))
}

/// Replay a sequence collecting the mask at every step.
pub fn replay_masks(
    tokens: &[Token],
    grammar: GrammarConfig,
    vocab: &Vocab,
) -> Result<(TokenSequence, Vec<Vec<bool>>), PolicyError> {
    let mut builder = SequenceBuilder::new(grammar)?;
    let mut masks = Vec::with_capacity(tokens.len());
    for &t in tokens {
        masks.push(builder.state().valid_tokens(vocab)?);
        builder.advance(t)?;
    }
    Ok((builder.into_parts().0, masks))
}
