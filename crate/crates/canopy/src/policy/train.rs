//! Maximum-likelihood training on token-sequence corpora.

use super::net::PolicyParams;
use super::run::{masked_log_softmax, net_input_for, replay_masks};
use super::PolicyError;
use crate::grammar::{GrammarConfig, TokenSequence, Vocab};
use crate::opt::{AdamConfig, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImitationConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub rng_seed: u64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            epochs: 50,
            batch_size: 8,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            rng_seed: 0,
        }
    }
}

/// Gradient of a weighted log-likelihood objective for one sequence:
/// `Σ_t coeff_t · log π(a_t | s_t)`, accumulated into `grad` (ascent
/// direction). Returns the per-step log probabilities. Forced steps have
/// zero gradient and contribute exactly zero.
pub fn accumulate_sequence_grad(
    params: &PolicyParams,
    vocab: &Vocab,
    seq: &TokenSequence,
    masks: &[Vec<bool>],
    coeffs: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let vocab_size = params.cfg.vocab_size;
    debug_assert_eq!(vocab.size(), vocab_size);
    let input = net_input_for(seq, vocab);
    let trace = params.forward(&input);
    let mut dlogits = vec![0.0f64; input.len() * vocab_size];
    let mut steps = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mask = &masks[t];
        let logits = &trace.logits[t * vocab_size..(t + 1) * vocab_size];
        let logp = masked_log_softmax(logits, mask).expect("mask nonempty");
        let target = vocab.index(seq.tokens[t]);
        steps.push(if mask.iter().filter(|&&ok| ok).count() == 1 {
            0.0
        } else {
            logp[target]
        });
        let c = coeffs[t];
        if c == 0.0 {
            continue;
        }
        for o in 0..vocab_size {
            if mask[o] {
                let p = logp[o].exp();
                let indicator = if o == target { 1.0 } else { 0.0 };
                dlogits[t * vocab_size + o] = c * (indicator - p);
            }
        }
    }
    params.backward(&input, &trace, &dlogits, grad);
    steps
}

/// Minimize the mean total negative log probability of the corpus
/// sequences. Returns the per-epoch mean NLL trace.
pub fn imitation_train(
    params: &mut PolicyParams,
    corpus: &[TokenSequence],
    grammar: GrammarConfig,
    cfg: &ImitationConfig,
) -> Result<Vec<f64>, PolicyError> {
    if corpus.is_empty() {
        return Err(PolicyError::Checkpoint("empty corpus".into()));
    }
    let vocab = Vocab::new(&grammar);
    // replay once: masks are a property of the sequences, not the params
    let mut masks = Vec::with_capacity(corpus.len());
    for seq in corpus {
        let (_, m) = replay_masks(&seq.tokens, grammar, &vocab)?;
        masks.push(m);
    }
    let mut adam = AdamState::new(params.layout.total, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_nll = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0f64; params.layout.total];
            for &i in chunk {
                let seq = &corpus[i];
                let coeffs = vec![1.0 / chunk.len() as f64; seq.len()];
                let steps =
                    accumulate_sequence_grad(params, &vocab, seq, &masks[i], &coeffs, &mut grad);
                epoch_nll -= steps.iter().sum::<f64>();
            }
            // ascent on log-likelihood = descent on its negation
            for g in &mut grad {
                *g = -*g;
                if !g.is_finite() {
                    return Err(PolicyError::NonFinite("imitation gradient"));
                }
            }
            adam.step(&mut params.theta, &grad);
        }
        trace.push(epoch_nll / corpus.len() as f64);
    }
    Ok(trace)
}
