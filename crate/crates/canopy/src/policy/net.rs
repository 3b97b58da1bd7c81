//! Parameters, forward/backward passes, and the incremental decoder.

use super::{PolicyConfig, PolicyError};
use crate::grammar::Relation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::path::Path;

/// Offsets of each parameter group inside the flat vector.
///
/// Order: token embeddings, per-layer (wq wk wv wo w1 b1 w2 b2), tree bias
/// (heads x relations, shared across layers), output projection + bias.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub embed: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub tree_bias: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct LayerRanges {
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

impl ParamLayout {
    pub fn new(cfg: &PolicyConfig) -> ParamLayout {
        let m = cfg.model_dim;
        let f = cfg.ffn_dim;
        let v = cfg.vocab_size;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embed = take(v * m);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerRanges {
                wq: take(m * m),
                wk: take(m * m),
                wv: take(m * m),
                wo: take(m * m),
                w1: take(f * m),
                b1: take(f),
                w2: take(m * f),
                b2: take(m),
            })
            .collect();
        let tree_bias = take(cfg.num_heads * Relation::COUNT);
        let out_w = take(v * m);
        let out_b = take(v);
        ParamLayout {
            embed,
            layers,
            tree_bias,
            out_w,
            out_b,
            total: at,
        }
    }
}

/// The policy's learnable state: a config plus one flat parameter vector.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub layout: ParamLayout,
    pub theta: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    version: u32,
    config: PolicyConfig,
    theta: Vec<f64>,
}

impl PolicyParams {
    /// Xavier-uniform weights, zero biases, zero tree bias, and a zero
    /// output projection (so the untrained policy is exactly uniform over
    /// grammar-valid tokens).
    pub fn init(cfg: PolicyConfig) -> Result<PolicyParams, PolicyError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut theta = vec![0.0f64; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize, theta: &mut Vec<f64>| {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut theta[range] {
                *w = rng.random_range(-r..r);
            }
        };
        let m = cfg.model_dim;
        let f = cfg.ffn_dim;
        let v = cfg.vocab_size;
        fill(layout.embed.clone(), v, m, &mut theta);
        for l in &layout.layers {
            fill(l.wq.clone(), m, m, &mut theta);
            fill(l.wk.clone(), m, m, &mut theta);
            fill(l.wv.clone(), m, m, &mut theta);
            fill(l.wo.clone(), m, m, &mut theta);
            fill(l.w1.clone(), m, f, &mut theta);
            fill(l.w2.clone(), f, m, &mut theta);
        }
        // tree_bias, out_w, out_b stay zero
        Ok(PolicyParams { cfg, layout, theta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.cfg,
            theta: self.theta.clone(),
        };
        let text = serde_json::to_string(&file).expect("checkpoint serializes");
        std::fs::write(path.as_ref(), text).map_err(|source| PolicyError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PolicyParams, PolicyError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| PolicyError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {}",
                file.version
            )));
        }
        file.config.validate()?;
        let layout = ParamLayout::new(&file.config);
        if file.theta.len() != layout.total {
            return Err(PolicyError::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                file.theta.len(),
                layout.total
            )));
        }
        Ok(PolicyParams {
            cfg: file.config,
            layout,
            theta: file.theta,
        })
    }

    /// Loading against an expected config is a hard error on mismatch.
    pub fn load_compatible(
        path: impl AsRef<Path>,
        expected: &PolicyConfig,
    ) -> Result<PolicyParams, PolicyError> {
        let params = Self::load(path)?;
        // seeds may differ between checkpoints; shape must not
        let mut a = params.cfg;
        let mut b = *expected;
        a.rng_seed = 0;
        b.rng_seed = 0;
        if a != b {
            return Err(PolicyError::ConfigMismatch {
                expected: Box::new(*expected),
                found: Box::new(params.cfg),
            });
        }
        Ok(params)
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.theta[r.clone()]
    }

    pub fn tree_bias(&self, head: usize, rel: Relation) -> f64 {
        self.theta[self.tree_bias_index(head, rel)]
    }

    pub fn tree_bias_index(&self, head: usize, rel: Relation) -> usize {
        self.layout.tree_bias.start + head * Relation::COUNT + rel.index()
    }
}

/// sin/cos features of a scalar (used for both sequence position and tree
/// depth).
fn sinusoid(value: usize, dim: usize, out: &mut [f64]) {
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] += (value as f64 * freq).sin();
        out[2 * i + 1] += (value as f64 * freq).cos();
    }
}

/// Inputs to one forward pass: per input position the token id, the tree
/// depth, and the relation of every earlier position to it (the key-to-query
/// relation used by the attention bias).
#[derive(Debug, Clone, Default)]
pub struct NetInput {
    pub token_ids: Vec<usize>,
    pub depths: Vec<usize>,
    /// Row `i` holds, for each `j < i`, the relation of position `j` to
    /// position `i`.
    pub rels_to_query: Vec<Vec<Relation>>,
}

impl NetInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn push(&mut self, token_id: usize, depth: usize, rels: Vec<Relation>) {
        debug_assert_eq!(rels.len(), self.token_ids.len());
        self.token_ids.push(token_id);
        self.depths.push(depth);
        self.rels_to_query.push(rels);
    }
}

/// Saved activations from a full forward pass, enough to backpropagate.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    t: usize,
    x0: Vec<f64>,
    /// per layer: (q, k, v, attn softmax per head, concat head outputs,
    /// x after the attention residual, ffn preactivation, x after ffn)
    layers: Vec<LayerTrace>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,    // heads x t x t, row-major softmax weights
    concat: Vec<f64>,  // t x m
    x1: Vec<f64>,      // after attention residual
    ffn_pre: Vec<f64>, // t x f
    x2: Vec<f64>,      // after ffn residual
}

fn matvec_into(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        out[o] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

impl PolicyParams {
    /// Per-position input embedding: token embedding + position sinusoid +
    /// depth sinusoid.
    fn embed_position(&self, token_id: usize, pos: usize, depth: usize, out: &mut [f64]) {
        let m = self.cfg.model_dim;
        let emb = &self.p(&self.layout.embed)[token_id * m..(token_id + 1) * m];
        out.copy_from_slice(emb);
        sinusoid(pos, m, out);
        sinusoid(depth, m, out);
    }

    /// Full teacher-forced pass; returns logits for every input position
    /// (position `i` scores the token that follows input `i`).
    pub fn forward(&self, input: &NetInput) -> ForwardTrace {
        let t = input.len();
        let m = self.cfg.model_dim;
        let f = self.cfg.ffn_dim;
        let h = self.cfg.num_heads;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let mut x = vec![0.0f64; t * m];
        for i in 0..t {
            self.embed_position(input.token_ids[i], i, input.depths[i], &mut x[i * m..(i + 1) * m]);
        }
        let x0 = x.clone();

        let mut layers = Vec::with_capacity(self.cfg.num_layers);
        for lr in &self.layout.layers {
            let (wq, wk, wv, wo) = (self.p(&lr.wq), self.p(&lr.wk), self.p(&lr.wv), self.p(&lr.wo));
            let mut q = vec![0.0f64; t * m];
            let mut k = vec![0.0f64; t * m];
            let mut v = vec![0.0f64; t * m];
            for i in 0..t {
                let xi = &x[i * m..(i + 1) * m];
                matvec_into(wq, xi, m, m, &mut q[i * m..(i + 1) * m]);
                matvec_into(wk, xi, m, m, &mut k[i * m..(i + 1) * m]);
                matvec_into(wv, xi, m, m, &mut v[i * m..(i + 1) * m]);
            }
            let mut attn = vec![0.0f64; h * t * t];
            let mut concat = vec![0.0f64; t * m];
            for head in 0..h {
                let hoff = head * dk;
                for i in 0..t {
                    // scores over keys j <= i with the tree-relation offset
                    let qi = &q[i * m + hoff..i * m + hoff + dk];
                    let mut row = vec![0.0f64; i + 1];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &k[j * m + hoff..j * m + hoff + dk];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        let rel = if j == i {
                            Relation::Other
                        } else {
                            input.rels_to_query[i][j]
                        };
                        *r = dot * scale + self.tree_bias(head, rel);
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in &mut row {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for (j, r) in row.iter().enumerate() {
                        let a = r / z;
                        attn[head * t * t + i * t + j] = a;
                        let vj = &v[j * m + hoff..j * m + hoff + dk];
                        for d in 0..dk {
                            concat[i * m + hoff + d] += a * vj[d];
                        }
                    }
                }
            }
            let mut x1 = vec![0.0f64; t * m];
            for i in 0..t {
                let mut aout = vec![0.0f64; m];
                matvec_into(wo, &concat[i * m..(i + 1) * m], m, m, &mut aout);
                for d in 0..m {
                    x1[i * m + d] = x[i * m + d] + aout[d];
                }
            }
            let (w1, b1, w2, b2) = (self.p(&lr.w1), self.p(&lr.b1), self.p(&lr.w2), self.p(&lr.b2));
            let mut ffn_pre = vec![0.0f64; t * f];
            let mut x2 = vec![0.0f64; t * m];
            for i in 0..t {
                let pre = &mut ffn_pre[i * f..(i + 1) * f];
                matvec_into(w1, &x1[i * m..(i + 1) * m], f, m, pre);
                for (p, b) in pre.iter_mut().zip(b1) {
                    *p += b;
                }
                let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
                let mut fout = vec![0.0f64; m];
                matvec_into(w2, &act, m, f, &mut fout);
                for d in 0..m {
                    x2[i * m + d] = x1[i * m + d] + fout[d] + b2[d];
                }
            }
            layers.push(LayerTrace {
                q,
                k,
                v,
                attn,
                concat,
                x1,
                ffn_pre,
                x2: x2.clone(),
            });
            x = x2;
        }

        let vsize = self.cfg.vocab_size;
        let out_w = self.p(&self.layout.out_w);
        let out_b = self.p(&self.layout.out_b);
        let mut logits = vec![0.0f64; t * vsize];
        for i in 0..t {
            let li = &mut logits[i * vsize..(i + 1) * vsize];
            matvec_into(out_w, &x[i * m..(i + 1) * m], vsize, m, li);
            for (l, b) in li.iter_mut().zip(out_b) {
                *l += b;
            }
        }
        ForwardTrace {
            t,
            x0,
            layers,
            logits,
        }
    }

    /// Backpropagate per-position logit gradients through a saved trace,
    /// accumulating into `grad` (same layout as `theta`).
    pub fn backward(
        &self,
        input: &NetInput,
        trace: &ForwardTrace,
        dlogits: &[f64],
        grad: &mut [f64],
    ) {
        let t = trace.t;
        let m = self.cfg.model_dim;
        let f = self.cfg.ffn_dim;
        let h = self.cfg.num_heads;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let vsize = self.cfg.vocab_size;
        debug_assert_eq!(dlogits.len(), t * vsize);
        debug_assert_eq!(grad.len(), self.layout.total);

        // output projection
        let out_w = self.p(&self.layout.out_w);
        let x_final = if let Some(last) = trace.layers.last() {
            &last.x2
        } else {
            &trace.x0
        };
        let mut dx = vec![0.0f64; t * m];
        {
            let gw = self.layout.out_w.start;
            let gb = self.layout.out_b.start;
            for i in 0..t {
                let dl = &dlogits[i * vsize..(i + 1) * vsize];
                let xi = &x_final[i * m..(i + 1) * m];
                for o in 0..vsize {
                    let d = dl[o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[gb + o] += d;
                    let wrow = &out_w[o * m..(o + 1) * m];
                    let grow = &mut grad[gw + o * m..gw + (o + 1) * m];
                    for dd in 0..m {
                        grow[dd] += d * xi[dd];
                        dx[i * m + dd] += d * wrow[dd];
                    }
                }
            }
        }

        for (li, lr) in self.layout.layers.iter().enumerate().rev() {
            let ltr = &trace.layers[li];
            let x_in: &[f64] = if li == 0 { &trace.x0 } else { &trace.layers[li - 1].x2 };
            let (w1, w2) = (self.p(&lr.w1), self.p(&lr.w2));
            let (wq, wk, wv, wo) = (self.p(&lr.wq), self.p(&lr.wk), self.p(&lr.wv), self.p(&lr.wo));

            // ffn: x2 = x1 + w2·relu(w1·x1 + b1) + b2
            let mut dx1 = dx.clone(); // residual branch
            for i in 0..t {
                let dxi = &dx[i * m..(i + 1) * m];
                // b2
                for d in 0..m {
                    grad[lr.b2.start + d] += dxi[d];
                }
                let pre = &ltr.ffn_pre[i * f..(i + 1) * f];
                let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
                // w2 and d(act)
                let mut dact = vec![0.0f64; f];
                for o in 0..m {
                    let d = dxi[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &w2[o * f..(o + 1) * f];
                    let grow = &mut grad[lr.w2.start + o * f..lr.w2.start + (o + 1) * f];
                    for ff in 0..f {
                        grow[ff] += d * act[ff];
                        dact[ff] += d * wrow[ff];
                    }
                }
                // relu + w1 + b1
                let x1i = &ltr.x1[i * m..(i + 1) * m];
                for ff in 0..f {
                    if pre[ff] <= 0.0 {
                        continue;
                    }
                    let d = dact[ff];
                    if d == 0.0 {
                        continue;
                    }
                    grad[lr.b1.start + ff] += d;
                    let wrow = &w1[ff * m..(ff + 1) * m];
                    let grow = &mut grad[lr.w1.start + ff * m..lr.w1.start + (ff + 1) * m];
                    for dd in 0..m {
                        grow[dd] += d * x1i[dd];
                        dx1[i * m + dd] += d * wrow[dd];
                    }
                }
            }

            // attention: x1 = x_in + wo·concat
            let mut dx_in = dx1.clone(); // residual branch
            let mut dconcat = vec![0.0f64; t * m];
            for i in 0..t {
                let d1 = &dx1[i * m..(i + 1) * m];
                let ci = &ltr.concat[i * m..(i + 1) * m];
                for o in 0..m {
                    let d = d1[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &wo[o * m..(o + 1) * m];
                    let grow = &mut grad[lr.wo.start + o * m..lr.wo.start + (o + 1) * m];
                    for dd in 0..m {
                        grow[dd] += d * ci[dd];
                        dconcat[i * m + dd] += d * wrow[dd];
                    }
                }
            }

            let mut dq = vec![0.0f64; t * m];
            let mut dkk = vec![0.0f64; t * m];
            let mut dv = vec![0.0f64; t * m];
            for head in 0..h {
                let hoff = head * dk;
                for i in 0..t {
                    let doh = &dconcat[i * m + hoff..i * m + hoff + dk];
                    let arow = &ltr.attn[head * t * t + i * t..head * t * t + i * t + i + 1];
                    // da_j = do·v_j ; dv_j += a_j·do
                    let mut da = vec![0.0f64; i + 1];
                    for j in 0..=i {
                        let vj = &ltr.v[j * m + hoff..j * m + hoff + dk];
                        let mut dot = 0.0;
                        for d in 0..dk {
                            dot += doh[d] * vj[d];
                            dv[j * m + hoff + d] += arow[j] * doh[d];
                        }
                        da[j] = dot;
                    }
                    // softmax backward
                    let inner: f64 = arow.iter().zip(&da).map(|(a, d)| a * d).sum();
                    for j in 0..=i {
                        let ds = arow[j] * (da[j] - inner);
                        if ds == 0.0 {
                            continue;
                        }
                        let rel = if j == i {
                            Relation::Other
                        } else {
                            input.rels_to_query[i][j]
                        };
                        grad[self.tree_bias_index(head, rel)] += ds;
                        let qi = &ltr.q[i * m + hoff..i * m + hoff + dk];
                        let kj = &ltr.k[j * m + hoff..j * m + hoff + dk];
                        for d in 0..dk {
                            dq[i * m + hoff + d] += ds * scale * kj[d];
                            dkk[j * m + hoff + d] += ds * scale * qi[d];
                        }
                    }
                }
            }

            // project q/k/v gradients back to the layer input
            for i in 0..t {
                let xi = &x_in[i * m..(i + 1) * m];
                for (dmat, w, grange) in [
                    (&dq, wq, &lr.wq),
                    (&dkk, wk, &lr.wk),
                    (&dv, wv, &lr.wv),
                ] {
                    let di = &dmat[i * m..(i + 1) * m];
                    for o in 0..m {
                        let d = di[o];
                        if d == 0.0 {
                            continue;
                        }
                        let wrow = &w[o * m..(o + 1) * m];
                        let grow = &mut grad[grange.start + o * m..grange.start + (o + 1) * m];
                        for dd in 0..m {
                            grow[dd] += d * xi[dd];
                            dx_in[i * m + dd] += d * wrow[dd];
                        }
                    }
                }
            }
            dx = dx_in;
        }

        // embeddings
        let ge = self.layout.embed.start;
        for i in 0..t {
            let tok = input.token_ids[i];
            for d in 0..m {
                grad[ge + tok * m + d] += dx[i * m + d];
            }
        }
    }
}

/// Incremental decoder with per-layer key/value caches. Produces logits
/// identical to the full forward pass, one position at a time.
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    /// per layer: cached K and V rows (t x m each)
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams) -> Decoder<'a> {
        Decoder {
            params,
            k_cache: vec![Vec::new(); params.cfg.num_layers],
            v_cache: vec![Vec::new(); params.cfg.num_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feed the next input token; `rels` gives the relation of each earlier
    /// position to this one. Returns the next-token logits.
    pub fn step(&mut self, token_id: usize, depth: usize, rels: &[Relation]) -> Vec<f64> {
        let p = self.params;
        let m = p.cfg.model_dim;
        let f = p.cfg.ffn_dim;
        let h = p.cfg.num_heads;
        let dk = p.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let pos = self.len;
        debug_assert_eq!(rels.len(), pos);

        let mut x = vec![0.0f64; m];
        p.embed_position(token_id, pos, depth, &mut x);

        for (li, lr) in p.layout.layers.iter().enumerate() {
            let (wq, wk, wv, wo) = (p.p(&lr.wq), p.p(&lr.wk), p.p(&lr.wv), p.p(&lr.wo));
            let mut q = vec![0.0f64; m];
            let mut k = vec![0.0f64; m];
            let mut v = vec![0.0f64; m];
            matvec_into(wq, &x, m, m, &mut q);
            matvec_into(wk, &x, m, m, &mut k);
            matvec_into(wv, &x, m, m, &mut v);
            self.k_cache[li].extend_from_slice(&k);
            self.v_cache[li].extend_from_slice(&v);
            let kc = &self.k_cache[li];
            let vc = &self.v_cache[li];

            let mut concat = vec![0.0f64; m];
            for head in 0..h {
                let hoff = head * dk;
                let qh = &q[hoff..hoff + dk];
                let mut row = vec![0.0f64; pos + 1];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kc[j * m + hoff..j * m + hoff + dk];
                    let dot: f64 = qh.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let rel = if j == pos { Relation::Other } else { rels[j] };
                    *r = dot * scale + p.tree_bias(head, rel);
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in &mut row {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for (j, r) in row.iter().enumerate() {
                    let a = r / z;
                    let vj = &vc[j * m + hoff..j * m + hoff + dk];
                    for d in 0..dk {
                        concat[hoff + d] += a * vj[d];
                    }
                }
            }
            let mut aout = vec![0.0f64; m];
            matvec_into(wo, &concat, m, m, &mut aout);
            let x1: Vec<f64> = x.iter().zip(&aout).map(|(a, b)| a + b).collect();

            let (w1, b1, w2, b2) = (p.p(&lr.w1), p.p(&lr.b1), p.p(&lr.w2), p.p(&lr.b2));
            let mut pre = vec![0.0f64; f];
            matvec_into(w1, &x1, f, m, &mut pre);
            for (pr, b) in pre.iter_mut().zip(b1) {
                *pr += b;
            }
            let act: Vec<f64> = pre.iter().map(|pr| pr.max(0.0)).collect();
            let mut fout = vec![0.0f64; m];
            matvec_into(w2, &act, m, f, &mut fout);
            for d in 0..m {
                x[d] = x1[d] + fout[d] + b2[d];
            }
        }

        self.len += 1;
        let vsize = p.cfg.vocab_size;
        let mut logits = vec![0.0f64; vsize];
        matvec_into(p.p(&p.layout.out_w), &x, vsize, m, &mut logits);
        for (l, b) in logits.iter_mut().zip(p.p(&p.layout.out_b)) {
            *l += b;
        }
        logits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Relation;

    fn toy_input(t: usize, vocab: usize) -> NetInput {
        let mut input = NetInput::default();
        for i in 0..t {
            let rels = (0..i)
                .map(|j| {
                    if j + 1 == i {
                        Relation::Parent
                    } else if j % 2 == 0 {
                        Relation::Ancestor
                    } else {
                        Relation::Sibling
                    }
                })
                .collect();
            input.push(i % vocab, i / 2, rels);
        }
        input
    }

    fn randomized(cfg: PolicyConfig, seed: u64) -> PolicyParams {
        let mut p = PolicyParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.theta {
            *w += rng.random_range(-0.05..0.05);
        }
        p
    }

    #[test]
    fn decoder_matches_full_forward() {
        let cfg = PolicyConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            ffn_dim: 24,
            max_seq_len: 64,
            vocab_size: 9,
            rng_seed: 3,
        };
        let params = randomized(cfg, 11);
        let input = toy_input(7, 9);
        let trace = params.forward(&input);
        let mut dec = Decoder::new(&params);
        for i in 0..input.len() {
            let logits = dec.step(input.token_ids[i], input.depths[i], &input.rels_to_query[i]);
            let full = &trace.logits[i * cfg.vocab_size..(i + 1) * cfg.vocab_size];
            for (a, b) in logits.iter().zip(full) {
                assert!((a - b).abs() < 1e-12, "position {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // micro net per the gradient-check protocol: 1 layer, width 8
        let cfg = PolicyConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            max_seq_len: 32,
            vocab_size: 6,
            rng_seed: 5,
        };
        let params = randomized(cfg, 7);
        let input = toy_input(5, 6);
        // objective: sum of log softmax picks across positions
        let targets = [2usize, 0, 4, 1, 3];
        let objective = |p: &PolicyParams| -> f64 {
            let tr = p.forward(&input);
            let v = cfg.vocab_size;
            (0..input.len())
                .map(|i| {
                    let row = &tr.logits[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
                    row[targets[i]] - max - z.ln()
                })
                .sum()
        };
        // analytic gradient via backward
        let trace = params.forward(&input);
        let v = cfg.vocab_size;
        let mut dlogits = vec![0.0f64; input.len() * v];
        for i in 0..input.len() {
            let row = &trace.logits[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for o in 0..v {
                let p = exps[o] / z;
                dlogits[i * v + o] = (if o == targets[i] { 1.0 } else { 0.0 }) - p;
            }
        }
        let mut grad = vec![0.0f64; params.layout.total];
        params.backward(&input, &trace, &dlogits, &mut grad);

        let h = 1e-5;
        let mut checked = 0usize;
        for idx in (0..params.layout.total).step_by(7) {
            let mut plus = params.clone();
            plus.theta[idx] += h;
            let mut minus = params.clone();
            minus.theta[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "param {idx}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = std::env::temp_dir().join("canopy-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.json");
        let cfg = PolicyConfig::micro(7);
        let params = randomized(cfg, 2);
        params.save(&path).unwrap();
        let loaded = PolicyParams::load_compatible(&path, &cfg).unwrap();
        assert_eq!(loaded.theta, params.theta);
        let other = PolicyConfig::micro(9);
        assert!(matches!(
            PolicyParams::load_compatible(&path, &other),
            Err(PolicyError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn zero_tree_bias_ignores_relations() {
        let cfg = PolicyConfig::micro(6);
        let mut params = randomized(cfg, 9);
        // zero the tree bias back out
        for i in params.layout.tree_bias.clone() {
            params.theta[i] = 0.0;
        }
        let a = toy_input(6, 6);
        let mut b = a.clone();
        for row in &mut b.rels_to_query {
            for r in row.iter_mut() {
                *r = Relation::Other;
            }
        }
        let ta = params.forward(&a);
        let tb = params.forward(&b);
        for (x, y) in ta.logits.iter().zip(&tb.logits) {
            assert_eq!(x, y, "zero bias must reduce to plain causal attention");
        }
    }

    #[test]
    fn tree_bias_is_live() {
        let cfg = PolicyConfig::micro(6);
        let mut params = randomized(cfg, 9);
        for (i, slot) in params.layout.tree_bias.clone().enumerate() {
            params.theta[slot] = 0.1 * (i as f64 + 1.0);
        }
        let a = toy_input(6, 6);
        let mut b = a.clone();
        for row in &mut b.rels_to_query {
            for r in row.iter_mut() {
                *r = match *r {
                    Relation::Parent => Relation::Sibling,
                    Relation::Sibling => Relation::Parent,
                    other => other,
                };
            }
        }
        let ta = params.forward(&a);
        let tb = params.forward(&b);
        let diff: f64 = ta
            .logits
            .iter()
            .zip(&tb.logits)
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "permuting relation labels must change outputs");
    }
}
