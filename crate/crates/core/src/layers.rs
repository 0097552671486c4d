//! Transformer building blocks expressed on the tape, shared by the head,
//! the descriptor model and the mask decoder.

use rand::Rng;

use crate::numerics::Tensor;
use crate::params::{ones_row, param_tree, proj, zeros_row};
use crate::tape::{Graph, Var};

param_tree! {
    /// Query/key/value/output projections, each `d x d`, no biases.
    pub struct AttentionWeights { wq, wk, wv, wo }
}

param_tree! {
    /// Pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))` with a
    /// `d -> 4d -> d` GELU feed-forward.
    pub struct BlockWeights {
        norm1_gain, norm1_offset, norm2_gain, norm2_offset,
        ff_in, ff_in_bias, ff_out, ff_out_bias;
        attn: AttentionWeights,
    }
}

param_tree! {
    /// Two-layer GELU MLP with biases.
    pub struct MlpWeights { w1, b1, w2, b2 }
}

param_tree! {
    pub struct NormWeights { gain, offset }
}

impl AttentionWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        AttentionWeights {
            wq: proj(rng, dim, dim),
            wk: proj(rng, dim, dim),
            wv: proj(rng, dim, dim),
            wo: proj(rng, dim, dim),
        }
    }
}

impl BlockWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        let hidden = 4 * dim;
        BlockWeights {
            norm1_gain: ones_row(dim),
            norm1_offset: zeros_row(dim),
            norm2_gain: ones_row(dim),
            norm2_offset: zeros_row(dim),
            ff_in: proj(rng, dim, hidden),
            ff_in_bias: zeros_row(hidden),
            ff_out: proj(rng, hidden, dim),
            ff_out_bias: zeros_row(dim),
            attn: AttentionWeights::init(rng, dim),
        }
    }

    /// Zeroes the output projection and the second feed-forward layer so
    /// the block reduces to the identity on its residual stream.
    pub fn make_identity(&mut self) {
        self.attn.wo = self.attn.wo.map(|_| 0.0);
        self.ff_out = self.ff_out.map(|_| 0.0);
        self.ff_out_bias = self.ff_out_bias.map(|_| 0.0);
    }
}

impl MlpWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        MlpWeights {
            w1: proj(rng, input, hidden),
            b1: zeros_row(hidden),
            w2: proj(rng, hidden, output),
            b2: zeros_row(output),
        }
    }
}

impl NormWeights<Tensor> {
    pub fn init(dim: usize) -> Self {
        NormWeights {
            gain: ones_row(dim),
            offset: zeros_row(dim),
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the projected output and
/// the attention probabilities averaged over heads.
pub fn attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionWeights<Var>,
    heads: usize,
    causal: bool,
) -> (Var, Var) {
    let q = g.matmul(queries, w.wq);
    let k = g.matmul(keys, w.wk);
    let v = g.matmul(values, w.wv);
    let dim = g.value(q).cols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut prob_sum: Option<Var> = None;
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let logits = g.matmul_nt(qh, kh);
        let logits = g.scale(logits, scale);
        let probs = g.softmax(logits, causal);
        outputs.push(g.matmul(probs, vh));
        prob_sum = Some(match prob_sum {
            None => probs,
            Some(acc) => g.add(acc, probs),
        });
    }
    let avg = g.scale(prob_sum.expect("heads >= 1"), 1.0 / heads as f64);
    let merged = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)
    };
    (g.matmul(merged, w.wo), avg)
}

pub fn mlp(g: &mut Graph, x: Var, w: &MlpWeights<Var>) -> Var {
    let h = g.matmul(x, w.w1);
    let h = g.add_row(h, w.b1);
    let h = g.gelu(h);
    let o = g.matmul(h, w.w2);
    g.add_row(o, w.b2)
}

pub fn norm(g: &mut Graph, x: Var, w: &NormWeights<Var>) -> Var {
    g.layer_norm(x, w.gain, w.offset)
}

/// One pre-norm transformer block over `x`; returns `(output, avg_probs)`.
pub fn block(g: &mut Graph, x: Var, w: &BlockWeights<Var>, heads: usize, causal: bool) -> (Var, Var) {
    let n1 = g.layer_norm(x, w.norm1_gain, w.norm1_offset);
    let (attn_out, probs) = attention(g, n1, n1, n1, &w.attn, heads, causal);
    let x1 = g.add(x, attn_out);
    let n2 = g.layer_norm(x1, w.norm2_gain, w.norm2_offset);
    let h = g.matmul(n2, w.ff_in);
    let h = g.add_row(h, w.ff_in_bias);
    let h = g.gelu(h);
    let h = g.matmul(h, w.ff_out);
    let h = g.add_row(h, w.ff_out_bias);
    (g.add(x1, h), probs)
}
