//! Keypoint descriptions.
//!
//! Each keypoint's neighborhood is read by a single-query cross-attention
//! whose query is the start-of-answer feature. The resulting local
//! descriptors are then refined together with that feature in one
//! non-causal self-attention block and projected to the prompt width.

use rand_chacha::ChaCha8Rng;

use crate::error::{LensError, Result};
use crate::layers::{block, AttentionWeights, BlockWeights};
use crate::numerics::Tensor;
use crate::params::{param_tree, proj, zeros_row};
use crate::tape::{Graph, Var};

param_tree! {
    pub struct DescriptorWeights {
        proj_out, proj_out_bias;
        cross: AttentionWeights,
        refine: BlockWeights,
    }
}

impl DescriptorWeights<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, model_dim: usize, prompt_dim: usize) -> Self {
        DescriptorWeights {
            cross: AttentionWeights::init(rng, model_dim),
            refine: BlockWeights::init(rng, model_dim),
            proj_out: proj(rng, model_dim, prompt_dim),
            proj_out_bias: zeros_row(prompt_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorParams {
    pub head_count: usize,
    pub weights: DescriptorWeights<Tensor>,
}

impl DescriptorParams {
    pub fn new(model_dim: usize, prompt_dim: usize, head_count: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DescriptorParams {
            head_count,
            weights: DescriptorWeights::init(&mut rng, model_dim, prompt_dim),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.weights.cross.wq.rows()
    }

    pub fn prompt_dim(&self) -> usize {
        self.weights.proj_out.cols()
    }
}

/// `(m + 1) x d_s`; row 0 is the global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub rows: Tensor,
}

impl DescriptorSet {
    pub fn keypoint_count(&self) -> usize {
        self.rows.rows() - 1
    }
}

/// Cross-attention of the start feature against each keypoint's
/// neighborhood. `neighborhoods` stacks all `m · n` samples keypoint-major.
/// Returns one `1 x d` descriptor per keypoint.
pub(crate) fn describe_graph(
    g: &mut Graph,
    w: &AttentionWeights<Var>,
    start: Var,
    neighborhoods: Var,
    per_point: usize,
    count: usize,
) -> Vec<Var> {
    if count == 0 {
        return Vec::new();
    }
    let q = g.matmul(start, w.wq);
    let k = g.matmul(neighborhoods, w.wk);
    let v = g.matmul(neighborhoods, w.wv);
    let scale = 1.0 / (g.value(q).cols() as f64).sqrt();
    (0..count)
        .map(|i| {
            let ki = g.slice_rows(k, i * per_point, per_point);
            let vi = g.slice_rows(v, i * per_point, per_point);
            let logits = g.matmul_nt(q, ki);
            let logits = g.scale(logits, scale);
            let probs = g.softmax(logits, false);
            let ctx = g.matmul(probs, vi);
            let out = g.matmul(ctx, w.wo);
            g.add(out, q)
        })
        .collect()
}

pub(crate) fn refine_graph(
    g: &mut Graph,
    w: &DescriptorWeights<Var>,
    heads: usize,
    start: Var,
    locals: &[Var],
) -> Var {
    let mut rows = Vec::with_capacity(locals.len() + 1);
    rows.push(start);
    rows.extend_from_slice(locals);
    let x = if rows.len() == 1 { start } else { g.concat_rows(&rows) };
    let (y, _) = block(g, x, &w.refine, heads, false);
    let p = g.matmul(y, w.proj_out);
    g.add_row(p, w.proj_out_bias)
}

fn bind_const(g: &mut Graph, w: &DescriptorWeights<Tensor>) -> DescriptorWeights<Var> {
    w.map_named("", &mut |_, t| g.constant(t.clone()))
}

fn check_vec(v: &Tensor, dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(LensError::shape(format!("{what} has {} entries, expected {dim}", v.len())));
    }
    Ok(())
}

/// One `1 x d` descriptor per keypoint neighborhood (`window² x d` each).
pub fn describe_keypoints(
    params: &DescriptorParams,
    start_feature: &Tensor,
    neighborhoods: &[Tensor],
) -> Result<Vec<Tensor>> {
    let d = params.model_dim();
    check_vec(start_feature, d, "start feature")?;
    if neighborhoods.is_empty() {
        return Ok(Vec::new());
    }
    let per_point = neighborhoods[0].rows();
    let mut stacked = Vec::new();
    for n in neighborhoods {
        if n.rows() != per_point || n.cols() != d {
            return Err(LensError::shape("neighborhoods must share shape window² x d"));
        }
        stacked.extend_from_slice(n.data());
    }
    let mut g = Graph::new();
    let w = bind_const(&mut g, &params.weights);
    let start = g.constant(Tensor::row_vector(start_feature.data().to_vec()));
    let nb = g.constant(Tensor::matrix(per_point * neighborhoods.len(), d, stacked)?);
    let out = describe_graph(&mut g, &w.cross, start, nb, per_point, neighborhoods.len());
    Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Self-attention refinement over `[f_s; d_1..d_m]` followed by the
/// projection to `d_s`. With `use_locals == false` only the global token
/// enters and the set has a single row.
pub fn global_refine(
    params: &DescriptorParams,
    start_feature: &Tensor,
    locals: &[Tensor],
    use_locals: bool,
) -> Result<DescriptorSet> {
    let d = params.model_dim();
    check_vec(start_feature, d, "start feature")?;
    let mut g = Graph::new();
    let w = bind_const(&mut g, &params.weights);
    let start = g.constant(Tensor::row_vector(start_feature.data().to_vec()));
    let mut local_vars = Vec::new();
    if use_locals {
        for l in locals {
            check_vec(l, d, "local descriptor")?;
            local_vars.push(g.constant(Tensor::row_vector(l.data().to_vec())));
        }
    }
    let out = refine_graph(&mut g, &w, params.head_count, start, &local_vars);
    Ok(DescriptorSet {
        rows: g.value(out).clone(),
    })
}
