//! The attachable two-layer head.
//!
//! Layer 1 recomputes causal attention over `[F_i; F_t]` and its text→image
//! slice, averaged over heads and text rows, becomes the grounding map.
//! Layer 2 enhances the residual stream; its last row is the start-of-answer
//! feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LensError, Result};
use crate::layers::{block, BlockWeights};
use crate::numerics::Tensor;
use crate::params::param_tree;
use crate::tape::{Graph, Var};

param_tree! {
    pub struct HeadWeights { ; layer1: BlockWeights, layer2: BlockWeights }
}

impl HeadWeights<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        HeadWeights {
            layer1: BlockWeights::init(rng, dim),
            layer2: BlockWeights::init(rng, dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters {
    pub head_count: usize,
    pub model_dim: usize,
    pub weights: HeadWeights<Tensor>,
}

impl HeadParameters {
    pub fn new(model_dim: usize, head_count: usize, seed: u64) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(LensError::InvalidArgument(format!(
                "model_dim {model_dim} not divisible by head_count {head_count}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(HeadParameters {
            head_count,
            model_dim,
            weights: HeadWeights::init(&mut rng, model_dim),
        })
    }

    /// Both layers reduced to residual identities.
    pub fn zero_update(model_dim: usize, head_count: usize, seed: u64) -> Result<Self> {
        let mut p = Self::new(model_dim, head_count, seed)?;
        p.weights.layer1.make_identity();
        p.weights.layer2.make_identity();
        Ok(p)
    }

    fn layer(&self, index: usize) -> Result<&BlockWeights<Tensor>> {
        match index {
            1 => Ok(&self.weights.layer1),
            2 => Ok(&self.weights.layer2),
            other => Err(LensError::InvalidArgument(format!(
                "layer index {other} not in {{1, 2}}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadInput {
    /// `L_i x d`
    pub image_features: Tensor,
    /// `L_t x d`
    pub text_features: Tensor,
    pub grid: (usize, usize),
}

impl HeadInput {
    pub fn new(image_features: Tensor, text_features: Tensor, grid: (usize, usize)) -> Result<Self> {
        let input = HeadInput {
            image_features: image_features.as_matrix(),
            text_features: text_features.as_matrix(),
            grid,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        let li = self.image_features.rows();
        if li != self.grid.0 * self.grid.1 {
            return Err(LensError::shape(format!(
                "{li} image tokens do not fill a {}x{} grid",
                self.grid.0, self.grid.1
            )));
        }
        if self.image_features.cols() != self.text_features.cols() {
            return Err(LensError::shape("image/text feature widths differ"));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.image_features.rows()
    }

    pub fn text_len(&self) -> usize {
        self.text_features.rows()
    }

    /// `[F_i; F_t]`
    pub fn stacked(&self) -> Tensor {
        let mut data = self.image_features.data().to_vec();
        data.extend_from_slice(self.text_features.data());
        Tensor::matrix(
            self.image_len() + self.text_len(),
            self.image_features.cols(),
            data,
        )
        .expect("validated input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `h x w` text→image grounding map.
    pub grounding: Tensor,
    /// `L x d`
    pub enhanced: Tensor,
    /// `1 x d`, the last row of `enhanced`.
    pub start_feature: Tensor,
}

/// Tape handles for one head pass.
pub struct HeadVars {
    pub attention1: Var,
    /// `1 x L_i`, unreshaped grounding map.
    pub grounding: Var,
    pub enhanced: Var,
    pub image_rows: Var,
    pub start_feature: Var,
}

pub(crate) fn head_graph(
    g: &mut Graph,
    w: &HeadWeights<Var>,
    heads: usize,
    h_in: Var,
    image_len: usize,
    text_len: usize,
) -> HeadVars {
    let (h1, a1) = block(g, h_in, &w.layer1, heads, true);
    let grounding = aggregate_graph(g, a1, image_len, text_len);
    let (h2, _) = block(g, h1, &w.layer2, heads, true);
    HeadVars {
        attention1: a1,
        grounding,
        enhanced: h2,
        image_rows: g.slice_rows(h2, 0, image_len),
        start_feature: g.slice_rows(h2, image_len + text_len - 1, 1),
    }
}

fn aggregate_graph(g: &mut Graph, a: Var, image_len: usize, text_len: usize) -> Var {
    let text_rows = g.slice_rows(a, image_len, text_len);
    let slice = g.slice_cols(text_rows, 0, image_len);
    g.mean_rows(slice)
}

fn check_width(params: &HeadParameters, h_in: &Tensor) -> Result<()> {
    if h_in.cols() != params.model_dim {
        return Err(LensError::shape(format!(
            "features have width {}, head expects {}",
            h_in.cols(),
            params.model_dim
        )));
    }
    Ok(())
}

fn bind(g: &mut Graph, w: &BlockWeights<Tensor>) -> BlockWeights<Var> {
    w.map_named("", &mut |_, t| g.constant(t.clone()))
}

/// One head layer: returns the head-averaged causal attention `L x L` and
/// the block output `L x d`.
pub fn layer_forward(params: &HeadParameters, layer_index: usize, h_in: &Tensor) -> Result<(Tensor, Tensor)> {
    let weights = params.layer(layer_index)?;
    check_width(params, h_in)?;
    let mut g = Graph::new();
    let w = bind(&mut g, weights);
    let x = g.constant(h_in.as_matrix());
    let (out, probs) = block(&mut g, x, &w, params.head_count, true);
    Ok((g.value(probs).clone(), g.value(out).clone()))
}

/// Mean of the text rows' image slices, reshaped to the token grid.
pub fn aggregate_text_to_image(
    attention: &Tensor,
    image_len: usize,
    text_len: usize,
    grid: (usize, usize),
) -> Result<Tensor> {
    let l = image_len + text_len;
    if attention.rows() != l || attention.cols() != l {
        return Err(LensError::shape(format!(
            "attention {:?} is not {l}x{l}",
            attention.dims()
        )));
    }
    if grid.0 * grid.1 != image_len || text_len == 0 {
        return Err(LensError::shape("grid does not match image token count"));
    }
    let mut g = Graph::new();
    let a = g.constant(attention.clone());
    let agg = aggregate_graph(&mut g, a, image_len, text_len);
    g.value(agg).reshape(&[grid.0, grid.1])
}

pub fn head_forward(params: &HeadParameters, input: &HeadInput) -> Result<HeadOutput> {
    input.validate()?;
    let h_in = input.stacked();
    check_width(params, &h_in)?;
    let mut g = Graph::new();
    let w = params.weights.map_named("", &mut |_, t| g.constant(t.clone()));
    let x = g.constant(h_in);
    let vars = head_graph(
        &mut g,
        &w,
        params.head_count,
        x,
        input.image_len(),
        input.text_len(),
    );
    Ok(HeadOutput {
        grounding: g.value(vars.grounding).reshape(&[input.grid.0, input.grid.1])?,
        enhanced: g.value(vars.enhanced).clone(),
        start_feature: g.value(vars.start_feature).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{causal_mask, matmul, softmax_masked};
    use rand::Rng;

    fn random_input(seed: u64, grid: (usize, usize), text_len: usize, dim: usize) -> HeadInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadInput::new(
            Tensor::randn(&[grid.0 * grid.1, dim], 1.0, &mut rng),
            Tensor::randn(&[text_len, dim], 1.0, &mut rng),
            grid,
        )
        .unwrap()
    }

    #[test]
    fn layer_attention_is_causal_and_normalized() {
        let params = HeadParameters::new(16, 4, 1).unwrap();
        let input = random_input(2, (4, 4), 3, 16);
        for layer in [1, 2] {
            let (a, h) = layer_forward(&params, layer, &input.stacked()).unwrap();
            assert_eq!(h.dims(), &[19, 16]);
            for i in 0..19 {
                for j in i + 1..19 {
                    assert_eq!(a.at(i, j), 0.0);
                }
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_head_matches_masked_softmax_kernel() {
        // one head, so the averaged probabilities are the plain softmax
        let params = HeadParameters::new(8, 1, 3).unwrap();
        let input = random_input(4, (2, 2), 2, 8);
        let x = input.stacked();
        let (a, _) = layer_forward(&params, 1, &x).unwrap();

        let w = &params.weights.layer1;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gain = g.constant(w.norm1_gain.clone());
        let off = g.constant(w.norm1_offset.clone());
        let n = g.layer_norm(xv, gain, off);
        let n = g.value(n).clone();
        let q = matmul(&n, &w.attn.wq);
        let k = matmul(&n, &w.attn.wk);
        let logits = crate::numerics::matmul_nt(&q, &k).scaled(1.0 / 8f64.sqrt());
        let expect = softmax_masked(&logits, &causal_mask(6)).unwrap();
        for (p, e) in a.data().iter().zip(expect.data()) {
            assert!((p - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_update_layer_is_identity() {
        let params = HeadParameters::zero_update(16, 4, 5).unwrap();
        let input = random_input(6, (3, 3), 2, 16);
        let x = input.stacked();
        let (_, h) = layer_forward(&params, 1, &x).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn zero_update_head_passes_features_through() {
        let params = HeadParameters::zero_update(16, 4, 5).unwrap();
        let input = random_input(7, (3, 3), 2, 16);
        let out = head_forward(&params, &input).unwrap();
        assert_eq!(out.enhanced, input.stacked());
        assert_eq!(out.start_feature.data(), input.text_features.row(1));
    }

    #[test]
    fn aggregate_single_and_identical_rows() {
        let li = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::from_fn(5, 5, |_, _| rng.gen::<f64>());
        let agg = aggregate_text_to_image(&a, li, 1, (2, 2)).unwrap();
        assert_eq!(agg.data(), &a.row(4)[..4]);

        let row: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
        let a = Tensor::from_fn(6, 6, |r, c| if r >= 4 { row[c] } else { 0.0 });
        let agg = aggregate_text_to_image(&a, li, 2, (2, 2)).unwrap();
        for (x, y) in agg.data().iter().zip(&row[..4]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        let (li, lt) = (6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::from_fn(li + lt, li + lt, |_, _| rng.gen::<f64>());
        let agg = aggregate_text_to_image(&a, li, lt, (2, 3)).unwrap();
        for q in 0..li {
            let mut s = 0.0;
            for k in li..li + lt {
                s += a.at(k, q);
            }
            assert!((agg.data()[q] - s / lt as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn head_output_contract() {
        let params = HeadParameters::new(16, 4, 10).unwrap();
        let input = random_input(11, (4, 5), 2, 16);
        let out = head_forward(&params, &input).unwrap();
        assert_eq!(out.grounding.dims(), &[4, 5]);
        assert_eq!(out.enhanced.dims(), &[22, 16]);
        assert_eq!(out.start_feature.dims(), &[1, 16]);
        assert_eq!(out.start_feature.data(), out.enhanced.row(21));
        assert!(out.grounding.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = head_forward(&params, &input).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn shape_errors() {
        let params = HeadParameters::new(16, 4, 1).unwrap();
        assert!(layer_forward(&params, 3, &Tensor::zeros(&[3, 16])).is_err());
        assert!(layer_forward(&params, 1, &Tensor::zeros(&[3, 8])).is_err());
        assert!(HeadInput::new(Tensor::zeros(&[5, 4]), Tensor::zeros(&[1, 4]), (2, 2)).is_err());
        assert!(HeadParameters::new(10, 4, 1).is_err());
    }
}
