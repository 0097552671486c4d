//! Point-prompt encoding and a compact two-way mask decoder.
//!
//! Keypoints go through a random Fourier position encoder; the global
//! descriptor gets a learnable CLS position instead. The summed prompt
//! tokens, plus an internal mask token, exchange information with the image
//! embedding through two two-way attention blocks. The mask token is then
//! projected and dotted with upsampled per-pixel embeddings.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LensError, Result};
use crate::keypoint::KeypointSet;
use crate::layers::{attention, mlp, norm, AttentionWeights, MlpWeights, NormWeights};
use crate::numerics::{bilinear_taps, grid_dims, Tensor};
use crate::params::{param_tree, proj, zeros_row};
use crate::tape::{GatherTaps, Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PositionEncoder {
    /// `2 x (d_s / 2)` Gaussian frequencies.
    pub frequencies: Tensor,
    pub scale: f64,
}

impl PositionEncoder {
    pub fn new(prompt_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PositionEncoder {
            frequencies: Tensor::randn(&[2, prompt_dim / 2], 1.0, &mut rng),
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.cols()
    }

    /// `[sin(2π Bᵀc), cos(2π Bᵀc)]` for `c` in the unit square.
    pub fn encode(&self, cx: f64, cy: f64) -> Vec<f64> {
        let half = self.frequencies.cols();
        let mut out = vec![0.0; 2 * half];
        for k in 0..half {
            let arg = 2.0
                * PI
                * self.scale
                * (self.frequencies.at(0, k) * cx + self.frequencies.at(1, k) * cy);
            out[k] = arg.sin();
            out[half + k] = arg.cos();
        }
        out
    }

    /// Encodings of every cell of an `h x w` grid, row-major, using the same
    /// `x / (w - 1)` normalization as keypoints.
    pub fn dense(&self, grid: (usize, usize)) -> Tensor {
        let (h, w) = grid;
        let mut data = Vec::with_capacity(h * w * self.dim());
        for r in 0..h {
            for c in 0..w {
                data.extend(self.encode(unit(c as f64, w), unit(r as f64, h)));
            }
        }
        Tensor::matrix(h * w, self.dim(), data).expect("non-empty grid")
    }
}

fn unit(v: f64, extent: usize) -> f64 {
    if extent < 2 {
        0.0
    } else {
        (v / (extent as f64 - 1.0)).clamp(0.0, 1.0)
    }
}

/// Position rows for the prompt bundle: `cls_position` first, then one
/// Fourier encoding per keypoint.
pub fn encode_positions(
    encoder: &PositionEncoder,
    points: &KeypointSet,
    grid: (usize, usize),
    cls_position: &Tensor,
) -> Result<Tensor> {
    if cls_position.len() != encoder.dim() {
        return Err(LensError::shape("cls_position width differs from encoder"));
    }
    let (h, w) = grid;
    let mut data = cls_position.data().to_vec();
    for p in &points.points {
        data.extend(encoder.encode(unit(p.x, w), unit(p.y, h)));
    }
    Tensor::matrix(points.len() + 1, encoder.dim(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    StubEncoder,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    /// `h_e x w_e x d_s`
    pub field: Tensor,
    pub source: EmbeddingSource,
}

impl ImageEmbedding {
    pub fn from_field(field: Tensor, source: EmbeddingSource) -> Result<Self> {
        if field.rank() != 3 {
            return Err(LensError::shape("image embedding must be h x w x d"));
        }
        if !field.is_finite() {
            return Err(LensError::InvalidArgument("non-finite image embedding".into()));
        }
        Ok(ImageEmbedding { field, source })
    }

    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = grid_dims(&self.field);
        (h, w)
    }

    pub fn dim(&self) -> usize {
        self.field.dims()[2]
    }

    /// `(h_e · w_e) x d_s` token view.
    pub fn tokens(&self) -> Tensor {
        self.field.as_matrix()
    }
}

/// Fixed random linear patchifier standing in for a frozen image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StubImageEncoder {
    pub patch: usize,
    pub channels: usize,
    /// `(patch² · channels) x d_s`
    pub projection: Tensor,
    /// `1 x d_s`, added to every patch.
    pub bias: Tensor,
}

impl StubImageEncoder {
    pub fn new(patch: usize, channels: usize, prompt_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = patch * patch * channels;
        StubImageEncoder {
            patch,
            channels,
            projection: Tensor::randn(&[fan_in, prompt_dim], 1.0 / (fan_in as f64).sqrt(), &mut rng),
            bias: Tensor::randn(&[1, prompt_dim], 1.0, &mut rng),
        }
    }

    /// Encodes an `H x W x C` image (or `H x W` when `C = 1`).
    pub fn encode(&self, image: &Tensor) -> Result<ImageEmbedding> {
        let (h, w, c) = grid_dims(image);
        if c != self.channels || h % self.patch != 0 || w % self.patch != 0 {
            return Err(LensError::shape(format!(
                "image {:?} incompatible with {}x{} patches of {} channels",
                image.dims(),
                self.patch,
                self.patch,
                self.channels
            )));
        }
        let (he, we) = (h / self.patch, w / self.patch);
        let d = self.projection.cols();
        let mut out = vec![0.0; he * we * d];
        for pr in 0..he {
            for pc in 0..we {
                let cell = &mut out[(pr * we + pc) * d..(pr * we + pc + 1) * d];
                cell.copy_from_slice(self.bias.data());
                let mut k = 0;
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        let pix = (pr * self.patch + dy) * w + pc * self.patch + dx;
                        for ch in 0..c {
                            let v = image.data()[pix * c + ch];
                            if v != 0.0 {
                                for (o, p) in cell.iter_mut().zip(self.projection.row(k)) {
                                    *o += v * p;
                                }
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
        ImageEmbedding::from_field(
            Tensor::new(vec![he, we, d], out)?,
            EmbeddingSource::StubEncoder,
        )
    }
}

param_tree! {
    pub struct TwoWayWeights {
        ;
        self_attn: AttentionWeights,
        norm1: NormWeights,
        cross_token_to_image: AttentionWeights,
        norm2: NormWeights,
        mlp: MlpWeights,
        norm3: NormWeights,
        cross_image_to_token: AttentionWeights,
        norm4: NormWeights,
    }
}

param_tree! {
    pub struct DecoderWeights {
        mask_token, hypernet, pixel_proj, pixel_bias;
        block1: TwoWayWeights,
        block2: TwoWayWeights,
        final_attn: AttentionWeights,
        final_norm: NormWeights,
    }
}

impl TwoWayWeights<Tensor> {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        TwoWayWeights {
            self_attn: AttentionWeights::init(rng, dim),
            norm1: NormWeights::init(dim),
            cross_token_to_image: AttentionWeights::init(rng, dim),
            norm2: NormWeights::init(dim),
            mlp: MlpWeights::init(rng, dim, 4 * dim, dim),
            norm3: NormWeights::init(dim),
            cross_image_to_token: AttentionWeights::init(rng, dim),
            norm4: NormWeights::init(dim),
        }
    }
}

impl DecoderWeights<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        DecoderWeights {
            mask_token: proj(rng, 1, dim),
            hypernet: Tensor::randn(&[dim, dim], 1.0 / dim as f64, rng),
            pixel_proj: Tensor::randn(&[dim, dim], 1.0 / (dim as f64).sqrt(), rng),
            pixel_bias: zeros_row(dim),
            block1: TwoWayWeights::init(rng, dim),
            block2: TwoWayWeights::init(rng, dim),
            final_attn: AttentionWeights::init(rng, dim),
            final_norm: NormWeights::init(dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub head_count: usize,
    pub upsample: usize,
    pub weights: DecoderWeights<Tensor>,
}

impl DecoderParams {
    pub fn new(prompt_dim: usize, head_count: usize, upsample: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderParams {
            head_count,
            upsample,
            weights: DecoderWeights::init(&mut rng, prompt_dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.mask_token.cols()
    }
}

/// `D ⊕ P_pos`, one row per descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub tokens: Tensor,
}

impl PromptBundle {
    pub fn new(descriptors: &Tensor, positions: &Tensor) -> Result<Self> {
        if !descriptors.same_shape(positions) {
            return Err(LensError::shape(format!(
                "descriptors {:?} vs positions {:?}",
                descriptors.dims(),
                positions.dims()
            )));
        }
        let mut tokens = descriptors.as_matrix();
        tokens.add_assign(positions);
        Ok(PromptBundle { tokens })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    /// `H_out x W_out` pre-sigmoid mask.
    pub logits: Tensor,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Tensor {
        self.logits.map(crate::numerics::sigmoid)
    }

    pub fn binary(&self) -> Tensor {
        self.logits.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }
}

/// Half-pixel bilinear upsampling taps from `grid` to `factor · grid`.
pub fn upsample_taps(grid: (usize, usize), factor: usize) -> GatherTaps {
    let (h, w) = grid;
    let (ho, wo) = (h * factor, w * factor);
    let f = factor as f64;
    let mut taps = Vec::with_capacity(ho * wo);
    for i in 0..ho {
        for j in 0..wo {
            let y = (i as f64 + 0.5) / f - 0.5;
            let x = (j as f64 + 0.5) / f - 0.5;
            let t = bilinear_taps(h, w, x, y);
            taps.push(t.iter().copied().filter(|&(_, wt)| wt != 0.0).collect());
        }
    }
    taps
}

fn two_way_block(
    g: &mut Graph,
    w: &TwoWayWeights<Var>,
    heads: usize,
    queries: Var,
    keys: Var,
    query_pe: Var,
    key_pe: Var,
) -> (Var, Var) {
    let q = g.add(queries, query_pe);
    let (a, _) = attention(g, q, q, queries, &w.self_attn, heads, false);
    let s = g.add(queries, a);
    let queries = norm(g, s, &w.norm1);

    let q = g.add(queries, query_pe);
    let k = g.add(keys, key_pe);
    let (a, _) = attention(g, q, k, keys, &w.cross_token_to_image, heads, false);
    let s = g.add(queries, a);
    let queries = norm(g, s, &w.norm2);

    let m = mlp(g, queries, &w.mlp);
    let s = g.add(queries, m);
    let queries = norm(g, s, &w.norm3);

    let q = g.add(queries, query_pe);
    let k = g.add(keys, key_pe);
    let (a, _) = attention(g, k, q, queries, &w.cross_image_to_token, heads, false);
    let s = g.add(keys, a);
    let keys = norm(g, s, &w.norm4);
    (queries, keys)
}

/// Decoder forward on the tape. `prompts` is `(m + 1) x d_s`, `image` and
/// `image_pe` are `(h_e · w_e) x d_s`. Returns `(H_out · W_out) x 1` logits.
pub(crate) fn decode_graph(
    g: &mut Graph,
    w: &DecoderWeights<Var>,
    heads: usize,
    prompts: Var,
    image: Var,
    image_pe: Var,
    taps: GatherTaps,
) -> Var {
    let tokens = g.concat_rows(&[w.mask_token, prompts]);
    let (q, k) = two_way_block(g, &w.block1, heads, tokens, image, tokens, image_pe);
    let (q, k) = two_way_block(g, &w.block2, heads, q, k, tokens, image_pe);
    let qa = g.add(q, tokens);
    let ka = g.add(k, image_pe);
    let (a, _) = attention(g, qa, ka, k, &w.final_attn, heads, false);
    let s = g.add(q, a);
    let q = norm(g, s, &w.final_norm);

    let mask_out = g.slice_rows(q, 0, 1);
    let hyper = g.matmul(mask_out, w.hypernet);
    let up = g.gather(k, taps);
    let pix = g.matmul(up, w.pixel_proj);
    let pix = g.add_row(pix, w.pixel_bias);
    let pix = g.gelu(pix);
    g.matmul_nt(pix, hyper)
}

pub fn decode_mask(
    params: &DecoderParams,
    encoder: &PositionEncoder,
    bundle: &PromptBundle,
    image: &ImageEmbedding,
) -> Result<MaskLogits> {
    let d = params.dim();
    if bundle.tokens.rows() == 0 || bundle.tokens.cols() != d || image.dim() != d || encoder.dim() != d {
        return Err(LensError::shape(format!(
            "decoder width {d}, prompts {:?}, image {:?}, encoder {}",
            bundle.tokens.dims(),
            image.field.dims(),
            encoder.dim()
        )));
    }
    let grid = image.grid();
    let mut g = Graph::new();
    let w = params.weights.map_named("", &mut |_, t| g.constant(t.clone()));
    let prompts = g.constant(bundle.tokens.clone());
    let img = g.constant(image.tokens());
    let pe = g.constant(encoder.dense(grid));
    let out = decode_graph(
        &mut g,
        &w,
        params.head_count,
        prompts,
        img,
        pe,
        upsample_taps(grid, params.upsample),
    );
    Ok(MaskLogits {
        logits: g
            .value(out)
            .reshape(&[grid.0 * params.upsample, grid.1 * params.upsample])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoint::Keypoint;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint { x, y, score: 1.0, cell: (y as usize, x as usize) }
    }

    fn setup() -> (DecoderParams, PositionEncoder, ImageEmbedding) {
        let params = DecoderParams::new(8, 2, 4, 1);
        let enc = PositionEncoder::new(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = Tensor::randn(&[3, 4, 8], 1.0, &mut rng);
        (params, enc, ImageEmbedding::from_field(field, EmbeddingSource::File).unwrap())
    }

    #[test]
    fn positions_contract() {
        let enc = PositionEncoder::new(8, 5);
        let cls = Tensor::row_vector(vec![0.5; 8]);
        let pts = KeypointSet { points: vec![kp(1.5, 2.0), kp(1.5, 2.0), kp(-1.0, 9.0)] };
        let pos = encode_positions(&enc, &pts, (8, 8), &cls).unwrap();
        assert_eq!(pos.dims(), &[4, 8]);
        assert_eq!(pos.row(0), cls.data());
        assert_eq!(pos.row(1), pos.row(2));
        for r in 1..4 {
            for k in 0..4 {
                let s = pos.at(r, k);
                let c = pos.at(r, 4 + k);
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
            assert!(pos.row(r).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn output_shape_and_range() {
        let (params, enc, image) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bundle = PromptBundle { tokens: Tensor::randn(&[3, 8], 1.0, &mut rng) };
        let m = decode_mask(&params, &enc, &bundle, &image).unwrap();
        assert_eq!(m.logits.dims(), &[12, 16]);
        assert!(m.probabilities().data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn doubling_hypernet_doubles_logits() {
        let (mut params, enc, image) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bundle = PromptBundle { tokens: Tensor::randn(&[2, 8], 1.0, &mut rng) };
        let base = decode_mask(&params, &enc, &bundle, &image).unwrap();
        params.weights.hypernet = params.weights.hypernet.scaled(2.0);
        let doubled = decode_mask(&params, &enc, &bundle, &image).unwrap();
        for (a, b) in base.logits.data().iter().zip(doubled.logits.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let (params, enc, image) = setup();
        let bundle = PromptBundle { tokens: Tensor::zeros(&[2, 6]) };
        assert!(decode_mask(&params, &enc, &bundle, &image).is_err());
    }

    #[test]
    fn upsample_preserves_constants() {
        let taps = upsample_taps((3, 5), 4);
        assert_eq!(taps.len(), 12 * 20);
        for t in &taps {
            let s: f64 = t.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stub_encoder_shapes() {
        let enc = StubImageEncoder::new(4, 2, 8, 1);
        let img = Tensor::zeros(&[16, 12, 2]);
        let e = enc.encode(&img).unwrap();
        assert_eq!(e.field.dims(), &[4, 3, 8]);
        assert!(enc.encode(&Tensor::zeros(&[15, 12, 2])).is_err());
    }
}
