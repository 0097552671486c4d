//! The assembled pipeline: head → keypoints → descriptors → prompts →
//! mask decoder, built on one tape so training and inference share code.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decoder::{
    decode_graph, upsample_taps, DecoderParams, DecoderWeights, ImageEmbedding, MaskLogits,
    PositionEncoder,
};
use crate::descriptor::{describe_graph, refine_graph, DescriptorParams, DescriptorWeights};
use crate::error::{LensError, Result};
use crate::keypoint::{neighborhood_taps, nms_extract, subpixel_refine, KeypointSet};
use crate::objectives::{downsample_nearest, LossBreakdown};
use crate::params::{param_tree, proj};
use crate::seg_head::{head_graph, HeadInput, HeadParameters, HeadWeights};
use crate::tape::{Graph, Var};
use crate::numerics::Tensor;

param_tree! {
    pub struct LensWeights {
        cls_position;
        head: HeadWeights,
        descriptor: DescriptorWeights,
        decoder: DecoderWeights,
    }
}

/// Seed offsets so each component draws from its own stream.
const HEAD_STREAM: u64 = 0x1001;
const DESCRIPTOR_STREAM: u64 = 0x2002;
const DECODER_STREAM: u64 = 0x3003;
const POSITION_STREAM: u64 = 0x4004;

#[derive(Clone, Debug, PartialEq)]
pub struct LensModel {
    pub config: RunConfig,
    pub weights: LensWeights<Tensor>,
    pub position_encoder: PositionEncoder,
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: HeadInput,
    pub image: ImageEmbedding,
    /// Binary ground truth at decoder output resolution.
    pub mask: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// `false` takes the global-description-only branch.
    pub use_locals: bool,
    /// Reuse these keypoints instead of extracting them.
    pub keypoints: Option<KeypointSet>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        ForwardOptions {
            use_locals: true,
            keypoints: None,
        }
    }
}

/// Handles into one forward tape.
pub struct PipelineVars {
    pub weights: LensWeights<Var>,
    pub grounding: Var,
    pub logits: Var,
    pub keypoints: KeypointSet,
}

pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `h x w` grounding map.
    pub grounding: Tensor,
    pub keypoints: KeypointSet,
    pub mask: MaskLogits,
}

impl LensModel {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let rng = |stream: u64| ChaCha8Rng::seed_from_u64(seed ^ stream);
        let (d, ds) = (config.model_dim, config.prompt_dim);
        let weights = LensWeights {
            cls_position: proj(&mut rng(0), 1, ds),
            head: HeadWeights::init(&mut rng(HEAD_STREAM), d),
            descriptor: DescriptorWeights::init(&mut rng(DESCRIPTOR_STREAM), d, ds),
            decoder: DecoderWeights::init(&mut rng(DECODER_STREAM), ds),
        };
        Ok(LensModel {
            position_encoder: PositionEncoder::new(ds, seed ^ POSITION_STREAM),
            config,
            weights,
        })
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.decoder_trainable || !name.starts_with("decoder.")
    }

    pub fn head_params(&self) -> HeadParameters {
        HeadParameters {
            head_count: self.config.head_count,
            model_dim: self.config.model_dim,
            weights: self.weights.head.clone(),
        }
    }

    pub fn descriptor_params(&self) -> DescriptorParams {
        DescriptorParams {
            head_count: self.config.head_count,
            weights: self.weights.descriptor.clone(),
        }
    }

    pub fn decoder_params(&self) -> DecoderParams {
        DecoderParams {
            head_count: self.config.head_count,
            upsample: self.config.upsample,
            weights: self.weights.decoder.clone(),
        }
    }

    fn check_sample(&self, input: &HeadInput, image: &ImageEmbedding) -> Result<()> {
        input.validate()?;
        let c = &self.config;
        if input.grid != c.grid || input.image_features.cols() != c.model_dim {
            return Err(LensError::shape(format!(
                "input grid {:?} width {} vs model grid {:?} width {}",
                input.grid,
                input.image_features.cols(),
                c.grid,
                c.model_dim
            )));
        }
        if image.dim() != c.prompt_dim {
            return Err(LensError::shape("image embedding width differs from prompt width"));
        }
        Ok(())
    }

    /// Builds the forward pipeline on `g`. Trainable weights become
    /// differentiable leaves when `differentiable` is set.
    pub fn build(
        &self,
        g: &mut Graph,
        input: &HeadInput,
        image: &ImageEmbedding,
        opts: &ForwardOptions,
        differentiable: bool,
    ) -> Result<PipelineVars> {
        self.check_sample(input, image)?;
        let c = &self.config;
        let weights = self.weights.map_named("", &mut |name, t| {
            if differentiable && self.is_trainable(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        });
        let (li, lt) = (input.image_len(), input.text_len());
        let x = g.constant(input.stacked());
        let head = head_graph(g, &weights.head, c.head_count, x, li, lt);

        let keypoints = match &opts.keypoints {
            Some(k) => k.clone(),
            None => {
                let heat = g.value(head.grounding).reshape(&[c.grid.0, c.grid.1])?;
                let ints = nms_extract(&heat, c.nms_radius, c.max_keypoints);
                subpixel_refine(&heat, &ints, c.subpixel_eps)?
            }
        };

        let locals = if opts.use_locals && !keypoints.is_empty() {
            let taps = neighborhood_taps(c.grid, &keypoints, c.window);
            let nb = g.gather(head.image_rows, taps);
            describe_graph(
                g,
                &weights.descriptor.cross,
                head.start_feature,
                nb,
                c.window * c.window,
                keypoints.len(),
            )
        } else {
            Vec::new()
        };
        let descriptors = refine_graph(g, &weights.descriptor, c.head_count, head.start_feature, &locals);

        let positions = if locals.is_empty() {
            weights.cls_position
        } else {
            let mut rows = Vec::with_capacity(keypoints.len() * c.prompt_dim);
            for p in &keypoints.points {
                rows.extend(self.position_encoder.encode(
                    unit(p.x, c.grid.1),
                    unit(p.y, c.grid.0),
                ));
            }
            let pe = g.constant(Tensor::matrix(keypoints.len(), c.prompt_dim, rows)?);
            g.concat_rows(&[weights.cls_position, pe])
        };
        let prompts = g.add(descriptors, positions);

        let grid = image.grid();
        let img = g.constant(image.tokens());
        let image_pe = g.constant(self.position_encoder.dense(grid));
        let logits = decode_graph(
            g,
            &weights.decoder,
            c.head_count,
            prompts,
            img,
            image_pe,
            upsample_taps(grid, c.upsample),
        );
        Ok(PipelineVars {
            weights,
            grounding: head.grounding,
            logits,
            keypoints,
        })
    }

    /// Attaches the composite loss against `mask` to a built pipeline.
    pub fn attach_loss(&self, g: &mut Graph, vars: &PipelineVars, mask: &Tensor) -> Result<LossVars> {
        let c = &self.config;
        let w = &c.loss;
        if g.value(vars.logits).len() != mask.len() {
            return Err(LensError::shape(format!(
                "mask has {} pixels, decoder produced {}",
                mask.len(),
                g.value(vars.logits).len()
            )));
        }
        let flat_mask = Tensor::row_vector(mask.data().to_vec());
        let small = downsample_nearest(mask, c.grid);
        let small = Tensor::row_vector(small.into_data());

        let probs = g.sigmoid(vars.logits);
        let dice = g.dice(probs, &flat_mask, w.dice_smooth);
        let bce = g.bce(probs, &flat_mask, w.clamp_eps);
        let supervised = if c.normalize_attention {
            g.minmax(vars.grounding)
        } else {
            vars.grounding
        };
        let attn = g.bce(supervised, &small, w.clamp_eps);
        let wd = g.scale(dice, w.lambda_dice);
        let wb = g.scale(bce, w.lambda_bce);
        let seg = g.add(wd, wb);
        let total = g.add(seg, attn);
        let v = |var: Var| g.value(var).data()[0];
        let breakdown = LossBreakdown {
            total: v(total),
            attn: v(attn),
            seg: v(seg),
            dice: v(dice),
            bce: v(bce),
        };
        Ok(LossVars { total, breakdown })
    }

    pub fn infer(&self, input: &HeadInput, image: &ImageEmbedding) -> Result<Inference> {
        let mut g = Graph::new();
        let vars = self.build(&mut g, input, image, &ForwardOptions::inference(), false)?;
        let (ho, wo) = (image.grid().0 * self.config.upsample, image.grid().1 * self.config.upsample);
        Ok(Inference {
            grounding: g.value(vars.grounding).reshape(&[self.config.grid.0, self.config.grid.1])?,
            keypoints: vars.keypoints,
            mask: MaskLogits {
                logits: g.value(vars.logits).reshape(&[ho, wo])?,
            },
        })
    }

    /// Scalar loss and breakdown for one sample, no gradients.
    pub fn loss(&self, sample: &Sample, opts: &ForwardOptions) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.build(&mut g, &sample.input, &sample.image, opts, false)?;
        Ok(self.attach_loss(&mut g, &vars, &sample.mask)?.breakdown)
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.weights.visit("", &mut |_, t| n += t.len());
        n
    }
}

fn unit(v: f64, extent: usize) -> f64 {
    if extent < 2 {
        0.0
    } else {
        (v / (extent as f64 - 1.0)).clamp(0.0, 1.0)
    }
}
