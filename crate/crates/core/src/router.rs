//! Turn-level routing between conversation, segmentation and follow-up
//! questions about the last segmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{ImageEmbedding, StubImageEncoder};
use crate::error::{LensError, Result};
use crate::model::LensModel;
use crate::numerics::{grid_dims, Tensor};
use crate::objectives::downsample_nearest;
use crate::seg_head::HeadInput;

pub const SEG_REPLY: &str = "Sure, the segmentation result is generated.";
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Dialogue,
    Seg,
    Followup,
}

impl std::fmt::Display for Intent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Intent::Dialogue => "dialogue",
            Intent::Seg => "seg",
            Intent::Followup => "followup",
        })
    }
}

/// The last segmented image and its mask, both `H x W` greyscale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionMemory {
    pub last: Option<(Tensor, Tensor)>,
}

impl SessionMemory {
    pub fn is_empty(&self) -> bool {
        self.last.is_none()
    }
}

pub trait AgentPort {
    fn route(&mut self, instruction: &str, image: Option<&Tensor>, has_memory: bool) -> Intent;
    fn embed(&mut self, instruction: &str, image: &Tensor) -> Result<(HeadInput, ImageEmbedding)>;
    fn generate(&mut self, instruction: &str, context: Option<&Tensor>) -> String;
}

pub trait SegmentationPipeline {
    /// Binary mask for the embedded instruction.
    fn segment(&self, input: &HeadInput, image: &ImageEmbedding) -> Result<Tensor>;
}

impl SegmentationPipeline for LensModel {
    fn segment(&self, input: &HeadInput, image: &ImageEmbedding) -> Result<Tensor> {
        Ok(self.infer(input, image)?.mask.binary())
    }
}

const SEG_WORDS: [&str; 3] = ["segment", "mask", "outline"];
const SEG_PHRASES: [&str; 1] = ["highlight the region"];
const FOLLOWUP_PHRASES: [&str; 2] = ["the segmented", "that region"];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Rule-based intent classifier. Segmentation verbs win over follow-up
/// references; a bare "it" counts as a reference only when there is
/// something in memory to refer to.
pub fn route_intent(instruction: &str, has_memory: bool) -> Intent {
    let ws = words(instruction);
    let joined = ws.join(" ");
    let has_phrase = |p: &str| format!(" {joined} ").contains(&format!(" {p} "));
    if ws.iter().any(|w| SEG_WORDS.contains(&w.as_str())) || SEG_PHRASES.iter().any(|p| has_phrase(p)) {
        return Intent::Seg;
    }
    if FOLLOWUP_PHRASES.iter().any(|p| has_phrase(p)) || (has_memory && ws.iter().any(|w| w == "it")) {
        return Intent::Followup;
    }
    Intent::Dialogue
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnOutcome {
    /// Intent that was finally acted on.
    pub intent: Intent,
    pub reply: String,
    pub mask: Option<Tensor>,
    pub overlay: Option<Tensor>,
    /// Number of re-entries taken (0 or 1).
    pub depth: usize,
}

/// Collapses an `H x W x C` image to `H x W` by channel mean.
pub fn greyscale(image: &Tensor) -> Tensor {
    let (h, w, c) = grid_dims(image);
    Tensor::from_fn(h, w, |r, col| {
        let base = (r * w + col) * c;
        image.data()[base..base + c].iter().sum::<f64>() / c as f64
    })
}

/// `alpha · mask + (1 - alpha) · image`, with the mask resized to the image.
pub fn overlay(image: &Tensor, mask: &Tensor) -> Tensor {
    let grey = greyscale(image);
    let (h, w, _) = grid_dims(&grey);
    let m = downsample_nearest(mask, (h, w));
    Tensor::from_fn(h, w, |r, c| {
        OVERLAY_ALPHA * m.at(r, c) + (1.0 - OVERLAY_ALPHA) * grey.at(r, c)
    })
}

/// Horizontal concatenation of equally tall `H x W` maps.
pub fn concat_side_by_side(parts: &[&Tensor]) -> Result<Tensor> {
    let h = parts
        .first()
        .map(|p| p.rows())
        .ok_or_else(|| LensError::InvalidArgument("nothing to concatenate".into()))?;
    if parts.iter().any(|p| p.rank() != 2 || p.rows() != h) {
        return Err(LensError::shape("side-by-side parts must be H x W with equal H"));
    }
    let w: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(h, w, data)
}

/// Image, mask and overlay side by side, for export as one PGM.
pub fn triptych(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let grey = greyscale(image);
    let m = downsample_nearest(mask, (grey.rows(), grey.cols()));
    let o = overlay(image, mask);
    concat_side_by_side(&[&grey, &m, &o])
}

/// One conversational turn. Memory is written only by segmentation turns.
pub fn handle_turn(
    agent: &mut dyn AgentPort,
    pipeline: &dyn SegmentationPipeline,
    memory: &mut SessionMemory,
    instruction: &str,
    image: Option<&Tensor>,
) -> Result<TurnOutcome> {
    let mut intent = agent.route(instruction, image, !memory.is_empty());
    let mut depth = 0;
    if intent == Intent::Followup && memory.is_empty() {
        depth = 1;
        intent = agent.route(instruction, image, false);
        if intent == Intent::Followup {
            intent = Intent::Dialogue;
        }
    }
    match intent {
        Intent::Seg => {
            let image = image.ok_or(LensError::MissingImage)?;
            let (input, embedding) = agent.embed(instruction, image)?;
            let mask = pipeline.segment(&input, &embedding)?;
            let over = overlay(image, &mask);
            memory.last = Some((greyscale(image), mask.clone()));
            Ok(TurnOutcome {
                intent,
                reply: SEG_REPLY.to_string(),
                mask: Some(mask),
                overlay: Some(over),
                depth,
            })
        }
        Intent::Followup => {
            let (img, mask) = memory.last.as_ref().expect("followup only with memory");
            let context = concat_side_by_side(&[img, &overlay(img, mask)])?;
            Ok(TurnOutcome {
                intent,
                reply: agent.generate(instruction, Some(&context)),
                mask: None,
                overlay: None,
                depth,
            })
        }
        Intent::Dialogue => Ok(TurnOutcome {
            intent,
            reply: agent.generate(instruction, image),
            mask: None,
            overlay: None,
            depth,
        }),
    }
}

/// Script lines: one instruction per line; blank lines and `#` comments
/// are skipped.
pub fn parse_script(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn run_script(
    agent: &mut dyn AgentPort,
    pipeline: &dyn SegmentationPipeline,
    memory: &mut SessionMemory,
    lines: &[String],
    image: Option<&Tensor>,
) -> Result<Vec<TurnOutcome>> {
    lines
        .iter()
        .map(|l| handle_turn(agent, pipeline, memory, l, image))
        .collect()
}

/// Deterministic stand-in agent: rule-based routing, hashed-word text
/// features, pooled-pixel image features and a templated reply.
pub struct StubAgent {
    pub config: RunConfig,
    pixel_map: Tensor,
    word_seed: u64,
    encoder: StubImageEncoder,
}

impl StubAgent {
    pub fn new(config: RunConfig, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixel_map = Tensor::randn(&[channels, config.model_dim], 1.0, &mut rng);
        let encoder = StubImageEncoder::new(config.upsample, channels, config.prompt_dim, seed ^ 0xe11c);
        StubAgent {
            config,
            pixel_map,
            word_seed: seed ^ 0x7e47,
            encoder,
        }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let h = word
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |acc, b| (acc ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.word_seed);
        Tensor::randn(&[self.config.model_dim], 1.0, &mut rng).into_data()
    }
}

impl AgentPort for StubAgent {
    fn route(&mut self, instruction: &str, _image: Option<&Tensor>, has_memory: bool) -> Intent {
        route_intent(instruction, has_memory)
    }

    fn embed(&mut self, instruction: &str, image: &Tensor) -> Result<(HeadInput, ImageEmbedding)> {
        let c = &self.config;
        let (h, w, ch) = grid_dims(image);
        if ch != self.pixel_map.rows() {
            return Err(LensError::shape(format!("agent expects {} channels, image has {ch}", self.pixel_map.rows())));
        }
        let (gh, gw) = c.grid;
        let d = c.model_dim;
        let mut feats = vec![0.0; gh * gw * d];
        for r in 0..gh {
            for col in 0..gw {
                let (r0, r1) = (r * h / gh, ((r + 1) * h / gh).max(r * h / gh + 1).min(h));
                let (c0, c1) = (col * w / gw, ((col + 1) * w / gw).max(col * w / gw + 1).min(w));
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                let cell = &mut feats[(r * gw + col) * d..(r * gw + col + 1) * d];
                for y in r0..r1 {
                    for x in c0..c1 {
                        for k in 0..ch {
                            let v = image.data()[(y * w + x) * ch + k] / n;
                            for (o, p) in cell.iter_mut().zip(self.pixel_map.row(k)) {
                                *o += v * p;
                            }
                        }
                    }
                }
            }
        }
        let mut ws = words(instruction);
        ws.resize(c.text_len.max(ws.len()), String::new());
        let text: Vec<f64> = ws[ws.len() - c.text_len..]
            .iter()
            .flat_map(|wd| self.word_vector(wd))
            .collect();
        let input = HeadInput::new(
            Tensor::matrix(gh * gw, d, feats)?,
            Tensor::matrix(c.text_len, d, text)?,
            c.grid,
        )?;
        Ok((input, self.encoder.encode(image)?))
    }

    fn generate(&mut self, instruction: &str, context: Option<&Tensor>) -> String {
        match context {
            Some(t) => format!("[{}] {instruction}", t.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")),
            None => format!("[no image] {instruction}"),
        }
    }
}
