use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Every knob of a run. Defaults: `m = 16`,
/// a `3 x 3` sampling window, Dice/BCE weights `(2, 4)` and AdamW at `5e-5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Vision-token grid `(h, w)`; the grounding map has this shape.
    pub grid: (usize, usize),
    /// Text tokens per instruction in synthetic data.
    pub text_len: usize,
    pub model_dim: usize,
    /// Prompt/decoder embedding width `d_s`.
    pub prompt_dim: usize,
    pub head_count: usize,
    pub max_keypoints: usize,
    pub nms_radius: f64,
    pub window: usize,
    pub subpixel_eps: f64,
    /// Grid of the stub image embedding `(h_e, w_e)`.
    pub embed_grid: (usize, usize),
    pub upsample: usize,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub decoder_trainable: bool,
    pub normalize_attention: bool,
    pub use_local_descriptions: bool,
    /// Probability of the global-only branch during training.
    pub description_dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub clamp_eps: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dice: 2.0,
            lambda_bce: 4.0,
            clamp_eps: 1e-7,
            dice_smooth: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: (24, 24),
            text_len: 2,
            model_dim: 32,
            prompt_dim: 32,
            head_count: 4,
            max_keypoints: 16,
            nms_radius: 4.0,
            window: 3,
            subpixel_eps: 1e-6,
            embed_grid: (16, 16),
            upsample: 4,
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            seed: 7,
            decoder_trainable: true,
            normalize_attention: false,
            use_local_descriptions: true,
            description_dropout: 0.5,
        }
    }
}

impl RunConfig {
    /// Small configuration used for gradient checks: `8 x 8` grid, `d = 16`,
    /// `m = 4`.
    pub fn toy() -> Self {
        RunConfig {
            grid: (8, 8),
            model_dim: 16,
            prompt_dim: 16,
            max_keypoints: 4,
            embed_grid: (8, 8),
            ..RunConfig::default()
        }
    }

    /// Configuration of the synthetic blob-localization task.
    pub fn blob_task() -> Self {
        RunConfig {
            grid: (12, 12),
            model_dim: 32,
            prompt_dim: 32,
            embed_grid: (8, 8),
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.embed_grid.0 * self.upsample, self.embed_grid.1 * self.upsample)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LensError::InvalidArgument(m.to_string()));
        if self.grid.0 == 0 || self.grid.1 == 0 || self.embed_grid.0 == 0 || self.embed_grid.1 == 0
        {
            return bad("grids must be non-empty");
        }
        if self.text_len == 0 {
            return bad("text_len must be >= 1");
        }
        if self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return bad("model_dim must be divisible by head_count");
        }
        if self.prompt_dim % self.head_count != 0 || self.prompt_dim % 2 != 0 {
            return bad("prompt_dim must be even and divisible by head_count");
        }
        if self.window % 2 == 0 {
            return bad("window must be odd");
        }
        if self.max_keypoints == 0 || self.nms_radius <= 0.0 {
            return bad("max_keypoints and nms_radius must be positive");
        }
        let l = &self.loss;
        if l.lambda_dice < 0.0 || l.lambda_bce < 0.0 || !(l.clamp_eps > 0.0 && l.clamp_eps < 0.5) {
            return bad("loss weights must be >= 0 and clamp_eps in (0, 0.5)");
        }
        if self.upsample == 0 || self.batch_size == 0 {
            return bad("upsample and batch_size must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
