//! Plug-and-play keypoint-prompted segmentation.
//!
//! A light attention head reads a frozen multimodal model's hidden states,
//! turns its text→image attention into a grounding map, extracts keypoints
//! from that map, describes them and feeds the descriptions as point
//! prompts to a mask decoder.

pub mod config;
pub mod decoder;
pub mod descriptor;
pub mod error;
pub mod interchange;
pub mod keypoint;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod objectives;
mod params;
pub mod router;
pub mod seg_head;
pub mod synthetic;
pub mod tape;
pub mod trainer;

pub use config::{LossWeights, OptimizerConfig, RunConfig};
pub use error::{LensError, Result};
pub use keypoint::{Keypoint, KeypointSet};
pub use model::{ForwardOptions, Inference, LensModel, Sample};
pub use numerics::Tensor;
pub use router::{handle_turn, route_intent, Intent, SessionMemory};
pub use trainer::{fit_synthetic, fd_gradient_check, Metrics, TrainingReport};
