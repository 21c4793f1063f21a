//! Fully conditioned multi-scale Glow.
//!
//! Every invertible step sees the building layout: ActNorm and the LU
//! log-diagonal through spatially pooled conditioning features, the coupling
//! network through the full feature map concatenated to its input.

mod actnorm;
mod checkpoint;
mod cond;
mod conv;
mod coupling;
mod invconv;
mod model;
mod param;
mod real;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use actnorm::ActNorm;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, Section, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use cond::{layout_channels, CondFeatures, CondScale};
pub use conv::Conv2d;
pub use coupling::{Coupling, LOG_SCALE_BOUND};
pub use invconv::InvConv;
pub use model::{
    norm_to_tensor, tensor_to_norm, FlowModel, FlowStep, GradMode, LatentBundle, LogLikelihood, Tape, MEAN_SHIFT,
};
pub use param::{Param, Params};
pub use real::{matmul, Op, Real};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular layer: {0}")]
    Singular(String),
    #[error("non-finite values after {layer}")]
    NonFinite { layer: String },
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub num_scales: usize,
    pub steps_per_scale: Vec<usize>,
    pub cond_hidden_channels: usize,
    pub coupling_hidden_channels: usize,
    /// Prior standard deviation used when sampling.
    pub temperature: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            num_scales: 2,
            steps_per_scale: vec![4, 4],
            cond_hidden_channels: 16,
            coupling_hidden_channels: 64,
            temperature: 0.7,
        }
    }
}

impl FlowConfig {
    /// Four scales of eight steps.
    pub fn paper_scale() -> Self {
        Self { num_scales: 4, steps_per_scale: vec![8, 8, 8, 8], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.num_scales == 0 {
            return Err(FlowError::Config("num_scales must be at least 1".into()));
        }
        if self.steps_per_scale.len() != self.num_scales {
            return Err(FlowError::Config(format!(
                "steps_per_scale has {} entries for {} scales",
                self.steps_per_scale.len(),
                self.num_scales
            )));
        }
        if self.steps_per_scale.contains(&0) {
            return Err(FlowError::Config("every scale needs at least one step".into()));
        }
        if self.cond_hidden_channels == 0 || self.coupling_hidden_channels == 0 {
            return Err(FlowError::Config("hidden channel counts must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FlowError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Input grids must be square with a side divisible by `2^num_scales · 2`.
    pub fn check_size(&self, size: usize) -> Result<(), FlowError> {
        let unit = 1usize << (self.num_scales + 1);
        if size == 0 || size % unit != 0 {
            return Err(FlowError::Shape(format!(
                "grid size {size} is not a multiple of {unit} for {} scales",
                self.num_scales
            )));
        }
        Ok(())
    }

    /// Channel count seen by the steps of each scale (one input channel).
    pub fn scale_channels(&self) -> Vec<usize> {
        let mut c = 1;
        (0..self.num_scales)
            .map(|i| {
                if i > 0 {
                    c /= 2;
                }
                c *= 4;
                c
            })
            .collect()
    }
}
