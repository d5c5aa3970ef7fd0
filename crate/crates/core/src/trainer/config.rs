//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    /// Position rate at the last step relative to the first; decays
    /// exponentially in between.
    pub position_final_factor: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    /// Degree-0 SH coefficients.
    pub sh: f64,
    /// Higher-order SH coefficients relative to `sh`.
    pub sh_rest_factor: f64,
    pub medium: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final_factor: 0.01,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            sh_rest_factor: 0.05,
            medium: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            sh: 0.0,
            medium: 0.0,
            ..Self::default()
        }
    }

    /// Position rate at `step` of a run of `iterations` steps.
    pub fn position_at(&self, step: usize, iterations: usize, extent: f64) -> f64 {
        let t = if iterations <= 1 {
            0.0
        } else {
            (step as f64 / (iterations - 1) as f64).min(1.0)
        };
        self.position * extent * self.position_final_factor.powf(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub loss: LossConfig,
    /// `false` trains plain splatting without the medium.
    pub with_medium: bool,
    pub densify_interval: usize,
    pub densify_from: usize,
    /// Last step (exclusive) at which densification and opacity resets run.
    pub densify_until: usize,
    /// Threshold on the mean accumulated screen-space gradient norm.
    pub grad_threshold: f64,
    /// Fraction of the scene extent above which a Gaussian is split rather
    /// than duplicated.
    pub split_scale_threshold: f64,
    pub split_count: usize,
    pub split_scale_divisor: f64,
    pub prune_interval: usize,
    pub prune_opacity: f64,
    pub opacity_reset_interval: usize,
    pub opacity_reset_value: f64,
    /// Steps between SH degree increments.
    pub sh_degree_interval: usize,
    pub max_sh_degree: usize,
    /// Densification never grows the scene past this count.
    pub max_gaussians: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr: LearningRates::default(),
            loss: LossConfig::default(),
            with_medium: true,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15_000,
            grad_threshold: 2e-4,
            split_scale_threshold: 0.01,
            split_count: 2,
            split_scale_divisor: 1.6,
            prune_interval: 100,
            prune_opacity: 0.5,
            opacity_reset_interval: 500,
            opacity_reset_value: 0.5,
            sh_degree_interval: 1000,
            max_sh_degree: 3,
            max_gaussians: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("train config: {m}")));
        if self.densify_interval == 0 || self.prune_interval == 0 || self.opacity_reset_interval == 0 || self.sh_degree_interval == 0 {
            return bad("intervals must be at least 1");
        }
        if !(0.0..1.0).contains(&self.prune_opacity) || !(0.0 < self.opacity_reset_value && self.opacity_reset_value < 1.0) {
            return bad("opacity thresholds must lie in (0, 1)");
        }
        if !(self.grad_threshold >= 0.0) || !(self.split_scale_threshold > 0.0) {
            return bad("densification thresholds must be non-negative");
        }
        if self.split_count < 1 || !(self.split_scale_divisor > 0.0) {
            return bad("split count and divisor must be positive");
        }
        if self.max_sh_degree > crate::sh::MAX_COLOR_DEGREE {
            return bad("max_sh_degree above 3");
        }
        let lr = &self.lr;
        let rates = [lr.position, lr.log_scale, lr.rotation, lr.opacity, lr.sh, lr.medium, lr.sh_rest_factor];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) || !(lr.position_final_factor > 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        Ok(())
    }
}
