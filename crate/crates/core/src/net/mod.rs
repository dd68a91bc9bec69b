//! The toy kernel-prediction network and its training machinery.

mod adam;
mod augment;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use adam::{adam_step, AdamState};
pub use augment::{
    apply_plan, augment, sample_plan, AugmentPlan, ConcatPlan, SourceScene, TrainingSample,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, sidecar_path, write_checkpoint,
    Checkpoint, Sidecar,
};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use loss::{image_loss, total_loss, LossParts};
pub use model::{KinkTrace, Network};
pub use train::{confidence_training_mean, make_batch, train, TrainLogRow, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub kernel_order: usize,
    pub encoder_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            kernel_order: 1,
            encoder_widths: vec![16, 32, 64],
            seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(invalid("encoder widths must be non-empty and positive"));
        }
        if self.kernel_order % 2 == 0 {
            return Err(invalid(format!(
                "kernel order {} must be odd",
                self.kernel_order
            )));
        }
        let div = 1usize << self.encoder_widths.len();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(invalid(format!(
                "input size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// K²·9.
    pub fn output_channels(&self) -> usize {
        self.kernel_order * self.kernel_order * 9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub max_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Probability of concatenating two augmented sources.
    pub p_concat: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.01,
            max_steps: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            p_concat: 0.3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .all(|l| *l >= 0.0 && l.is_finite());
        if !weights_ok {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(invalid("Adam constants out of range"));
        }
        if !(0.0..=1.0).contains(&self.p_concat) {
            return Err(invalid("p_concat must be a probability"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::default().validate().is_ok());
        assert!(NetworkSpec {
            input_size: 60,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NetworkSpec {
            kernel_order: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NetworkSpec {
            encoder_widths: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            NetworkSpec {
                kernel_order: 3,
                ..Default::default()
            }
            .output_channels(),
            81
        );
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lambda3: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
