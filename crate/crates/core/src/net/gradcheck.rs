//! Central finite-difference check of the analytic gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{field_loss_grad, KinkTrace};
use super::{Network, NetworkSpec, TrainConfig};
use crate::color::{apply_diagonal, GainTriple, LinearImage};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    /// Number of parameters compared.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            spec: NetworkSpec {
                input_size: 16,
                kernel_order: 3,
                encoder_widths: vec![4, 8],
                seed: 0,
            },
            train: TrainConfig::default(),
            samples: 100,
            step: 1e-3,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Candidates skipped because ±step crossed a kink.
    pub rejected: usize,
    pub worst_param: usize,
    pub passed: bool,
}

fn loss_with_trace(
    net: &Network,
    x: &LinearImage,
    y: &LinearImage,
    cfg: &TrainConfig,
) -> Result<(f64, KinkTrace)> {
    let mut trace = KinkTrace::default();
    let cache = net.forward_cached(x, Some(&mut trace))?;
    let (parts, _) = field_loss_grad(x, y, &cache.field, cfg, Some(&mut trace))?;
    Ok((parts.total, trace))
}

/// Compares analytic and central-difference gradients of the total loss on
/// a random textured input and its diagonally corrected target.
pub fn gradient_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = stage_rng(config.seed, Stage::GradCheck);
    let spec = NetworkSpec {
        seed: config.seed,
        ..config.spec.clone()
    };
    let size = spec.input_size;
    let mut net = Network::new(spec)?;
    let x = LinearImage::from_fn(size, size, |_, _| {
        [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ]
    })?;
    let y = apply_diagonal(&x, GainTriple::new(1.4, 1.0, 0.7)?)?;

    let mut analytic = vec![0.0; net.param_count()];
    let mut base_trace = KinkTrace::default();
    net.accumulate_gradient(
        &x,
        &y,
        &config.train,
        1.0,
        &mut analytic,
        Some(&mut base_trace),
    )?;

    let h = config.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        rejected: 0,
        worst_param: 0,
        passed: true,
    };
    let max_attempts = 50 * config.samples.max(1);
    while report.checked < config.samples {
        if report.checked + report.rejected >= max_attempts {
            return Err(Error::InvalidArgument(format!(
                "gradient check rejected {} of {} candidates at kinks",
                report.rejected,
                report.checked + report.rejected
            )));
        }
        let i = rng.random_range(0..net.param_count());
        let orig = net.params()[i];
        let mut central = |step: f64| -> Result<Option<f64>> {
            net.params_mut()[i] = orig + step;
            let (plus, tp) = loss_with_trace(&net, &x, &y, &config.train)?;
            net.params_mut()[i] = orig - step;
            let (minus, tm) = loss_with_trace(&net, &x, &y, &config.train)?;
            net.params_mut()[i] = orig;
            Ok((tp == base_trace && tm == base_trace).then(|| (plus - minus) / (2.0 * step)))
        };
        let (Some(coarse), Some(fine)) = (central(h)?, central(h / 2.0)?) else {
            report.rejected += 1;
            continue;
        };
        // Richardson extrapolation cancels the h² truncation term.
        let numeric = (4.0 * fine - coarse) / 3.0;
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= config.tolerance;
    Ok(report)
}
