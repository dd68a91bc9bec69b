//! Confidence derived from kernel fields.
//!
//! Per-pixel, per-channel confidence is the share of a channel's output that
//! comes from its own input channel (absolute kernel weights). The per-image
//! statistics summarize those maps; levels 1-5 quantize a statistic against
//! the mean seen on training data.

use serde::{Deserialize, Serialize};

use crate::color::{LinearImage, CHANNELS};
use crate::error::{invalid, Result};
use crate::kernel::KernelField;

/// Guard added to the per-pixel denominator.
pub const EPS_DIV: f64 = 1e-9;
/// Regularizer in the uniform and R/B statistics.
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    /// Per pixel, per channel, each in [0, 1].
    pub values: Vec<[f64; 3]>,
}

impl ConfidenceMap {
    pub fn channel_mean(&self, ch: usize) -> f64 {
        self.values.iter().map(|v| v[ch]).sum::<f64>() / self.values.len() as f64
    }

    /// Population variance of one channel.
    pub fn channel_variance(&self, ch: usize) -> f64 {
        let m = self.channel_mean(ch);
        self.values.iter().map(|v| (v[ch] - m).powi(2)).sum::<f64>() / self.values.len() as f64
    }

    /// 8-bit plane for one channel, `value · 255` rounded and clipped.
    pub fn to_u8(&self, ch: usize) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v[ch] * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

pub fn channel_confidence(input: &LinearImage, field: &KernelField) -> Result<ConfidenceMap> {
    let (h, w, k) = (field.height(), field.width(), field.kernel_order());
    if input.height() != h || input.width() != w {
        return Err(invalid("input and kernel field sizes differ"));
    }
    let r = (k / 2) as isize;
    let mut values = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut conf = [0.0; 3];
            for (c_out, slot) in conf.iter_mut().enumerate() {
                let mut contrib = [0.0; 3];
                for (c_in, acc) in contrib.iter_mut().enumerate() {
                    for ky in 0..k {
                        let y = (row as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                        for kx in 0..k {
                            let x =
                                (col as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                            *acc += field.get(row, col, c_out, c_in, ky, kx).abs()
                                * input.get(y, x, c_in);
                        }
                    }
                }
                let total: f64 = contrib.iter().sum();
                *slot = if total > 0.0 {
                    contrib[c_out] / (total + EPS_DIV)
                } else {
                    0.0
                };
            }
            values.push(conf);
        }
    }
    Ok(ConfidenceMap {
        height: h,
        width: w,
        values,
    })
}

/// Mean over channels of (mean + ε) / (variance + ε).
pub fn uniform_confidence(maps: &ConfidenceMap) -> f64 {
    (0..CHANNELS)
        .map(|c| (maps.channel_mean(c) + EPS) / (maps.channel_variance(c) + EPS))
        .sum::<f64>()
        / CHANNELS as f64
}

/// R/B balance statistic from the mean red and blue confidences.
pub fn rb_confidence_from_means(mu_r: f64, mu_b: f64) -> f64 {
    if mu_r == 0.0 && mu_b == 0.0 {
        return 0.0;
    }
    (mu_r + mu_b) / (((mu_r - mu_b).abs() + EPS) * mu_r.hypot(mu_b))
}

pub fn rb_confidence(maps: &ConfidenceMap) -> f64 {
    rb_confidence_from_means(maps.channel_mean(0), maps.channel_mean(2))
}

/// Level 5 iff `value > 0.8 · training_mean`; below that, four equal-width
/// bins over [0, 0.8 · training_mean] give levels 1-4.
pub fn quantize_level(value: f64, training_mean: f64) -> Result<u8> {
    if !(training_mean > 0.0) || !training_mean.is_finite() {
        return Err(invalid(format!(
            "training mean {training_mean} must be positive"
        )));
    }
    let top = 0.8 * training_mean;
    if value > top {
        return Ok(5);
    }
    let bin = (value / (top / 4.0)).floor();
    Ok((bin.max(0.0) as u8).min(3) + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LevelStatistic {
    Uniform,
    #[default]
    Rb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub uniform: f64,
    pub rb: f64,
    pub level: u8,
    pub mu_r: f64,
    pub mu_b: f64,
    pub eps: f64,
}

impl ConfidenceReport {
    pub fn from_maps(
        maps: &ConfidenceMap,
        training_mean: f64,
        statistic: LevelStatistic,
    ) -> Result<Self> {
        let uniform = uniform_confidence(maps);
        let rb = rb_confidence(maps);
        let value = match statistic {
            LevelStatistic::Uniform => uniform,
            LevelStatistic::Rb => rb,
        };
        Ok(Self {
            uniform,
            rb,
            level: quantize_level(value, training_mean)?,
            mu_r: maps.channel_mean(0),
            mu_b: maps.channel_mean(2),
            eps: EPS,
        })
    }
}
