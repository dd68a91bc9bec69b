use serde::{Deserialize, Serialize};

use super::model::{field_loss_grad, KinkTrace};
use super::TrainConfig;
use crate::color::{srgb_encode, srgb_encode_slope, LinearImage, CHANNELS, SRGB_BREAKPOINT};
use crate::error::{invalid, Result};
use crate::kernel::{KernelField, ReferenceImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean L1 distance of sRGB finite differences.
    pub l1: f64,
    /// Mean per-pixel Euclidean distance in sRGB.
    pub l2: f64,
    /// Regulation penalty per pixel.
    pub penalty: f64,
    pub total: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Image terms and their gradient with respect to the raw prediction.
/// Negative predictions continue the linear segment of the transfer curve.
pub(crate) fn loss_grad(
    pred: &[f64],
    target: &[f64],
    h: usize,
    w: usize,
    config: &TrainConfig,
    mut trace: Option<&mut KinkTrace>,
) -> Result<(f64, f64, Vec<f64>)> {
    if pred.len() != h * w * CHANNELS || target.len() != pred.len() {
        return Err(invalid("prediction and target sizes differ"));
    }
    let n = (h * w) as f64;
    let gp: Vec<f64> = pred.iter().map(|&v| srgb_encode(v)).collect();
    let gt: Vec<f64> = target.iter().map(|&v| srgb_encode(v.max(0.0))).collect();
    let diff: Vec<f64> = gp.iter().zip(&gt).map(|(a, b)| a - b).collect();
    let mut d_gamma = vec![0.0; pred.len()];

    let mut l2 = 0.0;
    for (p, d) in diff.chunks_exact(CHANNELS).enumerate() {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        l2 += norm;
        if let Some(t) = trace.as_deref_mut() {
            t.push(norm == 0.0);
        }
        if norm > 0.0 {
            for c in 0..CHANNELS {
                d_gamma[p * CHANNELS + c] += config.lambda2 * d[c] / (norm * n);
            }
        }
    }
    l2 /= n;

    let mut l1 = 0.0;
    let mut term = |a: usize, b: usize, d_gamma: &mut [f64], trace: &mut Option<&mut KinkTrace>| {
        // Difference of [-1, 1] responses between prediction and target.
        let g = diff[b] - diff[a];
        l1 += g.abs();
        if let Some(t) = trace.as_deref_mut() {
            t.push(g > 0.0);
            t.push(g == 0.0);
        }
        let s = config.lambda1 * sign(g) / n;
        d_gamma[b] += s;
        d_gamma[a] -= s;
    };
    for r in 0..h {
        for c in 0..w {
            for ch in 0..CHANNELS {
                let i = (r * w + c) * CHANNELS + ch;
                if c + 1 < w {
                    term(i, i + CHANNELS, &mut d_gamma, &mut trace);
                }
                if r + 1 < h {
                    term(i, i + w * CHANNELS, &mut d_gamma, &mut trace);
                }
            }
        }
    }
    l1 /= n;

    let d_pred = pred
        .iter()
        .zip(&d_gamma)
        .map(|(&v, &g)| g * srgb_encode_slope(v))
        .collect();
    if let Some(t) = trace {
        for &v in pred {
            t.push(v <= SRGB_BREAKPOINT);
        }
    }
    Ok((l1, l2, d_pred))
}

/// (ℓ1 on sRGB gradients, ℓ2 on sRGB intensities), both averaged per pixel.
pub fn image_loss(predicted: &ReferenceImage, target: &LinearImage) -> Result<(f64, f64)> {
    if predicted.height() != target.height() || predicted.width() != target.width() {
        return Err(invalid("prediction and target sizes differ"));
    }
    let cfg = TrainConfig::default();
    let (l1, l2, _) = loss_grad(
        predicted.data(),
        target.data(),
        target.height(),
        target.width(),
        &cfg,
        None,
    )?;
    Ok((l1, l2))
}

/// λ1·ℓ1 + λ2·ℓ2 + λ3·R(F)/(H·W) for the prediction `apply_kernels(input, field)`.
pub fn total_loss(
    input: &LinearImage,
    target: &LinearImage,
    field: &KernelField,
    config: &TrainConfig,
) -> Result<LossParts> {
    if input.height() != target.height() || input.width() != target.width() {
        return Err(invalid("input and target sizes differ"));
    }
    Ok(field_loss_grad(input, target, field, config, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::srgb_transfer;
    use crate::kernel::apply_kernels;

    fn inverse_srgb(v: f64) -> f64 {
        if v <= 12.92 * SRGB_BREAKPOINT {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let y = LinearImage::from_fn(4, 5, |r, c| [0.1 * r as f64, 0.05 * c as f64, 0.3]).unwrap();
        assert_eq!(
            image_loss(&ReferenceImage::from_linear(&y), &y).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn hand_evaluated_gradient_term() {
        // Γ-values (0.2, 0.6) predicted, (0.2, 0.2) target, on every channel.
        let p = [inverse_srgb(0.2), inverse_srgb(0.6)];
        let t = inverse_srgb(0.2);
        let pred = ReferenceImage::new(1, 2, vec![p[0], p[0], p[0], p[1], p[1], p[1]]).unwrap();
        let target = LinearImage::filled(1, 2, [t; 3]).unwrap();
        let (l1, l2) = image_loss(&pred, &target).unwrap();
        // Each channel contributes 0.4; mean over 2 pixels.
        assert!((l1 - 3.0 * 0.4 / 2.0).abs() < 1e-12);
        assert!((l2 - (3.0f64 * 0.16).sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images() {
        let pred = LinearImage::filled(3, 3, [0.5, 0.2, 0.1]).unwrap();
        let target = LinearImage::filled(3, 3, [0.4, 0.2, 0.1]).unwrap();
        let (l1, l2) = image_loss(&ReferenceImage::from_linear(&pred), &target).unwrap();
        assert_eq!(l1, 0.0);
        let d = srgb_transfer(0.5).unwrap() - srgb_transfer(0.4).unwrap();
        assert!((l2 - d).abs() < 1e-12);
    }

    #[test]
    fn negatives_continue_the_linear_segment() {
        let pred = ReferenceImage::new(1, 1, vec![-0.01, 0.0, 0.2]).unwrap();
        let target = LinearImage::new(1, 1, vec![0.0, 0.0, 0.2]).unwrap();
        let (l1, l2) = image_loss(&pred, &target).unwrap();
        assert_eq!(l1, 0.0);
        assert!((l2 - 0.1292).abs() < 1e-12);
        let (_, _, d) = loss_grad(
            pred.data(),
            target.data(),
            1,
            1,
            &TrainConfig::default(),
            None,
        )
        .unwrap();
        assert!((d[0] + 12.92).abs() < 1e-9);
    }

    #[test]
    fn identity_field_on_corrected_sample() {
        let x = LinearImage::from_fn(6, 6, |r, c| {
            [0.2 + 0.05 * r as f64, 0.3, 0.1 + 0.1 * c as f64]
        })
        .unwrap();
        let f = KernelField::identity(6, 6, 3).unwrap();
        let parts = total_loss(&x, &x, &f, &TrainConfig::default()).unwrap();
        assert_eq!(parts.total, 0.0);
    }

    #[test]
    fn lambda3_is_linear() {
        let x = LinearImage::from_fn(4, 4, |r, c| {
            [0.2 + 0.05 * r as f64, 0.3, 0.1 + 0.1 * c as f64]
        })
        .unwrap();
        let mut w = KernelField::identity(4, 4, 1).unwrap().weights().to_vec();
        for (i, v) in w.iter_mut().enumerate() {
            *v += 0.01 * (i % 7) as f64 - 0.03;
        }
        let f = KernelField::new(4, 4, 1, w).unwrap();
        let target = apply_kernels(
            &x,
            &KernelField::diagonal(4, 4, 1, [1.2, 1.0, 0.8]).unwrap(),
        )
        .unwrap()
        .to_linear();
        let cfg = TrainConfig::default();
        let a = total_loss(&x, &target, &f, &cfg).unwrap();
        let b = total_loss(
            &x,
            &target,
            &f,
            &TrainConfig {
                lambda3: 2.0 * cfg.lambda3,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert!((b.total - a.total - cfg.lambda3 * a.penalty).abs() < 1e-12);
        assert!(a.penalty > 0.0);
    }

    #[test]
    fn exact_field_with_no_penalty_weight_is_zero() {
        let x = LinearImage::from_fn(4, 4, |r, c| {
            [0.2 + 0.05 * r as f64, 0.3, 0.1 + 0.1 * c as f64]
        })
        .unwrap();
        let f = KernelField::diagonal(4, 4, 3, [1.3, 1.0, 0.6]).unwrap();
        let target = apply_kernels(&x, &f).unwrap().to_linear();
        let cfg = TrainConfig {
            lambda3: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&x, &target, &f, &cfg).unwrap().total, 0.0);
    }
}
