//! End-to-end estimation: resize to the model size, predict the kernel
//! field, form the reference image and gain map, cluster, fit, and derive a
//! corrected full-resolution image and a confidence report.

use serde::{Deserialize, Serialize};

use crate::cluster::{spectral_cluster, ClusterConfig};
use crate::color::{LinearImage, CHANNELS};
use crate::confidence::{channel_confidence, ConfidenceMap, ConfidenceReport, LevelStatistic};
use crate::error::{Error, Result};
use crate::fitting::{fit_global, fit_local, FitConfig, IlluminantEstimate, Mode, RegionEstimate};
use crate::kernel::{
    apply_kernels, illumination_vector_map, upsample_gain_map, GainMap, KernelField, ReferenceImage,
};
use crate::net::Network;
use crate::resample::resize_area;
use crate::IlluminantVector;

/// Training mean used for confidence levels when a checkpoint carries none.
pub const DEFAULT_TRAINING_MEAN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub fit: FitConfig,
    pub cluster: ClusterConfig,
    /// Cluster and fit per region; otherwise one global fit.
    pub local: bool,
    pub level_statistic: LevelStatistic,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            cluster: ClusterConfig::default(),
            local: true,
            level_statistic: LevelStatistic::Rb,
        }
    }
}

/// Everything produced for one image at model resolution.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub estimate: IlluminantEstimate,
    pub model_input: LinearImage,
    pub field: KernelField,
    pub reference: ReferenceImage,
    pub gain_map: GainMap,
    pub confidence_maps: ConfidenceMap,
}

/// Estimation from an already predicted field at model resolution.
pub fn estimate_from_field(
    input: &LinearImage,
    field: &KernelField,
    config: &EstimateConfig,
    training_mean: f64,
) -> Result<PipelineOutput> {
    let reference = apply_kernels(input, field)?;
    let gain_map = illumination_vector_map(input, &reference, config.fit.dark_threshold)?;
    let valid = gain_map.valid_count();
    if valid == 0 {
        return Err(Error::DegenerateScene(
            "no valid pixels in the illumination map".into(),
        ));
    }
    let mut estimate = if config.local && valid >= config.cluster.n_clusters {
        let mask = spectral_cluster(&gain_map, &config.cluster)?;
        if mask.merged {
            single(fit_global(input, &reference, &config.fit)?)
        } else {
            fit_local(
                input,
                &reference,
                &mask,
                &config.fit,
                config.cluster.merge_threshold,
            )?
        }
    } else {
        single(fit_global(input, &reference, &config.fit)?)
    };
    let confidence_maps = channel_confidence(input, field)?;
    estimate.confidence = Some(ConfidenceReport::from_maps(
        &confidence_maps,
        training_mean,
        config.level_statistic,
    )?);
    Ok(PipelineOutput {
        estimate,
        model_input: input.clone(),
        field: field.clone(),
        reference,
        gain_map,
        confidence_maps,
    })
}

fn single(fit: crate::fitting::FitOutcome) -> IlluminantEstimate {
    IlluminantEstimate {
        mode: Mode::Single,
        regions: vec![RegionEstimate {
            label: None,
            gains: fit.gains,
            illuminant: IlluminantVector::from_gains(fit.gains),
            pixels: fit.pixels,
        }],
        mask: None,
        confidence: None,
    }
}

pub fn estimate_with_network(
    network: &Network,
    image: &LinearImage,
    config: &EstimateConfig,
    training_mean: f64,
) -> Result<PipelineOutput> {
    let size = network.spec().input_size;
    let input = resize_area(image, size, size);
    let field = network.forward(&input)?;
    estimate_from_field(&input, &field, config, training_mean)
}

/// Per-pixel gains at model resolution: region gains where labeled, the
/// nearest labeled pixel's gains elsewhere.
pub fn region_gain_map(estimate: &IlluminantEstimate, height: usize, width: usize) -> GainMap {
    let n = height * width;
    let gains_of = |label: Option<u8>| {
        estimate
            .regions
            .iter()
            .find(|r| r.label == label)
            .unwrap_or(&estimate.regions[0])
            .gains
            .to_array()
    };
    let Some(mask) = estimate
        .mask
        .as_ref()
        .filter(|_| estimate.mode == Mode::Multi)
    else {
        return GainMap::constant(height, width, estimate.regions[0].gains.to_array());
    };
    let labeled: Vec<usize> = (0..n).filter(|&i| mask.labels[i].is_some()).collect();
    let gains = (0..n)
        .map(|i| match mask.labels[i] {
            Some(l) => gains_of(Some(l)),
            None => {
                let (r, c) = ((i / width) as isize, (i % width) as isize);
                let nearest = labeled
                    .iter()
                    .min_by_key(|&&j| {
                        let (rj, cj) = ((j / width) as isize, (j % width) as isize);
                        ((rj - r).pow(2) + (cj - c).pow(2), j)
                    })
                    .copied();
                nearest.map_or_else(
                    || estimate.regions[0].gains.to_array(),
                    |j| gains_of(mask.labels[j]),
                )
            }
        })
        .collect();
    GainMap {
        height,
        width,
        gains,
        valid: vec![true; n],
    }
}

/// Applies the estimate to the full-resolution image (gains bilinearly
/// upsampled from model resolution).
pub fn correct_image(
    image: &LinearImage,
    estimate: &IlluminantEstimate,
    model_size: usize,
) -> Result<LinearImage> {
    let low = region_gain_map(estimate, model_size, model_size);
    let full = if estimate.mode == Mode::Single {
        GainMap::constant(image.height(), image.width(), low.gains[0])
    } else {
        upsample_gain_map(
            &low,
            image.height().max(model_size),
            image.width().max(model_size),
        )
        .map(|m| resample_nearest(&m, image.height(), image.width()))?
    };
    let mut data = image.data().to_vec();
    for (p, px) in data.chunks_exact_mut(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            px[c] *= full.gains[p][c];
        }
    }
    LinearImage::new(image.height(), image.width(), data)
}

fn resample_nearest(map: &GainMap, h: usize, w: usize) -> GainMap {
    if map.height == h && map.width == w {
        return map.clone();
    }
    let idx = |r: usize, c: usize| (r * map.height / h) * map.width + c * map.width / w;
    GainMap {
        height: h,
        width: w,
        gains: (0..h * w).map(|i| map.gains[idx(i / w, i % w)]).collect(),
        valid: (0..h * w).map(|i| map.valid[idx(i / w, i % w)]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionJson {
    pub gains: [f64; 3],
    pub illuminant: [f64; 3],
    pub pixels: usize,
}

/// Schema of estimate files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateJson {
    pub mode: Mode,
    pub regions: Vec<RegionJson>,
    pub confidence: Option<ConfidenceReport>,
}

impl From<&IlluminantEstimate> for EstimateJson {
    fn from(e: &IlluminantEstimate) -> Self {
        Self {
            mode: e.mode,
            regions: e
                .regions
                .iter()
                .map(|r| RegionJson {
                    gains: r.gains.to_array(),
                    illuminant: r.illuminant.to_array(),
                    pixels: r.pixels,
                })
                .collect(),
            confidence: e.confidence,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{illuminant_distance, GainTriple};
    use crate::net::NetworkSpec;
    use rand::{Rng, SeedableRng};

    fn textured(size: usize, seed: u64) -> LinearImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(size, size, |_, _| {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ]
        })
        .unwrap()
    }

    #[test]
    fn identity_network_gives_unit_gains() {
        let spec = NetworkSpec {
            input_size: 16,
            kernel_order: 3,
            encoder_widths: vec![4, 8],
            seed: 0,
        };
        let net = Network::identity(spec).unwrap();
        let out = estimate_with_network(
            &net,
            &textured(40, 1),
            &EstimateConfig::default(),
            DEFAULT_TRAINING_MEAN,
        )
        .unwrap();
        assert!(out
            .gain_map
            .gains
            .iter()
            .all(|g| g.iter().all(|v| (v - 1.0).abs() < 1e-12)));
        assert_eq!(out.estimate.mode, Mode::Single);
        let g = out.estimate.regions[0].gains.to_array();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert_eq!(out.estimate.confidence.unwrap().level, 5);
    }

    #[test]
    fn two_region_field_gives_multi_mode() {
        let x = textured(16, 2);
        let a = IlluminantVector::new(0.80, 0.30, 0.52).unwrap();
        let b = IlluminantVector::new(0.38, 0.26, 0.89).unwrap();
        let ga = crate::gains_from_illuminant(a).unwrap().to_array();
        let gb = crate::gains_from_illuminant(b).unwrap().to_array();
        let field = KernelField::from_pixel_diagonal(16, 16, 1, |r, _| if r < 8 { ga } else { gb })
            .unwrap();
        let out = estimate_from_field(
            &x,
            &field,
            &EstimateConfig::default(),
            DEFAULT_TRAINING_MEAN,
        )
        .unwrap();
        assert_eq!(out.estimate.mode, Mode::Multi);
        let top = out.estimate.illuminant_at(0).unwrap();
        let bottom = out.estimate.illuminant_at(255).unwrap();
        assert!(illuminant_distance(top, a) < 1.0);
        assert!(illuminant_distance(bottom, b) < 1.0);

        let corrected = correct_image(&x, &out.estimate, 16).unwrap();
        let p = x.pixel(0, 0);
        let q = corrected.pixel(0, 0);
        for c in 0..3 {
            assert!((q[c] - p[c] * ga[c]).abs() < 1e-3 * q[c].max(1.0));
        }
        let json = EstimateJson::from(&out.estimate);
        assert_eq!(json.regions.len(), 2);
    }

    #[test]
    fn single_mode_correction_is_diagonal() {
        let x = textured(20, 3);
        let g = GainTriple::new(1.5, 1.0, 0.5).unwrap();
        let field = KernelField::diagonal(16, 16, 1, g.to_array()).unwrap();
        let small = resize_area(&x, 16, 16);
        let cfg = EstimateConfig {
            local: false,
            ..Default::default()
        };
        let out = estimate_from_field(&small, &field, &cfg, DEFAULT_TRAINING_MEAN).unwrap();
        let corrected = correct_image(&x, &out.estimate, 16).unwrap();
        let expect = crate::apply_diagonal(&x, out.estimate.regions[0].gains).unwrap();
        assert_eq!(corrected, expect);
    }
}
