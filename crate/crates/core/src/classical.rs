//! Statistics-based illuminant estimators used as baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::color::{IlluminantVector, LinearImage, CHANNELS};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WhitePatch,
    GrayWorld,
    ShadesOfGray,
    #[serde(rename = "gray_edge_1")]
    GrayEdge1,
    #[serde(rename = "gray_edge_2")]
    GrayEdge2,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::WhitePatch,
        Method::GrayWorld,
        Method::ShadesOfGray,
        Method::GrayEdge1,
        Method::GrayEdge2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::WhitePatch => "white_patch",
            Method::GrayWorld => "gray_world",
            Method::ShadesOfGray => "shades_of_gray",
            Method::GrayEdge1 => "gray_edge_1",
            Method::GrayEdge2 => "gray_edge_2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Minkowski norm order for shades of gray and gray edge.
    pub minkowski_p: f64,
    /// Gaussian pre-smoothing for gray edge, in pixels. 0 disables smoothing.
    pub smoothing_sigma: f64,
    /// Pixels with any channel at or above this fraction of full scale (1.0)
    /// are left out of the statistic.
    pub saturation_threshold: f64,
}

impl EstimatorConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            minkowski_p: 6.0,
            smoothing_sigma: 1.0,
            saturation_threshold: 0.98,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.minkowski_p >= 1.0) || !self.minkowski_p.is_finite() {
            return Err(invalid(format!(
                "minkowski_p {} must be >= 1",
                self.minkowski_p
            )));
        }
        if !(self.saturation_threshold > 0.0 && self.saturation_threshold <= 1.0) {
            return Err(invalid(format!(
                "saturation_threshold {} must lie in (0, 1]",
                self.saturation_threshold
            )));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return Err(invalid("smoothing_sigma must be non-negative"));
        }
        Ok(())
    }
}

pub fn estimate_classical(
    image: &LinearImage,
    config: &EstimatorConfig,
) -> Result<IlluminantVector> {
    estimate_classical_masked(image, None, config)
}

/// Like [`estimate_classical`], restricted to pixels where `valid` is true.
pub fn estimate_classical_masked(
    image: &LinearImage,
    valid: Option<&[bool]>,
    config: &EstimatorConfig,
) -> Result<IlluminantVector> {
    config.validate()?;
    if let Some(v) = valid {
        if v.len() != image.pixel_count() {
            return Err(invalid("validity mask does not match image size"));
        }
    }
    let used = included_pixels(image, valid, config.saturation_threshold);

    let stat = match config.method {
        Method::WhitePatch => channel_stat(image.data(), &used, f64::INFINITY),
        Method::GrayWorld => channel_stat(image.data(), &used, 1.0),
        Method::ShadesOfGray => channel_stat(image.data(), &used, config.minkowski_p),
        Method::GrayEdge1 | Method::GrayEdge2 => {
            if image.height() < 3 || image.width() < 3 {
                return Err(invalid("gray edge needs an image of at least 3x3"));
            }
            let order = if config.method == Method::GrayEdge1 {
                1
            } else {
                2
            };
            let edges = edge_magnitude(image, config.smoothing_sigma, order);
            channel_stat(&edges, &used, config.minkowski_p)
        }
    };
    if stat.iter().all(|&s| s == 0.0) || stat.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateScene(format!(
            "{} statistic is {stat:?}",
            config.method
        )));
    }
    IlluminantVector::from_array(stat)
}

/// Indices of valid pixels with every channel below `threshold` of full scale.
fn included_pixels(image: &LinearImage, valid: Option<&[bool]>, threshold: f64) -> Vec<usize> {
    image
        .pixels()
        .enumerate()
        .filter(|(i, p)| valid.map_or(true, |v| v[*i]) && p.iter().all(|&x| x < threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Per-channel Minkowski mean of order `p` over the selected pixels; `p = ∞`
/// is the maximum. Values are scaled by the channel maximum first so large
/// orders neither overflow nor underflow.
fn channel_stat(data: &[f64], pixels: &[usize], p: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    if pixels.is_empty() {
        return out;
    }
    for (ch, o) in out.iter_mut().enumerate() {
        let vals = pixels.iter().map(|&i| data[i * CHANNELS + ch]);
        let max = vals.clone().fold(0.0, f64::max);
        *o = if p.is_infinite() || max == 0.0 {
            max
        } else if p == 1.0 {
            vals.sum::<f64>() / pixels.len() as f64
        } else {
            let mean = vals.map(|v| (v / max).powf(p)).sum::<f64>() / pixels.len() as f64;
            max * mean.powf(1.0 / p)
        };
    }
    out
}

/// Gaussian kernel truncated at 3σ, normalized to unit sum.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution of one channel plane with edge replication.
fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * plane[y * w + clampi(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp[clampi(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel, per-channel derivative magnitude of the smoothed image, in the
/// same interleaved layout as the image. Central differences with edge
/// replication; order 2 uses `sqrt(fxx² + 4 fxy² + fyy²)`.
fn edge_magnitude(image: &LinearImage, sigma: f64, order: u8) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let kernel = gaussian_kernel(sigma);
    let mut out = vec![0.0; h * w * CHANNELS];
    for ch in 0..CHANNELS {
        let plane: Vec<f64> = image
            .data()
            .iter()
            .skip(ch)
            .step_by(CHANNELS)
            .copied()
            .collect();
        let s = blur_plane(&plane, h, w, &kernel);
        let at = |y: i64, x: i64| {
            s[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize]
        };
        let dx = |y: i64, x: i64| 0.5 * (at(y, x + 1) - at(y, x - 1));
        let dy = |y: i64, x: i64| 0.5 * (at(y + 1, x) - at(y - 1, x));
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let m = if order == 1 {
                    dx(y, x).hypot(dy(y, x))
                } else {
                    let fxx = at(y, x + 1) - 2.0 * at(y, x) + at(y, x - 1);
                    let fyy = at(y + 1, x) - 2.0 * at(y, x) + at(y - 1, x);
                    let fxy = 0.5 * (dy(y, x + 1) - dy(y, x - 1));
                    (fxx * fxx + 4.0 * fxy * fxy + fyy * fyy).sqrt()
                };
                out[(y as usize * w + x as usize) * CHANNELS + ch] = m;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{angular_distance, apply_diagonal, GainTriple};
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> LinearImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(h, w, |_, _| {
            [
                rng.random_range(0.05..0.9),
                rng.random_range(0.05..0.9),
                rng.random_range(0.05..0.9),
            ]
        })
        .unwrap()
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("grey_world".parse::<Method>().is_err());
    }

    #[test]
    fn uniform_image_gray_world_and_shades() {
        let img = LinearImage::filled(5, 5, [0.8, 0.3, 0.52]).unwrap();
        let expect = IlluminantVector::new(0.8, 0.3, 0.52).unwrap().to_array();
        for m in [Method::GrayWorld, Method::ShadesOfGray, Method::WhitePatch] {
            let e = estimate_classical(&img, &EstimatorConfig::new(m)).unwrap();
            assert!(
                angular_distance(e.to_array(), expect).unwrap() < 1e-9,
                "{m}"
            );
        }
        for p in [1.0, 2.5, 6.0, 40.0] {
            let cfg = EstimatorConfig {
                minkowski_p: p,
                ..EstimatorConfig::new(Method::ShadesOfGray)
            };
            let e = estimate_classical(&img, &cfg).unwrap();
            assert!(angular_distance(e.to_array(), expect).unwrap() < 1e-9);
        }
    }

    #[test]
    fn gray_world_normalizes_channel_means() {
        // Means (0.5, 0.25, 0.25): two pixels per channel.
        let img = LinearImage::new(1, 2, vec![0.4, 0.2, 0.3, 0.6, 0.3, 0.2]).unwrap();
        let e = estimate_classical(&img, &EstimatorConfig::new(Method::GrayWorld)).unwrap();
        let n = (0.25f64 + 0.0625 + 0.0625).sqrt();
        let expect = [0.5 / n, 0.25 / n, 0.25 / n];
        for (a, b) in e.to_array().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((e.r - 0.8165).abs() < 1e-4 && (e.g - 0.4082).abs() < 1e-4);
    }

    #[test]
    fn shades_of_gray_p1_is_gray_world() {
        let img = random_image(12, 9, 4);
        let gw = estimate_classical(&img, &EstimatorConfig::new(Method::GrayWorld)).unwrap();
        let cfg = EstimatorConfig {
            minkowski_p: 1.0,
            ..EstimatorConfig::new(Method::ShadesOfGray)
        };
        assert_eq!(estimate_classical(&img, &cfg).unwrap(), gw);
    }

    #[test]
    fn shades_of_gray_large_p_approaches_white_patch() {
        for seed in 0..10 {
            let img = random_image(24, 24, 100 + seed);
            let wp = estimate_classical(&img, &EstimatorConfig::new(Method::WhitePatch)).unwrap();
            let cfg = EstimatorConfig {
                minkowski_p: 100.0,
                ..EstimatorConfig::new(Method::ShadesOfGray)
            };
            let sg = estimate_classical(&img, &cfg).unwrap();
            assert!(angular_distance(wp.to_array(), sg.to_array()).unwrap() < 1.0);
        }
    }

    #[test]
    fn gray_edge_on_constant_image_is_degenerate() {
        let img = LinearImage::filled(6, 6, [0.2, 0.4, 0.3]).unwrap();
        for m in [Method::GrayEdge1, Method::GrayEdge2] {
            let r = estimate_classical(&img, &EstimatorConfig::new(m));
            assert!(matches!(r, Err(Error::DegenerateScene(_))), "{m}");
        }
    }

    #[test]
    fn gray_edge_needs_3x3() {
        let img = random_image(2, 8, 1);
        assert!(matches!(
            estimate_classical(&img, &EstimatorConfig::new(Method::GrayEdge1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn config_validation() {
        let img = random_image(4, 4, 1);
        let bad_p = EstimatorConfig {
            minkowski_p: 0.5,
            ..EstimatorConfig::new(Method::ShadesOfGray)
        };
        assert!(estimate_classical(&img, &bad_p).is_err());
        let bad_t = EstimatorConfig {
            saturation_threshold: 0.0,
            ..EstimatorConfig::new(Method::GrayWorld)
        };
        assert!(estimate_classical(&img, &bad_t).is_err());
    }

    #[test]
    fn saturated_pixels_are_excluded() {
        // One clipped white pixel would otherwise dominate white patch.
        let mut data = vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3];
        data.extend_from_slice(&[1.0, 1.0, 1.0]);
        let img = LinearImage::new(1, 3, data).unwrap();
        let e = estimate_classical(&img, &EstimatorConfig::new(Method::WhitePatch)).unwrap();
        let expect = IlluminantVector::new(0.1, 0.2, 0.3).unwrap();
        assert!(angular_distance(e.to_array(), expect.to_array()).unwrap() < 1e-9);
    }

    #[test]
    fn exposure_invariance_all_methods() {
        let img = random_image(16, 16, 77);
        for m in Method::ALL {
            let cfg = EstimatorConfig::new(m);
            let base = estimate_classical(&img, &cfg).unwrap();
            // Scales keep every pixel below the saturation cutoff.
            for s in [0.01, 0.37, 1.05] {
                let e = estimate_classical(&img.scaled(s).unwrap(), &cfg).unwrap();
                assert!(
                    angular_distance(base.to_array(), e.to_array()).unwrap() < 1e-6,
                    "{m} {s}"
                );
            }
        }
    }

    #[test]
    fn gray_world_recovers_cast_on_balanced_scene() {
        // Scene whose channel means are exactly equal: every pixel is a
        // permutation of the same triple.
        let perms = [[0, 1, 2], [1, 2, 0], [2, 0, 1]];
        let base = [0.2, 0.5, 0.7];
        let scene = LinearImage::from_fn(9, 9, |r, c| {
            let p = perms[(r * 9 + c) % 3];
            [base[p[0]], base[p[1]], base[p[2]]]
        })
        .unwrap();
        // Correction gains; the cast applied to the scene is their inverse.
        let gains = GainTriple::new(1.6, 1.0, 0.75).unwrap();
        let cast = GainTriple::from_array(gains.to_array().map(|g| 1.0 / g)).unwrap();
        let lit = apply_diagonal(&scene, cast).unwrap();
        // 81 pixels, 27 of each permutation: means are equal.
        let e = estimate_classical(&lit, &EstimatorConfig::new(Method::GrayWorld)).unwrap();
        let truth = IlluminantVector::from_gains(gains).to_array();
        assert!(angular_distance(e.to_array(), truth).unwrap() < 0.01);
    }
}
