//! Color primitives shared by every stage: the linear RGB raster, illuminant
//! directions, per-channel gains (the diagonal correction model), angular
//! distance and the sRGB transfer curve.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CHANNELS: usize = 3;

/// H×W×3 linear RGB raster, row-major by (row, column, channel).
///
/// Values are finite and non-negative; the nominal range is [0, 1] but values
/// above 1 are kept as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LinearImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!(
                "image dimensions {height}x{width} must be positive"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(invalid(format!(
                "expected {} samples for {height}x{width}x3, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!(
                "pixel value {v} is negative or non-finite"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Caller guarantees the invariants.
    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        debug_assert!(data.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * CHANNELS + ch]
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(CHANNELS).map(|p| [p[0], p[1], p[2]])
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Multiplies every sample by `s` (must be finite and non-negative).
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(invalid(format!(
                "scale {s} must be finite and non-negative"
            )));
        }
        Ok(Self::from_vec_unchecked(
            self.height,
            self.width,
            self.data.iter().map(|v| v * s).collect(),
        ))
    }

    /// Clips to [0, 1] and applies the display gamma `x^(1/2.2)`.
    pub fn to_display(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| v.clamp(0.0, 1.0).powf(1.0 / 2.2))
            .collect();
        Self::from_vec_unchecked(self.height, self.width, data)
    }
}

/// Unit-L2 RGB direction of a light source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminantVector {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl IlluminantVector {
    /// Normalizes `rgb` to unit length. Components must be finite and
    /// non-negative, and not all zero.
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        let v = [r, g, b];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid(format!(
                "illuminant {v:?} must be finite and non-negative"
            )));
        }
        let n = norm3(v);
        if n == 0.0 {
            return Err(invalid("illuminant is the zero vector"));
        }
        Ok(Self {
            r: r / n,
            g: g / n,
            b: b / n,
        })
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    pub fn white() -> Self {
        let s = 1.0 / 3f64.sqrt();
        Self { r: s, g: s, b: s }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn normalized(self) -> Result<Self> {
        Self::new(self.r, self.g, self.b)
    }

    /// Illuminant that the given correction gains neutralize, i.e. the
    /// direction of `1 / gains`.
    pub fn from_gains(gains: GainTriple) -> Self {
        let inv = gains.to_array().map(|g| 1.0 / g);
        let n = norm3(inv);
        Self {
            r: inv[0] / n,
            g: inv[1] / n,
            b: inv[2] / n,
        }
    }
}

/// Per-channel multiplicative correction (the diagonal of the correction
/// matrix). All components are positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainTriple {
    pub r_gain: f64,
    pub g_gain: f64,
    pub b_gain: f64,
}

impl GainTriple {
    pub fn new(r_gain: f64, g_gain: f64, b_gain: f64) -> Result<Self> {
        let g = [r_gain, g_gain, b_gain];
        if g.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(invalid(format!("gains {g:?} must be positive and finite")));
        }
        Ok(Self {
            r_gain,
            g_gain,
            b_gain,
        })
    }

    pub fn from_array(g: [f64; 3]) -> Result<Self> {
        Self::new(g[0], g[1], g[2])
    }

    pub fn unit() -> Self {
        Self {
            r_gain: 1.0,
            g_gain: 1.0,
            b_gain: 1.0,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r_gain, self.g_gain, self.b_gain]
    }

    /// Component-wise product; applying `self` then `other` equals applying
    /// the product.
    pub fn compose(self, other: GainTriple) -> GainTriple {
        GainTriple {
            r_gain: self.r_gain * other.r_gain,
            g_gain: self.g_gain * other.g_gain,
            b_gain: self.b_gain * other.b_gain,
        }
    }

    /// Rescales so that the green gain is 1.
    pub fn green_normalized(self) -> GainTriple {
        GainTriple {
            r_gain: self.r_gain / self.g_gain,
            g_gain: 1.0,
            b_gain: self.b_gain / self.g_gain,
        }
    }
}

pub fn apply_diagonal(image: &LinearImage, gains: GainTriple) -> Result<LinearImage> {
    let g = GainTriple::from_array(gains.to_array())?.to_array();
    let data = image
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|p| [p[0] * g[0], p[1] * g[1], p[2] * g[2]])
        .collect();
    Ok(LinearImage::from_vec_unchecked(
        image.height,
        image.width,
        data,
    ))
}

/// Green-normalized gains `(g/r, 1, g/b)` that map the illuminant to neutral.
pub fn gains_from_illuminant(illum: IlluminantVector) -> Result<GainTriple> {
    let [r, g, b] = illum.to_array();
    if !(r > 0.0 && g > 0.0 && b > 0.0) {
        return Err(Error::DegenerateIlluminant(format!(
            "illuminant ({r}, {g}, {b}) has a non-positive component"
        )));
    }
    GainTriple::new(g / r, 1.0, g / b)
}

/// Angle between two RGB directions in degrees, in [0, 180].
///
/// Inputs need not be normalized.
pub fn angular_distance(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    Ok(angular_distance_rad(a, b)?.to_degrees())
}

pub fn angular_distance_rad(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let na = norm3(a);
    let nb = norm3(b);
    if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(invalid("angular distance of a zero or non-finite vector"));
    }
    Ok(angle_between(a, b))
}

pub fn illuminant_distance(a: IlluminantVector, b: IlluminantVector) -> f64 {
    angle_between(a.to_array(), b.to_array()).to_degrees()
}

/// Same value as the arccosine of the normalized dot product, but accurate
/// for nearly parallel vectors.
fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    norm3(cross).atan2(dot3(a, b))
}

pub const SRGB_BREAKPOINT: f64 = 0.0031308;
const SRGB_A: f64 = 0.055;

/// Linear → sRGB-encoded intensity. Values above 1 follow the power branch.
pub fn srgb_transfer(x: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(invalid(format!("sRGB transfer of negative value {x}")));
    }
    Ok(srgb_encode(x))
}

#[inline]
pub(crate) fn srgb_encode(x: f64) -> f64 {
    if x <= SRGB_BREAKPOINT {
        12.92 * x
    } else {
        (1.0 + SRGB_A) * x.powf(1.0 / 2.4) - SRGB_A
    }
}

/// Derivative of [`srgb_encode`]; the linear slope is used at the breakpoint.
#[inline]
pub(crate) fn srgb_encode_slope(x: f64) -> f64 {
    if x <= SRGB_BREAKPOINT {
        12.92
    } else {
        (1.0 + SRGB_A) / 2.4 * x.powf(1.0 / 2.4 - 1.0)
    }
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}
