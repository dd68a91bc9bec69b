//! Per-pixel kernel fields and what is derived from them.
//!
//! A [`KernelField`] holds, for every pixel, a C_out × C_in bank of K×K
//! kernels. Output channel `c` at pixel `p` is the sum over input channels
//! `i` of the dot product between kernel (c, i) and the K×K neighborhood of
//! `p` in input channel `i`. Neighborhoods use edge replication.

use std::io::{Read, Write};

use crate::color::{LinearImage, CHANNELS};
use crate::error::{invalid, Error, Result};

const MAGIC: &[u8; 4] = b"KPF1";

/// Weights indexed `[row][col][c_out][c_in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    height: usize,
    width: usize,
    k: usize,
    weights: Vec<f64>,
}

impl KernelField {
    pub fn new(height: usize, width: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(invalid(format!("kernel order {k} must be odd and >= 1")));
        }
        if height == 0 || width == 0 {
            return Err(invalid("kernel field dimensions must be positive"));
        }
        let expect = height * width * CHANNELS * CHANNELS * k * k;
        if weights.len() != expect {
            return Err(invalid(format!(
                "expected {expect} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("kernel weights must be finite"));
        }
        Ok(Self {
            height,
            width,
            k,
            weights,
        })
    }

    pub fn zeros(height: usize, width: usize, k: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            k,
            vec![0.0; height * width * CHANNELS * CHANNELS * k * k],
        )
    }

    /// Center tap of kernel (c, c) set to `gains[c]`, everything else zero.
    pub fn diagonal(height: usize, width: usize, k: usize, gains: [f64; 3]) -> Result<Self> {
        Self::from_pixel_diagonal(height, width, k, |_, _| gains)
    }

    pub fn identity(height: usize, width: usize, k: usize) -> Result<Self> {
        Self::diagonal(height, width, k, [1.0; 3])
    }

    /// Per-pixel center-tap diagonal gains.
    pub fn from_pixel_diagonal(
        height: usize,
        width: usize,
        k: usize,
        mut gains: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut field = Self::zeros(height, width, k)?;
        let center = k / 2;
        for r in 0..height {
            for c in 0..width {
                let g = gains(r, c);
                for ch in 0..CHANNELS {
                    let i = field.index(r, c, ch, ch, center, center);
                    field.weights[i] = g[ch];
                }
            }
        }
        if field.weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("kernel weights must be finite"));
        }
        Ok(field)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel_order(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of weights stored per pixel (C_out · C_in · K²).
    pub fn weights_per_pixel(&self) -> usize {
        CHANNELS * CHANNELS * self.k * self.k
    }

    #[inline]
    pub fn index(
        &self,
        row: usize,
        col: usize,
        c_out: usize,
        c_in: usize,
        ky: usize,
        kx: usize,
    ) -> usize {
        ((((row * self.width + col) * CHANNELS + c_out) * CHANNELS + c_in) * self.k + ky) * self.k
            + kx
    }

    #[inline]
    pub fn get(
        &self,
        row: usize,
        col: usize,
        c_out: usize,
        c_in: usize,
        ky: usize,
        kx: usize,
    ) -> f64 {
        self.weights[self.index(row, col, c_out, c_in, ky, kx)]
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.k,
            self.weights.iter().map(|w| w * s).collect(),
        )
    }

    /// Mean |weight| over aligned (c, c) kernels and over cross-channel kernels.
    pub fn mean_abs_aligned_and_cross(&self) -> (f64, f64) {
        let kk = self.k * self.k;
        let (mut aligned, mut cross) = (0.0, 0.0);
        for (j, bank) in self.weights.chunks_exact(kk).enumerate() {
            let pair = j % (CHANNELS * CHANNELS);
            let s: f64 = bank.iter().map(|w| w.abs()).sum();
            if pair / CHANNELS == pair % CHANNELS {
                aligned += s;
            } else {
                cross += s;
            }
        }
        let n_px = (self.height * self.width * kk) as f64;
        (
            aligned / (n_px * CHANNELS as f64),
            cross / (n_px * (CHANNELS * (CHANNELS - 1)) as f64),
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.height, self.width, CHANNELS, CHANNELS, self.k] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &x in &self.weights {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.weights.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad kernel field magic".into()));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [h, w, c_out, c_in, k] = dims;
        if c_out != CHANNELS || c_in != CHANNELS {
            return Err(Error::Format(format!(
                "unsupported channel counts {c_out}x{c_in}"
            )));
        }
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c_out * c_in * k * k))
            .ok_or_else(|| Error::Format("kernel field dimensions overflow".into()))?;
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)?;
        let weights = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(h, w, k, weights).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Output of kernel application. Unlike [`LinearImage`] it may hold negative
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ReferenceImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(invalid("reference data length does not match dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("reference values must be finite"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_linear(image: &LinearImage) -> Self {
        Self {
            height: image.height(),
            width: image.width(),
            data: image.data().to_vec(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Negative values clipped to zero.
    pub fn to_linear(&self) -> LinearImage {
        LinearImage::from_vec_unchecked(
            self.height,
            self.width,
            self.data.iter().map(|v| v.max(0.0)).collect(),
        )
    }
}

fn check_dims(input: &LinearImage, field: &KernelField) -> Result<()> {
    if input.height() != field.height || input.width() != field.width {
        return Err(invalid(format!(
            "input is {}x{} but kernel field is {}x{}",
            input.height(),
            input.width(),
            field.height,
            field.width
        )));
    }
    Ok(())
}

/// Row-major offsets of the K×K neighborhood of (row, col), edge-replicated.
#[inline]
fn neighborhood(h: usize, w: usize, k: usize, row: usize, col: usize, out: &mut [usize]) {
    let r = (k / 2) as isize;
    let mut n = 0;
    for dy in -r..=r {
        let y = (row as isize + dy).clamp(0, h as isize - 1) as usize;
        for dx in -r..=r {
            let x = (col as isize + dx).clamp(0, w as isize - 1) as usize;
            out[n] = y * w + x;
            n += 1;
        }
    }
}

pub fn apply_kernels(input: &LinearImage, field: &KernelField) -> Result<ReferenceImage> {
    check_dims(input, field)?;
    let (h, w, k) = (field.height, field.width, field.k);
    let kk = k * k;
    let x = input.data();
    let mut nb = vec![0usize; kk];
    let mut out = vec![0.0; h * w * CHANNELS];
    for row in 0..h {
        for col in 0..w {
            neighborhood(h, w, k, row, col, &mut nb);
            let p = row * w + col;
            let bank =
                &field.weights[p * CHANNELS * CHANNELS * kk..(p + 1) * CHANNELS * CHANNELS * kk];
            for c_out in 0..CHANNELS {
                let mut acc = 0.0;
                for c_in in 0..CHANNELS {
                    let kern =
                        &bank[(c_out * CHANNELS + c_in) * kk..(c_out * CHANNELS + c_in + 1) * kk];
                    for (t, &q) in nb.iter().enumerate() {
                        acc += kern[t] * x[q * CHANNELS + c_in];
                    }
                }
                out[p * CHANNELS + c_out] = acc;
            }
        }
    }
    Ok(ReferenceImage {
        height: h,
        width: w,
        data: out,
    })
}

/// Gradient of a scalar loss with respect to the field weights, given the
/// gradient `d_out` with respect to the kernel-application output (same
/// layout as the image).
pub(crate) fn apply_kernels_weight_grad(input: &LinearImage, k: usize, d_out: &[f64]) -> Vec<f64> {
    let (h, w) = (input.height(), input.width());
    let kk = k * k;
    let x = input.data();
    let mut nb = vec![0usize; kk];
    let mut grad = vec![0.0; h * w * CHANNELS * CHANNELS * kk];
    for row in 0..h {
        for col in 0..w {
            neighborhood(h, w, k, row, col, &mut nb);
            let p = row * w + col;
            for c_out in 0..CHANNELS {
                let g = d_out[p * CHANNELS + c_out];
                if g == 0.0 {
                    continue;
                }
                for c_in in 0..CHANNELS {
                    let base = ((p * CHANNELS + c_out) * CHANNELS + c_in) * kk;
                    for (t, &q) in nb.iter().enumerate() {
                        grad[base + t] = g * x[q * CHANNELS + c_in];
                    }
                }
            }
        }
    }
    grad
}

/// Sum of |w| over every cross-channel (c_out ≠ c_in) weight at every pixel.
pub fn regulation_penalty(field: &KernelField) -> f64 {
    let kk = field.k * field.k;
    field
        .weights
        .chunks_exact(kk)
        .enumerate()
        .filter(|(j, _)| {
            let pair = j % (CHANNELS * CHANNELS);
            pair / CHANNELS != pair % CHANNELS
        })
        .map(|(_, bank)| bank.iter().map(|w| w.abs()).sum::<f64>())
        .sum()
}

/// Subgradient of [`regulation_penalty`] (sign(0) = 0).
pub(crate) fn regulation_penalty_grad(field: &KernelField) -> Vec<f64> {
    let kk = field.k * field.k;
    let mut g = vec![0.0; field.weights.len()];
    for (j, (bank, out)) in field
        .weights
        .chunks_exact(kk)
        .zip(g.chunks_exact_mut(kk))
        .enumerate()
    {
        let pair = j % (CHANNELS * CHANNELS);
        if pair / CHANNELS != pair % CHANNELS {
            for (o, &w) in out.iter_mut().zip(bank) {
                *o = if w > 0.0 {
                    1.0
                } else if w < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
    }
    g
}

/// Per-pixel gain triples with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMap {
    pub height: usize,
    pub width: usize,
    pub gains: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl GainMap {
    pub fn constant(height: usize, width: usize, gains: [f64; 3]) -> Self {
        Self {
            height,
            width,
            gains: vec![gains; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Multiplies every pixel of `image` by its gain. Dimensions must match.
    pub fn apply(&self, image: &LinearImage) -> Result<LinearImage> {
        if image.height() != self.height || image.width() != self.width {
            return Err(invalid("gain map and image sizes differ"));
        }
        let data = image
            .pixels()
            .zip(&self.gains)
            .flat_map(|(p, g)| [0, 1, 2].map(|c| (p[c] * g[c]).max(0.0)))
            .collect();
        Ok(LinearImage::from_vec_unchecked(
            self.height,
            self.width,
            data,
        ))
    }
}

pub const DEFAULT_DARK_THRESHOLD: f64 = 0.02;

/// Ratio reference / input per pixel and channel. Pixels with any input
/// channel below `dark_threshold`, or any non-positive reference channel, are
/// flagged invalid; their stored gains are whatever the ratio gives (0 when
/// it is not finite).
pub fn illumination_vector_map(
    input: &LinearImage,
    reference: &ReferenceImage,
    dark_threshold: f64,
) -> Result<GainMap> {
    if input.height() != reference.height || input.width() != reference.width {
        return Err(invalid("input and reference sizes differ"));
    }
    let mut gains = Vec::with_capacity(input.pixel_count());
    let mut valid = Vec::with_capacity(input.pixel_count());
    for (x, y) in input.pixels().zip(reference.data.chunks_exact(CHANNELS)) {
        let ok = x.iter().all(|&v| v >= dark_threshold && v > 0.0) && y.iter().all(|&v| v > 0.0);
        let g = [0, 1, 2].map(|c| {
            let r = y[c] / x[c];
            if r.is_finite() {
                r
            } else {
                0.0
            }
        });
        gains.push(g);
        valid.push(ok);
    }
    Ok(GainMap {
        height: input.height(),
        width: input.width(),
        gains,
        valid,
    })
}

/// Aligned-corners source coordinate for destination index `i`.
#[inline]
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear upsampling of gains (aligned corners), nearest-neighbor upsampling
/// of validity flags.
pub fn upsample_gain_map(map: &GainMap, target_h: usize, target_w: usize) -> Result<GainMap> {
    if target_h < map.height || target_w < map.width {
        return Err(invalid("target size must not be smaller than the map"));
    }
    let mut gains = Vec::with_capacity(target_h * target_w);
    let mut valid = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let sy = source_coord(i, map.height, target_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(map.height - 1);
        let fy = sy - y0 as f64;
        for j in 0..target_w {
            let sx = source_coord(j, map.width, target_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(map.width - 1);
            let fx = sx - x0 as f64;
            let at = |y: usize, x: usize| map.gains[y * map.width + x];
            let g = [0, 1, 2].map(|c| {
                let top = at(y0, x0)[c] * (1.0 - fx) + at(y0, x1)[c] * fx;
                let bottom = at(y1, x0)[c] * (1.0 - fx) + at(y1, x1)[c] * fx;
                top * (1.0 - fy) + bottom * fy
            });
            gains.push(g);
            let ny = sy.round() as usize;
            let nx = sx.round() as usize;
            valid.push(map.valid[ny.min(map.height - 1) * map.width + nx.min(map.width - 1)]);
        }
    }
    Ok(GainMap {
        height: target_h,
        width: target_w,
        gains,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{apply_diagonal, GainTriple};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> LinearImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(h, w, |_, _| {
            [
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
            ]
        })
        .unwrap()
    }

    fn random_field(h: usize, w: usize, k: usize, seed: u64) -> KernelField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = h * w * 9 * k * k;
        KernelField::new(
            h,
            w,
            k,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct transcription of the per-pixel sum with explicit clamping, used
    /// as an oracle for the indexed implementation.
    fn apply_naive(x: &LinearImage, f: &KernelField) -> Vec<f64> {
        let (h, w, k) = (x.height(), x.width(), f.kernel_order());
        let r = (k / 2) as i64;
        let mut out = vec![0.0; h * w * 3];
        for row in 0..h {
            for col in 0..w {
                for co in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..3 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y =
                                    (row as i64 + ky as i64 - r).clamp(0, h as i64 - 1) as usize;
                                let xx =
                                    (col as i64 + kx as i64 - r).clamp(0, w as i64 - 1) as usize;
                                s += f.get(row, col, co, ci, ky, kx) * x.get(y, xx, ci);
                            }
                        }
                    }
                    out[(row * w + col) * 3 + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn construction_rejects_bad_fields() {
        assert!(KernelField::zeros(2, 2, 2).is_err());
        assert!(KernelField::new(1, 1, 1, vec![0.0; 8]).is_err());
        let mut w = vec![0.0; 9];
        w[3] = f64::NAN;
        assert!(KernelField::new(1, 1, 1, w).is_err());
    }

    #[test]
    fn identity_field_reproduces_input() {
        let x = random_image(7, 5, 1);
        for k in [1, 3, 5] {
            let y = apply_kernels(&x, &KernelField::identity(7, 5, k).unwrap()).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn diagonal_field_matches_apply_diagonal() {
        let x = random_image(16, 16, 2);
        let g = [2.0, 1.0, 0.5];
        let y = apply_kernels(&x, &KernelField::diagonal(16, 16, 3, g).unwrap()).unwrap();
        let expect = apply_diagonal(&x, GainTriple::from_array(g).unwrap()).unwrap();
        assert_eq!(y.data(), expect.data());
    }

    #[test]
    fn box_kernel_on_constant_image() {
        let x = LinearImage::filled(6, 6, [0.6; 3]).unwrap();
        let mut f = KernelField::zeros(6, 6, 3).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..3 {
                    for t in 0..9 {
                        let i = f.index(r, c, ch, ch, t / 3, t % 3);
                        f.weights[i] = 1.0 / 9.0;
                    }
                }
            }
        }
        let y = apply_kernels(&x, &f).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_oracle() {
        for k in [1, 3, 5] {
            let x = random_image(5, 7, 10 + k as u64);
            let f = random_field(5, 7, k, 20 + k as u64);
            let y = apply_kernels(&x, &f).unwrap();
            for (a, b) in y.data().iter().zip(apply_naive(&x, &f)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = random_image(4, 4, 1);
        let f = KernelField::identity(4, 5, 1).unwrap();
        assert!(matches!(
            apply_kernels(&x, &f),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn weight_grad_matches_linearization() {
        // y is linear in the weights, so <d_out, y(F)> = <grad, F>.
        let x = random_image(4, 6, 3);
        let f = random_field(4, 6, 3, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d: Vec<f64> = (0..4 * 6 * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y = apply_kernels(&x, &f).unwrap();
        let lhs: f64 = y.data().iter().zip(&d).map(|(a, b)| a * b).sum();
        let g = apply_kernels_weight_grad(&x, 3, &d);
        let rhs: f64 = g.iter().zip(f.weights()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(
            regulation_penalty(&KernelField::diagonal(3, 3, 3, [2.0, -1.0, 4.0]).unwrap()),
            0.0
        );
        let mut w = vec![0.0; 9];
        for co in 0..3 {
            for ci in 0..3 {
                w[co * 3 + ci] = if co == ci { 7.0 } else { -0.5 };
            }
        }
        let f = KernelField::new(1, 1, 1, w).unwrap();
        assert_eq!(regulation_penalty(&f), 3.0);
        assert_eq!(regulation_penalty(&f.scaled(2.0).unwrap()), 6.0);
    }

    #[test]
    fn gain_map_examples() {
        let x = random_image(5, 5, 6);
        let m =
            illumination_vector_map(&x, &ReferenceImage::from_linear(&x), DEFAULT_DARK_THRESHOLD)
                .unwrap();
        assert!(m.valid.iter().all(|v| *v));
        assert!(m
            .gains
            .iter()
            .all(|g| g.iter().all(|v| (v - 1.0).abs() < 1e-15)));

        let g = [0.5, 1.0, 2.0];
        let y = apply_diagonal(&x, GainTriple::from_array(g).unwrap()).unwrap();
        let m =
            illumination_vector_map(&x, &ReferenceImage::from_linear(&y), DEFAULT_DARK_THRESHOLD)
                .unwrap();
        for v in &m.gains {
            for c in 0..3 {
                assert!((v[c] - g[c]).abs() < 1e-15);
            }
        }

        let dark = LinearImage::new(1, 2, vec![0.001, 0.5, 0.5, 0.3, 0.3, 0.3]).unwrap();
        let m = illumination_vector_map(&dark, &ReferenceImage::from_linear(&dark), 0.02).unwrap();
        assert_eq!(m.valid, vec![false, true]);

        let r = ReferenceImage::new(1, 2, vec![0.1, 0.2, 0.3, 0.1, -0.1, 0.3]).unwrap();
        let m = illumination_vector_map(&LinearImage::filled(1, 2, [0.5; 3]).unwrap(), &r, 0.02)
            .unwrap();
        assert_eq!(m.valid, vec![true, false]);
    }

    #[test]
    fn identity_then_gain_map_is_all_ones() {
        let x = random_image(8, 8, 7);
        let y = apply_kernels(&x, &KernelField::identity(8, 8, 3).unwrap()).unwrap();
        let m = illumination_vector_map(&x, &y, DEFAULT_DARK_THRESHOLD).unwrap();
        assert!(m.gains.iter().all(|g| *g == [1.0; 3]));
    }

    #[test]
    fn per_pixel_diagonal_field_is_recovered_exactly() {
        let x = random_image(6, 6, 8);
        let f = KernelField::from_pixel_diagonal(6, 6, 3, |r, c| {
            [0.5 + r as f64 * 0.1, 1.0, 2.0 - c as f64 * 0.2]
        })
        .unwrap();
        let m =
            illumination_vector_map(&x, &apply_kernels(&x, &f).unwrap(), DEFAULT_DARK_THRESHOLD)
                .unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let g = m.gains[r * 6 + c];
                assert!((g[0] - (0.5 + r as f64 * 0.1)).abs() < 1e-14);
                assert!((g[2] - (2.0 - c as f64 * 0.2)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let m = GainMap::constant(3, 2, [0.7, 1.0, 1.3]);
        let u = upsample_gain_map(&m, 9, 7).unwrap();
        assert!(u
            .gains
            .iter()
            .all(|g| (g[0] - 0.7).abs() < 1e-15 && (g[2] - 1.3).abs() < 1e-15));

        let m = GainMap {
            height: 1,
            width: 2,
            gains: vec![[1.0; 3], [3.0; 3]],
            valid: vec![true, false],
        };
        let u = upsample_gain_map(&m, 1, 4).unwrap();
        let expect = [1.0, 1.0 + 2.0 / 3.0, 1.0 + 4.0 / 3.0, 3.0];
        for (g, e) in u.gains.iter().zip(expect) {
            assert!((g[0] - e).abs() < 1e-12);
        }
        assert_eq!(u.valid, vec![true, true, false, false]);

        let m = GainMap {
            height: 2,
            width: 2,
            gains: vec![[1.0; 3], [2.0; 3], [3.0; 3], [4.0; 3]],
            valid: vec![true, false, true, true],
        };
        assert_eq!(upsample_gain_map(&m, 2, 2).unwrap(), m);
        assert!(upsample_gain_map(&m, 1, 2).is_err());
    }

    #[test]
    fn kpf1_layout() {
        let f = KernelField::diagonal(1, 2, 1, [2.0, 1.0, 0.5]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"KPF1");
        let dims: Vec<u32> = bytes[4..24]
            .chunks(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![1, 2, 3, 3, 1]);
        assert_eq!(bytes.len(), 24 + 4 * 18);
        assert_eq!(&bytes[24..28], &2.0f32.to_le_bytes());
        assert_eq!(KernelField::read_from(&bytes[..]).unwrap(), f);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            KernelField::read_from(&bad[..]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn application_is_linear_in_the_image(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x1 = random_image(5, 4, seed);
            let x2 = random_image(5, 4, seed + 1);
            let f = random_field(5, 4, 3, seed + 2);
            let y1 = apply_naive(&x1, &f);
            let y2 = apply_naive(&x2, &f);
            // Combine on the raw data: the combination may be negative.
            let comb: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect();
            let shift = comb.iter().copied().fold(0.0, f64::min).abs();
            let xc = LinearImage::new(5, 4, comb.iter().map(|v| v + shift).collect()).unwrap();
            let yc = apply_kernels(&xc, &f).unwrap();
            let ones = apply_kernels(&LinearImage::filled(5, 4, [1.0; 3]).unwrap(), &f).unwrap();
            for i in 0..yc.data().len() {
                let expect = a * y1[i] + b * y2[i] + shift * ones.data()[i];
                prop_assert!((yc.data()[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            }
        }

        #[test]
        fn penalty_is_homogeneous_and_zero_only_without_cross(seed in 0u64..1000, s in 0.0f64..5.0) {
            let f = random_field(2, 3, 3, seed);
            let p = regulation_penalty(&f);
            prop_assert!(p > 0.0);
            prop_assert!((regulation_penalty(&f.scaled(s).unwrap()) - s * p).abs() <= 1e-10 * p.max(1.0));
        }
    }
}
