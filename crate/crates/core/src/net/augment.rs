//! Training-sample augmentation: random square crop, rotation with crop to
//! the inscribed square, flips, optional two-source concatenation, and an
//! area resize to the network input size.

use rand::Rng;

use crate::color::{gains_from_illuminant, IlluminantVector, LinearImage, CHANNELS};
use crate::error::{invalid, Result};
use crate::resample::{resize_area_plane, sample_bilinear};

/// A full-resolution scene with its ground-truth regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceScene {
    pub image: LinearImage,
    /// Region index per pixel, into `illuminants`.
    pub labels: Vec<u8>,
    pub illuminants: Vec<IlluminantVector>,
}

impl SourceScene {
    pub fn single(image: LinearImage, illuminant: IlluminantVector) -> Self {
        let n = image.pixel_count();
        Self {
            image,
            labels: vec![0; n],
            illuminants: vec![illuminant],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.image.pixel_count() {
            return Err(invalid("label map does not match the image"));
        }
        if self
            .labels
            .iter()
            .any(|&l| l as usize >= self.illuminants.len())
        {
            return Err(invalid("label refers to a missing illuminant"));
        }
        Ok(())
    }

    /// The image corrected with each pixel's region gains.
    pub fn corrected(&self) -> Result<LinearImage> {
        let gains: Vec<[f64; 3]> = self
            .illuminants
            .iter()
            .map(|&l| gains_from_illuminant(l).map(|g| g.to_array()))
            .collect::<Result<_>>()?;
        let mut data = self.image.data().to_vec();
        for (p, px) in data.chunks_exact_mut(CHANNELS).enumerate() {
            let g = gains[self.labels[p] as usize];
            for c in 0..CHANNELS {
                px[c] *= g[c];
            }
        }
        LinearImage::new(self.image.height(), self.image.width(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: LinearImage,
    /// Ground-truth corrected image.
    pub target: LinearImage,
    pub illuminants: Vec<IlluminantVector>,
    /// One mask per entry of `illuminants`.
    pub region_masks: Vec<Vec<bool>>,
}

impl TrainingSample {
    /// Non-augmented sample: the scene resized to `size`.
    pub fn from_scene(scene: &SourceScene, size: usize) -> Result<Self> {
        let short = scene.image.height().min(scene.image.width());
        let plan = AugmentPlan {
            crop_side: short,
            crop_row: (scene.image.height() - short) / 2,
            crop_col: (scene.image.width() - short) / 2,
            angle_deg: 0.0,
            flip_lr: false,
            flip_td: false,
        };
        apply_plan(scene, &plan, None, size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub crop_side: usize,
    pub crop_row: usize,
    pub crop_col: usize,
    pub angle_deg: f64,
    pub flip_lr: bool,
    pub flip_td: bool,
}

impl AugmentPlan {
    fn inscribed_side(&self) -> usize {
        let t = self.angle_deg.to_radians();
        (self.crop_side as f64 / (t.cos().abs() + t.sin().abs()) + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcatPlan {
    /// Split rows (top from the first source) when true, columns otherwise.
    pub horizontal: bool,
    /// First row / column taken from the second source, in output pixels.
    pub split: usize,
    pub second: AugmentPlan,
}

const MIN_SIDE: usize = 8;

pub fn sample_plan<R: Rng>(height: usize, width: usize, rng: &mut R) -> Result<AugmentPlan> {
    let short = height.min(width);
    for _ in 0..1000 {
        let frac = rng.random_range(0.1..=0.9);
        let crop_side = (frac * short as f64).floor() as usize;
        let angle_deg = rng.random_range(-60.0..=60.0);
        let flip_lr = rng.random_bool(0.5);
        let flip_td = rng.random_bool(0.5);
        let plan = AugmentPlan {
            crop_side,
            crop_row: 0,
            crop_col: 0,
            angle_deg,
            flip_lr,
            flip_td,
        };
        if crop_side < MIN_SIDE || plan.inscribed_side() < MIN_SIDE {
            continue;
        }
        return Ok(AugmentPlan {
            crop_row: rng.random_range(0..=height - crop_side),
            crop_col: rng.random_range(0..=width - crop_side),
            ..plan
        });
    }
    Err(invalid(format!(
        "{height}x{width} source is too small to crop"
    )))
}

/// Geometric part of a plan on an interleaved `ch`-channel plane; returns
/// the `m × m` result.
fn warp(data: &[f64], h: usize, w: usize, ch: usize, plan: &AugmentPlan) -> (usize, Vec<f64>) {
    let m = plan.inscribed_side();
    let t = plan.angle_deg.to_radians();
    let (sin, cos) = t.sin_cos();
    let half_src = (plan.crop_side as f64 - 1.0) / 2.0;
    let (cy, cx) = (
        plan.crop_row as f64 + half_src,
        plan.crop_col as f64 + half_src,
    );
    let half = (m as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; m * m * ch];
    for i in 0..m {
        for j in 0..m {
            let (v, u) = (i as f64 - half, j as f64 - half);
            let x = cx + u * cos - v * sin;
            let y = cy + u * sin + v * cos;
            let oi = if plan.flip_td { m - 1 - i } else { i };
            let oj = if plan.flip_lr { m - 1 - j } else { j };
            sample_bilinear(
                data,
                h,
                w,
                ch,
                y,
                x,
                &mut out[(oi * m + oj) * ch..(oi * m + oj + 1) * ch],
            );
        }
    }
    (m, out)
}

struct Warped {
    input: Vec<f64>,
    target: Vec<f64>,
    /// Per-region coverage fraction, `size × size × n_regions`.
    coverage: Vec<f64>,
}

fn warp_scene(scene: &SourceScene, plan: &AugmentPlan, size: usize) -> Result<Warped> {
    let (h, w) = (scene.image.height(), scene.image.width());
    if plan.crop_side == 0
        || plan.crop_row + plan.crop_side > h
        || plan.crop_col + plan.crop_side > w
    {
        return Err(invalid("crop lies outside the source"));
    }
    let target = scene.corrected()?;
    let nr = scene.illuminants.len();
    let mut onehot = vec![0.0; h * w * nr];
    for (p, &l) in scene.labels.iter().enumerate() {
        onehot[p * nr + l as usize] = 1.0;
    }
    let go = |data: &[f64], ch: usize| {
        let (m, warped) = warp(data, h, w, ch, plan);
        resize_area_plane(&warped, m, m, ch, size, size)
    };
    Ok(Warped {
        input: go(scene.image.data(), CHANNELS),
        target: go(target.data(), CHANNELS),
        coverage: go(&onehot, nr),
    })
}

fn finish(
    input: Vec<f64>,
    target: Vec<f64>,
    illuminants: Vec<IlluminantVector>,
    coverage: Vec<Vec<f64>>,
    size: usize,
) -> Result<TrainingSample> {
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let n = size * size;
    // Each pixel belongs to the region of largest coverage.
    let mut region_masks = vec![vec![false; n]; illuminants.len()];
    for p in 0..n {
        let best = (0..illuminants.len())
            .max_by(|&a, &b| coverage[a][p].total_cmp(&coverage[b][p]).then(b.cmp(&a)))
            .expect("at least one region");
        region_masks[best][p] = true;
    }
    Ok(TrainingSample {
        input: LinearImage::new(size, size, clamp(input))?,
        target: LinearImage::new(size, size, clamp(target))?,
        illuminants,
        region_masks,
    })
}

/// Applies a plan (and optional concatenation with a second scene).
pub fn apply_plan(
    scene: &SourceScene,
    plan: &AugmentPlan,
    concat: Option<(&SourceScene, &ConcatPlan)>,
    size: usize,
) -> Result<TrainingSample> {
    scene.validate()?;
    let a = warp_scene(scene, plan, size)?;
    let planes = |wp: &Warped, nr: usize| -> Vec<Vec<f64>> {
        (0..nr)
            .map(|r| (0..size * size).map(|p| wp.coverage[p * nr + r]).collect())
            .collect()
    };
    let na = scene.illuminants.len();
    let Some((other, cp)) = concat else {
        let coverage = planes(&a, na);
        return finish(a.input, a.target, scene.illuminants.clone(), coverage, size);
    };
    other.validate()?;
    if cp.split == 0 || cp.split >= size {
        return Err(invalid("concatenation split must lie inside the image"));
    }
    let b = warp_scene(other, &cp.second, size)?;
    let nb = other.illuminants.len();
    let from_b = |p: usize| {
        let (r, c) = (p / size, p % size);
        if cp.horizontal {
            r >= cp.split
        } else {
            c >= cp.split
        }
    };
    let mut coverage = planes(&a, na);
    let mut input = a.input;
    let mut target = a.target;
    for p in 0..size * size {
        if from_b(p) {
            input[p * CHANNELS..(p + 1) * CHANNELS]
                .copy_from_slice(&b.input[p * CHANNELS..(p + 1) * CHANNELS]);
            target[p * CHANNELS..(p + 1) * CHANNELS]
                .copy_from_slice(&b.target[p * CHANNELS..(p + 1) * CHANNELS]);
        }
    }
    for (p, cov) in (0..size * size).map(|p| (p, from_b(p))) {
        if cov {
            for plane in coverage.iter_mut() {
                plane[p] = 0.0;
            }
        }
    }
    for mut plane in planes(&b, nb) {
        for (p, v) in plane.iter_mut().enumerate() {
            if !from_b(p) {
                *v = 0.0;
            }
        }
        coverage.push(plane);
    }
    let mut illuminants = scene.illuminants.clone();
    illuminants.extend_from_slice(&other.illuminants);
    finish(input, target, illuminants, coverage, size)
}

/// Draws a random plan for `a` and, with probability `p_concat`, a second
/// plan for `b` with a split in the middle half, then applies them.
pub fn augment<R: Rng>(
    a: &SourceScene,
    b: &SourceScene,
    size: usize,
    p_concat: f64,
    rng: &mut R,
) -> Result<TrainingSample> {
    let plan = sample_plan(a.image.height(), a.image.width(), rng)?;
    if !rng.random_bool(p_concat) {
        return apply_plan(a, &plan, None, size);
    }
    let second = sample_plan(b.image.height(), b.image.width(), rng)?;
    let horizontal = rng.random_bool(0.5);
    let split = rng
        .random_range(size / 4..=(3 * size) / 4)
        .clamp(1, size - 1);
    apply_plan(
        a,
        &plan,
        Some((
            b,
            &ConcatPlan {
                horizontal,
                split,
                second,
            },
        )),
        size,
    )
}
