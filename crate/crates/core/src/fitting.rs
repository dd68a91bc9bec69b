//! Gain fitting against a reference image.
//!
//! The objective is the mean squared distance between the gain-corrected
//! input and the reference over valid pixels; it is minimized with a
//! Nelder–Mead simplex started at unit gains. Local fitting repeats this per
//! illuminant cluster and falls back to one global fit when the per-cluster
//! illuminants agree.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMask;
use crate::color::{illuminant_distance, GainTriple, IlluminantVector, LinearImage, CHANNELS};
use crate::confidence::ConfidenceReport;
use crate::error::{invalid, Error, Result};
use crate::kernel::{illumination_vector_map, ReferenceImage, DEFAULT_DARK_THRESHOLD};

/// Smallest gain component the search may visit.
pub const MIN_GAIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    pub initial_step: f64,
    pub max_evals: usize,
    /// Stop once worst − best vertex value is at most this.
    pub tolerance: f64,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            initial_step: 0.1,
            max_evals: 600,
            tolerance: 1e-10,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.reflection > 0.0
            && self.expansion > 1.0
            && self.contraction > 0.0
            && self.contraction < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.initial_step > 0.0
            && self.tolerance >= 0.0
            && self.max_evals >= 4;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid simplex configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOutcome {
    pub gains: GainTriple,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder–Mead over the three gains, starting from (1, 1, 1) with one vertex
/// offset by `initial_step` along each axis.
pub fn simplex_minimize<F>(mut objective: F, config: &SimplexConfig) -> Result<SimplexOutcome>
where
    F: FnMut([f64; 3]) -> f64,
{
    config.validate()?;
    let evals = std::cell::Cell::new(0usize);
    let mut best_seen: Option<([f64; 3], f64)> = None;
    let mut eval = |x: [f64; 3]| -> Result<f64> {
        evals.set(evals.get() + 1);
        let v = objective(x);
        if !v.is_finite() {
            let (best, _) = best_seen.unwrap_or((x, v));
            return Err(Error::OptimizationFailure {
                best: GainTriple::from_array(best).unwrap_or_else(|_| GainTriple::unit()),
                evals: evals.get(),
            });
        }
        if best_seen.is_none_or(|(_, b)| v < b) {
            best_seen = Some((x, v));
        }
        Ok(v)
    };

    // A converged run is restarted around its best vertex; clamping at
    // MIN_GAIN can flatten the simplex onto the boundary.
    let mut start = [1.0; 3];
    let mut previous = f64::INFINITY;
    loop {
        let (x, value, converged) = nelder_mead(&mut eval, start, config, &evals)?;
        if !converged || x == start || previous - value <= config.tolerance {
            return Ok(SimplexOutcome {
                gains: GainTriple::from_array(x)?,
                value,
                evals: evals.get(),
                converged,
            });
        }
        previous = value;
        start = x;
    }
}

fn nelder_mead(
    eval: &mut impl FnMut([f64; 3]) -> Result<f64>,
    start: [f64; 3],
    config: &SimplexConfig,
    evals: &std::cell::Cell<usize>,
) -> Result<([f64; 3], f64, bool)> {
    let project = |x: [f64; 3]| x.map(|v| v.max(MIN_GAIN));
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((start, eval(start)?));
    for axis in 0..3 {
        let mut x = start;
        x[axis] += config.initial_step;
        let x = project(x);
        simplex.push((x, eval(x)?));
    }

    let mut converged = false;
    loop {
        // Stable: ties keep the earlier vertex first.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[3].1 - simplex[0].1 <= config.tolerance {
            converged = true;
            break;
        }
        // One iteration uses at most 5 evaluations (reflect, contract, 3 shrinks).
        if evals.get() + 5 > config.max_evals {
            break;
        }
        let mut centroid = [0.0; 3];
        for (x, _) in &simplex[..3] {
            for d in 0..3 {
                centroid[d] += x[d] / 3.0;
            }
        }
        let along = |t: f64, from: [f64; 3]| {
            project([0, 1, 2].map(|d| centroid[d] + t * (from[d] - centroid[d])))
        };
        let (worst, f_worst) = simplex[3];
        let (f_best, f_second) = (simplex[0].1, simplex[2].1);

        let xr = along(-config.reflection, worst);
        let fr = eval(xr)?;
        if fr < f_best {
            let xe = along(-config.reflection * config.expansion, worst);
            let fe = eval(xe)?;
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < f_second {
            simplex[3] = (xr, fr);
            continue;
        }
        let accepted = if fr < f_worst {
            let xc = along(-config.reflection * config.contraction, worst);
            let fc = eval(xc)?;
            (fc <= fr).then_some((xc, fc))
        } else {
            let xc = along(config.contraction, worst);
            let fc = eval(xc)?;
            (fc < f_worst).then_some((xc, fc))
        };
        match accepted {
            Some(v) => simplex[3] = v,
            None => {
                let best = simplex[0].0;
                for vertex in simplex.iter_mut().skip(1) {
                    let x = project(
                        [0, 1, 2].map(|d| best[d] + config.shrink * (vertex.0[d] - best[d])),
                    );
                    *vertex = (x, eval(x)?);
                }
            }
        }
    }
    Ok((simplex[0].0, simplex[0].1, converged))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub simplex: SimplexConfig,
    /// Input pixels with any channel below this are ignored.
    pub dark_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            simplex: SimplexConfig::default(),
            dark_threshold: DEFAULT_DARK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub gains: GainTriple,
    pub pixels: usize,
    pub evals: usize,
    pub value: f64,
}

fn check_sizes(input: &LinearImage, reference: &ReferenceImage) -> Result<()> {
    if input.height() != reference.height() || input.width() != reference.width() {
        return Err(invalid("input and reference sizes differ"));
    }
    Ok(())
}

/// Validity of each pixel for fitting: not dark in the input and strictly
/// positive in the reference.
pub fn fit_validity(
    input: &LinearImage,
    reference: &ReferenceImage,
    dark_threshold: f64,
) -> Result<Vec<bool>> {
    Ok(illumination_vector_map(input, reference, dark_threshold)?.valid)
}

pub fn fit_global(
    input: &LinearImage,
    reference: &ReferenceImage,
    config: &FitConfig,
) -> Result<FitOutcome> {
    check_sizes(input, reference)?;
    let valid = fit_validity(input, reference, config.dark_threshold)?;
    fit_selected(input, reference, &valid, config)
}

/// Fits over the pixels whose `selected` flag is set.
pub fn fit_selected(
    input: &LinearImage,
    reference: &ReferenceImage,
    selected: &[bool],
    config: &FitConfig,
) -> Result<FitOutcome> {
    check_sizes(input, reference)?;
    if selected.len() != input.pixel_count() {
        return Err(invalid("selection mask does not match image size"));
    }
    let pairs: Vec<([f64; 3], [f64; 3])> = (0..input.pixel_count())
        .filter(|&i| selected[i])
        .map(|i| {
            let x = &input.data()[i * CHANNELS..i * CHANNELS + CHANNELS];
            let y = &reference.data()[i * CHANNELS..i * CHANNELS + CHANNELS];
            ([x[0], x[1], x[2]], [y[0], y[1], y[2]])
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::DegenerateScene("no valid pixels to fit".into()));
    }
    let n = pairs.len() as f64;
    let objective = |g: [f64; 3]| {
        pairs
            .iter()
            .map(|(x, y)| (0..3).map(|c| (g[c] * x[c] - y[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n
    };
    let out = simplex_minimize(objective, &config.simplex)?;
    Ok(FitOutcome {
        gains: out.gains,
        pixels: pairs.len(),
        evals: out.evals,
        value: out.value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEstimate {
    /// Cluster label in the mask (multi mode).
    pub label: Option<u8>,
    pub gains: GainTriple,
    pub illuminant: IlluminantVector,
    pub pixels: usize,
}

impl RegionEstimate {
    fn from_fit(label: Option<u8>, fit: FitOutcome) -> Self {
        Self {
            label,
            gains: fit.gains,
            illuminant: IlluminantVector::from_gains(fit.gains),
            pixels: fit.pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantEstimate {
    pub mode: Mode,
    pub regions: Vec<RegionEstimate>,
    /// Present in multi mode, with labels matching `regions[i].label`.
    pub mask: Option<ClusterMask>,
    pub confidence: Option<ConfidenceReport>,
}

impl IlluminantEstimate {
    /// Illuminant covering pixel `i` (of the fitting resolution), if any.
    pub fn illuminant_at(&self, i: usize) -> Option<IlluminantVector> {
        match (&self.mask, self.mode) {
            (Some(mask), Mode::Multi) => {
                let l = mask.labels[i]?;
                self.regions
                    .iter()
                    .find(|r| r.label == Some(l))
                    .map(|r| r.illuminant)
            }
            _ => self.regions.first().map(|r| r.illuminant),
        }
    }
}

/// Clusters with fewer valid pixels than this are merged into a neighbor.
pub const MIN_CLUSTER_PIXELS: usize = 16;

pub fn fit_local(
    input: &LinearImage,
    reference: &ReferenceImage,
    mask: &ClusterMask,
    config: &FitConfig,
    merge_threshold: f64,
) -> Result<IlluminantEstimate> {
    check_sizes(input, reference)?;
    if mask.height != input.height() || mask.width != input.width() {
        return Err(invalid("cluster mask size does not match the image"));
    }
    let map = illumination_vector_map(input, reference, config.dark_threshold)?;
    let n_px = input.pixel_count();

    // Effective label per pixel: valid for fitting and labeled.
    let mut labels: Vec<Option<u8>> = (0..n_px)
        .map(|i| if map.valid[i] { mask.labels[i] } else { None })
        .collect();
    let n_labels = labels
        .iter()
        .flatten()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);

    let stats = |labels: &[Option<u8>]| {
        let mut count = vec![0usize; n_labels];
        let mut sum = vec![[0.0; 3]; n_labels];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                let g = map.gains[i];
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                count[*l as usize] += 1;
                for c in 0..3 {
                    sum[*l as usize][c] += g[c] / n;
                }
            }
        }
        (count, sum)
    };

    // Absorb small clusters, smallest first, into the angularly nearest one.
    loop {
        let (count, sum) = stats(&labels);
        let present: Vec<usize> = (0..n_labels).filter(|&l| count[l] > 0).collect();
        if present.len() <= 1 {
            break;
        }
        let Some(&small) = present
            .iter()
            .filter(|&&l| count[l] < MIN_CLUSTER_PIXELS)
            .min_by_key(|&&l| (count[l], l))
        else {
            break;
        };
        let target = present
            .iter()
            .filter(|&&l| l != small)
            .map(|&l| {
                let d = crate::color::angular_distance(sum[small], sum[l]).unwrap_or(f64::INFINITY);
                (l, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(l, _)| l)
            .expect("at least two clusters present");
        for l in labels.iter_mut() {
            if *l == Some(small as u8) {
                *l = Some(target as u8);
            }
        }
    }

    let (count, _) = stats(&labels);
    let present: Vec<u8> = (0..n_labels)
        .filter(|&l| count[l] > 0)
        .map(|l| l as u8)
        .collect();
    if present.is_empty() {
        return Err(Error::DegenerateScene("no valid clustered pixels".into()));
    }
    let union: Vec<bool> = labels.iter().map(Option::is_some).collect();
    let single = |fit: FitOutcome| IlluminantEstimate {
        mode: Mode::Single,
        regions: vec![RegionEstimate::from_fit(None, fit)],
        mask: None,
        confidence: None,
    };
    if present.len() == 1 {
        return Ok(single(fit_selected(input, reference, &union, config)?));
    }

    let mut regions = Vec::with_capacity(present.len());
    for &l in &present {
        let sel: Vec<bool> = labels.iter().map(|x| *x == Some(l)).collect();
        regions.push(RegionEstimate::from_fit(
            Some(l),
            fit_selected(input, reference, &sel, config)?,
        ));
    }
    let all_close = regions.iter().enumerate().all(|(i, a)| {
        regions[i + 1..]
            .iter()
            .all(|b| illuminant_distance(a.illuminant, b.illuminant) < merge_threshold)
    });
    if all_close {
        return Ok(single(fit_selected(input, reference, &union, config)?));
    }

    // Compact labels 0..n in order of appearance in `present`.
    let remap = |l: u8| present.iter().position(|&p| p == l).map(|p| p as u8);
    let out_mask = ClusterMask {
        height: mask.height,
        width: mask.width,
        labels: labels.iter().map(|l| l.and_then(remap)).collect(),
        n_clusters: present.len(),
        merged: false,
    };
    for r in regions.iter_mut() {
        r.label = r.label.and_then(remap);
    }
    Ok(IlluminantEstimate {
        mode: Mode::Multi,
        regions,
        mask: Some(out_mask),
        confidence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::apply_diagonal;
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

    /// Per-channel least-squares gain, the closed-form minimizer of the
    /// fitting objective.
    fn closed_form(x: &LinearImage, y: &ReferenceImage, sel: &[bool]) -> [f64; 3] {
        let mut sxy = [0.0; 3];
        let mut sxx = [0.0; 3];
        for i in 0..x.pixel_count() {
            if sel[i] {
                for c in 0..3 {
                    sxy[c] += x.data()[i * 3 + c] * y.data()[i * 3 + c];
                    sxx[c] += x.data()[i * 3 + c].powi(2);
                }
            }
        }
        [0, 1, 2].map(|c| sxy[c] / sxx[c])
    }

    #[test]
    fn quadratic_minimum() {
        let target = [0.5, 1.0, 2.0];
        let out = simplex_minimize(
            |g| (0..3).map(|i| (g[i] - target[i]).powi(2)).sum(),
            &SimplexConfig::default(),
        )
        .unwrap();
        for (g, t) in out.gains.to_array().iter().zip(target) {
            assert!((g - t).abs() < 1e-4);
        }
        assert!(out.converged);
    }

    #[test]
    fn recovers_after_touching_the_lower_bound() {
        for target in [[2.9, 0.35, 1.7], [0.4, 2.8, 2.5]] {
            let out = simplex_minimize(
                |g| (0..3).map(|c| (g[c] - target[c]).powi(2)).sum(),
                &SimplexConfig::default(),
            )
            .unwrap();
            for (g, t) in out.gains.to_array().iter().zip(target) {
                assert!((g - t).abs() < 1e-3, "{:?} vs {target:?}", out.gains);
            }
            assert!(out.evals <= 500);
        }
    }

    #[test]
    fn flat_objective_stays_at_unit_gains() {
        let out = simplex_minimize(|_| 3.0, &SimplexConfig::default()).unwrap();
        assert_eq!(out.gains, GainTriple::unit());
        assert_eq!(out.evals, 4);
    }

    #[test]
    fn non_finite_objective_fails_with_best_so_far() {
        let mut calls = 0;
        let r = simplex_minimize(
            |g| {
                calls += 1;
                if calls > 6 {
                    f64::NAN
                } else {
                    (g[0] - 2.0).powi(2)
                }
            },
            &SimplexConfig::default(),
        );
        match r {
            Err(Error::OptimizationFailure { best, evals }) => {
                assert_eq!(evals, 7);
                assert!(best.r_gain >= 1.0);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn gains_stay_positive_when_optimum_is_negative() {
        let out = simplex_minimize(
            |g| (g[0] + 1.0).powi(2) + (g[1] - 1.0).powi(2) + (g[2] - 1.0).powi(2),
            &SimplexConfig::default(),
        )
        .unwrap();
        assert!(out.gains.to_array().iter().all(|&g| g >= MIN_GAIN));
        assert!((out.gains.r_gain - MIN_GAIN).abs() < 1e-3);
    }

    #[test]
    fn respects_eval_budget() {
        let cfg = SimplexConfig {
            max_evals: 40,
            tolerance: 0.0,
            ..Default::default()
        };
        let out = simplex_minimize(
            |g| (g[0] - 3.0).powi(2) + g[1].sin().powi(2) + (g[2] - 0.2).abs(),
            &cfg,
        )
        .unwrap();
        assert!(out.evals <= 40);
        assert!(!out.converged);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = SimplexConfig {
            expansion: 0.9,
            ..Default::default()
        };
        assert!(simplex_minimize(|_| 0.0, &cfg).is_err());
    }

    #[test]
    fn exact_fit_recovers_gains() {
        let x = random_image(12, 12, 1);
        let target = GainTriple::new(1.3, 1.0, 0.7).unwrap();
        let y = ReferenceImage::from_linear(&apply_diagonal(&x, target).unwrap());
        let fit = fit_global(&x, &y, &FitConfig::default()).unwrap();
        for (a, b) in fit.gains.to_array().iter().zip(target.to_array()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(fit.evals <= 500);
    }

    #[test]
    fn identity_fit_is_exact() {
        let x = random_image(8, 8, 2);
        let fit = fit_global(&x, &ReferenceImage::from_linear(&x), &FitConfig::default()).unwrap();
        assert_eq!(fit.gains, GainTriple::unit());
    }

    #[test]
    fn agrees_with_closed_form_on_inexact_data() {
        let x = random_image(10, 10, 3);
        let y = ReferenceImage::from_linear(&random_image(10, 10, 4));
        let valid = fit_validity(&x, &y, DEFAULT_DARK_THRESHOLD).unwrap();
        let fit = fit_global(&x, &y, &FitConfig::default()).unwrap();
        for (a, b) in fit.gains.to_array().iter().zip(closed_form(&x, &y, &valid)) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_spike_does_not_move_the_fit() {
        let mut data = random_image(10, 10, 5).into_data();
        // Pixel 0 is dark in the input: flagged invalid.
        data[0] = 0.001;
        let x = LinearImage::new(10, 10, data).unwrap();
        let target = GainTriple::new(0.8, 1.0, 1.4).unwrap();
        let clean = apply_diagonal(&x, target).unwrap();
        let mut spiky = clean.data().to_vec();
        spiky[0] = 50.0;
        spiky[1] = 50.0;
        let a = fit_global(
            &x,
            &ReferenceImage::from_linear(&clean),
            &FitConfig::default(),
        )
        .unwrap();
        let b = fit_global(
            &x,
            &ReferenceImage::new(10, 10, spiky).unwrap(),
            &FitConfig::default(),
        )
        .unwrap();
        assert_eq!(a.gains, b.gains);
        assert_eq!(a.pixels, 99);
    }

    #[test]
    fn all_invalid_is_degenerate() {
        let x = LinearImage::filled(4, 4, [0.001; 3]).unwrap();
        let r = fit_global(&x, &ReferenceImage::from_linear(&x), &FitConfig::default());
        assert!(matches!(r, Err(Error::DegenerateScene(_))));
    }

    #[test]
    fn exposure_covariance() {
        let x = random_image(10, 10, 6);
        let y = random_image(10, 10, 7);
        let base = fit_global(&x, &ReferenceImage::from_linear(&y), &FitConfig::default()).unwrap();
        let s = 1.7;
        let scaled = fit_global(
            &x,
            &ReferenceImage::from_linear(&y.scaled(s).unwrap()),
            &FitConfig::default(),
        )
        .unwrap();
        for (a, b) in base.gains.to_array().iter().zip(scaled.gains.to_array()) {
            assert!((b / (a * s) - 1.0).abs() < 1e-3);
        }
        let both = fit_global(
            &x.scaled(1.3).unwrap(),
            &ReferenceImage::from_linear(&y.scaled(1.3).unwrap()),
            &FitConfig::default(),
        )
        .unwrap();
        for (a, b) in base.gains.to_array().iter().zip(both.gains.to_array()) {
            assert!((b / a - 1.0).abs() < 1e-3);
        }
    }

    fn halves_mask(h: usize, w: usize) -> ClusterMask {
        ClusterMask {
            height: h,
            width: w,
            labels: (0..h * w)
                .map(|i| Some(if i / w < h / 2 { 0 } else { 1 }))
                .collect(),
            n_clusters: 2,
            merged: false,
        }
    }

    #[test]
    fn local_fit_separates_two_illuminants() {
        let (h, w) = (16, 16);
        let x = random_image(h, w, 8);
        let top = IlluminantVector::new(0.80, 0.30, 0.52).unwrap();
        let bottom = IlluminantVector::new(0.38, 0.26, 0.89).unwrap();
        let gt = |r: usize| if r < h / 2 { top } else { bottom };
        let y = LinearImage::from_fn(h, w, |r, c| {
            let g = crate::color::gains_from_illuminant(gt(r))
                .unwrap()
                .to_array();
            let p = x.pixel(r, c);
            [p[0] * g[0], p[1] * g[1], p[2] * g[2]]
        })
        .unwrap();
        let est = fit_local(
            &x,
            &ReferenceImage::from_linear(&y),
            &halves_mask(h, w),
            &FitConfig::default(),
            2.0,
        )
        .unwrap();
        assert_eq!(est.mode, Mode::Multi);
        assert_eq!(est.regions.len(), 2);
        assert!(illuminant_distance(est.regions[0].illuminant, top) < 1.0);
        assert!(illuminant_distance(est.regions[1].illuminant, bottom) < 1.0);
        assert_eq!(est.illuminant_at(0), Some(est.regions[0].illuminant));
    }

    #[test]
    fn local_fit_merges_single_illuminant() {
        let x = random_image(16, 16, 9);
        let g = GainTriple::new(1.2, 1.0, 0.9).unwrap();
        let y = ReferenceImage::from_linear(&apply_diagonal(&x, g).unwrap());
        let cfg = FitConfig::default();
        let est = fit_local(&x, &y, &halves_mask(16, 16), &cfg, 2.0).unwrap();
        assert_eq!(est.mode, Mode::Single);
        let global = fit_global(&x, &y, &cfg).unwrap();
        assert_eq!(est.regions[0].gains, global.gains);
        assert!(est.mask.is_none());
    }

    #[test]
    fn local_fit_single_region_mask() {
        let x = random_image(8, 8, 10);
        let mut mask = halves_mask(8, 8);
        for l in mask.labels.iter_mut().take(32) {
            *l = None;
        }
        let y = ReferenceImage::from_linear(
            &apply_diagonal(&x, GainTriple::new(2.0, 1.0, 0.5).unwrap()).unwrap(),
        );
        let est = fit_local(&x, &y, &mask, &FitConfig::default(), 2.0).unwrap();
        assert_eq!(est.mode, Mode::Single);
        assert_eq!(est.regions[0].pixels, 32);
    }

    #[test]
    fn tiny_cluster_is_absorbed() {
        let (h, w) = (8, 8);
        let x = random_image(h, w, 11);
        let y = ReferenceImage::from_linear(
            &apply_diagonal(&x, GainTriple::new(1.5, 1.0, 0.6).unwrap()).unwrap(),
        );
        let mut mask = halves_mask(h, w);
        mask.n_clusters = 3;
        // Three pixels in their own cluster.
        for i in [0, 1, 2] {
            mask.labels[i] = Some(2);
        }
        let cfg = FitConfig::default();
        let est = fit_local(&x, &y, &mask, &cfg, 2.0).unwrap();
        assert_eq!(est.mode, Mode::Single);
        assert_eq!(est.regions[0].pixels, 64);
    }
}
