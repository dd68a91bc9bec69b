//! Datasets, raw ingestion, synthetic scenes, and error statistics.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{angular_distance, IlluminantVector, LinearImage, CHANNELS};
use crate::error::{invalid, Error, Result};
use crate::image_io::{read_pgm, read_raw, RawImage};
use crate::net::SourceScene;
use crate::rng::{item_rng, stage_rng, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub illuminant: IlluminantVector,
    pub black_level: [f64; 3],
    pub saturation_level: f64,
    /// Polygon file; pixels inside are excluded.
    pub mask: Option<PathBuf>,
    pub fold: usize,
    /// Illuminant of region 1 when `regions` labels the image.
    pub second_illuminant: Option<IlluminantVector>,
    /// PGM region map (0 and 128 for regions 0 and 1).
    pub regions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Deserialize)]
struct IndexRow {
    path: String,
    r: f64,
    g: f64,
    b: f64,
    black: f64,
    sat: f64,
    fold: Option<usize>,
    #[serde(default)]
    mask: Option<String>,
    #[serde(default)]
    r2: Option<f64>,
    #[serde(default)]
    g2: Option<f64>,
    #[serde(default)]
    b2: Option<f64>,
    #[serde(default)]
    regions: Option<String>,
}

pub const N_FOLDS: usize = 5;

impl DatasetIndex {
    /// Reads `path,r,g,b,black,sat,fold` plus the optional columns `mask`
    /// (exclusion polygon), `r2,g2,b2` and `regions` (second illuminant and
    /// its 0/128 region PGM). Relative paths resolve against the index
    /// file's directory; blank folds are assigned with [`make_folds`].
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut entries = Vec::new();
        let mut blank = Vec::new();
        for (i, row) in reader.deserialize::<IndexRow>().enumerate() {
            let row = row?;
            let illuminant = IlluminantVector::new(row.r, row.g, row.b)
                .map_err(|e| Error::InvalidMetadata(format!("row {}: {e}", i + 1)))?;
            if row.sat <= row.black {
                return Err(Error::InvalidMetadata(format!(
                    "row {}: saturation {} not above black level {}",
                    i + 1,
                    row.sat,
                    row.black
                )));
            }
            let second_illuminant = match (row.r2, row.g2, row.b2) {
                (Some(r), Some(g), Some(b)) => Some(
                    IlluminantVector::new(r, g, b)
                        .map_err(|e| Error::InvalidMetadata(format!("row {}: {e}", i + 1)))?,
                ),
                (None, None, None) => None,
                _ => {
                    return Err(Error::InvalidMetadata(format!(
                        "row {}: incomplete second illuminant",
                        i + 1
                    )))
                }
            };
            let regions = row.regions.filter(|m| !m.is_empty()).map(|m| base.join(m));
            if second_illuminant.is_some() != regions.is_some() {
                return Err(Error::InvalidMetadata(format!(
                    "row {}: a second illuminant needs a region map and vice versa",
                    i + 1
                )));
            }
            if let Some(f) = row.fold {
                if f >= N_FOLDS {
                    return Err(Error::InvalidMetadata(format!(
                        "row {}: fold {f} outside 0..{N_FOLDS}",
                        i + 1
                    )));
                }
            } else {
                blank.push(i);
            }
            entries.push(DatasetEntry {
                path: base.join(&row.path),
                illuminant,
                black_level: [row.black; 3],
                saturation_level: row.sat,
                mask: row.mask.filter(|m| !m.is_empty()).map(|m| base.join(m)),
                fold: row.fold.unwrap_or(0),
                second_illuminant,
                regions,
            });
        }
        if entries.is_empty() {
            return Err(invalid(format!(
                "{}: dataset index is empty",
                path.display()
            )));
        }
        if !blank.is_empty() {
            let folds = make_folds(blank.len().max(N_FOLDS), N_FOLDS, seed)?;
            for (k, &i) in blank.iter().enumerate() {
                entries[i].fold = folds[k];
            }
        }
        Ok(Self { entries })
    }

    /// (training, test) entry indices for one fold.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.entries.len()).partition(|&i| self.entries[i].fold != fold)
    }
}

/// Black-level subtraction and normalization by the usable range, plus the
/// optional exclusion polygon. Returns the image and its validity mask.
pub fn ingest(raw: &RawImage, entry: &DatasetEntry) -> Result<(LinearImage, Option<Vec<bool>>)> {
    let image = normalize_raw(raw, entry.black_level, entry.saturation_level)?;
    let valid = match &entry.mask {
        Some(p) => {
            let poly = read_polygon(p)?;
            Some(
                polygon_mask(raw.height, raw.width, &poly)
                    .into_iter()
                    .map(|inside| !inside)
                    .collect(),
            )
        }
        None => None,
    };
    Ok((image, valid))
}

impl DatasetEntry {
    pub fn illuminants(&self) -> Vec<IlluminantVector> {
        std::iter::once(self.illuminant)
            .chain(self.second_illuminant)
            .collect()
    }

    /// Region index per pixel; all zeros without a region map.
    pub fn labels(&self, height: usize, width: usize) -> Result<Vec<u8>> {
        let Some(path) = &self.regions else {
            return Ok(vec![0; height * width]);
        };
        let (w, h, values) = read_pgm(path)?;
        if (h, w) != (height, width) {
            return Err(Error::InvalidMetadata(format!(
                "{}: region map size differs from the image",
                path.display()
            )));
        }
        values
            .into_iter()
            .map(|v| match v {
                0 => Ok(0),
                128 => Ok(1),
                _ => Err(Error::InvalidMetadata(format!(
                    "{}: unexpected region value {v}",
                    path.display()
                ))),
            })
            .collect()
    }

    /// Reads, normalizes and labels the image for training.
    pub fn load_scene(&self) -> Result<SourceScene> {
        let raw = read_raw(&self.path)?;
        let (image, _) = ingest(&raw, self)?;
        let labels = self.labels(image.height(), image.width())?;
        let scene = SourceScene {
            image,
            labels,
            illuminants: self.illuminants(),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn load_item(&self, id: impl Into<String>) -> Result<EvalItem> {
        let raw = read_raw(&self.path)?;
        let (image, valid) = ingest(&raw, self)?;
        let regions = if self.second_illuminant.is_some() {
            let labels = self.labels(image.height(), image.width())?;
            self.illuminants()
                .into_iter()
                .enumerate()
                .map(|(r, illuminant)| GroundTruthRegion {
                    illuminant,
                    mask: Some(labels.iter().map(|&l| l as usize == r).collect()),
                })
                .collect()
        } else {
            vec![GroundTruthRegion {
                illuminant: self.illuminant,
                mask: None,
            }]
        };
        Ok(EvalItem {
            id: id.into(),
            image,
            valid,
            regions,
            fold: self.fold,
        })
    }
}

pub fn normalize_raw(raw: &RawImage, black: [f64; 3], saturation: f64) -> Result<LinearImage> {
    if black.iter().any(|&b| saturation <= b) {
        return Err(Error::InvalidMetadata(format!(
            "saturation level {saturation} must exceed black level {black:?}"
        )));
    }
    let data = raw
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let b = black[i % CHANNELS];
            ((s as f64 - b).max(0.0) / (saturation - b)).min(f64::MAX)
        })
        .collect();
    LinearImage::new(raw.height, raw.width, data)
}

/// One `x y` vertex per line (pixel units, origin at the top-left corner).
pub fn read_polygon(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => pts.push((x, y)),
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected `x y`",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    if pts.len() < 3 {
        return Err(Error::Format(format!(
            "{}: polygon needs at least 3 vertices",
            path.display()
        )));
    }
    Ok(pts)
}

/// True for pixels whose centers lie inside the polygon (even-odd rule).
pub fn polygon_mask(height: usize, width: usize, poly: &[(f64, f64)]) -> Vec<bool> {
    let mut out = vec![false; height * width];
    for r in 0..height {
        let y = r as f64 + 0.5;
        for c in 0..width {
            let x = c as f64 + 0.5;
            let mut inside = false;
            let mut j = poly.len() - 1;
            for i in 0..poly.len() {
                let (xi, yi) = poly[i];
                let (xj, yj) = poly[j];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            out[r * width + c] = inside;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
    pub gm: f64,
}

impl ErrorStats {
    /// Completes the five summary statistics with their geometric mean.
    pub fn from_summary(mean: f64, median: f64, trimean: f64, best25: f64, worst25: f64) -> Self {
        let gm = (mean * median * trimean * best25 * worst25).powf(0.2);
        Self {
            mean,
            median,
            trimean,
            best25,
            worst25,
            gm,
        }
    }
}

/// Linear-interpolation quantile of sorted data at 0-based rank q·(n−1).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn error_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(invalid("no errors to summarize"));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(invalid(format!("error {e} is negative or non-finite")));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let (q1, q2, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let quarter = n.div_ceil(4);
    let best25 = s[..quarter].iter().sum::<f64>() / quarter as f64;
    let worst25 = s[n - quarter..].iter().sum::<f64>() / quarter as f64;
    Ok(ErrorStats::from_summary(
        mean,
        q2,
        (q1 + 2.0 * q2 + q3) / 4.0,
        best25,
        worst25,
    ))
}

/// Seeded shuffle, then round-robin assignment to `k` folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(invalid(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, Stage::Folds));
    let mut folds = vec![0; n];
    for (i, &item) in order.iter().enumerate() {
        folds[item] = i % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// One or two; with two, rows above `split · height` use the first.
    pub illuminants: Vec<IlluminantVector>,
    pub split: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Relative per-channel mean of the reflectance texture.
    pub texture_mean: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            illuminants: vec![IlluminantVector::white()],
            split: 0.5,
            seed: 0,
            noise_sigma: 0.0,
            texture_mean: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: LinearImage,
    /// Reflectance (the scene under white light).
    pub texture: LinearImage,
    /// Region index per pixel.
    pub labels: Vec<u8>,
    pub illuminants: Vec<IlluminantVector>,
}

impl SynthScene {
    pub fn region_mask(&self, region: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == region).collect()
    }

    pub fn to_source(&self) -> SourceScene {
        SourceScene {
            image: self.image.clone(),
            labels: self.labels.clone(),
            illuminants: self.illuminants.clone(),
        }
    }
}

/// Per-channel multipliers of an illuminant, largest equal to 1.
pub fn illuminant_multipliers(l: IlluminantVector) -> [f64; 3] {
    let a = l.to_array();
    let m = a[0].max(a[1]).max(a[2]);
    a.map(|v| v / m)
}

/// `(r, 1, b)` with r and b uniform in [0.3, 1), normalized.
pub fn random_illuminant(rng: &mut impl Rng) -> IlluminantVector {
    IlluminantVector::new(rng.random_range(0.3..1.0), 1.0, rng.random_range(0.3..1.0))
        .expect("positive components")
}

/// `count` random illuminants for synthetic scene `index`; a pair is at
/// least 10° apart.
pub fn random_scene_illuminants(
    seed: u64,
    index: u64,
    count: usize,
) -> Result<Vec<IlluminantVector>> {
    if !(1..=2).contains(&count) {
        return Err(invalid(format!(
            "scenes have one or two illuminants, not {count}"
        )));
    }
    let mut rng = item_rng(seed, Stage::Illuminants, index);
    let first = random_illuminant(&mut rng);
    if count == 1 {
        return Ok(vec![first]);
    }
    loop {
        let second = random_illuminant(&mut rng);
        if angular_distance(first.to_array(), second.to_array())? >= 10.0 {
            return Ok(vec![first, second]);
        }
    }
}

const TEXTURE_MEAN: f64 = 0.45;

pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(invalid("synthetic scene must have positive size"));
    }
    if spec.illuminants.is_empty() || spec.illuminants.len() > 2 {
        return Err(invalid("synthetic scenes take one or two illuminants"));
    }
    if spec
        .illuminants
        .iter()
        .any(|l| l.to_array().iter().any(|&c| c <= 0.0))
    {
        return Err(invalid("illuminant components must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.split) || !(spec.noise_sigma >= 0.0) {
        return Err(invalid(
            "split must lie in [0, 1] and noise must be non-negative",
        ));
    }
    if spec.texture_mean.iter().any(|&m| !(m > 0.0)) {
        return Err(invalid("texture mean must be positive"));
    }
    let mut rng = item_rng(spec.seed, Stage::Synth, 0);
    let n = h * w;
    let mut tex = Vec::with_capacity(n * CHANNELS);
    for _ in 0..n {
        let b: f64 = rng.random_range(0.2..0.7);
        for _ in 0..CHANNELS {
            tex.push(b * (1.0 + rng.random_range(-0.3..0.3)));
        }
    }
    // Pin each channel's mean exactly.
    let top = spec.texture_mean.iter().cloned().fold(0.0, f64::max);
    for c in 0..CHANNELS {
        let mean = tex.iter().skip(c).step_by(CHANNELS).sum::<f64>() / n as f64;
        let want = TEXTURE_MEAN * spec.texture_mean[c] / top;
        tex.iter_mut()
            .skip(c)
            .step_by(CHANNELS)
            .for_each(|v| *v *= want / mean);
    }
    let boundary = (spec.split * h as f64).round() as usize;
    let labels: Vec<u8> = (0..n)
        .map(|p| {
            if spec.illuminants.len() == 2 && p / w >= boundary {
                1
            } else {
                0
            }
        })
        .collect();
    let mults: Vec<[f64; 3]> = spec
        .illuminants
        .iter()
        .map(|&l| illuminant_multipliers(l))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(n * CHANNELS);
    for p in 0..n {
        let m = mults[labels[p] as usize];
        for c in 0..CHANNELS {
            let mut v = tex[p * CHANNELS + c] * m[c];
            if spec.noise_sigma > 0.0 {
                v = (v + noise.sample(&mut rng)).max(0.0);
            }
            data.push(v);
        }
    }
    Ok(SynthScene {
        image: LinearImage::new(h, w, data)?,
        texture: LinearImage::new(h, w, tex)?,
        labels,
        illuminants: spec.illuminants.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRegion {
    pub illuminant: IlluminantVector,
    /// Pixels of the region; `None` means the whole image.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub image: LinearImage,
    pub valid: Option<Vec<bool>>,
    pub regions: Vec<GroundTruthRegion>,
    pub fold: usize,
}

impl EvalItem {
    pub fn from_synth(id: impl Into<String>, scene: &SynthScene, fold: usize) -> Self {
        let regions = (0..scene.illuminants.len())
            .map(|r| GroundTruthRegion {
                illuminant: scene.illuminants[r],
                mask: (scene.illuminants.len() > 1).then(|| scene.region_mask(r as u8)),
            })
            .collect();
        Self {
            id: id.into(),
            image: scene.image.clone(),
            valid: None,
            regions,
            fold,
        }
    }
}

/// An estimator's answer: one illuminant, optionally refined per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub global: IlluminantVector,
    pub per_pixel: Option<Vec<Option<IlluminantVector>>>,
}

impl Prediction {
    pub fn global(l: IlluminantVector) -> Self {
        Self {
            global: l,
            per_pixel: None,
        }
    }

    /// Normalized mean of the per-pixel predictions inside `mask`, or the
    /// global prediction.
    fn for_region(&self, mask: Option<&[bool]>) -> IlluminantVector {
        let (Some(pp), Some(mask)) = (&self.per_pixel, mask) else {
            return self.global;
        };
        let mut sum = [0.0; 3];
        for (p, l) in pp.iter().enumerate() {
            if let (true, Some(l)) = (mask[p], l) {
                let a = l.to_array();
                (0..3).for_each(|c| sum[c] += a[c]);
            }
        }
        IlluminantVector::from_array(sum).unwrap_or(self.global)
    }
}

pub trait Estimator {
    fn name(&self) -> String;
    fn estimate(&self, item: &EvalItem) -> Result<Prediction>;
}

/// Angular error per ground-truth region.
pub fn score(item: &EvalItem, prediction: &Prediction) -> Result<Vec<f64>> {
    item.regions
        .iter()
        .map(|r| {
            angular_distance(
                prediction.for_region(r.mask.as_deref()).to_array(),
                r.illuminant.to_array(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub count: usize,
    pub stats: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub fold: usize,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_fold: Vec<FoldReport>,
    pub pooled: Option<ErrorStats>,
    pub failures: usize,
    pub failure_rows: Vec<FailureRow>,
    pub items: Vec<ItemResult>,
}

/// Builds the report from per-item outcomes (in any order).
pub fn summarize(
    method: &str,
    outcomes: Vec<(&EvalItem, Result<Prediction>)>,
) -> Result<EvalReport> {
    let mut items = Vec::new();
    let mut failure_rows = Vec::new();
    for (item, outcome) in outcomes {
        match outcome.and_then(|p| score(item, &p)) {
            Ok(errors) => items.push(ItemResult {
                id: item.id.clone(),
                fold: item.fold,
                errors,
            }),
            Err(e) => failure_rows.push(FailureRow {
                id: item.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    failure_rows.sort_by(|a, b| a.id.cmp(&b.id));
    let pool = |f: &dyn Fn(&ItemResult) -> bool| -> Vec<f64> {
        items
            .iter()
            .filter(|i| f(i))
            .flat_map(|i| i.errors.iter().copied())
            .collect()
    };
    let folds: std::collections::BTreeSet<usize> = items.iter().map(|i| i.fold).collect();
    let per_fold = folds
        .into_iter()
        .map(|fold| {
            let errs = pool(&|i| i.fold == fold);
            Ok(FoldReport {
                fold,
                count: errs.len(),
                stats: Some(error_stats(&errs)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all = pool(&|_| true);
    let pooled = if all.is_empty() {
        None
    } else {
        Some(error_stats(&all)?)
    };
    Ok(EvalReport {
        method: method.to_string(),
        per_fold,
        pooled,
        failures: failure_rows.len(),
        failure_rows,
        items,
    })
}

pub fn evaluate(estimator: &dyn Estimator, items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let outcomes = items.iter().map(|i| (i, estimator.estimate(i))).collect();
    summarize(&estimator.name(), outcomes)
}

pub const TABLE_HEADER: [&str; 6] = ["Mean", "Med.", "Tri.", "Best 25%", "Worst 25%", "G.M."];

/// Plain-text table in the column order mean, median, trimean, best 25%,
/// worst 25%, G.M.
pub fn format_table(rows: &[(String, ErrorStats)]) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<name_w$}", "Method");
    for h in TABLE_HEADER {
        out.push_str(&format!("  {h:>9}"));
    }
    out.push('\n');
    for (name, s) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for v in [s.mean, s.median, s.trimean, s.best25, s.worst25, s.gm] {
            out.push_str(&format!("  {v:>9.2}"));
        }
        out.push('\n');
    }
    out
}
