//! Spectral clustering of an illumination vector map.
//!
//! Nodes are (block-averaged) pixels; edges carry `exp(−θ/σ²)` with θ the
//! angle between gain vectors in radians. The leading eigenvectors of the
//! normalized affinity `D^{-1/2} W D^{-1/2}` (the smallest of the normalized
//! Laplacian) are row-normalized and grouped with k-means.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::GainMap;
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    /// Radians.
    pub rbf_sigma: f64,
    pub max_nodes: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
    /// Degrees.
    pub merge_threshold: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_clusters: 2,
            rbf_sigma: 0.1,
            max_nodes: 4096,
            kmeans_restarts: 4,
            seed: 0,
            merge_threshold: 2.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 || self.n_clusters > 254 {
            return Err(invalid(format!(
                "n_clusters must be in 2..=254, got {}",
                self.n_clusters
            )));
        }
        if !(self.rbf_sigma > 0.0) {
            return Err(invalid("rbf_sigma must be positive"));
        }
        if self.max_nodes < self.n_clusters {
            return Err(invalid("max_nodes must be at least n_clusters"));
        }
        if self.kmeans_restarts == 0 {
            return Err(invalid("kmeans_restarts must be at least 1"));
        }
        if !(self.merge_threshold >= 0.0) {
            return Err(invalid("merge_threshold must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMask {
    pub height: usize,
    pub width: usize,
    /// `None` marks pixels that were invalid in the map.
    pub labels: Vec<Option<u8>>,
    pub n_clusters: usize,
    /// Set when the map had too few distinct vectors to split.
    pub merged: bool,
}

impl ClusterMask {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for l in self.labels.iter().flatten() {
            sizes[*l as usize] += 1;
        }
        sizes
    }

    /// 8-bit plane: label l → min(128·l, 254), invalid → 255.
    pub fn to_pgm_values(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| match l {
                Some(l) => (*l as usize * 128).min(254) as u8,
                None => 255,
            })
            .collect()
    }
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.map(|x| x / n))
}

/// Block-averaged unit vectors; returns (grid height, grid width, factor, nodes).
fn downsample(map: &GainMap, max_nodes: usize) -> (usize, usize, usize, Vec<Option<[f64; 3]>>) {
    let (h, w) = (map.height, map.width);
    let mut f = 1;
    while h.div_ceil(f) * w.div_ceil(f) > max_nodes {
        f += 1;
    }
    let (gh, gw) = (h.div_ceil(f), w.div_ceil(f));
    let mut sums = vec![[0.0; 3]; gh * gw];
    let mut any = vec![false; gh * gw];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !map.valid[i] {
                continue;
            }
            if let Some(u) = unit(map.gains[i]) {
                let n = (r / f) * gw + c / f;
                any[n] = true;
                for d in 0..3 {
                    sums[n][d] += u[d];
                }
            }
        }
    }
    let nodes = sums
        .into_iter()
        .zip(any)
        .map(|(s, a)| if a { unit(s) } else { None })
        .collect();
    (gh, gw, f, nodes)
}

/// Greatest angle (via cross/dot, accurate near zero) is below `tol` radians.
fn same_direction(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    s.atan2(c).abs() < tol
}

pub fn spectral_cluster(map: &GainMap, config: &ClusterConfig) -> Result<ClusterMask> {
    config.validate()?;
    let (gh, gw, f, nodes) = downsample(map, config.max_nodes);
    let index: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].is_some()).collect();
    if index.is_empty() {
        return Err(Error::DegenerateScene(
            "illumination map has no valid pixels".into(),
        ));
    }
    let vecs: Vec<[f64; 3]> = index.iter().map(|&i| nodes[i].unwrap()).collect();

    let mut distinct: Vec<[f64; 3]> = Vec::new();
    for v in &vecs {
        if distinct.len() >= config.n_clusters {
            break;
        }
        if !distinct.iter().any(|d| same_direction(*d, *v, 1e-9)) {
            distinct.push(*v);
        }
    }
    let node_labels: Vec<u8> = if distinct.len() < config.n_clusters {
        vec![0; vecs.len()]
    } else {
        let embedding = spectral_embedding(&vecs, config)?;
        let mut rng = stage_rng(config.seed, Stage::Cluster);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _ in 0..config.kmeans_restarts {
            let first = rng.random_range(0..vecs.len());
            let (inertia, labels) = kmeans(&embedding, config.n_clusters, first);
            if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                best = Some((inertia, labels));
            }
        }
        canonical_labels(&best.expect("at least one restart").1)
    };
    let n_found = node_labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    let merged = n_found < config.n_clusters;

    let mut grid = vec![None; gh * gw];
    for (k, &i) in index.iter().enumerate() {
        grid[i] = Some(node_labels[k]);
    }
    let labels = (0..map.height * map.width)
        .map(|i| {
            let (r, c) = (i / map.width, i % map.width);
            if map.valid[i] && unit(map.gains[i]).is_some() {
                grid[(r / f) * gw + c / f]
            } else {
                None
            }
        })
        .collect();
    Ok(ClusterMask {
        height: map.height,
        width: map.width,
        labels,
        n_clusters: if merged { 1 } else { config.n_clusters },
        merged,
    })
}

/// Relabels so that labels appear in increasing order of first occurrence.
fn canonical_labels(labels: &[usize]) -> Vec<u8> {
    let mut order: Vec<usize> = Vec::new();
    labels
        .iter()
        .map(|l| match order.iter().position(|o| o == l) {
            Some(p) => p as u8,
            None => {
                order.push(*l);
                (order.len() - 1) as u8
            }
        })
        .collect()
}

/// Normalized affinity `D^{-1/2} W D^{-1/2}`, row-major, zero diagonal.
pub(crate) fn normalized_affinity(vecs: &[[f64; 3]], sigma: f64) -> Vec<f64> {
    let n = vecs.len();
    let s2 = sigma * sigma;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let a = vecs[i];
            let b = vecs[j];
            let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
            let w = (-dot.acos() / s2).exp();
            m[i * n + j] = w;
            m[j * n + i] = w;
        }
    }
    let dinv: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = m[i * n..(i + 1) * n].iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] *= dinv[i] * dinv[j];
        }
    }
    m
}

/// Row-normalized spectral embedding, `n × k` row-major.
fn spectral_embedding(vecs: &[[f64; 3]], config: &ClusterConfig) -> Result<Vec<f64>> {
    let n = vecs.len();
    let k = config.n_clusters;
    let m = normalized_affinity(vecs, config.rbf_sigma);
    let cols = if n <= DENSE_LIMIT {
        dense_top_eigenvectors(&m, n, k)?
    } else {
        let mut rng = stage_rng(config.seed ^ 0x5eed, Stage::Cluster);
        krylov_top_eigenvectors(&m, n, k, &mut rng)?
    };
    let mut emb = vec![0.0; n * k];
    for i in 0..n {
        let norm = (0..k).map(|j| cols[j][i] * cols[j][i]).sum::<f64>().sqrt();
        for j in 0..k {
            emb[i * k + j] = if norm > 0.0 { cols[j][i] / norm } else { 0.0 };
        }
    }
    Ok(emb)
}

const DENSE_LIMIT: usize = 256;

fn dense_top_eigenvectors(m: &[f64], n: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    let mat = DMatrix::from_row_slice(n, n, m);
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::ClusteringFailure("dense eigen-decomposition did not converge".into())
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(order[..k]
        .iter()
        .map(|&j| eig.eigenvectors.column(j).iter().copied().collect())
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec_block(m: &[f64], n: usize, vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = vs.len();
    let packed: Vec<f64> = vs.concat();
    let mut out = vec![0.0; n * b];
    // M (n×n, row-major) times the columns of `packed`; out is column-major too.
    unsafe {
        matrixmultiply::dgemm(
            n,
            n,
            b,
            1.0,
            m.as_ptr(),
            n as isize,
            1,
            packed.as_ptr(),
            1,
            n as isize,
            0.0,
            out.as_mut_ptr(),
            1,
            n as isize,
        );
    }
    out.chunks_exact(n).map(<[f64]>::to_vec).collect()
}

const KRYLOV_TOL: f64 = 1e-8;
const KRYLOV_ACCEPT: f64 = 1e-5;
const KRYLOV_MAX_BASIS: usize = 400;

/// Top-k eigenvectors of a symmetric matrix by block Krylov iteration with
/// full re-orthogonalization and Rayleigh–Ritz extraction.
fn krylov_top_eigenvectors<R: Rng>(
    m: &[f64],
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let block = (k + 2).min(n);
    let max_basis = KRYLOV_MAX_BASIS.min(n);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut t: Vec<Vec<f64>> = Vec::new();
    let mut next: Vec<Vec<f64>> = (0..block)
        .map(|_| {
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    loop {
        let mut fresh: Vec<Vec<f64>> = Vec::new();
        for mut v in next {
            if basis.len() + fresh.len() >= max_basis {
                break;
            }
            let orig = dot(&v, &v).sqrt();
            for _ in 0..2 {
                for q in basis.iter().chain(fresh.iter()) {
                    let p = dot(q, &v);
                    v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-10 * orig.max(1e-300) {
                v.iter_mut().for_each(|x| *x /= norm);
                fresh.push(v);
            }
        }
        let invariant = fresh.is_empty();
        if !invariant {
            let new_images = matvec_block(m, n, &fresh);
            let start = basis.len();
            basis.extend(fresh);
            images.extend(new_images);
            let size = basis.len();
            for row in t.iter_mut() {
                row.resize(size, 0.0);
            }
            t.resize(size, vec![0.0; size]);
            for j in start..size {
                for i in 0..size {
                    let v = dot(&basis[i], &images[j]);
                    t[i][j] = v;
                    t[j][i] = v;
                }
            }
        }
        let size = basis.len();
        if size < k {
            return Err(Error::ClusteringFailure(
                "Krylov space smaller than the cluster count".into(),
            ));
        }
        let tm = DMatrix::from_fn(size, size, |i, j| 0.5 * (t[i][j] + t[j][i]));
        let eig = SymmetricEigen::try_new(tm, f64::EPSILON, 10_000).ok_or_else(|| {
            Error::ClusteringFailure("projected eigenproblem did not converge".into())
        })?;
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut vectors = Vec::with_capacity(k);
        let mut worst = 0.0f64;
        for &j in &order[..k] {
            let s = eig.eigenvectors.column(j);
            let theta = eig.eigenvalues[j];
            let mut y = vec![0.0; n];
            let mut my = vec![0.0; n];
            for (l, &c) in s.iter().enumerate() {
                y.iter_mut().zip(&basis[l]).for_each(|(a, b)| *a += c * b);
                my.iter_mut().zip(&images[l]).for_each(|(a, b)| *a += c * b);
            }
            let res = my
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - theta * b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(res);
            vectors.push(y);
        }
        if worst <= KRYLOV_TOL || invariant || size >= max_basis {
            if worst <= KRYLOV_ACCEPT {
                return Ok(vectors);
            }
            return Err(Error::ClusteringFailure(format!(
                "eigen-solver stalled with residual {worst:.3e}"
            )));
        }
        next = images[size - size.min(block)..].to_vec();
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd iterations from farthest-point seeds; returns (inertia, labels).
fn kmeans(points: &[f64], k: usize, first: usize) -> (f64, Vec<usize>) {
    let dim = k;
    let n = points.len() / dim;
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers: Vec<Vec<f64>> = vec![pt(first).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centers[0])).collect();
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .unwrap();
        centers.push(pt(far).to_vec());
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(pt(i), centers.last().unwrap()));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(pt(i), &centers[a]).total_cmp(&sq_dist(pt(i), &centers[b]))
                })
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i]]
                .iter_mut()
                .zip(pt(i))
                .for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(pt(i), &centers[labels[i]])).sum();
    (inertia, labels)
}
