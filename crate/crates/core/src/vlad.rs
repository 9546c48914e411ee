//! Visual vocabulary (k-means over local descriptors) and hard-assignment
//! VLAD aggregation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, Reader};
use crate::keyframe::DescriptorMatrix;
use crate::par::{self, Exec};

pub const VOCABULARY_MAGIC: &[u8; 4] = b"LGVC";
pub const DEFAULT_CLUSTERS: usize = 64;
pub const DEFAULT_MAX_KEYPOINTS_PER_IMAGE: usize = 2048;

#[derive(Debug, Error)]
pub enum VladError {
    #[error("need at least {clusters} descriptor rows, got {rows}")]
    TooFewRows { rows: usize, clusters: usize },
    #[error("cluster count must be at least 1")]
    NoClusters,
    #[error("non-finite descriptor value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("truncated or oversized vocabulary file {0}")]
    Truncated(PathBuf),
    #[error("unknown metric code {0}")]
    UnknownMetric(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Similarity used for hard assignment and, for deep descriptors, matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self, VladError> {
        match c {
            0 => Ok(Metric::Cosine),
            1 => Ok(Metric::Euclidean),
            other => Err(VladError::UnknownMetric(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    centroids: Vec<f32>,
    n_clusters: usize,
    dim: usize,
    metric: Metric,
    seed: u64,
}

impl Vocabulary {
    /// Builds a vocabulary from explicit centroid rows. Cosine vocabularies
    /// have their rows normalized.
    pub fn from_centroids(rows: &[Vec<f64>], metric: Metric, seed: u64) -> Result<Self, VladError> {
        let n_clusters = rows.len();
        if n_clusters == 0 {
            return Err(VladError::NoClusters);
        }
        let dim = rows[0].len();
        let mut centroids = Vec::with_capacity(n_clusters * dim);
        for r in rows {
            if r.len() != dim {
                return Err(VladError::DimensionMismatch { expected: dim, found: r.len() });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(VladError::NonFinite);
            }
            let scale = match metric {
                Metric::Cosine => {
                    let n = norm(r);
                    if n > 0.0 { 1.0 / n } else { 1.0 }
                }
                Metric::Euclidean => 1.0,
            };
            centroids.extend(r.iter().map(|v| (v * scale) as f32));
        }
        Ok(Vocabulary { centroids, n_clusters, dim, metric, seed })
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Centroid rows widened to `f64`.
    pub fn centroids_f64(&self) -> Vec<Vec<f64>> {
        (0..self.n_clusters)
            .map(|j| self.centroid(j).iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), VladError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(VOCABULARY_MAGIC)?;
        binio::put_u32(&mut w, self.n_clusters as u32)?;
        binio::put_u32(&mut w, self.dim as u32)?;
        binio::put_u8(&mut w, self.metric.code())?;
        binio::put_u64(&mut w, self.seed)?;
        binio::put_f32s(&mut w, &self.centroids)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VladError> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if !r.magic(VOCABULARY_MAGIC) {
            return Err(VladError::BadMagic(path.to_path_buf()));
        }
        let truncated = || VladError::Truncated(path.to_path_buf());
        let n_clusters = r.u32().ok_or_else(truncated)? as usize;
        let dim = r.u32().ok_or_else(truncated)? as usize;
        let metric = Metric::from_code(r.u8().ok_or_else(truncated)?)?;
        let seed = r.u64().ok_or_else(truncated)?;
        if r.remaining() != n_clusters * dim * 4 {
            return Err(truncated());
        }
        let centroids = r.f32_vec(n_clusters * dim).ok_or_else(truncated)?;
        if n_clusters == 0 {
            return Err(VladError::NoClusters);
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(VladError::NonFinite);
        }
        Ok(Vocabulary { centroids, n_clusters, dim, metric, seed })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub n_clusters: usize,
    pub metric: Metric,
    pub seed: u64,
    pub max_per_image: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            n_clusters: DEFAULT_CLUSTERS,
            metric: Metric::Cosine,
            seed: 0,
            max_per_image: DEFAULT_MAX_KEYPOINTS_PER_IMAGE,
            max_iterations: 100,
            tolerance: 1e-6,
        }
    }
}

/// Diagnostics from a k-means run.
#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub iterations: usize,
    /// Within-cluster squared distance after each assignment step.
    pub costs: Vec<f64>,
    pub converged: bool,
    pub reseeded: usize,
}

/// Fits a vocabulary with k-means++ seeded Lloyd iterations. For the cosine
/// metric rows are normalized first and centroids are renormalized after each
/// update (spherical k-means). Each image contributes at most
/// `config.max_per_image` rows, drawn with the run seed.
pub fn fit_vocabulary(
    images: &[&DescriptorMatrix],
    config: &VocabConfig,
    exec: Exec,
) -> Result<(Vocabulary, FitReport), VladError> {
    let k = config.n_clusters;
    if k == 0 {
        return Err(VladError::NoClusters);
    }
    let dim = images.first().map_or(0, |m| m.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut points: Vec<Vec<f64>> = Vec::new();
    for m in images {
        if m.cols() != dim {
            return Err(VladError::DimensionMismatch { expected: dim, found: m.cols() });
        }
        let take: Vec<usize> = if m.rows() > config.max_per_image {
            let mut idx = sample(&mut rng, m.rows(), config.max_per_image).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..m.rows()).collect()
        };
        for i in take {
            let row: Vec<f64> = m.row(i).iter().map(|&v| v as f64).collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(VladError::NonFinite);
            }
            points.push(row);
        }
    }
    if points.len() < k {
        return Err(VladError::TooFewRows { rows: points.len(), clusters: k });
    }
    if config.metric == Metric::Cosine {
        for p in &mut points {
            normalize_in_place(p);
        }
    }

    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);
    let mut report = FitReport::default();
    for iter in 0..config.max_iterations.max(1) {
        let assigned: Vec<(usize, f64)> = par::map(exec, &points, |p| nearest_sq(p, &centroids));
        report.costs.push(assigned.iter().map(|a| a.1).sum());
        report.iterations = iter + 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(j, _)) in points.iter().zip(&assigned) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        // farthest points first, for re-seeding empty clusters
        let mut far: Vec<usize> = (0..points.len()).collect();
        far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();

        let mut movement: f64 = 0.0;
        for j in 0..k {
            let mut next = if counts[j] == 0 {
                report.reseeded += 1;
                let src = far.next().expect("at least k points");
                points[src].clone()
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            if config.metric == Metric::Cosine && norm(&next) > 0.0 {
                normalize_in_place(&mut next);
            }
            movement = movement.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if movement < config.tolerance {
            report.converged = true;
            break;
        }
    }
    let vocab = Vocabulary::from_centroids(&centroids, config.metric, config.seed)?;
    Ok((vocab, report))
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest_sq(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize_in_place(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        for v in a {
            *v /= n;
        }
    }
}

/// Hard assignment: most cosine-similar centroid, or nearest in Euclidean
/// distance. Ties go to the lowest index.
pub fn assign(f: &[f32], vocab: &Vocabulary) -> Result<usize, VladError> {
    if f.len() != vocab.dim {
        return Err(VladError::DimensionMismatch { expected: vocab.dim, found: f.len() });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(VladError::NonFinite);
    }
    Ok(assign_unchecked(f, vocab))
}

fn assign_unchecked(f: &[f32], vocab: &Vocabulary) -> usize {
    let mut best = 0;
    match vocab.metric {
        Metric::Cosine => {
            let fnorm = f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..vocab.n_clusters {
                let c = vocab.centroid(j);
                let dot: f64 = f.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum();
                let cnorm = c.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                let denom = fnorm * cnorm;
                let sim = if denom > 0.0 { dot / denom } else { 0.0 };
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
        }
        Metric::Euclidean => {
            let mut best_d = f64::INFINITY;
            for j in 0..vocab.n_clusters {
                let d: f64 = f
                    .iter()
                    .zip(vocab.centroid(j))
                    .map(|(&a, &b)| {
                        let t = a as f64 - b as f64;
                        t * t
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
    }
    best
}

/// How each assigned descriptor contributes to its cluster block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualWeighting {
    /// `f - c_j` (classic VLAD).
    #[default]
    Residual,
    /// `cos(f, c_j) * (f - c_j)`.
    CosineWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VladOptions {
    pub weighting: ResidualWeighting,
    pub intra_normalize: bool,
}

impl Default for VladOptions {
    fn default() -> Self {
        VladOptions { weighting: ResidualWeighting::Residual, intra_normalize: true }
    }
}

/// Image-level descriptor of length `N_C * N_KD`. Unit norm unless `zero`.
#[derive(Clone, Debug, PartialEq)]
pub struct VladDescriptor {
    values: Vec<f64>,
    zero: bool,
}

impl VladDescriptor {
    /// Wraps raw values, normalizing them. An all-zero input gives the flagged
    /// zero descriptor.
    pub fn from_values(mut values: Vec<f64>) -> Self {
        let n = norm(&values);
        if n > 0.0 && n.is_finite() {
            for v in &mut values {
                *v /= n;
            }
            VladDescriptor { values, zero: false }
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
            VladDescriptor { values, zero: true }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True for the all-zero descriptor of an image without usable keypoints.
    pub fn is_zero(&self) -> bool {
        self.zero
    }
}

/// Aggregates the local descriptors of one image into a VLAD descriptor:
/// per-cluster residual sums, optional per-block normalization, then global
/// L2 normalization.
pub fn compute_vlad(
    descriptors: &DescriptorMatrix,
    vocab: &Vocabulary,
    options: &VladOptions,
) -> Result<VladDescriptor, VladError> {
    if descriptors.cols() != vocab.dim && descriptors.rows() > 0 {
        return Err(VladError::DimensionMismatch { expected: vocab.dim, found: descriptors.cols() });
    }
    let d = vocab.dim;
    let mut blocks = vec![0.0f64; vocab.n_clusters * d];
    for f in descriptors.iter_rows() {
        let j = assign_unchecked(f, vocab);
        let c = vocab.centroid(j);
        let weight = match options.weighting {
            ResidualWeighting::Residual => 1.0,
            ResidualWeighting::CosineWeighted => cosine_f32(f, c),
        };
        let block = &mut blocks[j * d..(j + 1) * d];
        for ((b, &fv), &cv) in block.iter_mut().zip(f).zip(c) {
            *b += weight * (fv as f64 - cv as f64);
        }
    }
    if options.intra_normalize {
        for block in blocks.chunks_exact_mut(d.max(1)) {
            normalize_in_place(block);
        }
    }
    Ok(VladDescriptor::from_values(blocks))
}

fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom > 0.0 { dot / denom } else { 0.0 }
}

/// Computes descriptors for a batch of images, in order.
pub fn compute_vlad_batch(
    images: &[&DescriptorMatrix],
    vocab: &Vocabulary,
    options: &VladOptions,
    exec: Exec,
) -> Result<Vec<VladDescriptor>, VladError> {
    par::map(exec, images, |m| compute_vlad(m, vocab, options)).into_iter().collect()
}

/// Cosine similarity of two VLAD descriptors; `-1` if either is the zero
/// descriptor so that such images sort last.
pub fn vlad_similarity(a: &VladDescriptor, b: &VladDescriptor) -> Result<f64, VladError> {
    if a.len() != b.len() {
        return Err(VladError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    if a.zero || b.zero {
        return Ok(-1.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (norm(&a.values) * norm(&b.values))).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn matrix(rows: &[Vec<f32>]) -> DescriptorMatrix {
        DescriptorMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_computed_two_cluster_example() {
        let vocab = Vocabulary::from_centroids(&[vec![1.0, 0.0], vec![0.0, 1.0]], Metric::Euclidean, 0).unwrap();
        let d = matrix(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let v = compute_vlad(&d, &vocab, &VladOptions::default()).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let expect = [h, 0.0, 0.0, h];
        for (a, b) in v.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", v.values());
        }
        // without intra-normalization the raw blocks (1,0),(0,2) are normalized globally
        let raw = compute_vlad(&d, &vocab, &VladOptions { intra_normalize: false, ..Default::default() }).unwrap();
        let s = 5f64.sqrt();
        for (a, b) in raw.values().iter().zip([1.0 / s, 0.0, 0.0, 2.0 / s]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_gives_flagged_zero() {
        let vocab = Vocabulary::from_centroids(&[vec![1.0, 0.0], vec![0.0, 1.0]], Metric::Cosine, 0).unwrap();
        let v = compute_vlad(&matrix(&[vec![1.0, 0.0]]), &vocab, &VladOptions::default()).unwrap();
        assert!(v.is_zero());
        assert!(v.values().iter().all(|&x| x == 0.0));
        let empty = compute_vlad(&DescriptorMatrix::empty(2), &vocab, &VladOptions::default()).unwrap();
        assert!(empty.is_zero());
        assert_eq!(vlad_similarity(&v, &empty).unwrap(), -1.0);
    }

    #[test]
    fn assign_examples() {
        let rows: Vec<Vec<f64>> = (0..5).map(|j| (0..3).map(|i| ((i + j * 3) as f64).sin()).collect()).collect();
        let vocab = Vocabulary::from_centroids(&rows, Metric::Euclidean, 0).unwrap();
        assert_eq!(assign(vocab.centroid(3), &vocab).unwrap(), 3);
        assert!(assign(&[0.0, 1.0], &vocab).is_err());

        let tie = Vocabulary::from_centroids(&[vec![1.0, 0.0], vec![-1.0, 0.0]], Metric::Euclidean, 0).unwrap();
        assert_eq!(assign(&[0.0, 5.0], &tie).unwrap(), 0);
        let tie_cos = Vocabulary::from_centroids(&[vec![1.0, 0.0], vec![0.0, 1.0]], Metric::Cosine, 0).unwrap();
        assert_eq!(assign(&[1.0, 1.0], &tie_cos).unwrap(), 0);
    }

    #[test]
    fn assign_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| normal.sample(&mut rng)).collect()).collect();
            let vocab = Vocabulary::from_centroids(&rows, metric, 0).unwrap();
            let cents = vocab.centroids_f64();
            for _ in 0..200 {
                let f: Vec<f32> = (0..8).map(|_| normal.sample(&mut rng) as f32).collect();
                let fd: Vec<f64> = f.iter().map(|&v| v as f64).collect();
                let scores: Vec<f64> = cents
                    .iter()
                    .map(|c| match metric {
                        Metric::Euclidean => -sq_dist(&fd, c),
                        Metric::Cosine => fd.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (norm(&fd) * norm(c)),
                    })
                    .collect();
                let mut oracle = 0;
                for j in 1..scores.len() {
                    if scores[j] > scores[oracle] {
                        oracle = j;
                    }
                }
                assert_eq!(assign(&f, &vocab).unwrap(), oracle);
            }
        }
    }

    #[test]
    fn identical_rows_single_cluster() {
        let m = matrix(&vec![vec![0.5, -2.0, 1.0]; 10]);
        let cfg = VocabConfig { n_clusters: 1, metric: Metric::Euclidean, ..Default::default() };
        let (vocab, _) = fit_vocabulary(&[&m], &cfg, Exec::Sequential).unwrap();
        assert_eq!(vocab.centroid(0), &[0.5, -2.0, 1.0]);
    }

    #[test]
    fn two_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rows = Vec::new();
        for center in [0.0f64, 10.0] {
            for _ in 0..100 {
                rows.push(vec![(center + noise.sample(&mut rng)) as f32, (center + noise.sample(&mut rng)) as f32]);
            }
        }
        let m = matrix(&rows);
        let means: Vec<[f64; 2]> = rows
            .chunks(100)
            .map(|c| {
                let n = c.len() as f64;
                [c.iter().map(|r| r[0] as f64).sum::<f64>() / n, c.iter().map(|r| r[1] as f64).sum::<f64>() / n]
            })
            .collect();
        let cfg = VocabConfig { n_clusters: 2, metric: Metric::Euclidean, seed: 5, ..Default::default() };
        let (vocab, report) = fit_vocabulary(&[&m], &cfg, Exec::Parallel).unwrap();
        for mean in means {
            let close = (0..2).any(|j| {
                let c = vocab.centroid(j);
                ((c[0] as f64 - mean[0]).powi(2) + (c[1] as f64 - mean[1]).powi(2)).sqrt() < 0.1
            });
            assert!(close);
        }
        assert!(report.converged);
    }

    #[test]
    fn too_few_rows_and_non_finite() {
        let m = matrix(&[vec![1.0, 0.0]]);
        let cfg = VocabConfig { n_clusters: 2, ..Default::default() };
        assert!(matches!(fit_vocabulary(&[&m], &cfg, Exec::Sequential), Err(VladError::TooFewRows { .. })));
        assert_eq!(VocabConfig::default().n_clusters, 64);
        assert_eq!(VocabConfig::default().max_per_image, 2048);
    }

    #[test]
    fn similarity_examples() {
        let a = VladDescriptor::from_values(vec![1.0, 2.0, 0.0]);
        let b = VladDescriptor::from_values(vec![0.0, 0.0, 3.0]);
        assert!((vlad_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(vlad_similarity(&a, &b).unwrap(), 0.0);
        let c = VladDescriptor::from_values(vec![1.0]);
        assert!(vlad_similarity(&a, &c).is_err());
    }
}
