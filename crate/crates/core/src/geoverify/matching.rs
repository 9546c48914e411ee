//! Mutual nearest-neighbor matching of local descriptors.

use crate::keyframe::{DescriptorMatrix, KeypointSet};
use crate::vlad::Metric;

use super::GeoError;

/// One-to-one correspondences between two images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// `(k_i, k_j)` keypoint indices.
    pub pairs: Vec<(usize, usize)>,
    pub points_i: Vec<[f64; 2]>,
    pub points_j: Vec<[f64; 2]>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds a match set directly from corresponding pixel coordinates.
    pub fn from_points(points_i: Vec<[f64; 2]>, points_j: Vec<[f64; 2]>) -> Self {
        let pairs = (0..points_i.len().min(points_j.len())).map(|k| (k, k)).collect();
        MatchSet { pairs, points_i, points_j }
    }

    pub fn subset(&self, keep: &[bool]) -> MatchSet {
        let mut out = MatchSet::default();
        for (k, _) in keep.iter().enumerate().filter(|(_, &b)| b) {
            out.pairs.push(self.pairs[k]);
            out.points_i.push(self.points_i[k]);
            out.points_j.push(self.points_j[k]);
        }
        out
    }
}

/// Indices `(a, b)` such that `b` is the nearest neighbor of `a` in `desc_j`
/// and `a` is the nearest neighbor of `b` in `desc_i`. Ties go to the lower
/// index. Cosine distance is `1 - cos`, Euclidean is squared L2.
pub fn mutual_nearest(
    desc_i: &DescriptorMatrix,
    desc_j: &DescriptorMatrix,
    metric: Metric,
) -> Result<Vec<(usize, usize)>, GeoError> {
    if desc_i.rows() == 0 || desc_j.rows() == 0 {
        return Ok(Vec::new());
    }
    if desc_i.cols() != desc_j.cols() {
        return Err(GeoError::DimensionMismatch { expected: desc_i.cols(), found: desc_j.cols() });
    }
    let (ni, nj) = (desc_i.rows(), desc_j.rows());
    let norms = |d: &DescriptorMatrix| -> Vec<f64> {
        d.iter_rows().map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).collect()
    };
    let (sq_i, sq_j) = (norms(desc_i), norms(desc_j));
    let mut dist = vec![0.0f64; ni * nj];
    for (a, ra) in desc_i.iter_rows().enumerate() {
        for (b, rb) in desc_j.iter_rows().enumerate() {
            let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
            dist[a * nj + b] = match metric {
                Metric::Euclidean => sq_i[a] + sq_j[b] - 2.0 * dot,
                Metric::Cosine => {
                    let denom = (sq_i[a] * sq_j[b]).sqrt();
                    1.0 - if denom > 0.0 { dot / denom } else { 0.0 }
                }
            };
        }
    }
    let argmin = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best = (0, f64::INFINITY);
        for (k, d) in it {
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    };
    let best_j: Vec<usize> = (0..ni).map(|a| argmin(&mut (0..nj).map(|b| (b, dist[a * nj + b])))).collect();
    let best_i: Vec<usize> = (0..nj).map(|b| argmin(&mut (0..ni).map(|a| (a, dist[a * nj + b])))).collect();
    Ok((0..ni).filter(|&a| best_i[best_j[a]] == a).map(|a| (a, best_j[a])).collect())
}

/// Mutual matches with their pixel coordinates.
pub fn mutual_match(
    keypoints_i: &KeypointSet,
    desc_i: &DescriptorMatrix,
    keypoints_j: &KeypointSet,
    desc_j: &DescriptorMatrix,
    metric: Metric,
) -> Result<MatchSet, GeoError> {
    let pairs = mutual_nearest(desc_i, desc_j, metric)?;
    let px = |kp: &KeypointSet, k: usize| {
        let [u, v] = kp.coords()[k];
        [u as f64, v as f64]
    };
    Ok(MatchSet {
        points_i: pairs.iter().map(|&(a, _)| px(keypoints_i, a)).collect(),
        points_j: pairs.iter().map(|&(_, b)| px(keypoints_j, b)).collect(),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DescriptorMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        DescriptorMatrix::new(rows, cols, data).unwrap()
    }

    fn brute_force(a: &DescriptorMatrix, b: &DescriptorMatrix, metric: Metric) -> Vec<(usize, usize)> {
        let d = |x: &[f32], y: &[f32]| -> f64 {
            let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
            match metric {
                Metric::Euclidean => x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum(),
                Metric::Cosine => {
                    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
                    let n = (x.iter().map(|v| v * v).sum::<f64>() * y.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    1.0 - dot / n
                }
            }
        };
        let mut out = Vec::new();
        for i in 0..a.rows() {
            let mut bj = 0;
            for j in 1..b.rows() {
                if d(a.row(i), b.row(j)) < d(a.row(i), b.row(bj)) {
                    bj = j;
                }
            }
            let mut bi = 0;
            for k in 1..a.rows() {
                if d(a.row(k), b.row(bj)) < d(a.row(bi), b.row(bj)) {
                    bi = k;
                }
            }
            if bi == i {
                out.push((i, bj));
            }
        }
        out
    }

    #[test]
    fn identical_matrices_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_matrix(&mut rng, 30, 16);
        let m = mutual_nearest(&d, &d, Metric::Cosine).unwrap();
        assert_eq!(m, (0..30).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn only_mutual_pairs_survive() {
        // both rows of `a` prefer b0, which prefers a1; the globally closest
        // pair is always mutual, so only empty inputs give an empty set

        let a = DescriptorMatrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        let b = DescriptorMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(mutual_nearest(&a, &b, Metric::Euclidean).unwrap(), vec![(1, 0)]);
        let empty = DescriptorMatrix::empty(2);
        assert!(mutual_nearest(&a, &empty, Metric::Cosine).unwrap().is_empty());
        assert!(mutual_nearest(&empty, &b, Metric::Cosine).unwrap().is_empty());
    }

    #[test]
    fn planted_correspondences_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let a = random_matrix(&mut rng, 20, 8);
            // first 12 rows of b are noisy copies of a's rows in reverse, the rest distractors
            let mut rows: Vec<Vec<f32>> = (0..12)
                .map(|k| a.row(19 - k).iter().map(|&v| v + rng.random_range(-0.05f32..0.05)).collect())
                .collect();
            rows.extend((0..10).map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect()));
            let b = DescriptorMatrix::from_rows(&rows).unwrap();
            let fast = mutual_nearest(&a, &b, metric).unwrap();
            assert_eq!(fast, brute_force(&a, &b, metric));
            for k in 0..12 {
                assert!(fast.contains(&(19 - k, k)));
            }
        }
    }
}
