//! Normalized 8-point fundamental matrix estimation inside RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeoError, MatchSet};

pub const MIN_MATCHES: usize = 8;

/// Rank-2 fundamental matrix with unit Frobenius norm, satisfying
/// `x_j^T F x_i = 0` for homogeneous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Algebraic residual `x_j^T F x_i`.
    pub fn residual(&self, xi: [f64; 2], xj: [f64; 2]) -> f64 {
        (Vector3::new(xj[0], xj[1], 1.0).transpose() * self.0 * Vector3::new(xi[0], xi[1], 1.0))[0]
    }

    /// First-order geometric (Sampson) distance in pixels.
    pub fn sampson_distance(&self, xi: [f64; 2], xj: [f64; 2]) -> f64 {
        let a = Vector3::new(xi[0], xi[1], 1.0);
        let b = Vector3::new(xj[0], xj[1], 1.0);
        let fa = self.0 * a;
        let ftb = self.0.transpose() * b;
        let r = b.dot(&fa);
        let denom = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
        if denom > 0.0 {
            (r * r / denom).sqrt()
        } else if r == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Sampson distance, in pixels, below which a match is an inlier.
    pub inlier_threshold_px: f64,
    pub confidence: f64,
    pub min_matches: usize,
    /// Minimum inlier ratio for a pair to be accepted as a loop.
    pub acceptance_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 2000,
            inlier_threshold_px: 2.0,
            confidence: 0.999,
            min_matches: MIN_MATCHES,
            acceptance_ratio: 0.5,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations == 0 {
            return Err("max_iterations must be positive".into());
        }
        if !(self.inlier_threshold_px > 0.0) {
            return Err("inlier_threshold_px must be positive".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err("confidence must lie in (0, 1)".into());
        }
        if self.min_matches < MIN_MATCHES {
            return Err(format!("min_matches must be at least {MIN_MATCHES}"));
        }
        if !(self.acceptance_ratio > 0.0 && self.acceptance_ratio <= 1.0) {
            return Err("acceptance_ratio must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RansacOutcome {
    pub fundamental: FundamentalMatrix,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
    pub degenerate_samples: usize,
}

impl RansacOutcome {
    pub fn inlier_ratio(&self) -> f64 {
        if self.inliers.is_empty() {
            0.0
        } else {
            self.inlier_count as f64 / self.inliers.len() as f64
        }
    }
}

/// Similarity transform moving the centroid to the origin with mean distance
/// sqrt(2).
fn hartley(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = points.iter().map(|p| ((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]]
}

/// Projects onto rank 2 and fixes scale and sign: unit Frobenius norm, largest
/// magnitude entry positive.
fn canonical_rank2(f: Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    let min = s.imin();
    s[min] = 0.0;
    let f = u * Matrix3::from_diagonal(&s) * vt;
    let n = f.norm();
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    let f = f / n;
    let big = f.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    Some(if big < 0.0 { -f } else { f })
}

/// Normalized 8-point solve over all given correspondences (least squares
/// when more than eight).
pub fn eight_point(points_i: &[[f64; 2]], points_j: &[[f64; 2]]) -> Result<FundamentalMatrix, GeoError> {
    let n = points_i.len();
    if n < MIN_MATCHES || points_j.len() != n {
        return Err(GeoError::InsufficientMatches { found: n.min(points_j.len()), required: MIN_MATCHES });
    }
    let (ti, tj) = (hartley(points_i), hartley(points_j));
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let [x, y] = apply(&ti, points_i[k]);
        let [xp, yp] = apply(&tj, points_j[k]);
        let r = [xp * x, xp * y, xp, yp * x, yp * y, yp, x, y, 1.0];
        for (c, v) in r.iter().enumerate() {
            a[(k, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(GeoError::Degenerate)?;
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|x, y| y.1.total_cmp(&x.1));
    // a second (near) null direction means the sample does not pin down F
    if sv[7].1 <= 1e-10 * sv[0].1 {
        return Err(GeoError::Degenerate);
    }
    let null = vt.row(sv[8].0);
    let fn_ = Matrix3::new(null[0], null[1], null[2], null[3], null[4], null[5], null[6], null[7], null[8]);
    let f = tj.transpose() * fn_ * ti;
    canonical_rank2(f).map(FundamentalMatrix).ok_or(GeoError::Degenerate)
}

fn score(f: &FundamentalMatrix, matches: &MatchSet, threshold: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = matches
        .points_i
        .iter()
        .zip(&matches.points_j)
        .map(|(&a, &b)| f.sampson_distance(a, b) < threshold)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    (mask, count)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w8 = inlier_ratio.powi(MIN_MATCHES as i32);
    if w8 <= 0.0 {
        return cap;
    }
    if w8 >= 1.0 {
        return 1;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - w8).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Hypothesize-and-verify estimation of `F` from eight-match samples, with an
/// adaptive iteration budget and a least-squares refit on the best consensus
/// set. Deterministic for a given `seed`.
pub fn estimate_fundamental_ransac(
    matches: &MatchSet,
    config: &RansacConfig,
    seed: u64,
) -> Result<RansacOutcome, GeoError> {
    let n = matches.len();
    let required = config.min_matches.max(MIN_MATCHES);
    if n < required {
        return Err(GeoError::InsufficientMatches { found: n, required });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(FundamentalMatrix, Vec<bool>, usize)> = None;
    let mut budget = config.max_iterations;
    let mut iterations = 0;
    let mut degenerate = 0;
    let mut si = [[0.0; 2]; MIN_MATCHES];
    let mut sj = [[0.0; 2]; MIN_MATCHES];
    while iterations < budget {
        iterations += 1;
        let idx = sample(&mut rng, n, MIN_MATCHES);
        for (slot, k) in idx.iter().enumerate() {
            si[slot] = matches.points_i[k];
            sj[slot] = matches.points_j[k];
        }
        let f = match eight_point(&si, &sj) {
            Ok(f) => f,
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        let (mask, count) = score(&f, matches, config.inlier_threshold_px);
        if best.as_ref().is_none_or(|b| count > b.2) {
            budget = required_iterations(count as f64 / n as f64, config.confidence, config.max_iterations);
            best = Some((f, mask, count));
        }
    }
    let (mut f, mut mask, mut count) = best.ok_or(GeoError::Degenerate)?;
    if count >= MIN_MATCHES {
        let inl = matches.subset(&mask);
        if let Ok(refit) = eight_point(&inl.points_i, &inl.points_j) {
            let (m2, c2) = score(&refit, matches, config.inlier_threshold_px);
            if c2 >= count {
                f = refit;
                mask = m2;
                count = c2;
            }
        }
    }
    Ok(RansacOutcome { fundamental: f, inliers: mask, inlier_count: count, iterations, degenerate_samples: degenerate })
}
