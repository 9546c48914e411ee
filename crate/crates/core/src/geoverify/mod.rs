//! Geometric verification of loop candidates.
//!
//! A candidate pair is matched with mutual nearest neighbors, a fundamental
//! matrix is fitted with RANSAC and the pair is accepted when the inlier ratio
//! reaches [`RansacConfig::acceptance_ratio`]. Accepted pairs carry the
//! relative pose up to scale recovered from the essential matrix.

mod fundamental;
mod matching;
mod pose;

pub use fundamental::{eight_point, estimate_fundamental_ransac, FundamentalMatrix, RansacConfig, RansacOutcome, MIN_MATCHES};
pub use matching::{mutual_match, mutual_nearest, MatchSet};
pub use pose::{
    decompose_essential, essential_from_fundamental, polish_pose, project_essential, refine_pose, triangulate,
    EssentialMatrix, RelativePoseUpToScale,
};

use thiserror::Error;

use crate::keyframe::{CameraIntrinsics, Keyframe};
use crate::vlad::Metric;

/// Reclassify-and-refine rounds applied to the decomposed pose.
pub const POSE_POLISH_ROUNDS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("descriptor dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("insufficient matches: {found} < {required}")]
    InsufficientMatches { found: usize, required: usize },
    #[error("degenerate configuration, no model could be fitted")]
    Degenerate,
    #[error("ambiguous pose: best candidate has {best} of {total} points in front")]
    AmbiguousPose { best: usize, total: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RejectReason {
    InsufficientMatches { found: usize },
    LowInlierRatio { ratio: f64 },
    NoModel,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::InsufficientMatches { .. } => "insufficient matches",
            RejectReason::LowInlierRatio { .. } => "low inlier ratio",
            RejectReason::NoModel => "no model",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifiedLoop {
    pub matches: usize,
    pub inliers: usize,
    pub inlier_ratio: f64,
    /// Absent when the views have (near) zero parallax.
    pub fundamental: Option<FundamentalMatrix>,
    /// Absent for zero parallax or when no decomposition wins a majority.
    pub pose: Option<RelativePoseUpToScale>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Accepted(VerifiedLoop),
    Rejected(RejectReason),
}

impl Verdict {
    pub fn accepted(&self) -> Option<&VerifiedLoop> {
        match self {
            Verdict::Accepted(v) => Some(v),
            Verdict::Rejected(_) => None,
        }
    }
}

/// Order-independent RNG seed for one pair.
pub fn pair_seed(seed: u64, seq_i: &str, id_i: u32, seq_j: &str, id_j: u32) -> u64 {
    const PRIME: u64 = 0x100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    };
    eat(&seed.to_le_bytes());
    eat(seq_i.as_bytes());
    eat(&id_i.to_le_bytes());
    eat(seq_j.as_bytes());
    eat(&id_j.to_le_bytes());
    // splitmix64 finalizer
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Verifies a pair from already computed matches.
pub fn verify_matches(
    matches: &MatchSet,
    config: &RansacConfig,
    intrinsics: &CameraIntrinsics,
    seed: u64,
) -> Result<Verdict, GeoError> {
    let n = matches.len();
    if n < config.min_matches.max(MIN_MATCHES) {
        return Ok(Verdict::Rejected(RejectReason::InsufficientMatches { found: n }));
    }
    // zero parallax: the epipolar geometry is undefined, but the views agree
    let still = matches
        .points_i
        .iter()
        .zip(&matches.points_j)
        .filter(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() < config.inlier_threshold_px)
        .count();
    let still_ratio = still as f64 / n as f64;
    if still_ratio >= config.acceptance_ratio {
        return Ok(Verdict::Accepted(VerifiedLoop {
            matches: n,
            inliers: still,
            inlier_ratio: still_ratio,
            fundamental: None,
            pose: None,
        }));
    }
    let outcome = match estimate_fundamental_ransac(matches, config, seed) {
        Ok(o) => o,
        Err(GeoError::Degenerate) => return Ok(Verdict::Rejected(RejectReason::NoModel)),
        Err(GeoError::InsufficientMatches { found, .. }) => {
            return Ok(Verdict::Rejected(RejectReason::InsufficientMatches { found }))
        }
        Err(e) => return Err(e),
    };
    let ratio = outcome.inlier_ratio();
    if ratio < config.acceptance_ratio {
        return Ok(Verdict::Rejected(RejectReason::LowInlierRatio { ratio }));
    }
    let e = essential_from_fundamental(&outcome.fundamental, intrinsics);
    let pose = decompose_essential(&e, &matches.subset(&outcome.inliers), intrinsics).ok().map(|p| {
        let p = RelativePoseUpToScale { inlier_ratio: ratio, ..p };
        polish_pose(&p, matches, &outcome.inliers, intrinsics, config.inlier_threshold_px, POSE_POLISH_ROUNDS)
    });
    Ok(Verdict::Accepted(VerifiedLoop {
        matches: n,
        inliers: outcome.inlier_count,
        inlier_ratio: ratio,
        fundamental: Some(outcome.fundamental),
        pose,
    }))
}

/// Matches two keyframes and verifies them. The RANSAC seed is derived from
/// `config.seed` and the pair identity.
pub fn verify_pair(
    frame_i: &Keyframe,
    frame_j: &Keyframe,
    config: &RansacConfig,
    intrinsics: &CameraIntrinsics,
    metric: Metric,
) -> Result<Verdict, GeoError> {
    let matches = mutual_match(&frame_i.keypoints, &frame_i.descriptors, &frame_j.keypoints, &frame_j.descriptors, metric)?;
    let seed = pair_seed(config.seed, &frame_i.sequence, frame_i.id, &frame_j.sequence, frame_j.id);
    verify_matches(&matches, config, intrinsics, seed)
}
