//! Precision/recall metrics (AP, max recall at full precision) and relative
//! pose errors.
//!
//! Scores are ranked in descending order. Items with equal scores are ordered
//! by their position in the input (callers sort by pair key first) and form a
//! single operating point: a threshold either admits all of them or none.
//! Average precision is the step integral `sum (R_t - R_{t-1}) * P_t` over
//! distinct thresholds, which equals the classic mean of precision at each
//! positive's rank when scores are distinct.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyframe::{relative_pose, Pose};
use crate::retrieval::KeyframeKey;

pub const DEFAULT_DISTANCE_THRESHOLD_M: f64 = 4.0;
pub const DEFAULT_ANGLE_THRESHOLD_DEG: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: no positive labels")]
    NoPositives,
    #[error("metric undefined: zero-length translation")]
    ZeroTranslation,
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score")]
    NonFiniteScore,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<usize, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(positives)
}

/// Groups of tied scores in descending order: `(threshold, positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                if labels[i] {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((scores[i], labels[i] as usize, (!labels[i]) as usize)),
        }
    }
    groups
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let positives = check(scores, labels)?;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, pos, neg) in tie_groups(scores, labels) {
        tp += pos;
        seen += pos + neg;
        ap += pos as f64 / positives as f64 * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

/// Highest recall reachable by a threshold that admits no false positive.
pub fn max_recall_full_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let positives = check(scores, labels)?;
    let mut tp = 0usize;
    for (_, pos, neg) in tie_groups(scores, labels) {
        if neg > 0 {
            break;
        }
        tp += pos;
    }
    Ok(tp as f64 / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<PrPoint>,
    pub positives: usize,
    pub total: usize,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "threshold,precision,recall" => {}
            _ => return Err("missing header `threshold,precision,recall`".into()),
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("row {}: {e}", i + 2))?;
            if f.len() != 3 {
                return Err(format!("row {}: expected 3 fields", i + 2));
            }
            points.push(PrPoint { threshold: f[0], precision: f[1], recall: f[2] });
        }
        Ok(PrCurve { points, positives: 0, total: 0 })
    }
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve, MetricError> {
    let positives = check(scores, labels)?;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut points = Vec::new();
    for (threshold, pos, neg) in tie_groups(scores, labels) {
        tp += pos;
        seen += pos + neg;
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / seen as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(PrCurve { points, positives, total: scores.len() })
}

/// Geodesic distance between two rotations, in degrees.
pub fn rpe(r_gt: &Matrix3<f64>, r_pred: &Matrix3<f64>) -> f64 {
    let c = (((r_gt.transpose() * r_pred).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Distance between unit-normalized translation directions, in `[0, 2]`.
pub fn ate_up_to_scale(t_gt: &Vector3<f64>, t_pred: &Vector3<f64>) -> Result<f64, MetricError> {
    let (a, b) = (t_gt.norm(), t_pred.norm());
    if !(a > 0.0 && b > 0.0) {
        return Err(MetricError::ZeroTranslation);
    }
    Ok((t_gt / a - t_pred / b).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    pub distance_m: f64,
    pub angle_deg: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds { distance_m: DEFAULT_DISTANCE_THRESHOLD_M, angle_deg: DEFAULT_ANGLE_THRESHOLD_DEG }
    }
}

impl LabelThresholds {
    /// Relative distance (m) and rotation angle (deg) between two poses.
    pub fn measure(a: &Pose, b: &Pose) -> (f64, f64) {
        let rel = relative_pose(a, b);
        (rel.position.norm(), rpe(&Matrix3::identity(), &rel.rotation_matrix()))
    }

    /// A pair is a loop iff both distance and angle are strictly below the
    /// thresholds.
    pub fn is_loop(&self, distance_m: f64, angle_deg: f64) -> bool {
        distance_m < self.distance_m && angle_deg < self.angle_deg
    }

    pub fn is_loop_pair(&self, a: &Pose, b: &Pose) -> bool {
        let (d, ang) = Self::measure(a, b);
        self.is_loop(d, ang)
    }
}

/// Relative pose predicted for a pair `(a, b)`: maps points from camera `a`
/// into camera `b`, `X_b = R X_a + t`, with `t` known up to scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictedPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub a: KeyframeKey,
    pub b: KeyframeKey,
    pub score: f64,
    pub pose: Option<PredictedPose>,
}

/// Metrics for one sequence. Undefined values are `None` with a note.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub sequence: String,
    pub ap: Option<f64>,
    pub mr: Option<f64>,
    pub rpe_deg: Option<f64>,
    pub ate: Option<f64>,
    pub pairs: usize,
    pub positives: usize,
    pub posed_positives: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub ap: Option<f64>,
    pub mr: Option<f64>,
    pub rpe_deg: Option<f64>,
    pub ate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub stage: String,
    pub wall_ms: f64,
    pub items: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceReport>,
    pub average: AveragedMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runtime: Vec<RuntimeStats>,
}

impl EvalReport {
    /// Averages each metric over the sequences where it is defined.
    pub fn from_sequences(sequences: Vec<SequenceReport>) -> Self {
        let mean = |f: &dyn Fn(&SequenceReport) -> Option<f64>| {
            let vals: Vec<f64> = sequences.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let average = AveragedMetrics {
            ap: mean(&|s| s.ap),
            mr: mean(&|s| s.mr),
            rpe_deg: mean(&|s| s.rpe_deg),
            ate: mean(&|s| s.ate),
        };
        EvalReport { sequences, average, runtime: Vec::new() }
    }
}

/// Collapses pairs to unordered keys, keeping the highest score (and its
/// pose) per pair. Output is sorted by pair key.
pub fn dedup_pairs(predictions: &[ScoredPair]) -> Vec<ScoredPair> {
    let mut best: BTreeMap<(KeyframeKey, KeyframeKey), ScoredPair> = BTreeMap::new();
    for p in predictions {
        let key = if p.a <= p.b { (p.a, p.b) } else { (p.b, p.a) };
        match best.get(&key) {
            Some(prev) if prev.score >= p.score => {}
            _ => {
                best.insert(key, p.clone());
            }
        }
    }
    best.into_values().collect()
}

/// Scores every retrieved pair of one sequence against ground-truth poses.
pub fn evaluate_sequence<'a>(
    sequence: &str,
    predictions: &[ScoredPair],
    ground_truth: impl Fn(KeyframeKey) -> Option<&'a Pose>,
    thresholds: &LabelThresholds,
) -> (SequenceReport, Option<PrCurve>) {
    let pairs = dedup_pairs(predictions);
    let mut report = SequenceReport { sequence: sequence.to_string(), ..Default::default() };
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    let (mut rpes, mut ates) = (Vec::new(), Vec::new());
    for p in &pairs {
        let (Some(pa), Some(pb)) = (ground_truth(p.a), ground_truth(p.b)) else {
            report.notes.push(format!("missing ground truth for pair {:?}-{:?}", p.a, p.b));
            continue;
        };
        let label = thresholds.is_loop_pair(pa, pb);
        scores.push(p.score);
        labels.push(label);
        if let (true, Some(pred)) = (label, p.pose) {
            let gt = relative_pose(pb, pa);
            rpes.push(rpe(&gt.rotation_matrix(), &pred.rotation));
            if let Ok(e) = ate_up_to_scale(&gt.position, &pred.translation) {
                ates.push(e);
            }
        }
    }
    report.pairs = scores.len();
    report.positives = labels.iter().filter(|&&l| l).count();
    report.posed_positives = rpes.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    report.rpe_deg = mean(&rpes);
    report.ate = mean(&ates);
    match (average_precision(&scores, &labels), max_recall_full_precision(&scores, &labels)) {
        (Ok(ap), Ok(mr)) => {
            report.ap = Some(ap);
            report.mr = Some(mr);
            (report, pr_curve(&scores, &labels).ok())
        }
        (Err(e), _) | (_, Err(e)) => {
            report.notes.push(e.to_string());
            (report, None)
        }
    }
}
