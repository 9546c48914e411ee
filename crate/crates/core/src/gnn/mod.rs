//! Learned clique scoring.
//!
//! Each clique node is encoded with NetVLAD over its local descriptors and
//! projected to the hidden width. Graph attention layers then exchange
//! information across the clique, and a symmetric two-layer classifier
//! scores every edge. With zero layers each pair is scored from its two
//! endpoints alone.
//!
//! Gradients are derived by hand for this fixed architecture; everything is
//! generic over [`Real`] so training runs in `f32` and gradient checks in
//! `f64`.

mod model;
mod params;
mod train;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    attention_weights, bce_loss, encode_node, gat_layer_forward, kink_pattern, loss_and_gradient, model_forward, netvlad_forward,
    score_from_encodings, Mode, NodeEncoding, PROB_CLAMP,
};
pub use params::{DropoutMode, EdgeMlp, GatHead, GatLayerParams, Hyper, Linear, ModelParams, NetVladParams};
pub use train::{
    gradient_check, query_edge_scores, relative_error, train, validate, Adam, EarlyStopping, GradCheckReport, LogRow,
    TrainConfig, TrainLog, TrainOutcome,
};

use crate::keyframe::{DescriptorMatrix, Pose};
use crate::metrics::LabelThresholds;
use crate::par::{self, Exec};
use crate::retrieval::{CliqueGraph, Corpus, KeyframeKey};

/// Floating point type the model runs in.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::NumAssign
        + num_traits::FromPrimitive
        + Sum
        + Default
        + Debug
        + Send
        + Sync
        + 'static
{
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("edge ({a}, {b}) outside a graph of {nodes} nodes")]
    InvalidEdge { a: usize, b: usize, nodes: usize },
    #[error("non-finite value")]
    NonFinite,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("training set contains no positive labels")]
    NoPositives,
    #[error("no keyframe for {0:?}")]
    MissingNode(KeyframeKey),
    #[error("empty score list")]
    EmptyScores,
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("{0}")]
    Io(String),
}

/// Ground-truth label of one clique edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeLabel {
    pub edge: (usize, usize),
    pub label: bool,
    pub distance_m: f64,
    pub angle_deg: f64,
}

/// Labels every clique edge from ground-truth poses.
pub fn label_edges<'a>(
    clique: &CliqueGraph,
    pose_of: impl Fn(KeyframeKey) -> Option<&'a Pose>,
    thresholds: &LabelThresholds,
) -> Result<Vec<EdgeLabel>, GnnError> {
    let poses = clique
        .nodes
        .iter()
        .map(|&k| pose_of(k).ok_or(GnnError::MissingNode(k)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(clique
        .edges
        .iter()
        .map(|&(a, b)| {
            let (distance_m, angle_deg) = LabelThresholds::measure(poses[a], poses[b]);
            EdgeLabel { edge: (a, b), label: thresholds.is_loop(distance_m, angle_deg), distance_m, angle_deg }
        })
        .collect())
}

/// A clique resolved against a corpus, with edge labels.
#[derive(Clone, Debug)]
pub struct TrainClique<'a> {
    pub keys: Vec<KeyframeKey>,
    pub descriptors: Vec<&'a DescriptorMatrix>,
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
    pub query_edge: Vec<bool>,
}

impl<'a> TrainClique<'a> {
    pub fn from_clique(clique: &CliqueGraph, corpus: &'a Corpus, thresholds: &LabelThresholds) -> Result<Self, GnnError> {
        let descriptors = clique
            .nodes
            .iter()
            .map(|&k| corpus.get(k).map(|kf| &kf.descriptors).ok_or(GnnError::MissingNode(k)))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = label_edges(clique, |k| corpus.get(k).map(|kf| &kf.pose), thresholds)?;
        Ok(TrainClique {
            keys: clique.nodes.clone(),
            descriptors,
            edges: clique.edges.clone(),
            labels: labels.iter().map(|l| l.label).collect(),
            query_edge: clique.query_edge.clone(),
        })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }
}

/// Score of one unordered keyframe pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub a: KeyframeKey,
    pub b: KeyframeKey,
    pub score: f64,
}

/// Projected node features for every keyframe of a corpus.
pub fn encode_corpus<T: Real>(
    params: &ModelParams<T>,
    corpus: &Corpus,
    exec: Exec,
) -> Result<BTreeMap<KeyframeKey, NodeEncoding<T>>, GnnError> {
    let keys: Vec<KeyframeKey> = corpus.keys().collect();
    let enc = par::map(exec, &keys, |&k| encode_node(params, &corpus.get(k).unwrap().descriptors));
    keys.into_iter().zip(enc).map(|(k, e)| e.map(|e| (k, e))).collect()
}

/// Scores the query edges of a clique. All edges take part in message
/// passing; only the `n - 1` query edges are returned.
pub fn predict_query_edges<T: Real>(
    params: &ModelParams<T>,
    clique: &CliqueGraph,
    encodings: &BTreeMap<KeyframeKey, NodeEncoding<T>>,
) -> Result<Vec<ScoredEdge>, GnnError> {
    let nodes = clique
        .nodes
        .iter()
        .map(|k| encodings.get(k).ok_or(GnnError::MissingNode(*k)))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = score_from_encodings(params, &nodes, &clique.edges, Mode::Inference)?;
    Ok(clique
        .edges
        .iter()
        .zip(&clique.query_edge)
        .zip(scores)
        .filter(|((_, &q), _)| q)
        .map(|((&(a, b), _), s)| ScoredEdge { a: clique.nodes[a], b: clique.nodes[b], score: s.to_f64().unwrap() })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Selection {
    /// Keep the `ceil(value * count)` best pairs.
    TopFraction(f64),
    /// Keep pairs scoring strictly above the value.
    Threshold(f64),
}

impl Default for Selection {
    fn default() -> Self {
        Selection::TopFraction(0.005)
    }
}

/// Highest score per unordered pair, ordered by descending score then key.
pub fn dedup_edges(scored: &[ScoredEdge]) -> Vec<ScoredEdge> {
    let mut best: BTreeMap<(KeyframeKey, KeyframeKey), f64> = BTreeMap::new();
    for e in scored {
        let key = if e.a <= e.b { (e.a, e.b) } else { (e.b, e.a) };
        let s = best.entry(key).or_insert(e.score);
        if e.score > *s {
            *s = e.score;
        }
    }
    let mut out: Vec<ScoredEdge> = best.into_iter().map(|((a, b), score)| ScoredEdge { a, b, score }).collect();
    out.sort_by(|x, y| y.score.total_cmp(&x.score).then((x.a, x.b).cmp(&(y.a, y.b))));
    out
}

/// Candidate pairs for geometric verification.
pub fn select_candidates(scored: &[ScoredEdge], selection: Selection) -> Result<Vec<ScoredEdge>, GnnError> {
    if scored.is_empty() {
        return Err(GnnError::EmptyScores);
    }
    let ranked = dedup_edges(scored);
    match selection {
        Selection::TopFraction(v) => {
            if !(v > 0.0 && v <= 1.0) {
                return Err(GnnError::InvalidConfig(format!("top fraction {v} outside (0, 1]")));
            }
            let keep = ((v * ranked.len() as f64).ceil() as usize).min(ranked.len());
            Ok(ranked[..keep].to_vec())
        }
        Selection::Threshold(v) => {
            if !(0.0..=1.0).contains(&v) {
                return Err(GnnError::InvalidConfig(format!("threshold {v} outside [0, 1]")));
            }
            Ok(ranked.into_iter().filter(|e| e.score > v).collect())
        }
    }
}
