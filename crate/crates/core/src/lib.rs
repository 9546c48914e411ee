//! Graph-consensus visual loop-closure detection.
//!
//! The pipeline runs in stages:
//!
//! 1. [`keyframe`]: posed keyframes carrying keypoints and local descriptors.
//! 2. [`vlad`]: vocabulary fitting and hard-assignment VLAD aggregation.
//! 3. [`retrieval`]: dense cosine search and maximum-similarity cliques.
//! 4. [`gnn`]: NetVLAD node encoding, graph attention, edge scoring and training.
//! 5. [`geoverify`]: mutual matching, RANSAC fundamental matrix, relative pose.
//! 6. [`metrics`]: AP / max-recall and relative pose errors.
//!
//! [`synth`] generates seeded synthetic worlds in the on-disk bundle format and
//! [`pipeline`] chains the stages for the `lcd` command line tool.
//!
//! Data-parallel loops (VLAD extraction, retrieval, clique inference,
//! verification) run on rayon when the `parallel` feature is enabled and fall
//! back to plain iterators otherwise; see [`par`].

pub mod geoverify;
pub mod gnn;
pub mod keyframe;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod vlad;

mod binio;

pub use keyframe::{CameraIntrinsics, DescriptorMatrix, Keyframe, KeypointSet, Pose, SequenceDataset};
pub use retrieval::{CliqueGraph, DescriptorIndex, KeyframeKey};
pub use vlad::{Metric, VladDescriptor, Vocabulary};
