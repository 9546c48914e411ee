//! Seeded synthetic worlds for end-to-end runs without real data.
//!
//! A world is a closed track (figure-8 or plain loop) lined with 3D
//! landmarks. Landmarks are grouped into places along the track; each carries
//! a descriptor drawn around one of a small set of visual words. A fraction
//! of places are aliased: they reuse most descriptors of a distant place
//! while keeping their own geometry, so they look alike but fail epipolar
//! verification.
//!
//! A sequence drives a forward-looking pinhole camera along the track for a
//! number of laps. Every keyframe observes the landmarks in its frustum (with
//! per-lap appearance change and per-frame noise) plus random clutter.
//! Sequences generated from the same `seed` share the world; `run` and
//! `start_fraction` vary the trajectory.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyframe::{
    sample_keyframes, CameraIntrinsics, DescriptorMatrix, Keyframe, KeyframeError, KeypointSet, Pose, SequenceDataset,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Keyframe(#[from] KeyframeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackShape {
    #[default]
    Figure8,
    Loop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldSpec {
    pub name: String,
    /// World seed: track, landmarks, descriptors and aliasing.
    pub seed: u64,
    /// Trajectory variant within the world.
    pub run: u64,
    pub shape: TrackShape,
    pub loop_length_m: f64,
    pub laps: f64,
    /// Starting point as a fraction of the loop.
    pub start_fraction: f64,
    pub keyframe_spacing_m: f64,
    /// Truncates the sequence after this many keyframes.
    pub max_keyframes: Option<usize>,
    pub desc_dim: usize,
    pub n_words: usize,
    /// Spread of landmark descriptors around their word.
    pub word_spread: f64,
    /// Appearance change of a landmark between laps.
    pub revisit_noise: f64,
    /// Per-observation descriptor noise.
    pub frame_noise: f64,
    /// Strength of the descriptor change with viewing azimuth; a landmark
    /// seen from directions 180 degrees apart differs by twice this amount.
    pub viewpoint_sensitivity: f64,
    /// Fraction of keypoints that are clutter: word-like descriptors at
    /// random positions that are never observed again.
    pub distractor_level: f64,
    /// Fraction of places whose appearance copies another place.
    pub aliasing_fraction: f64,
    /// Fraction of an aliased place's landmarks that are copied.
    pub alias_share: f64,
    pub place_length_m: f64,
    pub landmarks_per_m: f64,
    pub view_range_m: f64,
    pub max_keypoints: usize,
    /// Amplitude of the slow sideways weave of the camera path.
    pub lateral_jitter_m: f64,
    pub heading_jitter_deg: f64,
    pub pixel_noise: f64,
    pub width: u32,
    pub height: u32,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            name: "synth".into(),
            seed: 0,
            run: 0,
            shape: TrackShape::Figure8,
            loop_length_m: 220.0,
            laps: 1.14,
            start_fraction: 0.0,
            keyframe_spacing_m: 0.5,
            max_keyframes: None,
            desc_dim: 32,
            n_words: 16,
            word_spread: 0.6,
            revisit_noise: 0.25,
            frame_noise: 0.08,
            viewpoint_sensitivity: 0.0,
            distractor_level: 0.3,
            aliasing_fraction: 0.2,
            alias_share: 0.8,
            place_length_m: 4.0,
            landmarks_per_m: 8.0,
            view_range_m: 25.0,
            max_keypoints: 160,
            lateral_jitter_m: 0.6,
            heading_jitter_deg: 4.0,
            pixel_noise: 0.5,
            width: 640,
            height: 480,
            intrinsics: CameraIntrinsics { fx: 320.0, fy: 320.0, cx: 320.0, cy: 240.0 },
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if !(self.loop_length_m > 10.0 && self.laps > 0.0 && self.keyframe_spacing_m > 0.0) {
            return bad("track length, laps and spacing must be positive (loop at least 10 m)");
        }
        if self.desc_dim == 0 || self.n_words == 0 || self.max_keypoints < 8 {
            return bad("descriptor dimension, word count and keypoint budget must be positive");
        }
        for (name, v) in [
            ("distractor_level", self.distractor_level),
            ("aliasing_fraction", self.aliasing_fraction),
            ("alias_share", self.alias_share),
            ("start_fraction", self.start_fraction),
        ] {
            if !(0.0..1.0).contains(&v) && !(name == "alias_share" && v == 1.0) {
                return Err(SynthError::InvalidSpec(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.place_length_m > 0.0 && self.landmarks_per_m > 0.0 && self.view_range_m > 1.0) {
            return bad("place length, landmark density and view range must be positive");
        }
        if [self.word_spread, self.revisit_noise, self.frame_noise, self.viewpoint_sensitivity, self.pixel_noise, self.lateral_jitter_m, self.heading_jitter_deg]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("noise levels must be non-negative");
        }
        self.intrinsics.validate()?;
        Ok(())
    }
}

/// Arc-length parameterized closed track in the ground plane.
struct Track {
    points: Vec<Vector3<f64>>,
    cumulative: Vec<f64>,
    length: f64,
}

impl Track {
    fn new(shape: TrackShape, length: f64) -> Self {
        let n = 4000;
        let raw: Vec<Vector3<f64>> = (0..=n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                match shape {
                    TrackShape::Figure8 => Vector3::new(t.sin(), t.sin() * t.cos(), 0.0),
                    TrackShape::Loop => Vector3::new(t.cos(), 0.6 * t.sin(), 0.0),
                }
            })
            .collect();
        let mut cumulative = vec![0.0];
        for w in raw.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        let scale = length / cumulative[n];
        Track {
            points: raw.iter().map(|p| p * scale).collect(),
            cumulative: cumulative.iter().map(|c| c * scale).collect(),
            length,
        }
    }

    /// Position and unit tangent at arc length `s` (wrapped).
    fn at(&self, s: f64) -> (Vector3<f64>, Vector3<f64>) {
        let s = s.rem_euclid(self.length);
        let i = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.points.len() - 1);
        let (a, b) = (self.points[i - 1], self.points[i]);
        let seg = self.cumulative[i] - self.cumulative[i - 1];
        let f = if seg > 0.0 { (s - self.cumulative[i - 1]) / seg } else { 0.0 };
        (a + (b - a) * f, (b - a).normalize())
    }
}

struct Landmark {
    position: Vector3<f64>,
    descriptor: Vec<f64>,
    /// Identity used to seed appearance noise; shared by copies.
    id: u64,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 { v.into_iter().map(|x| x / n).collect() } else { v }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ c.wrapping_mul(0xd6e8_feb8_6659_fd93);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn build_world(spec: &SyntheticWorldSpec, track: &Track) -> (Vec<Vec<f64>>, Vec<Landmark>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1, 0));
    let d = spec.desc_dim;
    let words: Vec<Vec<f64>> = (0..spec.n_words).map(|_| unit(gaussian(&mut rng, d))).collect();
    let places = (track.length / spec.place_length_m).floor().max(1.0) as usize;
    let per_place = (spec.landmarks_per_m * spec.place_length_m).round().max(1.0) as usize;
    let mut landmarks = Vec::with_capacity(places * per_place);
    for p in 0..places {
        for _ in 0..per_place {
            let s = (p as f64 + rng.random::<f64>()) * spec.place_length_m;
            let (c, tangent) = track.at(s);
            let normal = Vector3::new(-tangent.y, tangent.x, 0.0);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let lateral = side * rng.random_range(3.0..10.0);
            let height = rng.random_range(-1.0..4.0);
            let w = rng.random_range(0..spec.n_words);
            let desc: Vec<f64> = words[w]
                .iter()
                .zip(gaussian(&mut rng, d))
                .map(|(c, g)| c + spec.word_spread * g / (d as f64).sqrt())
                .collect();
            landmarks.push(Landmark {
                position: c + normal * lateral + Vector3::new(0.0, 0.0, height),
                descriptor: unit(desc),
                id: landmarks.len() as u64,
            });
        }
    }
    // aliasing: copy appearance from a place at least three places away
    let n_alias = (spec.aliasing_fraction * places as f64).round() as usize;
    if places >= 7 && n_alias > 0 {
        let chosen = sample(&mut rng, places, n_alias.min(places));
        for p in chosen.iter() {
            let q = loop {
                let q = rng.random_range(0..places);
                let gap = (p as i64 - q as i64).rem_euclid(places as i64);
                if gap.min(places as i64 - gap) >= 3 {
                    break q;
                }
            };
            let copies = (spec.alias_share * per_place as f64).round() as usize;
            for i in 0..copies {
                let (dst, src) = (p * per_place + i, q * per_place + i);
                landmarks[dst].descriptor = landmarks[src].descriptor.clone();
                landmarks[dst].id = landmarks[src].id;
            }
        }
    }
    (words, landmarks)
}

/// Dense camera path: forward-looking camera (optical axis along travel,
/// image y pointing down) weaving slowly around the track centerline.
fn camera_path(spec: &SyntheticWorldSpec, track: &Track) -> Vec<(Pose, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 2, spec.run));
    let (phase_a, phase_b) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let start = spec.start_fraction * track.length;
    let total = spec.laps * track.length;
    let step = 0.01;
    let n = (total / step).ceil() as usize + 1;
    (0..n)
        .map(|i| {
            let along = (i as f64 * step).min(total);
            let s = start + along;
            let (c, tangent) = track.at(s);
            let normal = Vector3::new(-tangent.y, tangent.x, 0.0);
            let weave = spec.lateral_jitter_m * (std::f64::consts::TAU * s / 53.0 + phase_a).sin();
            let yaw = spec.heading_jitter_deg.to_radians() * (std::f64::consts::TAU * s / 31.0 + phase_b).sin();
            let forward = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw) * tangent;
            let down = Vector3::new(0.0, 0.0, -1.0);
            let right = down.cross(&forward);
            let r = Matrix3::from_columns(&[right, down, forward]);
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
            let lap = (along / track.length).floor() as usize;
            (Pose::from_parts(c + normal * weave + Vector3::new(0.0, 0.0, 1.5), q), lap)
        })
        .collect()
}

/// Generates one sequence. Identical specs give identical datasets.
pub fn generate(spec: &SyntheticWorldSpec) -> Result<SequenceDataset, SynthError> {
    spec.validate()?;
    let track = Track::new(spec.shape, spec.loop_length_m);
    let (words, landmarks) = build_world(spec, &track);
    let path = camera_path(spec, &track);
    let poses: Vec<Pose> = path.iter().map(|(p, _)| p.clone()).collect();
    let mut picks = sample_keyframes(&poses, spec.keyframe_spacing_m)?;
    if let Some(max) = spec.max_keyframes {
        picks.truncate(max);
    }
    let d = spec.desc_dim;
    let scale = 1.0 / (d as f64).sqrt();
    // per-landmark directions spanned by the viewing-azimuth term
    let view_basis: Vec<(Vec<f64>, Vec<f64>)> = landmarks
        .iter()
        .map(|lm| {
            let mut r = ChaCha8Rng::seed_from_u64(mix(spec.seed, 5, lm.id));
            (gaussian(&mut r, d), gaussian(&mut r, d))
        })
        .collect();
    let k = &spec.intrinsics;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut keyframes = Vec::with_capacity(picks.len());
    for (id, &pi) in picks.iter().enumerate() {
        let (pose, lap) = &path[pi];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 3, mix(spec.run, id as u64, 0)));
        let mut visible: Vec<(usize, [f64; 2], f64)> = Vec::new();
        for (li, lm) in landmarks.iter().enumerate() {
            let x = pose.inverse_transform_point(&lm.position);
            if x.z < 0.5 || x.norm() > spec.view_range_m {
                continue;
            }
            let u = k.fx * x.x / x.z + k.cx;
            let v = k.fy * x.y / x.z + k.cy;
            if u >= 0.0 && u < w && v >= 0.0 && v < h {
                visible.push((li, [u, v], x.norm()));
            }
        }
        let budget = ((1.0 - spec.distractor_level) * spec.max_keypoints as f64).round() as usize;
        if visible.len() > budget {
            let keep = sample(&mut rng, visible.len(), budget);
            let mut idx: Vec<usize> = keep.into_vec();
            idx.sort_unstable();
            visible = idx.into_iter().map(|i| visible[i]).collect();
        }
        let clutter = (visible.len() as f64 * spec.distractor_level / (1.0 - spec.distractor_level)).round() as usize;
        let mut coords = Vec::with_capacity(visible.len() + clutter);
        let mut rows = Vec::with_capacity((visible.len() + clutter) * d);
        let noise_px = |rng: &mut ChaCha8Rng| spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
        for (li, [u, v], _) in &visible {
            let lm = &landmarks[*li];
            let mut lap_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 4, mix(lm.id, spec.run, *lap as u64)));
            let lap_change = gaussian(&mut lap_rng, d);
            let frame = gaussian(&mut rng, d);
            let ray = lm.position - pose.position;
            let azimuth = ray.y.atan2(ray.x);
            let (cu, cv) = (spec.viewpoint_sensitivity * azimuth.cos(), spec.viewpoint_sensitivity * azimuth.sin());
            let (bu, bv) = &view_basis[*li];
            let desc = unit(
                lm.descriptor
                    .iter()
                    .zip(&lap_change)
                    .zip(&frame)
                    .zip(bu.iter().zip(bv))
                    .map(|(((x, a), b), (p, q))| {
                        x + scale * (spec.revisit_noise * a + spec.frame_noise * b + cu * p + cv * q)
                    })
                    .collect(),
            );
            let pu = (u + noise_px(&mut rng)).clamp(0.0, w - 1e-3);
            let pv = (v + noise_px(&mut rng)).clamp(0.0, h - 1e-3);
            coords.push([pu as f32, pv as f32]);
            rows.extend(desc.iter().map(|&x| x as f32));
        }
        for _ in 0..clutter {
            coords.push([rng.random_range(0.0..w) as f32, rng.random_range(0.0..h) as f32]);
            let w = &words[rng.random_range(0..words.len())];
            let g = gaussian(&mut rng, d);
            let desc = unit(w.iter().zip(&g).map(|(c, g)| c + spec.word_spread * g / (d as f64).sqrt()).collect());
            rows.extend(desc.iter().map(|&x| x as f32));
        }
        let n = coords.len();
        let keypoints = KeypointSet::new(coords, spec.width, spec.height)?;
        let descriptors = DescriptorMatrix::new(n, d, rows)?;
        keyframes.push(Keyframe::new(id as u32, spec.name.clone(), pose.clone(), keypoints, descriptors)?);
    }
    let dataset = SequenceDataset {
        name: spec.name.clone(),
        intrinsics: spec.intrinsics,
        width: spec.width,
        height: spec.height,
        keyframes,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Ground-truth loop pairs `(i, j)`, `i < j`, of one sequence.
pub fn ground_truth_pairs(dataset: &SequenceDataset, thresholds: &crate::metrics::LabelThresholds, min_gap: u32) -> Vec<(u32, u32)> {
    let kfs = &dataset.keyframes;
    let mut out = Vec::new();
    for (a, ka) in kfs.iter().enumerate() {
        for kb in &kfs[a + 1..] {
            if kb.id - ka.id > min_gap && thresholds.is_loop_pair(&ka.pose, &kb.pose) {
                out.push((ka.id, kb.id));
            }
        }
    }
    out
}
