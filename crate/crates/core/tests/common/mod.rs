#![allow(dead_code)]

use lcd_core::keyframe::{CameraIntrinsics, DescriptorMatrix, Keyframe, KeypointSet, Pose};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;

pub fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
}

/// Two views of a random scene. `X_j = R X_i + t` with `|t| = 1`.
pub struct PlantedPair {
    pub frame_i: Keyframe,
    pub frame_j: Keyframe,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub inliers: usize,
}

fn project(k: &CameraIntrinsics, x: &Vector3<f64>) -> [f64; 2] {
    [k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy]
}

fn inside(p: [f64; 2]) -> bool {
    p[0] >= 1.0 && p[0] < WIDTH as f64 - 1.0 && p[1] >= 1.0 && p[1] < HEIGHT as f64 - 1.0
}

/// `n` correspondences, of which `outlier_fraction` pair unrelated pixels.
/// Every correspondence carries a distinct random descriptor, so mutual
/// matching recovers exactly the planted pairs.
pub fn planted_pair(seed: u64, n: usize, outlier_fraction: f64, sigma: f64) -> PlantedPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rotation = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(3f64..12.0).to_radians()).into_inner();
    let translation =
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5)).normalize();
    planted_with(&mut rng, rotation, translation, n, outlier_fraction, sigma)
}

/// As [`planted_pair`] with a fixed relative pose; `translation` is normalized.
pub fn planted_pair_at(
    seed: u64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    n: usize,
    outlier_fraction: f64,
    sigma: f64,
) -> PlantedPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    planted_with(&mut rng, rotation, translation.normalize(), n, outlier_fraction, sigma)
}

fn planted_with(
    rng: &mut ChaCha8Rng,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    n: usize,
    outlier_fraction: f64,
    sigma: f64,
) -> PlantedPair {
    let k = intrinsics();
    let n_out = (outlier_fraction * n as f64).round() as usize;
    let inliers = n - n_out;
    let gauss = |rng: &mut ChaCha8Rng| sigma * rng.sample::<f64, _>(StandardNormal);
    let (mut pi, mut pj) = (Vec::new(), Vec::new());
    while pi.len() < inliers {
        let x = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-4.0..4.0), rng.random_range(5.0..15.0));
        let y = rotation * x + translation;
        if y.z < 1.0 {
            continue;
        }
        let (a, b) = (project(&k, &x), project(&k, &y));
        let a = [a[0] + gauss(rng), a[1] + gauss(rng)];
        let b = [b[0] + gauss(rng), b[1] + gauss(rng)];
        if inside(a) && inside(b) {
            pi.push(a);
            pj.push(b);
        }
    }
    for _ in 0..n_out {
        pi.push([rng.random_range(1.0..WIDTH as f64 - 1.0), rng.random_range(1.0..HEIGHT as f64 - 1.0)]);
        pj.push([rng.random_range(1.0..WIDTH as f64 - 1.0), rng.random_range(1.0..HEIGHT as f64 - 1.0)]);
    }
    let dim = 32;
    let descriptors: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).collect();
    let frame = |id: u32, pts: &[[f64; 2]]| {
        let coords = pts.iter().map(|p| [p[0] as f32, p[1] as f32]).collect();
        Keyframe::new(
            id,
            "planted",
            Pose::identity(),
            KeypointSet::new(coords, WIDTH, HEIGHT).unwrap(),
            DescriptorMatrix::from_rows(&descriptors).unwrap(),
        )
        .unwrap()
    };
    PlantedPair { frame_i: frame(0, &pi), frame_j: frame(1, &pj), rotation, translation, inliers }
}

pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn direction_error_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}
