//! Essential matrix recovery and relative pose decomposition.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};

use super::{FundamentalMatrix, GeoError, MatchSet};
use crate::keyframe::CameraIntrinsics;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Relative motion `X_j = R X_i + t` with `|t| = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePoseUpToScale {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub inlier_ratio: f64,
}

impl RelativePoseUpToScale {
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }
}

/// `E = K^T F K`, projected so its singular values become `(s, s, 0)`.
pub fn essential_from_fundamental(f: &FundamentalMatrix, intrinsics: &CameraIntrinsics) -> EssentialMatrix {
    let k = intrinsics.matrix();
    EssentialMatrix(project_essential(&(k.transpose() * f.0 * k)))
}

pub fn project_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let order = sorted_desc(&s);
    let mean = 0.5 * (s[order[0]] + s[order[1]]);
    s[order[0]] = mean;
    s[order[1]] = mean;
    s[order[2]] = 0.0;
    u * Matrix3::from_diagonal(&s) * vt
}

fn sorted_desc(s: &Vector3<f64>) -> [usize; 3] {
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    idx
}

/// Linear triangulation of one correspondence in normalized coordinates for
/// cameras `[I | 0]` and `[R | t]`. Returns the point in the first camera
/// frame, or `None` when it lies at infinity.
pub fn triangulate(a: [f64; 2], b: [f64; 2], r: &Matrix3<f64>, t: &Vector3<f64>) -> Option<Vector3<f64>> {
    let p2 = |row: usize| [r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]];
    let p1 = |row: usize| {
        let mut v = [0.0; 4];
        v[row] = 1.0;
        v
    };
    let mut m = Matrix4::zeros();
    let rows = [
        (a[0], p1(2), p1(0)),
        (a[1], p1(2), p1(1)),
        (b[0], p2(2), p2(0)),
        (b[1], p2(2), p2(1)),
    ];
    for (k, (c, p_z, p_x)) in rows.iter().enumerate() {
        for col in 0..4 {
            m[(k, col)] = c * p_z[col] - p_x[col];
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let min = svd.singular_values.imin();
    let x = vt.row(min);
    if x[3].abs() < 1e-12 * x.norm() {
        return None;
    }
    Some(Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

fn normalized(k_inv: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = k_inv * Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Four-candidate decomposition; the candidate placing the most triangulated
/// inliers in front of both cameras wins, provided that is a strict majority.
pub fn decompose_essential(
    e: &EssentialMatrix,
    inliers: &MatchSet,
    intrinsics: &CameraIntrinsics,
) -> Result<RelativePoseUpToScale, GeoError> {
    if inliers.is_empty() {
        return Err(GeoError::InsufficientMatches { found: 0, required: 1 });
    }
    let svd = e.0.svd(true, true);
    let (mut u, mut vt) = (svd.u.ok_or(GeoError::Degenerate)?, svd.v_t.ok_or(GeoError::Degenerate)?);
    // reorder to descending singular values so the null direction is last
    let order = sorted_desc(&svd.singular_values);
    let perm = Matrix3::from_columns(&[
        Vector3::ith(order[0], 1.0),
        Vector3::ith(order[1], 1.0),
        Vector3::ith(order[2], 1.0),
    ]);
    u *= perm;
    vt = perm.transpose() * vt;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    let k_inv = intrinsics.matrix().try_inverse().ok_or(GeoError::Degenerate)?;
    let pts: Vec<([f64; 2], [f64; 2])> = inliers
        .points_i
        .iter()
        .zip(&inliers.points_j)
        .map(|(&a, &b)| (normalized(&k_inv, a), normalized(&k_inv, b)))
        .collect();
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];
    let mut best = (0usize, 0usize);
    for (c, (r, tc)) in candidates.iter().enumerate() {
        let count = pts
            .iter()
            .filter(|(a, b)| match triangulate(*a, *b, r, tc) {
                Some(x) => x.z > 0.0 && (r * x + tc).z > 0.0,
                None => false,
            })
            .count();
        if count > best.1 {
            best = (c, count);
        }
    }
    if 2 * best.1 <= pts.len() {
        return Err(GeoError::AmbiguousPose { best: best.1, total: pts.len() });
    }
    let (r, tc) = candidates[best.0];
    // re-orthonormalize against accumulated rounding
    let r = Rotation3::from_matrix(&r).into_inner();
    Ok(RelativePoseUpToScale { rotation: r, translation: tc, inlier_ratio: 1.0 })
}

fn cross_matrix(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Signed Sampson residuals (pixels) of pixel correspondences under the
/// fundamental matrix implied by `(r, t)`.
fn sampson_residuals(k_inv: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>, m: &MatchSet) -> DVector<f64> {
    let f = k_inv.transpose() * cross_matrix(t) * r * k_inv;
    DVector::from_iterator(
        m.len(),
        m.points_i.iter().zip(&m.points_j).map(|(a, b)| {
            let (a, b) = (Vector3::new(a[0], a[1], 1.0), Vector3::new(b[0], b[1], 1.0));
            let (fa, ftb) = (f * a, f.transpose() * b);
            let denom = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
            if denom > 0.0 {
                b.dot(&fa) / denom.sqrt()
            } else {
                0.0
            }
        }),
    )
}

/// Moves `(r, t)` by a rotation increment `w[0..3]` and a tangent step of the
/// translation direction `w[3..5]`.
fn retract(r: &Matrix3<f64>, t: &Vector3<f64>, w: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = t.cross(&helper).normalize();
    let e2 = t.cross(&e1);
    let rot = Rotation3::new(Vector3::new(w[0], w[1], w[2])).into_inner() * r;
    (rot, (t + e1 * w[3] + e2 * w[4]).normalize())
}

fn cauchy_cost(res: &DVector<f64>, c: f64) -> f64 {
    res.iter().map(|r| c * c * (1.0 + (r / c).powi(2)).ln()).sum()
}

/// Levenberg-Marquardt refinement of a decomposed pose under a Cauchy loss
/// of scale `scale_px` on the Sampson distances. Returns the input when no
/// step lowers the cost.
pub fn refine_pose(
    pose: &RelativePoseUpToScale,
    matches: &MatchSet,
    intrinsics: &CameraIntrinsics,
    scale_px: f64,
    iterations: usize,
) -> RelativePoseUpToScale {
    let Some(k_inv) = intrinsics.matrix().try_inverse() else { return *pose };
    if matches.len() < 5 || !(scale_px > 0.0) {
        return *pose;
    }
    let c = scale_px;
    let (mut r, mut t) = (pose.rotation, pose.translation);
    let mut res = sampson_residuals(&k_inv, &r, &t, matches);
    let mut cost = cauchy_cost(&res, c);
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..iterations {
        let mut jac = DMatrix::zeros(matches.len(), 5);
        for k in 0..5 {
            let mut w = [0.0; 5];
            w[k] = h;
            let (rp, tp) = retract(&r, &t, &w);
            w[k] = -h;
            let (rm, tm) = retract(&r, &t, &w);
            let d = (sampson_residuals(&k_inv, &rp, &tp, matches) - sampson_residuals(&k_inv, &rm, &tm, matches)) / (2.0 * h);
            jac.set_column(k, &d);
        }
        // iteratively reweighted normal equations
        let weights = res.map(|v| 1.0 / (1.0 + (v / c).powi(2)));
        let mut wj = jac.clone();
        for (mut row, &w) in wj.row_iter_mut().zip(weights.iter()) {
            row *= w;
        }
        let jtj = jac.transpose() * &wj;
        let g = wj.transpose() * &res;
        let mut improved = false;
        while lambda < 1e8 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let (rn, tn) = retract(&r, &t, step.as_slice());
            let rn_res = sampson_residuals(&k_inv, &rn, &tn, matches);
            let next = cauchy_cost(&rn_res, c);
            if next < cost {
                let gain = (cost - next) / cost.max(f64::MIN_POSITIVE);
                (r, t, res, cost) = (rn, tn, rn_res, next);
                lambda = (lambda * 0.1).max(1e-9);
                improved = gain > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let r = Rotation3::from_matrix(&r).into_inner();
    RelativePoseUpToScale { rotation: r, translation: t, inlier_ratio: pose.inlier_ratio }
}

/// Alternates inlier reclassification and [`refine_pose`]. A match is kept
/// when its Sampson distance is below `threshold_px` and it triangulates in
/// front of both cameras under the current pose.
pub fn polish_pose(
    pose: &RelativePoseUpToScale,
    matches: &MatchSet,
    inliers: &[bool],
    intrinsics: &CameraIntrinsics,
    threshold_px: f64,
    rounds: usize,
) -> RelativePoseUpToScale {
    let Some(k_inv) = intrinsics.matrix().try_inverse() else { return *pose };
    let c = 0.5 * threshold_px;
    let mut cur = refine_pose(pose, &matches.subset(inliers), intrinsics, c, REFINE_ITERATIONS);
    for _ in 0..rounds {
        let res = sampson_residuals(&k_inv, &cur.rotation, &cur.translation, matches);
        let keep: Vec<bool> = (0..matches.len())
            .map(|i| {
                res[i].abs() < threshold_px
                    && match triangulate(
                        normalized(&k_inv, matches.points_i[i]),
                        normalized(&k_inv, matches.points_j[i]),
                        &cur.rotation,
                        &cur.translation,
                    ) {
                        Some(x) => x.z > 0.0 && (cur.rotation * x + cur.translation).z > 0.0,
                        None => false,
                    }
            })
            .collect();
        cur = refine_pose(&cur, &matches.subset(&keep), intrinsics, c, REFINE_ITERATIONS);
    }
    cur
}

const REFINE_ITERATIONS: usize = 20;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
    }

    fn geodesic(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    fn project(k: &CameraIntrinsics, x: &Vector3<f64>) -> [f64; 2] {
        [k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy]
    }

    fn scene(rng: &mut ChaCha8Rng, k: &CameraIntrinsics, r: &Matrix3<f64>, t: &Vector3<f64>, n: usize, sigma: f64) -> MatchSet {
        let (mut pi, mut pj) = (Vec::new(), Vec::new());
        while pi.len() < n {
            let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..12.0));
            let y = r * x + t;
            if y.z <= 0.5 {
                continue;
            }
            let mut a = project(k, &x);
            let mut b = project(k, &y);
            if sigma > 0.0 {
                let g = |rng: &mut ChaCha8Rng| {
                    let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
                    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                };
                a = [a[0] + g(rng), a[1] + g(rng)];
                b = [b[0] + g(rng), b[1] + g(rng)];
            }
            pi.push(a);
            pj.push(b);
        }
        MatchSet::from_points(pi, pj)
    }

    #[test]
    fn identity_intrinsics_keep_projected_f() {
        let f = FundamentalMatrix(skew(&Vector3::new(1.0, 0.0, 0.0)));
        let e = essential_from_fundamental(&f, &CameraIntrinsics::identity());
        assert!((e.0 - f.0).norm() < 1e-12);
    }

    #[test]
    fn essential_round_trip() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 320.0).unwrap();
        let r = Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let e_true = skew(&Vector3::new(0.3, -0.5, 0.8).normalize()) * r;
        let km = k.matrix();
        let kinv = km.try_inverse().unwrap();
        let f = FundamentalMatrix(kinv.transpose() * e_true * kinv);
        let e = essential_from_fundamental(&f, &k);
        // oracle: plain matrix product
        let direct = km.transpose() * f.0 * km;
        assert!((direct - e_true).norm() < 1e-9);
        let scale = e.0.norm() / e_true.norm();
        assert!((e.0 / scale - e_true).norm() < 1e-9);
        let s = e.0.svd(false, false).singular_values;
        let o = sorted_desc(&s);
        assert!((s[o[0]] - s[o[1]]).abs() < 1e-6 * s[o[0]]);
        assert!(s[o[2]] < 1e-9 * s[o[0]]);
    }

    #[test]
    fn pure_sideways_translation() {
        let k = CameraIntrinsics::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Vector3::new(1.0, 0.0, 0.0);
        let m = scene(&mut rng, &k, &Matrix3::identity(), &t, 30, 0.0);
        let pose = decompose_essential(&EssentialMatrix(skew(&t)), &m, &k).unwrap();
        assert!((pose.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!((pose.translation - t).norm() < 1e-9);
    }

    #[test]
    fn planted_pose_noise_free_and_noisy() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let r = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.05..0.3)).into_inner();
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)).normalize();
            for (sigma, rot_tol, t_tol) in [(0.0, 1e-6, 1e-9), (0.5, 1f64.to_radians(), 2f64.to_radians())] {
                let m = scene(&mut rng, &k, &r, &t, 150, sigma);
                let f = super::super::fundamental::eight_point(&m.points_i, &m.points_j).unwrap();
                let e = essential_from_fundamental(&f, &k);
                let pose = decompose_essential(&e, &m, &k).unwrap();
                let rot_err = geodesic(&r, &pose.rotation);
                assert!(rot_err < rot_tol, "trial {trial} sigma {sigma}: {rot_err}");
                let cos = pose.translation.dot(&t).clamp(-1.0, 1.0);
                if sigma == 0.0 {
                    assert!(cos > 1.0 - t_tol, "trial {trial}: {cos}");
                } else {
                    assert!(cos.acos() < t_tol, "trial {trial}: {}", cos.acos().to_degrees());
                }
                assert!((pose.rotation.transpose() * pose.rotation - Matrix3::identity()).norm() < 1e-9);
                assert!((pose.translation.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
