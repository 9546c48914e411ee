mod common;

use lcd_core::geoverify::{estimate_fundamental_ransac, verify_matches, MatchSet, RansacConfig, Verdict};
use lcd_core::keyframe::{relative_pose, sample_keyframes, CameraIntrinsics, DescriptorMatrix, Pose};
use lcd_core::metrics::{ate_up_to_scale, average_precision, max_recall_full_precision, rpe};
use lcd_core::par::Exec;
use lcd_core::retrieval::{build_clique, query_topk, DescriptorIndex, KeyframeKey};
use lcd_core::vlad::{compute_vlad, fit_vocabulary, vlad_similarity, Metric, VladDescriptor, VladOptions, VocabConfig, Vocabulary};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn matrix(rows: &[Vec<f32>]) -> DescriptorMatrix {
    DescriptorMatrix::from_rows(rows).unwrap()
}

fn rows_strategy(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, d), n)
}

fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
        let n = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / p;
        ap += (recall - prev_recall) * tp / n;
        prev_recall = recall;
    }
    ap
}

fn brute_mr(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut best: f64 = 0.0;
    for &t in scores {
        let fp = scores.iter().zip(labels).any(|(s, l)| *s >= t && !*l);
        if !fp {
            let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
            best = best.max(tp / p);
        }
    }
    best
}

fn quat_strategy() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn keyframe_selection_is_increasing_and_spaced(steps in prop::collection::vec(0.0f64..0.8, 1..60), threshold in 0.1f64..2.0) {
        let mut x = 0.0;
        let poses: Vec<Pose> = steps.iter().map(|s| { x += s; Pose::new([x, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap() }).collect();
        let picks = sample_keyframes(&poses, threshold).unwrap();
        prop_assert_eq!(picks[0], 0);
        for w in picks.windows(2) {
            prop_assert!(w[0] < w[1]);
            let gap = poses[w[1]].position.x - poses[w[0]].position.x;
            prop_assert!(gap >= threshold - 1e-12);
        }
    }

    #[test]
    fn vlad_is_permutation_invariant_and_unit(rows in rows_strategy(1..40, 4), seed in any::<u64>(), cents in rows_strategy(3..4, 4)) {
        let vocab = Vocabulary::from_centroids(&cents.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>(), Metric::Euclidean, 0).unwrap();
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let opts = VladOptions::default();
        let a = compute_vlad(&matrix(&rows), &vocab, &opts).unwrap();
        let b = compute_vlad(&matrix(&shuffled), &vocab, &opts).unwrap();
        prop_assert_eq!(a.values(), b.values());
        if !a.is_zero() {
            let n = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_cost_non_increasing(rows in rows_strategy(12..80, 3), seed in any::<u64>(), k in 1usize..5, cosine in any::<bool>()) {
        let m = matrix(&rows);
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let config = VocabConfig { n_clusters: k, metric, seed, ..Default::default() };
        let (va, ra) = fit_vocabulary(&[&m], &config, Exec::Sequential).unwrap();
        let (vb, _) = fit_vocabulary(&[&m], &config, Exec::Parallel).unwrap();
        prop_assert_eq!(va, vb);
        for w in ra.costs.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{:?}", ra.costs);
        }
    }

    #[test]
    fn topk_respects_window_order_and_oracle(rows in rows_strategy(6..40, 5), q in 0usize..40, window in 0u32..6, k_pct in 1.0f64..60.0) {
        let n = rows.len();
        let q = q % n;
        let vlads: Vec<VladDescriptor> = rows.iter().map(|r| VladDescriptor::from_values(r.iter().map(|&v| v as f64).collect())).collect();
        let keys: Vec<KeyframeKey> = (0..n as u32).map(|i| KeyframeKey::new(0, i)).collect();
        let index = DescriptorIndex::from_rows(vec!["s".into()], keys.iter().copied().zip(vlads.iter()).collect()).unwrap();
        let query = keys[q];
        let got = query_topk(&index, query, k_pct, window).unwrap();
        for w in got.windows(2) {
            prop_assert!(w[0].similarity >= w[1].similarity);
        }
        for nb in &got {
            prop_assert!(nb.key.id.abs_diff(query.id) > window);
        }
        // exhaustive scan
        let k = ((k_pct / 100.0 * n as f64).floor() as usize).max(1);
        let mut oracle: Vec<(f64, u32)> = (0..n as u32)
            .filter(|&i| i.abs_diff(query.id) > window)
            .map(|i| (vlad_similarity(&vlads[q], &vlads[i as usize]).unwrap(), i))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        oracle.truncate(k);
        prop_assert_eq!(got.len(), oracle.len());
        for (g, o) in got.iter().zip(&oracle) {
            prop_assert!((g.similarity - o.0).abs() < 1e-6);
        }
        let clique = build_clique(&index, query, k_pct, window).unwrap();
        let m = clique.nodes.len();
        prop_assert_eq!(m, got.len() + 1);
        prop_assert_eq!(clique.edges.len(), m * (m - 1) / 2);
        prop_assert_eq!(clique.query_edge.iter().filter(|&&f| f).count(), m - 1);
    }

    #[test]
    fn ap_and_mr_match_oracles_and_ignore_monotone_maps(
        pairs in prop::collection::vec((0u8..12, any::<bool>()), 1..40),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 11.0).collect();
        let mut labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        labels[0] = true;
        let ap = average_precision(&scores, &labels).unwrap();
        let mr = max_recall_full_precision(&scores, &labels).unwrap();
        prop_assert!((ap - brute_ap(&scores, &labels)).abs() < 1e-9);
        prop_assert!((mr - brute_mr(&scores, &labels)).abs() < 1e-9);
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((average_precision(&mapped, &labels).unwrap() - ap).abs() < 1e-12);
        prop_assert_eq!(max_recall_full_precision(&mapped, &labels).unwrap(), mr);
    }

    #[test]
    fn rpe_and_ate_match_quaternion_oracles(a in quat_strategy(), b in quat_strategy(),
        ta in prop::array::uniform3(-5.0f64..5.0), tb in prop::array::uniform3(-5.0f64..5.0)) {
        let (ra, rb) = (a.to_rotation_matrix().into_inner(), b.to_rotation_matrix().into_inner());
        let oracle = a.angle_to(&b).to_degrees();
        prop_assert!((rpe(&ra, &rb) - oracle).abs() < 1e-6);
        prop_assert!((rpe(&ra, &rb) - rpe(&rb, &ra)).abs() < 1e-9);
        let (va, vb) = (Vector3::from(ta), Vector3::from(tb));
        prop_assume!(va.norm() > 1e-3 && vb.norm() > 1e-3);
        let cos = va.dot(&vb) / (va.norm() * vb.norm());
        let oracle = (2.0 - 2.0 * cos).max(0.0).sqrt();
        prop_assert!((ate_up_to_scale(&va, &vb).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn relative_pose_matches_matrix_product(a in quat_strategy(), b in quat_strategy(),
        ta in prop::array::uniform3(-5.0f64..5.0), tb in prop::array::uniform3(-5.0f64..5.0)) {
        let pa = Pose::from_parts(Vector3::from(ta), a);
        let pb = Pose::from_parts(Vector3::from(tb), b);
        let rel = relative_pose(&pa, &pb);
        let h = |p: &Pose| p.orientation.to_homogeneous().append_translation(&p.position);
        let oracle = h(&pa).try_inverse().unwrap() * h(&pb);
        let got = h(&rel);
        prop_assert!((got - oracle).norm() < 1e-9);
    }
}

fn accepted_invariants(v: &lcd_core::geoverify::VerifiedLoop, config: &RansacConfig) {
    assert!(v.inlier_ratio >= config.acceptance_ratio);
    if let Some(f) = &v.fundamental {
        let s = f.matrix().svd(false, false).singular_values;
        let (max, min) = (s.max(), s.min());
        assert!(min <= 1e-9 * max, "F not rank 2: {s:?}");
    }
    if let Some(p) = &v.pose {
        assert!((p.rotation.transpose() * p.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((p.translation.norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn accepted_loops_satisfy_model_invariants_and_inliers_fit() {
    let config = RansacConfig::default();
    let k = common::intrinsics();
    for seed in 0..12 {
        let p = common::planted_pair(seed, 120, 0.3, 0.5);
        let m = lcd_core::geoverify::mutual_match(&p.frame_i.keypoints, &p.frame_i.descriptors, &p.frame_j.keypoints, &p.frame_j.descriptors, Metric::Cosine).unwrap();
        let verdict = verify_matches(&m, &config, &k, seed).unwrap();
        let Verdict::Accepted(v) = verdict else { panic!("seed {seed} rejected") };
        accepted_invariants(&v, &config);
        let outcome = estimate_fundamental_ransac(&m, &config, seed).unwrap();
        for (idx, &inlier) in outcome.inliers.iter().enumerate() {
            if inlier {
                let d = outcome.fundamental.sampson_distance(m.points_i[idx], m.points_j[idx]);
                assert!(d < config.inlier_threshold_px, "sampson {d}");
            }
        }
        let again = estimate_fundamental_ransac(&m, &config, seed).unwrap();
        assert_eq!(again.inliers, outcome.inliers);
        assert_eq!(verify_matches(&m, &config, &k, seed).unwrap(), Verdict::Accepted(v));
    }
}

#[test]
fn rotation_is_unchanged_by_consistent_rescaling() {
    let config = RansacConfig::default();
    for seed in 0..6 {
        let p = common::planted_pair(100 + seed, 100, 0.0, 0.0);
        let m = lcd_core::geoverify::mutual_match(&p.frame_i.keypoints, &p.frame_i.descriptors, &p.frame_j.keypoints, &p.frame_j.descriptors, Metric::Cosine).unwrap();
        let k = common::intrinsics();
        let s = 2.5;
        let scaled = MatchSet::from_points(
            m.points_i.iter().map(|q| [q[0] * s, q[1] * s]).collect(),
            m.points_j.iter().map(|q| [q[0] * s, q[1] * s]).collect(),
        );
        let ks = CameraIntrinsics::new(k.fx * s, k.fy * s, k.cx * s, k.cy * s).unwrap();
        let scaled_config = RansacConfig { inlier_threshold_px: config.inlier_threshold_px * s, ..config.clone() };
        let a = verify_matches(&m, &config, &k, 7).unwrap();
        let b = verify_matches(&scaled, &scaled_config, &ks, 7).unwrap();
        let (ra, rb) = (a.accepted().unwrap().pose.unwrap().rotation, b.accepted().unwrap().pose.unwrap().rotation);
        // essential decomposition amplifies f64 rounding; agreement to 1e-3 degrees is well below f32 pixel resolution
        let drift = common::rotation_error_deg(&ra, &rb);
        assert!(drift < 1e-3, "seed {seed}: {drift}");
        assert!(common::rotation_error_deg(&ra, &p.rotation) < 1e-4);
    }
}

#[test]
fn rotation_error_helper_is_a_geodesic() {
    let r = Rotation3::from_euler_angles(0.0, 0.0, 0.3).into_inner();
    assert!((common::rotation_error_deg(&Matrix3::identity(), &r) - 0.3f64.to_degrees()).abs() < 1e-9);
}
