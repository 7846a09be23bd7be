//! Evaluation metrics: inlier ratio, feature matching recall, registration
//! recall, pose error and iterations-to-success curves.

use serde::{Deserialize, Serialize};

use crate::geom::{PointCloud, RigidTransform};
use crate::matching::Correspondence;
use crate::so3;

/// FMR counts a pair as matched when its inlier ratio is strictly above
/// this fraction.
pub const FMR_DEFAULT_THRESHOLD: f64 = 0.05;

/// How the registration-recall distance aggregates per-point errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RrAverage {
    Rmse,
    Mean,
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub inlier_ratio: f64,
    pub registration_correct: bool,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    /// Hypotheses consumed up to and including the first correct one
    /// (1-based), when tracing was on and a correct hypothesis appeared.
    pub iterations_to_success: Option<usize>,
}

/// Fraction of correspondences within `tau_c` of their ground-truth
/// position.
pub fn correspondence_eval(
    correspondences: &[Correspondence],
    t_gt: &RigidTransform,
    tau_c: f64,
) -> f64 {
    if correspondences.is_empty() {
        return 0.0;
    }
    let correct = correspondences
        .iter()
        .filter(|c| (t_gt.apply(&c.p) - c.q).norm() <= tau_c)
        .count();
    correct as f64 / correspondences.len() as f64
}

/// Feature matching recall: fraction of pairs with inlier ratio strictly
/// above the threshold.
pub fn fmr(inlier_ratios: &[f64], threshold: f64) -> f64 {
    if inlier_ratios.is_empty() {
        return 0.0;
    }
    let hits = inlier_ratios.iter().filter(|&&ir| ir > threshold).count();
    hits as f64 / inlier_ratios.len() as f64
}

/// Average distance between the evaluation points under the estimated and
/// the ground-truth transform.
pub fn rr_distance(
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
    eval_points: &PointCloud,
    average: RrAverage,
) -> f64 {
    let n = eval_points.len().max(1) as f64;
    match average {
        RrAverage::Rmse => {
            let sq: f64 = eval_points
                .points
                .iter()
                .map(|p| (t_est.apply(p) - t_gt.apply(p)).norm_squared())
                .sum();
            (sq / n).sqrt()
        }
        RrAverage::Mean => {
            let sum: f64 = eval_points
                .points
                .iter()
                .map(|p| (t_est.apply(p) - t_gt.apply(p)).norm())
                .sum();
            sum / n
        }
    }
}

/// Registration counted correct when the average point distance is below
/// `tau_r`.
pub fn rr(
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
    eval_points: &PointCloud,
    tau_r: f64,
    average: RrAverage,
) -> bool {
    rr_distance(t_est, t_gt, eval_points, average) < tau_r
}

/// Geodesic rotation error in degrees and Euclidean translation error.
pub fn pose_error(t_est: &RigidTransform, t_gt: &RigidTransform) -> (f64, f64) {
    let angle = so3::geodesic_angle(&t_est.rotation, &t_gt.rotation);
    (
        angle.to_degrees(),
        (t_est.translation - t_gt.translation).norm(),
    )
}

/// 1-based index of the first traced hypothesis judged correct by [`rr`];
/// `None` entries in the trace are skipped but keep their slot.
pub fn first_success_iteration(
    trace: &[Option<RigidTransform>],
    t_gt: &RigidTransform,
    eval_points: &PointCloud,
    tau_r: f64,
    average: RrAverage,
) -> Option<usize> {
    for (i, hyp) in trace.iter().enumerate() {
        if let Some(t) = hyp {
            if rr(t, t_gt, eval_points, tau_r, average) {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Cumulative success curve: for each budget `n`, the fraction of pairs
/// whose first correct hypothesis appeared within the first `n`. Pairs with
/// no success never count. Monotone non-decreasing in `n`.
pub fn success_curve(
    iterations_to_success: &[Option<usize>],
    budgets: &[usize],
) -> Vec<(usize, f64)> {
    let total = iterations_to_success.len().max(1) as f64;
    budgets
        .iter()
        .map(|&n| {
            let hits = iterations_to_success
                .iter()
                .filter(|it| matches!(it, Some(k) if *k <= n))
                .count();
            (n, hits as f64 / total)
        })
        .collect()
}

/// Median over an unsorted slice, treating `None` as never-succeeded
/// (infinite). Returns `None` when more than half never succeeded.
pub fn median_iterations(iterations: &[Option<usize>]) -> Option<usize> {
    let mut values: Vec<Option<usize>> = iterations.to_vec();
    values.sort_by_key(|v| v.unwrap_or(usize::MAX));
    values[values.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::geom::{apply_transform, random_transform};
    use crate::icosa::GroupElement;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn corr(p: Vector3<f64>, q: Vector3<f64>) -> Correspondence {
        Correspondence {
            p_index: 0,
            q_index: 0,
            p,
            q,
            desc_dist: 0.0,
            coarse_rotation: GroupElement::IDENTITY,
            refined_rotation: None,
        }
    }

    #[test]
    fn correspondence_eval_all_correct_and_shuffled() {
        let truth = random_transform(5, 1.0, 0.5);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let good: Vec<Correspondence> = (0..50)
            .map(|_| {
                let p = Vector3::new(rng.random(), rng.random(), rng.random());
                corr(p, truth.apply(&p))
            })
            .collect();
        assert_eq!(correspondence_eval(&good, &truth, 1e-9), 1.0);
        let bad: Vec<Correspondence> = (0..50)
            .map(|_| {
                let p = Vector3::new(rng.random(), rng.random(), rng.random());
                let q = Vector3::new(rng.random(), rng.random(), rng.random()) * 50.0;
                corr(p, q)
            })
            .collect();
        assert!(correspondence_eval(&bad, &truth, 0.01) <= 0.02);
        // brute-force recount
        let mixed: Vec<Correspondence> =
            good.iter().take(3).chain(bad.iter().take(7)).cloned().collect();
        let manual = mixed
            .iter()
            .filter(|c| (truth.apply(&c.p) - c.q).norm() <= 0.01)
            .count() as f64
            / mixed.len() as f64;
        assert_eq!(correspondence_eval(&mixed, &truth, 0.01), manual);
    }

    #[test]
    fn fmr_boundary_is_strict() {
        assert_eq!(fmr(&[1.0, 1.0, 1.0], FMR_DEFAULT_THRESHOLD), 1.0);
        // exactly at the threshold does not count ("more than 5%")
        assert_eq!(fmr(&[0.05, 0.05], FMR_DEFAULT_THRESHOLD), 0.0);
        let mixed = [0.0, 0.04, 0.05, 0.051, 0.2, 1.0];
        assert!((fmr(&mixed, FMR_DEFAULT_THRESHOLD) - 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rr_identity_and_pure_translation() {
        let pts = PointCloud::new(
            (0..20)
                .map(|i| Vector3::new(i as f64 * 0.1, (i % 3) as f64, 0.5))
                .collect(),
        )
        .unwrap();
        let id = RigidTransform::identity();
        assert!(rr(&id, &id, &pts, 1e-12, RrAverage::Rmse));
        let delta = Vector3::new(0.3, -0.4, 1.2); // |delta| = 1.3
        let shifted = RigidTransform::new(nalgebra::Matrix3::identity(), delta);
        for avg in [RrAverage::Rmse, RrAverage::Mean] {
            let d = rr_distance(&shifted, &id, &pts, avg);
            assert!((d - 1.3).abs() <= 1e-12);
        }
    }

    #[test]
    fn rr_rotation_about_centroid_matches_closed_form() {
        // Points on a sphere about the centroid c: each moves by
        // 2 sin(theta/2) * |perp component|.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let c = Vector3::new(0.5, -0.2, 1.0);
        let radius = 0.8;
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                c + Vector3::new(r * t.cos(), r * t.sin(), z) * radius
            })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let theta = 0.7;
        let axis = Vector3::new(0.3, 1.0, -0.2).normalize();
        let rot = so3::axis_angle(&axis, theta);
        let t_est = RigidTransform::new(rot, c - rot * c); // rotation about c
        let id = RigidTransform::identity();

        let perp_sq: Vec<f64> = pts
            .iter()
            .map(|p| {
                let d = p - c;
                (d - axis * d.dot(&axis)).norm_squared()
            })
            .collect();
        let factor = 2.0 * (theta / 2.0).sin();
        let want_rmse =
            factor * (perp_sq.iter().sum::<f64>() / pts.len() as f64).sqrt();
        let want_mean = factor
            * perp_sq.iter().map(|v| v.sqrt()).sum::<f64>()
            / pts.len() as f64;
        assert!((rr_distance(&t_est, &id, &cloud, RrAverage::Rmse) - want_rmse).abs() <= 1e-9);
        assert!((rr_distance(&t_est, &id, &cloud, RrAverage::Mean) - want_mean).abs() <= 1e-9);
    }

    #[test]
    fn pose_error_identity_and_known_offset() {
        let id = RigidTransform::identity();
        let (r, t) = pose_error(&id, &id);
        assert!(r <= 1e-12 && t <= 1e-12);
        let ten_deg = RigidTransform::new(
            so3::axis_angle(&Vector3::z(), 10.0_f64.to_radians()),
            Vector3::zeros(),
        );
        let (r, _) = pose_error(&ten_deg, &id);
        assert!((r - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn pose_error_cross_checked_against_quaternion_formula() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_transform(rng.random(), std::f64::consts::PI, 1.0);
            let b = random_transform(rng.random(), std::f64::consts::PI, 1.0);
            let (deg, _) = pose_error(&a, &b);
            let q = so3::quat_of_rotation(&(a.rotation.transpose() * b.rotation));
            let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            let want = 2.0 * v.atan2(q[0].abs());
            assert!((deg.to_radians() - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn success_curve_step_and_empty_cases() {
        let all_first: Vec<Option<usize>> = vec![Some(1); 8];
        let curve = success_curve(&all_first, &[1, 2, 10]);
        assert_eq!(curve, vec![(1, 1.0), (2, 1.0), (10, 1.0)]);
        let none: Vec<Option<usize>> = vec![None; 8];
        let curve = success_curve(&none, &[1, 100]);
        assert!(curve.iter().all(|&(_, f)| f == 0.0));
        let mixed = vec![Some(1), Some(5), Some(50), None];
        let curve = success_curve(&mixed, &[1, 5, 10, 100]);
        let fractions: Vec<f64> = curve.iter().map(|&(_, f)| f).collect();
        assert_eq!(fractions, vec![0.25, 0.5, 0.5, 0.75]);
        for w in curve.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn median_handles_failures() {
        assert_eq!(median_iterations(&[Some(3), Some(1), Some(9)]), Some(3));
        assert_eq!(median_iterations(&[Some(1), None, None]), None);
    }

    #[test]
    fn rr_distance_consistent_with_transformed_cloud() {
        let truth = random_transform(11, 2.0, 1.0);
        let pts = PointCloud::new(
            (0..30)
                .map(|i| Vector3::new(i as f64 * 0.05, (i * i % 7) as f64 * 0.1, 0.3))
                .collect(),
        )
        .unwrap();
        // distance of truth vs identity equals rms displacement of the cloud
        let moved = apply_transform(&truth, &pts);
        let manual = (pts
            .points
            .iter()
            .zip(&moved.points)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            / pts.len() as f64)
            .sqrt();
        let got = rr_distance(&truth, &RigidTransform::identity(), &pts, RrAverage::Rmse);
        assert!((got - manual).abs() <= 1e-12);
    }
}
