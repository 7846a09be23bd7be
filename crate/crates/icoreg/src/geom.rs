//! Rigid-transform utilities: Kabsch fitting, point-to-point ICP, voxel
//! downsampling, planarity keypoint filtering and transform sampling.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::so3;

/// A set of 3-d points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    /// Fails on non-finite coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        for p in &points {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidParameter(
                    "point cloud contains non-finite coordinates".into(),
                ));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some((lo, hi))
    }
}

/// Rotation plus translation; rotation orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        so3::is_rotation(&self.rotation, tol)
            && self.translation.iter().all(|t| t.is_finite())
    }
}

pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
    }
}

/// Least-squares rigid transform mapping `src` onto `dst` (SVD-based,
/// reflection-corrected). Needs at least 3 non-collinear pairs.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pairs", src.len()),
            got: format!("{} pairs", dst.len()),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "kabsch needs >= 3 pairs, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let src_mean: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let dst_mean: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cross += (d - dst_mean) * (s - src_mean).transpose();
    }

    let svd = cross.svd(true, true);
    // Collinear or coincident points leave the rotation under-determined.
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(Error::DegenerateGeometry(
            "kabsch input is collinear or coincident".into(),
        ));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        rotation = u * v_t;
    }
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Point-to-point ICP output. `rmse_history[k]` is the association RMSE under
/// the transform held at the start of iteration `k`; the trace is
/// non-increasing by construction of the update.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rmse_history: Vec<f64>,
    pub iterations: usize,
}

/// Point-to-point ICP with exact nearest-neighbor association and Kabsch
/// updates. Stops at `max_iter` updates or when the RMSE improves by less
/// than `conv_tol` meters. The returned transform is the best (lowest RMSE
/// on its own association) seen, so it never degrades the initial guess.
pub fn icp(
    src: &PointCloud,
    dst: &PointCloud,
    init: &RigidTransform,
    max_iter: usize,
    conv_tol: f64,
) -> Result<IcpResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let tree = KdTree::from_points3(&dst.points);
    let mut transform = *init;
    let mut best = (*init, f64::INFINITY);
    let mut rmse_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..=max_iter {
        // Associate and measure under the current transform.
        let mut matched: Vec<Vector3<f64>> = Vec::with_capacity(src.len());
        let mut sq_sum = 0.0;
        for p in &src.points {
            let q = transform.apply(p);
            let (j, d2) = tree.nearest(&[q.x, q.y, q.z]).expect("dst not empty");
            matched.push(dst.points[j]);
            sq_sum += d2;
        }
        let rmse = (sq_sum / src.len() as f64).sqrt();
        if rmse < best.1 {
            best = (transform, rmse);
        }
        let improved = rmse_history
            .last()
            .map_or(true, |prev: &f64| prev - rmse >= conv_tol);
        rmse_history.push(rmse);
        if !improved || iterations == max_iter {
            break;
        }
        transform = kabsch(&src.points, &matched)?;
        iterations += 1;
    }

    Ok(IcpResult {
        transform: best.0,
        rmse_history,
        iterations,
    })
}

/// One centroid per occupied voxel, ordered by voxel key.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if voxel <= 0.0 || !voxel.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "voxel size must be positive, got {voxel}"
        )));
    }
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, usize)> = HashMap::new();
    for p in &cloud.points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let cell = cells.entry(key).or_insert((Vector3::zeros(), 0));
        cell.0 += p;
        cell.1 += 1;
    }
    let mut keyed: Vec<_> = cells.into_iter().collect();
    keyed.sort_unstable_by_key(|(key, _)| *key);
    Ok(PointCloud {
        points: keyed
            .into_iter()
            .map(|(_, (sum, count))| sum / count as f64)
            .collect(),
    })
}

pub const PLANARITY_DEFAULT_THRESHOLD: f64 = 0.03;

/// Keeps the keypoints whose neighborhood covariance, computed on local
/// coordinates divided by `radius`, has smallest eigenvalue at or above the
/// threshold. Planar patches score ~0 and are dropped; keypoints with an
/// empty neighborhood are dropped.
pub fn planarity_filter(
    cloud: &PointCloud,
    keypoints: &[usize],
    radius: f64,
    min_eig_threshold: f64,
) -> Vec<usize> {
    let tree = KdTree::from_points3(&cloud.points);
    let mut kept = Vec::new();
    for &k in keypoints {
        let c = cloud.points[k];
        let neighbors = tree.within_radius(&[c.x, c.y, c.z], radius);
        if neighbors.is_empty() {
            continue;
        }
        let n = neighbors.len() as f64;
        let mean: Vector3<f64> =
            neighbors.iter().map(|&i| cloud.points[i]).sum::<Vector3<f64>>() / n;
        let mut cov = Matrix3::zeros();
        for &i in &neighbors {
            let d = (cloud.points[i] - mean) / radius;
            cov += d * d.transpose();
        }
        cov /= n;
        let eigs = cov.symmetric_eigenvalues();
        // Covariance is PSD; clamp the tiny negative round-off.
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
        if min_eig >= min_eig_threshold {
            kept.push(k);
        }
    }
    kept
}

/// Random rigid transform: uniform rotation axis, uniform angle in
/// `[0, max_angle]`, uniform translation in the `[-max_translation,
/// max_translation]` box. Deterministic per seed.
pub fn random_transform(seed: u64, max_angle: f64, max_translation: f64) -> RigidTransform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    random_transform_with(&mut rng, max_angle, max_translation)
}

pub fn random_transform_with<R: Rng + ?Sized>(
    rng: &mut R,
    max_angle: f64,
    max_translation: f64,
) -> RigidTransform {
    // Archimedes cylinder projection for a uniform axis.
    let z: f64 = rng.random_range(-1.0..=1.0);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let axis = Vector3::new(r * theta.cos(), r * theta.sin(), z);
    let angle: f64 = rng.random_range(0.0..=max_angle.max(0.0));
    let rotation = if max_angle <= 0.0 {
        Matrix3::identity()
    } else {
        so3::axis_angle(&axis, angle)
    };
    let t = max_translation.max(0.0);
    let translation = Vector3::new(
        rng.random_range(-t..=t),
        rng.random_range(-t..=t),
        rng.random_range(-t..=t),
    );
    RigidTransform {
        rotation,
        translation,
    }
}
