//! Rotation-sensitive local-patch feature extraction.
//!
//! The backbone maps a local 3-d patch to a fixed-width feature vector. The
//! default is a deterministic soft histogram over a radial-shell x azimuth x
//! elevation grid in the patch's world frame. No local reference frame is
//! involved anywhere: the feature is deliberately rotation-sensitive, and the
//! group feature machinery on top of it is what produces invariance.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::kdtree::KdTree;

/// Local neighborhood of a keypoint, in center-relative coordinates.
#[derive(Debug, Clone)]
pub struct Patch {
    pub center: Vector3<f64>,
    /// Center-relative neighbor positions, all strictly within `radius`.
    pub neighbors: Vec<Vector3<f64>>,
    pub radius: f64,
}

impl Patch {
    /// The same patch rotated about its center.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Patch {
        Patch {
            center: self.center,
            neighbors: self.neighbors.iter().map(|p| r * p).collect(),
            radius: self.radius,
        }
    }
}

/// Grid geometry of the soft-histogram backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub shells: usize,
    pub azimuth_bins: usize,
    pub elevation_bins: usize,
}

impl BackboneSpec {
    pub fn new(shells: usize, azimuth_bins: usize, elevation_bins: usize) -> Self {
        assert!(shells >= 1 && azimuth_bins >= 1 && elevation_bins >= 1);
        BackboneSpec {
            shells,
            azimuth_bins,
            elevation_bins,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.shells * self.azimuth_bins * self.elevation_bins
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        // 4 x 4 x 2 = 32 channels.
        BackboneSpec::new(4, 4, 2)
    }
}

/// A patch-to-vector feature extractor. Alternative backbones plug in here.
pub trait Backbone: Sync {
    fn output_dim(&self) -> usize;
    fn extract(&self, patch: &Patch) -> Result<Vec<f64>>;
}

/// The default deterministic backbone.
#[derive(Debug, Clone, Default)]
pub struct SoftHistogramBackbone {
    pub spec: BackboneSpec,
}

impl Backbone for SoftHistogramBackbone {
    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn extract(&self, patch: &Patch) -> Result<Vec<f64>> {
        phi_histogram(patch, &self.spec)
    }
}

/// All points of `cloud` strictly within `radius` of the point at
/// `center_index`, center-relative, ordered by original index. The center
/// point itself is excluded.
pub fn extract_patch(cloud: &PointCloud, center_index: usize, radius: f64) -> Result<Patch> {
    let tree = KdTree::from_points3(&cloud.points);
    extract_patch_with_tree(cloud, &tree, center_index, radius)
}

/// Same as [`extract_patch`] but reusing a prebuilt kd-tree over the cloud.
pub fn extract_patch_with_tree(
    cloud: &PointCloud,
    tree: &KdTree,
    center_index: usize,
    radius: f64,
) -> Result<Patch> {
    let center = cloud.points[center_index];
    let mut neighbors = Vec::new();
    for i in tree.within_radius(&[center.x, center.y, center.z], radius) {
        if i == center_index {
            continue;
        }
        let d = cloud.points[i] - center;
        if d.norm() < radius {
            neighbors.push(d);
        }
    }
    if neighbors.is_empty() {
        return Err(Error::EmptyPatch {
            center: center_index,
            radius,
        });
    }
    Ok(Patch {
        center,
        neighbors,
        radius,
    })
}

/// Soft-histogram feature: every neighbor is trilinearly assigned over
/// (radial shell, azimuth, elevation); azimuth wraps, the other two clamp,
/// so each point deposits total weight one. The flattened grid is then
/// L2-normalized. Output is bit-identical under any permutation of the
/// input points.
pub fn phi_histogram(patch: &Patch, spec: &BackboneSpec) -> Result<Vec<f64>> {
    let deposits = histogram_deposits(patch, spec)?;
    let mut bins = vec![0.0_f64; spec.output_dim()];
    for (bin, w) in deposits {
        bins[bin] += w;
    }
    let norm = bins.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::DegenerateDescriptor);
    }
    for v in &mut bins {
        *v /= norm;
    }
    Ok(bins)
}

/// The raw (bin, weight) deposits before accumulation, sorted canonically so
/// summation order does not depend on input point order. Exposed for tests.
pub(crate) fn histogram_deposits(patch: &Patch, spec: &BackboneSpec) -> Result<Vec<(usize, f64)>> {
    if patch.neighbors.is_empty() {
        return Err(Error::EmptyPatch {
            center: usize::MAX,
            radius: patch.radius,
        });
    }
    let (s_bins, a_bins, e_bins) = (spec.shells, spec.azimuth_bins, spec.elevation_bins);
    let mut deposits: Vec<(usize, f64)> = Vec::with_capacity(patch.neighbors.len() * 8);
    for p in &patch.neighbors {
        let r = p.norm();
        let (azimuth, polar) = if r > 0.0 {
            (p.y.atan2(p.x), (p.z / r).clamp(-1.0, 1.0).acos())
        } else {
            (0.0, 0.0)
        };
        let u_s = (r / patch.radius) * s_bins as f64 - 0.5;
        let u_a = (azimuth + std::f64::consts::PI) / std::f64::consts::TAU * a_bins as f64 - 0.5;
        let u_e = polar / std::f64::consts::PI * e_bins as f64 - 0.5;

        let split = |u: f64| -> [(i64, f64); 2] {
            let i0 = u.floor();
            let frac = u - i0;
            [(i0 as i64, 1.0 - frac), (i0 as i64 + 1, frac)]
        };
        let clamp = |i: i64, n: usize| -> usize { i.clamp(0, n as i64 - 1) as usize };
        let wrap = |i: i64, n: usize| -> usize { i.rem_euclid(n as i64) as usize };

        for (si, sw) in split(u_s) {
            for (ai, aw) in split(u_a) {
                for (ei, ew) in split(u_e) {
                    let w = sw * aw * ew;
                    if w == 0.0 {
                        continue;
                    }
                    let bin = (clamp(si, s_bins) * a_bins + wrap(ai, a_bins)) * e_bins
                        + clamp(ei, e_bins);
                    deposits.push((bin, w));
                }
            }
        }
    }
    deposits.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(deposits)
}
