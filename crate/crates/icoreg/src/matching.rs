//! Descriptor matching and per-correspondence rotation estimation.
//!
//! Matching is plain nearest-neighbor with a mutual check. On every match, a
//! coarse rotation is found by searching the 60 permutations that best align
//! the two group features; an optional learned regressor refines it with a
//! residual quaternion.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::groupnet::{regressor_input, Descriptor, GroupFeature, NetworkWeights};
use crate::icosa::{GroupElement, IcosahedralGroup};
use crate::kdtree::KdTree;
use crate::so3;

/// A matched keypoint pair with its estimated rotations.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub p_index: usize,
    pub q_index: usize,
    pub p: Vector3<f64>,
    pub q: Vector3<f64>,
    pub desc_dist: f64,
    /// Group element aligning the P-side group feature to the Q side.
    pub coarse_rotation: GroupElement,
    /// Residual-corrected rotation, when a regressor was available.
    pub refined_rotation: Option<Matrix3<f64>>,
}

impl Correspondence {
    /// The rotation hypothesis this correspondence carries: refined when
    /// present, otherwise the coarse group rotation.
    pub fn rotation_hypothesis(&self, group: &IcosahedralGroup) -> Matrix3<f64> {
        self.refined_rotation
            .unwrap_or_else(|| *group.rotation(self.coarse_rotation))
    }
}

/// An index pair surviving the mutual nearest test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCandidate {
    pub p_index: usize,
    pub q_index: usize,
    pub desc_dist: f64,
}

/// Mutual nearest-neighbor matching with L2 distance: (i, j) is kept iff j
/// is i's nearest in Q and i is j's nearest in P. Ties break to the lowest
/// index; output is ordered by `p_index`.
pub fn match_mutual_nn(
    descs_p: &[Descriptor],
    descs_q: &[Descriptor],
) -> Result<Vec<MatchCandidate>> {
    if descs_p.is_empty() || descs_q.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    let dim = descs_p[0].values.len();
    for d in descs_p.iter().chain(descs_q) {
        if d.values.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("descriptor dim {dim}"),
                got: format!("{}", d.values.len()),
            });
        }
    }
    let flat = |descs: &[Descriptor]| -> Vec<f64> {
        descs.iter().flat_map(|d| d.values.iter().copied()).collect()
    };
    let tree_q = KdTree::build(dim, &flat(descs_q));
    let tree_p = KdTree::build(dim, &flat(descs_p));

    let nn_in_q: Vec<(usize, f64)> = descs_p
        .iter()
        .map(|d| tree_q.nearest(&d.values).expect("descs_q not empty"))
        .collect();
    let nn_in_p: Vec<usize> = descs_q
        .iter()
        .map(|d| tree_p.nearest(&d.values).expect("descs_p not empty").0)
        .collect();

    let mut out = Vec::new();
    for (i, &(j, d2)) in nn_in_q.iter().enumerate() {
        if nn_in_p[j] == i {
            out.push(MatchCandidate {
                p_index: i,
                q_index: j,
                desc_dist: d2.sqrt(),
            });
        }
    }
    Ok(out)
}

/// Coarse rotation by permutation search: the group element `g` minimizing
/// `|f_q - P_g f_p|`, ties broken by the lowest element index.
pub fn coarse_rotation(
    group: &IcosahedralGroup,
    f_p: &GroupFeature,
    f_q: &GroupFeature,
) -> Result<GroupElement> {
    if f_p.channels() != f_q.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", f_p.channels()),
            got: format!("{} channels", f_q.channels()),
        });
    }
    let mut best = (GroupElement::IDENTITY, f64::INFINITY);
    for g in group.elements() {
        let mut dist = 0.0;
        for h in group.elements() {
            let row_q = f_q.row(h);
            let row_p = f_p.row(group.compose(h, g));
            dist += row_q
                .iter()
                .zip(row_p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        if dist < best.1 {
            best = (g, dist);
        }
    }
    Ok(best.0)
}

/// Residual-corrected rotation `R_eps * R_c`. Concatenates the two group
/// features with the P side aligned by the coarse rotation, runs the
/// regressor to a quaternion, and composes. Errors when the weights carry
/// no regressor.
pub fn refine_rotation(
    group: &IcosahedralGroup,
    f0_p: &GroupFeature,
    fl_p: &GroupFeature,
    f0_q: &GroupFeature,
    fl_q: &GroupFeature,
    r_c: GroupElement,
    weights: &NetworkWeights,
) -> Result<Matrix3<f64>> {
    let reg = weights.regressor.as_ref().ok_or(Error::MissingRegressor)?;
    let input = regressor_input(group, f0_p, fl_p, f0_q, fl_q, r_c);
    let q = crate::groupnet::regressor_quaternion_for(group, reg, &input)?;
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    let r_eps = so3::rotation_from_quat(&q);
    Ok(r_eps * group.rotation(r_c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groupnet::random_group_feature;
    use crate::icosa::icosahedral_group;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn unit_desc(rng: &mut ChaCha20Rng, dim: usize) -> Descriptor {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Descriptor {
            values: v.into_iter().map(|x| x / norm).collect(),
        }
    }

    #[test]
    fn identical_sets_match_identically() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let descs: Vec<Descriptor> = (0..20).map(|_| unit_desc(&mut rng, 8)).collect();
        let matches = match_mutual_nn(&descs, &descs).unwrap();
        assert_eq!(matches.len(), 20);
        for (i, m) in matches.iter().enumerate() {
            assert_eq!(m.p_index, i);
            assert_eq!(m.q_index, i);
            assert_eq!(m.desc_dist, 0.0);
        }
    }

    #[test]
    fn one_sided_nearest_is_excluded() {
        // q0 is nearest to both p0 and p1, but q0's own nearest is p0,
        // so (p1, q0) must not survive the mutual check.
        let p = vec![
            Descriptor { values: vec![0.0] },
            Descriptor { values: vec![1.0] },
        ];
        let q = vec![Descriptor { values: vec![0.4] }];
        let matches = match_mutual_nn(&p, &q).unwrap();
        assert_eq!(matches.len(), 1);
        assert_eq!(matches[0].p_index, 0);
        assert_eq!(matches[0].q_index, 0);
    }

    #[test]
    fn matches_brute_force_mutual_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p: Vec<Descriptor> = (0..60).map(|_| unit_desc(&mut rng, 16)).collect();
        let q: Vec<Descriptor> = (0..45).map(|_| unit_desc(&mut rng, 16)).collect();
        let got = match_mutual_nn(&p, &q).unwrap();

        // O(NM) oracle with the same lowest-index tie rule.
        let nearest = |d: &Descriptor, set: &[Descriptor]| -> usize {
            set.iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| d.distance(a).total_cmp(&d.distance(b)))
                .map(|(i, _)| i)
                .unwrap()
        };
        let mut want = Vec::new();
        for (i, d) in p.iter().enumerate() {
            let j = nearest(d, &q);
            if nearest(&q[j], &p) == i {
                want.push((i, j));
            }
        }
        let got_pairs: Vec<(usize, usize)> =
            got.iter().map(|m| (m.p_index, m.q_index)).collect();
        assert_eq!(got_pairs, want);
    }

    #[test]
    fn empty_side_errors() {
        let d = vec![Descriptor { values: vec![1.0] }];
        assert!(match_mutual_nn(&d, &[]).is_err());
        assert!(match_mutual_nn(&[], &d).is_err());
    }

    #[test]
    fn coarse_recovers_exact_permutation() {
        let group = icosahedral_group();
        let f = random_group_feature(6, 9);
        for m in group.elements() {
            let f_q = f.permute(group, m);
            assert_eq!(coarse_rotation(group, &f, &f_q).unwrap(), m);
        }
    }

    #[test]
    fn coarse_degenerate_feature_ties_to_identity() {
        let group = icosahedral_group();
        let mut f = GroupFeature::zeros(4, 0);
        for g in group.elements() {
            f.row_mut(g).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        }
        assert_eq!(
            coarse_rotation(group, &f, &f).unwrap(),
            GroupElement::IDENTITY
        );
    }

    #[test]
    fn coarse_shape_mismatch_errors() {
        let group = icosahedral_group();
        let a = random_group_feature(4, 1);
        let b = random_group_feature(5, 2);
        assert!(coarse_rotation(group, &a, &b).is_err());
    }

    #[test]
    fn coarse_conjugates_under_simultaneous_permutation() {
        // coarse(P_a f_p, P_a f_q) = a · coarse(f_p, f_q) · a^-1,
        // checked exhaustively over a.
        let group = icosahedral_group();
        let f_p = random_group_feature(5, 33);
        let f_q = f_p.permute(group, GroupElement(41));
        let base = coarse_rotation(group, &f_p, &f_q).unwrap();
        for a in group.elements() {
            let got = coarse_rotation(
                group,
                &f_p.permute(group, a),
                &f_q.permute(group, a),
            )
            .unwrap();
            let want = group.compose(group.compose(a, base), group.inverse(a));
            assert_eq!(got, want, "conjugation law failed at a = {a:?}");
        }
    }

    #[test]
    fn refine_identity_regressor_returns_coarse_rotation() {
        let group = icosahedral_group();
        let n0 = 4;
        let embedder = NetworkWeights::identity_passthrough(n0);
        // All-zero regressor except the final bias pinned to the identity
        // quaternion.
        let mut reg = NetworkWeights::random_regressor(4 * n0, &[4, 4, 4], 8, 0);
        for layer in &mut reg.convs {
            for w in &mut layer.weights {
                *w = 0.0;
            }
            for b in &mut layer.bias {
                *b = 0.0;
            }
        }
        for layer in &mut reg.mlp {
            for w in &mut layer.weights {
                *w = 0.0;
            }
            for b in &mut layer.bias {
                *b = 0.0;
            }
        }
        reg.mlp.last_mut().unwrap().bias[0] = 1.0;
        let mut weights = embedder;
        weights.regressor = Some(reg);

        let f0 = random_group_feature(n0, 5);
        let fl = crate::groupnet::embed(group, &f0, &weights).unwrap();
        let r_c = GroupElement(37);
        let got = refine_rotation(group, &f0, &fl, &f0, &fl, r_c, &weights).unwrap();
        assert!((got - group.rotation(r_c)).abs().max() <= 1e-15);
    }

    #[test]
    fn refine_without_regressor_errors() {
        let group = icosahedral_group();
        let weights = NetworkWeights::identity_passthrough(4);
        let f0 = random_group_feature(4, 5);
        let fl = crate::groupnet::embed(group, &f0, &weights).unwrap();
        assert!(matches!(
            refine_rotation(group, &f0, &fl, &f0, &fl, GroupElement(1), &weights),
            Err(Error::MissingRegressor)
        ));
    }

    #[test]
    fn regressor_pooled_input_invariant_to_consistent_permutation() {
        // Rotating the Q side by m changes the coarse alignment to m · R_c;
        // the concatenated feature is then a pure row permutation, so the
        // pooled MLP input must not change.
        let group = icosahedral_group();
        let n0 = 4;
        let f0_p = random_group_feature(n0, 8);
        let fl_p = random_group_feature(n0, 9);
        let f0_q = random_group_feature(n0, 10);
        let fl_q = random_group_feature(n0, 11);
        let r_c = GroupElement(14);
        let base = regressor_input(group, &f0_p, &fl_p, &f0_q, &fl_q, r_c);

        let reg = NetworkWeights::random_regressor(4 * n0, &[6, 6, 6], 8, 77);
        let pooled_base =
            crate::groupnet::regressor_pooled_input(group, &reg, &base).unwrap();
        for m in [GroupElement(3), GroupElement(29), GroupElement(58)] {
            let aligned = group.compose(m, r_c);
            let input = regressor_input(
                group,
                &f0_p,
                &fl_p,
                &f0_q.permute(group, m),
                &fl_q.permute(group, m),
                aligned,
            );
            let pooled =
                crate::groupnet::regressor_pooled_input(group, &reg, &input).unwrap();
            for (a, b) in pooled_base.iter().zip(&pooled) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
