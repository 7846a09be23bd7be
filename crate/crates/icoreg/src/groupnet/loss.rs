//! Training losses and their analytic gradients.
//!
//! `loss_l1` is the batch-hard descriptor loss (softmax-style ratio of
//! exponentiated L2 distances against the hardest negative), `loss_l2` is a
//! 60-way cross entropy over candidate permutations whose logits are the
//! flattened dot products with the permuted positive feature, and
//! `loss_residual` is the quaternion distance to the ground-truth residual
//! rotation. Every gradient here is checked against central finite
//! differences in the test suites.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::icosa::{GroupElement, IcosahedralGroup};
use crate::so3;

use super::{Descriptor, GroupFeature};

/// Weight of the descriptor term in the combined loss.
pub const LAMBDA: f64 = 5.0;

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Batch-hard descriptor loss.
pub fn loss_l1(d: &[f64], d_plus: &[f64], negatives: &[&[f64]]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    let e_pos = l2_dist(d, d_plus).exp();
    let e_negs: Vec<f64> = negatives.iter().map(|n| l2_dist(d, n).exp()).collect();
    let hardest = e_negs.iter().cloned().fold(f64::INFINITY, f64::min);
    let denom = e_pos + e_negs.iter().sum::<f64>();
    Ok((e_pos - hardest) / denom)
}

/// Value plus gradients with respect to `d`, `d_plus` and each negative.
#[allow(clippy::type_complexity)]
pub fn loss_l1_grad(
    d: &[f64],
    d_plus: &[f64],
    negatives: &[&[f64]],
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    let n = d.len();
    let a = l2_dist(d, d_plus);
    let e_pos = a.exp();
    let dists: Vec<f64> = negatives.iter().map(|neg| l2_dist(d, neg)).collect();
    let e_negs: Vec<f64> = dists.iter().map(|v| v.exp()).collect();
    let hardest_idx = e_negs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .unwrap();
    let numer = e_pos - e_negs[hardest_idx];
    let denom = e_pos + e_negs.iter().sum::<f64>();
    let value = numer / denom;

    let d_da = e_pos * (denom - numer) / (denom * denom);
    let mut grad_d = vec![0.0; n];
    let mut grad_d_plus = vec![0.0; n];
    let mut grad_negs = vec![vec![0.0; n]; negatives.len()];

    if a > 0.0 {
        for c in 0..n {
            let dir = (d[c] - d_plus[c]) / a;
            grad_d[c] += d_da * dir;
            grad_d_plus[c] -= d_da * dir;
        }
    }
    for (k, neg) in negatives.iter().enumerate() {
        let d_dn = if k == hardest_idx {
            -e_negs[k] * (denom + numer) / (denom * denom)
        } else {
            -numer * e_negs[k] / (denom * denom)
        };
        if dists[k] > 0.0 {
            for c in 0..n {
                let dir = (d[c] - neg[c]) / dists[k];
                grad_d[c] += d_dn * dir;
                grad_negs[k][c] -= d_dn * dir;
            }
        }
    }
    Ok((value, grad_d, grad_d_plus, grad_negs))
}

/// Permutation logits `s_g = <f, P_g f_plus>` for all 60 group elements.
pub fn permutation_logits(
    group: &IcosahedralGroup,
    f: &GroupFeature,
    f_plus: &GroupFeature,
) -> Vec<f64> {
    group
        .elements()
        .map(|g| f.dot(&f_plus.permute(group, g)))
        .collect()
}

/// Cross entropy over the 60 candidate permutations; `g_plus` is the true
/// coarse rotation aligning `f_plus` to `f` (`f ~ P_{g_plus} f_plus`).
pub fn loss_l2(
    group: &IcosahedralGroup,
    f: &GroupFeature,
    f_plus: &GroupFeature,
    g_plus: GroupElement,
) -> f64 {
    let logits = permutation_logits(group, f, f_plus);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    log_sum - logits[g_plus.index()]
}

/// Value plus gradients with respect to both features.
pub fn loss_l2_grad(
    group: &IcosahedralGroup,
    f: &GroupFeature,
    f_plus: &GroupFeature,
    g_plus: GroupElement,
) -> (f64, GroupFeature, GroupFeature) {
    let logits = permutation_logits(group, f, f_plus);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let value = sum.ln() + max - logits[g_plus.index()];

    let mut grad_f = GroupFeature::zeros(f.channels(), f.layer());
    let mut grad_f_plus = GroupFeature::zeros(f.channels(), f.layer());
    for g in group.elements() {
        let coeff = exps[g.index()] / sum - if g == g_plus { 1.0 } else { 0.0 };
        if coeff == 0.0 {
            continue;
        }
        // d s_g / d f = P_g f_plus ; d s_g / d f_plus = P_{g^-1} f
        let pg = f_plus.permute(group, g);
        let pg_inv = f.permute(group, group.inverse(g));
        for (o, v) in grad_f.as_mut_slice().iter_mut().zip(pg.as_slice()) {
            *o += coeff * v;
        }
        for (o, v) in grad_f_plus.as_mut_slice().iter_mut().zip(pg_inv.as_slice()) {
            *o += coeff * v;
        }
    }
    (value, grad_f, grad_f_plus)
}

/// One batch entry for the combined descriptor loss.
pub struct DescSample<'a> {
    pub d: &'a Descriptor,
    pub d_plus: &'a Descriptor,
    pub negatives: Vec<&'a Descriptor>,
    pub f: &'a GroupFeature,
    pub f_plus: &'a GroupFeature,
    pub g_plus: GroupElement,
}

/// Combined descriptor loss, mean over the batch of
/// `LAMBDA * l1 + l2`.
pub fn loss_desc(group: &IcosahedralGroup, batch: &[DescSample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut total = 0.0;
    for sample in batch {
        let negs: Vec<&[f64]> = sample.negatives.iter().map(|n| n.values.as_slice()).collect();
        let l1 = loss_l1(&sample.d.values, &sample.d_plus.values, &negs)?;
        let l2 = loss_l2(group, sample.f, sample.f_plus, sample.g_plus);
        total += LAMBDA * l1 + l2;
    }
    Ok(total / batch.len() as f64)
}

/// Quaternion of the ground-truth residual rotation `R · R_{g_plus}^T`.
pub fn residual_target_quat(
    group: &IcosahedralGroup,
    r_gt: &Matrix3<f64>,
    g_plus: GroupElement,
) -> [f64; 4] {
    let residual = r_gt * group.rotation(g_plus).transpose();
    so3::quat_of_rotation(&residual)
}

/// Distance between the predicted quaternion and the ground-truth residual
/// quaternion, sign-resolved to the nearer hemisphere. Non-unit predictions
/// are renormalized; a zero quaternion is an error.
pub fn loss_residual(
    q_pred: &[f64; 4],
    r_gt: &Matrix3<f64>,
    g_plus: GroupElement,
    group: &IcosahedralGroup,
) -> Result<f64> {
    Ok(loss_residual_grad(q_pred, r_gt, g_plus, group)?.0)
}

/// Value plus gradient with respect to the (pre-normalization) prediction.
pub fn loss_residual_grad(
    q_pred: &[f64; 4],
    r_gt: &Matrix3<f64>,
    g_plus: GroupElement,
    group: &IcosahedralGroup,
) -> Result<(f64, [f64; 4])> {
    let norm = q_pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    if (norm - 1.0).abs() > 1e-3 {
        eprintln!("warning: residual quaternion has norm {norm:.6}, renormalizing");
    }
    let q_hat: Vec<f64> = q_pred.iter().map(|v| v / norm).collect();
    let mut target = residual_target_quat(group, r_gt, g_plus);
    let dot: f64 = q_hat.iter().zip(&target).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        for t in &mut target {
            *t = -*t;
        }
    }
    let diff: Vec<f64> = q_hat.iter().zip(&target).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut grad = [0.0; 4];
    if value > 0.0 {
        let u: Vec<f64> = diff.iter().map(|v| v / value).collect();
        let qu: f64 = q_hat.iter().zip(&u).map(|(a, b)| a * b).sum();
        for c in 0..4 {
            grad[c] = (u[c] - q_hat[c] * qu) / norm;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groupnet::random_group_feature;
    use crate::icosa::{icosahedral_group, GROUP_ORDER};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn unit_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    #[test]
    fn l1_requires_negatives() {
        let d = [1.0, 0.0];
        assert!(matches!(
            loss_l1(&d, &d, &[]),
            Err(Error::EmptyNegatives)
        ));
    }

    #[test]
    fn l1_small_when_positive_close_and_negative_far() {
        let d = [1.0, 0.0, 0.0];
        let d_plus = [1.0, 1e-8, 0.0];
        let far = [-1.0, 0.0, 0.0];
        let negs: Vec<&[f64]> = vec![&far];
        let v = loss_l1(&d, &d_plus, &negs).unwrap();
        // e^0 - e^2 over e^0 + e^2: strongly negative
        assert!(v < -0.5);
        let swapped = loss_l1(&d, &far, &[&d_plus[..]]).unwrap();
        assert!(swapped > 0.5);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let n = 8;
        for _ in 0..10 {
            let d = unit_vec(&mut rng, n);
            let d_plus = unit_vec(&mut rng, n);
            let negs_owned: Vec<Vec<f64>> = (0..4).map(|_| unit_vec(&mut rng, n)).collect();
            let negs: Vec<&[f64]> = negs_owned.iter().map(|v| v.as_slice()).collect();
            let (_, grad_d, grad_dp, grad_negs) = loss_l1_grad(&d, &d_plus, &negs).unwrap();
            let h = 1e-6;
            for c in 0..n {
                let fd = {
                    let mut hi = d.clone();
                    let mut lo = d.clone();
                    hi[c] += h;
                    lo[c] -= h;
                    (loss_l1(&hi, &d_plus, &negs).unwrap()
                        - loss_l1(&lo, &d_plus, &negs).unwrap())
                        / (2.0 * h)
                };
                assert!(
                    (fd - grad_d[c]).abs() <= 1e-4 * fd.abs().max(1.0),
                    "grad_d[{c}] analytic {} vs fd {fd}",
                    grad_d[c]
                );
            }
            for c in 0..n {
                let fd = {
                    let mut hi = d_plus.clone();
                    let mut lo = d_plus.clone();
                    hi[c] += h;
                    lo[c] -= h;
                    (loss_l1(&d, &hi, &negs).unwrap() - loss_l1(&d, &lo, &negs).unwrap())
                        / (2.0 * h)
                };
                assert!((fd - grad_dp[c]).abs() <= 1e-4 * fd.abs().max(1.0));
            }
            for k in 0..negs.len() {
                for c in 0..n {
                    let fd = {
                        let mut hi = negs_owned.clone();
                        let mut lo = negs_owned.clone();
                        hi[k][c] += h;
                        lo[k][c] -= h;
                        let hi_refs: Vec<&[f64]> = hi.iter().map(|v| v.as_slice()).collect();
                        let lo_refs: Vec<&[f64]> = lo.iter().map(|v| v.as_slice()).collect();
                        (loss_l1(&d, &d_plus, &hi_refs).unwrap()
                            - loss_l1(&d, &d_plus, &lo_refs).unwrap())
                            / (2.0 * h)
                    };
                    assert!((fd - grad_negs[k][c]).abs() <= 1e-4 * fd.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn l2_peaks_at_true_permutation() {
        let group = icosahedral_group();
        let f_plus = random_group_feature(4, 41);
        let g_plus = GroupElement(23);
        // Sharp logits: scale the aligned feature up.
        let mut f = f_plus.permute(group, g_plus);
        for v in f.as_mut_slice() {
            *v *= 3.0;
        }
        let value = loss_l2(group, &f, &f_plus, g_plus);
        for g in group.elements() {
            let other = loss_l2(group, &f, &f_plus, g);
            assert!(value <= other + 1e-12, "true class must minimize the loss");
        }
        assert!(value < 1e-6, "sharply peaked logits give near-zero loss, got {value}");
    }

    #[test]
    fn l2_uniform_logits_is_log_60() {
        let group = icosahedral_group();
        let f = GroupFeature::zeros(4, 0);
        let f_plus = random_group_feature(4, 43);
        let v = loss_l2(group, &f, &f_plus, GroupElement(7));
        assert!((v - (GROUP_ORDER as f64).ln()).abs() <= 1e-12);
        assert!(v >= 0.0);
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let group = icosahedral_group();
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        for trial in 0..5 {
            let f = random_group_feature(3, 100 + trial);
            let f_plus = random_group_feature(3, 200 + trial);
            let g_plus = GroupElement(rng.random_range(0..60));
            let (_, grad_f, grad_fp) = loss_l2_grad(group, &f, &f_plus, g_plus);
            let h = 1e-6;
            for idx in [0, 59, 77, 179] {
                let mut hi = f.clone();
                let mut lo = f.clone();
                hi.as_mut_slice()[idx] += h;
                lo.as_mut_slice()[idx] -= h;
                let fd = (loss_l2(group, &hi, &f_plus, g_plus)
                    - loss_l2(group, &lo, &f_plus, g_plus))
                    / (2.0 * h);
                assert!((fd - grad_f.as_slice()[idx]).abs() <= 1e-4 * fd.abs().max(1.0));

                let mut hi = f_plus.clone();
                let mut lo = f_plus.clone();
                hi.as_mut_slice()[idx] += h;
                lo.as_mut_slice()[idx] -= h;
                let fd = (loss_l2(group, &f, &hi, g_plus) - loss_l2(group, &f, &lo, g_plus))
                    / (2.0 * h);
                assert!((fd - grad_fp.as_slice()[idx]).abs() <= 1e-4 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn residual_perfect_prediction_is_zero() {
        let group = icosahedral_group();
        let g_plus = GroupElement(11);
        let r_gt = *group.rotation(g_plus); // residual is the identity
        let identity_q = [1.0, 0.0, 0.0, 0.0];
        let v = loss_residual(&identity_q, &r_gt, g_plus, group).unwrap();
        assert!(v <= 1e-9);
        let target = residual_target_quat(group, &r_gt, g_plus);
        assert!((target[0].abs() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn residual_zero_quaternion_errors() {
        let group = icosahedral_group();
        let r = Matrix3::identity();
        assert!(matches!(
            loss_residual(&[0.0; 4], &r, GroupElement::IDENTITY, group),
            Err(Error::ZeroQuaternion)
        ));
    }

    #[test]
    fn residual_gradient_matches_finite_differences() {
        let group = icosahedral_group();
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        for _ in 0..10 {
            let r_gt = crate::so3::random_rotation(&mut rng);
            let g_plus = GroupElement(rng.random_range(0..60));
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if q.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.3 {
                continue;
            }
            let (_, grad) = loss_residual_grad(&q, &r_gt, g_plus, group).unwrap();
            let h = 1e-6;
            for c in 0..4 {
                let mut hi = q;
                let mut lo = q;
                hi[c] += h;
                lo[c] -= h;
                let fd = (loss_residual(&hi, &r_gt, g_plus, group).unwrap()
                    - loss_residual(&lo, &r_gt, g_plus, group).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad[c]).abs() <= 1e-4 * fd.abs().max(1.0),
                    "component {c}: analytic {} vs fd {fd}",
                    grad[c]
                );
            }
        }
    }
}
