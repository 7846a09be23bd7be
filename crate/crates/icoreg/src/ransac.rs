//! Hypothesis-and-verify estimators over putative correspondences.
//!
//! Three modes share one scoring loop. Vanilla samples random triplets and
//! fits them with Kabsch. Coarse rotation verification (CRV) restricts
//! triplets to correspondences sharing one coarse rotation, sampling a
//! bucket proportionally to its triplet count so every feasible triplet is
//! equally likely. One-shot estimation (OSE) builds a full hypothesis from a
//! single correspondence: its rotation estimate plus `t = q - R p`. The
//! hypothesis stream is a deterministic function of the seed, and a longer
//! budget only extends it, so the winning inlier count is monotone in the
//! iteration budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::geom::{kabsch, RigidTransform};
use crate::icosa::IcosahedralGroup;
use crate::matching::Correspondence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RansacMode {
    Vanilla,
    Crv,
    Ose,
}

impl std::fmt::Display for RansacMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RansacMode::Vanilla => write!(f, "vanilla"),
            RansacMode::Crv => write!(f, "crv"),
            RansacMode::Ose => write!(f, "ose"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub mode: RansacMode,
    pub max_iterations: usize,
    /// Inlier threshold in meters.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Final Kabsch refit over the winning inlier set.
    pub refit: bool,
    /// Optional pairwise length-compatibility pre-check on sampled triplets.
    pub distance_check: bool,
    /// Record every evaluated hypothesis (`None` for degenerate samples).
    pub trace: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            mode: RansacMode::Ose,
            max_iterations: 1000,
            inlier_threshold: 0.1,
            seed: 0,
            refit: true,
            distance_check: false,
            trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Inliers of `transform`, re-derivable with [`count_inliers`].
    pub inlier_indices: Vec<usize>,
    pub hypotheses_evaluated: usize,
    pub seed: u64,
    /// Winning inlier count before the optional refit; monotone in the
    /// iteration budget for a fixed seed.
    pub hypothesis_inliers: usize,
    /// Set when CRV found no bucket of three and fell back to vanilla
    /// sampling.
    pub crv_fallback: bool,
    /// Per-hypothesis transforms when tracing was requested.
    pub trace: Vec<Option<RigidTransform>>,
}

/// Indices with `|R p + t - q| <= tau`.
pub fn count_inliers(
    transform: &RigidTransform,
    correspondences: &[Correspondence],
    tau: f64,
) -> Vec<usize> {
    correspondences
        .iter()
        .enumerate()
        .filter(|(_, c)| (transform.apply(&c.p) - c.q).norm() <= tau)
        .map(|(i, _)| i)
        .collect()
}

fn inlier_count(transform: &RigidTransform, correspondences: &[Correspondence], tau: f64) -> usize {
    correspondences
        .iter()
        .filter(|c| (transform.apply(&c.p) - c.q).norm() <= tau)
        .count()
}

/// Runs the configured estimator. Vanilla and CRV need at least three
/// correspondences, OSE needs one.
pub fn run_ransac(
    group: &IcosahedralGroup,
    correspondences: &[Correspondence],
    config: &RansacConfig,
) -> Result<RegistrationResult> {
    if config.max_iterations == 0 {
        return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
    }
    if !(config.inlier_threshold > 0.0) {
        return Err(Error::InvalidParameter(
            "inlier threshold must be positive".into(),
        ));
    }
    let needed = match config.mode {
        RansacMode::Ose => 1,
        _ => 3,
    };
    if correspondences.len() < needed {
        return Err(Error::InsufficientCorrespondences {
            mode: match config.mode {
                RansacMode::Vanilla => "vanilla",
                RansacMode::Crv => "crv",
                RansacMode::Ose => "ose",
            },
            needed,
            got: correspondences.len(),
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut crv_fallback = false;

    enum Sampler {
        Vanilla,
        Crv { buckets: Vec<Vec<usize>>, cumulative: Vec<f64> },
        Ose { order: Vec<usize> },
    }

    let sampler = match config.mode {
        RansacMode::Vanilla => Sampler::Vanilla,
        RansacMode::Crv => {
            let mut by_element: Vec<Vec<usize>> = vec![Vec::new(); 60];
            for (i, c) in correspondences.iter().enumerate() {
                by_element[c.coarse_rotation.index()].push(i);
            }
            let buckets: Vec<Vec<usize>> = by_element
                .into_iter()
                .filter(|b| b.len() >= 3)
                .collect();
            if buckets.is_empty() {
                crv_fallback = true;
                Sampler::Vanilla
            } else {
                let mut cumulative = Vec::with_capacity(buckets.len());
                let mut total = 0.0;
                for b in &buckets {
                    total += triplet_count(b.len());
                    cumulative.push(total);
                }
                Sampler::Crv { buckets, cumulative }
            }
        }
        RansacMode::Ose => {
            let mut order: Vec<usize> = (0..correspondences.len()).collect();
            // Fisher-Yates; the full permutation is generated up front so a
            // larger budget only extends the evaluated prefix.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            Sampler::Ose { order }
        }
    };

    let budget = match &sampler {
        Sampler::Ose { order } => config.max_iterations.min(order.len()),
        _ => config.max_iterations,
    };

    let mut best: Option<(usize, usize, RigidTransform)> = None; // (count, index, t)
    let mut trace = Vec::new();

    for it in 0..budget {
        let hypothesis: Option<RigidTransform> = match &sampler {
            Sampler::Ose { order } => {
                let c = &correspondences[order[it]];
                let rotation = c.rotation_hypothesis(group);
                let translation = c.q - rotation * c.p;
                Some(RigidTransform::new(rotation, translation))
            }
            Sampler::Vanilla => {
                let triplet = sample_distinct_triplet(&mut rng, correspondences.len());
                fit_triplet(correspondences, &triplet, config)
            }
            Sampler::Crv { buckets, cumulative } => {
                let total = *cumulative.last().unwrap();
                let u: f64 = rng.random_range(0.0..total);
                let b = cumulative.partition_point(|&c| c <= u).min(buckets.len() - 1);
                let bucket = &buckets[b];
                let local = sample_distinct_triplet(&mut rng, bucket.len());
                let triplet = [bucket[local[0]], bucket[local[1]], bucket[local[2]]];
                fit_triplet(correspondences, &triplet, config)
            }
        };

        if let Some(t) = &hypothesis {
            let count = inlier_count(t, correspondences, config.inlier_threshold);
            let better = match &best {
                None => count > 0,
                Some((best_count, _, _)) => count > *best_count,
            };
            if better {
                best = Some((count, it, *t));
            }
        }
        if config.trace {
            trace.push(hypothesis);
        }
    }

    let (hypothesis_inliers, transform) = match &best {
        Some((count, _, t)) => (*count, *t),
        None => (0, RigidTransform::identity()),
    };

    let mut final_transform = transform;
    if config.refit {
        let inliers = count_inliers(&final_transform, correspondences, config.inlier_threshold);
        if inliers.len() >= 3 {
            let src: Vec<_> = inliers.iter().map(|&i| correspondences[i].p).collect();
            let dst: Vec<_> = inliers.iter().map(|&i| correspondences[i].q).collect();
            if let Ok(refit) = kabsch(&src, &dst) {
                final_transform = refit;
            }
        }
    }
    let inlier_indices = count_inliers(&final_transform, correspondences, config.inlier_threshold);

    Ok(RegistrationResult {
        transform: final_transform,
        inlier_indices,
        hypotheses_evaluated: budget,
        seed: config.seed,
        hypothesis_inliers,
        crv_fallback,
        trace,
    })
}

fn triplet_count(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) * (n - 2.0) / 6.0
}

fn sample_distinct_triplet(rng: &mut ChaCha20Rng, n: usize) -> [usize; 3] {
    let mut out = [0usize; 3];
    out[0] = rng.random_range(0..n);
    loop {
        out[1] = rng.random_range(0..n);
        if out[1] != out[0] {
            break;
        }
    }
    loop {
        out[2] = rng.random_range(0..n);
        if out[2] != out[0] && out[2] != out[1] {
            break;
        }
    }
    out
}

fn fit_triplet(
    correspondences: &[Correspondence],
    triplet: &[usize; 3],
    config: &RansacConfig,
) -> Option<RigidTransform> {
    if config.distance_check {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let ca = &correspondences[triplet[a]];
            let cb = &correspondences[triplet[b]];
            let dp = (ca.p - cb.p).norm();
            let dq = (ca.q - cb.q).norm();
            if (dp - dq).abs() > 2.0 * config.inlier_threshold {
                return None;
            }
        }
    }
    let src: Vec<_> = triplet.iter().map(|&i| correspondences[i].p).collect();
    let dst: Vec<_> = triplet.iter().map(|&i| correspondences[i].q).collect();
    kabsch(&src, &dst).ok()
}
