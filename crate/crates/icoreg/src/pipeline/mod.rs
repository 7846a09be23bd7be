//! End-to-end orchestration: synthetic benchmarks, feature extraction over
//! whole clouds, correspondence building, and the report files. All
//! randomness is derived from per-pair seeds, so results do not depend on
//! thread scheduling.

pub mod config;
pub mod features_io;
pub mod ply;
pub mod report;
pub mod synth;

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::backbone::{extract_patch_with_tree, Backbone, BackboneSpec, SoftHistogramBackbone};
use crate::error::{Error, Result};
use crate::geom::{
    apply_transform, icp, planarity_filter, voxel_downsample, PointCloud, RigidTransform,
};
use crate::groupnet::{describe_patch, Descriptor, GroupFeature, NetworkWeights, TrainPair};
use crate::icosa::{icosahedral_group, IcosahedralGroup};
use crate::kdtree::KdTree;
use crate::matching::{coarse_rotation, match_mutual_nn, refine_rotation, Correspondence};
use crate::metrics::{
    correspondence_eval, first_success_iteration, pose_error, rr, rr_distance,
};
use crate::ransac::{run_ransac, RansacConfig};

pub use config::BenchmarkConfig;
pub use report::{aggregate_mode, BenchmarkReport, ModeReport, PairOutcome, TrialOutcome};
pub use synth::{
    make_patch_pairs, measure_overlap, perturb_patch, sample_scene, stage_seed,
    synth_correspondences, synth_pair, CorrespondenceSetConfig, PatchPair, PatchPairConfig,
    PatchPerturbation, SynthConfig,
};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV_VAR: &str = "ICOREG_THREADS";

/// Extracted features for the keypoints of one cloud.
#[derive(Debug, Clone)]
pub struct CloudFeatures {
    /// Indices into the (downsampled) cloud the features were taken from.
    pub keypoint_indices: Vec<usize>,
    pub positions: Vec<Vector3<f64>>,
    pub f0: Vec<GroupFeature>,
    pub fl: Vec<GroupFeature>,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Debug, Clone)]
pub struct FeatureParams {
    pub keypoints: usize,
    pub patch_radius: f64,
    pub planarity_threshold: f64,
    pub backbone: BackboneSpec,
    pub seed: u64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            keypoints: 500,
            patch_radius: 0.15,
            planarity_threshold: 0.03,
            backbone: BackboneSpec::default(),
            seed: 0,
        }
    }
}

/// Deterministic inference weights when no trained file is supplied.
pub fn default_weights(backbone: &BackboneSpec) -> NetworkWeights {
    NetworkWeights::identity_passthrough(backbone.output_dim())
}

/// Samples keypoints (uniform without replacement, then the planarity
/// filter), extracts a patch per keypoint and describes it. Keypoints with
/// an empty patch are dropped.
pub fn extract_cloud_features(
    group: &IcosahedralGroup,
    cloud: &PointCloud,
    params: &FeatureParams,
    weights: &NetworkWeights,
) -> Result<CloudFeatures> {
    if cloud.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut indices: Vec<usize> = (0..cloud.len()).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    indices.truncate(params.keypoints.min(cloud.len()));
    indices.sort_unstable();
    let keypoints = planarity_filter(
        cloud,
        &indices,
        params.patch_radius,
        params.planarity_threshold,
    );

    let tree = KdTree::from_points3(&cloud.points);
    let backbone = SoftHistogramBackbone {
        spec: params.backbone,
    };
    let described: Vec<Option<(usize, GroupFeature, GroupFeature, Descriptor)>> = keypoints
        .par_iter()
        .map(|&k| {
            let patch = extract_patch_with_tree(cloud, &tree, k, params.patch_radius).ok()?;
            let (f0, fl, d) = describe_patch(&patch, group, &backbone, weights).ok()?;
            Some((k, f0, fl, d))
        })
        .collect();

    let mut features = CloudFeatures {
        keypoint_indices: Vec::new(),
        positions: Vec::new(),
        f0: Vec::new(),
        fl: Vec::new(),
        descriptors: Vec::new(),
    };
    for item in described.into_iter().flatten() {
        let (k, f0, fl, d) = item;
        features.keypoint_indices.push(k);
        features.positions.push(cloud.points[k]);
        features.f0.push(f0);
        features.fl.push(fl);
        features.descriptors.push(d);
    }
    if features.positions.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    Ok(features)
}

/// Mutual-NN matching plus per-correspondence rotation estimation. The
/// refined rotation is attached when the weights carry a regressor.
pub fn build_correspondences(
    group: &IcosahedralGroup,
    feats_p: &CloudFeatures,
    feats_q: &CloudFeatures,
    weights: &NetworkWeights,
) -> Result<Vec<Correspondence>> {
    let matches = match_mutual_nn(&feats_p.descriptors, &feats_q.descriptors)?;
    matches
        .par_iter()
        .map(|m| {
            let coarse = coarse_rotation(group, &feats_p.fl[m.p_index], &feats_q.fl[m.q_index])?;
            let refined = if weights.regressor.is_some() {
                Some(refine_rotation(
                    group,
                    &feats_p.f0[m.p_index],
                    &feats_p.fl[m.p_index],
                    &feats_q.f0[m.q_index],
                    &feats_q.fl[m.q_index],
                    coarse,
                    weights,
                )?)
            } else {
                None
            };
            Ok(Correspondence {
                p_index: m.p_index,
                q_index: m.q_index,
                p: feats_p.positions[m.p_index],
                q: feats_q.positions[m.q_index],
                desc_dist: m.desc_dist,
                coarse_rotation: coarse,
                refined_rotation: refined,
            })
        })
        .collect()
}

/// Converts patch pairs into layer-0 training pairs (backbone evaluations
/// only; the trainable stack starts above f0).
pub fn patch_pairs_to_train_pairs(
    group: &IcosahedralGroup,
    backbone: &dyn Backbone,
    pairs: &[PatchPair],
) -> Result<Vec<TrainPair>> {
    pairs
        .par_iter()
        .map(|pair| {
            let f0_anchor =
                crate::groupnet::extract_group_feature(&pair.anchor, group, backbone)?;
            let f0_positive =
                crate::groupnet::extract_group_feature(&pair.positive, group, backbone)?;
            Ok(TrainPair {
                f0_anchor,
                f0_positive,
                g_plus: pair.g_plus,
                rotation: pair.rotation,
            })
        })
        .collect()
}

/// Log-spaced budgets for the success curve, capped at the iteration count.
fn curve_budgets(max_iterations: usize) -> Vec<usize> {
    let base = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000];
    let mut budgets: Vec<usize> = base.iter().copied().filter(|&b| b < max_iterations).collect();
    budgets.push(max_iterations);
    budgets
}

struct PairComputation {
    outcomes: Vec<PairOutcome>, // one per mode
    feature_seconds: f64,
    align_seconds: Vec<f64>, // per mode
}

/// Runs the full synthetic benchmark described by `cfg`.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let modes = cfg.parsed_modes()?;
    let weights = match &cfg.weights {
        Some(path) => crate::groupnet::load_weights(path)?,
        None => default_weights(&BackboneSpec::new(
            cfg.backbone_shells,
            cfg.backbone_azimuth,
            cfg.backbone_elevation,
        )),
    };
    let group = icosahedral_group();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let computations: Vec<PairComputation> = pool.install(|| {
        (0..cfg.pairs)
            .into_par_iter()
            .map(|pair_index| run_pair(group, cfg, &modes, &weights, pair_index))
            .collect()
    });

    let budgets = curve_budgets(cfg.iterations);
    let mut mode_reports = Vec::with_capacity(modes.len());
    for (m_idx, mode) in modes.iter().enumerate() {
        let pairs: Vec<PairOutcome> = computations
            .iter()
            .map(|c| c.outcomes[m_idx].clone())
            .collect();
        let align: f64 = computations
            .iter()
            .map(|c| c.align_seconds[m_idx])
            .sum::<f64>()
            / cfg.pairs.max(1) as f64;
        mode_reports.push(aggregate_mode(mode.to_string(), pairs, &budgets, align));
    }
    let feature_seconds = computations
        .iter()
        .map(|c| c.feature_seconds)
        .sum::<f64>()
        / (2 * cfg.pairs.max(1)) as f64;
    let failed_pairs = computations
        .iter()
        .filter(|c| c.outcomes.iter().any(|o| o.error.is_some()))
        .count();

    Ok(BenchmarkReport {
        schema_version: report::REPORT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        feature_seconds_per_cloud: feature_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        failed_pairs,
        modes: mode_reports,
    })
}

fn run_pair(
    group: &IcosahedralGroup,
    cfg: &BenchmarkConfig,
    modes: &[crate::ransac::RansacMode],
    weights: &NetworkWeights,
    pair_index: usize,
) -> PairComputation {
    let fail = |message: String| PairComputation {
        outcomes: modes
            .iter()
            .map(|_| PairOutcome {
                pair_index,
                error: Some(message.clone()),
                matches: 0,
                inlier_ratio: 0.0,
                trials: vec![],
            })
            .collect(),
        feature_seconds: 0.0,
        align_seconds: vec![0.0; modes.len()],
    };

    let pair_seed = stage_seed(cfg.seed, 10_000 + pair_index as u64);
    let synth_cfg = SynthConfig {
        base_shape: pair_index as u32,
        point_count: cfg.point_count,
        overlap_fraction: cfg.overlap,
        noise_sigma: cfg.noise_sigma,
        dropout_fraction: cfg.dropout,
        outlier_fraction: cfg.outliers,
        max_angle: cfg.max_angle,
        max_translation: cfg.max_translation,
        seed: pair_seed,
    };
    let (p_raw, q_raw, truth) = match synth_pair(&synth_cfg) {
        Ok(v) => v,
        Err(e) => return fail(format!("synth: {e}")),
    };
    let (p, q) = match (
        voxel_downsample(&p_raw, cfg.voxel),
        voxel_downsample(&q_raw, cfg.voxel),
    ) {
        (Ok(p), Ok(q)) => (p, q),
        (Err(e), _) | (_, Err(e)) => return fail(format!("voxel: {e}")),
    };

    let feature_start = Instant::now();
    let params = |seed: u64| FeatureParams {
        keypoints: cfg.keypoints,
        patch_radius: cfg.patch_radius,
        planarity_threshold: cfg.planarity_threshold,
        backbone: BackboneSpec::new(
            cfg.backbone_shells,
            cfg.backbone_azimuth,
            cfg.backbone_elevation,
        ),
        seed,
    };
    let feats_p = match extract_cloud_features(group, &p, &params(stage_seed(pair_seed, 50)), weights)
    {
        Ok(f) => f,
        Err(e) => return fail(format!("features P: {e}")),
    };
    let feats_q = match extract_cloud_features(group, &q, &params(stage_seed(pair_seed, 51)), weights)
    {
        Ok(f) => f,
        Err(e) => return fail(format!("features Q: {e}")),
    };
    let feature_seconds = feature_start.elapsed().as_secs_f64();

    let correspondences = match build_correspondences(group, &feats_p, &feats_q, weights) {
        Ok(c) => c,
        Err(e) => return fail(format!("matching: {e}")),
    };
    let inlier_ratio = correspondence_eval(&correspondences, &truth, cfg.tau_c);
    let eval_points = PointCloud {
        points: feats_p.positions.clone(),
    };

    let mut outcomes = Vec::with_capacity(modes.len());
    let mut align_seconds = Vec::with_capacity(modes.len());
    for (m_idx, &mode) in modes.iter().enumerate() {
        let align_start = Instant::now();
        let mut trials = Vec::with_capacity(cfg.trials);
        let mut mode_error: Option<String> = None;
        for trial in 0..cfg.trials {
            let ransac_cfg = RansacConfig {
                mode,
                max_iterations: cfg.iterations,
                inlier_threshold: cfg.tau,
                seed: stage_seed(pair_seed, 100 + (m_idx as u64) * 1000 + trial as u64),
                refit: cfg.refit,
                distance_check: cfg.distance_check,
                trace: true,
            };
            let result = match run_ransac(group, &correspondences, &ransac_cfg) {
                Ok(r) => r,
                Err(e) => {
                    mode_error = Some(format!("ransac ({mode}): {e}"));
                    break;
                }
            };
            let mut transform = result.transform;
            if cfg.icp {
                match icp(&p, &q, &transform, cfg.icp_max_iter, cfg.icp_conv_tol) {
                    Ok(refined) => transform = refined.transform,
                    Err(e) => {
                        mode_error = Some(format!("icp: {e}"));
                        break;
                    }
                }
            }
            let average = cfg.rr_average();
            let correct = rr(&transform, &truth, &eval_points, cfg.tau_r, average);
            let (rot_err, trans_err) = pose_error(&transform, &truth);
            trials.push(TrialOutcome {
                registration_correct: correct,
                rotation_error_deg: rot_err,
                translation_error: trans_err,
                rr_distance: rr_distance(&transform, &truth, &eval_points, average),
                iterations_to_success: first_success_iteration(
                    &result.trace,
                    &truth,
                    &eval_points,
                    cfg.tau_r,
                    average,
                ),
            });
        }
        align_seconds.push(align_start.elapsed().as_secs_f64() / cfg.trials.max(1) as f64);
        outcomes.push(PairOutcome {
            pair_index,
            error: mode_error,
            matches: correspondences.len(),
            inlier_ratio,
            trials,
        });
    }

    PairComputation {
        outcomes,
        feature_seconds,
        align_seconds,
    }
}

// ---------------------------------------------------------------------------
// small text formats used by the command-line interface
// ---------------------------------------------------------------------------

/// Writes a rigid transform as three rows of `r r r t`.
pub fn write_transform(path: &std::path::Path, t: &RigidTransform) -> Result<()> {
    let mut text = String::new();
    for row in 0..3 {
        text.push_str(&format!(
            "{:.17e} {:.17e} {:.17e} {:.17e}\n",
            t.rotation[(row, 0)],
            t.rotation[(row, 1)],
            t.rotation[(row, 2)],
            t.translation[row],
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_transform(path: &std::path::Path) -> Result<RigidTransform> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{t}' in transform file")))
        })
        .collect::<Result<_>>()?;
    if values.len() != 12 {
        return Err(Error::Config(format!(
            "transform file must hold 12 numbers, got {}",
            values.len()
        )));
    }
    let mut rotation = Matrix3::zeros();
    let mut translation = Vector3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            rotation[(row, col)] = values[row * 4 + col];
        }
        translation[row] = values[row * 4 + 3];
    }
    if !crate::so3::is_rotation(&rotation, 1e-6) {
        return Err(Error::InvalidRotation(
            "transform file rotation is not orthonormal".into(),
        ));
    }
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Writes correspondences as a line-oriented text file.
pub fn write_correspondences(path: &std::path::Path, corrs: &[Correspondence]) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::from("icoreg-correspondences v1\n");
    let _ = writeln!(text, "count {}", corrs.len());
    for c in corrs {
        let _ = write!(
            text,
            "{} {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {}",
            c.p_index,
            c.q_index,
            c.p.x,
            c.p.y,
            c.p.z,
            c.q.x,
            c.q.y,
            c.q.z,
            c.desc_dist,
            c.coarse_rotation.index(),
        );
        match &c.refined_rotation {
            None => {
                let _ = writeln!(text, " -");
            }
            Some(r) => {
                for row in 0..3 {
                    for col in 0..3 {
                        let _ = write!(text, " {:.17e}", r[(row, col)]);
                    }
                }
                let _ = writeln!(text);
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_correspondences(path: &std::path::Path) -> Result<Vec<Correspondence>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("icoreg-correspondences v1") {
        return Err(Error::Config("bad correspondences header".into()));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Config("bad correspondences count line".into()))?;
    let mut corrs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Config("truncated correspondences file".into()))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 11 && tokens.len() != 19 {
            return Err(Error::Config(format!(
                "correspondence row has {} fields",
                tokens.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            tokens[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad number '{}'", tokens[i])))
        };
        let rc: u8 = tokens[9]
            .parse()
            .map_err(|_| Error::Config("bad coarse rotation index".into()))?;
        if rc >= 60 {
            return Err(Error::Config(format!("rotation index {rc} out of range")));
        }
        let refined = if tokens[10] == "-" {
            None
        } else {
            let mut r = Matrix3::zeros();
            for row in 0..3 {
                for col in 0..3 {
                    r[(row, col)] = num(10 + row * 3 + col)?;
                }
            }
            Some(r)
        };
        corrs.push(Correspondence {
            p_index: tokens[0]
                .parse()
                .map_err(|_| Error::Config("bad p_index".into()))?,
            q_index: tokens[1]
                .parse()
                .map_err(|_| Error::Config("bad q_index".into()))?,
            p: Vector3::new(num(2)?, num(3)?, num(4)?),
            q: Vector3::new(num(5)?, num(6)?, num(7)?),
            desc_dist: num(8)?,
            coarse_rotation: crate::icosa::GroupElement(rc),
            refined_rotation: refined,
        });
    }
    Ok(corrs)
}

/// Measures the fraction of correspondences consistent with the ground
/// truth after applying a transform; convenience for examples and tests.
pub fn registration_quality(
    estimate: &RigidTransform,
    truth: &RigidTransform,
    cloud: &PointCloud,
) -> f64 {
    let est = apply_transform(estimate, cloud);
    let want = apply_transform(truth, cloud);
    let sq: f64 = est
        .points
        .iter()
        .zip(&want.points)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    (sq / cloud.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_transform;
    use crate::icosa::GroupElement;

    #[test]
    fn transform_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let t = random_transform(5, 2.0, 1.0);
        write_transform(&path, &t).unwrap();
        let got = read_transform(&path).unwrap();
        assert!((got.rotation - t.rotation).abs().max() <= 1e-15);
        assert!((got.translation - t.translation).amax() <= 1e-15);
    }

    #[test]
    fn correspondence_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let t = random_transform(6, 1.0, 0.5);
        let corrs = vec![
            Correspondence {
                p_index: 3,
                q_index: 9,
                p: Vector3::new(0.1, 0.2, 0.3),
                q: Vector3::new(-1.0, 2.0, 0.0),
                desc_dist: 0.25,
                coarse_rotation: GroupElement(17),
                refined_rotation: Some(t.rotation),
            },
            Correspondence {
                p_index: 4,
                q_index: 2,
                p: Vector3::new(1.0, 1.0, 1.0),
                q: Vector3::new(0.0, 0.0, 0.0),
                desc_dist: 0.5,
                coarse_rotation: GroupElement(0),
                refined_rotation: None,
            },
        ];
        write_correspondences(&path, &corrs).unwrap();
        let got = read_correspondences(&path).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].p_index, 3);
        assert_eq!(got[0].coarse_rotation, GroupElement(17));
        assert!((got[0].refined_rotation.unwrap() - t.rotation).abs().max() <= 1e-15);
        assert!(got[1].refined_rotation.is_none());
    }

    #[test]
    fn features_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let group = icosahedral_group();
        let cloud = sample_scene(0, 1500, 7);
        let params = FeatureParams {
            keypoints: 20,
            patch_radius: 0.15,
            planarity_threshold: 0.0,
            ..FeatureParams::default()
        };
        let weights = default_weights(&params.backbone);
        let feats = extract_cloud_features(group, &cloud, &params, &weights).unwrap();
        features_io::save_features(&path, &feats).unwrap();
        let got = features_io::load_features(&path).unwrap();
        assert_eq!(got.keypoint_indices, feats.keypoint_indices);
        assert_eq!(got.positions.len(), feats.positions.len());
        // payload is f32, so compare at f32 resolution
        for (a, b) in got.descriptors.iter().zip(&feats.descriptors) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let group = icosahedral_group();
        let cloud = sample_scene(1, 1200, 9);
        let params = FeatureParams {
            keypoints: 15,
            patch_radius: 0.18,
            ..FeatureParams::default()
        };
        let weights = default_weights(&params.backbone);
        let a = extract_cloud_features(group, &cloud, &params, &weights).unwrap();
        let b = extract_cloud_features(group, &cloud, &params, &weights).unwrap();
        assert_eq!(a.keypoint_indices, b.keypoint_indices);
        for (x, y) in a.descriptors.iter().zip(&b.descriptors) {
            assert_eq!(x.values, y.values);
        }
    }
}
