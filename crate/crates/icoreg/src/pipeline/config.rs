//! Benchmark configuration: a line-oriented key=value text file, with every
//! key overridable from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RrAverage;
use crate::ransac::RansacMode;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkConfig {
    pub pairs: usize,
    /// RANSAC repetitions per pair; recall is reported mean +- deviation.
    pub trials: usize,
    pub point_count: usize,
    pub overlap: f64,
    pub voxel: f64,
    /// Gaussian noise applied to both views, in meters.
    pub noise_sigma: f64,
    pub dropout: f64,
    pub outliers: f64,
    pub keypoints: usize,
    pub patch_radius: f64,
    pub planarity_threshold: f64,
    pub backbone_shells: usize,
    pub backbone_azimuth: usize,
    pub backbone_elevation: usize,
    pub modes: Vec<String>,
    pub iterations: usize,
    /// RANSAC inlier threshold tau.
    pub tau: f64,
    /// Correspondence correctness threshold tau_c.
    pub tau_c: f64,
    /// Registration correctness threshold tau_r.
    pub tau_r: f64,
    pub rr_mean_instead_of_rmse: bool,
    pub refit: bool,
    pub distance_check: bool,
    pub icp: bool,
    pub icp_max_iter: usize,
    pub icp_conv_tol: f64,
    pub max_angle: f64,
    pub max_translation: f64,
    pub seed: u64,
    /// 0 lets rayon pick.
    pub threads: usize,
    pub weights: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            pairs: 50,
            trials: 1,
            point_count: 6000,
            overlap: 0.7,
            voxel: 0.025,
            noise_sigma: 0.0125,
            dropout: 0.0,
            outliers: 0.0,
            keypoints: 250,
            patch_radius: 0.15,
            planarity_threshold: 0.03,
            backbone_shells: 4,
            backbone_azimuth: 4,
            backbone_elevation: 2,
            modes: vec!["vanilla".into(), "crv".into(), "ose".into()],
            iterations: 1000,
            tau: 0.1,
            tau_c: 0.1,
            tau_r: 0.2,
            rr_mean_instead_of_rmse: false,
            refit: true,
            distance_check: false,
            icp: false,
            icp_max_iter: 50,
            icp_conv_tol: 1e-6,
            max_angle: std::f64::consts::PI,
            max_translation: 1.0,
            seed: 0,
            threads: 0,
            weights: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn rr_average(&self) -> RrAverage {
        if self.rr_mean_instead_of_rmse {
            RrAverage::Mean
        } else {
            RrAverage::Rmse
        }
    }

    pub fn parsed_modes(&self) -> Result<Vec<RansacMode>> {
        self.modes
            .iter()
            .map(|m| match m.as_str() {
                "vanilla" => Ok(RansacMode::Vanilla),
                "crv" => Ok(RansacMode::Crv),
                "ose" => Ok(RansacMode::Ose),
                other => Err(Error::Config(format!("unknown mode '{other}'"))),
            })
            .collect()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = BenchmarkConfig::default();
        cfg.apply_kv_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "pairs" => self.pairs = parse(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "point_count" => self.point_count = parse(key, value)?,
            "overlap" => self.overlap = parse(key, value)?,
            "voxel" => self.voxel = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "outliers" => self.outliers = parse(key, value)?,
            "keypoints" => self.keypoints = parse(key, value)?,
            "patch_radius" => self.patch_radius = parse(key, value)?,
            "planarity_threshold" => self.planarity_threshold = parse(key, value)?,
            "backbone_shells" => self.backbone_shells = parse(key, value)?,
            "backbone_azimuth" => self.backbone_azimuth = parse(key, value)?,
            "backbone_elevation" => self.backbone_elevation = parse(key, value)?,
            "modes" => {
                self.modes = value
                    .split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect();
                self.parsed_modes()?;
            }
            "iterations" => self.iterations = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "tau_c" => self.tau_c = parse(key, value)?,
            "tau_r" => self.tau_r = parse(key, value)?,
            "rr_mean_instead_of_rmse" => self.rr_mean_instead_of_rmse = parse(key, value)?,
            "refit" => self.refit = parse(key, value)?,
            "distance_check" => self.distance_check = parse(key, value)?,
            "icp" => self.icp = parse(key, value)?,
            "icp_max_iter" => self.icp_max_iter = parse(key, value)?,
            "icp_conv_tol" => self.icp_conv_tol = parse(key, value)?,
            "max_angle" => self.max_angle = parse(key, value)?,
            "max_translation" => self.max_translation = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "weights" => self.weights = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// The paper-scale preset: 5000 keypoints on denser clouds.
    pub fn paper_scale() -> Self {
        BenchmarkConfig {
            point_count: 40_000,
            keypoints: 5000,
            ..BenchmarkConfig::default()
        }
    }

    pub fn to_kv_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("pairs", self.pairs.to_string());
        kv.insert("trials", self.trials.to_string());
        kv.insert("point_count", self.point_count.to_string());
        kv.insert("overlap", self.overlap.to_string());
        kv.insert("voxel", self.voxel.to_string());
        kv.insert("noise_sigma", self.noise_sigma.to_string());
        kv.insert("dropout", self.dropout.to_string());
        kv.insert("outliers", self.outliers.to_string());
        kv.insert("keypoints", self.keypoints.to_string());
        kv.insert("patch_radius", self.patch_radius.to_string());
        kv.insert("planarity_threshold", self.planarity_threshold.to_string());
        kv.insert("backbone_shells", self.backbone_shells.to_string());
        kv.insert("backbone_azimuth", self.backbone_azimuth.to_string());
        kv.insert("backbone_elevation", self.backbone_elevation.to_string());
        kv.insert("modes", self.modes.join(","));
        kv.insert("iterations", self.iterations.to_string());
        kv.insert("tau", self.tau.to_string());
        kv.insert("tau_c", self.tau_c.to_string());
        kv.insert("tau_r", self.tau_r.to_string());
        kv.insert(
            "rr_mean_instead_of_rmse",
            self.rr_mean_instead_of_rmse.to_string(),
        );
        kv.insert("refit", self.refit.to_string());
        kv.insert("distance_check", self.distance_check.to_string());
        kv.insert("icp", self.icp.to_string());
        kv.insert("icp_max_iter", self.icp_max_iter.to_string());
        kv.insert("icp_conv_tol", self.icp_conv_tol.to_string());
        kv.insert("max_angle", self.max_angle.to_string());
        kv.insert("max_translation", self.max_translation.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("threads", self.threads.to_string());
        if let Some(w) = &self.weights {
            kv.insert("weights", w.display().to_string());
        }
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_roundtrip() {
        let mut cfg = BenchmarkConfig::default();
        cfg.pairs = 7;
        cfg.modes = vec!["ose".into()];
        cfg.weights = Some(PathBuf::from("w.bin"));
        let text = cfg.to_kv_text();
        let mut parsed = BenchmarkConfig::default();
        parsed.apply_kv_text(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blank_lines_ok() {
        let mut cfg = BenchmarkConfig::default();
        cfg.apply_kv_text("# comment\n\npairs = 3   # trailing\nseed=9\n")
            .unwrap();
        assert_eq!(cfg.pairs, 3);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_and_bad_value_error() {
        let mut cfg = BenchmarkConfig::default();
        assert!(cfg.apply_kv_text("nonsense=1\n").is_err());
        assert!(cfg.apply_kv_text("pairs=many\n").is_err());
        assert!(cfg.apply_kv_text("modes=warp\n").is_err());
    }
}
