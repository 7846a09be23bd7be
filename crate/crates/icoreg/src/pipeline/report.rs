//! Benchmark report: a versioned, self-describing JSON document plus a
//! plain-text summary table. Aggregates are recomputable from the per-pair
//! records.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PairEvaluation;

use super::config::BenchmarkConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialOutcome {
    pub registration_correct: bool,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub rr_distance: f64,
    pub iterations_to_success: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairOutcome {
    pub pair_index: usize,
    /// Per-pair stage failure; the pipeline keeps going.
    pub error: Option<String>,
    pub matches: usize,
    pub inlier_ratio: f64,
    pub trials: Vec<TrialOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModeReport {
    pub mode: String,
    pub pairs: Vec<PairOutcome>,
    pub fmr: f64,
    pub mean_inlier_ratio: f64,
    /// Registration recall per trial, and its mean and standard deviation.
    pub rr_per_trial: Vec<f64>,
    pub rr_mean: f64,
    pub rr_std: f64,
    pub success_curve: Vec<(usize, f64)>,
    /// Mean alignment time per pair (t2), seconds.
    pub align_seconds_per_pair: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: BenchmarkConfig,
    /// Mean feature extraction time per cloud (t1), seconds.
    pub feature_seconds_per_cloud: f64,
    pub total_seconds: f64,
    pub failed_pairs: usize,
    pub modes: Vec<ModeReport>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: BenchmarkReport = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("report parse: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported report schema {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "benchmark: {} pairs, {} trials, {} keypoints, {} iterations, seed {}",
            self.config.pairs,
            self.config.trials,
            self.config.keypoints,
            self.config.iterations,
            self.config.seed
        );
        let _ = writeln!(
            out,
            "timing: t1 {:.3} s/cloud, total {:.1} s, failed pairs {}",
            self.feature_seconds_per_cloud, self.total_seconds, self.failed_pairs
        );
        let _ = writeln!(
            out,
            "{:<9} {:>7} {:>7} {:>9} {:>9} {:>12}",
            "mode", "FMR", "IR", "RR mean", "RR std", "t2 (s/pair)"
        );
        for mode in &self.modes {
            let _ = writeln!(
                out,
                "{:<9} {:>7.3} {:>7.3} {:>9.3} {:>9.3} {:>12.4}",
                mode.mode,
                mode.fmr,
                mode.mean_inlier_ratio,
                mode.rr_mean,
                mode.rr_std,
                mode.align_seconds_per_pair
            );
        }
        out
    }

    /// Success-curve rows as plot-ready CSV columns.
    pub fn success_curve_csv(&self) -> String {
        let mut out = String::from("mode,iterations,fraction\n");
        for mode in &self.modes {
            for (n, f) in &mode.success_curve {
                let _ = writeln!(out, "{},{},{}", mode.mode, n, f);
            }
        }
        out
    }
}

/// Builds the per-mode aggregate block from pair outcomes.
pub fn aggregate_mode(
    mode: String,
    pairs: Vec<PairOutcome>,
    budgets: &[usize],
    align_seconds_per_pair: f64,
) -> ModeReport {
    let scored: Vec<&PairOutcome> = pairs.iter().filter(|p| p.error.is_none()).collect();
    let n_pairs = scored.len().max(1) as f64;
    let irs: Vec<f64> = scored.iter().map(|p| p.inlier_ratio).collect();
    let fmr = crate::metrics::fmr(&irs, crate::metrics::FMR_DEFAULT_THRESHOLD);
    let mean_ir = irs.iter().sum::<f64>() / n_pairs;

    let trials = scored.first().map_or(0, |p| p.trials.len());
    let mut rr_per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        let correct = scored
            .iter()
            .filter(|p| p.trials.get(t).map(|tr| tr.registration_correct) == Some(true))
            .count();
        rr_per_trial.push(correct as f64 / n_pairs);
    }
    let rr_mean = if rr_per_trial.is_empty() {
        0.0
    } else {
        rr_per_trial.iter().sum::<f64>() / rr_per_trial.len() as f64
    };
    let rr_std = if rr_per_trial.len() < 2 {
        0.0
    } else {
        let var = rr_per_trial
            .iter()
            .map(|r| (r - rr_mean) * (r - rr_mean))
            .sum::<f64>()
            / (rr_per_trial.len() - 1) as f64;
        var.sqrt()
    };

    let first_trial_iters: Vec<Option<usize>> = scored
        .iter()
        .map(|p| p.trials.first().and_then(|t| t.iterations_to_success))
        .collect();
    let success_curve = crate::metrics::success_curve(&first_trial_iters, budgets);

    ModeReport {
        mode,
        pairs,
        fmr,
        mean_inlier_ratio: mean_ir,
        rr_per_trial,
        rr_mean,
        rr_std,
        success_curve,
        align_seconds_per_pair,
    }
}

/// A `PairEvaluation` view of one pair's first trial, used by tests.
pub fn pair_evaluation(outcome: &PairOutcome) -> Option<PairEvaluation> {
    outcome.trials.first().map(|t| PairEvaluation {
        inlier_ratio: outcome.inlier_ratio,
        registration_correct: t.registration_correct,
        rotation_error_deg: t.rotation_error_deg,
        translation_error: t.translation_error,
        iterations_to_success: t.iterations_to_success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> BenchmarkReport {
        let pairs = vec![
            PairOutcome {
                pair_index: 0,
                error: None,
                matches: 100,
                inlier_ratio: 0.4,
                trials: vec![TrialOutcome {
                    registration_correct: true,
                    rotation_error_deg: 0.5,
                    translation_error: 0.01,
                    rr_distance: 0.02,
                    iterations_to_success: Some(3),
                }],
            },
            PairOutcome {
                pair_index: 1,
                error: Some("too few correspondences".into()),
                matches: 1,
                inlier_ratio: 0.0,
                trials: vec![],
            },
        ];
        let mode = aggregate_mode("ose".into(), pairs, &[1, 10, 100], 0.05);
        BenchmarkReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: BenchmarkConfig::default(),
            feature_seconds_per_cloud: 1.5,
            total_seconds: 30.0,
            failed_pairs: 1,
            modes: vec![mode],
        }
    }

    #[test]
    fn json_roundtrip_is_identity() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let parsed = BenchmarkReport::from_json(&json).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn bad_schema_version_is_rejected() {
        let mut report = sample_report();
        report.schema_version = 99;
        let json = serde_json::to_string(&report).unwrap();
        assert!(BenchmarkReport::from_json(&json).is_err());
    }

    #[test]
    fn aggregates_rederivable_from_pairs() {
        let report = sample_report();
        let mode = &report.modes[0];
        let scored: Vec<_> = mode.pairs.iter().filter(|p| p.error.is_none()).collect();
        let irs: Vec<f64> = scored.iter().map(|p| p.inlier_ratio).collect();
        assert_eq!(
            mode.fmr,
            crate::metrics::fmr(&irs, crate::metrics::FMR_DEFAULT_THRESHOLD)
        );
        let rr0 = scored
            .iter()
            .filter(|p| p.trials[0].registration_correct)
            .count() as f64
            / scored.len() as f64;
        assert_eq!(mode.rr_per_trial[0], rr0);
    }

    #[test]
    fn summary_table_mentions_all_modes() {
        let report = sample_report();
        let table = report.summary_table();
        assert!(table.contains("ose"));
        assert!(table.contains("FMR"));
        assert!(report.success_curve_csv().starts_with("mode,iterations,fraction"));
    }
}
