//! Machine-readable run reports: recovered offsets with their errors,
//! score tables, loss-trace summaries and evaluation metrics.
//!
//! Reports are reproducible: identical config and seed produce identical
//! bytes except for `generated_at_unix_ms`, which is excluded from any
//! determinism comparison.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::RunConfig;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraReport {
    pub camera: usize,
    pub gt_offset: f64,
    /// Integer frame offset recovered by the coarse stage.
    pub coarse_offset: i32,
    /// Continuous residual recovered by the fine stage.
    pub fine_offset: f64,
    /// `coarse_offset + fine_offset`.
    pub recovered_offset: f64,
    /// `|recovered_offset - gt_offset|`.
    pub abs_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreTableReport {
    pub camera: usize,
    pub offsets: Vec<i32>,
    pub totals: Vec<u64>,
    pub per_frame: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossTraceSummary {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub tool_version: String,
    pub mode: String,
    pub seed: u64,
    pub reference_camera: usize,
    pub cameras: Vec<CameraReport>,
    /// Cameras whose coarse search produced no signal (fell back to 0).
    pub no_signal_cameras: Vec<usize>,
    pub score_tables: Vec<ScoreTableReport>,
    pub loss_trace_summary: Option<LossTraceSummary>,
    pub config: RunConfig,
    /// Wall clock; not part of the deterministic content.
    pub generated_at_unix_ms: u64,
}

impl AlignmentReport {
    /// Checks the stored derived quantities against their definitions.
    pub fn validate(&self) -> Result<(), ReportError> {
        for c in &self.cameras {
            let recovered = c.coarse_offset as f64 + c.fine_offset;
            if (recovered - c.recovered_offset).abs() > 1e-12 {
                return Err(ReportError::Invariant(format!(
                    "camera {}: recovered_offset {} != coarse+fine {}",
                    c.camera, c.recovered_offset, recovered
                )));
            }
            let err = (recovered - c.gt_offset).abs();
            if (err - c.abs_error).abs() > 1e-12 {
                return Err(ReportError::Invariant(format!(
                    "camera {}: abs_error {} recomputes to {}",
                    c.camera, c.abs_error, err
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Loads and re-validates a report.
    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)?;
        let report: Self = serde_json::from_str(&text)?;
        report.validate()?;
        Ok(report)
    }
}

/// Per-pair image metrics under the identity and the recovered time model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMetrics {
    pub camera: usize,
    pub frame: usize,
    pub psnr_identity: f64,
    pub ssim_identity: f64,
    pub l1_identity: f64,
    pub psnr_recovered: f64,
    pub ssim_recovered: f64,
    pub l1_recovered: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tool_version: String,
    pub seed: u64,
    pub pairs: Vec<PairMetrics>,
    pub mean_psnr_identity: f64,
    pub mean_ssim_identity: f64,
    pub mean_l1_identity: f64,
    pub mean_psnr_recovered: f64,
    pub mean_ssim_recovered: f64,
    pub mean_l1_recovered: f64,
    pub generated_at_unix_ms: u64,
}

impl EvaluationReport {
    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> AlignmentReport {
        AlignmentReport {
            tool_version: "0.0.0".into(),
            mode: "full".into(),
            seed: 1,
            reference_camera: 0,
            cameras: vec![CameraReport {
                camera: 1,
                gt_offset: 3.25,
                coarse_offset: 3,
                fine_offset: 0.2,
                recovered_offset: 3.2,
                abs_error: 0.05000000000000071,
            }],
            no_signal_cameras: vec![],
            score_tables: vec![],
            loss_trace_summary: None,
            config: RunConfig::default(),
            generated_at_unix_ms: 0,
        }
    }

    #[test]
    fn validation_recomputes_errors() {
        let mut report = sample_report();
        // Store the exactly recomputed error so validation round-trips.
        report.cameras[0].abs_error =
            (report.cameras[0].recovered_offset - report.cameras[0].gt_offset).abs();
        report.validate().unwrap();

        report.cameras[0].abs_error += 1e-9;
        assert!(report.validate().is_err());

        let mut report = sample_report();
        report.cameras[0].recovered_offset = 99.0;
        assert!(report.validate().is_err());
    }

    #[test]
    fn save_load_round_trip_validates() {
        let mut report = sample_report();
        report.cameras[0].abs_error =
            (report.cameras[0].recovered_offset - report.cameras[0].gt_offset).abs();
        let dir = std::env::temp_dir().join(format!("chronosplat_report_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.json");
        report.save(&path).unwrap();
        let loaded = AlignmentReport::load(&path).unwrap();
        assert_eq!(loaded.cameras, report.cameras);
        let _ = std::fs::remove_dir_all(dir);
    }
}
