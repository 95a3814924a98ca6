//! End-to-end experiment harness: dataset generation, coarse/fine/full
//! alignment with reporting, evaluation metrics, and the ablation grid.
//! The CLI is a thin wrapper over these functions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::{coarse_offset_search, CoarseError, CoarseSearchConfig};
use crate::fine::{optimize_offsets, FineError, FineOptConfig, LossTrace};
use crate::io::{self, IoError, LoadedDataset};
use crate::metrics::{psnr, ssim, MetricsError};
use crate::render::{photometric_loss, render, RenderOptions};
use crate::report::{
    now_unix_ms, AlignmentReport, CameraReport, EvaluationReport, LossTraceSummary, PairMetrics,
    ReportError, ScoreTableReport,
};
use crate::rng::SplitMix64;
use crate::scene::{Camera, SceneModel, TimeModel};
use crate::synth::{generate_dataset, Dataset, SynthConfig, SynthMatcher, VideoStream};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Coarse(#[from] CoarseError),
    #[error(transparent)]
    Fine(#[from] FineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Alignment mode: which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No correction; the identity time model.
    None,
    Coarse,
    Fine,
    Full,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Coarse => "coarse",
            Mode::Fine => "fine",
            Mode::Full => "full",
        }
    }

    fn runs_coarse(&self) -> bool {
        matches!(self, Mode::Coarse | Mode::Full)
    }

    fn runs_fine(&self) -> bool {
        matches!(self, Mode::Fine | Mode::Full)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Mode::None),
            "coarse" => Ok(Mode::Coarse),
            "fine" => Ok(Mode::Fine),
            "full" => Ok(Mode::Full),
            other => Err(format!("unknown mode {other}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CoarseRunConfig {
    /// Search radius k; candidates span [-k, k].
    pub search_radius: i32,
    pub reference_frames: usize,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
}

impl Default for CoarseRunConfig {
    fn default() -> Self {
        Self {
            search_radius: 12,
            reference_frames: 5,
            ransac_iterations: 1000,
            ransac_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Every `frame_stride`-th frame of every camera is evaluated.
    pub frame_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { frame_stride: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblateConfig {
    pub tau_max_grid: Vec<f64>,
    pub methods: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            tau_max_grid: vec![3.0, 5.0, 10.0],
            methods: vec![Mode::None, Mode::Coarse, Mode::Fine, Mode::Full],
            seeds: (0..10).map(|i| 1000 + i).collect(),
        }
    }
}

/// One JSON document configures a whole run; `print-config` dumps these
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; the generator and both alignment stages derive their
    /// streams from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub coarse: CoarseRunConfig,
    pub fine: FineOptConfig,
    pub evaluate: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthConfig::default(),
            coarse: CoarseRunConfig::default(),
            fine: FineOptConfig::default(),
            evaluate: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let cfg: RunConfig = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.synth
            .validate()
            .map_err(PipelineError::Config)?;
        if self.synth.n_frames < 2 * self.coarse.search_radius.max(0) as usize + 2 {
            return Err(PipelineError::Config(format!(
                "n_frames {} too small for coarse search radius {}",
                self.synth.n_frames, self.coarse.search_radius
            )));
        }
        self.fine.validate()?;
        if self.evaluate.frame_stride == 0 {
            return Err(PipelineError::Config("frame_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// The generator config with the run seed applied.
    pub fn effective_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    fn coarse_search_config(&self, num_frames: usize) -> Result<CoarseSearchConfig, CoarseError> {
        let mut cfg = CoarseSearchConfig::with_reference_count(
            self.coarse.search_radius,
            num_frames,
            self.coarse.reference_frames,
            SplitMix64::stream(self.seed, &[0xA11]).next_u64(),
        )?;
        cfg.ransac_iterations = self.coarse.ransac_iterations;
        cfg.ransac_threshold = self.coarse.ransac_threshold;
        Ok(cfg)
    }

    fn fine_config(&self) -> FineOptConfig {
        FineOptConfig {
            seed: SplitMix64::stream(self.seed, &[0xF1E]).next_u64(),
            ..self.fine.clone()
        }
    }
}

/// Everything an alignment run produces besides the serializable report.
pub struct AlignOutcome {
    pub report: AlignmentReport,
    pub time_model: TimeModel,
    pub loss_trace: Option<LossTrace>,
}

/// In-memory dataset view shared by the disk and generated paths.
pub struct DatasetView<'a> {
    pub scene: &'a SceneModel,
    pub rig: &'a [Camera],
    pub gt_offsets: &'a [f64],
    pub videos: &'a [VideoStream],
    pub synth_config: &'a SynthConfig,
}

impl<'a> From<&'a Dataset> for DatasetView<'a> {
    fn from(d: &'a Dataset) -> Self {
        Self {
            scene: &d.scene,
            rig: &d.rig,
            gt_offsets: &d.gt_offsets,
            videos: &d.videos,
            synth_config: &d.config,
        }
    }
}

impl<'a> From<&'a LoadedDataset> for DatasetView<'a> {
    fn from(d: &'a LoadedDataset) -> Self {
        Self {
            scene: &d.scene,
            rig: &d.rig,
            gt_offsets: &d.gt_offsets,
            videos: &d.videos,
            synth_config: &d.synth_config,
        }
    }
}

/// Runs the requested alignment stages and assembles the report.
///
/// The correspondence source is the synthetic matcher (the feature-matcher
/// stand-in); it simulates measurements on the captured frames, which is
/// the only place the ground-truth offsets enter. The search and the
/// optimizer only ever see correspondences and frames.
pub fn align(data: &DatasetView, mode: Mode, cfg: &RunConfig) -> Result<AlignOutcome, PipelineError> {
    let n_cameras = data.rig.len();
    let n_frames = data.videos.first().map_or(0, |v| v.frames.len());
    let reference = 0usize;
    let mut tm = TimeModel::identity(n_cameras, reference);
    let mut score_tables = Vec::new();
    let mut no_signal = Vec::new();

    if mode.runs_coarse() {
        let search_cfg = cfg.coarse_search_config(n_frames)?;
        for cam in 0..n_cameras {
            if cam == reference {
                continue;
            }
            let matcher = SynthMatcher::new(
                data.scene,
                data.rig,
                data.gt_offsets,
                reference,
                cam,
                data.synth_config,
            );
            match coarse_offset_search(&matcher, n_frames, &search_cfg) {
                Ok(result) => {
                    tm.set_coarse_offset(cam, result.best_offset);
                    score_tables.push(ScoreTableReport {
                        camera: cam,
                        offsets: result.table.offsets,
                        totals: result.table.totals,
                        per_frame: result.table.per_frame,
                    });
                }
                Err(CoarseError::NoSignal) => {
                    // Explicit fallback: keep 0 and report the condition.
                    tm.set_coarse_offset(cam, 0);
                    no_signal.push(cam);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    let mut loss_trace = None;
    if mode.runs_fine() {
        let fine_cfg = cfg.fine_config();
        let outcome = optimize_offsets(
            data.scene,
            data.rig,
            data.videos,
            &tm,
            &fine_cfg,
            &RenderOptions::default(),
        )?;
        tm = outcome.time_model;
        loss_trace = Some(outcome.trace);
    }

    let cameras = (0..n_cameras)
        .map(|cam| {
            let coarse_offset = tm.coarse_offsets()[cam];
            let fine_offset = tm.fine_offsets()[cam];
            let recovered = coarse_offset as f64 + fine_offset;
            CameraReport {
                camera: cam,
                gt_offset: data.gt_offsets[cam],
                coarse_offset,
                fine_offset,
                recovered_offset: recovered,
                abs_error: (recovered - data.gt_offsets[cam]).abs(),
            }
        })
        .collect();

    let report = AlignmentReport {
        tool_version: TOOL_VERSION.into(),
        mode: mode.as_str().into(),
        seed: cfg.seed,
        reference_camera: reference,
        cameras,
        no_signal_cameras: no_signal,
        score_tables,
        loss_trace_summary: loss_trace.as_ref().map(|t| LossTraceSummary {
            iterations: t.records.len(),
            initial_loss: t.records.first().map_or(0.0, |r| r.loss),
            final_loss: t.records.last().map_or(0.0, |r| r.loss),
        }),
        config: cfg.clone(),
        generated_at_unix_ms: now_unix_ms(),
    };
    report.validate()?;

    Ok(AlignOutcome {
        report,
        time_model: tm,
        loss_trace,
    })
}

/// Rebuilds the recovered time model stored in a report.
pub fn time_model_from_report(report: &AlignmentReport) -> TimeModel {
    let n = report.cameras.len();
    let mut tm = TimeModel::identity(n, report.reference_camera);
    for c in &report.cameras {
        tm.set_coarse_offset(c.camera, c.coarse_offset);
        tm.set_fine_offset(c.camera, c.fine_offset);
    }
    tm
}

/// Renders evaluation pairs under the identity and the recovered model and
/// scores them against the captured frames.
pub fn evaluate(
    data: &DatasetView,
    recovered: &TimeModel,
    cfg: &RunConfig,
) -> Result<EvaluationReport, PipelineError> {
    use rayon::prelude::*;

    let n_frames = data.videos.first().map_or(0, |v| v.frames.len());
    let identity = TimeModel::identity(data.rig.len(), recovered.reference_camera());
    let opts = RenderOptions::default();
    let mut work = Vec::new();
    for cam in 0..data.rig.len() {
        for frame in (0..n_frames).step_by(cfg.evaluate.frame_stride.max(1)) {
            work.push((cam, frame));
        }
    }

    let pairs: Vec<PairMetrics> = work
        .par_iter()
        .map(|&(cam, frame)| -> Result<PairMetrics, PipelineError> {
            let target = &data.videos[cam].frames[frame];
            let under = |tm: &TimeModel| -> Result<(f64, f64, f64), PipelineError> {
                let img = render(
                    &data.scene.gaussians,
                    &data.scene.deformations,
                    &data.rig[cam],
                    frame as f64,
                    tm,
                    cam,
                    &opts,
                );
                Ok((
                    psnr(&img, target)?,
                    ssim(&img, target)?,
                    photometric_loss(&img, target)
                        .map_err(|e| PipelineError::Config(e.to_string()))?,
                ))
            };
            let (pi, si, li) = under(&identity)?;
            let (pr, sr, lr) = under(recovered)?;
            Ok(PairMetrics {
                camera: cam,
                frame,
                psnr_identity: pi,
                ssim_identity: si,
                l1_identity: li,
                psnr_recovered: pr,
                ssim_recovered: sr,
                l1_recovered: lr,
            })
        })
        .collect::<Result<_, _>>()?;

    let mean = |f: &dyn Fn(&PairMetrics) -> f64| -> f64 {
        pairs.iter().map(|p| f(p)).sum::<f64>() / pairs.len().max(1) as f64
    };
    Ok(EvaluationReport {
        tool_version: TOOL_VERSION.into(),
        seed: cfg.seed,
        mean_psnr_identity: mean(&|p| p.psnr_identity),
        mean_ssim_identity: mean(&|p| p.ssim_identity),
        mean_l1_identity: mean(&|p| p.l1_identity),
        mean_psnr_recovered: mean(&|p| p.psnr_recovered),
        mean_ssim_recovered: mean(&|p| p.ssim_recovered),
        mean_l1_recovered: mean(&|p| p.l1_recovered),
        pairs,
        generated_at_unix_ms: now_unix_ms(),
    })
}

/// One ablation cell aggregated over its seed list.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub method: String,
    pub tau_max: f64,
    pub seeds: usize,
    pub mean_offset_error: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_l1: f64,
}

pub fn ablation_rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("method,tau_max,seeds,mean_offset_error,mean_psnr,mean_ssim,mean_l1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.tau_max, r.seeds, r.mean_offset_error, r.mean_psnr, r.mean_ssim, r.mean_l1
        ));
    }
    out
}

/// Runs the {method} x {tau_max} grid over the configured seed list. Rows
/// come out in grid order (methods outer, tau_max inner), never in
/// completion order.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::new();
    for method in &cfg.ablate.methods {
        for &tau_max in &cfg.ablate.tau_max_grid {
            let mut err_acc = 0.0;
            let mut psnr_acc = 0.0;
            let mut ssim_acc = 0.0;
            let mut l1_acc = 0.0;
            for &seed in &cfg.ablate.seeds {
                let run_cfg = RunConfig {
                    seed,
                    synth: SynthConfig {
                        offset_max: tau_max,
                        ..cfg.synth.clone()
                    },
                    ..cfg.clone()
                };
                let dataset = generate_dataset(&run_cfg.effective_synth());
                let view = DatasetView::from(&dataset);
                let outcome = align(&view, *method, &run_cfg)?;
                let eval = evaluate(&view, &outcome.time_model, &run_cfg)?;
                let n_off = outcome.report.cameras.len() as f64;
                err_acc +=
                    outcome.report.cameras.iter().map(|c| c.abs_error).sum::<f64>() / n_off;
                psnr_acc += eval.mean_psnr_recovered;
                ssim_acc += eval.mean_ssim_recovered;
                l1_acc += eval.mean_l1_recovered;
            }
            let n = cfg.ablate.seeds.len().max(1) as f64;
            rows.push(AblationRow {
                method: method.as_str().into(),
                tau_max,
                seeds: cfg.ablate.seeds.len(),
                mean_offset_error: err_acc / n,
                mean_psnr: psnr_acc / n,
                mean_ssim: ssim_acc / n,
                mean_l1: l1_acc / n,
            });
        }
    }
    Ok(rows)
}
