//! Fine temporal refinement: gradient descent on continuous per-camera
//! offsets against the photometric reconstruction loss, with analytic and
//! finite-difference time gradients, plus an optional joint mode that also
//! nudges Gaussian centers and opacities.
//!
//! The reference camera's residual is pinned to zero throughout (gauge).
//! Everything is deterministic: batches come from per-iteration RNG
//! streams and all reductions run in fixed pair order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{photometric_loss, render, render_saved, RenderOptions};
use crate::rng::SplitMix64;
use crate::scene::{Camera, SceneModel, TimeModel};
use crate::synth::VideoStream;

#[derive(Debug, Error)]
pub enum FineError {
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite {
        what: String,
        iteration: usize,
        trace: LossTrace,
    },
    #[error("invalid fine config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FineOptConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Finite-difference step h in frames; one-thirtieth of the frame
    /// interval by default.
    pub fd_step: f64,
    pub gradient_mode: GradientMode,
    /// Use a central instead of a forward difference (diagnostics).
    pub central_difference: bool,
    /// Also optimize Gaussian centers and opacities.
    pub joint_mode: bool,
    pub joint_learning_rate: f64,
    /// Random frames sampled per iteration (each paired with every camera).
    pub frames_per_iteration: usize,
    pub seed: u64,
    /// Camera excluded from the loss (held-out evaluation view).
    pub exclude_camera: Option<usize>,
    /// Stop once every per-camera gradient magnitude falls below this;
    /// 0 runs all iterations.
    pub grad_tolerance: f64,
}

impl Default for FineOptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.8,
            iterations: 200,
            fd_step: 1.0 / 30.0,
            gradient_mode: GradientMode::Analytic,
            central_difference: false,
            joint_mode: false,
            joint_learning_rate: 0.05,
            frames_per_iteration: 4,
            seed: 0,
            exclude_camera: None,
            grad_tolerance: 0.0,
        }
    }
}

impl FineOptConfig {
    pub fn validate(&self) -> Result<(), FineError> {
        if self.fd_step <= 0.0 {
            return Err(FineError::InvalidConfig("fd_step must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(FineError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.frames_per_iteration == 0 {
            return Err(FineError::InvalidConfig(
                "frames_per_iteration must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration diagnostics: loss, offsets and gradient magnitudes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub loss: f64,
    pub taus: Vec<f64>,
    pub grad_magnitudes: Vec<f64>,
}

impl LossTrace {
    /// CSV export: `iter,loss,tau_0,...,tau_{n-1},grad_0,...,grad_{n-1}`.
    pub fn to_csv(&self) -> String {
        let n = self.records.first().map_or(0, |r| r.taus.len());
        let mut out = String::from("iter,loss");
        for i in 0..n {
            out.push_str(&format!(",tau_{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",grad_{i}"));
        }
        out.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!("{i},{}", r.loss));
            for t in &r.taus {
                out.push_str(&format!(",{t}"));
            }
            for g in &r.grad_magnitudes {
                out.push_str(&format!(",{g}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The (camera, frame) pairs for one optimization step: every camera except
/// the held-out one, crossed with `frames_per_iteration` distinct frames
/// drawn from the iteration's own stream.
fn sample_pairs(cfg: &FineOptConfig, iteration: u64, n_cameras: usize, n_frames: usize) -> Vec<(usize, usize)> {
    let mut rng = SplitMix64::stream(cfg.seed, &[0xF1, iteration]);
    let count = cfg.frames_per_iteration.min(n_frames);
    let frames = rng.sample_distinct(n_frames, count);
    let mut pairs = Vec::with_capacity(n_cameras * count);
    for cam in 0..n_cameras {
        if Some(cam) == cfg.exclude_camera {
            continue;
        }
        for &f in &frames {
            pairs.push((cam, f));
        }
    }
    pairs
}

/// Forward (or central) difference of a scalar function.
fn finite_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64, central: bool) -> f64 {
    if central {
        (f(x + h) - f(x - h)) / (2.0 * h)
    } else {
        (f(x + h) - f(x)) / h
    }
}

fn pair_loss(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    cam: usize,
    frame: usize,
    opts: &RenderOptions,
) -> f64 {
    let rendered = render(
        &scene.gaussians,
        &scene.deformations,
        &rig[cam],
        frame as f64,
        tm,
        cam,
        opts,
    );
    photometric_loss(&rendered, &videos[cam].frames[frame]).expect("frame size mismatch")
}

/// Per-pair losses in pair order; parallel evaluation, order-stable result.
fn pair_losses(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    pairs: &[(usize, usize)],
    opts: &RenderOptions,
) -> Vec<f64> {
    pairs
        .par_iter()
        .map(|&(cam, frame)| pair_loss(scene, rig, videos, tm, cam, frame, opts))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean photometric loss over the seed-driven batch of (camera, frame)
/// pairs; each pair renders at its camera's effective time.
pub fn reconstruction_loss(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    cfg: &FineOptConfig,
    opts: &RenderOptions,
) -> f64 {
    let pairs = sample_pairs(cfg, 0, rig.len(), videos[0].frames.len());
    mean(&pair_losses(scene, rig, videos, tm, &pairs, opts))
}

fn loss_with_tau(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    pairs: &[(usize, usize)],
    base_losses: &[f64],
    cam: usize,
    tau: f64,
    opts: &RenderOptions,
) -> f64 {
    let mut shifted = tm.clone();
    shifted.set_fine_offset(cam, tau);
    // Only the pairs of `cam` change; substitute them and re-sum in the
    // same fixed order, which is exactly the full scalar loss.
    let updated: Vec<f64> = pairs
        .par_iter()
        .zip(base_losses.par_iter())
        .map(|(&(c, f), &base)| {
            if c == cam {
                pair_loss(scene, rig, videos, &shifted, c, f, opts)
            } else {
                base
            }
        })
        .collect();
    mean(&updated)
}

fn grad_tau_fd_on_pairs(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    pairs: &[(usize, usize)],
    h: f64,
    central: bool,
    opts: &RenderOptions,
) -> (f64, Vec<f64>) {
    assert!(h > 0.0, "finite-difference step must be positive");
    let base_losses = pair_losses(scene, rig, videos, tm, pairs, opts);
    let base = mean(&base_losses);
    let grads = (0..rig.len())
        .map(|cam| {
            if cam == tm.reference_camera() || !pairs.iter().any(|&(c, _)| c == cam) {
                return 0.0;
            }
            let tau = tm.fine_offsets()[cam];
            finite_difference(
                |x| {
                    if x == tau {
                        base
                    } else {
                        loss_with_tau(scene, rig, videos, tm, pairs, &base_losses, cam, x, opts)
                    }
                },
                tau,
                h,
                central,
            )
        })
        .collect();
    (base, grads)
}

/// Eq.-style forward-difference time gradients: `(L(tau + h) - L(tau)) / h`
/// per camera, every other camera held fixed; the reference camera's
/// gradient is pinned to 0. The batch is the same seed-driven sample used
/// by `reconstruction_loss`.
pub fn grad_tau_fd(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    h: f64,
    cfg: &FineOptConfig,
    opts: &RenderOptions,
) -> Vec<f64> {
    let pairs = sample_pairs(cfg, 0, rig.len(), videos[0].frames.len());
    grad_tau_fd_on_pairs(
        scene,
        rig,
        videos,
        tm,
        &pairs,
        h,
        cfg.central_difference,
        opts,
    )
    .1
}

struct AnalyticGrads {
    loss: f64,
    tau: Vec<f64>,
    centers: Vec<nalgebra::Vector3<f64>>,
    opacities: Vec<f64>,
}

fn grad_analytic_on_pairs(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    pairs: &[(usize, usize)],
    opts: &RenderOptions,
    want_scene_grads: bool,
) -> AnalyticGrads {
    struct PairResult {
        cam: usize,
        loss: f64,
        d_time: f64,
        d_centers: Vec<nalgebra::Vector3<f64>>,
        d_opacities: Vec<f64>,
    }

    let results: Vec<PairResult> = pairs
        .par_iter()
        .map(|&(cam, frame)| {
            let camera = &rig[cam];
            let t_eff = tm
                .effective_time(cam, frame as f64)
                .expect("camera index out of range");
            let saved = render_saved(
                &scene.gaussians,
                &scene.deformations,
                camera,
                frame as f64,
                tm,
                cam,
                opts,
            );
            let target = &videos[cam].frames[frame];
            let loss =
                photometric_loss(&saved.image, target).expect("frame size mismatch");
            // d(pair loss)/d(pixel) for the L1 mean.
            let n = saved.image.rgb.len();
            let scale = 1.0 / n as f64;
            let adjoint: Vec<f64> = saved
                .image
                .rgb
                .iter()
                .zip(&target.rgb)
                .map(|(r, t)| {
                    if r > t {
                        scale
                    } else if r < t {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            let velocities: Vec<nalgebra::Vector3<f64>> = scene
                .deformations
                .iter()
                .map(|d| d.velocity_at(t_eff, camera.frame_rate))
                .collect();
            let grads = saved.backward(&adjoint, &velocities, scene.len(), camera);
            PairResult {
                cam,
                loss,
                d_time: grads.d_time,
                d_centers: if want_scene_grads {
                    grads.d_centers
                } else {
                    Vec::new()
                },
                d_opacities: if want_scene_grads {
                    grads.d_opacities
                } else {
                    Vec::new()
                },
            }
        })
        .collect();

    let inv_n = 1.0 / pairs.len() as f64;
    let mut tau = vec![0.0; rig.len()];
    let mut centers = vec![nalgebra::Vector3::zeros(); if want_scene_grads { scene.len() } else { 0 }];
    let mut opacities = vec![0.0; if want_scene_grads { scene.len() } else { 0 }];
    let mut loss = 0.0;
    for r in &results {
        loss += r.loss * inv_n;
        if r.cam != tm.reference_camera() {
            tau[r.cam] += r.d_time * inv_n;
        }
        if want_scene_grads {
            for (acc, g) in centers.iter_mut().zip(&r.d_centers) {
                *acc += g * inv_n;
            }
            for (acc, g) in opacities.iter_mut().zip(&r.d_opacities) {
                *acc += g * inv_n;
            }
        }
    }
    AnalyticGrads {
        loss,
        tau,
        centers,
        opacities,
    }
}

/// Exact time gradients via the rasterizer's backward pass: loss ->
/// blending weights -> projected means and covariances -> camera-frame
/// centers -> deformation velocities. The reference camera's entry is 0.
pub fn grad_tau_analytic(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm: &TimeModel,
    cfg: &FineOptConfig,
    opts: &RenderOptions,
) -> Vec<f64> {
    let pairs = sample_pairs(cfg, 0, rig.len(), videos[0].frames.len());
    grad_analytic_on_pairs(scene, rig, videos, tm, &pairs, opts, false).tau
}

#[derive(Debug, Clone)]
pub struct FineOutcome {
    pub time_model: TimeModel,
    pub trace: LossTrace,
    /// Equal to the input scene unless joint mode updated it.
    pub scene: SceneModel,
}

/// Gradient descent on the per-camera residuals (and, in joint mode,
/// Gaussian centers and opacities). Deterministic in `(inputs, seed)`.
///
/// `tm_init` should carry the coarse offsets with all residuals 0; the
/// optimizer refines the residuals from there.
pub fn optimize_offsets(
    scene: &SceneModel,
    rig: &[Camera],
    videos: &[VideoStream],
    tm_init: &TimeModel,
    cfg: &FineOptConfig,
    opts: &RenderOptions,
) -> Result<FineOutcome, FineError> {
    cfg.validate()?;
    let n_frames = videos[0].frames.len();
    let mut tm = tm_init.clone();
    let mut scene = scene.clone();
    let mut trace = LossTrace::default();
    let mut below_tolerance = 0usize;

    for iter in 0..cfg.iterations {
        let pairs = sample_pairs(cfg, iter as u64, rig.len(), n_frames);
        let (loss, tau_grads, scene_grads) = match cfg.gradient_mode {
            GradientMode::Analytic => {
                let g = grad_analytic_on_pairs(&scene, rig, videos, &tm, &pairs, opts, cfg.joint_mode);
                (g.loss, g.tau.clone(), Some(g))
            }
            GradientMode::FiniteDifference => {
                let (loss, grads) = grad_tau_fd_on_pairs(
                    &scene,
                    rig,
                    videos,
                    &tm,
                    &pairs,
                    cfg.fd_step,
                    cfg.central_difference,
                    opts,
                );
                // Joint mode always uses the analytic scene gradients; the
                // finite difference choice only concerns the time axis.
                let scene_grads = if cfg.joint_mode {
                    Some(grad_analytic_on_pairs(&scene, rig, videos, &tm, &pairs, opts, true))
                } else {
                    None
                };
                (loss, grads, scene_grads)
            }
        };

        // Scale each camera's gradient of the batch-mean loss up to the
        // gradient of that camera's own mean pair loss; step sizes then do
        // not depend on how many cameras share the batch.
        let mut pair_counts = vec![0usize; rig.len()];
        for &(c, _) in &pairs {
            pair_counts[c] += 1;
        }
        let update_grads: Vec<f64> = tau_grads
            .iter()
            .enumerate()
            .map(|(c, g)| {
                if pair_counts[c] == 0 {
                    0.0
                } else {
                    g * (pairs.len() as f64 / pair_counts[c] as f64)
                }
            })
            .collect();

        let record = IterationRecord {
            loss,
            taus: tm.fine_offsets().to_vec(),
            grad_magnitudes: update_grads.iter().map(|g| g.abs()).collect(),
        };
        trace.records.push(record);

        if !loss.is_finite() {
            return Err(FineError::NonFinite {
                what: "loss".into(),
                iteration: iter,
                trace,
            });
        }
        if tau_grads.iter().any(|g| !g.is_finite()) {
            return Err(FineError::NonFinite {
                what: "gradient".into(),
                iteration: iter,
                trace,
            });
        }

        for cam in 0..rig.len() {
            if cam == tm.reference_camera() {
                continue;
            }
            let tau = tm.fine_offsets()[cam] - cfg.learning_rate * update_grads[cam];
            tm.set_fine_offset(cam, tau);
        }

        if cfg.joint_mode {
            let g = scene_grads.expect("joint mode computes scene gradients");
            for (i, gaussian) in scene.gaussians.iter_mut().enumerate() {
                gaussian.center -= g.centers[i] * cfg.joint_learning_rate;
                gaussian.opacity =
                    (gaussian.opacity - g.opacities[i] * cfg.joint_learning_rate).clamp(0.0, 1.0);
            }
        }

        if cfg.grad_tolerance > 0.0 {
            if update_grads.iter().all(|g| g.abs() < cfg.grad_tolerance) {
                below_tolerance += 1;
                // One quiet batch can be a fluke; stop on three in a row.
                if below_tolerance >= 3 {
                    break;
                }
            } else {
                below_tolerance = 0;
            }
        }
    }

    Ok(FineOutcome {
        time_model: tm,
        trace,
        scene,
    })
}
