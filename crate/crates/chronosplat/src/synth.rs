//! Deterministic generator of desk-scale unsynchronized multi-view data
//! with full ground truth: scenes, camera rigs, per-camera offsets,
//! rendered frame sequences, foreground masks, and noisy correspondence
//! sets. The correspondence generator is the stand-in for a learned dense
//! matcher; the alpha-threshold masks stand in for a video segmentation
//! model.
//!
//! Every output is a pure function of `(config, seed, arguments)`.
//! Background primitives also yield correspondences: they are consistent
//! regardless of the temporal offset, which is exactly why the coarse stage
//! must filter matching to the foreground.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Correspondence;
use crate::render::{render, Image, RenderOptions};
use crate::rng::SplitMix64;
use crate::scene::{Camera, DeformationModel, Gaussian3D, SceneModel, TimeModel};

// Stream labels; keep stable so datasets are reproducible across versions.
const STREAM_SCENE: u64 = 1;
const STREAM_RIG: u64 = 2;
const STREAM_OFFSETS: u64 = 3;
const STREAM_CORRS: u64 = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Static background primitives.
    pub n_static: usize,
    /// Dynamic foreground primitives (the "subject").
    pub n_dynamic: usize,
    pub n_cameras: usize,
    pub n_frames: usize,
    /// Frames per second; 15 matches the benchmark subsampling.
    pub frame_rate: f64,
    /// Maximum ground-truth offset in frames (tau_max).
    pub offset_max: f64,
    /// When set, offsets are continuous in [0, offset_max]; otherwise
    /// integer-valued.
    pub sub_frame_offsets: bool,
    /// Pixel noise added to generated correspondences.
    pub noise_sigma_px: f64,
    /// Fraction of correspondences replaced by uniform random pixels.
    pub outlier_fraction: f64,
    pub matches_per_pair: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Multiplier on the subject's default motion amplitude.
    pub motion_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_static: 100,
            n_dynamic: 130,
            n_cameras: 8,
            n_frames: 60,
            frame_rate: 15.0,
            offset_max: 10.0,
            sub_frame_offsets: true,
            noise_sigma_px: 0.5,
            outlier_fraction: 0.2,
            matches_per_pair: 150,
            image_width: 128,
            image_height: 128,
            motion_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_cameras < 2 {
            return Err("need at least 2 cameras".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(format!(
                "outlier_fraction {} must be in [0, 1)",
                self.outlier_fraction
            ));
        }
        if self.offset_max < 0.0 {
            return Err("offset_max must be >= 0".into());
        }
        if self.frame_rate <= 0.0 {
            return Err("frame_rate must be positive".into());
        }
        if self.n_frames < 2 {
            return Err("need at least 2 frames".into());
        }
        Ok(())
    }
}

/// One camera's captured data: rendered frames and binary foreground masks.
#[derive(Debug, Clone)]
pub struct VideoStream {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Correspondences plus the generator's hidden ground-truth outlier labels.
/// The labels are for evaluation only; the alignment pipeline consumes the
/// correspondences through the `Matcher` interface and never sees them.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub correspondences: Vec<Correspondence>,
    pub outlier_labels: Vec<bool>,
}

/// Subject trajectory texture. Fixed here; exposed internally so the
/// tuning between shape compactness and non-rigid velocity spread stays in
/// one place.
struct TrajectoryParams {
    /// Slow population: the subject's coherent sway.
    amplitude: f64,
    amplitude_var: f64,
    dir_jitter: f64,
    omega_var: f64,
    phase_jitter: f64,
    /// Fast population: low-amplitude, high-frequency oscillators with
    /// independent phases. Their positions stay near the body while their
    /// velocities scatter, which is what defeats any single rigid
    /// explanation of a time-mismatched frame pair.
    fast_fraction: f64,
    fast_amplitude: f64,
    fast_omega: (f64, f64),
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            amplitude: 0.3,
            amplitude_var: 0.3,
            dir_jitter: 0.8,
            omega_var: 0.3,
            phase_jitter: 0.4,
            fast_fraction: 0.55,
            fast_amplitude: 0.15,
            fast_omega: (3.2, 4.8),
        }
    }
}

/// Scattered static background plus a coherent moving subject.
///
/// The subject's primitives share a dominant trajectory direction,
/// frequency and phase with per-primitive variation. The variation makes
/// the subject deform (it is rigid only at a single instant), which is
/// what gives the coarse epipolar score its discriminative signal: a
/// rigidly translating subject could be explained by a virtual camera
/// shift and would satisfy some fundamental matrix at any offset.
pub fn generate_scene(cfg: &SynthConfig) -> SceneModel {
    generate_scene_with(cfg, &TrajectoryParams::default())
}

fn generate_scene_with(cfg: &SynthConfig, traj: &TrajectoryParams) -> SceneModel {
    let mut rng = SplitMix64::stream(cfg.seed, &[STREAM_SCENE]);
    let mut gaussians = Vec::with_capacity(cfg.n_static + cfg.n_dynamic);
    let mut deformations = Vec::with_capacity(cfg.n_static + cfg.n_dynamic);

    // Static backdrop, kept clear of the subject sphere.
    let mut placed = 0;
    while placed < cfg.n_static {
        let p = Vector3::new(
            rng.uniform(-1.8, 1.8),
            rng.uniform(-1.3, 1.3),
            rng.uniform(-1.8, 1.8),
        );
        if p.norm() < 0.95 {
            continue;
        }
        let q = random_rotation(&mut rng);
        let scale = Vector3::new(
            rng.uniform(0.05, 0.13),
            rng.uniform(0.05, 0.13),
            rng.uniform(0.05, 0.13),
        );
        let color = Vector3::new(
            rng.uniform(0.15, 0.85),
            rng.uniform(0.15, 0.85),
            rng.uniform(0.15, 0.85),
        );
        gaussians.push(
            Gaussian3D::new(p, q, scale, rng.uniform(0.4, 0.95), color)
                .expect("generated background gaussian invalid"),
        );
        deformations.push(DeformationModel::fixed());
        placed += 1;
    }

    // Dynamic subject: a bounded cluster of small, dense primitives.
    // The rig is a horizontal arc, so its epipolar planes are close to
    // horizontal; motion needs a solid vertical component to violate the
    // epipolar constraint at mismatched times.
    let base_dir = {
        let h = random_unit_vector(&mut rng);
        let up = if rng.next_f64() < 0.5 { 1.0 } else { -1.0 };
        Vector3::new(0.6 * h.x, up * rng.uniform(0.75, 0.95), 0.6 * h.z).normalize()
    };
    // Base period ~24 frames, so offsets up to 10 frames stay unambiguous.
    let base_omega = std::f64::consts::TAU * cfg.frame_rate / 24.0;
    let base_phase = rng.uniform(0.0, std::f64::consts::TAU);
    let base_amplitude = traj.amplitude * cfg.motion_scale;

    let mut placed = 0;
    while placed < cfg.n_dynamic {
        let p = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.26;
        if p.norm() > 0.39 {
            continue;
        }
        let q = random_rotation(&mut rng);
        let scale = Vector3::new(
            rng.uniform(0.055, 0.09),
            rng.uniform(0.055, 0.09),
            rng.uniform(0.055, 0.09),
        );
        let color = Vector3::new(
            rng.uniform(0.3, 1.0),
            rng.uniform(0.3, 1.0),
            rng.uniform(0.3, 1.0),
        );
        gaussians.push(
            Gaussian3D::new(p, q, scale, rng.uniform(0.85, 0.99), color)
                .expect("generated subject gaussian invalid"),
        );
        // Per-primitive variation in direction, amplitude and phase makes
        // the subject deform rather than translate rigidly; a rigidly
        // translating subject could be explained by a virtual camera shift
        // and the epipolar score would lose its signal at wrong offsets.
        let deformation = if rng.next_f64() < traj.fast_fraction {
            // Fully random directions: direction-coherent displacement
            // fields can be absorbed by a tilted fundamental matrix,
            // isotropic ones cannot.
            let dir = random_unit_vector(&mut rng);
            DeformationModel {
                amplitude: dir * (traj.fast_amplitude * rng.uniform(0.7, 1.3)),
                angular_frequency: base_omega
                    * rng.uniform(traj.fast_omega.0, traj.fast_omega.1),
                phase: rng.uniform(0.0, std::f64::consts::TAU),
                static_flag: false,
            }
        } else {
            let dir = (base_dir + random_unit_vector(&mut rng) * traj.dir_jitter).normalize();
            DeformationModel {
                amplitude: dir
                    * (base_amplitude
                        * rng.uniform(1.0 - traj.amplitude_var, 1.0 + traj.amplitude_var)),
                angular_frequency: base_omega
                    * rng.uniform(1.0 - traj.omega_var, 1.0 + traj.omega_var),
                phase: base_phase + rng.normal() * traj.phase_jitter,
                static_flag: false,
            }
        };
        deformations.push(deformation);
        placed += 1;
    }

    SceneModel::new(gaussians, deformations)
}

fn random_unit_vector(rng: &mut SplitMix64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut SplitMix64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.normal(),
        rng.normal(),
        rng.normal(),
        rng.normal(),
    ))
}

/// Inward-facing arc of cameras with shared intrinsics, aimed exactly at
/// the scene centroid (the origin). Small height variation keeps camera
/// centers off a single plane.
pub fn generate_rig(cfg: &SynthConfig) -> Vec<Camera> {
    assert!(cfg.n_cameras >= 2, "generate_rig: need at least 2 cameras");
    let _rng = SplitMix64::stream(cfg.seed, &[STREAM_RIG]);
    let radius = 5.0;
    let focal = 240.0 * (cfg.image_width.min(cfg.image_height) as f64) / 128.0;
    let k = Matrix3::new(
        focal,
        0.0,
        cfg.image_width as f64 / 2.0,
        0.0,
        focal,
        cfg.image_height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let span = 140.0f64.to_radians();
    (0..cfg.n_cameras)
        .map(|j| {
            let frac = j as f64 / (cfg.n_cameras - 1) as f64;
            let theta = -span / 2.0 + span * frac;
            let height = 0.35 * (1.7 * j as f64).sin();
            let eye = Vector3::new(radius * theta.sin(), height, -radius * theta.cos());
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
                k,
                cfg.image_width,
                cfg.image_height,
                cfg.frame_rate,
            )
        })
        .collect()
}

/// Ground-truth per-camera offsets. The reference camera (index 0) gets 0;
/// the rest are uniform in `[0, offset_max]`, rounded to whole frames
/// unless `sub_frame_offsets` is set.
pub fn sample_gt_offsets(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = SplitMix64::stream(cfg.seed, &[STREAM_OFFSETS]);
    (0..cfg.n_cameras)
        .map(|j| {
            if j == 0 {
                return 0.0;
            }
            if cfg.sub_frame_offsets {
                rng.uniform(0.0, cfg.offset_max)
            } else {
                rng.next_below(cfg.offset_max.floor() as u64 + 1) as f64
            }
        })
        .collect()
}

/// Renders every camera's frame sequence and foreground masks. Frame `i`
/// of camera `j` shows the scene at time `i + offsets[j]`; the mask is set
/// where the dynamic-foreground-only render accumulates alpha above 0.5.
pub fn generate_videos(
    scene: &SceneModel,
    rig: &[Camera],
    offsets: &[f64],
    cfg: &SynthConfig,
) -> Vec<VideoStream> {
    generate_videos_with(scene, rig, offsets, cfg, &RenderOptions::default())
}

/// `generate_videos` with explicit render options, for harnesses that need
/// targets rendered under a non-default footprint cutoff.
pub fn generate_videos_with(
    scene: &SceneModel,
    rig: &[Camera],
    offsets: &[f64],
    cfg: &SynthConfig,
    opts: &RenderOptions,
) -> Vec<VideoStream> {
    assert_eq!(rig.len(), offsets.len());
    let dynamic = scene.dynamic_subscene();
    let identity = TimeModel::identity(rig.len().max(1), 0);

    rig.par_iter()
        .enumerate()
        .map(|(j, cam)| {
            let mut frames = Vec::with_capacity(cfg.n_frames);
            let mut masks = Vec::with_capacity(cfg.n_frames);
            for i in 0..cfg.n_frames {
                let t = i as f64 + offsets[j];
                frames.push(render(
                    &scene.gaussians,
                    &scene.deformations,
                    cam,
                    t,
                    &identity,
                    0,
                    opts,
                ));
                let fg = render(
                    &dynamic.gaussians,
                    &dynamic.deformations,
                    cam,
                    t,
                    &identity,
                    0,
                    opts,
                );
                masks.push(Mask {
                    width: fg.width,
                    height: fg.height,
                    data: fg.alpha.iter().map(|&a| a > 0.5).collect(),
                });
            }
            VideoStream { frames, masks }
        })
        .collect()
}

/// Projected splats of the dynamic sub-scene at one (camera, time), for
/// point-wise foreground queries.
struct FgField {
    splats: Vec<crate::render::ProjectedSplat>,
}

impl FgField {
    fn new(scene: &SceneModel, cam: &Camera, t: f64) -> Self {
        let dynamic = scene.dynamic_subscene();
        let splats = crate::render::project_and_sort(
            &dynamic.gaussians,
            &dynamic.deformations,
            cam,
            t,
            &RenderOptions::default(),
        );
        Self { splats }
    }

    /// Accumulated alpha at the nearest mask grid point, i.e. the mask rule
    /// evaluated at the pixel a detected feature would be tested against.
    fn is_foreground(&self, px: &Vector2<f64>) -> bool {
        let x = px.x.round();
        let y = px.y.round();
        let mut trans = 1.0;
        let mut alpha = 0.0;
        for s in &self.splats {
            let d = Vector2::new(x - s.mean.x, y - s.mean.y);
            let q = (s.cov_inv * d).dot(&d);
            if q > 9.0 {
                continue;
            }
            let w = s.opacity * (-0.5 * q).exp();
            alpha += w * trans;
            trans *= 1.0 - w;
        }
        alpha > 0.5
    }
}

/// Synthesizes feature correspondences between camera `a` at scene time
/// `t_a` and camera `b` at scene time `t_b`.
///
/// 3D points are sampled on Gaussian surfaces (opacity-weighted choice of
/// primitive, unit-sphere surface point scaled by the primitive), carried
/// to their trajectory positions at each view's own time, projected, and
/// perturbed with Gaussian pixel noise. A fixed fraction of rows is
/// replaced by uniform random pixels. Foreground flags apply the mask rule
/// at each (noisy) detection.
pub fn generate_correspondences(
    scene: &SceneModel,
    rig: &[Camera],
    pair: (usize, f64, usize, f64),
    cfg: &SynthConfig,
) -> CorrespondenceSet {
    let (cam_a_idx, t_a, cam_b_idx, t_b) = pair;
    let cam_a = &rig[cam_a_idx];
    let cam_b = &rig[cam_b_idx];
    let mut rng = SplitMix64::stream(
        cfg.seed,
        &[
            STREAM_CORRS,
            cam_a_idx as u64,
            cam_b_idx as u64,
            t_a.to_bits(),
            t_b.to_bits(),
        ],
    );

    // Opacity-weighted cumulative distribution over primitives.
    let total_opacity: f64 = scene.gaussians.iter().map(|g| g.opacity).sum();
    assert!(total_opacity > 0.0, "scene has no opaque gaussians");

    let fg_a = FgField::new(scene, cam_a, t_a);
    let fg_b = FgField::new(scene, cam_b, t_b);
    let (wf, hf) = (cfg.image_width as f64, cfg.image_height as f64);
    let in_bounds =
        |p: &Vector2<f64>| p.x >= 0.0 && p.x <= wf - 1.0 && p.y >= 0.0 && p.y <= hf - 1.0;

    let n = cfg.matches_per_pair;
    let mut points = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while points.len() < n && attempts < n * 200 {
        attempts += 1;
        // Pick a primitive by opacity weight.
        let mut target = rng.next_f64() * total_opacity;
        let mut idx = 0;
        for (i, g) in scene.gaussians.iter().enumerate() {
            target -= g.opacity;
            if target <= 0.0 {
                idx = i;
                break;
            }
        }
        let g = &scene.gaussians[idx];
        let d = &scene.deformations[idx];
        // Surface point rigidly attached to the primitive.
        let local = g.rotation * random_unit_vector(&mut rng).component_mul(&g.scale);
        let pa = g.center + d.offset_at(t_a, cfg.frame_rate) + local;
        let pb = g.center + d.offset_at(t_b, cfg.frame_rate) + local;
        let (ua, va) = match cam_a.project_point(&pa) {
            Some(x) => x,
            None => continue,
        };
        let (ub, vb) = match cam_b.project_point(&pb) {
            Some(x) => x,
            None => continue,
        };
        let p_ref = Vector2::new(ua, va);
        let p_other = Vector2::new(ub, vb);
        if !in_bounds(&p_ref) || !in_bounds(&p_other) {
            continue;
        }
        points.push((p_ref, p_other));
    }

    let n = points.len();
    let n_outliers = (n as f64 * cfg.outlier_fraction).round() as usize;
    let outlier_rows = {
        let mut rows = rng.sample_distinct(n, n_outliers);
        rows.sort_unstable();
        rows
    };
    let mut outlier_labels = vec![false; n];
    for &r in &outlier_rows {
        outlier_labels[r] = true;
    }

    let clamp = |p: Vector2<f64>| {
        Vector2::new(p.x.clamp(0.0, wf - 1.0), p.y.clamp(0.0, hf - 1.0))
    };
    let mut correspondences = Vec::with_capacity(n);
    for (i, (p_ref, p_other)) in points.into_iter().enumerate() {
        let (p_ref, p_other) = if outlier_labels[i] {
            (
                Vector2::new(rng.uniform(0.0, wf - 1.0), rng.uniform(0.0, hf - 1.0)),
                Vector2::new(rng.uniform(0.0, wf - 1.0), rng.uniform(0.0, hf - 1.0)),
            )
        } else {
            let noise = |rng: &mut SplitMix64, p: Vector2<f64>| {
                clamp(Vector2::new(
                    p.x + rng.normal() * cfg.noise_sigma_px,
                    p.y + rng.normal() * cfg.noise_sigma_px,
                ))
            };
            (noise(&mut rng, p_ref), noise(&mut rng, p_other))
        };
        correspondences.push(Correspondence {
            fg_ref: fg_a.is_foreground(&p_ref),
            fg_other: fg_b.is_foreground(&p_other),
            p_ref,
            p_other,
        });
    }

    CorrespondenceSet {
        correspondences,
        outlier_labels,
    }
}

/// The correspondence source the coarse stage consumes, backed by the
/// synthetic generator for one camera pair.
///
/// Frame `m` of camera `j` depicts scene time `m + gt_offsets[j]`; the
/// matcher reconstructs what a feature matcher would observe on those
/// captured frames. The ground-truth offsets live on this measurement side
/// of the interface; the alignment algorithms only ever see the emitted
/// correspondences.
pub struct SynthMatcher<'a> {
    scene: &'a SceneModel,
    rig: &'a [Camera],
    gt_offsets: &'a [f64],
    cam_ref: usize,
    cam_other: usize,
    cfg: &'a SynthConfig,
}

impl<'a> SynthMatcher<'a> {
    pub fn new(
        scene: &'a SceneModel,
        rig: &'a [Camera],
        gt_offsets: &'a [f64],
        cam_ref: usize,
        cam_other: usize,
        cfg: &'a SynthConfig,
    ) -> Self {
        assert!(cam_ref < rig.len() && cam_other < rig.len());
        Self {
            scene,
            rig,
            gt_offsets,
            cam_ref,
            cam_other,
            cfg,
        }
    }
}

impl crate::coarse::Matcher for SynthMatcher<'_> {
    fn match_pair(&self, ref_frame: usize, other_frame: usize) -> Vec<Correspondence> {
        let t_a = ref_frame as f64 + self.gt_offsets[self.cam_ref];
        let t_b = other_frame as f64 + self.gt_offsets[self.cam_other];
        generate_correspondences(
            self.scene,
            self.rig,
            (self.cam_ref, t_a, self.cam_other, t_b),
            self.cfg,
        )
        .correspondences
    }
}

/// The full generated package for one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: SceneModel,
    pub rig: Vec<Camera>,
    pub gt_offsets: Vec<f64>,
    pub videos: Vec<VideoStream>,
    pub config: SynthConfig,
}

/// Generates scene, rig, offsets and videos in one go.
pub fn generate_dataset(cfg: &SynthConfig) -> Dataset {
    let scene = generate_scene(cfg);
    let rig = generate_rig(cfg);
    let gt_offsets = sample_gt_offsets(cfg);
    let videos = generate_videos(&scene, &rig, &gt_offsets, cfg);
    Dataset {
        scene,
        rig,
        gt_offsets,
        videos,
        config: cfg.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sampson_distance, FundamentalMatrix};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            seed: 7,
            n_static: 30,
            n_dynamic: 20,
            n_cameras: 4,
            n_frames: 12,
            image_width: 96,
            image_height: 96,
            offset_max: 3.0,
            ..Default::default()
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = small_cfg();
        assert_eq!(generate_scene(&cfg), generate_scene(&cfg));
        let offsets = sample_gt_offsets(&cfg);
        assert_eq!(offsets, sample_gt_offsets(&cfg));
    }

    #[test]
    fn dynamic_count_matches_config() {
        let cfg = SynthConfig {
            n_static: 100,
            n_dynamic: 50,
            ..small_cfg()
        };
        let scene = generate_scene(&cfg);
        assert_eq!(scene.len(), 150);
        assert_eq!(scene.num_dynamic(), 50);
    }

    #[test]
    fn subject_motion_projects_to_one_to_six_pixels() {
        // Projected-motion oracle: the subject centroid's frame-to-frame
        // displacement, projected in the default rig, peaks between 1 and 6
        // pixels so the coarse stage has signal.
        let cfg = SynthConfig::default();
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let cam = &rig[rig.len() / 2];
        let centroid_at = |t: f64| {
            let mut acc = Vector3::zeros();
            let mut count = 0.0;
            for (g, d) in scene.gaussians.iter().zip(&scene.deformations) {
                if !d.static_flag {
                    acc += g.center + d.offset_at(t, cfg.frame_rate);
                    count += 1.0;
                }
            }
            acc / count
        };
        let mut peak: f64 = 0.0;
        for i in 0..12 {
            let a = cam.project_point(&centroid_at(i as f64)).unwrap();
            let b = cam.project_point(&centroid_at(i as f64 + 1.0)).unwrap();
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            peak = peak.max(d);
        }
        assert!(
            (1.0..=6.0).contains(&peak),
            "peak projected motion {peak} px"
        );
    }

    #[test]
    fn rig_cameras_aim_at_centroid() {
        let cfg = small_cfg();
        for cam in generate_rig(&cfg) {
            cam.validate().unwrap();
            // The optical axis passes through the origin: the origin
            // projects to the principal point.
            let (u, v) = cam.project_point(&Vector3::zeros()).unwrap();
            assert!((u - cfg.image_width as f64 / 2.0).abs() < 1e-9);
            assert!((v - cfg.image_height as f64 / 2.0).abs() < 1e-9);
            let det = cam
                .rotation
                .to_rotation_matrix()
                .matrix()
                .determinant();
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rig_pairs_have_valid_fundamental_matrices() {
        let cfg = SynthConfig::default();
        let rig = generate_rig(&cfg);
        for i in 0..rig.len() {
            for j in 0..rig.len() {
                if i == j {
                    continue;
                }
                let baseline =
                    (rig[i].center_world() - rig[j].center_world()).norm();
                assert!(baseline > 0.1, "cameras {i},{j} nearly coincide");
                let f = FundamentalMatrix::from_camera_pair(&rig[i], &rig[j]);
                assert!(f.matrix().determinant().abs() < 1e-10);
                assert!((f.matrix().norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn offsets_zero_when_tau_max_zero() {
        let cfg = SynthConfig {
            offset_max: 0.0,
            sub_frame_offsets: false,
            ..small_cfg()
        };
        assert!(sample_gt_offsets(&cfg).iter().all(|&o| o == 0.0));
    }

    #[test]
    fn integer_offsets_stay_in_range() {
        let cfg = SynthConfig {
            offset_max: 10.0,
            sub_frame_offsets: false,
            n_cameras: 16,
            ..small_cfg()
        };
        let offsets = sample_gt_offsets(&cfg);
        assert_eq!(offsets[0], 0.0);
        for &o in &offsets {
            assert_eq!(o, o.round());
            assert!((0.0..=10.0).contains(&o));
        }
    }

    #[test]
    fn offset_mean_matches_uniform_oracle() {
        // 1000 draws from [0, 5]: empirical mean within 0.3 of 2.5, both modes.
        for sub in [false, true] {
            let mut sum = 0.0;
            let mut count = 0usize;
            for seed in 0..100u64 {
                let cfg = SynthConfig {
                    seed,
                    offset_max: 5.0,
                    sub_frame_offsets: sub,
                    n_cameras: 11,
                    ..small_cfg()
                };
                for &o in sample_gt_offsets(&cfg).iter().skip(1) {
                    assert!((0.0..=5.0).contains(&o));
                    sum += o;
                    count += 1;
                }
            }
            assert_eq!(count, 1000);
            let mean = sum / count as f64;
            assert!((mean - 2.5).abs() < 0.3, "mean {mean} (sub={sub})");
        }
    }

    #[test]
    fn zero_offset_videos_match_direct_renders() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let offsets = vec![0.0; cfg.n_cameras];
        let videos = generate_videos(&scene, &rig, &offsets, &cfg);
        let tm = TimeModel::identity(cfg.n_cameras, 0);
        let opts = RenderOptions::default();
        for (j, cam) in rig.iter().enumerate() {
            for i in [0usize, 5] {
                let direct = render(
                    &scene.gaussians,
                    &scene.deformations,
                    cam,
                    i as f64,
                    &tm,
                    j,
                    &opts,
                );
                assert_eq!(videos[j].frames[i], direct);
            }
        }
    }

    #[test]
    fn mask_empty_without_dynamic_gaussians() {
        let cfg = SynthConfig {
            n_dynamic: 0,
            ..small_cfg()
        };
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let videos = generate_videos(&scene, &rig, &vec![0.0; cfg.n_cameras], &cfg);
        for v in &videos {
            for m in &v.masks {
                assert_eq!(m.count_set(), 0);
            }
        }
    }

    #[test]
    fn mask_footprint_tracks_projected_subject_area() {
        // Geometric footprint oracle: the mask pixel count stays within 20%
        // of the union area of the subject's projected 2-sigma ellipses,
        // approximated on the same pixel grid from the projected covariances.
        let cfg = SynthConfig::default();
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let videos = generate_videos(&scene, &rig, &vec![0.0; cfg.n_cameras], &cfg);
        let dynamic = scene.dynamic_subscene();
        let cam = &rig[3];
        let splats = crate::render::project_and_sort(
            &dynamic.gaussians,
            &dynamic.deformations,
            cam,
            0.0,
            &RenderOptions::default(),
        );
        let mut area = 0usize;
        for y in 0..cfg.image_height {
            for x in 0..cfg.image_width {
                let inside = splats.iter().any(|s| {
                    let d = Vector2::new(x as f64 - s.mean.x, y as f64 - s.mean.y);
                    (s.cov_inv * d).dot(&d) <= 4.0
                });
                if inside {
                    area += 1;
                }
            }
        }
        let mask_count = videos[3].masks[0].count_set();
        let rel = (mask_count as f64 - area as f64).abs() / area as f64;
        assert!(
            rel < 0.2,
            "mask {mask_count} px vs 2-sigma footprint {area} px (rel {rel})"
        );
    }

    #[test]
    fn equal_time_correspondences_satisfy_epipolar_constraint() {
        let cfg = SynthConfig {
            noise_sigma_px: 0.0,
            outlier_fraction: 0.0,
            ..small_cfg()
        };
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let f = FundamentalMatrix::from_camera_pair(&rig[0], &rig[2]);
        let set = generate_correspondences(&scene, &rig, (0, 4.0, 2, 4.0), &cfg);
        assert_eq!(set.correspondences.len(), cfg.matches_per_pair);
        for c in &set.correspondences {
            assert!(f.epipolar_residual(c).abs() < 1e-8);
        }
    }

    #[test]
    fn time_mismatch_breaks_foreground_epipolar_consistency() {
        // Offset the second view by 3 frames: foreground matches must
        // violate the static epipolar model with a median Sampson distance
        // beyond the RANSAC threshold.
        let cfg = SynthConfig {
            noise_sigma_px: 0.0,
            outlier_fraction: 0.0,
            ..SynthConfig::default()
        };
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let f = FundamentalMatrix::from_camera_pair(&rig[0], &rig[2]);
        let set = generate_correspondences(&scene, &rig, (0, 20.0, 2, 23.0), &cfg);
        let mut fg_dists: Vec<f64> = set
            .correspondences
            .iter()
            .filter(|c| c.fg_ref && c.fg_other)
            .map(|c| sampson_distance(&f, c))
            .collect();
        assert!(fg_dists.len() >= 10, "too few foreground matches");
        fg_dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = fg_dists[fg_dists.len() / 2];
        assert!(median > 2.0, "median foreground sampson {median}");
    }

    #[test]
    fn outlier_count_is_exact() {
        let cfg = SynthConfig {
            outlier_fraction: 0.4,
            matches_per_pair: 100,
            ..small_cfg()
        };
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let set = generate_correspondences(&scene, &rig, (0, 2.0, 1, 2.0), &cfg);
        assert_eq!(set.outlier_labels.iter().filter(|&&b| b).count(), 40);
        assert_eq!(set.correspondences.len(), 100);
    }

    #[test]
    fn correspondences_are_deterministic_and_in_bounds() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let a = generate_correspondences(&scene, &rig, (0, 1.0, 3, 4.0), &cfg);
        let b = generate_correspondences(&scene, &rig, (0, 1.0, 3, 4.0), &cfg);
        assert_eq!(a.correspondences, b.correspondences);
        assert_eq!(a.outlier_labels, b.outlier_labels);
        let (wf, hf) = (cfg.image_width as f64, cfg.image_height as f64);
        for c in &a.correspondences {
            assert!(c.p_ref.x >= 0.0 && c.p_ref.x <= wf - 1.0);
            assert!(c.p_ref.y >= 0.0 && c.p_ref.y <= hf - 1.0);
            assert!(c.p_other.x >= 0.0 && c.p_other.x <= wf - 1.0);
            assert!(c.p_other.y >= 0.0 && c.p_other.y <= hf - 1.0);
        }
    }

    #[test]
    fn foreground_inlier_rate_separates_aligned_from_misaligned() {
        // At equal scene times the foreground inlier rate under RANSAC is at
        // least 0.9 * (1 - outlier_fraction); two frames of mismatch drops
        // it below half of that.
        let cfg = SynthConfig::default();
        let scene = generate_scene(&cfg);
        let rig = generate_rig(&cfg);
        let run = |t_b: f64| {
            let set = generate_correspondences(&scene, &rig, (0, 20.0, 4, t_b), &cfg);
            let fg: Vec<Correspondence> = set
                .correspondences
                .iter()
                .filter(|c| c.fg_ref && c.fg_other)
                .cloned()
                .collect();
            let total = fg.len();
            let inliers = match crate::geometry::ransac_fundamental(&fg, 500, 2.0, 11) {
                Ok(r) => r.inlier_indices.len(),
                Err(_) => 0,
            };
            (inliers as f64, total as f64)
        };
        let (aligned_in, aligned_total) = run(20.0);
        assert!(aligned_total >= 12.0, "foreground starved: {aligned_total}");
        let aligned_rate = aligned_in / aligned_total;
        assert!(
            aligned_rate >= 0.9 * (1.0 - cfg.outlier_fraction),
            "aligned inlier rate {aligned_rate}"
        );
        let (off_in, off_total) = run(22.0);
        let off_rate = off_in / off_total.max(1.0);
        assert!(
            off_rate < 0.5 * aligned_rate,
            "misaligned rate {off_rate} vs aligned {aligned_rate}"
        );
    }
}

