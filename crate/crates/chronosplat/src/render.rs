//! CPU rasterizer for 3D Gaussian scenes.
//!
//! Projects time-evolved Gaussians to the image plane, evaluates the
//! projected densities and alpha-composites them front to back into RGB,
//! depth and accumulated-alpha buffers. Pixels are sampled at integer
//! coordinates. Also hosts the reverse-mode gradients the fine alignment
//! stage needs: the derivative of a rendered image with respect to the
//! query timestamp, per-Gaussian centers, and opacities.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::scene::{Camera, DeformationModel, Gaussian3D, TimeModel};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Gaussian2D {
    /// Pixel-space mean.
    pub mean: Vector2<f64>,
    /// Pixel-space covariance, symmetric positive semidefinite.
    pub covariance: Matrix2<f64>,
    /// Camera-frame depth, positive for anything that survives culling.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Rendered output: RGB, depth (transmittance-weighted mean, 0 where
/// nothing contributes) and accumulated alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major, channel-interleaved, values in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Image {
    pub fn constant(width: u32, height: u32, color: Vector3<f64>) -> Self {
        let n = (width * height) as usize;
        let mut rgb = Vec::with_capacity(3 * n);
        for _ in 0..n {
            rgb.extend_from_slice(&[color.x, color.y, color.z]);
        }
        Self {
            width,
            height,
            rgb,
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }

    #[inline]
    pub fn pixel_index(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    #[inline]
    pub fn rgb_at(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * self.pixel_index(x, y);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.rgb
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }
}

/// Rasterization knobs. The defaults match the documented contract: black
/// background, near plane 0.01, footprints truncated at Mahalanobis
/// distance 3.
#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub background: Vector3<f64>,
    pub near_plane: f64,
    /// Footprint truncation radius in standard deviations.
    pub sigma_cutoff: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: Vector3::zeros(),
            near_plane: 0.01,
            sigma_cutoff: 3.0,
        }
    }
}

/// Added to the projected covariance diagonal before inversion; guards
/// degenerate edge-on footprints.
const COV_REG: f64 = 1e-8;
/// Transmittance below which a pixel is considered saturated.
const TRANSMITTANCE_FLOOR: f64 = 1e-14;

/// `R * S * S^T * R^T` for a quaternion rotation and per-axis scales.
pub fn covariance_from_rotation_scale(
    rotation: &nalgebra::UnitQuaternion<f64>,
    scale: &Vector3<f64>,
) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    r.matrix() * s2 * r.matrix().transpose()
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
#[inline]
fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (half_trace * half_trace - det).max(0.0).sqrt();
    half_trace + disc
}

/// Jacobian of the pixel projection `(u, v)` with respect to the
/// camera-frame point, evaluated at `pc`.
#[inline]
fn projection_jacobian(camera: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, fy, sk) = (camera.fx(), camera.fy(), camera.skew());
    let z = pc.z;
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        fx * iz,
        sk * iz,
        -(fx * pc.x + sk * pc.y) * iz2,
        0.0,
        fy * iz,
        -fy * pc.y * iz2,
    )
}

/// Everything the rasterizer and the backward pass need about one splat.
pub(crate) struct ProjectedSplat {
    /// Index into the input Gaussian list (also the depth tie-breaker).
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Inverse of the regularized projected covariance.
    pub cov_inv: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Camera-frame center.
    pub pc: Vector3<f64>,
    /// Camera-frame covariance (before projection).
    pub cov_cam: Matrix3<f64>,
    /// Projection Jacobian at `pc`.
    pub jac: Matrix2x3<f64>,
    /// Inclusive pixel bounding box (x0, y0, x1, y1).
    pub bbox: (u32, u32, u32, u32),
}

fn project_internal(
    g: &Gaussian3D,
    camera: &Camera,
    opts: &RenderOptions,
    index: usize,
) -> Option<ProjectedSplat> {
    let pc = camera.to_camera(&g.center);
    if pc.z <= opts.near_plane {
        return None;
    }
    let iz = 1.0 / pc.z;
    let mean = Vector2::new(
        (camera.fx() * pc.x + camera.skew() * pc.y) * iz + camera.cx(),
        camera.fy() * pc.y * iz + camera.cy(),
    );

    let rot = camera.rotation.to_rotation_matrix();
    let cov_world = covariance_from_rotation_scale(&g.rotation, &g.scale);
    let cov_cam = rot.matrix() * cov_world * rot.matrix().transpose();
    let jac = projection_jacobian(camera, &pc);
    let mut cov2d = jac * cov_cam * jac.transpose();
    cov2d[(0, 0)] += COV_REG;
    cov2d[(1, 1)] += COV_REG;

    let radius = opts.sigma_cutoff * max_eigenvalue_2x2(&cov2d).sqrt();
    let (w, h) = (camera.image_width as f64, camera.image_height as f64);
    if mean.x < -radius || mean.x > w - 1.0 + radius || mean.y < -radius || mean.y > h - 1.0 + radius
    {
        return None;
    }

    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    let cov_inv = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    let x0 = (mean.x - radius).floor().max(0.0) as u32;
    let y0 = (mean.y - radius).floor().max(0.0) as u32;
    let x1 = (mean.x + radius).ceil().min(w - 1.0) as u32;
    let y1 = (mean.y + radius).ceil().min(h - 1.0) as u32;

    Some(ProjectedSplat {
        index,
        mean,
        cov_inv,
        depth: pc.z,
        opacity: g.opacity,
        color: g.color,
        pc,
        cov_cam,
        jac,
        bbox: (x0, y0, x1, y1),
    })
}

/// Projects one Gaussian; `None` means culled (behind the near plane or more
/// than `sigma_cutoff` projected standard deviations outside the image).
pub fn project_gaussian(
    g: &Gaussian3D,
    camera: &Camera,
    opts: &RenderOptions,
) -> Option<Gaussian2D> {
    let s = project_internal(g, camera, opts, 0)?;
    let mut cov = s.jac * s.cov_cam * s.jac.transpose();
    // Report the unregularized projected covariance.
    cov = 0.5 * (cov + cov.transpose());
    Some(Gaussian2D {
        mean: s.mean,
        covariance: cov,
        depth: s.depth,
        opacity: s.opacity,
        color: s.color,
    })
}

pub(crate) fn project_and_sort(
    gaussians: &[Gaussian3D],
    deformations: &[DeformationModel],
    camera: &Camera,
    t_effective: f64,
    opts: &RenderOptions,
) -> Vec<ProjectedSplat> {
    assert_eq!(gaussians.len(), deformations.len());
    let mut splats: Vec<ProjectedSplat> = gaussians
        .iter()
        .zip(deformations)
        .enumerate()
        .filter_map(|(i, (g, d))| {
            let gt = crate::scene::gaussian_at_time(g, d, t_effective, camera.frame_rate);
            project_internal(&gt, camera, opts, i)
        })
        .collect();
    // Front to back; ties resolved by creation index so the output is a
    // function of the input list as a set plus indices.
    splats.sort_unstable_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    splats
}

fn composite(splats: &[ProjectedSplat], camera: &Camera, opts: &RenderOptions) -> Image {
    let (w, h) = (camera.image_width, camera.image_height);
    let n = (w * h) as usize;
    let mut rgb = vec![0.0f64; 3 * n];
    let mut depth_acc = vec![0.0f64; n];
    let mut alpha_acc = vec![0.0f64; n];
    let mut trans = vec![1.0f64; n];
    let q_max = opts.sigma_cutoff * opts.sigma_cutoff;

    for s in splats {
        let (x0, y0, x1, y1) = s.bbox;
        for y in y0..=y1 {
            let row = (y * w) as usize;
            for x in x0..=x1 {
                let p = row + x as usize;
                let t = trans[p];
                if t < TRANSMITTANCE_FLOOR {
                    continue;
                }
                let d = Vector2::new(x as f64 - s.mean.x, y as f64 - s.mean.y);
                let q = (s.cov_inv * d).dot(&d);
                if q > q_max {
                    continue;
                }
                let wgt = s.opacity * (-0.5 * q).exp();
                let contrib = wgt * t;
                rgb[3 * p] += s.color.x * contrib;
                rgb[3 * p + 1] += s.color.y * contrib;
                rgb[3 * p + 2] += s.color.z * contrib;
                depth_acc[p] += s.depth * contrib;
                alpha_acc[p] += contrib;
                trans[p] = t * (1.0 - wgt);
            }
        }
    }

    let mut depth = vec![0.0f64; n];
    for p in 0..n {
        rgb[3 * p] += opts.background.x * trans[p];
        rgb[3 * p + 1] += opts.background.y * trans[p];
        rgb[3 * p + 2] += opts.background.z * trans[p];
        if alpha_acc[p] > 0.0 {
            depth[p] = depth_acc[p] / alpha_acc[p];
        }
    }
    Image {
        width: w,
        height: h,
        rgb,
        depth,
        alpha: alpha_acc,
    }
}

/// Renders the scene as seen by `camera` at frame timestamp `t`. The time
/// fed to the deformation model is `time_model.effective_time(camera_index, t)`.
pub fn render(
    gaussians: &[Gaussian3D],
    deformations: &[DeformationModel],
    camera: &Camera,
    t: f64,
    time_model: &TimeModel,
    camera_index: usize,
    opts: &RenderOptions,
) -> Image {
    let t_eff = time_model
        .effective_time(camera_index, t)
        .expect("render: camera index out of range");
    let splats = project_and_sort(gaussians, deformations, camera, t_eff, opts);
    composite(&splats, camera, opts)
}

/// Mean absolute RGB difference between two images of equal size.
pub fn photometric_loss(rendered: &Image, target: &Image) -> Result<f64, RenderError> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(RenderError::DimensionMismatch(
            rendered.width,
            rendered.height,
            target.width,
            target.height,
        ));
    }
    let n = rendered.rgb.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += (rendered.rgb[i] - target.rgb[i]).abs();
    }
    Ok(acc / n as f64)
}

// ---------------------------------------------------------------------------
// Reverse-mode gradients.
//
// The fine alignment stage needs d(loss)/d(timestamp) and, in joint mode,
// d(loss)/d(center) and d(loss)/d(opacity). The forward pass below saves
// per-pixel contribution lists; `backward` replays them back to front.
// ---------------------------------------------------------------------------

struct Contribution {
    /// Index into the saved splat list.
    slot: u32,
    /// Blending weight alpha * exp(-q/2).
    weight: f64,
    /// Transmittance in front of this contribution.
    trans: f64,
    /// Offset pixel - mean.
    d: Vector2<f64>,
}

/// Forward rasterization with everything saved for a backward pass.
pub(crate) struct SavedRender {
    pub image: Image,
    splats: Vec<ProjectedSplat>,
    /// Per-pixel contribution lists, front to back.
    contribs: Vec<Vec<Contribution>>,
    final_trans: Vec<f64>,
    background: Vector3<f64>,
}

/// Gradients of a scalar function of the rendered RGB image.
pub(crate) struct SceneGrads {
    /// Derivative with respect to the query timestamp (frames).
    pub d_time: f64,
    /// Per-Gaussian world-frame center gradients.
    pub d_centers: Vec<Vector3<f64>>,
    /// Per-Gaussian opacity gradients.
    pub d_opacities: Vec<f64>,
}

pub(crate) fn render_saved(
    gaussians: &[Gaussian3D],
    deformations: &[DeformationModel],
    camera: &Camera,
    t: f64,
    time_model: &TimeModel,
    camera_index: usize,
    opts: &RenderOptions,
) -> SavedRender {
    let t_eff = time_model
        .effective_time(camera_index, t)
        .expect("render_saved: camera index out of range");
    let splats = project_and_sort(gaussians, deformations, camera, t_eff, opts);

    let (w, h) = (camera.image_width, camera.image_height);
    let n = (w * h) as usize;
    let mut rgb = vec![0.0f64; 3 * n];
    let mut depth_acc = vec![0.0f64; n];
    let mut alpha_acc = vec![0.0f64; n];
    let mut trans = vec![1.0f64; n];
    let mut contribs: Vec<Vec<Contribution>> = (0..n).map(|_| Vec::new()).collect();
    let q_max = opts.sigma_cutoff * opts.sigma_cutoff;

    for (slot, s) in splats.iter().enumerate() {
        let (x0, y0, x1, y1) = s.bbox;
        for y in y0..=y1 {
            let row = (y * w) as usize;
            for x in x0..=x1 {
                let p = row + x as usize;
                let t = trans[p];
                if t < TRANSMITTANCE_FLOOR {
                    continue;
                }
                let d = Vector2::new(x as f64 - s.mean.x, y as f64 - s.mean.y);
                let q = (s.cov_inv * d).dot(&d);
                if q > q_max {
                    continue;
                }
                let wgt = s.opacity * (-0.5 * q).exp();
                let contrib = wgt * t;
                rgb[3 * p] += s.color.x * contrib;
                rgb[3 * p + 1] += s.color.y * contrib;
                rgb[3 * p + 2] += s.color.z * contrib;
                depth_acc[p] += s.depth * contrib;
                alpha_acc[p] += contrib;
                trans[p] = t * (1.0 - wgt);
                // Contributions this small move gradients by less than the
                // checking tolerances; not saving them keeps the backward
                // lists short.
                if contrib > 1e-10 {
                    contribs[p].push(Contribution {
                        slot: slot as u32,
                        weight: wgt,
                        trans: t,
                        d,
                    });
                }
            }
        }
    }

    let mut depth = vec![0.0f64; n];
    for p in 0..n {
        rgb[3 * p] += opts.background.x * trans[p];
        rgb[3 * p + 1] += opts.background.y * trans[p];
        rgb[3 * p + 2] += opts.background.z * trans[p];
        if alpha_acc[p] > 0.0 {
            depth[p] = depth_acc[p] / alpha_acc[p];
        }
    }

    SavedRender {
        image: Image {
            width: w,
            height: h,
            rgb,
            depth,
            alpha: alpha_acc,
        },
        splats,
        contribs,
        final_trans: trans,
        background: opts.background,
    }
}

impl SavedRender {
    /// Propagates per-pixel RGB adjoints back to the timestamp, Gaussian
    /// centers and opacities. `adjoint` has the layout of `Image::rgb`.
    ///
    /// The chain runs loss -> blending weights -> projected means and
    /// covariances -> camera-frame centers -> world centers, and the time
    /// gradient contracts the center gradients with the deformation
    /// velocities at the rendered timestamp.
    pub(crate) fn backward(
        &self,
        adjoint: &[f64],
        velocities_world: &[Vector3<f64>],
        num_gaussians: usize,
        camera: &Camera,
    ) -> SceneGrads {
        assert_eq!(adjoint.len(), self.image.rgb.len());
        let n_slots = self.splats.len();
        let mut g_mean = vec![Vector2::<f64>::zeros(); n_slots];
        let mut g_cov_inv = vec![Matrix2::<f64>::zeros(); n_slots];
        let mut g_opacity_slot = vec![0.0f64; n_slots];

        for p in 0..self.contribs.len() {
            let list = &self.contribs[p];
            if list.is_empty() {
                continue;
            }
            let adj = Vector3::new(adjoint[3 * p], adjoint[3 * p + 1], adjoint[3 * p + 2]);
            if adj == Vector3::zeros() {
                continue;
            }
            // Color composited behind the current contribution, including
            // the background term.
            let mut behind = self.background * self.final_trans[p];
            for c in list.iter().rev() {
                let s = &self.splats[c.slot as usize];
                let one_minus = 1.0 - c.weight;
                // dC/dw for this contribution.
                let dc_dw = if one_minus.abs() > 1e-300 {
                    s.color * c.trans - behind / one_minus
                } else {
                    s.color * c.trans
                };
                let a_w = adj.dot(&dc_dw);
                // w = opacity * exp(-q/2)
                let g_exp = (-0.5 * (s.cov_inv * c.d).dot(&c.d)).exp();
                g_opacity_slot[c.slot as usize] += a_w * g_exp;
                let a_q = -0.5 * a_w * c.weight;
                // q = d^T M d, d = pixel - mean.
                g_mean[c.slot as usize] += a_q * -2.0 * (s.cov_inv * c.d);
                g_cov_inv[c.slot as usize] += a_q * (c.d * c.d.transpose());
                behind += s.color * (c.weight * c.trans);
            }
        }

        let rot = camera.rotation.to_rotation_matrix();
        let mut d_centers = vec![Vector3::<f64>::zeros(); num_gaussians];
        let mut d_opacities = vec![0.0f64; num_gaussians];
        let mut d_time = 0.0;

        for (slot, s) in self.splats.iter().enumerate() {
            d_opacities[s.index] += g_opacity_slot[slot];

            // Mean path: mu' = pi(pc), d mu'/d pc = J.
            let mut g_pc: Vector3<f64> = s.jac.transpose() * g_mean[slot];

            // Covariance path: M = (J Sc J^T + reg)^-1, dL/dSigma' = -M G M
            // with G the accumulated dL/dM.
            let g_m = &g_cov_inv[slot];
            if g_m.amax() > 0.0 || g_m.amin() < 0.0 {
                let g_sigma = -(s.cov_inv * g_m * s.cov_inv);
                // dL/dJ = 2 * g_sigma * J * Sc (g_sigma symmetric).
                let g_j: Matrix2x3<f64> = 2.0 * (g_sigma * s.jac * s.cov_cam);
                let (fx, fy, sk) = (camera.fx(), camera.fy(), camera.skew());
                let (x, y, z) = (s.pc.x, s.pc.y, s.pc.z);
                let iz2 = 1.0 / (z * z);
                let iz3 = iz2 / z;
                // dJ/dx, dJ/dy, dJ/dz contracted with dL/dJ.
                g_pc.x += g_j[(0, 2)] * (-fx * iz2);
                g_pc.y += g_j[(0, 2)] * (-sk * iz2) + g_j[(1, 2)] * (-fy * iz2);
                g_pc.z += g_j[(0, 0)] * (-fx * iz2)
                    + g_j[(0, 1)] * (-sk * iz2)
                    + g_j[(0, 2)] * (2.0 * (fx * x + sk * y) * iz3)
                    + g_j[(1, 1)] * (-fy * iz2)
                    + g_j[(1, 2)] * (2.0 * fy * y * iz3);
            }

            // pc = R p_world + t.
            let g_world = rot.matrix().transpose() * g_pc;
            d_centers[s.index] += g_world;
            d_time += g_world.dot(&velocities_world[s.index]);
        }

        SceneGrads {
            d_time,
            d_centers,
            d_opacities,
        }
    }
}
