//! Scene representation: Gaussian primitives, the analytic deformation
//! model, cameras, and the per-camera time-offset model.
//!
//! Timestamps throughout the crate are expressed in frames of the reference
//! camera. `frame_rate` converts to seconds only inside the deformation
//! evaluation.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("camera index {index} out of range (have {count} cameras)")]
    InvalidCameraIndex { index: usize, count: usize },
    #[error("invalid gaussian: {0}")]
    InvalidGaussian(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid time model: {0}")]
    InvalidTimeModel(String),
}

/// One anisotropic 3D Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vector3<f64>,
    /// Opacity in `[0, 1]`.
    pub opacity: f64,
    /// RGB color, each channel in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn new(
        center: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, SceneError> {
        let g = Self {
            center,
            rotation,
            scale,
            opacity,
            color,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidGaussian(format!(
                "quaternion norm {} not unit",
                self.rotation.norm()
            )));
        }
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(SceneError::InvalidGaussian(format!(
                "non-positive scale {:?}",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(SceneError::InvalidGaussian(format!(
                "opacity {} outside [0,1]",
                self.opacity
            )));
        }
        for c in self.color.iter() {
            if !(0.0..=1.0).contains(c) {
                return Err(SceneError::InvalidGaussian(format!(
                    "color channel {c} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Analytic per-Gaussian motion: a sinusoidal center offset.
///
/// The offset at time `t` (frames) is
/// `amplitude * sin(angular_frequency * t / frame_rate + phase)`,
/// smooth in `t` by construction. `static_flag` pins the offset to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationModel {
    /// World-unit amplitude vector.
    pub amplitude: Vector3<f64>,
    /// Radians per second.
    pub angular_frequency: f64,
    /// Radians.
    pub phase: f64,
    pub static_flag: bool,
}

impl DeformationModel {
    pub fn fixed() -> Self {
        Self {
            amplitude: Vector3::zeros(),
            angular_frequency: 0.0,
            phase: 0.0,
            static_flag: true,
        }
    }

    /// Center offset at time `t` (frames).
    pub fn offset_at(&self, t: f64, frame_rate: f64) -> Vector3<f64> {
        if self.static_flag {
            return Vector3::zeros();
        }
        let s = (self.angular_frequency * t / frame_rate + self.phase).sin();
        self.amplitude * s
    }

    /// Time derivative of the offset, in world units per frame.
    pub fn velocity_at(&self, t: f64, frame_rate: f64) -> Vector3<f64> {
        if self.static_flag {
            return Vector3::zeros();
        }
        let c = (self.angular_frequency * t / frame_rate + self.phase).cos();
        self.amplitude * (self.angular_frequency / frame_rate) * c
    }
}

/// Evaluates a Gaussian at time `t`: the center moves along its trajectory,
/// every other field is copied verbatim.
pub fn gaussian_at_time(
    g: &Gaussian3D,
    d: &DeformationModel,
    t: f64,
    frame_rate: f64,
) -> Gaussian3D {
    let mut out = g.clone();
    out.center += d.offset_at(t, frame_rate);
    out
}

/// Standard sin/cos frequency encoding.
///
/// Per input component, emits `sin(2^b pi x), cos(2^b pi x)` for
/// `b = 0..bands`, component-major. Output length is `2 * bands * x.len()`.
pub fn positional_encoding(x: &[f64], bands: usize) -> Vec<f64> {
    assert!(bands >= 1, "positional_encoding: bands must be >= 1");
    let mut out = Vec::with_capacity(2 * bands * x.len());
    for &xi in x {
        for b in 0..bands {
            let arg = (1u64 << b) as f64 * std::f64::consts::PI * xi;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Pinhole camera: intrinsics `K`, rigid world-to-camera transform, image
/// size in pixels, and the stream's frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Upper-triangular `K` with positive focal entries.
    pub intrinsics: Matrix3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub image_width: u32,
    pub image_height: u32,
    /// Frames per second.
    pub frame_rate: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<(), SceneError> {
        let k = &self.intrinsics;
        if k[(1, 0)].abs() > 1e-12 || k[(2, 0)].abs() > 1e-12 || k[(2, 1)].abs() > 1e-12 {
            return Err(SceneError::InvalidCamera(
                "intrinsics not upper-triangular".into(),
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(SceneError::InvalidCamera("non-positive focal".into()));
        }
        let r = self.rotation.to_rotation_matrix();
        if (r.matrix().determinant() - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidCamera("rotation determinant != 1".into()));
        }
        if self.frame_rate <= 0.0 {
            return Err(SceneError::InvalidCamera("non-positive frame rate".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    #[inline]
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    #[inline]
    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }
    #[inline]
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// World point into the camera frame.
    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center_world(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Exact pinhole projection of a world point; `None` behind the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        let u = (self.fx() * pc.x + self.skew() * pc.y) / pc.z + self.cx();
        let v = self.fy() * pc.y / pc.z + self.cy();
        Some((u, v))
    }

    /// The 3x4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        rt.set_column(3, &self.translation.into());
        self.intrinsics * rt
    }

    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up_hint: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        image_width: u32,
        image_height: u32,
        frame_rate: f64,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = up_hint.cross(&z).normalize();
        let y = z.cross(&x);
        // Rows of R map world axes onto camera axes (x right, y down-ish, z forward).
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(rotation * eye);
        Self {
            intrinsics,
            rotation,
            translation,
            image_width,
            image_height,
            frame_rate,
        }
    }
}

/// A full scene: Gaussian primitives paired with their deformation models.
/// Dynamic foreground primitives are the ones whose deformation has
/// `static_flag == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub gaussians: Vec<Gaussian3D>,
    pub deformations: Vec<DeformationModel>,
}

impl SceneModel {
    pub fn new(gaussians: Vec<Gaussian3D>, deformations: Vec<DeformationModel>) -> Self {
        assert_eq!(gaussians.len(), deformations.len());
        Self {
            gaussians,
            deformations,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn num_dynamic(&self) -> usize {
        self.deformations.iter().filter(|d| !d.static_flag).count()
    }

    /// The dynamic-foreground sub-scene (used for mask rendering).
    pub fn dynamic_subscene(&self) -> SceneModel {
        let mut gaussians = Vec::new();
        let mut deformations = Vec::new();
        for (g, d) in self.gaussians.iter().zip(&self.deformations) {
            if !d.static_flag {
                gaussians.push(g.clone());
                deformations.push(d.clone());
            }
        }
        SceneModel {
            gaussians,
            deformations,
        }
    }
}

/// Per-camera time offsets: integer coarse part plus continuous residual.
///
/// The reference camera's residual is pinned to zero; a global shift of all
/// clocks is unobservable, so one camera fixes the gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeModel {
    coarse_offsets: Vec<i32>,
    fine_offsets: Vec<f64>,
    reference_camera: usize,
}

impl TimeModel {
    /// All offsets zero; `effective_time` is the identity.
    pub fn identity(num_cameras: usize, reference_camera: usize) -> Self {
        assert!(reference_camera < num_cameras);
        Self {
            coarse_offsets: vec![0; num_cameras],
            fine_offsets: vec![0.0; num_cameras],
            reference_camera,
        }
    }

    pub fn new(
        coarse_offsets: Vec<i32>,
        fine_offsets: Vec<f64>,
        reference_camera: usize,
    ) -> Result<Self, SceneError> {
        if coarse_offsets.len() != fine_offsets.len() {
            return Err(SceneError::InvalidTimeModel(
                "coarse/fine length mismatch".into(),
            ));
        }
        if reference_camera >= coarse_offsets.len() {
            return Err(SceneError::InvalidTimeModel(
                "reference camera out of range".into(),
            ));
        }
        if fine_offsets[reference_camera] != 0.0 {
            return Err(SceneError::InvalidTimeModel(
                "reference camera fine offset must be 0".into(),
            ));
        }
        Ok(Self {
            coarse_offsets,
            fine_offsets,
            reference_camera,
        })
    }

    pub fn num_cameras(&self) -> usize {
        self.coarse_offsets.len()
    }

    pub fn reference_camera(&self) -> usize {
        self.reference_camera
    }

    pub fn coarse_offsets(&self) -> &[i32] {
        &self.coarse_offsets
    }

    pub fn fine_offsets(&self) -> &[f64] {
        &self.fine_offsets
    }

    pub fn set_coarse_offset(&mut self, camera: usize, delta_t: i32) {
        self.coarse_offsets[camera] = delta_t;
    }

    /// Sets a residual offset. Writes to the reference camera are ignored to
    /// preserve the gauge.
    pub fn set_fine_offset(&mut self, camera: usize, tau: f64) {
        if camera != self.reference_camera {
            self.fine_offsets[camera] = tau;
        }
    }

    /// The scene timestamp queried for frame `t` of `camera_index`:
    /// `t + coarse + fine`. Negative results are legal; frame-range clamping
    /// is the caller's concern.
    pub fn effective_time(&self, camera_index: usize, t: f64) -> Result<f64, SceneError> {
        if camera_index >= self.coarse_offsets.len() {
            return Err(SceneError::InvalidCameraIndex {
                index: camera_index,
                count: self.coarse_offsets.len(),
            });
        }
        Ok(t + self.coarse_offsets[camera_index] as f64 + self.fine_offsets[camera_index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(coarse: i32, fine: f64) -> TimeModel {
        let mut tm = TimeModel::identity(2, 0);
        tm.set_coarse_offset(1, coarse);
        tm.set_fine_offset(1, fine);
        tm
    }

    #[test]
    fn effective_time_direct_substitution() {
        assert_eq!(model(3, 0.25).effective_time(1, 5.0).unwrap(), 8.25);
        assert_eq!(model(0, 0.0).effective_time(1, 7.0).unwrap(), 7.0);
        assert_eq!(model(-4, -0.5).effective_time(1, 2.0).unwrap(), -2.5);
    }

    #[test]
    fn effective_time_rejects_bad_index() {
        assert!(model(0, 0.0).effective_time(2, 0.0).is_err());
    }

    #[test]
    fn effective_time_unit_slope() {
        let tm = model(5, -0.3);
        let mut rng = crate::rng::SplitMix64::new(2);
        for _ in 0..50 {
            let t = rng.uniform(-20.0, 20.0);
            let a = rng.uniform(-5.0, 5.0);
            let lhs = tm.effective_time(1, t + a).unwrap() - tm.effective_time(1, t).unwrap();
            assert!((lhs - a).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_model_is_identity() {
        let tm = TimeModel::identity(3, 1);
        for i in 0..3 {
            assert_eq!(tm.effective_time(i, 4.5).unwrap(), 4.5);
        }
    }

    #[test]
    fn gauge_is_preserved() {
        let mut tm = TimeModel::identity(3, 1);
        tm.set_fine_offset(1, 0.7);
        assert_eq!(tm.fine_offsets()[1], 0.0);
        tm.set_fine_offset(2, 0.7);
        assert_eq!(tm.fine_offsets()[2], 0.7);
        assert!(TimeModel::new(vec![0, 0], vec![0.0, 0.1], 1).is_err());
    }

    fn sample_gaussian() -> Gaussian3D {
        Gaussian3D::new(
            Vector3::new(0.1, -0.2, 3.0),
            UnitQuaternion::from_euler_angles(0.3, -0.1, 0.9),
            Vector3::new(0.5, 0.2, 0.1),
            0.8,
            Vector3::new(0.2, 0.4, 0.6),
        )
        .unwrap()
    }

    #[test]
    fn static_flag_pins_center() {
        let g = sample_gaussian();
        let d = DeformationModel {
            amplitude: Vector3::new(2.0, 1.0, 0.5),
            angular_frequency: 3.0,
            phase: 0.4,
            static_flag: true,
        };
        for &t in &[-3.0, 0.0, 10.5] {
            assert_eq!(gaussian_at_time(&g, &d, t, 15.0), g);
        }
    }

    #[test]
    fn quarter_period_shift() {
        // sin(pi * 0.5) = 1, so the center moves by exactly the amplitude.
        let g = sample_gaussian();
        let d = DeformationModel {
            amplitude: Vector3::new(1.0, 0.0, 0.0),
            angular_frequency: std::f64::consts::PI,
            phase: 0.0,
            static_flag: false,
        };
        let fr = 2.0; // t / frame_rate = 0.5 at t = 1 frame
        let moved = gaussian_at_time(&g, &d, 1.0, fr);
        assert!((moved.center - (g.center + Vector3::new(1.0, 0.0, 0.0))).norm() < 1e-12);
        assert_eq!(moved.rotation, g.rotation);
        assert_eq!(moved.scale, g.scale);
        assert_eq!(moved.opacity, g.opacity);
        assert_eq!(moved.color, g.color);
    }

    #[test]
    fn trajectory_matches_naive_scalar_oracle() {
        let mut rng = crate::rng::SplitMix64::new(77);
        for _ in 0..30 {
            let g = sample_gaussian();
            let d = DeformationModel {
                amplitude: Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                angular_frequency: rng.uniform(0.1, 5.0),
                phase: rng.uniform(-3.0, 3.0),
                static_flag: false,
            };
            let fr = 15.0;
            let t = 0.37;
            let got = gaussian_at_time(&g, &d, t, fr).center;
            // Independent per-component evaluation of the trajectory formula.
            for axis in 0..3 {
                let want = g.center[axis]
                    + d.amplitude[axis] * (d.angular_frequency * t / fr + d.phase).sin();
                assert!((got[axis] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn velocity_matches_central_differences() {
        let mut rng = crate::rng::SplitMix64::new(31);
        let fr = 15.0;
        for _ in 0..50 {
            let d = DeformationModel {
                amplitude: Vector3::new(rng.normal(), rng.normal(), rng.normal()),
                angular_frequency: rng.uniform(0.2, 6.0),
                phase: rng.uniform(-3.0, 3.0),
                static_flag: false,
            };
            let t = rng.uniform(-10.0, 10.0);
            let h = 1e-4;
            let fd = (d.offset_at(t + h, fr) - d.offset_at(t - h, fr)) / (2.0 * h);
            let v = d.velocity_at(t, fr);
            let rel = (fd - v).norm() / v.norm().max(1e-12);
            assert!(rel < 1e-5, "rel err {rel}");
        }
    }

    #[test]
    fn positional_encoding_reference_values() {
        let e = positional_encoding(&[0.0], 2);
        assert_eq!(e.len(), 4);
        for (got, want) in e.iter().zip([0.0, 1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let e = positional_encoding(&[1.0], 1);
        assert!((e[0] - std::f64::consts::PI.sin()).abs() < 1e-15);
        assert!((e[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn positional_encoding_matches_per_component_oracle() {
        let x = [0.25, 0.5];
        let e = positional_encoding(&x, 2);
        assert_eq!(e.len(), 8);
        let mut k = 0;
        for &xi in &x {
            for b in 0..2 {
                let arg = (1u64 << b) as f64 * std::f64::consts::PI * xi;
                assert!((e[k] - arg.sin()).abs() < 1e-15);
                assert!((e[k + 1] - arg.cos()).abs() < 1e-15);
                k += 2;
            }
        }
    }

    #[test]
    fn gaussian_validation_rejects_bad_fields() {
        let mut g = sample_gaussian();
        g.opacity = 1.5;
        assert!(g.validate().is_err());
        let mut g = sample_gaussian();
        g.scale.y = 0.0;
        assert!(g.validate().is_err());
        let mut g = sample_gaussian();
        g.color.x = -0.1;
        assert!(g.validate().is_err());
    }

    #[test]
    fn look_at_camera_is_valid_and_centered() {
        let k = Matrix3::new(150.0, 0.0, 64.0, 0.0, 150.0, 64.0, 0.0, 0.0, 1.0);
        let eye = Vector3::new(3.0, 1.0, -4.0);
        let target = Vector3::new(0.1, 0.2, 0.3);
        let cam = Camera::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0), k, 128, 128, 15.0);
        cam.validate().unwrap();
        let (u, v) = cam.project_point(&target).unwrap();
        assert!((u - 64.0).abs() < 1e-9);
        assert!((v - 64.0).abs() < 1e-9);
        assert!((cam.center_world() - eye).norm() < 1e-9);
    }
}
