//! CPU 3D Gaussian splatting with analytic gradients for poses and Gaussians.
//!
//! Poses are camera-from-world: `μ_c = R(q) μ + t`. Pixel `(row, col)` sits
//! at image coordinate `u = (col, row)`.

mod backward;
mod render;
mod ssim;

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_point_jacobian, rotation_matrix_derivatives};
use crate::{Pose, Quat};

pub use backward::{backward, gaussian_gradients, pose_gradients, Gradients, GaussianGradient, PoseGradient};
pub use render::{render, render_with, Contribution, Projected, RenderOutput};
pub use ssim::{ssim, ssim_value, SsimOutput, SSIM_C1, SSIM_C2, SSIM_RADIUS, SSIM_SIGMA};

pub const Z_NEAR: f64 = 0.01;
pub const BLUR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Gaussian3D {
            mean,
            scale: Vector3::repeat(sigma),
            rotation: Quat::identity(),
            opacity,
            color,
        }
    }

    /// World covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.rotation_matrix();
        r * Matrix3::from_diagonal(&self.scale.component_mul(&self.scale)) * r.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::spec("gaussian.scale", "components must be positive"));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::spec("gaussian.opacity", "must be in (0, 1]"));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::spec("gaussian.color", "components must be in [0, 1]"));
        }
        if !self.mean.iter().all(|m| m.is_finite()) {
            return Err(Error::spec("gaussian.mean", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Pinhole camera with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::spec("intrinsics.fx/fy", "focal lengths must be positive"));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::spec("intrinsics.width/height", "must be >= 1"));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel coordinate `(u, v)` with unit depth.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub z_near: f64,
    /// Isotropic floor added to every projected covariance, px².
    pub blur: f64,
    /// Scissor half-extent in standard deviations of the projected Gaussian.
    pub extent_sigmas: f64,
    pub alpha_max: f64,
    pub transmittance_min: f64,
    /// Cull means whose `|x/z|` or `|y/z|` exceeds this multiple of the
    /// image half-extent. Without it, off-screen Gaussians barely in front
    /// of the camera project to enormous footprints.
    pub frustum_margin: Option<f64>,
    /// Keep per-pixel contributor lists for the backward pass.
    pub keep_contributors: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            z_near: Z_NEAR,
            blur: BLUR,
            extent_sigmas: 3.0,
            alpha_max: 0.999,
            transmittance_min: 1e-4,
            frustum_margin: Some(1.3),
            keep_contributors: true,
        }
    }
}

fn check_depth(mu_c: &Vector3<f64>, z_near: f64) -> Result<()> {
    if mu_c.z <= z_near || !mu_c.z.is_finite() {
        return Err(Error::BehindCamera { z: mu_c.z });
    }
    Ok(())
}

pub(crate) fn project_camera_point(mu_c: &Vector3<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new(k.fx * mu_c.x / mu_c.z + k.cx, k.fy * mu_c.y / mu_c.z + k.cy)
}

/// Pixel position and camera-frame position of a world point.
pub fn project_mean(mu: &Vector3<f64>, pose: &Pose, k: &CameraIntrinsics) -> Result<(Vector2<f64>, Vector3<f64>)> {
    let mu_c = pose.apply(mu);
    check_depth(&mu_c, Z_NEAR)?;
    Ok((project_camera_point(&mu_c, k), mu_c))
}

pub(crate) fn jacobian_unchecked(mu_c: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / mu_c.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * mu_c.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * mu_c.y * iz2,
    )
}

/// `∂π/∂μ_c`, the 2×3 Jacobian of the pinhole projection.
pub fn projection_jacobian(mu_c: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Matrix2x3<f64>> {
    check_depth(mu_c, Z_NEAR)?;
    Ok(jacobian_unchecked(mu_c, k))
}

/// `∂J/∂μ_c[m]` for `m = x, y, z`.
pub(crate) fn jacobian_derivatives(mu_c: &Vector3<f64>, k: &CameraIntrinsics) -> [Matrix2x3<f64>; 3] {
    let iz = 1.0 / mu_c.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    [
        Matrix2x3::new(0.0, 0.0, -k.fx * iz2, 0.0, 0.0, 0.0),
        Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -k.fy * iz2),
        Matrix2x3::new(
            -k.fx * iz2,
            0.0,
            2.0 * k.fx * mu_c.x * iz3,
            0.0,
            -k.fy * iz2,
            2.0 * k.fy * mu_c.y * iz3,
        ),
    ]
}

/// `J W Σ Wᵀ Jᵀ` for a fixed projection Jacobian. No translation enters.
pub fn project_covariance_fixed(cov_world: &Matrix3<f64>, w: &Matrix3<f64>, j: &Matrix2x3<f64>) -> Matrix2<f64> {
    let jw = j * w;
    jw * cov_world * jw.transpose()
}

/// Screen-space covariance including the blur floor.
pub fn project_covariance(g: &Gaussian3D, pose: &Pose, k: &CameraIntrinsics) -> Result<Matrix2<f64>> {
    let mu_c = pose.apply(&g.mean);
    let j = projection_jacobian(&mu_c, k)?;
    let w = pose.rotation.rotation_matrix();
    Ok(project_covariance_fixed(&g.covariance(), &w, &j) + Matrix2::identity() * BLUR)
}

/// Derivatives of the projected covariance with respect to the pose.
///
/// `*_w` hold the rotation route through `W` with `J` fixed; `*_j` hold the
/// route through `J(μ_c)`. The translation has no `W` route.
#[derive(Clone, Debug)]
pub struct CovariancePoseDerivatives {
    pub rotation_w: [Matrix2<f64>; 4],
    pub rotation_j: [Matrix2<f64>; 4],
    pub translation_w: [Matrix2<f64>; 3],
    pub translation_j: [Matrix2<f64>; 3],
}

impl CovariancePoseDerivatives {
    pub fn rotation(&self, k: usize) -> Matrix2<f64> {
        self.rotation_w[k] + self.rotation_j[k]
    }

    pub fn translation(&self, m: usize) -> Matrix2<f64> {
        self.translation_w[m] + self.translation_j[m]
    }
}

pub fn covariance_pose_derivatives(g: &Gaussian3D, pose: &Pose, k: &CameraIntrinsics) -> Result<CovariancePoseDerivatives> {
    let mu_c = pose.apply(&g.mean);
    let j = projection_jacobian(&mu_c, k)?;
    let w = pose.rotation.rotation_matrix();
    let cov = g.covariance();
    let m = w * cov * w.transpose();
    let dj = jacobian_derivatives(&mu_c, k);
    let j_route = |d: &Matrix2x3<f64>| {
        let a = d * m * j.transpose();
        a + a.transpose()
    };
    let dw = rotation_matrix_derivatives(&pose.rotation);
    let dmu_dq = quat_point_jacobian(&pose.rotation, &g.mean);

    let mut rotation_w = [Matrix2::zeros(); 4];
    let mut rotation_j = [Matrix2::zeros(); 4];
    for kq in 0..4 {
        let a = dw[kq] * cov * w.transpose();
        rotation_w[kq] = j * (a + a.transpose()) * j.transpose();
        let col = dmu_dq.column(kq);
        let d = dj[0] * col[0] + dj[1] * col[1] + dj[2] * col[2];
        rotation_j[kq] = j_route(&d);
    }
    let translation_j = [j_route(&dj[0]), j_route(&dj[1]), j_route(&dj[2])];
    Ok(CovariancePoseDerivatives {
        rotation_w,
        rotation_j,
        translation_w: [Matrix2::zeros(); 3],
        translation_j,
    })
}

pub fn write_scene(path: &Path, gaussians: &[Gaussian3D]) -> Result<()> {
    let text = serde_json::to_string_pretty(gaussians).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Vec<Gaussian3D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: Vec<Gaussian3D> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    for (i, g) in scene.iter().enumerate() {
        g.validate().map_err(|e| Error::format(path, format!("gaussian {i}: {e}")))?;
    }
    Ok(scene)
}
