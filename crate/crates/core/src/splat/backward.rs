use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{jacobian_derivatives, CameraIntrinsics, Gaussian3D, RenderOutput};
use crate::error::{Error, Result};
use crate::geometry::rotation_cotangent_to_quat;
use crate::image::Image;
use crate::Pose;

/// Rows handled per reduction chunk. Fixed so results do not depend on the pool size.
const ROWS_PER_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGradient {
    /// Gradient on the raw quaternion `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGradient {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub pose: PoseGradient,
    pub gaussians: Vec<GaussianGradient>,
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    color: Vector3<f64>,
    opacity: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.color += o.color;
        self.opacity += o.opacity;
    }
}

fn screen_gradients(gaussians: &[Gaussian3D], out: &RenderOutput, dl_dimage: &Image) -> Result<Vec<ScreenGrad>> {
    let contributors = out.contributors.as_ref().ok_or(Error::MissingForwardState)?;
    let width = out.image.width();
    let height = out.image.height();
    out.image.same_shape(dl_dimage)?;
    let n = out.projected.len();
    let chunks = height.div_ceil(ROWS_PER_CHUNK);
    let partials: Vec<Vec<ScreenGrad>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![ScreenGrad::default(); n];
            for row in c * ROWS_PER_CHUNK..((c + 1) * ROWS_PER_CHUNK).min(height) {
                for col in 0..width {
                    let list = &contributors[row * width + col];
                    if list.is_empty() {
                        continue;
                    }
                    let dl = Vector3::from(dl_dimage.pixel(row, col));
                    if dl == Vector3::zeros() {
                        continue;
                    }
                    let u = Vector2::new(col as f64, row as f64);
                    // Colour carried by everything behind the current Gaussian.
                    let mut behind = Vector3::zeros();
                    for c in list.iter().rev() {
                        let g = &gaussians[c.gaussian as usize];
                        let s = out.slot[c.gaussian as usize].expect("contributor was culled");
                        let weight = c.alpha * c.transmittance;
                        let a = &mut acc[s];
                        a.color += dl * weight;
                        let dl_dalpha = dl.dot(&(g.color * c.transmittance - behind / (1.0 - c.alpha)));
                        behind += g.color * weight;
                        if c.clamped {
                            continue;
                        }
                        let p = &out.projected[s];
                        let d = u - p.mean2d;
                        let gauss = c.alpha / g.opacity;
                        a.opacity += dl_dalpha * gauss;
                        let dl_dpower = dl_dalpha * c.alpha;
                        a.mean2d += p.conic * d * dl_dpower;
                        a.conic -= d * d.transpose() * (0.5 * dl_dpower);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![ScreenGrad::default(); n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }
    Ok(total)
}

/// Backpropagates `dL/dImage` through a forward pass to the pose and to every Gaussian.
pub fn backward(
    gaussians: &[Gaussian3D],
    pose: &Pose,
    k: &CameraIntrinsics,
    out: &RenderOutput,
    dl_dimage: &Image,
) -> Result<Gradients> {
    let screen = screen_gradients(gaussians, out, dl_dimage)?;
    let w = pose.rotation.rotation_matrix();
    let mut grad_w = Matrix3::zeros();
    let mut grad_t = Vector3::zeros();
    let mut per_gaussian = vec![GaussianGradient::default(); gaussians.len()];

    for (p, sg) in out.projected.iter().zip(&screen) {
        let g = &gaussians[p.index];
        // dL/dΣ' from dL/dΣ'^{-1}.
        let dcov2d = -(p.conic * sg.conic * p.conic);
        let dcov2d = 0.5 * (dcov2d + dcov2d.transpose());
        let j = &p.jacobian;
        let dl_dj: Matrix2x3<f64> = dcov2d * j * p.cov_cam * 2.0;
        let dl_dcov_cam = j.transpose() * dcov2d * j;

        let dj = jacobian_derivatives(&p.mean_cam, k);
        let mut dl_dmu_c = j.transpose() * sg.mean2d;
        for m in 0..3 {
            dl_dmu_c[m] += dl_dj.component_mul(&dj[m]).sum();
        }

        let cov_world = g.covariance();
        // Σ_c = W Σ Wᵀ, μ_c = W μ + t.
        grad_w += dl_dcov_cam * w * cov_world * 2.0 + dl_dmu_c * g.mean.transpose();
        grad_t += dl_dmu_c;

        let dl_dcov_world = w.transpose() * dl_dcov_cam * w;
        let rg = g.rotation.rotation_matrix();
        let local = rg.transpose() * dl_dcov_world * rg;
        let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
        per_gaussian[p.index] = GaussianGradient {
            mean: w.transpose() * dl_dmu_c,
            scale: Vector3::from_fn(|i, _| 2.0 * g.scale[i] * local[(i, i)]),
            rotation: rotation_cotangent_to_quat(&g.rotation, &(dl_dcov_world * rg * s2 * 2.0)),
            opacity: sg.opacity,
            color: sg.color,
        };
    }

    Ok(Gradients {
        pose: PoseGradient {
            rotation: rotation_cotangent_to_quat(&pose.rotation, &grad_w),
            translation: grad_t,
        },
        gaussians: per_gaussian,
    })
}

pub fn pose_gradients(
    gaussians: &[Gaussian3D],
    pose: &Pose,
    k: &CameraIntrinsics,
    out: &RenderOutput,
    dl_dimage: &Image,
) -> Result<PoseGradient> {
    Ok(backward(gaussians, pose, k, out, dl_dimage)?.pose)
}

pub fn gaussian_gradients(
    gaussians: &[Gaussian3D],
    pose: &Pose,
    k: &CameraIntrinsics,
    out: &RenderOutput,
    dl_dimage: &Image,
) -> Result<Vec<GaussianGradient>> {
    Ok(backward(gaussians, pose, k, out, dl_dimage)?.gaussians)
}
