use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{jacobian_unchecked, project_camera_point, project_covariance_fixed, CameraIntrinsics, Gaussian3D, RenderSettings};
use crate::image::Image;
use crate::Pose;

/// Screen-space state of one visible Gaussian.
#[derive(Clone, Debug)]
pub struct Projected {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub mean_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// World covariance rotated into the camera frame, `W Σ Wᵀ`.
    pub cov_cam: Matrix3<f64>,
    /// Projected covariance including the blur floor.
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance in front of this Gaussian.
    pub transmittance: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub alpha: Vec<f64>,
    /// Camera depth of the first Gaussian at which accumulated alpha exceeds 0.5.
    pub depth: Vec<Option<f64>>,
    /// Visible Gaussians in compositing order.
    pub projected: Vec<Projected>,
    /// Slot in `projected` for every input Gaussian, `None` when culled.
    pub slot: Vec<Option<usize>>,
    pub contributors: Option<Vec<Vec<Contribution>>>,
    pub settings: RenderSettings,
}

fn largest_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    mid + (half * half + m[(0, 1)] * m[(1, 0)]).max(0.0).sqrt()
}

fn project(index: usize, g: &Gaussian3D, pose: &Pose, w: &Matrix3<f64>, k: &CameraIntrinsics, s: &RenderSettings) -> Option<Projected> {
    let mean_cam = pose.apply(&g.mean);
    if !(mean_cam.z > s.z_near) {
        return None;
    }
    if let Some(m) = s.frustum_margin {
        let lim_x = m * 0.5 * k.width as f64 / k.fx;
        let lim_y = m * 0.5 * k.height as f64 / k.fy;
        if (mean_cam.x / mean_cam.z).abs() > lim_x || (mean_cam.y / mean_cam.z).abs() > lim_y {
            return None;
        }
    }
    let jacobian = jacobian_unchecked(&mean_cam, k);
    let cov_world = g.covariance();
    let cov2d = project_covariance_fixed(&cov_world, w, &jacobian) + Matrix2::identity() * s.blur;
    let cov2d = 0.5 * (cov2d + cov2d.transpose());
    let conic = cov2d.try_inverse()?;
    Some(Projected {
        index,
        mean2d: project_camera_point(&mean_cam, k),
        mean_cam,
        jacobian,
        cov_cam: w * cov_world * w.transpose(),
        cov2d,
        conic,
        radius: s.extent_sigmas * largest_eigenvalue(&cov2d).sqrt(),
    })
}

pub fn render(gaussians: &[Gaussian3D], pose: &Pose, k: &CameraIntrinsics) -> RenderOutput {
    render_with(gaussians, pose, k, &RenderSettings::default())
}

pub fn render_with(gaussians: &[Gaussian3D], pose: &Pose, k: &CameraIntrinsics, settings: &RenderSettings) -> RenderOutput {
    let (width, height) = (k.width, k.height);
    let w = pose.rotation.rotation_matrix();
    let mut projected: Vec<Projected> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project(i, g, pose, &w, k, settings))
        .collect();
    projected.sort_by(|a, b| a.mean_cam.z.total_cmp(&b.mean_cam.z).then(a.index.cmp(&b.index)));
    let mut slot = vec![None; gaussians.len()];
    for (s, p) in projected.iter().enumerate() {
        slot[p.index] = Some(s);
    }

    // Bin visible Gaussians into pixels, preserving depth order.
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); width * height];
    for (s, p) in projected.iter().enumerate() {
        let c0 = (p.mean2d.x - p.radius).ceil().max(0.0);
        let c1 = (p.mean2d.x + p.radius).floor().min(width as f64 - 1.0);
        let r0 = (p.mean2d.y - p.radius).ceil().max(0.0);
        let r1 = (p.mean2d.y + p.radius).floor().min(height as f64 - 1.0);
        if !(c0 <= c1 && r0 <= r1) {
            continue;
        }
        for row in r0 as usize..=r1 as usize {
            for col in c0 as usize..=c1 as usize {
                bins[row * width + col].push(s as u32);
            }
        }
    }

    struct Pixel {
        rgb: [f64; 3],
        alpha: f64,
        depth: Option<f64>,
        list: Vec<Contribution>,
    }
    let pixels: Vec<Pixel> = bins
        .par_iter()
        .enumerate()
        .map(|(px, bin)| {
            let u = Vector2::new((px % width) as f64, (px / width) as f64);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut depth = None;
            let mut list = Vec::new();
            for &s in bin {
                let p = &projected[s as usize];
                let g = &gaussians[p.index];
                let d = u - p.mean2d;
                let power = -0.5 * d.dot(&(p.conic * d));
                let raw = g.opacity * power.exp();
                let clamped = raw > settings.alpha_max;
                let alpha = if clamped { settings.alpha_max } else { raw };
                let next = t * (1.0 - alpha);
                if next < settings.transmittance_min {
                    break;
                }
                for (c, gc) in rgb.iter_mut().zip(g.color.iter()) {
                    *c += gc * alpha * t;
                }
                if depth.is_none() && 1.0 - next > 0.5 {
                    depth = Some(p.mean_cam.z);
                }
                if settings.keep_contributors {
                    list.push(Contribution {
                        gaussian: p.index as u32,
                        alpha,
                        transmittance: t,
                        clamped,
                    });
                }
                t = next;
            }
            Pixel {
                rgb,
                alpha: 1.0 - t,
                depth,
                list,
            }
        })
        .collect();

    let mut image = Image::new(width, height);
    let mut alpha = Vec::with_capacity(pixels.len());
    let mut depth = Vec::with_capacity(pixels.len());
    let mut contributors = settings.keep_contributors.then(|| Vec::with_capacity(pixels.len()));
    for (px, p) in pixels.into_iter().enumerate() {
        image.set_pixel(px / width, px % width, p.rgb);
        alpha.push(p.alpha);
        depth.push(p.depth);
        if let Some(c) = contributors.as_mut() {
            c.push(p.list);
        }
    }
    RenderOutput {
        image,
        alpha,
        depth,
        projected,
        slot,
        contributors,
        settings: *settings,
    }
}
