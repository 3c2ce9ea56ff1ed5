//! Synthetic scenes, trajectories and submaps with known ground truth.
//!
//! A scene of textured surfaces is represented by flat Gaussians and rendered
//! along a camera path. Every group of frames is back-projected from the
//! rendered depth into its own local frame through a recorded similarity,
//! with optional noise and gross outliers.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::transform_pose;
use crate::image::Image;
use crate::io::{self, PixelKey};
use crate::ppm::diameter;
use crate::splat::{self, CameraIntrinsics, Gaussian3D, RenderSettings};
use crate::submap::{self, partition, Submap};
use crate::{Pose, Quat, Sim3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Arc,
    Line,
    Orbit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub inlier_alpha: f64,
    pub inlier_beta: f64,
    pub outlier_alpha: f64,
    pub outlier_beta: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            inlier_alpha: 8.0,
            inlier_beta: 2.0,
            outlier_alpha: 2.0,
            outlier_beta: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rng_seed: u64,
    pub frame_count: usize,
    pub group_size: usize,
    pub overlap_k: usize,
    pub gaussian_count: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub trajectory: TrajectoryKind,
    /// Camera path size, meters: orbit or arc radius, or line length.
    pub extent: f64,
    /// Side length of the square room, meters.
    pub scene_size: f64,
    pub per_submap_scale_range: [f64; 2],
    /// Largest rotation angle of a submap transform, degrees.
    pub per_submap_rotation_deg: f64,
    /// Largest translation component of a submap transform, in scene diameters.
    pub per_submap_translation: f64,
    /// Point noise standard deviation as a fraction of the scene diameter.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Largest outlier offset component, in scene diameters.
    pub outlier_magnitude: f64,
    pub confidence: ConfidenceModel,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rng_seed: 7,
            frame_count: 177,
            group_size: 60,
            overlap_k: 1,
            gaussian_count: 3000,
            width: 64,
            height: 48,
            fov_deg: 70.0,
            trajectory: TrajectoryKind::Orbit,
            extent: 1.4,
            scene_size: 4.0,
            per_submap_scale_range: [0.5, 2.0],
            per_submap_rotation_deg: 180.0,
            per_submap_translation: 1.0,
            noise_sigma: 0.002,
            outlier_fraction: 0.0,
            outlier_magnitude: 1.0,
            confidence: ConfidenceModel::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, f: &str| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(Error::spec(f, "must be > 0")) };
        partition(self.frame_count, self.group_size, self.overlap_k)
            .map_err(|e| Error::spec("frame_count/group_size/overlap_k", e.to_string()))?;
        if self.gaussian_count < 1 {
            return Err(Error::spec("gaussian_count", "must be >= 1"));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::spec("width/height", "must be >= 1"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::spec("fov_deg", "must be in (0, 180)"));
        }
        positive(self.extent, "extent")?;
        positive(self.scene_size, "scene_size")?;
        let [lo, hi] = self.per_submap_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::spec("per_submap_scale_range", "need 0 < lo <= hi"));
        }
        if !(self.per_submap_rotation_deg >= 0.0 && self.per_submap_rotation_deg <= 180.0) {
            return Err(Error::spec("per_submap_rotation_deg", "must be in [0, 180]"));
        }
        if !(self.per_submap_translation >= 0.0) {
            return Err(Error::spec("per_submap_translation", "must be >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::spec("noise_sigma", "must be >= 0"));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 1.0) {
            return Err(Error::spec("outlier_fraction", "must be in [0, 1)"));
        }
        if !(self.outlier_magnitude >= 0.0 && self.outlier_magnitude.is_finite()) {
            return Err(Error::spec("outlier_magnitude", "must be >= 0"));
        }
        let c = &self.confidence;
        positive(c.inlier_alpha, "confidence.inlier_alpha")?;
        positive(c.inlier_beta, "confidence.inlier_beta")?;
        positive(c.outlier_alpha, "confidence.outlier_alpha")?;
        positive(c.outlier_beta, "confidence.outlier_beta")?;
        Ok(())
    }

    /// Eight 64×64 frames on an arc, 500 Gaussians, one group.
    pub fn toy() -> Self {
        SyntheticSpec {
            frame_count: 8,
            group_size: 8,
            gaussian_count: 500,
            width: 64,
            height: 64,
            trajectory: TrajectoryKind::Arc,
            ..SyntheticSpec::default()
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_deg)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBundle {
    pub spec: SyntheticSpec,
    pub intrinsics: CameraIntrinsics,
    pub scene: Vec<Gaussian3D>,
    /// Ground-truth camera-from-world pose per frame.
    pub poses: Vec<Pose>,
    pub images: Vec<Image>,
    pub submaps: Vec<Submap>,
    /// Local-to-global transform used to build each submap.
    pub thetas: Vec<Sim3>,
    pub diameter: f64,
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SCENE: u64 = 1;
const STREAM_THETA: u64 = 2;
const STREAM_POINTS: u64 = 3;

struct Quad {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    color: Vector3<f64>,
}

impl Quad {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

fn scene_quads(size: f64) -> Vec<Quad> {
    let half = size / 2.0;
    let wall = 0.5 * size;
    let (sx, sy, sz) = (Vector3::x() * size, Vector3::y() * size, Vector3::z() * wall);
    // Floor and four walls facing inward so every ray from inside hits something.
    let mut quads = vec![
        Quad { origin: Vector3::new(-half, -half, 0.0), u: sx, v: sy, color: Vector3::new(0.55, 0.5, 0.4) },
        Quad { origin: Vector3::new(-half, -half, 0.0), u: sz, v: sx, color: Vector3::new(0.7, 0.65, 0.6) },
        Quad { origin: Vector3::new(-half, half, 0.0), u: sx, v: sz, color: Vector3::new(0.5, 0.6, 0.7) },
        Quad { origin: Vector3::new(-half, -half, 0.0), u: sy, v: sz, color: Vector3::new(0.65, 0.7, 0.5) },
        Quad { origin: Vector3::new(half, -half, 0.0), u: sz, v: sy, color: Vector3::new(0.7, 0.5, 0.6) },
    ];
    // (center x, center y, width, depth, height, colour) as fractions of the room
    let boxes = [
        (-0.12, -0.1, 0.14, 0.12, 0.12, Vector3::new(0.8, 0.25, 0.2)),
        (0.12, 0.05, 0.1, 0.14, 0.2, Vector3::new(0.2, 0.45, 0.8)),
        (-0.02, 0.15, 0.12, 0.1, 0.08, Vector3::new(0.3, 0.75, 0.3)),
    ];
    for (cx, cy, w, d, h, color) in boxes {
        let (w, d, h) = (w * size, d * size, h * size);
        let o = Vector3::new(cx * size - w / 2.0, cy * size - d / 2.0, 0.0);
        let (ex, ey, ez) = (Vector3::x() * w, Vector3::y() * d, Vector3::z() * h);
        // Each face is spanned so that u × v points outward.
        quads.push(Quad { origin: o + ez, u: ex, v: ey, color });
        quads.push(Quad { origin: o, u: ez, v: ex, color: color * 0.85 });
        quads.push(Quad { origin: o + ey, u: ex, v: ez, color: color * 0.8 });
        quads.push(Quad { origin: o, u: ey, v: ez, color: color * 0.9 });
        quads.push(Quad { origin: o + ex, u: ez, v: ey, color: color * 0.75 });
    }
    quads
}

fn texture(p: &Vector3<f64>, base: &Vector3<f64>, size: f64) -> Vector3<f64> {
    let f = std::f64::consts::TAU / size;
    let a = (3.0 * f * p.x + 1.0).sin() * (2.0 * f * p.y).cos();
    let b = (7.0 * f * (p.x + p.y + p.z)).sin();
    let c = (5.0 * f * (p.y - 0.5 * p.z) + 2.0).sin();
    Vector3::new(
        base.x * (0.7 + 0.2 * a + 0.1 * b),
        base.y * (0.7 + 0.2 * c + 0.1 * a),
        base.z * (0.7 + 0.2 * b + 0.1 * c),
    )
    .map(|v| v.clamp(0.02, 0.98))
}

/// Flat Gaussians scattered over the scene surfaces by area.
pub fn build_scene(spec: &SyntheticSpec) -> Vec<Gaussian3D> {
    let quads = scene_quads(spec.scene_size);
    let total: f64 = quads.iter().map(Quad::area).sum();
    let spacing = (total / spec.gaussian_count as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.rng_seed, STREAM_SCENE, 0));
    let mut cumulative = Vec::with_capacity(quads.len());
    let mut acc = 0.0;
    for q in &quads {
        acc += q.area();
        cumulative.push(acc);
    }
    (0..spec.gaussian_count)
        .map(|_| {
            let pick = rng.random_range(0.0..total);
            let qi = cumulative.partition_point(|c| *c <= pick).min(quads.len() - 1);
            let q = &quads[qi];
            let mean = q.origin + q.u * rng.random_range(0.0..1.0) + q.v * rng.random_range(0.0..1.0);
            let (u, v) = (q.u.normalize(), q.v.normalize());
            let frame = Matrix3::from_columns(&[u, v, u.cross(&v)]);
            Gaussian3D {
                mean,
                scale: Vector3::new(0.7 * spacing, 0.7 * spacing, 0.1 * spacing),
                rotation: Quat::from_rotation_matrix(&frame),
                opacity: 0.9,
                color: texture(&mean, &q.color, spec.scene_size),
            }
        })
        .collect()
}

/// Camera at `center` looking at `target` with the world z axis up.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let forward = (target - center).normalize();
    let mut right = forward.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = Vector3::x();
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let orientation = Quat::from_rotation_matrix(&Matrix3::from_columns(&[right, down, forward]));
    Pose::from_center(&orientation, center)
}

pub fn trajectory(spec: &SyntheticSpec) -> Vec<Pose> {
    let n = spec.frame_count;
    let r = spec.extent;
    let height = 0.85 * spec.extent;
    let target = Vector3::new(0.0, 0.0, 0.03 * spec.scene_size);
    let frac = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    (0..n)
        .map(|i| match spec.trajectory {
            TrajectoryKind::Orbit => {
                let phi = std::f64::consts::TAU * i as f64 / n as f64;
                look_at(&Vector3::new(r * phi.cos(), r * phi.sin(), height), &target)
            }
            TrajectoryKind::Arc => {
                let phi = (-60.0 + 120.0 * frac(i)).to_radians() - std::f64::consts::FRAC_PI_2;
                look_at(&Vector3::new(r * phi.cos(), r * phi.sin(), height), &target)
            }
            TrajectoryKind::Line => {
                let x = r * (frac(i) - 0.5);
                let c = Vector3::new(x, -spec.extent, height);
                look_at(&c, &Vector3::new(x, 0.0, target.z))
            }
        })
        .collect()
}

fn random_theta(spec: &SyntheticSpec, g: usize, diam: f64) -> Sim3 {
    if g == 0 {
        return Sim3::identity();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.rng_seed, STREAM_THETA, g as u64));
    let [lo, hi] = spec.per_submap_scale_range;
    let scale = if hi > lo { (rng.random_range(lo.ln()..=hi.ln())).exp() } else { lo };
    let axis = loop {
        let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if a.norm() > 0.1 && a.norm() <= 1.0 {
            break a;
        }
    };
    let max_angle = spec.per_submap_rotation_deg.to_radians();
    let angle = if max_angle > 0.0 { rng.random_range(0.0..max_angle) } else { 0.0 };
    let t = spec.per_submap_translation * diam;
    let translation = if t > 0.0 {
        Vector3::new(rng.random_range(-t..t), rng.random_range(-t..t), rng.random_range(-t..t))
    } else {
        Vector3::zeros()
    };
    Sim3::new(scale, Quat::from_axis_angle(&axis, angle), translation).expect("positive scale")
}

struct FramePoints {
    points: Vec<Vector3<f64>>,
    confidences: Vec<f64>,
    keys: Vec<PixelKey>,
}

#[allow(clippy::too_many_arguments)]
fn back_project(
    spec: &SyntheticSpec,
    group: usize,
    frame: usize,
    pose: &Pose,
    depth: &[Option<f64>],
    k: &CameraIntrinsics,
    theta_inv: &Sim3,
    diam: f64,
) -> FramePoints {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.rng_seed, STREAM_POINTS, ((group as u64) << 32) | frame as u64));
    let noise = Normal::new(0.0, spec.noise_sigma * diam).expect("finite sigma");
    let c = &spec.confidence;
    let inlier_conf = Beta::new(c.inlier_alpha, c.inlier_beta).expect("validated");
    let outlier_conf = Beta::new(c.outlier_alpha, c.outlier_beta).expect("validated");
    let reach = spec.outlier_magnitude * diam;
    let world_from_camera = pose.inverse();
    let mut out = FramePoints {
        points: Vec::new(),
        confidences: Vec::new(),
        keys: Vec::new(),
    };
    for (px, d) in depth.iter().enumerate() {
        let Some(z) = d else {
            continue;
        };
        let (row, col) = (px / k.width, px % k.width);
        let cam = k.unproject(col as f64, row as f64) * *z;
        let mut p = world_from_camera.apply(&cam);
        if spec.noise_sigma > 0.0 {
            p += Vector3::from_fn(|_, _| noise.sample(&mut rng));
        }
        let confidence = if spec.outlier_fraction > 0.0 && rng.random_bool(spec.outlier_fraction) {
            if reach > 0.0 {
                p += Vector3::from_fn(|_, _| rng.random_range(-reach..reach));
            }
            outlier_conf.sample(&mut rng)
        } else {
            inlier_conf.sample(&mut rng)
        };
        out.points.push(theta_inv.apply(&p));
        out.confidences.push(confidence);
        out.keys.push(PixelKey {
            frame,
            row: row as u32,
            col: col as u32,
        });
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    spec.validate()?;
    let k = spec.intrinsics();
    let scene = build_scene(spec);
    let means: Vec<Vector3<f64>> = scene.iter().map(|g| g.mean).collect();
    let diam = diameter(&means);
    let poses = trajectory(spec);
    let settings = RenderSettings {
        keep_contributors: false,
        ..RenderSettings::default()
    };
    let renders: Vec<_> = poses.par_iter().map(|p| splat::render_with(&scene, p, &k, &settings)).collect();
    let plan = partition(spec.frame_count, spec.group_size, spec.overlap_k)?;
    let thetas: Vec<Sim3> = (0..plan.groups.len()).map(|g| random_theta(spec, g, diam)).collect();

    let submaps: Vec<Submap> = plan
        .groups
        .iter()
        .enumerate()
        .map(|(g, &(first, last))| {
            let theta_inv = thetas[g].inverse();
            let frames: Vec<usize> = (first..=last).collect();
            let parts: Vec<FramePoints> = frames
                .par_iter()
                .map(|&f| back_project(spec, g, f, &poses[f], &renders[f].depth, &k, &theta_inv, diam))
                .collect();
            let mut s = Submap {
                group_id: g,
                frame_ids: frames.clone(),
                points: Vec::new(),
                confidences: Vec::new(),
                point_frame: Vec::new(),
                poses: frames.iter().map(|&f| transform_pose(&theta_inv, &poses[f])).collect(),
                intrinsics: k,
            };
            for p in parts {
                s.points.extend(p.points);
                s.confidences.extend(p.confidences);
                s.point_frame.extend(p.keys);
            }
            s
        })
        .collect();

    Ok(SyntheticBundle {
        spec: spec.clone(),
        intrinsics: k,
        scene,
        poses,
        images: renders.into_iter().map(|r| r.image).collect(),
        submaps,
        thetas,
        diameter: diam,
    })
}

pub fn image_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame_{frame:05}.pfm"))
}

#[derive(Serialize, Deserialize)]
struct GroundTruthMeta {
    diameter: f64,
    thetas: Vec<Sim3>,
}

/// Writes the submap interchange directories, target images and ground truth.
pub fn export(bundle: &SyntheticBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &bundle.submaps {
        submap::write_submap(&dir.join(submap::group_dir_name(s.group_id)), s)?;
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    bundle
        .images
        .par_iter()
        .enumerate()
        .try_for_each(|(f, img)| img.write_pfm(&image_path(&images, f)))?;
    let poses: Vec<(usize, Pose)> = bundle.poses.iter().copied().enumerate().collect();
    io::write_tum(&dir.join("gt_poses.txt"), &poses)?;
    splat::write_scene(&dir.join("gt_scene.json"), &bundle.scene)?;
    io::write_json(
        &dir.join("gt_meta.json"),
        &GroundTruthMeta {
            diameter: bundle.diameter,
            thetas: bundle.thetas.clone(),
        },
    )?;
    io::write_json(&dir.join("spec.json"), &bundle.spec)
}

/// Reads back what [`export`] wrote.
pub fn import(dir: &Path) -> Result<SyntheticBundle> {
    let spec: SyntheticSpec = io::read_json(&dir.join("spec.json"))?;
    let submaps = submap::read_submaps(dir)?;
    let meta: GroundTruthMeta = io::read_json(&dir.join("gt_meta.json"))?;
    let poses: Vec<Pose> = io::read_tum(&dir.join("gt_poses.txt"))?.into_iter().map(|(_, p)| p).collect();
    let images = read_images(&dir.join("images"), poses.len())?;
    Ok(SyntheticBundle {
        intrinsics: submaps[0].intrinsics,
        spec,
        scene: splat::read_scene(&dir.join("gt_scene.json"))?,
        poses,
        images,
        submaps,
        thetas: meta.thetas,
        diameter: meta.diameter,
    })
}

pub fn read_images(dir: &Path, count: usize) -> Result<Vec<Image>> {
    (0..count).into_par_iter().map(|f| Image::read_pfm(&image_path(dir, f))).collect()
}
