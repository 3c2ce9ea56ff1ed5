//! Anchor selection, Gaussian initialization and joint photometric refinement
//! of camera poses and Gaussian parameters.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_step, tangent_component};
use crate::image::Image;
use crate::io;
use crate::metrics::psnr;
use crate::ppm::diameter;
use crate::splat::{self, CameraIntrinsics, Gaussian3D, RenderSettings};
use crate::submap::GlobalCloud;
use crate::{Pose, Quat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub confidence_prune_fraction: f64,
    pub keep_ratio: f64,
    /// Fixed voxel edge in meters; chosen from `keep_ratio` when unset.
    pub voxel_size: Option<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            confidence_prune_fraction: 0.03,
            keep_ratio: 5e-4,
            voxel_size: None,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_prune_fraction >= 0.0 && self.confidence_prune_fraction < 1.0) {
            return Err(Error::spec("confidence_prune_fraction", "must be in [0, 1)"));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::spec("keep_ratio", "must be in (0, 1]"));
        }
        if let Some(v) = self.voxel_size {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::spec("voxel_size", "must be > 0"));
            }
        }
        Ok(())
    }
}

type VoxelKey = (i64, i64, i64);

pub fn voxel_key(p: &Vector3<f64>, origin: &Vector3<f64>, size: f64) -> VoxelKey {
    let c = (p - origin) / size;
    (c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64)
}

fn bbox_min(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::repeat(f64::INFINITY), |m, p| m.inf(p))
}

fn occupied_voxels(points: &[Vector3<f64>], idx: &[usize], origin: &Vector3<f64>, size: f64) -> usize {
    idx.iter().map(|&i| voxel_key(&points[i], origin, size)).collect::<HashSet<_>>().len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    /// Ascending indices into the cloud.
    pub indices: Vec<usize>,
    /// Grid used for downsampling; `None` when every survivor was kept.
    pub voxel_size: Option<f64>,
    pub origin: Vector3<f64>,
}

pub fn select_anchors(cloud: &GlobalCloud, cfg: &AnchorConfig) -> Result<Anchors> {
    cfg.validate()?;
    let n = cloud.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if cloud.confidences.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} points but {} confidences", cloud.confidences.len())));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cloud.confidences[a].total_cmp(&cloud.confidences[b]).then(a.cmp(&b)));
    let pruned = (cfg.confidence_prune_fraction * n as f64).floor() as usize;
    let mut survivors = order.split_off(pruned);
    if survivors.is_empty() {
        return Err(Error::EmptyCloud);
    }
    survivors.sort_unstable();

    let target = ((cfg.keep_ratio * n as f64).round() as usize).max(1);
    let points = &cloud.points;
    let origin = bbox_min(points);
    if cfg.voxel_size.is_none() && target >= survivors.len() {
        return Ok(Anchors {
            indices: survivors,
            voxel_size: None,
            origin,
        });
    }
    let size = match cfg.voxel_size {
        Some(v) => v,
        None => {
            let d = diameter(points).max(f64::MIN_POSITIVE);
            let (mut lo, mut hi) = ((d * 1e-7).ln(), (d * 4.0).ln());
            let mut best = (usize::MAX, hi.exp());
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                let count = occupied_voxels(points, &survivors, &origin, mid.exp());
                let miss = count.abs_diff(target);
                if miss < best.0 {
                    best = (miss, mid.exp());
                }
                if miss as f64 <= 0.1 * target as f64 {
                    break;
                }
                if count > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            best.1
        }
    };

    let mut keep: HashMap<VoxelKey, usize> = HashMap::new();
    for &i in &survivors {
        let e = keep.entry(voxel_key(&points[i], &origin, size)).or_insert(i);
        // Survivors are visited in index order, so ties keep the lower index.
        if cloud.confidences[i] > cloud.confidences[*e] {
            *e = i;
        }
    }
    let mut indices: Vec<usize> = keep.into_values().collect();
    indices.sort_unstable();
    Ok(Anchors {
        indices,
        voxel_size: Some(size),
        origin,
    })
}

/// Mean distance from each point to its `k` nearest others, via a uniform grid.
/// `None` for a point with no neighbors at all.
pub fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<Option<f64>> {
    let n = points.len();
    if n < 2 || k == 0 {
        return vec![None; n];
    }
    let d = diameter(points);
    if d == 0.0 {
        return vec![Some(0.0); n];
    }
    let origin = bbox_min(points);
    let cell = (d / (n as f64).cbrt()).max(d * 1e-9);
    let mut grid: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(voxel_key(p, &origin, cell)).or_default().push(i);
    }
    let span = (d / cell).ceil() as i64 + 1;
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = voxel_key(p, &origin, cell);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for r in 0..=span {
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                                continue;
                            };
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let dist = (points[j] - p).norm();
                                let at = best.partition_point(|b| *b <= dist);
                                if at < k {
                                    best.insert(at, dist);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // Anything in an unvisited shell is at least r cells away.
                if best.len() == k && best[k - 1] <= r as f64 * cell {
                    break;
                }
            }
            (!best.is_empty()).then(|| best.iter().sum::<f64>() / best.len() as f64)
        })
        .collect()
}

pub const INIT_OPACITY: f64 = 0.1;
pub const NEIGHBORS: usize = 3;

/// One isotropic Gaussian per anchor, colored from the image that produced it.
pub fn init_gaussians(cloud: &GlobalCloud, anchors: &[usize], images: &BTreeMap<usize, Image>) -> Result<Vec<Gaussian3D>> {
    if anchors.is_empty() || cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if let Some(bad) = anchors.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::DimensionMismatch(format!("anchor index {bad} outside cloud of {}", cloud.len())));
    }
    let d = diameter(&cloud.points);
    let (lo, hi) = (1e-3 * d, 0.1 * d);
    let pts: Vec<Vector3<f64>> = anchors.iter().map(|&i| cloud.points[i]).collect();
    let knn = mean_knn_distance(&pts, NEIGHBORS);
    Ok(anchors
        .iter()
        .zip(&pts)
        .zip(knn)
        .map(|((&i, p), dist)| {
            let s = dist.map_or(lo, |v| v.clamp(lo, hi)).max(f64::MIN_POSITIVE);
            let color = cloud
                .point_frame
                .get(i)
                .and_then(|key| {
                    let img = images.get(&key.frame)?;
                    ((key.col as usize) < img.width() && (key.row as usize) < img.height())
                        .then(|| img.sample_bilinear(key.col as f64, key.row as f64))
                })
                .unwrap_or([0.5; 3]);
            Gaussian3D::isotropic(*p, s, INIT_OPACITY, Vector3::from(color))
        })
        .collect())
}

/// `α·mean|r − t| + (1 − α)(1 − SSIM(r, t))` and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, alpha: f64) -> Result<(f64, Image)> {
    rendered.same_shape(target)?;
    let s = splat::ssim(rendered, target)?;
    let n = rendered.data().len() as f64;
    let mut l1 = 0.0;
    let mut grad = s.gradient;
    for ((g, r), t) in grad.data_mut().iter_mut().zip(rendered.data()).zip(target.data()) {
        let diff = r - t;
        l1 += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = alpha * sign / n - (1.0 - alpha) * *g;
    }
    Ok((alpha * l1 / n + (1.0 - alpha) * (1.0 - s.value), grad))
}

/// Projected step on the rotation, plain step on the translation.
pub fn step_pose(pose: &Pose, grad_q: &Vector4<f64>, grad_t: &Vector3<f64>, lr: f64) -> Result<Pose> {
    Ok(Pose::new(project_step(&pose.rotation, grad_q, lr)?, pose.translation - grad_t * lr))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseOptimizer {
    /// Raw gradients into [`step_pose`].
    Sgd,
    /// Adam-normalized directions into [`step_pose`].
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianLr {
    /// Position rate in scene diameters.
    pub mean: f64,
    /// Rate on log scale.
    pub scale: f64,
    pub rotation: f64,
    /// Rate on logit opacity.
    pub opacity: f64,
    pub color: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        GaussianLr {
            mean: 1.6e-4,
            scale: 1e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointOptConfig {
    pub pose_lr_initial: f64,
    pub pose_lr_final: f64,
    pub pose_optimizer: PoseOptimizer,
    pub gaussian_lr: GaussianLr,
    pub alpha: f64,
    pub epochs: usize,
    pub rng_seed: u64,
    pub freeze_poses: bool,
}

impl Default for JointOptConfig {
    fn default() -> Self {
        JointOptConfig {
            pose_lr_initial: 1e-5,
            pose_lr_final: 1e-7,
            pose_optimizer: PoseOptimizer::Adam,
            gaussian_lr: GaussianLr::default(),
            alpha: 0.8,
            epochs: 30,
            rng_seed: 0,
            freeze_poses: false,
        }
    }
}

impl JointOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pose_lr_final > 0.0 && self.pose_lr_initial >= self.pose_lr_final && self.pose_lr_initial.is_finite()) {
            return Err(Error::spec("pose_lr_initial/pose_lr_final", "need pose_lr_initial >= pose_lr_final > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::spec("alpha", "must be in [0, 1]"));
        }
        let g = &self.gaussian_lr;
        for (v, f) in [
            (g.mean, "gaussian_lr.mean"),
            (g.scale, "gaussian_lr.scale"),
            (g.rotation, "gaussian_lr.rotation"),
            (g.opacity, "gaussian_lr.opacity"),
            (g.color, "gaussian_lr.color"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::spec(f, "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Geometric interpolation from the initial to the final pose rate.
    pub fn pose_lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.pose_lr_initial;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.pose_lr_initial * (self.pose_lr_final / self.pose_lr_initial).powf(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub frame: usize,
    /// Loss of the render that produced this step.
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub scene: Vec<Gaussian3D>,
    pub poses: Vec<Pose>,
    pub trace: Vec<TraceRow>,
    pub epoch_loss: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Bias-corrected `m̂ / (√v̂ + ε)`, written over `grad`.
    fn direction(&mut self, grad: &mut [f64]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for ((g, m), v) in grad.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * *g;
            *v = BETA2 * *v + (1.0 - BETA2) * *g * *g;
            *g = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

const GAUSSIAN_PARAMS: usize = 14;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Advances frame `f`'s pose by one step of size `lr`, halving on a collapsed quaternion.
fn advance_pose(pose: &Pose, dq: &Vector4<f64>, dt: &Vector3<f64>, mut lr: f64) -> Result<Pose> {
    for _ in 0..60 {
        match step_pose(pose, dq, dt, lr) {
            Err(Error::DegenerateStep { .. }) => lr *= 0.5,
            other => return other,
        }
    }
    Err(Error::DegenerateStep { norm: 0.0 })
}

/// Jointly refines poses and Gaussians against `images`, one frame per step.
/// Frame 0 is held fixed as the gauge.
pub fn optimize(
    scene: &[Gaussian3D],
    poses: &[Pose],
    images: &[Image],
    k: &CameraIntrinsics,
    cfg: &JointOptConfig,
) -> Result<JointOutcome> {
    cfg.validate()?;
    k.validate()?;
    if poses.len() != images.len() {
        return Err(Error::DimensionMismatch(format!("{} poses vs {} images", poses.len(), images.len())));
    }
    for (f, img) in images.iter().enumerate() {
        if img.width() != k.width || img.height() != k.height {
            return Err(Error::Frame {
                frame: f,
                source: Box::new(Error::DimensionMismatch(format!(
                    "image is {}x{}, camera is {}x{}",
                    img.width(),
                    img.height(),
                    k.width,
                    k.height
                ))),
            });
        }
    }
    for g in scene {
        g.validate()?;
    }
    let mut scene = scene.to_vec();
    let mut poses = poses.to_vec();
    let mut trace = Vec::new();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || poses.is_empty() {
        return Ok(JointOutcome {
            scene,
            poses,
            trace,
            epoch_loss,
        });
    }

    let means: Vec<Vector3<f64>> = scene.iter().map(|g| g.mean).collect();
    let diam = diameter(&means).max(f64::MIN_POSITIVE);
    let glr = &cfg.gaussian_lr;
    let mut gauss_adam = Adam::new(scene.len() * GAUSSIAN_PARAMS);
    let mut pose_adam = vec![Adam::new(7); poses.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let settings = RenderSettings::default();
    let mut order: Vec<usize> = (0..poses.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let pose_lr = cfg.pose_lr(epoch);
        let mut sum = 0.0;
        for &f in &order {
            let wrap = |e: Error| Error::Frame { frame: f, source: Box::new(e) };
            let out = splat::render_with(&scene, &poses[f], k, &settings);
            let (loss, dl) = photometric_loss(&out.image, &images[f], cfg.alpha).map_err(wrap)?;
            trace.push(TraceRow {
                epoch,
                frame: f,
                loss,
                psnr: psnr(&out.image, &images[f]).map_err(wrap)?,
            });
            sum += loss;
            let grads = splat::backward(&scene, &poses[f], k, &out, &dl).map_err(wrap)?;

            if f != 0 && !cfg.freeze_poses {
                let pose = &poses[f];
                let gq = tangent_component(&pose.rotation, &grads.pose.rotation);
                let gt = grads.pose.translation;
                let (dq, dt) = match cfg.pose_optimizer {
                    PoseOptimizer::Sgd => (gq, gt),
                    PoseOptimizer::Adam => {
                        let mut g = [gq[0], gq[1], gq[2], gq[3], gt[0], gt[1], gt[2]];
                        pose_adam[f].direction(&mut g);
                        (Vector4::new(g[0], g[1], g[2], g[3]), Vector3::new(g[4], g[5], g[6]))
                    }
                };
                poses[f] = advance_pose(pose, &dq, &dt, pose_lr).map_err(wrap)?;
            }

            let mut flat = vec![0.0; scene.len() * GAUSSIAN_PARAMS];
            for ((g, gg), slot) in scene.iter().zip(&grads.gaussians).zip(flat.chunks_mut(GAUSSIAN_PARAMS)) {
                let rot = tangent_component(&g.rotation, &gg.rotation);
                let op = gg.opacity * g.opacity * (1.0 - g.opacity);
                slot[..3].copy_from_slice(gg.mean.as_slice());
                for i in 0..3 {
                    slot[3 + i] = gg.scale[i] * g.scale[i];
                }
                slot[6..10].copy_from_slice(rot.as_slice());
                slot[10] = op;
                slot[11..].copy_from_slice(gg.color.as_slice());
            }
            gauss_adam.direction(&mut flat);
            for (g, d) in scene.iter_mut().zip(flat.chunks(GAUSSIAN_PARAMS)) {
                g.mean -= Vector3::new(d[0], d[1], d[2]) * (glr.mean * diam);
                for i in 0..3 {
                    g.scale[i] *= (-glr.scale * d[3 + i]).exp();
                }
                if let Ok(q) = project_step(&g.rotation, &Vector4::new(d[6], d[7], d[8], d[9]), glr.rotation) {
                    g.rotation = q;
                }
                g.opacity = sigmoid(logit(g.opacity) - glr.opacity * d[10]);
                for i in 0..3 {
                    g.color[i] = (g.color[i] - glr.color * d[11 + i]).clamp(0.0, 1.0);
                }
            }
        }
        let mean = sum / order.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}, pose lr {pose_lr:.3e}");
        if epoch >= 5 && mean > epoch_loss[epoch - 5] {
            log::warn!("epoch {epoch}: mean loss {mean:.6} above epoch {} ({:.6})", epoch - 5, epoch_loss[epoch - 5]);
        }
        epoch_loss.push(mean);
    }
    Ok(JointOutcome {
        scene,
        poses,
        trace,
        epoch_loss,
    })
}

/// Renders every pose and returns the mean PSNR against `images`.
pub fn mean_psnr(scene: &[Gaussian3D], poses: &[Pose], images: &[Image], k: &CameraIntrinsics) -> Result<f64> {
    if poses.is_empty() || poses.len() != images.len() {
        return Err(Error::DimensionMismatch(format!("{} poses vs {} images", poses.len(), images.len())));
    }
    let settings = RenderSettings {
        keep_contributors: false,
        ..RenderSettings::default()
    };
    let values: Vec<f64> = poses
        .par_iter()
        .zip(images)
        .map(|(p, img)| psnr(&splat::render_with(scene, p, k, &settings).image, img))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn csv_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v > 0.0 {
        "inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut s = String::from("epoch,frame,loss,psnr\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.frame, csv_float(r.loss), csv_float(r.psnr));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Scene JSON, TUM poses (ids from `frame_ids`) and the loss trace.
pub fn write_checkpoint(dir: &Path, outcome: &JointOutcome, frame_ids: &[usize]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if frame_ids.len() != outcome.poses.len() {
        return Err(Error::DimensionMismatch(format!("{} ids for {} poses", frame_ids.len(), outcome.poses.len())));
    }
    splat::write_scene(&dir.join("scene.json"), &outcome.scene)?;
    let poses: Vec<(usize, Pose)> = frame_ids.iter().copied().zip(outcome.poses.iter().copied()).collect();
    io::write_tum(&dir.join("poses.txt"), &poses)?;
    write_trace_csv(&dir.join("trace.csv"), &outcome.trace)
}

/// Rotation by `angle` about a random axis composed onto the camera, and its
/// center moved by `shift` in a random direction.
pub fn perturb_pose(pose: &Pose, angle: f64, shift: f64, rng: &mut impl rand::Rng) -> Pose {
    let axis = unit_vector(rng);
    let dir = unit_vector(rng);
    let orientation = pose.orientation().mul(&Quat::from_axis_angle(&axis, angle));
    Pose::from_center(&orientation, &(pose.center() + dir * shift))
}

fn unit_vector(rng: &mut impl rand::Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}
