//! Overlapping frame groups and their chaining into one global frame.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::transform_pose;
use crate::io::{self, PixelKey, PlyPoints};
use crate::ppm::{self, PpmConfig};
use crate::procrustes::{self, PairedPoints};
use crate::splat::CameraIntrinsics;
use crate::{Pose, Sim3};

#[derive(Clone, Debug, PartialEq)]
pub struct Submap {
    pub group_id: usize,
    pub frame_ids: Vec<usize>,
    /// Local-frame positions at the submap's own scale.
    pub points: Vec<Vector3<f64>>,
    pub confidences: Vec<f64>,
    pub point_frame: Vec<PixelKey>,
    /// One local camera-from-world pose per entry of `frame_ids`.
    pub poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
}

impl Submap {
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.confidences.len() != n || self.point_frame.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "submap {}: {} points, {} confidences, {} pixel keys",
                self.group_id,
                n,
                self.confidences.len(),
                self.point_frame.len()
            )));
        }
        if self.poses.len() != self.frame_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "submap {}: {} poses for {} frames",
                self.group_id,
                self.poses.len(),
                self.frame_ids.len()
            )));
        }
        let frames: HashSet<usize> = self.frame_ids.iter().copied().collect();
        for key in &self.point_frame {
            if !frames.contains(&key.frame) {
                return Err(Error::spec("point_frame", format!("frame {} is not in submap {}", key.frame, self.group_id)));
            }
            if key.row as usize >= self.intrinsics.height || key.col as usize >= self.intrinsics.width {
                return Err(Error::spec("point_frame", format!("pixel ({}, {}) outside the image", key.row, key.col)));
            }
        }
        if self.confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::spec("confidences", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn pose_of(&self, frame: usize) -> Option<&Pose> {
        self.frame_ids.iter().position(|f| *f == frame).map(|i| &self.poses[i])
    }

    /// The same submap with points and poses mapped by `theta`.
    pub fn transformed(&self, theta: &Sim3) -> Submap {
        Submap {
            points: self.points.par_iter().map(|p| theta.apply(p)).collect(),
            poses: self.poses.iter().map(|p| transform_pose(theta, p)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub group_size: usize,
    pub overlap_k: usize,
    /// Inclusive frame-index ranges.
    pub groups: Vec<(usize, usize)>,
}

/// Greedy left-to-right grouping where consecutive groups share `overlap_k` frames.
pub fn partition(frame_count: usize, group_size: usize, overlap_k: usize) -> Result<PartitionPlan> {
    if overlap_k < 1 || group_size < overlap_k + 1 {
        return Err(Error::InvalidPartition(format!(
            "need 1 <= overlap_k < group_size, got overlap_k = {overlap_k}, group_size = {group_size}"
        )));
    }
    if frame_count < group_size {
        return Err(Error::InvalidPartition(format!(
            "{frame_count} frames cannot fill a group of {group_size}"
        )));
    }
    let mut groups = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + group_size).min(frame_count);
        groups.push((start, end - 1));
        if end == frame_count {
            break;
        }
        start = end - overlap_k;
    }
    Ok(PartitionPlan {
        group_size,
        overlap_k,
        groups,
    })
}

/// Pairs points of `a` (source) and `b` (target) that were back-projected
/// from the same pixel of a shared frame, weighted by the smaller confidence.
pub fn overlap_correspondences(a: &Submap, b: &Submap) -> Result<PairedPoints<f64>> {
    let shared: HashSet<usize> = a.frame_ids.iter().filter(|f| b.frame_ids.contains(f)).copied().collect();
    if shared.is_empty() {
        return Err(Error::NoOverlap { a: a.group_id, b: b.group_id });
    }
    let index: HashMap<PixelKey, usize> = b
        .point_frame
        .iter()
        .enumerate()
        .filter(|(_, k)| shared.contains(&k.frame))
        .map(|(i, k)| (*k, i))
        .collect();
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut weights = Vec::new();
    for (i, key) in a.point_frame.iter().enumerate() {
        if !shared.contains(&key.frame) {
            continue;
        }
        if let Some(&j) = index.get(key) {
            source.push(a.points[i]);
            target.push(b.points[j]);
            weights.push(a.confidences[i].min(b.confidences[j]));
        }
    }
    if source.is_empty() {
        return Err(Error::EmptyCorrespondence { a: a.group_id, b: b.group_id });
    }
    if weights.iter().all(|w| *w == 0.0) {
        weights.iter_mut().for_each(|w| *w = 1.0);
    }
    PairedPoints::new(source, target, weights).map_err(|e| Error::PairFailure {
        a: a.group_id,
        b: b.group_id,
        source: Box::new(e),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalCloud {
    pub points: Vec<Vector3<f64>>,
    pub confidences: Vec<f64>,
    pub point_frame: Vec<PixelKey>,
}

impl GlobalCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_ply(&self) -> PlyPoints {
        PlyPoints {
            points: self.points.clone(),
            confidences: Some(self.confidences.clone()),
            keys: Some(self.point_frame.clone()),
        }
    }

    pub fn from_ply(p: PlyPoints) -> Self {
        let n = p.points.len();
        GlobalCloud {
            confidences: p.confidences.unwrap_or_else(|| vec![1.0; n]),
            point_frame: p.keys.unwrap_or_default(),
            points: p.points,
        }
    }
}

/// Outcome of aligning one submap onto its predecessor.
#[derive(Clone, Debug)]
pub struct PairReport {
    pub a: usize,
    pub b: usize,
    pub pairs: usize,
    pub iterations: usize,
    pub converged: bool,
    pub mean_dustbin: f64,
    /// Maps submap `b`'s local frame into submap `a`'s local frame.
    pub relative: Sim3,
    /// Mean pair distance after alignment over pairs with `γ > 0.5`.
    pub inlier_residual: f64,
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    pub cloud: GlobalCloud,
    /// One pose per distinct frame id, sorted by id.
    pub poses: Vec<(usize, Pose)>,
    /// Local-to-global transform of every submap; the first is the identity.
    pub thetas: Vec<Sim3>,
    pub pairs: Vec<PairReport>,
}

#[derive(Clone, Debug, Default)]
pub struct ChainOptions {
    /// Skip probabilistic refinement and keep the closed-form estimate.
    pub closed_form_only: bool,
}

/// Aligns every submap onto the transformed previous one and merges the results.
pub fn chain_to_global(submaps: &[Submap], cfg: &PpmConfig<f64>, opts: &ChainOptions) -> Result<ChainResult> {
    let Some(first) = submaps.first() else {
        return Err(Error::EmptyCloud);
    };
    cfg.validate()?;
    let mut thetas = vec![Sim3::identity()];
    let mut placed = vec![first.clone()];
    let mut pairs = Vec::new();
    for (g, sub) in submaps.iter().enumerate().skip(1) {
        let prev = &placed[g - 1];
        let wrap = |e: Error| match e {
            e @ (Error::NoOverlap { .. } | Error::EmptyCorrespondence { .. } | Error::PairFailure { .. }) => e,
            e => Error::PairFailure {
                a: prev.group_id,
                b: sub.group_id,
                source: Box::new(e),
            },
        };
        let pp = overlap_correspondences(sub, prev).map_err(wrap)?;
        let theta0 = procrustes::solve_closed_form(&pp).map_err(wrap)?;
        let (theta, iterations, converged, gamma) = if opts.closed_form_only {
            (theta0, 0, true, vec![1.0; pp.len()])
        } else {
            let out = ppm::refine(&pp, &theta0, cfg).map_err(wrap)?;
            (out.theta, out.iterations, out.converged, out.correspondences.match_weight)
        };
        let mean_dustbin = gamma.iter().map(|g| 1.0 - g).sum::<f64>() / gamma.len() as f64;
        let (sum, count) = pp
            .source
            .iter()
            .zip(&pp.target)
            .zip(&gamma)
            .filter(|(_, g)| **g > 0.5)
            .fold((0.0, 0usize), |(s, c), ((p, q), _)| (s + (theta.apply(p) - q).norm(), c + 1));
        log::info!(
            "aligned submap {} onto {}: {} pairs, {} rounds, scale {:.6}",
            sub.group_id,
            prev.group_id,
            pp.len(),
            iterations,
            theta.scale
        );
        pairs.push(PairReport {
            a: prev.group_id,
            b: sub.group_id,
            pairs: pp.len(),
            iterations,
            converged,
            mean_dustbin,
            relative: thetas[g - 1].inverse().compose(&theta),
            inlier_residual: if count > 0 { sum / count as f64 } else { f64::NAN },
        });
        placed.push(sub.transformed(&theta));
        thetas.push(theta);
    }

    let total: usize = placed.iter().map(|s| s.points.len()).sum();
    let mut cloud = GlobalCloud {
        points: Vec::with_capacity(total),
        confidences: Vec::with_capacity(total),
        point_frame: Vec::with_capacity(total),
    };
    let mut poses: BTreeMap<usize, Pose> = BTreeMap::new();
    for s in placed {
        for (f, p) in s.frame_ids.iter().zip(&s.poses) {
            poses.entry(*f).or_insert(*p);
        }
        cloud.points.extend(s.points);
        cloud.confidences.extend(s.confidences);
        cloud.point_frame.extend(s.point_frame);
    }
    Ok(ChainResult {
        cloud,
        poses: poses.into_iter().collect(),
        thetas,
        pairs,
    })
}

#[derive(Serialize, Deserialize)]
struct Intrinsics4 {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    group_id: usize,
    frame_ids: Vec<usize>,
    width: usize,
    height: usize,
    intrinsics: Intrinsics4,
}

pub fn group_dir_name(group_id: usize) -> String {
    format!("group_{group_id:03}")
}

/// Writes `points.ply`, `poses.txt` and `meta.json` into `dir`.
pub fn write_submap(dir: &Path, s: &Submap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_ply(
        &dir.join("points.ply"),
        &PlyPoints {
            points: s.points.clone(),
            confidences: Some(s.confidences.clone()),
            keys: Some(s.point_frame.clone()),
        },
    )?;
    let poses: Vec<(usize, Pose)> = s.frame_ids.iter().copied().zip(s.poses.iter().copied()).collect();
    io::write_tum(&dir.join("poses.txt"), &poses)?;
    let k = &s.intrinsics;
    io::write_json(
        &dir.join("meta.json"),
        &Meta {
            group_id: s.group_id,
            frame_ids: s.frame_ids.clone(),
            width: k.width,
            height: k.height,
            intrinsics: Intrinsics4 {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
            },
        },
    )
}

pub fn read_submap(dir: &Path) -> Result<Submap> {
    let meta: Meta = io::read_json(&dir.join("meta.json"))?;
    let ply_path = dir.join("points.ply");
    let ply = io::read_ply(&ply_path)?;
    let n = ply.points.len();
    let confidences = ply.confidences.unwrap_or_else(|| vec![1.0; n]);
    let point_frame = ply
        .keys
        .ok_or_else(|| Error::format(&ply_path, "frame_id, px_row and px_col are required"))?;
    let tum_path = dir.join("poses.txt");
    let by_frame: HashMap<usize, Pose> = io::read_tum(&tum_path)?.into_iter().collect();
    let poses = meta
        .frame_ids
        .iter()
        .map(|f| by_frame.get(f).copied().ok_or_else(|| Error::format(&tum_path, format!("no pose for frame {f}"))))
        .collect::<Result<Vec<_>>>()?;
    let intrinsics = CameraIntrinsics {
        fx: meta.intrinsics.fx,
        fy: meta.intrinsics.fy,
        cx: meta.intrinsics.cx,
        cy: meta.intrinsics.cy,
        width: meta.width,
        height: meta.height,
    };
    intrinsics.validate()?;
    let s = Submap {
        group_id: meta.group_id,
        frame_ids: meta.frame_ids,
        points: ply.points,
        confidences,
        point_frame,
        poses,
        intrinsics,
    };
    s.validate().map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(s)
}

/// Reads every `group_*` directory under `root`, ordered by name.
pub fn read_submaps(root: &Path) -> Result<Vec<Submap>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("group_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no group_* directories"));
    }
    dirs.iter().map(|d| read_submap(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Quat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::from_fov(8, 6, 60.0)
    }

    fn toy(group_id: usize, frames: &[usize], rng: &mut impl Rng) -> Submap {
        let mut s = Submap {
            group_id,
            frame_ids: frames.to_vec(),
            points: Vec::new(),
            confidences: Vec::new(),
            point_frame: Vec::new(),
            poses: frames.iter().map(|f| Pose::from_center(&Quat::identity(), &Vector3::new(*f as f64, 0.0, 0.0))).collect(),
            intrinsics: intr(),
        };
        for &f in frames {
            for row in 0..6 {
                for col in 0..8 {
                    s.points.push(Vector3::new(
                        col as f64 + 0.1 * f as f64,
                        row as f64 * 0.5 + rng.random_range(-0.2..0.2),
                        3.0 + rng.random_range(-1.0..1.0),
                    ));
                    s.confidences.push(rng.random_range(0.5..1.0));
                    s.point_frame.push(PixelKey { frame: f, row, col });
                }
            }
        }
        s
    }

    #[test]
    fn partition_examples() {
        let p = partition(200, 60, 1).unwrap();
        assert_eq!(p.groups, vec![(0, 59), (59, 118), (118, 177), (177, 199)]);
        assert_eq!(partition(60, 60, 1).unwrap().groups, vec![(0, 59)]);
        assert!(matches!(partition(5, 10, 1), Err(Error::InvalidPartition(_))));
        assert!(partition(100, 10, 10).is_err());
        assert!(partition(100, 10, 0).is_err());
    }

    #[test]
    fn partition_invariants() {
        for k in 1..5 {
            for gs in (k + 1)..20 {
                for n in gs..80 {
                    let p = partition(n, gs, k).unwrap();
                    assert_eq!(p.groups[0].0, 0);
                    assert_eq!(p.groups.last().unwrap().1, n - 1);
                    for w in p.groups.windows(2) {
                        assert_eq!(w[0].1 + 1 - w[1].0, k);
                    }
                    for g in &p.groups {
                        let len = g.1 + 1 - g.0;
                        assert!(len <= gs && len > k);
                    }
                }
            }
        }
    }

    #[test]
    fn overlap_pairs_every_shared_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let a = toy(0, &[0, 1, 2], &mut rng);
        let theta = Sim3::new(1.3, Quat::from_axis_angle(&Vector3::new(0.2, 1.0, 0.0), 0.4), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let mut b = a.transformed(&theta);
        b.group_id = 1;
        let pp = overlap_correspondences(&a, &b).unwrap();
        assert_eq!(pp.len(), 3 * 48);
        let est = procrustes::solve_closed_form(&pp).unwrap();
        assert!((est.scale - 1.3).abs() < 1e-9);
        assert!(est.rotation.angle_to(&theta.rotation) < 1e-9);
        assert!((est.translation - theta.translation).norm() < 1e-9);
    }

    #[test]
    fn overlap_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = toy(0, &[0, 1], &mut rng);
        let b = toy(1, &[2, 3], &mut rng);
        assert!(matches!(overlap_correspondences(&a, &b), Err(Error::NoOverlap { a: 0, b: 1 })));
        let mut c = toy(2, &[1, 2], &mut rng);
        c.point_frame.iter_mut().for_each(|k| {
            if k.frame == 1 {
                k.frame = 2;
            }
        });
        assert!(matches!(overlap_correspondences(&a, &c), Err(Error::EmptyCorrespondence { a: 0, b: 2 })));
    }

    #[test]
    fn identity_chain_concatenates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let subs = vec![toy(0, &[0, 1, 2], &mut rng), toy(1, &[2, 3, 4], &mut rng), toy(2, &[4, 5], &mut rng)];
        // Make overlap frames agree exactly.
        let mut subs = subs;
        for g in 1..subs.len() {
            let shared = subs[g].frame_ids[0];
            let prev = subs[g - 1].clone();
            for (i, k) in subs[g].point_frame.clone().iter().enumerate() {
                if k.frame == shared {
                    let j = prev.point_frame.iter().position(|x| x == k).unwrap();
                    subs[g].points[i] = prev.points[j];
                }
            }
        }
        let out = chain_to_global(&subs, &PpmConfig::default(), &ChainOptions::default()).unwrap();
        assert_eq!(out.poses.len(), 6);
        assert_eq!(out.cloud.len(), subs.iter().map(|s| s.points.len()).sum::<usize>());
        let flat: Vec<_> = subs.iter().flat_map(|s| s.points.clone()).collect();
        for (a, b) in out.cloud.points.iter().zip(&flat) {
            assert!((a - b).norm() < 1e-9);
        }
        for (f, p) in &out.poses {
            assert!((p.center() - Vector3::new(*f as f64, 0.0, 0.0)).norm() < 1e-9);
        }
        // Gauge: submap 0 passes through untouched.
        assert_eq!(&out.cloud.points[..subs[0].points.len()], &subs[0].points[..]);
    }

    #[test]
    fn chain_recovers_known_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let base = [toy(0, &[0, 1, 2], &mut rng), toy(1, &[2, 3, 4], &mut rng)];
        let mut second = base[1].clone();
        for (i, k) in base[1].point_frame.iter().enumerate() {
            if k.frame == 2 {
                let j = base[0].point_frame.iter().position(|x| x == k).unwrap();
                second.points[i] = base[0].points[j];
            }
        }
        let truth = Sim3::new(0.6, Quat::from_axis_angle(&Vector3::z(), -0.8), Vector3::new(-1.0, 0.5, 4.0)).unwrap();
        let local = second.transformed(&truth.inverse());
        let out = chain_to_global(&[base[0].clone(), local], &PpmConfig::default(), &ChainOptions::default()).unwrap();
        let th = &out.thetas[1];
        assert!((th.scale - truth.scale).abs() < 1e-9);
        assert!(th.rotation.angle_to(&truth.rotation) < 1e-9);
        assert!((th.translation - truth.translation).norm() < 1e-9);
        // Duplicate frame 2 keeps submap 0's pose.
        assert_eq!(out.poses[2].1, base[0].poses[2]);
    }

    #[test]
    fn chain_errors_name_the_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let subs = vec![toy(0, &[0, 1], &mut rng), toy(1, &[1, 2], &mut rng), toy(2, &[5, 6], &mut rng)];
        assert!(matches!(
            chain_to_global(&subs, &PpmConfig::default(), &ChainOptions::default()),
            Err(Error::NoOverlap { a: 2, b: 1 })
        ));
    }

    #[test]
    fn interchange_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut s = toy(3, &[10, 11], &mut rng);
        s.poses[1] = Pose::new(Quat::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.3), Vector3::new(0.1, 0.2, 0.3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(group_dir_name(3));
        write_submap(&path, &s).unwrap();
        let back = read_submaps(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        let b = &back[0];
        assert_eq!(b.points, s.points);
        assert_eq!(b.confidences, s.confidences);
        assert_eq!(b.point_frame, s.point_frame);
        assert_eq!(b.frame_ids, s.frame_ids);
        assert_eq!(b.intrinsics, s.intrinsics);
        for (p, q) in b.poses.iter().zip(&s.poses) {
            assert!(p.rotation.angle_to(&q.rotation) < 1e-12 && (p.translation - q.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn invalid_submap_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut s = toy(0, &[0], &mut rng);
        s.point_frame[0].row = 100;
        assert!(s.validate().is_err());
        let mut s = toy(0, &[0], &mut rng);
        s.confidences[0] = 1.5;
        assert!(s.validate().is_err());
    }
}
