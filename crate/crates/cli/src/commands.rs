//! One function per subcommand. Stages talk to each other only through files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ppmsplat::image::Image;
use ppmsplat::io::{self, read_json, write_json};
use ppmsplat::joint::{init_gaussians, optimize, photometric_loss, select_anchors, write_checkpoint};
use ppmsplat::metrics::{ate, psnr, ssim, AteAlignment};
use ppmsplat::splat::{self, CameraIntrinsics, Gaussian3D, RenderSettings};
use ppmsplat::submap::{chain_to_global, read_submaps, ChainOptions, GlobalCloud};
use ppmsplat::synth::{self, image_path};
use ppmsplat::{Error, Pose, Result};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::report::*;

pub const CAMERA_FILE: &str = "camera.json";
pub const REPORT_FILE: &str = "report.json";

/// Resolved configuration plus the master seed for this invocation.
#[derive(Clone, Debug)]
pub struct Context {
    /// The configuration as echoed into run directories.
    pub config: PipelineConfig,
    pub seed: u64,
}

impl Context {
    pub fn new(config: PipelineConfig, seed: Option<u64>) -> Self {
        let seed = seed.unwrap_or(config.rng_seed);
        Context { config, seed }
    }

    /// The configuration with stage seeds derived from the master seed.
    pub fn effective(&self) -> PipelineConfig {
        self.config.seeded(self.seed)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_camera(dir: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(&dir.join(CAMERA_FILE))?;
    k.validate()?;
    Ok(k)
}

pub fn cmd_synth(ctx: &Context, out_dir: &Path) -> Result<SynthReport> {
    let spec = ctx.effective().synth;
    let bundle = synth::generate(&spec)?;
    synth::export(&bundle, out_dir)?;
    write_json(&out_dir.join(CAMERA_FILE), &bundle.intrinsics)?;
    let report = SynthReport {
        seed: spec.rng_seed,
        frames: bundle.poses.len(),
        groups: bundle.submaps.len(),
        points: bundle.submaps.iter().map(|s| s.points.len()).sum(),
        gaussians: bundle.scene.len(),
        diameter: bundle.diameter,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    log::info!("synth: {} frames, {} groups, {} points", report.frames, report.groups, report.points);
    Ok(report)
}

pub fn cmd_align(ctx: &Context, in_dir: &Path, out_dir: &Path) -> Result<AlignReport> {
    let cfg = ctx.effective();
    if !in_dir.is_dir() {
        return Err(Error::io(in_dir, std::io::Error::new(std::io::ErrorKind::NotFound, "input directory does not exist")));
    }
    let submaps = read_submaps(in_dir)?;
    let opts = ChainOptions {
        closed_form_only: cfg.align.closed_form_only,
    };
    let chain = chain_to_global(&submaps, &cfg.ppm, &opts)?;

    create_dir(out_dir)?;
    io::write_ply(&out_dir.join("points.ply"), &chain.cloud.to_ply())?;
    io::write_tum(&out_dir.join("poses.txt"), &chain.poses)?;
    write_json(&out_dir.join(CAMERA_FILE), &submaps[0].intrinsics)?;
    let pairs: Vec<PairRecord> = chain
        .pairs
        .iter()
        .map(|p| PairRecord {
            a: p.a,
            b: p.b,
            pairs: p.pairs,
            iterations: p.iterations,
            converged: p.converged,
            mean_dustbin: Float(p.mean_dustbin),
            inlier_residual: Float(p.inlier_residual),
            relative: (&p.relative).into(),
        })
        .collect();
    let groups = submaps
        .iter()
        .zip(&chain.thetas)
        .map(|(s, th)| GroupRecord {
            group: s.group_id,
            theta: th.into(),
        })
        .collect();
    write_json(
        &out_dir.join("theta.json"),
        &ThetaFile {
            pairs: pairs.clone(),
            groups,
        },
    )?;
    let report = AlignReport {
        submaps: submaps.len(),
        frames: chain.poses.len(),
        points: chain.cloud.len(),
        closed_form_only: opts.closed_form_only,
        pairs,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    log::info!("align: {} submaps into {} points", report.submaps, report.points);
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct RefineInputs {
    /// Start from this scene instead of seeding Gaussians from anchors.
    pub scene: Option<PathBuf>,
    /// Reference trajectory for ATE in the report.
    pub gt_poses: Option<PathBuf>,
}

fn load_images(dir: &Path, ids: &[usize]) -> Result<Vec<Image>> {
    ids.par_iter().map(|&f| Image::read_pfm(&image_path(dir, f))).collect()
}

/// Mean photometric loss and mean PSNR over all frames.
fn photometric_summary(scene: &[Gaussian3D], poses: &[Pose], images: &[Image], k: &CameraIntrinsics, alpha: f64) -> Result<(f64, f64)> {
    let settings = RenderSettings {
        keep_contributors: false,
        ..RenderSettings::default()
    };
    let per: Vec<(f64, f64)> = poses
        .par_iter()
        .zip(images)
        .map(|(p, img)| {
            let r = splat::render_with(scene, p, k, &settings).image;
            Ok((photometric_loss(&r, img, alpha)?.0, psnr(&r, img)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((per.iter().map(|v| v.0).sum::<f64>() / n, per.iter().map(|v| v.1).sum::<f64>() / n))
}

fn ate_against(poses: &[(usize, Pose)], reference: &[(usize, Pose)], mode: AteAlignment) -> Result<f64> {
    let by_id: BTreeMap<usize, Pose> = reference.iter().copied().collect();
    let matched: Vec<(usize, Pose)> = poses
        .iter()
        .map(|(id, _)| {
            by_id
                .get(id)
                .map(|p| (*id, *p))
                .ok_or_else(|| Error::DimensionMismatch(format!("frame {id} missing from reference trajectory")))
        })
        .collect::<Result<_>>()?;
    Ok(ate(poses, &matched, mode)?.rmse)
}

pub fn cmd_refine(ctx: &Context, align_dir: &Path, images_dir: &Path, out_dir: &Path, inputs: &RefineInputs) -> Result<RefineReport> {
    let cfg = ctx.effective();
    let k = read_camera(align_dir)?;
    let trajectory = io::read_tum(&align_dir.join("poses.txt"))?;
    let ids: Vec<usize> = trajectory.iter().map(|(id, _)| *id).collect();
    let poses: Vec<Pose> = trajectory.iter().map(|(_, p)| *p).collect();
    let images = load_images(images_dir, &ids)?;

    let (scene, anchors) = match &inputs.scene {
        Some(path) => (splat::read_scene(path)?, None),
        None => {
            let cloud = GlobalCloud::from_ply(io::read_ply(&align_dir.join("points.ply"))?);
            let chosen = select_anchors(&cloud, &cfg.anchors)?;
            let by_frame: BTreeMap<usize, Image> = ids.iter().copied().zip(images.iter().cloned()).collect();
            let scene = init_gaussians(&cloud, &chosen.indices, &by_frame)?;
            (scene, Some(chosen.indices.len()))
        }
    };

    let alpha = cfg.joint.alpha;
    let (initial_loss, initial_psnr) = photometric_summary(&scene, &poses, &images, &k, alpha)?;
    let outcome = optimize(&scene, &poses, &images, &k, &cfg.joint).map_err(|e| match e {
        Error::Frame { frame, source } => Error::Frame {
            frame: ids.get(frame).copied().unwrap_or(frame),
            source,
        },
        other => other,
    })?;
    let (final_loss, final_psnr) = photometric_summary(&outcome.scene, &outcome.poses, &images, &k, alpha)?;

    let (initial_ate, final_ate) = match &inputs.gt_poses {
        Some(path) => {
            let reference = io::read_tum(path)?;
            let after: Vec<(usize, Pose)> = ids.iter().copied().zip(outcome.poses.iter().copied()).collect();
            let mode = cfg.eval.ate_alignment;
            (
                Some(Float(ate_against(&trajectory, &reference, mode)?)),
                Some(Float(ate_against(&after, &reference, mode)?)),
            )
        }
        None => (None, None),
    };

    // Renumber trace rows to frame ids.
    let mut outcome = outcome;
    for row in &mut outcome.trace {
        row.frame = ids[row.frame];
    }
    write_checkpoint(out_dir, &outcome, &ids)?;
    if outcome.poses == poses {
        // A text round trip of an unchanged trajectory is not bit-exact; keep the input bytes.
        let src = align_dir.join("poses.txt");
        let dst = out_dir.join("poses.txt");
        fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
    }
    write_json(&out_dir.join(CAMERA_FILE), &k)?;
    let report = RefineReport {
        frames: ids.len(),
        anchors,
        gaussians: outcome.scene.len(),
        epochs: cfg.joint.epochs,
        freeze_poses: cfg.joint.freeze_poses,
        initial_loss: Float(initial_loss),
        final_loss: Float(final_loss),
        initial_psnr: Float(initial_psnr),
        final_psnr: Float(final_psnr),
        initial_ate,
        final_ate,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    log::info!("refine: loss {initial_loss:.5} -> {final_loss:.5}");
    Ok(report)
}

/// Renders `scene` at every pose into `out_dir` as PFM plus a PPM preview.
pub fn cmd_render(scene: &Path, poses: &Path, camera: &Path, out_dir: &Path) -> Result<usize> {
    let gaussians = splat::read_scene(scene)?;
    let trajectory = io::read_tum(poses)?;
    let k: CameraIntrinsics = read_json(camera)?;
    k.validate()?;
    create_dir(out_dir)?;
    let settings = RenderSettings {
        keep_contributors: false,
        ..RenderSettings::default()
    };
    trajectory.par_iter().try_for_each(|(id, p)| {
        let img = splat::render_with(&gaussians, p, &k, &settings).image;
        img.write_pfm(&image_path(out_dir, *id))?;
        img.write_ppm(&out_dir.join(format!("frame_{id:05}.ppm")))
    })?;
    Ok(trajectory.len())
}

fn trajectory_in(dir: &Path, names: &[&str]) -> Result<Vec<(usize, Pose)>> {
    for n in names {
        let p = dir.join(n);
        if p.is_file() {
            return io::read_tum(&p);
        }
    }
    Err(Error::io(
        dir.join(names[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no trajectory file"),
    ))
}

/// Estimated images: an `images/` directory if present, otherwise renders of
/// `scene.json` with `camera.json`; `None` when neither exists.
fn estimated_images(dir: &Path, trajectory: &[(usize, Pose)]) -> Result<Option<Vec<Image>>> {
    let ids: Vec<usize> = trajectory.iter().map(|(id, _)| *id).collect();
    if dir.join("images").is_dir() {
        return load_images(&dir.join("images"), &ids).map(Some);
    }
    let scene = dir.join("scene.json");
    if !scene.is_file() {
        return Ok(None);
    }
    let gaussians = splat::read_scene(&scene)?;
    let k = read_camera(dir)?;
    let settings = RenderSettings {
        keep_contributors: false,
        ..RenderSettings::default()
    };
    Ok(Some(trajectory.par_iter().map(|(_, p)| splat::render_with(&gaussians, p, &k, &settings).image).collect()))
}

pub fn cmd_eval(ctx: &Context, est_dir: &Path, gt_dir: &Path, out_dir: &Path) -> Result<EvalReport> {
    let mode = ctx.config.eval.ate_alignment;
    let est = trajectory_in(est_dir, &["poses.txt", "gt_poses.txt"])?;
    let gt = trajectory_in(gt_dir, &["gt_poses.txt", "poses.txt"])?;
    let similarity = ate(&est, &gt, AteAlignment::Similarity)?.rmse;
    let rigid = ate(&est, &gt, AteAlignment::Rigid)?.rmse;

    let mut per_frame = Vec::new();
    if let Some(images) = estimated_images(est_dir, &est)? {
        let ids: Vec<usize> = est.iter().map(|(id, _)| *id).collect();
        let reference = load_images(&gt_dir.join("images"), &ids)?;
        per_frame = ids
            .par_iter()
            .zip(images.par_iter().zip(&reference))
            .map(|(&frame, (a, b))| {
                Ok(FrameMetrics {
                    frame,
                    psnr: Float(psnr(a, b)?),
                    ssim: Float(ssim(a, b)?),
                })
            })
            .collect::<Result<_>>()?;
    }
    let mean = |f: fn(&FrameMetrics) -> f64| {
        (!per_frame.is_empty()).then(|| Float(per_frame.iter().map(f).sum::<f64>() / per_frame.len() as f64))
    };
    let report = EvalReport {
        frames: est.len(),
        ate_alignment: mode,
        ate: Float(match mode {
            AteAlignment::Similarity => similarity,
            AteAlignment::Rigid => rigid,
        }),
        ate_similarity: Float(similarity),
        ate_rigid: Float(rigid),
        psnr_mean: mean(|m| m.psnr.0),
        ssim_mean: mean(|m| m.ssim.0),
        per_frame,
    };
    create_dir(out_dir)?;
    write_json(&out_dir.join("eval.json"), &report)?;
    write_text(&out_dir.join("eval.csv"), &report.metrics_csv())?;
    write_text(&out_dir.join("frames.csv"), &report.frames_csv())?;
    log::info!("eval: ATE {} ({mode:?}), PSNR {:?}", report.ate, report.psnr_mean.map(|v| v.0));
    Ok(report)
}

/// synth (or import) → align → refine → eval inside `run_dir`.
pub fn cmd_full(ctx: &Context, run_dir: &Path) -> Result<Summary> {
    create_dir(run_dir)?;
    write_text(&run_dir.join("config.json"), &ctx.config.to_json())?;
    let (synth_dir, synth_report) = match &ctx.config.paths.input {
        Some(input) => (input.clone(), None),
        None => {
            let dir = run_dir.join("synth");
            let r = cmd_synth(ctx, &dir)?;
            (dir, Some(r))
        }
    };
    let align_dir = run_dir.join("align");
    let align = cmd_align(ctx, &synth_dir, &align_dir)?;
    let gt = synth_dir.join("gt_poses.txt");
    let inputs = RefineInputs {
        scene: None,
        gt_poses: gt.is_file().then_some(gt),
    };
    let refine_dir = run_dir.join("refine");
    let refine = cmd_refine(ctx, &align_dir, &synth_dir.join("images"), &refine_dir, &inputs)?;
    let eval = cmd_eval(ctx, &refine_dir, &synth_dir, &run_dir.join("eval"))?;
    let summary = Summary {
        seed: ctx.seed,
        synth: synth_report,
        align,
        refine,
        eval,
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
