//! Report records written as JSON and CSV. Nothing here depends on wall time,
//! so reports from identical runs are byte-identical.

use std::fmt;
use std::path::Path;

use ppmsplat::{Error, Result, Sim3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A float that survives JSON even when infinite: non-finite values are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Float(pub f64);

impl fmt::Display for Float {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        if v.is_nan() {
            f.write_str("nan")
        } else if v == f64::INFINITY {
            f.write_str("inf")
        } else if v == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{v}")
        }
    }
}

impl Serialize for Float {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Float {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Float(v)),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(Float(f64::INFINITY)),
                "-inf" => Ok(Float(f64::NEG_INFINITY)),
                "nan" => Ok(Float(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub s: f64,
    /// `(w, x, y, z)`.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Sim3> for SimilarityRecord {
    fn from(th: &Sim3) -> Self {
        let q = th.rotation.as_vector();
        SimilarityRecord {
            s: th.scale,
            q: [q[0], q[1], q[2], q[3]],
            t: [th.translation.x, th.translation.y, th.translation.z],
        }
    }
}

impl SimilarityRecord {
    pub fn to_sim3(&self) -> Result<Sim3> {
        let [w, x, y, z] = self.q;
        Sim3::new(
            self.s,
            ppmsplat::Quat::try_new(w, x, y, z)?,
            nalgebra::Vector3::new(self.t[0], self.t[1], self.t[2]),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub seed: u64,
    pub frames: usize,
    pub groups: usize,
    pub points: usize,
    pub gaussians: usize,
    pub diameter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    /// Submap already placed.
    pub a: usize,
    /// Submap aligned onto `a`.
    pub b: usize,
    pub pairs: usize,
    pub iterations: usize,
    pub converged: bool,
    pub mean_dustbin: Float,
    pub inlier_residual: Float,
    /// Maps `b`'s local frame into `a`'s.
    pub relative: SimilarityRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group: usize,
    /// Local-to-global transform.
    pub theta: SimilarityRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaFile {
    pub pairs: Vec<PairRecord>,
    pub groups: Vec<GroupRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub submaps: usize,
    pub frames: usize,
    pub points: usize,
    pub closed_form_only: bool,
    pub pairs: Vec<PairRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub frames: usize,
    /// `None` when an explicit scene was supplied.
    pub anchors: Option<usize>,
    pub gaussians: usize,
    pub epochs: usize,
    pub freeze_poses: bool,
    pub initial_loss: Float,
    pub final_loss: Float,
    pub initial_psnr: Float,
    pub final_psnr: Float,
    pub initial_ate: Option<Float>,
    pub final_ate: Option<Float>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: Float,
    pub ssim: Float,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub ate_alignment: ppmsplat::metrics::AteAlignment,
    pub ate: Float,
    pub ate_similarity: Float,
    pub ate_rigid: Float,
    pub psnr_mean: Option<Float>,
    pub ssim_mean: Option<Float>,
    pub per_frame: Vec<FrameMetrics>,
}

impl EvalReport {
    /// `metric,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: Option<Float>| {
            if let Some(v) = v {
                s.push_str(&format!("{k},{v}\n"));
            }
        };
        row("ate", Some(self.ate));
        row("ate_similarity", Some(self.ate_similarity));
        row("ate_rigid", Some(self.ate_rigid));
        row("psnr_mean", self.psnr_mean);
        row("ssim_mean", self.ssim_mean);
        s
    }

    pub fn frames_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for f in &self.per_frame {
            s.push_str(&format!("{},{},{}\n", f.frame, f.psnr, f.ssim));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub synth: Option<SynthReport>,
    pub align: AlignReport,
    pub refine: RefineReport,
    pub eval: EvalReport,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
