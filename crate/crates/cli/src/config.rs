//! Pipeline configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use ppmsplat::joint::{AnchorConfig, JointOptConfig};
use ppmsplat::metrics::AteAlignment;
use ppmsplat::ppm::PpmConfig;
use ppmsplat::synth::{sub_seed, SyntheticSpec};
use ppmsplat::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub closed_form_only: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ate_alignment: AteAlignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Existing submap directory to use instead of generating one.
    pub input: Option<PathBuf>,
    /// Run directory written by `full`.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            input: None,
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; stage seeds are derived from it (see [`PipelineConfig::stage_seeds`]).
    pub rng_seed: u64,
    pub synth: SyntheticSpec,
    pub align: AlignConfig,
    pub ppm: PpmConfig<f64>,
    pub anchors: AnchorConfig,
    pub joint: JointOptConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rng_seed: 7,
            synth: SyntheticSpec::default(),
            align: AlignConfig::default(),
            ppm: PpmConfig::default(),
            anchors: AnchorConfig::default(),
            joint: JointOptConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

const SYNTH_STREAM: u64 = 0x5359_4e54;
const JOINT_STREAM: u64 = 0x4a4f_494e;

fn prefixed(section: &str, result: Result<()>) -> Result<()> {
    result.map_err(|e| match e {
        Error::Spec { field, message } if !field.starts_with(&format!("{section}.")) => Error::Spec {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    })
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = ppmsplat::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every section checked against its own invariants; errors carry the dotted field path.
    pub fn validate(&self) -> Result<()> {
        prefixed("synth", self.synth.validate())?;
        prefixed("ppm", self.ppm.validate())?;
        prefixed("anchors", self.anchors.validate())?;
        prefixed("joint", self.joint.validate())
    }

    /// `(synth seed, joint seed)` derived from `seed`.
    pub fn stage_seeds(seed: u64) -> (u64, u64) {
        (sub_seed(seed, SYNTH_STREAM, 0), sub_seed(seed, JOINT_STREAM, 0))
    }

    /// Copy with the stage seeds filled in from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let (s, j) = Self::stage_seeds(seed);
        let mut out = self.clone();
        out.synth.rng_seed = s;
        out.joint.rng_seed = j;
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
