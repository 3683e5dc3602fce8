//! Run configuration: one JSON document covering every subcommand. Every
//! field has a default, unknown keys are rejected, and command-line flags are
//! applied on top of the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use satfuse::format::write_atomic;
use satfuse::fusion::FusionConfig;
use satfuse::synthdata::SceneConfig;
use satfuse::trainer::TrainConfig;
use satfuse::{Error, Result};

pub const TOOL_NAME: &str = "satfuse";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub ckpt_no_dt: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataOptions {
    pub n_scenes: usize,
    pub overwrite: bool,
}

impl Default for GenDataOptions {
    fn default() -> Self {
        GenDataOptions {
            n_scenes: 200,
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub lr_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseOptions {
    /// Use the first `n_lr` revisits of the scene; all when unset.
    pub n_lr: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblateKind {
    #[default]
    NSweep,
    Module,
    Hyper,
}

impl AblateKind {
    pub fn name(self) -> &'static str {
        match self {
            AblateKind::NSweep => "n-sweep",
            AblateKind::Module => "module",
            AblateKind::Hyper => "hyper",
        }
    }
}

impl std::str::FromStr for AblateKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "n-sweep" => Ok(AblateKind::NSweep),
            "module" => Ok(AblateKind::Module),
            "hyper" => Ok(AblateKind::Hyper),
            other => Err(format!(
                "unknown ablation kind '{other}' (expected n-sweep, module or hyper)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateOptions {
    pub kind: AblateKind,
    /// Evaluate only the first `n_scenes` scenes of the dataset.
    pub n_scenes: Option<usize>,
    pub seed: u64,
    pub n_values: Vec<usize>,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            kind: AblateKind::NSweep,
            n_scenes: None,
            seed: 0,
            n_values: vec![1, 2, 4, 8, 16],
            alphas: vec![0.0, 0.2, 0.5, 1.0],
            lambdas: vec![0.0, 0.05, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub paths: Paths,
    pub gen_data: GenDataOptions,
    pub sample: SampleOptions,
    pub fuse: FuseOptions,
    pub ablate: AblateOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::config(format!("paths.{field}"), "required (flag or config file)"))
    }
}

/// Tool identity written next to every resolved config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStamp {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub threads: usize,
}

/// Write `config.json` (loadable with `--config`) and `run.json` into `dir`.
pub fn echo_config(dir: &Path, command: &str, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), config)?;
    let stamp = RunStamp {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        command: command.into(),
        threads: satfuse::par::current_threads(),
    };
    write_json(&dir.join("run.json"), &stamp)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
