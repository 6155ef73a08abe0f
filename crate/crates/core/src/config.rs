//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! ```toml
//! seed = 7                 # optional; derives every per-stage seed
//!
//! [synthetic]
//! num_identities = 70
//! visits_per_identity = 4
//! latent_dim = 8
//! ambient_dim = 32
//! visit_noise_sigma = 1.0
//!
//! [split]
//! train = 0.7
//! validation = 0.1
//! test = 0.2
//!
//! [encoder]
//! hidden_dims = [64]
//! output_dim = 32
//!
//! [train]
//! epochs = 40
//!
//! [eval]
//! settings = ["random", "same_attribute:sex", "ood"]
//!
//! [probe]
//! task_attribute = "sex"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitSpec, SyntheticConfig};
use crate::encoder::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::probe::ProbeConfig;
use crate::seeds;
use crate::trainer::TrainConfig;

fn default_true() -> bool {
    true
}

/// Encoder shape; the input dimension comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default = "EncoderSection::default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "EncoderSection::default_output_dim")]
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub normalize_output: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl EncoderSection {
    fn default_hidden_dims() -> Vec<usize> {
        vec![64]
    }

    fn default_output_dim() -> usize {
        EncoderConfig::DEFAULT_OUTPUT_DIM
    }

    pub fn for_input(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.output_dim,
            activation: self.activation,
            normalize_output: self.normalize_output,
            init_seed: self.init_seed,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            hidden_dims: Self::default_hidden_dims(),
            output_dim: EncoderConfig::DEFAULT_OUTPUT_DIM,
            activation: Activation::Relu,
            normalize_output: true,
            init_seed: 0,
        }
    }
}

/// Artifact locations. Relative paths resolve against the output directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub ood: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub eval_report: Option<PathBuf>,
    pub probe_report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.set_master_seed(seed);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Sets the master seed and re-derives every stage seed from it.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        if let Some(s) = &mut self.synthetic {
            s.projection_seed = seeds::derive(seed, &[1]);
            s.sample_seed = seeds::derive(seed, &[2]);
        }
        self.split.seed = seeds::derive(seed, &[3]);
        self.encoder.init_seed = seeds::derive(seed, &[4]);
        self.train.seed = seeds::derive(seed, &[5]);
        self.eval.seed = seeds::derive(seed, &[6]);
        if let Some(p) = &mut self.probe {
            p.seed = seeds::derive(seed, &[7]);
        }
    }

    pub fn synthetic(&self) -> Result<&SyntheticConfig> {
        self.synthetic
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing [synthetic] section".into()))
    }

    pub fn probe(&self) -> Result<&ProbeConfig> {
        self.probe
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing [probe] section".into()))
    }
}

/// Resolved artifact paths for one run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out_dir: PathBuf,
    paths: PathsSection,
}

impl Layout {
    pub fn new(out_dir: impl Into<PathBuf>, paths: &PathsSection) -> Layout {
        Layout {
            out_dir: out_dir.into(),
            paths: paths.clone(),
        }
    }

    fn resolve(&self, configured: &Option<PathBuf>, default: &str) -> PathBuf {
        match configured {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.out_dir.join(p),
            None => self.out_dir.join(default),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.resolve(&self.paths.data, "data.csv")
    }

    pub fn ood(&self) -> PathBuf {
        self.resolve(&self.paths.ood, "ood.csv")
    }

    pub fn train(&self) -> PathBuf {
        self.resolve(&self.paths.train, "train.csv")
    }

    pub fn val(&self) -> PathBuf {
        self.resolve(&self.paths.val, "val.csv")
    }

    pub fn test(&self) -> PathBuf {
        self.resolve(&self.paths.test, "test.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint, "encoder.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.resolve(&self.paths.history, "history.csv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.resolve(&self.paths.eval_report, "eval_report.json")
    }

    pub fn roc_csv(&self, setting_label: &str) -> PathBuf {
        let name: String = setting_label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        self.out_dir.join(format!("roc_{name}.csv"))
    }

    pub fn probe_report(&self, task: &str) -> PathBuf {
        if let Some(p) = &self.paths.probe_report {
            return self.resolve(&Some(p.clone()), "");
        }
        let name: String = task
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        self.out_dir.join(format!("probe_{name}.json"))
    }
}
