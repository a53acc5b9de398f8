//! Experiment configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use hashlab_core::{Error, HeadConfig, MetricOptions, NetworkSpec, Result, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::{ingest, synth_blobs, DataFormat, Dataset, SplitConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    File { path: PathBuf },
    Inline(NetworkSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub shape: Vec<usize>,
    pub separation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub synth: Option<SynthConfig>,
    /// View every item with this shape (for example flat CSV rows as images).
    pub shape: Option<Vec<usize>>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: drives data synthesis, the split and training
    /// (overriding `train.seed`).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub bits: Vec<usize>,
    #[serde(default)]
    pub precision: Precision,
    /// Save a checkpoint every this many iterations; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub network: NetworkSource,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl ExperimentConfig {
    /// Parses TOML and resolves relative paths against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let NetworkSource::File { path } = &mut cfg.network {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(p) = cfg.data.path.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits.is_empty() {
            return Err(Error::Config("bits: list at least one code length".into()));
        }
        if let Some(b) = self.bits.iter().find(|&&b| b == 0) {
            return Err(Error::Config(format!("bits: code length {b} must be at least 1")));
        }
        self.train.validate()?;
        if let NetworkSource::File { path } = &self.network {
            if !path.is_file() {
                return Err(Error::Config(format!("network.path: {} does not exist", path.display())));
            }
        }
        match (&self.data.path, &self.data.synth) {
            (Some(p), None) => {
                if !p.exists() {
                    return Err(Error::Config(format!("data.path: {} does not exist", p.display())));
                }
            }
            (None, Some(s)) => {
                if s.classes < 2 {
                    return Err(Error::Config("data.synth.classes: need at least 2".into()));
                }
                if s.separation.is_nan() || s.separation < 0.0 {
                    return Err(Error::Config("data.synth.separation: must be non-negative".into()));
                }
            }
            _ => return Err(Error::Config("data: set exactly one of `path` or `synth`".into())),
        }
        if self.split.query == 0 {
            return Err(Error::Config("split.query: must be positive".into()));
        }
        if self.metrics.radius > 64 * 1024 {
            return Err(Error::Config("metrics.radius: unreasonably large".into()));
        }
        if let Some(0) = self.metrics.truncate {
            return Err(Error::Config("metrics.truncate: must be positive".into()));
        }
        self.network_spec()?;
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match &self.network {
            NetworkSource::Inline(spec) => Ok(spec.clone()),
            NetworkSource::File { path } => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("network.path: {}: {e}", path.display())))?;
                NetworkSpec::from_toml_str(&text).map_err(|e| Error::Config(format!("network: {e}")))
            }
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let ds = match (&self.data.path, &self.data.synth) {
            (Some(p), _) => ingest(p, self.data.format)?,
            (None, Some(s)) => synth_blobs(s.classes, s.per_class, &s.shape, s.separation, self.seed)?,
            (None, None) => return Err(Error::Config("data: set `path` or `synth`".into())),
        };
        match &self.data.shape {
            Some(shape) => ds.reshape(shape.clone()),
            None => Ok(ds),
        }
    }

    /// Self-contained copy: the network inlined, paths absolute.
    pub fn snapshot(&self) -> Result<String> {
        let mut c = self.clone();
        c.network = NetworkSource::Inline(self.network_spec()?);
        if let Some(p) = c.data.path.as_mut() {
            if let Ok(abs) = p.canonicalize() {
                *p = abs;
            }
        }
        toml::to_string(&c).map_err(|e| Error::Config(format!("config snapshot: {e}")))
    }
}
