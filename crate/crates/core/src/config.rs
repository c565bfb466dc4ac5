//! Run configuration: a TOML file with `[data]`, `[arch]` and `[train]`
//! sections, overridden by command-line flags and written back fully
//! resolved next to every run's outputs.
//!
//! ```toml
//! seed = 7
//! precision = "f32"
//!
//! [data]
//! size = 64
//! train = 200
//! val = 35
//! test = 50
//!
//! [arch]
//! preset = "desk"          # tiny | desk | reference
//! model = "mrrn"           # or "unet"
//!
//! [train]
//! epochs = 50
//! lr = 1e-4
//! batch_size = 10
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, ModelKind};
use crate::error::{Error, Result};
use crate::phantom::PhantomParams;
use crate::tensor::Precision;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Desk,
    Reference,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            "reference" => Ok(Preset::Reference),
            other => Err(Error::Invalid(format!("unknown preset `{other}` (expected tiny, desk or reference)"))),
        }
    }
}

impl Preset {
    pub fn arch(self, input_size: usize) -> ArchConfig {
        match self {
            Preset::Tiny => ArchConfig::tiny(),
            Preset::Desk => ArchConfig::desk(input_size),
            Preset::Reference => ArchConfig::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory holding `manifest.txt` and `<slice_id>.mrsl` files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: None, size: 64, train: 200, val: 35, test: 50, noise_sigma: 0.03 }
    }
}

impl DataConfig {
    pub fn phantom_params(&self) -> PhantomParams {
        PhantomParams { noise_sigma: self.noise_sigma, ..PhantomParams::with_size(self.size) }
    }
}

/// The `[arch]` section: an optional preset plus field overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub preset: Option<Preset>,
    pub model: Option<ModelKind>,
    pub num_streams: Option<usize>,
    pub base_channels: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub rcus_per_block: Option<usize>,
    pub input_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub reference_param_target: Option<u64>,
}

impl ArchSection {
    /// Starts from the preset (desk at the data size by default) and applies
    /// every field that is set. A changed width or depth re-derives the
    /// channel schedule unless `channels` is given.
    pub fn resolve(&self, data_size: usize) -> ArchConfig {
        let mut a = self.preset.unwrap_or(Preset::Desk).arch(data_size);
        let reshaped = self.num_streams.is_some() || self.base_channels.is_some();
        if let Some(v) = self.model {
            a.model = v;
        }
        if let Some(v) = self.num_streams {
            a.num_streams = v;
        }
        if let Some(v) = self.base_channels {
            a.base_channels = v;
        }
        if let Some(v) = self.rcus_per_block {
            a.rcus_per_block = v;
        }
        if let Some(v) = self.input_size {
            a.input_size = v;
        }
        if let Some(v) = self.num_classes {
            a.num_classes = v;
        }
        match &self.channels {
            Some(c) => a.channels = c.clone(),
            None if reshaped => a.channels.clear(),
            None => {}
        }
        if reshaped || self.input_size.is_some() || self.num_classes.is_some() {
            a.reference_param_target = None;
        }
        if self.reference_param_target.is_some() {
            a.reference_param_target = self.reference_param_target;
        }
        a.resolved()
    }
}

/// Everything a command needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Worker threads. Only the single-threaded deterministic path exists.
    pub threads: usize,
    pub data: DataConfig,
    pub arch: ArchSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            threads: 1,
            data: DataConfig::default(),
            arch: ArchSection::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Fully resolved form written to the output directory. Reading it back
/// reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Reads a run config. A resolved config written by an earlier run is
    /// accepted too.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Ok(resolved) = toml::from_str::<ResolvedConfig>(&text) {
            return Ok(resolved.into());
        }
        Self::parse(&text)
    }

    pub fn arch_config(&self) -> ArchConfig {
        self.arch.resolve(self.data.size)
    }

    /// Validates every section and returns the resolved form.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let arch = self.arch_config();
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.precision = self.precision;
        let mut problems = Vec::new();
        for result in [arch.validate(), train.validate(), self.data.phantom_params().validate()] {
            if let Err(Error::Config(p)) = result {
                problems.extend(p);
            }
        }
        if self.threads != 1 {
            problems.push(format!("threads = {}: only the single-threaded deterministic engine is available", self.threads));
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            problems.push("data split counts must be at least 1".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(ResolvedConfig {
            seed: self.seed,
            precision: self.precision,
            threads: self.threads,
            data: self.data.clone(),
            arch,
            train,
        })
    }
}

impl From<ResolvedConfig> for RunConfig {
    fn from(r: ResolvedConfig) -> Self {
        let a = r.arch;
        RunConfig {
            seed: r.seed,
            precision: r.precision,
            threads: r.threads,
            data: r.data,
            arch: ArchSection {
                preset: None,
                model: Some(a.model),
                num_streams: Some(a.num_streams),
                base_channels: Some(a.base_channels),
                channels: Some(a.channels),
                rcus_per_block: Some(a.rcus_per_block),
                input_size: Some(a.input_size),
                num_classes: Some(a.num_classes),
                reference_param_target: a.reference_param_target,
            },
            train: r.train,
        }
    }
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    /// Writes `config.toml` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
