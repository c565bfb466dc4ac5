use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter count reported for the original MRRN implementation.
pub const PAPER_PARAM_COUNT: u64 = 28_941_717;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mrrn,
    Unet,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrrn" => Ok(ModelKind::Mrrn),
            "unet" => Ok(ModelKind::Unet),
            other => Err(Error::Invalid(format!("unknown model kind `{other}` (expected mrrn or unet)"))),
        }
    }
}

/// Hyperparameters of the segmentation graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default)]
    pub model: ModelKind,
    /// Number of feature streams L (R0..R(L-1)).
    pub num_streams: usize,
    pub base_channels: usize,
    /// Channel count of each level. Derived from `base_channels` as
    /// `base·2^k` when left empty in a config file.
    #[serde(default)]
    pub channels: Vec<usize>,
    /// CNN blocks (conv3×3 → BN → ReLU) inside each RCU.
    pub rcus_per_block: usize,
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_param_target: Option<u64>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ArchConfig {
    /// Four streams, widths 32/64/128/256, 256×256 input, six classes.
    pub fn reference() -> Self {
        ArchConfig {
            model: ModelKind::Mrrn,
            num_streams: 4,
            base_channels: 32,
            channels: vec![32, 64, 128, 256],
            rcus_per_block: 2,
            input_size: 256,
            num_classes: 6,
            reference_param_target: Some(PAPER_PARAM_COUNT),
        }
    }

    /// Two streams, base width 4, 16×16 input, two classes.
    pub fn tiny() -> Self {
        Self::with_base(2, 4, 16, 2)
    }

    /// Desk-scale configuration for 64×64 phantoms with all six classes.
    pub fn desk(input_size: usize) -> Self {
        Self::with_base(3, 16, input_size, 6)
    }

    pub fn with_base(num_streams: usize, base_channels: usize, input_size: usize, num_classes: usize) -> Self {
        ArchConfig {
            model: ModelKind::Mrrn,
            num_streams,
            base_channels,
            channels: (0..num_streams).map(|k| base_channels << k).collect(),
            rcus_per_block: 2,
            input_size,
            num_classes,
            reference_param_target: None,
        }
    }

    pub fn with_model(mut self, model: ModelKind) -> Self {
        self.model = model;
        self
    }

    /// Fills an empty channel schedule from `base_channels`.
    pub fn resolved(mut self) -> Self {
        if self.channels.is_empty() {
            self.channels = (0..self.num_streams).map(|k| self.base_channels << k).collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_streams == 0 {
            problems.push("num_streams must be at least 1".to_string());
        }
        if self.channels.len() != self.num_streams {
            problems.push(format!(
                "channel schedule has {} entries but num_streams = {}",
                self.channels.len(),
                self.num_streams
            ));
        }
        if self.channels.contains(&0) {
            problems.push("channel counts must be positive".to_string());
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        if self.rcus_per_block == 0 {
            problems.push("rcus_per_block must be at least 1".to_string());
        }
        if !self.input_size.is_power_of_two() {
            problems.push(format!("input_size {} is not a power of two", self.input_size));
        }
        if self.num_streams > 0 && self.num_streams <= 31 && !self.input_size.is_multiple_of(1usize << (self.num_streams - 1)) {
            problems.push(format!(
                "input_size {} not divisible by 2^(L-1) = {}",
                self.input_size,
                1usize << (self.num_streams - 1)
            ));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            problems.push(format!("num_classes {} outside [2, 256]", self.num_classes));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Spatial size of stream `k`.
    pub fn stream_size(&self, k: usize) -> usize {
        self.input_size >> k
    }
}
