//! Declarative network construction: residual blocks with an optional
//! convolutional block attention module, flatten, fully-connected head.

mod model;

pub use model::{build_attention_network, ChannelAttention, Mode, ModelGraph, SpatialAttention};

use crate::engine::{OptimizerConfig, TrainingConfig};
use crate::traces::LeakageModel;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_length: usize,
    /// Hidden fully-connected layers.
    pub n1: usize,
    /// Basic blocks (conv-ReLU-conv-ReLU) per residual block.
    pub n2: usize,
    /// Residual blocks.
    pub n3: usize,
    pub filters_per_block: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub pool_kind: PoolKind,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub activation: Activation,
    pub fc_hidden_units: usize,
    /// Applied after hidden FC layer `i`; may be shorter than `n1`.
    pub dropout_rates: Vec<f64>,
    pub n_classes: usize,
    pub cbam: CbamConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_length: 0,
            n1: 2,
            n2: 2,
            n3: 0,
            filters_per_block: Vec::new(),
            conv_kernel: 11,
            conv_stride: 1,
            pool_kind: PoolKind::Average,
            pool_size: 2,
            pool_stride: 2,
            activation: Activation::Relu,
            fc_hidden_units: 1024,
            dropout_rates: Vec::new(),
            n_classes: 256,
            cbam: CbamConfig::default(),
        }
    }
}

/// Channel-then-spatial attention hosted by one residual block; the module
/// order is fixed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CbamConfig {
    pub enabled: bool,
    pub residual_block_index: usize,
    /// Bottleneck ratio of the shared MLP (channels -> channels / r -> channels).
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        CbamConfig {
            enabled: true,
            residual_block_index: 0,
            reduction_ratio: 16,
            spatial_kernel: 11,
        }
    }
}

impl NetworkConfig {
    /// Hard violations are errors; departures from the reference architecture
    /// that remain buildable come back as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.input_length == 0 {
            return Err(Error::Config("input_length must be >= 1".into()));
        }
        if self.filters_per_block.len() != self.n3 {
            return Err(Error::Config(format!(
                "filters_per_block has {} entries, n3 = {}",
                self.filters_per_block.len(),
                self.n3
            )));
        }
        if self.filters_per_block.iter().any(|&f| f == 0) {
            return Err(Error::Config("filters_per_block entries must be >= 1".into()));
        }
        if self.conv_kernel == 0 {
            return Err(Error::Config("conv_kernel must be >= 1".into()));
        }
        if self.conv_stride == 0 {
            return Err(Error::Config("conv_stride must be >= 1".into()));
        }
        if self.n3 > 0 && self.conv_stride != 1 {
            // A strided conv would shrink the basic-block branch more than the
            // single shortcut conv, making the residual addition shape-invalid.
            return Err(Error::Config(format!(
                "conv_stride must be 1 inside residual blocks, got {}",
                self.conv_stride
            )));
        }
        if self.pool_size == 0 || self.pool_stride == 0 {
            return Err(Error::Config("pool_size and pool_stride must be >= 1".into()));
        }
        if self.n1 > 0 && self.fc_hidden_units == 0 {
            return Err(Error::Config("fc_hidden_units must be >= 1 when n1 > 0".into()));
        }
        if self.n_classes != 256 {
            return Err(Error::Config(format!(
                "n_classes must be 256, got {}",
                self.n_classes
            )));
        }
        if self.dropout_rates.len() > self.n1 {
            return Err(Error::Config(format!(
                "dropout_rates has {} entries but there are only {} hidden layers",
                self.dropout_rates.len(),
                self.n1
            )));
        }
        if self.dropout_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout_rates must lie in [0, 1)".into()));
        }
        if self.cbam.enabled && self.n3 > 0 {
            let host = self.cbam.residual_block_index;
            if host >= self.n3 {
                return Err(Error::Config(format!(
                    "cbam.residual_block_index {host} >= n3 {}",
                    self.n3
                )));
            }
            if self.cbam.spatial_kernel == 0 || self.cbam.spatial_kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "cbam.spatial_kernel must be odd, got {}",
                    self.cbam.spatial_kernel
                )));
            }
            let channels = self.filters_per_block[host];
            let r = self.cbam.reduction_ratio;
            if r == 0 || channels % r != 0 {
                return Err(Error::Config(format!(
                    "cbam.reduction_ratio {r} must divide the hosting block's {channels} channels"
                )));
            }
        }
        if self.cbam.enabled && self.n3 == 0 {
            return Err(Error::Config(
                "cbam.enabled requires at least one residual block (n3 >= 1)".into(),
            ));
        }

        let mut warnings = Vec::new();
        if self.n1 != 2 {
            warnings.push(format!("n1 = {} deviates from the reference value 2", self.n1));
        }
        if self.n2 != 2 {
            warnings.push(format!("n2 = {} deviates from the reference value 2", self.n2));
        }
        if self.n3 == 0 {
            warnings.push("n3 = 0 builds a network with no convolutional stage".into());
        }
        Ok(warnings)
    }

    /// Time length after the final pooling stage (each residual block pools
    /// once; convolutions are length-preserving).
    pub fn pooled_length(&self) -> usize {
        let mut t = self.input_length;
        for _ in 0..self.n3 {
            t = crate::engine::ops::pooled_len(t, self.pool_size, self.pool_stride);
        }
        t
    }

    /// Channel count entering the flatten stage.
    pub fn final_channels(&self) -> usize {
        self.filters_per_block.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub net: NetworkConfig,
    pub training: TrainingConfig,
    pub leakage: LeakageModel,
    pub n_profiling: usize,
    pub n_attack: usize,
}

/// Reference experiment settings for the four public datasets.
pub fn dataset_preset(name: &str) -> Result<DatasetPreset> {
    let adam = |clip: Option<f64>| OptimizerConfig::Adam {
        learning_rate: 1e-4,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        clip_norm: clip,
    };
    let base_net = |input_length: usize, fc: usize| NetworkConfig {
        input_length,
        n3: 3,
        filters_per_block: vec![128, 256, 512],
        fc_hidden_units: fc,
        ..NetworkConfig::default()
    };
    match name {
        "dpav4" => Ok(DatasetPreset {
            name: "dpav4",
            net: base_net(1000, 1024),
            training: TrainingConfig {
                epochs: 60,
                batch_size: 200,
                optimizer: adam(None),
                ..TrainingConfig::default()
            },
            leakage: LeakageModel::SboxXorMask { byte_index: 1, mask_byte: None },
            n_profiling: 5000,
            n_attack: 5000,
        }),
        "aes_rd" => Ok(DatasetPreset {
            name: "aes_rd",
            net: NetworkConfig {
                input_length: 3500,
                n3: 5,
                filters_per_block: vec![64, 64, 128, 128, 256],
                fc_hidden_units: 1024,
                dropout_rates: vec![0.2, 0.2],
                ..NetworkConfig::default()
            },
            training: TrainingConfig {
                epochs: 101,
                batch_size: 256,
                optimizer: adam(Some(1.0)),
                ..TrainingConfig::default()
            },
            leakage: LeakageModel::Sbox { byte_index: 1 },
            n_profiling: 40_000,
            n_attack: 10_000,
        }),
        "aes_hd" => Ok(DatasetPreset {
            name: "aes_hd",
            net: base_net(1250, 1024),
            training: TrainingConfig {
                epochs: 75,
                batch_size: 200,
                optimizer: adam(None),
                ..TrainingConfig::default()
            },
            leakage: LeakageModel::LastRoundHd { i1: 12, i2: 8 },
            n_profiling: 50_000,
            n_attack: 25_000,
        }),
        "ascad" => Ok(DatasetPreset {
            name: "ascad",
            net: base_net(700, 4096),
            training: TrainingConfig {
                epochs: 75,
                batch_size: 200,
                optimizer: adam(None),
                ..TrainingConfig::default()
            },
            leakage: LeakageModel::Sbox { byte_index: 3 },
            n_profiling: 50_000,
            n_attack: 10_000,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}
