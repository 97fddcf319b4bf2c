//! Declarative network description, serialized into checkpoint sidecars so a
//! saved model can be rebuilt exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv3x3, Dense, Dropout, GlobalAvgPool, Layer, MaxPool2, Relu};
use super::{Network, Scalar, Sequential};
use crate::error::{Error, Result};

/// Batch-norm defaults (the toolkit-wide constants).
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn default_momentum() -> f64 {
    BN_MOMENTUM
}

fn default_eps() -> f64 {
    BN_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    MaxPool2,
    Relu,
    BatchNorm {
        features: usize,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Dropout {
        p: f64,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalAvgPool => "globalavgpool",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(Error::invalid("dense layer widths must be positive"));
                }
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return Err(Error::invalid("conv layer widths must be positive"));
                }
            }
            LayerSpec::BatchNorm { features, .. } => {
                if *features == 0 {
                    return Err(Error::invalid("batchnorm feature count must be positive"));
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::invalid(format!("dropout rate {p} out of range [0, 1)")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Branch-and-trunk network description. Branch outputs are flattened and
/// concatenated in branch order before the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub branches: Vec<Vec<LayerSpec>>,
    pub trunk: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::invalid("network needs at least one input branch"));
        }
        for spec in self.branches.iter().flatten().chain(self.trunk.iter()) {
            spec.validate()?;
        }
        Ok(())
    }

    /// Instantiates the network. Every layer draws its initialization (and,
    /// for dropout, its mask stream) from a ChaCha stream derived from
    /// (seed, global layer index), so the build is reproducible and
    /// insensitive to evaluation order.
    pub fn build<F: Scalar>(&self, seed: u64) -> Result<Network<F>> {
        self.validate()?;
        let mut counter = 0u64;
        let mut build_chain = |specs: &[LayerSpec], prefix: &str| -> Result<Sequential<F>> {
            let mut layers = Vec::with_capacity(specs.len());
            for (i, spec) in specs.iter().enumerate() {
                let name = format!("{prefix}{i}:{}", spec.kind_name());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(counter + 1);
                counter += 1;
                let layer = match spec {
                    LayerSpec::Dense {
                        in_features,
                        out_features,
                    } => Layer::Dense(Dense::new(name, *in_features, *out_features, &mut rng)),
                    LayerSpec::Conv3x3 {
                        in_channels,
                        out_channels,
                    } => Layer::Conv3x3(Conv3x3::new(name, *in_channels, *out_channels, &mut rng)),
                    LayerSpec::MaxPool2 => Layer::MaxPool2(MaxPool2::new(name)),
                    LayerSpec::Relu => Layer::Relu(Relu::new(name)),
                    LayerSpec::BatchNorm {
                        features,
                        momentum,
                        eps,
                    } => Layer::BatchNorm(BatchNorm::new(name, *features, *momentum, *eps)),
                    LayerSpec::Dropout { p } => Layer::Dropout(Dropout::new(name, *p, rng)?),
                    LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::new(name)),
                };
                layers.push(layer);
            }
            Ok(Sequential { layers })
        };

        let mut branches = Vec::with_capacity(self.branches.len());
        for (bi, specs) in self.branches.iter().enumerate() {
            branches.push(build_chain(specs, &format!("b{bi}."))?);
        }
        let trunk = build_chain(&self.trunk, "t.")?;
        Ok(Network::new(branches, trunk))
    }

    /// Output width of the trunk's final dense layer (the classifier).
    pub fn classifier_width(&self) -> Option<usize> {
        self.trunk.iter().rev().find_map(|l| match l {
            LayerSpec::Dense { out_features, .. } => Some(*out_features),
            _ => None,
        })
    }
}
