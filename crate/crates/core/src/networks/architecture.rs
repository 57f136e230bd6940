//! Encoder, generator and discriminator layer ladders.
//!
//! All three follow a DCGAN-style ladder of 5×5 stride-2 (transposed)
//! convolutions. With the default widths `[64, 128, 256, 512]` a 64×64 image
//! shrinks to 4×4×512 before the dense head.

use serde::{Deserialize, Serialize};

use super::network::{LayerKind, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ItemShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// Feature widths from the image side inward; one stride-2 block per entry.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            latent_dim: 100,
            channels: vec![64, 128, 256, 512],
            kernel: 5,
            leaky_slope: 0.2,
            dropout: 0.3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_std: 0.02,
        }
    }
}

impl NetConfig {
    /// Narrow ladder for single-machine CPU runs; same depth and kernel as the default.
    pub fn desk() -> Self {
        NetConfig {
            channels: vec![4, 8, 16, 32],
            ..NetConfig::default()
        }
    }

    /// The 8×8, two-channel, latent-4 configuration used for gradient checks.
    pub fn miniature() -> Self {
        NetConfig {
            image_size: 8,
            latent_dim: 4,
            channels: vec![2, 2],
            init_std: 0.3,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::validation(
                "network.channels",
                "need at least one non-zero width",
            ));
        }
        if self.latent_dim == 0 {
            return Err(Error::validation("network.latent_dim", "must be positive"));
        }
        if self.kernel.is_multiple_of(2) || self.kernel < 3 {
            return Err(Error::validation("network.kernel", "must be odd and >= 3"));
        }
        let blocks = self.channels.len() as u32;
        let factor = 1usize << blocks;
        if self.image_size < factor || !self.image_size.is_multiple_of(factor) {
            return Err(Error::validation(
                "network.image_size",
                format!("{} is not divisible by 2^{blocks}", self.image_size),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("network.dropout", "must lie in [0,1)"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ItemShape {
        ItemShape::new(1, self.image_size, self.image_size)
    }

    fn bottom(&self) -> ItemShape {
        let side = self.image_size >> self.channels.len();
        ItemShape::new(*self.channels.last().expect("validated"), side, side)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Encoder,
    Generator,
    Discriminator,
}

/// Declarative description of one network: role, shapes and layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub input: ItemShape,
    pub output: ItemShape,
    pub layers: Vec<LayerKind>,
}

impl NetworkSpec {
    pub fn for_role(role: Role, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let (input, layers) = match role {
            Role::Encoder => (
                cfg.image_shape(),
                downsampling_ladder(cfg, true, cfg.latent_dim),
            ),
            Role::Discriminator => (cfg.image_shape(), downsampling_ladder(cfg, false, 1)),
            Role::Generator => (ItemShape::flat(cfg.latent_dim), upsampling_ladder(cfg)),
        };
        let output = match role {
            Role::Encoder => ItemShape::flat(cfg.latent_dim),
            Role::Generator => cfg.image_shape(),
            Role::Discriminator => ItemShape::flat(1),
        };
        Ok(NetworkSpec {
            role,
            input,
            output,
            layers,
        })
    }

    /// Instantiates the layers with zeroed parameters.
    pub fn build<T: Scalar>(&self) -> Result<Network<T>> {
        let net = Network::new(self.input, self.layers.clone())?;
        if net.output_shape() != self.output {
            return Err(Error::shape(
                format!("{:?} output", self.role),
                self.output,
                net.output_shape(),
            ));
        }
        Ok(net)
    }
}

fn downsampling_ladder(cfg: &NetConfig, batch_norm_first: bool, head: usize) -> Vec<LayerKind> {
    let mut layers = Vec::new();
    let mut in_c = 1;
    for (i, &out_c) in cfg.channels.iter().enumerate() {
        let bn = i > 0 || batch_norm_first;
        layers.push(LayerKind::Conv {
            in_channels: in_c,
            out_channels: out_c,
            kernel: cfg.kernel,
            stride: 2,
            pad: cfg.pad(),
            bias: !bn,
        });
        if bn {
            layers.push(LayerKind::BatchNorm {
                channels: out_c,
                eps: cfg.bn_eps,
                momentum: cfg.bn_momentum,
            });
        }
        layers.push(LayerKind::LeakyRelu {
            slope: cfg.leaky_slope,
        });
        if cfg.dropout > 0.0 {
            layers.push(LayerKind::Dropout { rate: cfg.dropout });
        }
        in_c = out_c;
    }
    let bottom = cfg.bottom();
    layers.push(LayerKind::Reshape {
        to: ItemShape::flat(bottom.len()),
    });
    layers.push(LayerKind::Dense {
        inputs: bottom.len(),
        outputs: head,
        bias: true,
    });
    // Encodings share the prior's [-1, 1] range; the critic emits a probability.
    layers.push(if head == 1 {
        LayerKind::Sigmoid
    } else {
        LayerKind::Tanh
    });
    layers
}

fn upsampling_ladder(cfg: &NetConfig) -> Vec<LayerKind> {
    let bottom = cfg.bottom();
    let mut layers = vec![
        LayerKind::Dense {
            inputs: cfg.latent_dim,
            outputs: bottom.len(),
            bias: false,
        },
        LayerKind::BatchNorm {
            channels: bottom.len(),
            eps: cfg.bn_eps,
            momentum: cfg.bn_momentum,
        },
        LayerKind::LeakyRelu {
            slope: cfg.leaky_slope,
        },
        LayerKind::Reshape { to: bottom },
    ];
    let mut widths: Vec<usize> = cfg.channels.iter().rev().copied().collect();
    widths.push(1);
    let blocks = widths.len() - 1;
    for (i, pair) in widths.windows(2).enumerate() {
        let (in_c, out_c) = (pair[0], pair[1]);
        let last = i + 1 == blocks;
        layers.push(LayerKind::ConvTranspose {
            in_channels: in_c,
            out_channels: out_c,
            kernel: cfg.kernel,
            stride: 2,
            pad: cfg.pad(),
            out_pad: 1,
            bias: last,
        });
        if last {
            layers.push(LayerKind::Tanh);
        } else {
            layers.push(LayerKind::BatchNorm {
                channels: out_c,
                eps: cfg.bn_eps,
                momentum: cfg.bn_momentum,
            });
            layers.push(LayerKind::LeakyRelu {
                slope: cfg.leaky_slope,
            });
        }
    }
    layers
}
