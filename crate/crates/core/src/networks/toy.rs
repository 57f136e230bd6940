//! Hand-configured networks with known closed-form behaviour, for tests and
//! sanity checks of the compositions and losses.

use super::architecture::NetConfig;
use super::network::{LayerKind, Network};
use super::ModelBundle;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ItemShape;

/// `image (1×side×side) → flat → dense(scale · I)`; latent dimension `side²`.
pub fn scaled_encoder<T: Scalar>(side: usize, scale: f64) -> Result<Network<T>> {
    let len = side * side;
    let mut net = Network::new(
        ItemShape::new(1, side, side),
        vec![
            LayerKind::Reshape {
                to: ItemShape::flat(len),
            },
            LayerKind::Dense {
                inputs: len,
                outputs: len,
                bias: false,
            },
        ],
    )?;
    set_diagonal(&mut net, 1, len, scale);
    Ok(net)
}

/// `latent (side²) → dense(scale · I) → image (1×side×side)`.
pub fn scaled_generator<T: Scalar>(side: usize, scale: f64) -> Result<Network<T>> {
    let len = side * side;
    let mut net = Network::new(
        ItemShape::flat(len),
        vec![
            LayerKind::Dense {
                inputs: len,
                outputs: len,
                bias: false,
            },
            LayerKind::Reshape {
                to: ItemShape::new(1, side, side),
            },
        ],
    )?;
    set_diagonal(&mut net, 0, len, scale);
    Ok(net)
}

/// A logistic critic over the flattened image with zero weights (always 0.5).
pub fn flat_discriminator<T: Scalar>(side: usize) -> Result<Network<T>> {
    let len = side * side;
    Network::new(
        ItemShape::new(1, side, side),
        vec![
            LayerKind::Reshape {
                to: ItemShape::flat(len),
            },
            LayerKind::Dense {
                inputs: len,
                outputs: 1,
                bias: true,
            },
            LayerKind::Sigmoid,
        ],
    )
}

fn set_diagonal<T: Scalar>(net: &mut Network<T>, layer: usize, len: usize, scale: f64) {
    let (w, _) = net.layer_params_mut(layer);
    for i in 0..len {
        w[i * len + i] = T::lit(scale);
    }
}

fn toy_config(side: usize) -> NetConfig {
    NetConfig {
        image_size: side,
        latent_dim: side * side,
        channels: vec![],
        ..NetConfig::default()
    }
}

/// A bundle whose Successors are `S_A(x) = ga·ea·x` and `S_B(x) = gb·eb·x`.
pub fn linear_bundle<T: Scalar>(side: usize, scales: [f64; 4]) -> Result<ModelBundle<T>> {
    let [ea, eb, ga, gb] = scales;
    Ok(ModelBundle::from_networks(
        toy_config(side),
        scaled_encoder(side, ea)?,
        scaled_encoder(side, eb)?,
        scaled_generator(side, ga)?,
        scaled_generator(side, gb)?,
        flat_discriminator(side)?,
        flat_discriminator(side)?,
    ))
}

/// Both Successors (and so both Coordinators) are exact identities.
pub fn identity_bundle<T: Scalar>(side: usize) -> Result<ModelBundle<T>> {
    linear_bundle(side, [1.0, 1.0, 1.0, 1.0])
}
