//! The six trainable networks and their Pioneer / Successor / Coordinator compositions.
//!
//! Naming follows the output domain: the Successor `S_A = G_A ∘ E_A` turns a
//! domain-B image into a domain-A reconstruction, and the Coordinator
//! `C_A = S_B ∘ S_A` takes a domain-B image round trip back to domain B.
//! Successors borrow the Pioneers' generators, never copies of them.

pub mod architecture;
pub mod conv;
pub mod network;
pub mod optim;
pub mod toy;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use architecture::{NetConfig, NetworkSpec, Role};
pub use network::{LayerKind, Mode, Network, Trace};
pub use optim::{AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ItemShape, Tensor};

/// Smallest distance from {0, 1} reported for a discriminator probability.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

/// A point of the latent space: an encoding or a prior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "latent vector",
                "contains non-finite values",
            ));
        }
        Ok(LatentVector(values))
    }

    /// Each coordinate uniform on [-1, 1].
    pub fn sample_uniform(dim: usize, rng: &mut dyn RngCore) -> Self {
        LatentVector((0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A batch of `n` uniform priors on [-1, 1]^dim.
pub fn sample_prior<T: Scalar>(n: usize, dim: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let data = (0..n * dim)
        .map(|_| T::lit(rng.gen_range(-1.0..=1.0)))
        .collect();
    Tensor::from_vec(ItemShape::flat(dim).batch(n), data).expect("sized")
}

/// Per-stage optimizer step counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub warmup: u64,
    pub joint: u64,
    pub refine: u64,
}

impl StepCounters {
    pub fn total(&self) -> u64 {
        self.warmup + self.joint + self.refine
    }
}

/// Adaptive-moment state of the Pioneer networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PioneerOptimizers<T> {
    pub gen_a: AdamState<T>,
    pub gen_b: AdamState<T>,
    pub disc_a: AdamState<T>,
    pub disc_b: AdamState<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle<T = f32> {
    pub config: NetConfig,
    pub enc_a: Network<T>,
    pub enc_b: Network<T>,
    pub gen_a: Network<T>,
    pub gen_b: Network<T>,
    pub disc_a: Network<T>,
    pub disc_b: Network<T>,
    pub optim: PioneerOptimizers<T>,
    pub steps: StepCounters,
}

impl<T: Scalar> ModelBundle<T> {
    /// Builds the six networks from `cfg` with seeded Normal(0, init_std) weights.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let build = |role| NetworkSpec::for_role(role, cfg)?.build::<T>();
        let mut nets = [
            build(Role::Encoder)?,
            build(Role::Encoder)?,
            build(Role::Generator)?,
            build(Role::Generator)?,
            build(Role::Discriminator)?,
            build(Role::Discriminator)?,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in nets.iter_mut() {
            net.init_normal(cfg.init_std, &mut rng);
        }
        let [enc_a, enc_b, gen_a, gen_b, disc_a, disc_b] = nets;
        Ok(Self::from_networks(
            cfg.clone(),
            enc_a,
            enc_b,
            gen_a,
            gen_b,
            disc_a,
            disc_b,
        ))
    }

    /// Assembles a bundle from arbitrary networks (used for toy configurations).
    pub fn from_networks(
        config: NetConfig,
        enc_a: Network<T>,
        enc_b: Network<T>,
        gen_a: Network<T>,
        gen_b: Network<T>,
        disc_a: Network<T>,
        disc_b: Network<T>,
    ) -> Self {
        let optim = PioneerOptimizers {
            gen_a: AdamState::new(gen_a.param_count()),
            gen_b: AdamState::new(gen_b.param_count()),
            disc_a: AdamState::new(disc_a.param_count()),
            disc_b: AdamState::new(disc_b.param_count()),
        };
        ModelBundle {
            config,
            enc_a,
            enc_b,
            gen_a,
            gen_b,
            disc_a,
            disc_b,
            optim,
            steps: StepCounters::default(),
        }
    }

    pub fn encoder(&self, d: Domain) -> &Network<T> {
        match d {
            Domain::A => &self.enc_a,
            Domain::B => &self.enc_b,
        }
    }

    pub fn generator(&self, d: Domain) -> &Network<T> {
        match d {
            Domain::A => &self.gen_a,
            Domain::B => &self.gen_b,
        }
    }

    pub fn discriminator(&self, d: Domain) -> &Network<T> {
        match d {
            Domain::A => &self.disc_a,
            Domain::B => &self.disc_b,
        }
    }

    pub fn encoder_mut(&mut self, d: Domain) -> &mut Network<T> {
        match d {
            Domain::A => &mut self.enc_a,
            Domain::B => &mut self.enc_b,
        }
    }

    pub fn generator_mut(&mut self, d: Domain) -> &mut Network<T> {
        match d {
            Domain::A => &mut self.gen_a,
            Domain::B => &mut self.gen_b,
        }
    }

    pub fn discriminator_mut(&mut self, d: Domain) -> &mut Network<T> {
        match d {
            Domain::A => &mut self.disc_a,
            Domain::B => &mut self.disc_b,
        }
    }

    /// Image shape consumed and produced by the Successors.
    pub fn image_shape(&self) -> ItemShape {
        self.gen_a.output_shape()
    }

    pub fn latent_dim(&self) -> usize {
        self.gen_a.input_shape().len()
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        let cast_adam = |s: &AdamState<T>| AdamState {
            m: s.m.iter().map(|v| U::lit(v.as_f64())).collect(),
            v: s.v.iter().map(|v| U::lit(v.as_f64())).collect(),
            t: s.t,
        };
        ModelBundle {
            config: self.config.clone(),
            enc_a: self.enc_a.cast(),
            enc_b: self.enc_b.cast(),
            gen_a: self.gen_a.cast(),
            gen_b: self.gen_b.cast(),
            disc_a: self.disc_a.cast(),
            disc_b: self.disc_b.cast(),
            optim: PioneerOptimizers {
                gen_a: cast_adam(&self.optim.gen_a),
                gen_b: cast_adam(&self.optim.gen_b),
                disc_a: cast_adam(&self.optim.disc_a),
                disc_b: cast_adam(&self.optim.disc_b),
            },
            steps: self.steps,
        }
    }
}

fn check_input<T: Scalar>(net: &Network<T>, x: &Tensor<T>, what: &str) -> Result<()> {
    if x.shape().item() != net.input_shape() {
        return Err(Error::shape(what, net.input_shape(), x.shape().item()));
    }
    Ok(())
}

/// Encodes a batch of images into latent vectors (inference mode).
pub fn encode<T: Scalar>(enc: &Network<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(enc, images, "encoder input")?;
    enc.infer(images)
}

/// Generates images from a batch of latent vectors (inference mode).
pub fn generate<T: Scalar>(gen: &Network<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    check_input(gen, z, "generator input")?;
    if !z.all_finite() {
        return Err(Error::validation(
            "latent vector",
            "contains non-finite values",
        ));
    }
    gen.infer(z)
}

/// Discriminator probabilities, one per image, kept inside `(PROB_EPS, 1 - PROB_EPS)`.
pub fn discriminate<T: Scalar>(disc: &Network<T>, images: &Tensor<T>) -> Result<Vec<T>> {
    check_input(disc, images, "discriminator input")?;
    let lo = T::lit(PROB_EPS);
    let hi = T::one() - lo;
    Ok(disc
        .infer(images)?
        .data()
        .iter()
        .map(|&p| p.max(lo).min(hi))
        .collect())
}

/// `S_d(img) = G_d(E_d(img))`, mapping an image of the other domain into domain `d`.
pub fn successor_forward<T: Scalar>(
    bundle: &ModelBundle<T>,
    d: Domain,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let z = encode(bundle.encoder(d), images)?;
    generate(bundle.generator(d), &z)
}

/// `C_A(b) = S_B(S_A(b))` and `C_B(a) = S_A(S_B(a))`.
pub fn coordinator_forward<T: Scalar>(
    bundle: &ModelBundle<T>,
    d: Domain,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let there = successor_forward(bundle, d, images)?;
    successor_forward(bundle, d.other(), &there)
}

/// Single-image convenience wrapper around [`encode`].
pub fn encode_image(enc: &Network<f32>, image: &[f32]) -> Result<LatentVector> {
    let x = Tensor::stack(enc.input_shape(), &[image])?;
    let z = encode(enc, &x)?;
    LatentVector::new(z.data().iter().map(|&v| v as f64).collect())
}

/// Single-latent convenience wrapper around [`generate`].
pub fn generate_image(gen: &Network<f32>, z: &LatentVector) -> Result<Vec<f32>> {
    let values: Vec<f32> = z.values().iter().map(|&v| v as f32).collect();
    let zt = Tensor::stack(gen.input_shape(), &[&values])?;
    Ok(generate(gen, &zt)?.into_data())
}
