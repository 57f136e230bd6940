//! Central finite-difference verification of the analytic loss gradients.
//!
//! The finite-difference side only ever calls forward value functions; the
//! analytic side uses the back-propagation path the trainer uses. Both run the
//! same training-mode forward passes with identically seeded dropout masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    discriminator_pass, generator_pass, reconstruction_pass, BundleGrads, LossWeights, NetId,
    ReconstructionGrads,
};
use crate::networks::{sample_prior, Domain, Mode, ModelBundle, NetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    /// `-(mean log D(x) + mean log(1 - D(G(z))))` for one domain.
    Discriminator(Domain),
    /// `-mean log D(G(z))` for one domain.
    Generator(Domain),
    /// `id_A + id_B`.
    Identical,
    /// `pm_A + pm_B`.
    PairMatched,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub loss: CheckedLoss,
    pub net: NetId,
    pub params: usize,
    /// `‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂)`; zero when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Fixed inputs for one gradient-check run.
pub struct Fixture<T> {
    pub bundle: ModelBundle<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub z: Tensor<T>,
    pub dropout_seed: u64,
}

impl<T: Scalar> Fixture<T> {
    pub fn random(cfg: &NetConfig, batch: usize, seed: u64) -> Result<Self> {
        let bundle = ModelBundle::new(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let img = bundle.image_shape();
        let mut images = || {
            let data = (0..img.len() * batch)
                .map(|_| T::lit(rng.gen_range(-1.0..1.0)))
                .collect();
            Tensor::from_vec(img.batch(batch), data)
        };
        let a = images()?;
        let b = images()?;
        let mut zr = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e);
        let z = sample_prior(batch, bundle.latent_dim(), &mut zr);
        Ok(Fixture {
            bundle,
            a,
            b,
            z,
            dropout_seed: seed.wrapping_mul(31).wrapping_add(7),
        })
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.dropout_seed)
    }

    /// Loss value and, when `grads` is given, its analytic gradient.
    fn evaluate(
        &self,
        bundle: &ModelBundle<T>,
        loss: CheckedLoss,
        grads: Option<&mut BundleGrads<T>>,
    ) -> Result<T> {
        let mut rng = self.rng();
        let weights = LossWeights::default();
        match loss {
            CheckedLoss::Discriminator(d) => {
                let real = if d == Domain::A { &self.a } else { &self.b };
                let (fake, gtrace) = bundle
                    .generator(d)
                    .forward(&self.z, Mode::Train, &mut rng)?;
                let pass = discriminator_pass(
                    bundle,
                    d,
                    real,
                    &fake,
                    Mode::Train,
                    &mut rng,
                    grads,
                    Some(&gtrace),
                )?;
                Ok(-pass.objectives.discriminator)
            }
            CheckedLoss::Generator(d) => {
                let (fake, gtrace) = bundle
                    .generator(d)
                    .forward(&self.z, Mode::Train, &mut rng)?;
                let (v, _) = generator_pass(
                    bundle,
                    d,
                    &fake,
                    &gtrace,
                    Mode::Train,
                    &mut rng,
                    grads,
                    true,
                )?;
                Ok(v)
            }
            CheckedLoss::Identical | CheckedLoss::PairMatched => {
                let pm = loss == CheckedLoss::PairMatched;
                let mut scratch;
                let sinks = match grads {
                    None => None,
                    Some(g) if pm => {
                        scratch = BundleGrads::zeros(bundle);
                        Some(ReconstructionGrads {
                            identical: &mut scratch,
                            pair_matched: Some(g),
                        })
                    }
                    Some(g) => Some(ReconstructionGrads {
                        identical: g,
                        pair_matched: None,
                    }),
                };
                let pass = reconstruction_pass(
                    bundle,
                    &self.a,
                    &self.b,
                    Some(&self.z),
                    &weights,
                    pm,
                    Mode::Train,
                    &mut rng,
                    sinks,
                )?;
                let v = pass.values;
                Ok(if pm {
                    v.pm_a.expect("requested") + v.pm_b.expect("requested")
                } else {
                    v.id_a + v.id_b
                })
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Fixture<U> {
        Fixture {
            bundle: self.bundle.cast(),
            a: self.a.cast(),
            b: self.b.cast(),
            z: self.z.cast(),
            dropout_seed: self.dropout_seed,
        }
    }

    /// Analytic gradients of `loss`, widened to `f64`.
    pub fn analytic(&self, loss: CheckedLoss) -> Result<Vec<(NetId, Vec<f64>)>> {
        let mut grads = BundleGrads::zeros(&self.bundle);
        self.evaluate(&self.bundle, loss, Some(&mut grads))?;
        Ok(NetId::ALL
            .iter()
            .map(|&id| (id, grads.get(id).iter().map(|v| v.as_f64()).collect()))
            .collect())
    }

    /// Compares analytic and central-difference gradients for every network `loss` touches.
    pub fn check(&self, loss: CheckedLoss, step: f64) -> Result<Vec<GradCheck>> {
        self.check_with_oracle(loss, step, self)
    }

    /// Like [`Fixture::check`], with the finite differences taken on `oracle`
    /// (the same fixture, possibly at another precision).
    pub fn check_with_oracle<U: Scalar>(
        &self,
        loss: CheckedLoss,
        step: f64,
        oracle: &Fixture<U>,
    ) -> Result<Vec<GradCheck>> {
        let analytic = self.analytic(loss)?;
        oracle.compare(loss, step, &analytic)
    }

    fn compare(
        &self,
        loss: CheckedLoss,
        step: f64,
        analytic: &[(NetId, Vec<f64>)],
    ) -> Result<Vec<GradCheck>> {
        let nets: Vec<NetId> = match loss {
            CheckedLoss::Discriminator(d) | CheckedLoss::Generator(d) => {
                vec![NetId::disc(d), NetId::gen(d)]
            }
            CheckedLoss::Identical | CheckedLoss::PairMatched => {
                vec![NetId::EncA, NetId::EncB, NetId::GenA, NetId::GenB]
            }
        };
        let h = T::lit(step);
        let mut probe = self.bundle.clone();
        let mut out = Vec::new();
        for id in nets {
            let n = id.of(&probe).param_count();
            let mut fd = Vec::with_capacity(n);
            for i in 0..n {
                let orig = id.of(&probe).params()[i];
                id.of_mut(&mut probe).params_mut()[i] = orig + h;
                let up = self.evaluate(&probe, loss, None)?;
                id.of_mut(&mut probe).params_mut()[i] = orig - h;
                let down = self.evaluate(&probe, loss, None)?;
                id.of_mut(&mut probe).params_mut()[i] = orig;
                fd.push((up.as_f64() - down.as_f64()) / (2.0 * step));
            }
            let g = &analytic.iter().find(|(i, _)| *i == id).expect("all nets").1;
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let scale = norm(g).max(norm(&fd));
            let rel_error = if scale == 0.0 {
                0.0
            } else {
                norm(&diff) / scale
            };
            out.push(GradCheck {
                loss,
                net: id,
                params: n,
                rel_error,
                analytic_norm: norm(g),
            });
        }
        Ok(out)
    }
}

/// Every loss of the miniature configuration checked against central differences.
pub fn check_all<T: Scalar>(
    cfg: &NetConfig,
    batch: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<GradCheck>> {
    let fixture = Fixture::<T>::random(cfg, batch, seed)?;
    let losses = [
        CheckedLoss::Discriminator(Domain::A),
        CheckedLoss::Discriminator(Domain::B),
        CheckedLoss::Generator(Domain::A),
        CheckedLoss::Generator(Domain::B),
        CheckedLoss::Identical,
        CheckedLoss::PairMatched,
    ];
    let mut all = Vec::new();
    for loss in losses {
        all.extend(fixture.check(loss, step)?);
    }
    Ok(all)
}
