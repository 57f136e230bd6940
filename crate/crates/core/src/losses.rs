//! Training objectives: adversarial, identical and pair-matched losses.
//!
//! The value functions ([`adversarial_loss`], [`identical_loss`],
//! [`pair_matched_loss`]) are what callers and tests evaluate. The `*_pass`
//! functions compute the same quantities on the training path and additionally
//! back-propagate into a [`BundleGrads`].

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Domain, Mode, ModelBundle, Network, Trace, PROB_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative weights of the loss terms; all 1.0 unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub identical_observed: f64,
    pub identical_prior: f64,
    pub pair_matched: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            identical_observed: 1.0,
            identical_prior: 1.0,
            pair_matched: 1.0,
        }
    }
}

impl LossWeights {
    /// Only the observed-pair reconstruction term: the plain auto-encoder objective.
    pub fn observed_only() -> Self {
        LossWeights {
            adversarial: 0.0,
            identical_observed: 1.0,
            identical_prior: 0.0,
            pair_matched: 0.0,
        }
    }
}

/// One row of the metrics log. Terms not evaluated in a stage are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stage: String,
    pub adv_a: Option<f64>,
    pub adv_b: Option<f64>,
    pub id_a: Option<f64>,
    pub id_b: Option<f64>,
    pub pm_a: Option<f64>,
    pub pm_b: Option<f64>,
    pub lr_s: f64,
    pub lr_c: f64,
}

impl LossReport {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.adv_a, self.adv_b, self.id_a, self.id_b, self.pm_a, self.pm_b,
        ]
        .into_iter()
        .flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn pm_sum(&self) -> Option<f64> {
        Some(self.pm_a? + self.pm_b?)
    }
}

/// Mean over all elements of the squared difference.
pub fn mse<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape("mse operands", x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(Error::validation("mse operands", "empty"));
    }
    let sum: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sum / T::lit(x.len() as f64))
}

/// `∂ mse(x, y) / ∂x`, scaled by `weight`.
fn mse_grad<T: Scalar>(x: &[T], y: &[T], weight: T) -> Vec<T> {
    let k = weight * T::lit(2.0 / x.len() as f64);
    x.iter().zip(y).map(|(&a, &b)| k * (a - b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialObjectives<T> {
    /// `mean log D(x) + mean log(1 - D(G(z)))`, maximized by the discriminator (≤ 0).
    pub discriminator: T,
    /// Non-saturating generator loss `-mean log D(G(z))`, minimized by the generator.
    pub generator: T,
}

fn clamp_prob<T: Scalar>(p: T, what: &str) -> Result<(T, bool)> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(Error::validation(
            what,
            format!("probability {p} outside [0,1]"),
        ));
    }
    let lo = T::lit(PROB_EPS);
    let hi = T::one() - lo;
    if p < lo || p > hi {
        log::debug!("clamping {what} probability {p} into [{lo}, {hi}]");
        Ok((p.max(lo).min(hi), true))
    } else {
        Ok((p, false))
    }
}

fn mean_log<T: Scalar>(ps: &[T], complement: bool, what: &str) -> Result<T> {
    if ps.is_empty() {
        return Err(Error::validation(what, "empty batch"));
    }
    let mut sum = T::zero();
    for &p in ps {
        let (p, _) = clamp_prob(p, what)?;
        sum = sum
            + if complement {
                (T::one() - p).ln()
            } else {
                p.ln()
            };
    }
    Ok(sum / T::lit(ps.len() as f64))
}

/// Evaluates the adversarial objective on discriminator outputs.
pub fn adversarial_loss<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<AdversarialObjectives<T>> {
    let real = mean_log(d_real, false, "d_real")?;
    let fake = mean_log(d_fake, true, "d_fake")?;
    Ok(AdversarialObjectives {
        discriminator: real + fake,
        generator: -mean_log(d_fake, false, "d_fake")?,
    })
}

/// Identifies one of the six networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetId {
    EncA,
    EncB,
    GenA,
    GenB,
    DiscA,
    DiscB,
}

impl NetId {
    pub const ALL: [NetId; 6] = [
        NetId::EncA,
        NetId::EncB,
        NetId::GenA,
        NetId::GenB,
        NetId::DiscA,
        NetId::DiscB,
    ];

    pub fn enc(d: Domain) -> Self {
        match d {
            Domain::A => NetId::EncA,
            Domain::B => NetId::EncB,
        }
    }

    pub fn gen(d: Domain) -> Self {
        match d {
            Domain::A => NetId::GenA,
            Domain::B => NetId::GenB,
        }
    }

    pub fn disc(d: Domain) -> Self {
        match d {
            Domain::A => NetId::DiscA,
            Domain::B => NetId::DiscB,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetId::EncA => "E_A",
            NetId::EncB => "E_B",
            NetId::GenA => "G_A",
            NetId::GenB => "G_B",
            NetId::DiscA => "D_A",
            NetId::DiscB => "D_B",
        }
    }

    pub fn of<T>(self, b: &ModelBundle<T>) -> &Network<T> {
        match self {
            NetId::EncA => &b.enc_a,
            NetId::EncB => &b.enc_b,
            NetId::GenA => &b.gen_a,
            NetId::GenB => &b.gen_b,
            NetId::DiscA => &b.disc_a,
            NetId::DiscB => &b.disc_b,
        }
    }

    pub fn of_mut<T>(self, b: &mut ModelBundle<T>) -> &mut Network<T> {
        match self {
            NetId::EncA => &mut b.enc_a,
            NetId::EncB => &mut b.enc_b,
            NetId::GenA => &mut b.gen_a,
            NetId::GenB => &mut b.gen_b,
            NetId::DiscA => &mut b.disc_a,
            NetId::DiscB => &mut b.disc_b,
        }
    }
}

/// Parameter gradients for every network of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrads<T> {
    grads: [Vec<T>; 6],
}

impl<T: Scalar> BundleGrads<T> {
    pub fn zeros(bundle: &ModelBundle<T>) -> Self {
        BundleGrads {
            grads: NetId::ALL.map(|id| id.of(bundle).zero_grads()),
        }
    }

    pub fn get(&self, id: NetId) -> &[T] {
        &self.grads[id as usize]
    }

    pub fn get_mut(&mut self, id: NetId) -> &mut [T] {
        &mut self.grads[id as usize]
    }
}

/// Training-mode traces produced while evaluating a loss, for batch-norm bookkeeping.
pub type Traces<T> = Vec<(NetId, Trace<T>)>;

/// Result of one adversarial evaluation for a single domain.
#[derive(Debug)]
pub struct AdversarialPass<T> {
    pub objectives: AdversarialObjectives<T>,
    pub traces: Traces<T>,
}

/// `D(x)` for a batch with the probability clamp applied; returns the clamp mask too.
fn disc_probs<T: Scalar>(out: &Tensor<T>) -> Result<(Vec<T>, Vec<bool>)> {
    let mut ps = Vec::with_capacity(out.data().len());
    let mut clamped = Vec::with_capacity(out.data().len());
    for &p in out.data() {
        let (p, c) = clamp_prob(p, "discriminator output")?;
        ps.push(p);
        clamped.push(c);
    }
    Ok((ps, clamped))
}

/// Gradient of `sign * mean(log p)` (or of `log(1 - p)` when `complement`) w.r.t. raw outputs.
fn log_prob_grad<T: Scalar>(
    ps: &[T],
    clamped: &[bool],
    complement: bool,
    sign: T,
    shape_of: &Tensor<T>,
) -> Tensor<T> {
    let n = T::lit(ps.len() as f64);
    let data = ps
        .iter()
        .zip(clamped)
        .map(|(&p, &c)| {
            if c {
                T::zero()
            } else if complement {
                -sign / ((T::one() - p) * n)
            } else {
                sign / (p * n)
            }
        })
        .collect();
    Tensor::from_vec(shape_of.shape(), data).expect("same shape")
}

/// Discriminator loss `-V` and its gradients for domain `d`.
///
/// `fake` must be `G_d(z)`; when `gen_trace` is given the discriminator loss is
/// also back-propagated into the generator (used only by gradient checks; the
/// trainer detaches the fakes).
#[allow(clippy::too_many_arguments)]
pub fn discriminator_pass<T: Scalar>(
    bundle: &ModelBundle<T>,
    d: Domain,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
    grads: Option<&mut BundleGrads<T>>,
    gen_trace: Option<&Trace<T>>,
) -> Result<AdversarialPass<T>> {
    let disc = bundle.discriminator(d);
    let (out_real, tr_real) = disc.forward(real, mode, rng)?;
    let (out_fake, tr_fake) = disc.forward(fake, mode, rng)?;
    let (p_real, c_real) = disc_probs(&out_real)?;
    let (p_fake, c_fake) = disc_probs(&out_fake)?;
    let objectives = adversarial_loss(&p_real, &p_fake)?;
    if let Some(grads) = grads {
        // minimize -V
        let g_real = log_prob_grad(&p_real, &c_real, false, -T::one(), &out_real);
        let g_fake = log_prob_grad(&p_fake, &c_fake, true, -T::one(), &out_fake);
        disc.backward(&tr_real, g_real, Some(grads.get_mut(NetId::disc(d))))?;
        let g_fake_in = disc.backward(&tr_fake, g_fake, Some(grads.get_mut(NetId::disc(d))))?;
        if let Some(gt) = gen_trace {
            bundle
                .generator(d)
                .backward(gt, g_fake_in, Some(grads.get_mut(NetId::gen(d))))?;
        }
    }
    Ok(AdversarialPass {
        objectives,
        traces: vec![(NetId::disc(d), tr_real), (NetId::disc(d), tr_fake)],
    })
}

/// Non-saturating generator loss `-mean log D(G(z))` with gradients into `G_d`.
///
/// Discriminator parameter gradients are added into `disc_grads` when given and
/// discarded otherwise.
#[allow(clippy::too_many_arguments)]
pub fn generator_pass<T: Scalar>(
    bundle: &ModelBundle<T>,
    d: Domain,
    fake: &Tensor<T>,
    gen_trace: &Trace<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
    grads: Option<&mut BundleGrads<T>>,
    with_disc_grads: bool,
) -> Result<(T, Traces<T>)> {
    let disc = bundle.discriminator(d);
    let (out, tr) = disc.forward(fake, mode, rng)?;
    let (p, c) = disc_probs(&out)?;
    let loss = -mean_log(&p, false, "d_fake")?;
    if let Some(grads) = grads {
        let g = log_prob_grad(&p, &c, false, -T::one(), &out);
        let g_in = if with_disc_grads {
            disc.backward(&tr, g, Some(grads.get_mut(NetId::disc(d))))?
        } else {
            disc.backward(&tr, g, None)?
        };
        bundle
            .generator(d)
            .backward(gen_trace, g_in, Some(grads.get_mut(NetId::gen(d))))?;
    }
    Ok((loss, vec![(NetId::disc(d), tr)]))
}

/// Values of the reconstruction objectives for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionValues<T> {
    pub id_a: T,
    pub id_b: T,
    pub pm_a: Option<T>,
    pub pm_b: Option<T>,
}

pub struct ReconstructionPass<T> {
    pub values: ReconstructionValues<T>,
    pub traces: Traces<T>,
}

/// Gradient sinks for the identical and pair-matched objectives.
pub struct ReconstructionGrads<'a, T> {
    pub identical: &'a mut BundleGrads<T>,
    pub pair_matched: Option<&'a mut BundleGrads<T>>,
}

fn check_pair_batches<T: Scalar>(
    bundle: &ModelBundle<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    let img = bundle.image_shape();
    if a.shape().n != b.shape().n {
        return Err(Error::validation(
            "paired batches",
            format!("{} A-images vs {} B-images", a.shape().n, b.shape().n),
        ));
    }
    if a.shape().n == 0 {
        return Err(Error::validation("paired batches", "empty"));
    }
    for (name, t) in [("A batch", a), ("B batch", b)] {
        if t.shape().item() != img {
            return Err(Error::shape(name, img, t.shape().item()));
        }
    }
    Ok(())
}

/// Identical loss (per domain) and optionally the pair-matched loss, with gradients.
///
/// `id_A = w_o·mse(S_A(b), a) + w_p·mse(S_A(b), G_A(z))`, symmetrically for B;
/// `pm_A = mse(C_A(b), b)` and `pm_B = mse(C_B(a), a)`. The prior term is
/// skipped entirely when its weight is zero, in which case `z` may be `None`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_pass<T: Scalar>(
    bundle: &ModelBundle<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    z: Option<&Tensor<T>>,
    weights: &LossWeights,
    with_pair_matched: bool,
    mode: Mode,
    rng: &mut dyn RngCore,
    mut grads: Option<ReconstructionGrads<'_, T>>,
) -> Result<ReconstructionPass<T>> {
    check_pair_batches(bundle, a, b)?;
    let use_prior = weights.identical_prior != 0.0;
    if use_prior {
        match z {
            None => {
                return Err(Error::validation(
                    "latent batch",
                    "required by the prior term",
                ))
            }
            Some(z) if z.shape().n != a.shape().n => {
                return Err(Error::validation(
                    "latent batch",
                    format!("{} latents for {} pairs", z.shape().n, a.shape().n),
                ))
            }
            _ => {}
        }
    }
    let w_obs = T::lit(weights.identical_observed);
    let w_prior = T::lit(weights.identical_prior);
    let mut traces: Traces<T> = Vec::new();

    // S_A(b) and S_B(a); `observed` is the image each reconstruction should match.
    struct Succ<T> {
        d: Domain,
        enc: Trace<T>,
        gen: Trace<T>,
        out: Tensor<T>,
    }
    let mut succ = Vec::with_capacity(2);
    for (d, input) in [(Domain::A, b), (Domain::B, a)] {
        let (lat, enc) = bundle.encoder(d).forward(input, mode, rng)?;
        let (out, gen) = bundle.generator(d).forward(&lat, mode, rng)?;
        succ.push(Succ { d, enc, gen, out });
    }
    let mut priors = Vec::new();
    if use_prior {
        let z = z.expect("checked");
        for d in [Domain::A, Domain::B] {
            priors.push(bundle.generator(d).forward(z, mode, rng)?);
        }
    }

    let mut id = [T::zero(); 2];
    let mut d_succ: Vec<Vec<T>> = Vec::with_capacity(2);
    for (i, s) in succ.iter().enumerate() {
        let observed = if s.d == Domain::A { a } else { b };
        let mut value = w_obs * mse(s.out.data(), observed.data())?;
        let mut grad = mse_grad(s.out.data(), observed.data(), w_obs);
        if use_prior {
            let prior = &priors[i].0;
            value = value + w_prior * mse(s.out.data(), prior.data())?;
            for (g, pg) in grad
                .iter_mut()
                .zip(mse_grad(s.out.data(), prior.data(), w_prior))
            {
                *g = *g + pg;
            }
        }
        id[i] = value;
        d_succ.push(grad);
    }

    if let Some(g) = grads.as_mut() {
        for (i, s) in succ.iter().enumerate() {
            let gt = Tensor::from_vec(s.out.shape(), d_succ[i].clone())?;
            let g_lat = bundle.generator(s.d).backward(
                &s.gen,
                gt,
                Some(g.identical.get_mut(NetId::gen(s.d))),
            )?;
            bundle.encoder(s.d).backward(
                &s.enc,
                g_lat,
                Some(g.identical.get_mut(NetId::enc(s.d))),
            )?;
            if use_prior {
                let (prior, ptrace) = &priors[i];
                let gp: Vec<T> = mse_grad(prior.data(), s.out.data(), w_prior);
                let gp = Tensor::from_vec(prior.shape(), gp)?;
                bundle.generator(s.d).backward(
                    ptrace,
                    gp,
                    Some(g.identical.get_mut(NetId::gen(s.d))),
                )?;
            }
        }
    }

    let mut pm = [None, None];
    if with_pair_matched {
        for (i, s) in succ.iter().enumerate() {
            // C_A(b) = S_B(S_A(b)) returns to domain B, and vice versa.
            let back = s.d.other();
            let target = if s.d == Domain::A { b } else { a };
            let (lat, enc2) = bundle.encoder(back).forward(&s.out, mode, rng)?;
            let (round, gen2) = bundle.generator(back).forward(&lat, mode, rng)?;
            pm[i] = Some(mse(round.data(), target.data())?);
            if let Some(sink) = grads.as_mut().and_then(|g| g.pair_matched.as_deref_mut()) {
                let gr = Tensor::from_vec(
                    round.shape(),
                    mse_grad(round.data(), target.data(), T::one()),
                )?;
                let g_lat = bundle.generator(back).backward(
                    &gen2,
                    gr,
                    Some(sink.get_mut(NetId::gen(back))),
                )?;
                let g_mid = bundle.encoder(back).backward(
                    &enc2,
                    g_lat,
                    Some(sink.get_mut(NetId::enc(back))),
                )?;
                let g_lat1 = bundle.generator(s.d).backward(
                    &s.gen,
                    g_mid,
                    Some(sink.get_mut(NetId::gen(s.d))),
                )?;
                bundle.encoder(s.d).backward(
                    &s.enc,
                    g_lat1,
                    Some(sink.get_mut(NetId::enc(s.d))),
                )?;
            }
            traces.push((NetId::enc(back), enc2));
            traces.push((NetId::gen(back), gen2));
        }
    }

    for s in succ {
        traces.push((NetId::enc(s.d), s.enc));
        traces.push((NetId::gen(s.d), s.gen));
    }
    for (i, (_, t)) in priors.into_iter().enumerate() {
        let d = if i == 0 { Domain::A } else { Domain::B };
        traces.push((NetId::gen(d), t));
    }

    Ok(ReconstructionPass {
        values: ReconstructionValues {
            id_a: id[0],
            id_b: id[1],
            pm_a: pm[0],
            pm_b: pm[1],
        },
        traces,
    })
}

/// `(id_A, id_B)` for co-registered batches `a`, `b` and latent batch `z`.
pub fn identical_loss<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    z: &Tensor<T>,
    bundle: &ModelBundle<T>,
    weights: &LossWeights,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(T, T)> {
    let pass = reconstruction_pass(bundle, a, b, Some(z), weights, false, mode, rng, None)?;
    Ok((pass.values.id_a, pass.values.id_b))
}

/// `(pm_A, pm_B) = (mse(C_A(b), b), mse(C_B(a), a))`.
pub fn pair_matched_loss<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    bundle: &ModelBundle<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(T, T)> {
    let weights = LossWeights {
        identical_prior: 0.0,
        ..LossWeights::default()
    };
    let pass = reconstruction_pass(bundle, a, b, None, &weights, true, mode, rng, None)?;
    Ok((
        pass.values.pm_a.expect("requested"),
        pass.values.pm_b.expect("requested"),
    ))
}
