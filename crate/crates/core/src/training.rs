//! The staged training driver: Pioneer warm-up, joint training of Successors
//! and Coordinators, and a reduced-rate refinement, with checkpointing,
//! metrics logging and periodic GMI snapshots.
//!
//! Within one step the update order is discriminators → generators →
//! Successors/Coordinators. Discriminators and generators use Adam; the
//! Successor/Coordinator parameters (encoders and the shared generators) take
//! a plain SGD step `θ -= lr_S·∇id + lr_C·∇pm`. Every random draw of a step
//! (batch indices, prior samples, dropout masks) comes from a generator seeded
//! by `(seed, step)`, so a run is a pure function of its configuration.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::gmi::{compute_gmi, Binarize};
use crate::losses::{
    discriminator_pass, generator_pass, reconstruction_pass, BundleGrads, LossReport, LossWeights,
    NetId, ReconstructionGrads, Traces,
};
use crate::networks::optim::sgd_step;
use crate::networks::{sample_prior, AdamConfig, Domain, Mode, ModelBundle, NetConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub warmup_steps: u64,
    pub joint_steps: u64,
    pub refine_steps: u64,
    pub lr_g_a: f64,
    pub lr_g_b: f64,
    pub lr_d: f64,
    pub lr_s: f64,
    pub lr_c: f64,
    pub refine_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint every this many steps (0: only at stage boundaries and the end).
    pub checkpoint_interval: u64,
    /// GMI snapshot on the test set every this many steps (0: never).
    pub gmi_interval: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl TrainingSchedule {
    /// The full-length schedule with the published rates.
    pub fn paper() -> Self {
        TrainingSchedule {
            warmup_steps: 17_000,
            joint_steps: 13_000,
            refine_steps: 10_000,
            lr_g_a: 2e-5,
            lr_g_b: 1e-5,
            lr_d: 2e-5,
            lr_s: 1e-4,
            lr_c: 1e-4,
            refine_decay: 0.5,
            batch_size: 128,
            seed: 0,
            checkpoint_interval: 1000,
            gmi_interval: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }

    /// Desk-scale schedule: 600 / 1200 / 600 steps at batch 32, with rates
    /// raised so that this short run makes visible progress.
    pub fn desk() -> Self {
        TrainingSchedule {
            warmup_steps: 600,
            joint_steps: 1200,
            refine_steps: 600,
            lr_g_a: DESK_LR_G,
            lr_g_b: DESK_LR_G / 2.0,
            lr_d: DESK_LR_G,
            lr_s: DESK_LR_SC,
            lr_c: DESK_LR_SC,
            batch_size: 32,
            checkpoint_interval: 600,
            ..TrainingSchedule::paper()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.joint_steps + self.refine_steps
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_g_a", self.lr_g_a),
            ("lr_g_b", self.lr_g_b),
            ("lr_d", self.lr_d),
            ("lr_s", self.lr_s),
            ("lr_c", self.lr_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(
                    name,
                    format!("{v} is not a non-negative rate"),
                ));
            }
        }
        if !(self.refine_decay > 0.0 && self.refine_decay <= 1.0) {
            return Err(Error::validation(
                "refine_decay",
                format!("{} not in (0, 1]", self.refine_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Desk-scale Pioneer rate (generator A and discriminators; generator B uses half).
pub const DESK_LR_G: f64 = 2e-4;
/// Desk-scale Successor/Coordinator SGD rate.
pub const DESK_LR_SC: f64 = 0.5;

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Warmup,
    Joint,
    Refine,
    /// Plain cross-domain auto-encoder training (baseline).
    Baseline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Refine => "refine",
            Stage::Baseline => "baseline",
        })
    }
}

/// Mutable schedule state carried in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps completed so far.
    pub step: u64,
    pub lr_s: f64,
    pub lr_c: f64,
    pub refined: bool,
}

/// Owns the bundle for the duration of a run.
pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub schedule: TrainingSchedule,
    pub state: TrainState,
}

fn adam_update(bundle: &mut ModelBundle<f32>, id: NetId, cfg: &AdamConfig, lr: f64, grads: &[f32]) {
    let ModelBundle {
        gen_a,
        gen_b,
        disc_a,
        disc_b,
        optim,
        ..
    } = bundle;
    let (net, state) = match id {
        NetId::GenA => (gen_a, &mut optim.gen_a),
        NetId::GenB => (gen_b, &mut optim.gen_b),
        NetId::DiscA => (disc_a, &mut optim.disc_a),
        NetId::DiscB => (disc_b, &mut optim.disc_b),
        NetId::EncA | NetId::EncB => unreachable!("encoders are not adversarially trained"),
    };
    state.step(cfg, lr, net.params_mut(), grads);
}

fn absorb(bundle: &mut ModelBundle<f32>, traces: &Traces<f32>) {
    for (id, trace) in traces {
        id.of_mut(bundle).absorb_batch_stats(trace);
    }
}

fn ensure_finite(report: &LossReport) -> Result<()> {
    if report.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{} loss report {:?}", report.stage, report),
            step: report.step,
        })
    }
}

/// Random generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Stacks the listed pairs into an `(a, b)` batch.
pub fn pair_batch(
    pairs: &[ImagePair],
    indices: &[usize],
    cfg: &NetConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let img = cfg.image_shape();
    let a: Vec<&[f32]> = indices.iter().map(|&i| pairs[i].a.data()).collect();
    let b: Vec<&[f32]> = indices.iter().map(|&i| pairs[i].b.data()).collect();
    Ok((Tensor::stack(img, &a)?, Tensor::stack(img, &b)?))
}

/// Batch indices, prior batch and dropout generator for one step.
pub struct StepInputs {
    pub indices: Vec<usize>,
    pub z: Tensor<f32>,
    pub rng: ChaCha8Rng,
}

pub fn step_inputs(
    seed: u64,
    step: u64,
    n_pairs: usize,
    batch: usize,
    latent_dim: usize,
) -> StepInputs {
    let mut rng = step_rng(seed, step);
    let indices = (0..batch).map(|_| rng.gen_range(0..n_pairs)).collect();
    let z = sample_prior(batch, latent_dim, &mut rng);
    StepInputs { indices, z, rng }
}

/// Value of the baseline objective `mse(S_A(b), a) + mse(S_B(a), b)` terms and
/// their gradients (the identical loss with the prior term masked out).
pub fn baseline_pass(
    bundle: &ModelBundle<f32>,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    rng: &mut dyn RngCore,
    grads: Option<&mut BundleGrads<f32>>,
) -> Result<(f32, f32, Traces<f32>)> {
    let sinks = grads.map(|g| ReconstructionGrads {
        identical: g,
        pair_matched: None,
    });
    let pass = reconstruction_pass(
        bundle,
        a,
        b,
        None,
        &LossWeights::observed_only(),
        false,
        Mode::Train,
        rng,
        sinks,
    )?;
    Ok((pass.values.id_a, pass.values.id_b, pass.traces))
}

impl Trainer {
    pub fn new(bundle: ModelBundle<f32>, schedule: TrainingSchedule) -> Result<Self> {
        schedule.validate()?;
        let state = TrainState {
            step: 0,
            lr_s: schedule.lr_s,
            lr_c: schedule.lr_c,
            refined: false,
        };
        Ok(Trainer {
            bundle,
            schedule,
            state,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.schedule.validate()?;
        Ok(Trainer {
            bundle: ck.bundle,
            schedule: ck.schedule,
            state: ck.state,
        })
    }

    /// Stage of the next step to run.
    pub fn stage(&self) -> Stage {
        let s = &self.schedule;
        if self.state.step < s.warmup_steps {
            Stage::Warmup
        } else if self.state.step < s.warmup_steps + s.joint_steps {
            Stage::Joint
        } else {
            Stage::Refine
        }
    }

    fn report(&self, stage: Stage) -> LossReport {
        LossReport {
            step: self.state.step + 1,
            stage: stage.to_string(),
            adv_a: None,
            adv_b: None,
            id_a: None,
            id_b: None,
            pm_a: None,
            pm_b: None,
            lr_s: self.state.lr_s,
            lr_c: self.state.lr_c,
        }
    }

    /// Discriminator then generator Adam updates for both Pioneers.
    fn pioneer_updates(
        &mut self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        z: &Tensor<f32>,
        rng: &mut dyn RngCore,
        report: &mut LossReport,
    ) -> Result<()> {
        let sched = self.schedule.clone();
        let w_adv = sched.weights.adversarial as f32;
        for d in [Domain::A, Domain::B] {
            let real = if d == Domain::A { a } else { b };
            let (fake, gen_trace) = self.bundle.generator(d).forward(z, Mode::Train, rng)?;

            let mut grads = BundleGrads::zeros(&self.bundle);
            let pass = discriminator_pass(
                &self.bundle,
                d,
                real,
                &fake,
                Mode::Train,
                rng,
                Some(&mut grads),
                None,
            )?;
            adam_update(
                &mut self.bundle,
                NetId::disc(d),
                &sched.adam,
                sched.lr_d,
                grads.get(NetId::disc(d)),
            );
            absorb(&mut self.bundle, &pass.traces);

            let mut grads = BundleGrads::zeros(&self.bundle);
            let (_, traces) = generator_pass(
                &self.bundle,
                d,
                &fake,
                &gen_trace,
                Mode::Train,
                rng,
                Some(&mut grads),
                false,
            )?;
            let g: Vec<f32> = grads.get(NetId::gen(d)).iter().map(|v| v * w_adv).collect();
            let lr = if d == Domain::A {
                sched.lr_g_a
            } else {
                sched.lr_g_b
            };
            adam_update(&mut self.bundle, NetId::gen(d), &sched.adam, lr, &g);
            absorb(&mut self.bundle, &traces);
            self.bundle.generator_mut(d).absorb_batch_stats(&gen_trace);

            let value = Some(pass.objectives.discriminator as f64);
            match d {
                Domain::A => report.adv_a = value,
                Domain::B => report.adv_b = value,
            }
        }
        Ok(())
    }

    /// One warm-up step: only the Pioneers (generators, discriminators) move.
    pub fn warmup_step(
        &mut self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        z: &Tensor<f32>,
        rng: &mut dyn RngCore,
    ) -> Result<LossReport> {
        let mut report = self.report(Stage::Warmup);
        self.pioneer_updates(a, b, z, rng, &mut report)?;
        ensure_finite(&report)?;
        self.state.step += 1;
        self.bundle.steps.warmup += 1;
        Ok(report)
    }

    /// Pioneer updates followed by the Successor/Coordinator SGD step.
    pub fn joint_step(
        &mut self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        z: &Tensor<f32>,
        rng: &mut dyn RngCore,
    ) -> Result<LossReport> {
        let stage = if self.state.refined {
            Stage::Refine
        } else {
            Stage::Joint
        };
        let mut report = self.report(stage);
        self.pioneer_updates(a, b, z, rng, &mut report)?;

        let mut g_id = BundleGrads::zeros(&self.bundle);
        let mut g_pm = BundleGrads::zeros(&self.bundle);
        let weights = self.schedule.weights;
        let pass = reconstruction_pass(
            &self.bundle,
            a,
            b,
            Some(z),
            &weights,
            true,
            Mode::Train,
            rng,
            Some(ReconstructionGrads {
                identical: &mut g_id,
                pair_matched: Some(&mut g_pm),
            }),
        )?;
        let w_pm = weights.pair_matched as f32;
        let (lr_s, lr_c) = (self.state.lr_s as f32, self.state.lr_c as f32);
        for id in [NetId::EncA, NetId::EncB, NetId::GenA, NetId::GenB] {
            // θ -= lr_S·∇id + lr_C·∇pm, as one step with unit rate
            let step: Vec<f32> = g_id
                .get(id)
                .iter()
                .zip(g_pm.get(id))
                .map(|(gi, gp)| lr_s * gi + lr_c * w_pm * gp)
                .collect();
            sgd_step(1.0, id.of_mut(&mut self.bundle).params_mut(), &step);
        }
        absorb(&mut self.bundle, &pass.traces);

        let v = pass.values;
        report.id_a = Some(v.id_a as f64);
        report.id_b = Some(v.id_b as f64);
        report.pm_a = v.pm_a.map(f64::from).map(|p| p * weights.pair_matched);
        report.pm_b = v.pm_b.map(f64::from).map(|p| p * weights.pair_matched);
        ensure_finite(&report)?;
        self.state.step += 1;
        if self.state.refined {
            self.bundle.steps.refine += 1;
        } else {
            self.bundle.steps.joint += 1;
        }
        Ok(report)
    }

    /// Multiplies `lr_S` and `lr_C` by the decay; allowed once, after the joint stage.
    pub fn apply_refinement(&mut self) -> Result<()> {
        if self.state.refined {
            return Err(Error::Stage("refinement has already been applied".into()));
        }
        let joint_end = self.schedule.warmup_steps + self.schedule.joint_steps;
        if self.state.step < joint_end {
            return Err(Error::Stage(format!(
                "refinement requires the joint stage to finish (step {} of {joint_end})",
                self.state.step
            )));
        }
        self.state.lr_s *= self.schedule.refine_decay;
        self.state.lr_c *= self.schedule.refine_decay;
        self.state.refined = true;
        Ok(())
    }

    /// One auto-encoder baseline step: SGD on `mse(S_A(b), a) + mse(S_B(a), b)`.
    pub fn baseline_step(
        &mut self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        rng: &mut dyn RngCore,
    ) -> Result<LossReport> {
        let mut report = self.report(Stage::Baseline);
        let mut grads = BundleGrads::zeros(&self.bundle);
        let (id_a, id_b, traces) = baseline_pass(&self.bundle, a, b, rng, Some(&mut grads))?;
        for id in [NetId::EncA, NetId::EncB, NetId::GenA, NetId::GenB] {
            sgd_step(
                self.state.lr_s,
                id.of_mut(&mut self.bundle).params_mut(),
                grads.get(id),
            );
        }
        absorb(&mut self.bundle, &traces);
        report.id_a = Some(id_a as f64);
        report.id_b = Some(id_b as f64);
        ensure_finite(&report)?;
        self.state.step += 1;
        self.bundle.steps.joint += 1;
        Ok(report)
    }

    /// Runs the next scheduled step on `pairs` (refinement is applied on entering the last stage).
    pub fn next_step(&mut self, pairs: &[ImagePair], objective: Objective) -> Result<LossReport> {
        if pairs.is_empty() {
            return Err(Error::validation("training set", "empty"));
        }
        let s = &self.schedule;
        let inputs = step_inputs(
            s.seed,
            self.state.step,
            pairs.len(),
            s.batch_size,
            self.bundle.latent_dim(),
        );
        let (a, b) = pair_batch(pairs, &inputs.indices, &self.bundle.config)?;
        let mut rng = inputs.rng;
        match objective {
            Objective::Banis => {
                if self.stage() == Stage::Refine && !self.state.refined {
                    self.apply_refinement()?;
                }
                match self.stage() {
                    Stage::Warmup => self.warmup_step(&a, &b, &inputs.z, &mut rng),
                    _ => self.joint_step(&a, &b, &inputs.z, &mut rng),
                }
            }
            Objective::AutoEncoder => {
                if self.stage() == Stage::Refine && !self.state.refined {
                    self.state.lr_s *= self.schedule.refine_decay;
                    self.state.lr_c *= self.schedule.refine_decay;
                    self.state.refined = true;
                }
                self.baseline_step(&a, &b, &mut rng)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Banis,
    AutoEncoder,
}

pub const METRICS_HEADER: &str = "step,stage,adv_A,adv_B,id_A,id_B,pm_A,pm_B,lr_S,lr_C";

/// One CSV row; terms that were not evaluated are left empty.
pub fn metrics_row(r: &LossReport) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.stage,
        f(r.adv_a),
        f(r.adv_b),
        f(r.id_a),
        f(r.id_b),
        f(r.pm_a),
        f(r.pm_b),
        r.lr_s,
        r.lr_c
    )
}

pub fn write_metrics(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut out = String::with_capacity(64 * (reports.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message,
        };
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(err(format!("expected header '{METRICS_HEADER}'")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("'{s}': {e}")));
        let opt = |s: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        out.push(LossReport {
            step: f[0]
                .parse()
                .map_err(|e| err(format!("step '{}': {e}", f[0])))?,
            stage: f[1].to_string(),
            adv_a: opt(f[2])?,
            adv_b: opt(f[3])?,
            id_a: opt(f[4])?,
            id_b: opt(f[5])?,
            pm_a: opt(f[6])?,
            pm_b: opt(f[7])?,
            lr_s: num(f[8])?,
            lr_c: num(f[9])?,
        });
    }
    Ok(out)
}

/// Inputs of a training run beyond the schedule.
pub struct RunOptions {
    /// Recorded in every checkpoint; resumption requires it to match.
    pub config_hash: String,
    pub resume: Option<PathBuf>,
    pub stop: Option<Arc<AtomicBool>>,
    pub gmi_thresholds: Vec<f64>,
    pub binarize: Binarize,
}

impl RunOptions {
    pub fn new(config_hash: impl Into<String>) -> Self {
        RunOptions {
            config_hash: config_hash.into(),
            resume: None,
            stop: None,
            gmi_thresholds: vec![0.1, 0.2, 0.3],
            binarize: Binarize::default(),
        }
    }
}

pub struct RunOutcome {
    pub bundle: ModelBundle<f32>,
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("step-{step:06}.ckpt"))
}

/// Full staged training of a freshly initialized bundle (or a resumed one).
pub fn train(
    train_set: &[ImagePair],
    test_set: &[ImagePair],
    net: &NetConfig,
    schedule: &TrainingSchedule,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    run(
        train_set,
        test_set,
        net,
        schedule,
        out_dir,
        opts,
        Objective::Banis,
    )
}

/// The auto-encoder baseline: same architectures, schedule length and data,
/// trained on the observed-pair reconstruction term only.
pub fn train_autoencoder_baseline(
    train_set: &[ImagePair],
    test_set: &[ImagePair],
    net: &NetConfig,
    schedule: &TrainingSchedule,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    run(
        train_set,
        test_set,
        net,
        schedule,
        out_dir,
        opts,
        Objective::AutoEncoder,
    )
}

fn run(
    train_set: &[ImagePair],
    test_set: &[ImagePair],
    net: &NetConfig,
    schedule: &TrainingSchedule,
    out_dir: &Path,
    opts: &RunOptions,
    objective: Objective,
) -> Result<RunOutcome> {
    if train_set.is_empty() {
        return Err(Error::validation("training set", "empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (mut trainer, mut reports) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.ensure_hash(&opts.config_hash)?;
            let reports = ck.reports.clone();
            log::info!("resuming from {} at step {}", path.display(), ck.state.step);
            (Trainer::from_checkpoint(ck)?, reports)
        }
        None => (
            Trainer::new(ModelBundle::new(net, schedule.seed)?, schedule.clone())?,
            Vec::new(),
        ),
    };
    let total = trainer.schedule.total_steps();
    let boundaries = [
        trainer.schedule.warmup_steps,
        trainer.schedule.warmup_steps + trainer.schedule.joint_steps,
    ];
    let metrics = out_dir.join("metrics.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?,
    );
    let mut write_row = |line: &str| writeln!(log, "{line}").map_err(|e| Error::io(&metrics, e));
    write_row(METRICS_HEADER)?;
    for r in &reports {
        write_row(&metrics_row(r))?;
    }

    let save = |trainer: &Trainer, reports: &[LossReport]| -> Result<PathBuf> {
        let path = checkpoint_path(out_dir, trainer.state.step);
        Checkpoint {
            config_hash: opts.config_hash.clone(),
            schedule: trainer.schedule.clone(),
            state: trainer.state.clone(),
            bundle: trainer.bundle.clone(),
            reports: reports.to_vec(),
        }
        .save(&path)?;
        Ok(path)
    };
    let mut last = if opts.resume.is_none() {
        save(&trainer, &reports)?
    } else {
        checkpoint_path(out_dir, trainer.state.step)
    };

    while trainer.state.step < total {
        if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
            save(&trainer, &reports)?;
            return Err(Error::Interrupted(trainer.state.step));
        }
        let report = match trainer.next_step(train_set, objective) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                let snap = out_dir.join("diagnostic.ckpt");
                let _ = Checkpoint {
                    config_hash: opts.config_hash.clone(),
                    schedule: trainer.schedule.clone(),
                    state: trainer.state.clone(),
                    bundle: trainer.bundle.clone(),
                    reports: reports.clone(),
                }
                .save(&snap);
                log::error!("non-finite loss; diagnostic snapshot at {}", snap.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let line = metrics_row(&report);
        let mut log_line = |l: &str| writeln!(log, "{l}").map_err(|e| Error::io(&metrics, e));
        log_line(&line)?;
        reports.push(report);
        let step = trainer.state.step;
        let interval = trainer.schedule.checkpoint_interval;
        if (interval > 0 && step % interval == 0) || boundaries.contains(&step) || step == total {
            log.flush().map_err(|e| Error::io(&metrics, e))?;
            last = save(&trainer, &reports)?;
        }
        let gi = trainer.schedule.gmi_interval;
        if gi > 0 && step % gi == 0 && !test_set.is_empty() {
            let r = compute_gmi(
                test_set,
                &trainer.bundle,
                &opts.gmi_thresholds,
                opts.binarize,
            )?;
            let dir = out_dir.join("gmi");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            r.write_csv(&dir.join(format!("step-{step:06}.csv")))?;
            log::info!("step {step}: GMI {:?}", r.matched_fraction);
        }
        if step % 100 == 0 {
            log::info!("step {step}/{total} ({})", trainer.stage());
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    drop(log);
    Ok(RunOutcome {
        bundle: trainer.bundle,
        reports,
        final_checkpoint: last,
        metrics,
    })
}
