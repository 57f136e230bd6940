//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Run with `cargo test -p banis --test acceptance`. The desk-scale training
//! criteria dominate the runtime (two full runs, a few minutes each).

use std::path::Path;
use std::time::Instant;

use banis::checkpoint::Checkpoint;
use banis::config::RunConfig;
use banis::data_synthesis::{
    generate_dataset, generate_pair, pair_seed, EmbryoSpec, MANIFEST_FILE,
};
use banis::dataset::{ImagePair, Manifest, Split};
use banis::gmi::{compute_gmi, dsc, gmi_from_masks, Binarize, BinaryMask, GmiReport};
use banis::gradcheck::{check_all, CheckedLoss, Fixture};
use banis::imaging::Grid;
use banis::losses::{adversarial_loss, identical_loss, pair_matched_loss, LossWeights};
use banis::networks::{
    discriminate, encode, generate, sample_prior, successor_forward, toy, Domain, Mode,
    ModelBundle, NetConfig,
};
use banis::preprocessing::build_splits;
use banis::tensor::{ItemShape, Tensor};
use banis::training::{
    pair_batch, step_inputs, train, train_autoencoder_baseline, RunOptions, RunOutcome, Trainer,
    TrainingSchedule,
};
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn brute_dsc(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let (w, h) = x.dims();
    let (mut both, mut nx, mut ny) = (0u32, 0u32, 0u32);
    for yy in 0..h {
        for xx in 0..w {
            let (p, q) = (x.get(xx, yy), y.get(xx, yy));
            if p {
                nx += 1;
            }
            if q {
                ny += 1;
            }
            if p && q {
                both += 1;
            }
        }
    }
    if nx + ny == 0 {
        0.0
    } else {
        2.0 * both as f64 / (nx + ny) as f64
    }
}

fn brute_gmi(dscs: &[f64], t: f64) -> f64 {
    let mut hits = 0;
    for &d in dscs {
        if d < t {
            hits += 1;
        }
    }
    hits as f64 / dscs.len() as f64
}

fn mask_image(m: &BinaryMask) -> Grid {
    let (w, h) = m.dims();
    let data = m
        .bits()
        .iter()
        .map(|&b| if b { 1.0 } else { -1.0 })
        .collect();
    Grid::new(w, h, data).unwrap()
}

/// With identity Successors, `compute_gmi` sees exactly the masks encoded in the images.
fn as_pairs(masks: &[(BinaryMask, BinaryMask)]) -> Vec<ImagePair> {
    masks
        .iter()
        .enumerate()
        .map(|(i, (x, y))| ImagePair {
            id: format!("m{i:03}"),
            split: Split::Test,
            a: mask_image(x),
            b: mask_image(y),
            mask_a: None,
            mask_b: None,
        })
        .collect()
}

fn gmi_oracle() -> Outcome {
    const SIDE: usize = 16;
    let bundle = toy::identity_bundle::<f32>(SIDE).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random: Vec<(BinaryMask, BinaryMask)> = (0..100)
        .map(|_| {
            let (px, py) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
            let mut draw = |p: f64| {
                let bits = (0..SIDE * SIDE).map(|_| rng.gen_bool(p)).collect();
                BinaryMask::new(SIDE, SIDE, bits).unwrap()
            };
            (draw(px), draw(py))
        })
        .collect();
    let thresholds = [0.1, 0.2, 0.3, 0.4, 0.5];
    for (i, (x, y)) in random.iter().enumerate() {
        let d = dsc(x, y).map_err(e)?;
        ensure(d == brute_dsc(x, y), || format!("dsc differs on pair {i}"))?;
    }
    let report = compute_gmi(
        &as_pairs(&random),
        &bundle,
        &thresholds,
        Binarize::default(),
    )
    .map_err(e)?;
    let oracle: Vec<f64> = random.iter().map(|(x, y)| brute_dsc(x, y)).collect();
    for (i, (_, d)) in report.dscs.iter().enumerate() {
        ensure(*d == oracle[i], || {
            format!("compute_gmi DSC differs on pair {i}")
        })?;
    }
    for (k, &t) in thresholds.iter().enumerate() {
        ensure(report.matched_fraction[k] == brute_gmi(&oracle, t), || {
            format!("matched fraction differs at TS={t}")
        })?;
    }

    // |x| = |y| = 20 with overlaps 1, 3, 5, 7 gives DSC 0.05, 0.15, 0.25, 0.35.
    let constructed: Vec<(BinaryMask, BinaryMask)> = [1usize, 3, 5, 7]
        .iter()
        .map(|&overlap| {
            let mut x = BinaryMask::empty(SIDE, SIDE);
            let mut y = BinaryMask::empty(SIDE, SIDE);
            for i in 0..20 {
                x.set(i % SIDE, i / SIDE, true);
            }
            for i in 0..20 {
                let j = 20 - overlap + i;
                y.set(j % SIDE, j / SIDE, true);
            }
            (x, y)
        })
        .collect();
    let report = compute_gmi(
        &as_pairs(&constructed),
        &bundle,
        &[0.2],
        Binarize::default(),
    )
    .map_err(e)?;
    let got: Vec<f64> = report.dscs.iter().map(|(_, d)| *d).collect();
    let want = [0.05, 0.15, 0.25, 0.35];
    ensure(
        got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-12),
        || format!("constructed DSCs {got:?}"),
    )?;
    let oracle: Vec<f64> = constructed.iter().map(|(x, y)| brute_dsc(x, y)).collect();
    ensure(got == oracle, || {
        "constructed DSCs differ from oracle".into()
    })?;
    ensure(report.matched_fraction == vec![0.5], || {
        format!("GMI(0.2) = {:?}", report.matched_fraction)
    })?;
    Ok("100 random pairs + constructed set exact; GMI(0.2) = 0.5".into())
}

// ---------------------------------------------------------------- 2

fn loss_analytics() -> Outcome {
    let half = adversarial_loss(&[0.5f64], &[0.5]).map_err(e)?;
    let want = 2.0 * 0.5f64.ln();
    ensure((half.discriminator - want).abs() < 1e-6, || {
        format!("adversarial(0.5, 0.5) = {}", half.discriminator)
    })?;

    let batch = |v: f64| Tensor::<f64>::filled(ItemShape::new(1, 4, 4).batch(3), v);
    let z = Tensor::<f64>::filled(ItemShape::flat(16).batch(3), 0.25);
    let id = toy::identity_bundle::<f64>(4).map_err(e)?;
    let a = batch(0.25);
    let (id_a, id_b) = identical_loss(
        &a,
        &a,
        &z,
        &id,
        &LossWeights::default(),
        Mode::Eval,
        &mut StepRng::new(0, 0),
    )
    .map_err(e)?;
    let (pm_a, pm_b) =
        pair_matched_loss(&a, &batch(-0.6), &id, Mode::Eval, &mut StepRng::new(0, 0)).map_err(e)?;
    ensure(
        [id_a, id_b, pm_a, pm_b].iter().all(|v| v.abs() < 1e-6),
        || format!("identity losses {id_a} {id_b} {pm_a} {pm_b}"),
    )?;

    // S_A(x) = -x and S_B(x) = x, so C_A(b) = -b and b ≡ 1 gives pm_A = 4.
    let neg = toy::linear_bundle::<f64>(4, [-1.0, 1.0, 1.0, 1.0]).map_err(e)?;
    let (pm_a, _) = pair_matched_loss(
        &batch(0.1),
        &batch(1.0),
        &neg,
        Mode::Eval,
        &mut StepRng::new(0, 0),
    )
    .map_err(e)?;
    ensure((pm_a - 4.0).abs() < 1e-6, || {
        format!("forced pm_A = {pm_a}")
    })?;

    // E_A ≡ 0 so S_A(b) = G_A(0) = 0; G_A is the identity so G_A(z) = z ≡ 0.9.
    // id_A = mse(0, a ≡ 1) + mse(0, 0.9) = 1 + 0.81.
    let zero_enc = toy::linear_bundle::<f64>(4, [0.0, 1.0, 1.0, 1.0]).map_err(e)?;
    let z9 = Tensor::<f64>::filled(ItemShape::flat(16).batch(3), 0.9);
    let (id_a, _) = identical_loss(
        &batch(1.0),
        &batch(0.3),
        &z9,
        &zero_enc,
        &LossWeights::default(),
        Mode::Eval,
        &mut StepRng::new(0, 0),
    )
    .map_err(e)?;
    let expected = 1.0 + 0.81;
    ensure((id_a - expected).abs() < 1e-6, || {
        format!("forced id_A = {id_a}, expected {expected}")
    })?;
    Ok(format!(
        "adv(0.5,0.5) = {:.6}; identity losses 0; forced pm_A = 4, id_A = {expected}",
        half.discriminator
    ))
}

// ---------------------------------------------------------------- 3

fn gradient_check() -> Outcome {
    let cfg = NetConfig::miniature();
    let t0 = Instant::now();
    let f64_checks = check_all::<f64>(&cfg, 4, 11, 1e-5).map_err(e)?;
    let worst64 = f64_checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    if let Some(bad) = f64_checks
        .iter()
        .find(|c| c.rel_error.is_nan() || c.rel_error >= 1e-6)
    {
        return Err(format!(
            "f64 {:?} on {}: rel error {:.3e}",
            bad.loss,
            bad.net.name(),
            bad.rel_error
        ));
    }

    let f32_fixture = Fixture::<f32>::random(&cfg, 4, 11).map_err(e)?;
    let oracle = f32_fixture.cast::<f64>();
    let mut worst32 = 0.0f64;
    for loss in [
        CheckedLoss::Discriminator(Domain::A),
        CheckedLoss::Discriminator(Domain::B),
        CheckedLoss::Generator(Domain::A),
        CheckedLoss::Generator(Domain::B),
        CheckedLoss::Identical,
        CheckedLoss::PairMatched,
    ] {
        for c in f32_fixture
            .check_with_oracle(loss, 1e-5, &oracle)
            .map_err(e)?
        {
            worst32 = worst32.max(c.rel_error);
            ensure(c.rel_error < 1e-3, || {
                format!(
                    "f32 {:?} on {}: rel error {:.3e}",
                    c.loss,
                    c.net.name(),
                    c.rel_error
                )
            })?;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} checks; worst f64 {worst64:.2e}, worst f32 {worst32:.2e}; {secs:.1} s",
        f64_checks.len()
    ))
}

// ---------------------------------------------------------------- 4

fn sample_pairs(n: usize, spec: &EmbryoSpec) -> Vec<ImagePair> {
    (0..n)
        .map(|i| {
            let p = generate_pair(&spec.with_seed(pair_seed(spec.seed, i))).unwrap();
            ImagePair {
                id: format!("s{i}"),
                split: Split::Train,
                a: p.membrane_image,
                b: p.nuclei_image,
                mask_a: Some(p.membrane_mask),
                mask_b: Some(p.nuclei_mask),
            }
        })
        .collect()
}

fn architecture() -> Outcome {
    let cfg = NetConfig::default();
    let bundle = ModelBundle::<f32>::new(&cfg, 3).map_err(e)?;
    let pairs = sample_pairs(2, &EmbryoSpec::default());
    let (a, b) = pair_batch(&pairs, &[0, 1], &cfg).map_err(e)?;
    let z = encode(&bundle.enc_a, &b).map_err(e)?;
    ensure(z.shape().item().len() == 100, || {
        format!("latent length {}", z.shape().item().len())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prior = sample_prior::<f32>(8, cfg.latent_dim, &mut rng);
    for d in [Domain::A, Domain::B] {
        let g = generate(bundle.generator(d), &prior).map_err(e)?;
        ensure(g.data().iter().all(|v| (-1.0..=1.0).contains(v)), || {
            "generator output outside [-1, 1]".into()
        })?;
        let p = discriminate(bundle.discriminator(d), &g).map_err(e)?;
        let q = discriminate(bundle.discriminator(d), &a).map_err(e)?;
        ensure(p.iter().chain(&q).all(|&v| v > 0.0 && v < 1.0), || {
            "discriminator output outside (0, 1)".into()
        })?;
    }

    // One warm-up step moves only the Pioneers; S_A must change with G_A.
    let before = successor_forward(&bundle, Domain::A, &b).map_err(e)?;
    let schedule = TrainingSchedule {
        batch_size: 2,
        ..TrainingSchedule::desk()
    };
    let mut trainer = Trainer::new(bundle.clone(), schedule).map_err(e)?;
    let inputs = step_inputs(0, 0, 2, 2, cfg.latent_dim);
    trainer
        .warmup_step(&a, &b, &inputs.z, &mut inputs.rng.clone())
        .map_err(e)?;
    ensure(
        trainer.bundle.enc_a.params() == bundle.enc_a.params(),
        || "encoder moved during a Pioneer update".into(),
    )?;
    let after = successor_forward(&trainer.bundle, Domain::A, &b).map_err(e)?;
    let moved = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    ensure(moved > 0.0, || {
        "Successor output unchanged by Pioneer update".into()
    })?;
    Ok(format!(
        "64×64 → 100; G ∈ [-1,1]; D ∈ (0,1); Pioneer step moves S_A by up to {moved:.2e}"
    ))
}

// ---------------------------------------------------------------- 5

fn bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn stage_isolation() -> Outcome {
    let cfg = NetConfig::desk();
    let pairs = sample_pairs(8, &EmbryoSpec::default());
    let schedule = TrainingSchedule {
        warmup_steps: 5,
        joint_steps: 2,
        refine_steps: 2,
        batch_size: 4,
        ..TrainingSchedule::desk()
    };
    let mut t = Trainer::new(ModelBundle::new(&cfg, 9).map_err(e)?, schedule.clone()).map_err(e)?;
    let enc = (
        bytes(t.bundle.enc_a.params()),
        bytes(t.bundle.enc_b.params()),
    );
    for _ in 0..schedule.warmup_steps {
        t.next_step(&pairs, banis::training::Objective::Banis)
            .map_err(e)?;
    }
    ensure(
        (
            bytes(t.bundle.enc_a.params()),
            bytes(t.bundle.enc_b.params()),
        ) == enc,
        || "encoder bytes changed during warm-up".into(),
    )?;
    let mut last = None;
    while t.state.step < schedule.total_steps() {
        last = Some(
            t.next_step(&pairs, banis::training::Objective::Banis)
                .map_err(e)?,
        );
    }
    let last = last.expect("steps ran");
    ensure(
        t.state.lr_s == schedule.lr_s * 0.5 && t.state.lr_c == schedule.lr_c * 0.5,
        || format!("refined rates {} / {}", t.state.lr_s, t.state.lr_c),
    )?;
    ensure(
        last.lr_s == schedule.lr_s / 2.0 && last.lr_c == schedule.lr_c / 2.0,
        || "logged refine rates not halved".into(),
    )?;
    Ok(format!(
        "encoders byte-identical over {} warm-up steps; lr_S, lr_C {} → {}",
        schedule.warmup_steps, schedule.lr_s, t.state.lr_s
    ))
}

// ---------------------------------------------------------------- 6, 7, 9

struct DeskData {
    _dir: tempfile::TempDir,
    train: Vec<ImagePair>,
    test: Vec<ImagePair>,
    cfg: RunConfig,
}

fn desk_data() -> Result<DeskData, String> {
    let cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    cfg.validate().map_err(e)?;
    let dir = tempfile::tempdir().map_err(e)?;
    let data = dir.path().join("data");
    generate_dataset(
        &cfg.data.embryo.with_seed(cfg.seed),
        cfg.data.n_pairs,
        &data,
    )
    .map_err(e)?;
    let manifest = Manifest::read(&data.join(MANIFEST_FILE)).map_err(e)?;
    let (train, test) = build_splits(&manifest, &cfg.preprocess, cfg.seed).map_err(e)?;
    Ok(DeskData {
        _dir: dir,
        train,
        test,
        cfg,
    })
}

struct DeskRun {
    outcome: RunOutcome,
    gmi: GmiReport,
    gmi_csv: Vec<u8>,
    secs: f64,
}

fn desk_run(data: &DeskData, out: &Path) -> Result<DeskRun, String> {
    let t0 = Instant::now();
    let outcome = train(
        &data.train,
        &data.test,
        &data.cfg.network,
        &data.cfg.training,
        out,
        &RunOptions::new(data.cfg.hash()),
    )
    .map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    let gmi = compute_gmi(
        &data.test,
        &outcome.bundle,
        &data.cfg.eval.thresholds,
        data.cfg.eval.binarize,
    )
    .map_err(e)?;
    let path = out.join("gmi.csv");
    gmi.write_csv(&path).map_err(e)?;
    let gmi_csv = std::fs::read(&path).map_err(e)?;
    Ok(DeskRun {
        outcome,
        gmi,
        gmi_csv,
        secs,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_training(data: &DeskData, run: &DeskRun) -> Outcome {
    let s = &data.cfg.training;
    ensure(
        (
            data.train.len() + data.test.len(),
            s.warmup_steps,
            s.joint_steps,
            s.refine_steps,
            s.batch_size,
        ) == (256, 600, 1200, 600, 32),
        || "desk configuration drifted".into(),
    )?;
    ensure(run.secs <= 1800.0, || {
        format!("run took {:.1} min", run.secs / 60.0)
    })?;
    let reports = &run.outcome.reports;
    ensure(reports.len() as u64 == s.total_steps(), || {
        format!("{} steps logged", reports.len())
    })?;
    ensure(reports.iter().all(|r| r.all_finite()), || {
        "non-finite loss".into()
    })?;
    let joint: Vec<f64> = reports
        .iter()
        .filter(|r| r.stage == "joint")
        .filter_map(|r| r.pm_sum())
        .collect();
    let first = mean(&joint[..100]);
    let end = mean(&joint[joint.len() - 100..]);
    let ratio = end / first;
    ensure(ratio <= 0.5, || {
        format!("pm ratio {ratio:.3} ({first:.4} → {end:.4})")
    })?;

    let untrained = ModelBundle::new(&data.cfg.network, s.seed).map_err(e)?;
    let th = &data.cfg.eval.thresholds;
    let g0 = compute_gmi(&data.test, &untrained, th, Binarize::default()).map_err(e)?;
    let g1 = &run.gmi;
    let at = |r: &GmiReport| r.fraction_at(0.3).unwrap_or(f64::NAN);
    let o0 = compute_gmi(&data.test, &untrained, th, Binarize::Otsu).map_err(e)?;
    let o1 = compute_gmi(&data.test, &run.outcome.bundle, th, Binarize::Otsu).map_err(e)?;
    let detail = format!(
        "{:.1} min; pm {first:.4} → {end:.4} (ratio {ratio:.2}); GMI(0.3) fixed {:.2} vs untrained {:.2} \
         [trained mean DSC {:.3}]; Otsu {:.2} vs {:.2} [mean DSC {:.3} vs {:.3}]",
        run.secs / 60.0,
        at(g1),
        at(&g0),
        g1.mean_dsc(),
        at(&o1),
        at(&o0),
        o1.mean_dsc(),
        o0.mean_dsc()
    );
    ensure(at(g1) > at(&g0), || {
        format!("fixed threshold not improved: {detail}")
    })?;
    ensure(at(&o1) > at(&o0), || format!("Otsu not improved: {detail}"))?;
    Ok(detail)
}

fn determinism(data: &DeskData, first: &DeskRun, out: &Path) -> Outcome {
    let second = desk_run(data, out)?;
    let m1 = std::fs::read(&first.outcome.metrics).map_err(e)?;
    let m2 = std::fs::read(&second.outcome.metrics).map_err(e)?;
    ensure(m1 == m2, || "metrics CSVs differ".into())?;
    ensure(first.gmi_csv == second.gmi_csv, || {
        "GMI reports differ".into()
    })?;
    Ok(format!(
        "metrics ({} bytes) and GMI report ({} bytes) byte-identical",
        m1.len(),
        first.gmi_csv.len()
    ))
}

fn baseline(data: &DeskData, out: &Path) -> Outcome {
    let net = &data.cfg.network;
    let schedule = TrainingSchedule {
        warmup_steps: 10,
        joint_steps: 10,
        refine_steps: 5,
        gmi_interval: 25,
        ..data.cfg.training.clone()
    };
    let mut t = Trainer::new(ModelBundle::new(net, 4).map_err(e)?, schedule.clone()).map_err(e)?;
    let inputs = step_inputs(
        schedule.seed,
        0,
        data.train.len(),
        schedule.batch_size,
        net.latent_dim,
    );
    let (a, b) = pair_batch(&data.train, &inputs.indices, net).map_err(e)?;
    let (ia, ib) = identical_loss(
        &a,
        &b,
        &inputs.z,
        &t.bundle,
        &LossWeights::observed_only(),
        Mode::Train,
        &mut inputs.rng.clone(),
    )
    .map_err(e)?;
    let r = t
        .baseline_step(&a, &b, &mut inputs.rng.clone())
        .map_err(e)?;
    ensure(
        r.id_a == Some(ia as f64) && r.id_b == Some(ib as f64),
        || {
            format!(
                "baseline loss {:?}/{:?} vs masked identical {ia}/{ib}",
                r.id_a, r.id_b
            )
        },
    )?;
    ensure(r.adv_a.is_none() && r.pm_a.is_none(), || {
        "baseline logged other terms".into()
    })?;

    let opts = RunOptions::new(data.cfg.hash());
    let run = train_autoencoder_baseline(&data.train, &data.test, net, &schedule, out, &opts)
        .map_err(e)?;
    let snapshot = GmiReport::read_csv(&out.join("gmi").join("step-000025.csv")).map_err(e)?;
    let direct =
        compute_gmi(&data.test, &run.bundle, &opts.gmi_thresholds, opts.binarize).map_err(e)?;
    ensure(snapshot == direct, || {
        "baseline GMI snapshot differs from compute_gmi".into()
    })?;
    ensure(
        run.reports
            .iter()
            .all(|r| r.adv_a.is_none() && r.pm_a.is_none()),
        || "baseline run logged adversarial or pair-matched terms".into(),
    )?;
    Ok(format!(
        "step loss = masked identical loss ({ia:.5}, {ib:.5}); GMI via compute_gmi {:?}",
        direct.matched_fraction
    ))
}

// ---------------------------------------------------------------- 8

fn datagen_ground_truth() -> Outcome {
    let template = EmbryoSpec::default().with_seed(77);
    let masks: Vec<(String, BinaryMask, BinaryMask)> = banis::parallel::map_indexed(1000, |i| {
        let p = generate_pair(&template.with_seed(pair_seed(template.seed, i))).unwrap();
        (format!("{i:04}"), p.membrane_mask, p.nuclei_mask)
    });
    let report = gmi_from_masks(&masks, &[0.05, 0.1]).map_err(e)?;
    let below = report.matched_fraction[0];
    ensure(below >= 0.99, || {
        format!("{:.1}% below 0.05", 100.0 * below)
    })?;
    ensure(report.matched_fraction[1] >= 0.99, || {
        format!("GMI(0.1) = {}", report.matched_fraction[1])
    })?;
    let worst = report.dscs.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    Ok(format!(
        "1000 pairs: {:.1}% with DSC < 0.05 (max {worst:.3}); GMI(0.1) = {}",
        100.0 * below,
        report.matched_fraction[1]
    ))
}

// ---------------------------------------------------------------- 10

fn checkpoint_round_trip(dir: &Path) -> Outcome {
    let cfg = NetConfig::desk();
    let pairs = sample_pairs(12, &EmbryoSpec::default().with_seed(5));
    let schedule = TrainingSchedule {
        warmup_steps: 3,
        joint_steps: 3,
        refine_steps: 2,
        batch_size: 4,
        ..TrainingSchedule::desk()
    };
    let objective = banis::training::Objective::Banis;
    let mut straight =
        Trainer::new(ModelBundle::new(&cfg, 21).map_err(e)?, schedule.clone()).map_err(e)?;
    let mut compared = 0;
    for stop in [3u64, 6] {
        while straight.state.step < stop {
            straight.next_step(&pairs, objective).map_err(e)?;
        }
        let path = dir.join(format!("round-trip-{stop}.ckpt"));
        Checkpoint {
            config_hash: "round-trip".into(),
            schedule: straight.schedule.clone(),
            state: straight.state.clone(),
            bundle: straight.bundle.clone(),
            reports: Vec::new(),
        }
        .save(&path)
        .map_err(e)?;
        let loaded = Checkpoint::load(&path).map_err(e)?;
        loaded.ensure_hash("round-trip").map_err(e)?;
        let mut resumed = Trainer::from_checkpoint(loaded).map_err(e)?;
        let mut reference = Trainer::from_checkpoint(Checkpoint {
            config_hash: String::new(),
            schedule: straight.schedule.clone(),
            state: straight.state.clone(),
            bundle: straight.bundle.clone(),
            reports: Vec::new(),
        })
        .map_err(e)?;
        let want = reference.next_step(&pairs, objective).map_err(e)?;
        let got = resumed.next_step(&pairs, objective).map_err(e)?;
        ensure(got == want, || {
            format!("step {} differs: {got:?} vs {want:?}", stop + 1)
        })?;
        ensure(resumed.bundle == reference.bundle, || {
            "bundles diverged".into()
        })?;
        compared += 1;
    }
    Ok(format!(
        "{compared} round trips (warm-up→joint, joint→refine) reproduce the next LossReport exactly"
    ))
}

// ----------------------------------------------------------------

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let mut failures = 0;
    let mut record = |name: &str, result: Outcome| match result {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL {name}: {detail}");
        }
    };

    let t0 = Instant::now();
    let r = gmi_oracle().and_then(|d| {
        let secs = t0.elapsed().as_secs_f64();
        ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
        Ok(format!("{d}; {secs:.2} s"))
    });
    record("1 gmi-oracle-equivalence", r);
    record("2 loss-analytics", loss_analytics());
    record("3 gradient-correctness", gradient_check());
    record("4 architecture-contracts", architecture());
    record("5 stage-isolation-and-schedule", stage_isolation());

    match desk_data() {
        Ok(data) => {
            match desk_run(&data, &scratch.path().join("desk-1")) {
                Ok(first) => {
                    record("6 desk-training", desk_training(&data, &first));
                    record(
                        "7 determinism",
                        determinism(&data, &first, &scratch.path().join("desk-2")),
                    );
                }
                Err(err) => {
                    record("6 desk-training", Err(err.clone()));
                    record("7 determinism", Err(err));
                }
            }
            record("8 datagen-ground-truth", datagen_ground_truth());
            record(
                "9 baseline-differentiation",
                baseline(&data, &scratch.path().join("baseline")),
            );
        }
        Err(err) => {
            for name in [
                "6 desk-training",
                "7 determinism",
                "9 baseline-differentiation",
            ] {
                record(name, Err(format!("data preparation failed: {err}")));
            }
            record("8 datagen-ground-truth", datagen_ground_truth());
        }
    }
    record(
        "10 checkpoint-round-trip",
        checkpoint_round_trip(scratch.path()),
    );

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
