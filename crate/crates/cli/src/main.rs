//! `banis` — generate synthetic pairs, condition images, train, synthesize,
//! evaluate and report.
//!
//! Failures print one line `error[<category>]: <message>` to stderr and exit
//! nonzero. Output directories default to
//! `<root>/<command>/<config-hash12>-s<seed>`, where `<root>` is
//! `$BANIS_OUTPUT_ROOT`, else the config's `output_dir`, else `runs`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use banis::checkpoint::Checkpoint;
use banis::config::RunConfig;
use banis::data_synthesis::generate_dataset_with_split;
use banis::dataset::{ImagePair, Manifest};
use banis::gmi::{binarize, compute_gmi, dsc, reconstruct_pairs, Binarize, GmiReport};
use banis::imaging::Grid;
use banis::networks::{generate, sample_prior, Domain};
use banis::preprocessing::{build_splits, preprocess_stages, Plane};
use banis::report::{contact_sheet, pair_sheet, plot_losses, render_table, save_sheet, summarize};
use banis::training::{read_metrics, train, train_autoencoder_baseline, RunOptions};

const OUTPUT_ROOT_ENV: &str = "BANIS_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "banis",
    version,
    about = "Geometrically matched two-domain image synthesis"
)]
struct Cli {
    /// TOML run configuration; built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedurally generated membrane/nuclei pairs, masks and a manifest.
    Datagen {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of pairs (default: data.n_pairs).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Condition every manifest pair and write the network-ready images.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        intermediate_size: Option<usize>,
        #[arg(long)]
        crop_size: Option<usize>,
        /// Also write every intermediate stage of the first pair.
        #[arg(long)]
        debug_stages: bool,
    },
    /// Staged adversarial training.
    Train(TrainArgs),
    /// The auto-encoder baseline on the same data and schedule length.
    TrainBaseline(TrainArgs),
    /// Sample pairs from the prior or reconstruct test pairs.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SynthMode::FromPrior)]
        mode: SynthMode,
        /// Manifest (required for from-test-set).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Matching index of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated thresholds (default: eval.thresholds).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        binarize: Option<BinarizeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary table and loss plots from finished runs.
    Report {
        /// Metrics CSV whose losses are plotted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// `<label>=<gmi.csv>`; repeat a label once per run.
        #[arg(long = "gmi", value_parser = parse_labeled)]
        gmi: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint (its config hash must match).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthMode {
    FromPrior,
    FromTestSet,
}

#[derive(Clone, Copy, ValueEnum)]
enum BinarizeArg {
    Fixed,
    Otsu,
}

fn parse_labeled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (label, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected <label>=<path>, got '{s}'"))?;
    if label.is_empty() || path.is_empty() {
        return Err(format!("expected <label>=<path>, got '{s}'"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

struct Ctx {
    cfg: RunConfig,
    config_given: bool,
    force: bool,
}

impl Ctx {
    fn output_dir(&self, explicit: Option<PathBuf>, command: &str) -> PathBuf {
        explicit.unwrap_or_else(|| {
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .or_else(|| self.cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(command).join(self.cfg.artifact_key())
        })
    }

    /// Creates `dir`, refusing a non-empty one unless forced.
    fn fresh_dir(&self, dir: &Path) -> Result<()> {
        let occupied = dir
            .read_dir()
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if occupied {
            if !self.force {
                return Err(banis::Error::Exists(dir.to_path_buf()).into());
            }
            std::fs::remove_dir_all(dir).map_err(|e| banis::Error::io(dir, e))?;
        }
        std::fs::create_dir_all(dir).map_err(|e| banis::Error::io(dir, e))?;
        Ok(())
    }

    fn fresh_file(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(banis::Error::Exists(path.to_path_buf()).into());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| banis::Error::io(dir, e))?;
        }
        Ok(())
    }

    /// The resolved configuration, so the artifact can be replayed.
    fn record(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        let text = format!("# config hash {}\n{}", self.cfg.hash(), self.cfg.to_toml());
        std::fs::write(&path, text).map_err(|e| banis::Error::io(&path, e))?;
        Ok(())
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        if self.config_given {
            ck.ensure_hash(&self.cfg.hash())?;
        }
        Ok(ck)
    }

    fn splits(&self, manifest: &Path) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
        let m = Manifest::read(manifest)?;
        Ok(build_splits(&m, &self.cfg.preprocess, self.cfg.seed)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let lib = err.chain().find_map(|e| e.downcast_ref::<banis::Error>());
            let category = lib.map(banis::Error::category).unwrap_or("runtime");
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{category}]: {message}");
            match lib {
                Some(banis::Error::Interrupted(_)) => ExitCode::from(130),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ctx = Ctx {
        cfg,
        config_given: cli.config.is_some(),
        force: cli.force,
    };
    match cli.command {
        Command::Datagen { out, n, seed } => {
            if let Some(s) = seed {
                ctx.cfg.seed = s;
            }
            if let Some(n) = n {
                ctx.cfg.data.n_pairs = n;
            }
            let dir = ctx.output_dir(out, "datagen");
            ctx.fresh_dir(&dir)?;
            let template = ctx.cfg.data.embryo.with_seed(ctx.cfg.seed);
            let m = generate_dataset_with_split(
                &template,
                ctx.cfg.data.n_pairs,
                &dir,
                ctx.cfg.preprocess.test_fraction,
            )?;
            ctx.record(&dir)?;
            println!(
                "{} pairs written; manifest {}",
                m.entries.len(),
                dir.join(banis::data_synthesis::MANIFEST_FILE).display()
            );
        }
        Command::Preprocess {
            data,
            out,
            sigma,
            intermediate_size,
            crop_size,
            debug_stages,
        } => {
            let p = &mut ctx.cfg.preprocess;
            if let Some(s) = sigma {
                p.gaussian_sigma = s;
            }
            if let Some(s) = intermediate_size {
                p.intermediate_size = s;
            }
            if let Some(s) = crop_size {
                p.crop_size = s;
            }
            p.validate()?;
            let dir = ctx.output_dir(out, "preprocess");
            ctx.fresh_dir(&dir)?;
            let manifest = Manifest::read(&data)?;
            let (train_set, test_set) = build_splits(&manifest, &ctx.cfg.preprocess, ctx.cfg.seed)?;
            for (split, pairs) in [("train", &train_set), ("test", &test_set)] {
                for pair in pairs.iter() {
                    for (d, img) in [("a", &pair.a), ("b", &pair.b)] {
                        let sub = dir.join(split).join(d);
                        std::fs::create_dir_all(&sub).map_err(|e| banis::Error::io(&sub, e))?;
                        img.save_png(&sub.join(format!("{}.png", pair.id)))?;
                    }
                }
            }
            if debug_stages {
                write_stages(&manifest, &ctx.cfg, &dir.join("stages"))?;
            }
            ctx.record(&dir)?;
            println!(
                "{} train / {} test pairs written below {}",
                train_set.len(),
                test_set.len(),
                dir.display()
            );
        }
        Command::Train(args) => run_training(&ctx, args, false)?,
        Command::TrainBaseline(args) => run_training(&ctx, args, true)?,
        Command::Synth {
            ckpt,
            n,
            mode,
            data,
            seed,
            out,
        } => {
            if n == 0 {
                return Err(banis::Error::validation("n", "must be at least 1").into());
            }
            let ck = ctx.load_checkpoint(&ckpt)?;
            let dir = ctx.output_dir(out, "synth");
            ctx.fresh_dir(&dir)?;
            match mode {
                SynthMode::FromPrior => synth_prior(&ck, n, seed, &dir)?,
                SynthMode::FromTestSet => {
                    let data = data.context("--data is required for from-test-set")?;
                    let (_, test_set) = ctx.splits(&data)?;
                    synth_test_set(&ck, &test_set, n, &dir)?;
                }
            }
            println!("wrote {n} pairs and contact_sheet.png to {}", dir.display());
        }
        Command::Eval {
            ckpt,
            data,
            thresholds,
            binarize,
            out,
        } => {
            let ck = ctx.load_checkpoint(&ckpt)?;
            let thresholds = thresholds.unwrap_or_else(|| ctx.cfg.eval.thresholds.clone());
            let method = match binarize {
                None => ctx.cfg.eval.binarize,
                Some(BinarizeArg::Otsu) => Binarize::Otsu,
                Some(BinarizeArg::Fixed) => match ctx.cfg.eval.binarize {
                    fixed @ Binarize::Fixed(_) => fixed,
                    Binarize::Otsu => Binarize::default(),
                },
            };
            ctx.fresh_file(&out)?;
            let (_, test_set) = ctx.splits(&data)?;
            let report = compute_gmi(&test_set, &ck.bundle, &thresholds, method)?;
            report.write_csv(&out)?;
            for (t, f) in report.thresholds.iter().zip(&report.matched_fraction) {
                println!("TS {t}: matched fraction {f:.4}");
            }
            println!(
                "mean DSC {:.4} over {} pairs",
                report.mean_dsc(),
                report.n_pairs
            );
        }
        Command::Report { metrics, gmi, out } => {
            if metrics.is_none() && gmi.is_empty() {
                bail!(banis::Error::validation(
                    "report",
                    "nothing to report: pass --metrics and/or --gmi"
                ));
            }
            let dir = ctx.output_dir(out, "report");
            ctx.fresh_dir(&dir)?;
            if !gmi.is_empty() {
                let mut labels: Vec<&str> = Vec::new();
                for (l, _) in &gmi {
                    if !labels.contains(&l.as_str()) {
                        labels.push(l);
                    }
                }
                let mut rows = Vec::new();
                for label in labels {
                    let reports = gmi
                        .iter()
                        .filter(|(l, _)| l == label)
                        .map(|(_, p)| GmiReport::read_csv(p))
                        .collect::<banis::Result<Vec<_>>>()?;
                    rows.push(summarize(label, &reports)?);
                }
                let table = render_table(&rows);
                let path = dir.join("summary.txt");
                std::fs::write(&path, &table).map_err(|e| banis::Error::io(&path, e))?;
                print!("{table}");
            }
            if let Some(m) = metrics {
                let reports = read_metrics(&m)?;
                let plots = plot_losses(&reports, &dir)?;
                println!("{} loss plots written to {}", plots.len(), dir.display());
            }
        }
    }
    Ok(())
}

fn run_training(ctx: &Ctx, args: TrainArgs, baseline: bool) -> Result<()> {
    let command = if baseline { "train-baseline" } else { "train" };
    let dir = ctx.output_dir(args.out, command);
    if args.resume.is_none() {
        ctx.fresh_dir(&dir)?;
    } else {
        std::fs::create_dir_all(&dir).map_err(|e| banis::Error::io(&dir, e))?;
    }
    ctx.record(&dir)?;
    let (train_set, test_set) = ctx.splits(&args.data)?;
    log::info!(
        "{} train / {} test pairs; output {}",
        train_set.len(),
        test_set.len(),
        dir.display()
    );

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received; writing a final checkpoint (press again to abort)");
    })
    .context("installing the interrupt handler")?;

    let mut opts = RunOptions::new(ctx.cfg.hash());
    opts.resume = args.resume;
    opts.stop = Some(stop);
    opts.gmi_thresholds = ctx.cfg.eval.thresholds.clone();
    opts.binarize = ctx.cfg.eval.binarize;
    let trainer = if baseline {
        train_autoencoder_baseline
    } else {
        train
    };
    let outcome = trainer(
        &train_set,
        &test_set,
        &ctx.cfg.network,
        &ctx.cfg.training,
        &dir,
        &opts,
    )
    .with_context(|| format!("{command} in {}", dir.display()))?;
    println!("metrics {}", outcome.metrics.display());
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    if !test_set.is_empty() {
        let report = compute_gmi(
            &test_set,
            &outcome.bundle,
            &opts.gmi_thresholds,
            opts.binarize,
        )?;
        report.write_csv(&dir.join("gmi.csv"))?;
        for (t, f) in report.thresholds.iter().zip(&report.matched_fraction) {
            println!("TS {t}: matched fraction {f:.4}");
        }
    }
    Ok(())
}

fn write_stages(manifest: &Manifest, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let Some(entry) = manifest.entries.first() else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| banis::Error::io(dir, e))?;
    for (name, rel) in [("membrane", &entry.membrane), ("nuclei", &entry.nuclei)] {
        let raw = banis::imaging::load_dynamic(&manifest.resolve(rel))?;
        let (stages, out) = preprocess_stages(&raw, &cfg.preprocess, None)?;
        for (i, (stage, plane)) in stages.iter().enumerate() {
            let path =
                dir.join(format!("{}_{name}_{i}_{stage:?}.png", entry.pair_id).to_lowercase());
            banis::imaging::save_gray(&plane_image(plane), &path)?;
        }
        out.save_png(&dir.join(format!(
            "{}_{name}_{}_normalized.png",
            entry.pair_id,
            stages.len()
        )))?;
    }
    Ok(())
}

fn plane_image(p: &Plane) -> image::GrayImage {
    image::GrayImage::from_fn(p.width as u32, p.height as u32, |x, y| {
        let v = p.data[y as usize * p.width + x as usize];
        image::Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

fn synth_prior(ck: &Checkpoint, n: usize, seed: u64, dir: &Path) -> Result<()> {
    let bundle = &ck.bundle;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_prior::<f32>(n, bundle.latent_dim(), &mut rng);
    let img = bundle.image_shape();
    let to_grids = |d: Domain| -> Result<Vec<Grid>> {
        let t = generate(bundle.generator(d), &z)?;
        (0..n)
            .map(|i| Ok(Grid::new(img.w, img.h, t.sample(i).to_vec())?))
            .collect()
    };
    let (a, b) = (to_grids(Domain::A)?, to_grids(Domain::B)?);
    for i in 0..n {
        a[i].save_png(&dir.join(format!("pair_{i:04}_A.png")))?;
        b[i].save_png(&dir.join(format!("pair_{i:04}_B.png")))?;
    }
    save_sheet(&pair_sheet(&a, &b, 8)?, &dir.join("contact_sheet.png"))?;
    Ok(())
}

fn synth_test_set(ck: &Checkpoint, test_set: &[ImagePair], n: usize, dir: &Path) -> Result<()> {
    if test_set.is_empty() {
        return Err(banis::Error::validation("test set", "empty").into());
    }
    let chosen = &test_set[..n.min(test_set.len())];
    if chosen.len() < n {
        log::warn!("only {} test pairs available", chosen.len());
    }
    let recs = reconstruct_pairs(chosen, &ck.bundle)?;
    let mut row_a: Vec<&Grid> = Vec::new();
    let mut row_b: Vec<&Grid> = Vec::new();
    let mut total = 0.0;
    for (p, (s_b_of_a, s_a_of_b)) in chosen.iter().zip(&recs) {
        p.a.save_png(&dir.join(format!("{}_A_observed.png", p.id)))?;
        p.b.save_png(&dir.join(format!("{}_B_observed.png", p.id)))?;
        s_a_of_b.save_png(&dir.join(format!("{}_A_synth.png", p.id)))?;
        s_b_of_a.save_png(&dir.join(format!("{}_B_synth.png", p.id)))?;
        row_a.extend([&p.a, s_a_of_b]);
        row_b.extend([&p.b, s_b_of_a]);
        let method = Binarize::default();
        total += dsc(&binarize(s_b_of_a, method)?, &binarize(s_a_of_b, method)?)?;
    }
    // Each row pairs an observed image with the synthesized one of the same domain.
    let mut rows = Vec::new();
    for (ra, rb) in row_a.chunks(8).zip(row_b.chunks(8)) {
        rows.push(ra.to_vec());
        rows.push(rb.to_vec());
    }
    save_sheet(&contact_sheet(&rows)?, &dir.join("contact_sheet.png"))?;
    println!("mean pair DSC {:.4}", total / chosen.len() as f64);
    Ok(())
}
