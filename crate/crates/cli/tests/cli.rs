use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use banis::config::RunConfig;
use banis::data_synthesis::EmbryoSpec;
use banis::networks::NetConfig;
use banis::training::TrainingSchedule;

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.data.n_pairs = 12;
    cfg.data.embryo = EmbryoSpec {
        canvas_size: 16,
        cell_count: 1,
        membrane_thickness: 1.0,
        nucleus_radius_range: (1.5, 2.0),
        ..EmbryoSpec::default()
    };
    cfg.preprocess.intermediate_size = 16;
    cfg.preprocess.crop_size = 16;
    cfg.preprocess.test_fraction = 0.25;
    cfg.network = NetConfig {
        image_size: 16,
        latent_dim: 8,
        channels: vec![2, 4],
        ..NetConfig::default()
    };
    cfg.training = TrainingSchedule {
        warmup_steps: 2,
        joint_steps: 2,
        refine_steps: 1,
        batch_size: 4,
        checkpoint_interval: 0,
        ..TrainingSchedule::desk()
    };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn banis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_banis"))
        .args(args)
        .env_remove("BANIS_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines()
        .find(|l| l.starts_with("error["))
        .unwrap_or_else(|| panic!("no error line in {err}"))
        .to_string()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    manifest: PathBuf,
}

fn with_data() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&banis(&[
        "--config",
        s(&config),
        "datagen",
        "--out",
        s(&data),
    ]));
    let manifest = data.join("manifest.txt");
    assert!(manifest.exists());
    Fixture {
        config,
        manifest,
        dir,
    }
}

#[test]
fn full_pipeline() {
    let f = with_data();
    let p = f.dir.path();
    let (cfg, manifest) = (s(&f.config), s(&f.manifest));

    let pre = p.join("pre");
    ok(&banis(&[
        "--config",
        cfg,
        "preprocess",
        "--data",
        manifest,
        "--out",
        s(&pre),
        "--debug-stages",
    ]));
    assert_eq!(std::fs::read_dir(pre.join("train/a")).unwrap().count(), 9);
    assert_eq!(std::fs::read_dir(pre.join("test/b")).unwrap().count(), 3);
    assert_eq!(std::fs::read_dir(pre.join("stages")).unwrap().count(), 10);

    let run = p.join("run");
    ok(&banis(&[
        "--config",
        cfg,
        "train",
        "--data",
        manifest,
        "--out",
        s(&run),
    ]));
    let metrics = run.join("metrics.csv");
    assert_eq!(
        std::fs::read_to_string(&metrics).unwrap().lines().count(),
        6
    );
    assert!(run.join("gmi.csv").exists());
    let ckpt = run.join("checkpoints/step-000005.ckpt");
    assert!(ckpt.exists());

    let base = p.join("baseline");
    ok(&banis(&[
        "--config",
        cfg,
        "train-baseline",
        "--data",
        manifest,
        "--out",
        s(&base),
    ]));

    let report = p.join("eval.csv");
    let out = banis(&[
        "--config",
        cfg,
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        manifest,
        "--thresholds",
        "0.1,0.2,0.3",
        "--out",
        s(&report),
    ]);
    ok(&out);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("pair_id,dsc\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("TS,")).count(), 3);

    let synth = p.join("synth");
    ok(&banis(&[
        "--config",
        cfg,
        "synth",
        "--ckpt",
        s(&ckpt),
        "--n",
        "8",
        "--mode",
        "from-prior",
        "--out",
        s(&synth),
    ]));
    assert_eq!(std::fs::read_dir(&synth).unwrap().count(), 17);
    assert!(synth.join("contact_sheet.png").exists());

    let recon = p.join("recon");
    ok(&banis(&[
        "--config",
        cfg,
        "synth",
        "--ckpt",
        s(&ckpt),
        "--n",
        "2",
        "--mode",
        "from-test-set",
        "--data",
        manifest,
        "--out",
        s(&recon),
    ]));
    assert!(recon.join("contact_sheet.png").exists());

    let rep = p.join("report");
    let out = banis(&[
        "report",
        "--metrics",
        s(&metrics),
        "--gmi",
        &format!("banis={}", s(&run.join("gmi.csv"))),
        "--gmi",
        &format!("banis={}", s(&run.join("gmi.csv"))),
        "--gmi",
        &format!("baseline={}", s(&base.join("gmi.csv"))),
        "--out",
        s(&rep),
    ]);
    ok(&out);
    let table = std::fs::read_to_string(rep.join("summary.txt")).unwrap();
    assert!(
        table.contains("banis") && table.contains("baseline"),
        "{table}"
    );
    assert!(table.lines().nth(1).unwrap().contains("± 0.00"), "{table}");
    assert!(rep.join("loss_adv_A.png").exists());
}

#[test]
fn synth_is_deterministic_and_rejects_zero() {
    let f = with_data();
    let p = f.dir.path();
    let cfg = s(&f.config);
    let run = p.join("run");
    ok(&banis(&[
        "--config",
        cfg,
        "train",
        "--data",
        s(&f.manifest),
        "--out",
        s(&run),
    ]));
    let ckpt = run.join("checkpoints/step-000005.ckpt");
    for d in ["x", "y"] {
        ok(&banis(&[
            "synth",
            "--ckpt",
            s(&ckpt),
            "--n",
            "3",
            "--seed",
            "4",
            "--out",
            s(&p.join(d)),
        ]));
    }
    for name in ["pair_0002_B.png", "contact_sheet.png"] {
        assert_eq!(
            std::fs::read(p.join("x").join(name)).unwrap(),
            std::fs::read(p.join("y").join(name)).unwrap()
        );
    }
    let out = banis(&[
        "synth",
        "--ckpt",
        s(&ckpt),
        "--n",
        "0",
        "--out",
        s(&p.join("z")),
    ]);
    assert!(error_line(&out).starts_with("error[validation]"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let f = with_data();
    let data = f.dir.path().join("data");
    let out = banis(&["--config", s(&f.config), "datagen", "--out", s(&data)]);
    assert!(error_line(&out).starts_with("error[exists]"));
    ok(&banis(&[
        "--config",
        s(&f.config),
        "--force",
        "datagen",
        "--out",
        s(&data),
    ]));
}

#[test]
fn resume_with_other_config_is_rejected() {
    let f = with_data();
    let p = f.dir.path();
    let run = p.join("run");
    ok(&banis(&[
        "--config",
        s(&f.config),
        "train",
        "--data",
        s(&f.manifest),
        "--out",
        s(&run),
    ]));
    let text = std::fs::read_to_string(&f.config)
        .unwrap()
        .replace("seed = 0", "seed = 9");
    let other = p.join("other.toml");
    std::fs::write(&other, text).unwrap();
    let out = banis(&[
        "--config",
        s(&other),
        "train",
        "--data",
        s(&f.manifest),
        "--out",
        s(&p.join("r")),
        "--resume",
        s(&run.join("checkpoints/step-000002.ckpt")),
    ]);
    let line = error_line(&out);
    assert!(
        line.starts_with("error[checkpoint]") && line.contains("mismatch"),
        "{line}"
    );
}

#[test]
fn malformed_inputs_report_category_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "pair_id,dsc\np0,0.1\np1,not-a-number\n").unwrap();
    let out = banis(&[
        "report",
        "--gmi",
        &format!("x={}", s(&bad)),
        "--out",
        s(&dir.path().join("r")),
    ]);
    let line = error_line(&out);
    assert!(
        line.starts_with("error[parse]") && line.contains("line 3"),
        "{line}"
    );

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[training]\nwarmup_steps = \"many\"\n").unwrap();
    let out = banis(&["--config", s(&cfg), "datagen"]);
    let line = error_line(&out);
    assert!(
        line.starts_with("error[parse]") && line.contains("line 3"),
        "{line}"
    );
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_banis"))
        .args(["--config", s(&config), "datagen"])
        .env("BANIS_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    ok(&out);
    let cfg = RunConfig::load(&config).unwrap();
    assert!(root
        .join("datagen")
        .join(cfg.artifact_key())
        .join("manifest.txt")
        .exists());
}
