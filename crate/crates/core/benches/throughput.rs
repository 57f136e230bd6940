//! Sequential vs data-parallel execution of the hot paths.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use banis::data_synthesis::{generate_dataset, generate_pair, pair_seed, EmbryoSpec};
use banis::dataset::{ImagePair, Split};
use banis::gmi::{compute_gmi, Binarize};
use banis::networks::{ModelBundle, NetConfig};
use banis::parallel::{set_execution, Execution};
use banis::training::{Objective, Trainer, TrainingSchedule};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn pairs(n: usize) -> Vec<ImagePair> {
    let spec = EmbryoSpec::default();
    (0..n)
        .map(|i| {
            let p = generate_pair(&spec.with_seed(pair_seed(0, i))).unwrap();
            ImagePair {
                id: format!("{i}"),
                split: Split::Train,
                a: p.membrane_image,
                b: p.nuclei_image,
                mask_a: None,
                mask_b: None,
            }
        })
        .collect()
}

fn training_step(c: &mut Criterion) {
    let data = pairs(64);
    let schedule = TrainingSchedule {
        warmup_steps: 0,
        ..TrainingSchedule::desk()
    };
    let mut group = c.benchmark_group("joint_step_desk_batch32");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution(mode);
        let mut t = Trainer::new(
            ModelBundle::new(&NetConfig::desk(), 0).unwrap(),
            schedule.clone(),
        )
        .unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| t.next_step(&data, Objective::Banis).unwrap())
        });
    }
    group.finish();
}

fn gmi(c: &mut Criterion) {
    let data = pairs(32);
    let bundle = ModelBundle::new(&NetConfig::desk(), 0).unwrap();
    let mut group = c.benchmark_group("compute_gmi_32_pairs");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compute_gmi(&data, &bundle, &[0.1, 0.2, 0.3], Binarize::Otsu).unwrap())
        });
    }
    group.finish();
}

fn datagen(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_dataset_64_pairs");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution(mode);
        // A fresh directory per iteration: rewriting the same files measures the filesystem.
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || tempfile::tempdir().unwrap(),
                |dir| {
                    generate_dataset(&EmbryoSpec::default(), 64, dir.path()).unwrap();
                    dir
                },
                BatchSize::PerIteration,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, training_step, gmi, datagen);
criterion_main!(benches);
