use std::hint::black_box;

use cbrelab_core::cumulant::{solve_u, solve_v};
use cbrelab_core::environment::{EnvCoupling, EnvLevyCharacteristics, EnvSampler, EnvironmentPath};
use cbrelab_core::forward_sim::{SimConfig, StepKernel};
use cbrelab_core::measures::{Component, MeasureKind, MeasureSpec, Sign};
use cbrelab_core::mechanisms::{BranchingMechanism, ImmigrationMechanism};
use cbrelab_core::rng::{substream, SeedTag, StreamKind};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

const SEED: u64 = 20240601;

fn jump_env() -> EnvLevyCharacteristics {
    let nu = MeasureSpec::new(
        MeasureKind::Env,
        vec![
            Component::Exponential {
                total_mass: 1.0,
                rate: 4.0,
                sign: Sign::Positive,
            },
            Component::Exponential {
                total_mass: 1.0,
                rate: 3.0,
                sign: Sign::Negative,
            },
        ],
    )
    .unwrap();
    EnvLevyCharacteristics::new(0.1, 0.5, nu, 0.1).unwrap()
}

fn branching(with_jumps: bool) -> BranchingMechanism {
    let m = if with_jumps {
        MeasureSpec::new(
            MeasureKind::Branching,
            vec![Component::Exponential {
                total_mass: 2.0,
                rate: 3.0,
                sign: Sign::Positive,
            }],
        )
        .unwrap()
    } else {
        MeasureSpec::empty(MeasureKind::Branching)
    };
    BranchingMechanism::new(0.2, 1.0, m).unwrap()
}

fn env_path(chars: &EnvLevyCharacteristics, t: f64, dt: f64) -> EnvironmentPath {
    EnvSampler::new(chars)
        .unwrap()
        .sample(t, dt, SeedTag::new(SEED, StreamKind::Auxiliary, 0))
        .unwrap()
}

fn backward(c: &mut Criterion) {
    let chars = jump_env();
    let env = env_path(&chars, 1.0, 1e-3);
    let mut g = c.benchmark_group("backward");
    for (name, bm) in [("quadratic", branching(false)), ("exp_jumps", branching(true))] {
        g.bench_function(format!("solve_u/{name}"), |b| {
            b.iter(|| solve_u(&env, 0.0, 1.0, black_box(1.0), &bm, 1e-8).unwrap())
        });
        g.bench_function(format!("solve_v/{name}"), |b| {
            b.iter(|| solve_v(&env, 0.0, 1.0, black_box(1.0), &bm, 1e-8).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let chars = jump_env();
    let cfg = SimConfig::new(1e-3).unwrap();
    let env = env_path(&chars, 1.0, cfg.dt);
    let growth = EnvSampler::new(&chars)
        .unwrap()
        .growth_factors(&env, EnvCoupling::Exponential);
    let immigration = ImmigrationMechanism::new(
        1.0,
        MeasureSpec::new(
            MeasureKind::Immigration,
            vec![Component::Exponential {
                total_mass: 1.0,
                rate: 2.0,
                sign: Sign::Positive,
            }],
        )
        .unwrap(),
    )
    .unwrap();

    let mut g = c.benchmark_group("forward");
    let mut index = 0;
    for (name, bm, im) in [
        ("cbre/quadratic", branching(false), None),
        ("cbre/exp_jumps", branching(true), None),
        ("cbire/exp_jumps", branching(true), Some(&immigration)),
    ] {
        let kernel = StepKernel::new(&bm, im, &cfg).unwrap();
        g.bench_function(format!("path_1000_steps/{name}"), |b| {
            b.iter_batched(
                || {
                    index += 1;
                    substream(SEED, StreamKind::Replica, index)
                },
                |mut rng| kernel.terminal(black_box(1.0), &growth, &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.bench_function("env_sample_1000_steps", |b| {
        let sampler = EnvSampler::new(&chars).unwrap();
        b.iter_batched(
            || {
                index += 1;
                SeedTag::new(SEED, StreamKind::Environment, index)
            },
            |tag| sampler.sample(1.0, 1e-3, tag).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, backward, forward);
criterion_main!(benches);
