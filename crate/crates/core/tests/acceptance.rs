//! The twelve acceptance criteria, each run at its stated sample sizes and
//! tolerances. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any criterion fails. Stated runtime limits are part of each verdict.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cbrelab_core::cumulant::{bsde_residual, flow_residual, solve_u};
use cbrelab_core::environment::{degenerate_env, EnvLevyCharacteristics, EnvSampler};
use cbrelab_core::forward_sim::SimConfig;
use cbrelab_core::laws::{
    annealed_laplace, ergodic_convergence, extinction_report, generator_check, martingale_check, quenched_laplace,
    stationary_laplace, strong_feller_gap, Environments, Model, Run,
};
use cbrelab_core::measures::{Component, MeasureKind, MeasureSpec, Sign};
use cbrelab_core::mechanisms::{BranchingMechanism, ImmigrationMechanism};
use cbrelab_core::rng::{substream, SeedTag, StreamKind};
use cbrelab_core::{Error, Result};
use rand::Rng;

const SEED: u64 = 20_240_601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

/// Brownian motion with drift plus two-sided exponential jumps.
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

fn quadratic(b: f64, c: f64) -> BranchingMechanism {
    BranchingMechanism::quadratic(b, c).unwrap()
}

fn jumpy_branching() -> BranchingMechanism {
    let m = MeasureSpec::new(
        MeasureKind::Branching,
        vec![Component::Exponential {
            total_mass: 2.0,
            rate: 3.0,
            sign: Sign::Positive,
        }],
    )
    .unwrap();
    BranchingMechanism::new(0.2, 0.5, m).unwrap()
}

fn run(dt: f64, tol: f64) -> Run {
    Run::new(SimConfig::new(dt).unwrap(), SEED, tol).unwrap()
}

fn z_line(r: &cbrelab_core::laws::LawReport) -> String {
    format!(
        "analytic {:.6} vs mc {:.6} (se {:.2e}, z {:+.2})",
        r.analytic, r.mc.value, r.stderr, r.z_score
    )
}

fn classical_limit() -> Result<Verdict> {
    let env = degenerate_env(1.0, 0.01)?;
    let u = solve_u(&env, 0.0, 1.0, 1.0, &quadratic(0.0, 1.0), 1e-9)?.initial();
    let rel = (u - 0.5).abs() / 0.5;
    verdict(rel <= 1e-6, format!("u = {u:.10}, relative error {rel:.1e}"))
}

fn riccati_under_environment() -> Result<Verdict> {
    let (b, c, dt) = (0.3, 1.0, 1e-4);
    let chars = jump_env();
    let sampler = EnvSampler::new(&chars)?;
    let bm = quadratic(b, c);
    let mut worst: f64 = 0.0;
    for j in 0..50 {
        let env = sampler.sample(1.0, dt, SeedTag::new(SEED, StreamKind::Environment, j))?;
        let u = solve_u(&env, 0.0, 1.0, 1.0, &bm, 1e-8)?.initial();
        let n = env.steps();
        let exact = 1.0 / (b.exp() + c * env.exponential_functional(b, n));
        worst = worst.max((u - exact).abs() / exact);
    }
    verdict(worst <= 1e-4, format!("max relative error {worst:.1e} over 50 paths"))
}

fn flow_property() -> Result<Verdict> {
    let tol = 1e-6;
    let dt = 1e-3;
    let chars = jump_env();
    let sampler = EnvSampler::new(&chars)?;
    let bm = jumpy_branching();
    let mut rng = substream(SEED, StreamKind::Auxiliary, 3);
    let mut worst: f64 = 0.0;
    for j in 0..10 {
        let env = sampler.sample(1.0, dt, SeedTag::new(SEED, StreamKind::Environment, j))?;
        for _ in 0..20 {
            let mut idx = [0usize; 3];
            idx.iter_mut().for_each(|k| *k = rng.random_range(0..=env.steps()));
            idx.sort_unstable();
            let [r, s, t] = idx.map(|k| env.time(k));
            let lam = 10f64.powf(rng.random_range(-1.0..1.0));
            worst = worst.max(flow_residual(&env, r, s, t, lam, &bm, tol)?);
        }
    }
    verdict(worst < 10.0 * tol, format!("max residual {worst:.1e} over 200 triples"))
}

/// Drift-dominated setting: a weak Brownian environment and a large λ make
/// the first-order drift error dominate the half-order Itô error.
fn bsde_convergence() -> Result<Verdict> {
    let chars = EnvLevyCharacteristics::brownian(0.0, 0.1)?;
    let sampler = EnvSampler::new(&chars)?;
    let bm = quadratic(0.5, 1.0);
    let mut ratios = Vec::new();
    for j in 0..20 {
        let coarse = sampler.sample(1.0, 0.02, SeedTag::new(SEED, StreamKind::Environment, j))?;
        let fine = coarse.refine(&chars, &mut substream(SEED, StreamKind::Refinement, j))?;
        let rc = bsde_residual(&coarse, &chars, 10.0, 1.0, &bm, 1e-10)?;
        let rf = bsde_residual(&fine, &chars, 10.0, 1.0, &bm, 1e-10)?;
        ratios.push(rc / rf);
    }
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[9] + ratios[10]);
    verdict(
        (1.5..=3.0).contains(&median),
        format!("median residual ratio dt/(dt/2) = {median:.3}"),
    )
}

fn quenched_dual_engine() -> Result<Verdict> {
    let model = Model::new(jump_env(), quadratic(0.2, 1.0));
    let r = run(1e-3, 1e-6);
    let env = EnvSampler::new(&model.chars)?.sample(1.0, 1e-3, SeedTag::new(SEED, StreamKind::Environment, 0))?;
    let reports = quenched_laplace(&model, &env, 1.0, 1.0, &[0.5, 1.0, 2.0], 100_000, &r)?;
    let pass = reports.iter().all(|r| r.z_score.abs() <= 4.0);
    let detail = reports
        .iter()
        .map(|r| format!("λ={}: z {:+.2}", r.param("lambda").unwrap(), r.z_score))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, detail)
}

fn annealed_dual_engine() -> Result<Verdict> {
    let model = Model::new(jump_env(), quadratic(0.2, 1.0));
    let r = annealed_laplace(&model, 1.0, 1.0, &[1.0], 200, 500, 10_000, &run(1e-3, 1e-6))?.remove(0);
    verdict(r.z_score.abs() <= 4.0, z_line(&r))
}

fn martingale() -> Result<Verdict> {
    let model = Model::new(jump_env(), jumpy_branching());
    let env = EnvSampler::new(&model.chars)?.sample(1.0, 1e-3, SeedTag::new(SEED, StreamKind::Environment, 1))?;
    let r = martingale_check(&model, &env, 1.0, 1.0, 100_000, &run(1e-3, 1e-6))?;
    verdict(
        r.z_score.abs() <= 4.0,
        format!("mean {:+.2e} (se {:.2e}, z {:+.2})", r.mc.value, r.stderr, r.z_score),
    )
}

fn extinction() -> Result<Verdict> {
    let r = run(1e-3, 1e-6);
    let quad = Model::new(jump_env(), quadratic(0.2, 1.0));
    let env = EnvSampler::new(&quad.chars)?.sample(1.0, 1e-3, SeedTag::new(SEED, StreamKind::Environment, 2))?;
    let q = extinction_report(&quad, Environments::Quenched(&env), 1.0, 1.0, 100_000, &r)?;
    let m = MeasureSpec::new(
        MeasureKind::Branching,
        vec![Component::Exponential {
            total_mass: 1.0,
            rate: 2.0,
            sign: Sign::Positive,
        }],
    )?;
    let lin = Model::new(jump_env(), BranchingMechanism::new(0.5, 0.0, m)?);
    let l = extinction_report(&lin, Environments::Quenched(&env), 1.0, 1.0, 100_000, &r)?;
    let extinct = (l.mc.value * l.mc.n as f64).round();
    verdict(
        q.z_score.abs() <= 4.0 && extinct == 0.0,
        format!("quadratic {}; linear {} extinctions in {}", z_line(&q), extinct, l.mc.n),
    )
}

fn strong_feller() -> Result<Verdict> {
    let model = Model::new(jump_env(), quadratic(0.2, 1.0));
    let envs = Environments::Annealed {
        n_env: 10_000,
        n_analytic: 0,
    };
    let c = strong_feller_gap(&model, envs, 0.5, 1.5, 1.0, 100, &run(1e-3, 1e-6))?;
    verdict(
        c.law.z_score.abs() <= 4.0 && c.monotonicity_violations == 0,
        format!(
            "{}; {} violations over {} grid points",
            z_line(&c.law),
            c.monotonicity_violations,
            c.grid_points_checked
        ),
    )
}

fn generator_short_time() -> Result<Verdict> {
    let model = Model::new(jump_env(), jumpy_branching());
    let g = generator_check(&model, 1.0, 1.0, 1e-3, 1_000_000, 0.05, &run(1e-3, 1e-6))?;
    verdict(
        g.relative_error < 0.05,
        format!(
            "Af = {:.5}, difference quotient {:.5} ± {:.1e}, relative error {:.2}%",
            g.law.analytic,
            g.law.mc.value,
            g.law.mc.stderr,
            100.0 * g.relative_error
        ),
    )
}

fn cbire_stationarity() -> Result<Verdict> {
    let model = Model::new(EnvLevyCharacteristics::degenerate(), quadratic(1.0, 0.0))
        .with_immigration(ImmigrationMechanism::drift(1.0)?);
    let r = run(0.01, 1e-4);
    let s = stationary_laplace(&model, 1.0, 30.0, 2, &r)?;
    let analytic_ok = (s.value - (-1f64).exp()).abs() <= 1e-4;
    let erg = ergodic_convergence(&model, 1.0, &[0.0, 10.0], &[10.0, 20.0, 30.0], 30.0, 2, 2, 2, &r);
    let (forward_ok, forward_detail) = match &erg {
        Ok(e) => {
            let ends: Vec<String> = e
                .rows
                .iter()
                .filter(|row| row.param("t") == Some(30.0))
                .map(|row| format!("x={}: {:.6}", row.param("x0").unwrap(), row.mc.value))
                .collect();
            (e.pass, ends.join(", "))
        }
        Err(err) => (false, err.to_string()),
    };
    let heavy = Model::new(EnvLevyCharacteristics::degenerate(), quadratic(1.0, 0.0)).with_immigration(
        ImmigrationMechanism::new(
            0.0,
            MeasureSpec::new(
                MeasureKind::Immigration,
                vec![Component::PowerTail {
                    scale: 1.0,
                    exponent: 0.5,
                    lower_cut: 1.0,
                    sign: Sign::Positive,
                }],
            )?,
        )?,
    );
    let start = Instant::now();
    let rejected = match stationary_laplace(&heavy, 1.0, 30.0, 2, &r) {
        Err(Error::NotErgodic(_)) => true,
        Err(e) => {
            println!("      power-tail immigration: {e}");
            false
        }
        Ok(v) => {
            println!(
                "      power-tail immigration accepted as ergodic, stationary value {:.6}",
                v.value
            );
            false
        }
    };
    let quick = start.elapsed() < Duration::from_secs(1);
    verdict(
        analytic_ok && forward_ok && rejected && quick,
        format!(
            "stationary {:.7} (target {:.7}); t=30 forward {}; power-tail 0.5 rejected as NotErgodic: {}",
            s.value,
            (-1f64).exp(),
            forward_detail,
            rejected
        ),
    )
}

fn determinism() -> Result<Verdict> {
    let battery = || -> Result<String> {
        let model = Model::new(jump_env(), quadratic(0.2, 1.0));
        let r = run(0.01, 1e-6);
        let env = EnvSampler::new(&model.chars)?.sample(1.0, 0.01, SeedTag::new(SEED, StreamKind::Environment, 0))?;
        let mut out =
            serde_json::to_string(&quenched_laplace(&model, &env, 1.0, 1.0, &[0.5, 1.0], 2_000, &r)?).unwrap();
        out += &serde_json::to_string(&annealed_laplace(&model, 1.0, 1.0, &[1.0], 20, 50, 50, &r)?).unwrap();
        let envs = Environments::Annealed {
            n_env: 20,
            n_analytic: 0,
        };
        out += &serde_json::to_string(&extinction_report(&model, envs, 1.0, 1.0, 50, &r)?).unwrap();
        out += &serde_json::to_string(&strong_feller_gap(&model, envs, 0.5, 1.5, 1.0, 20, &r)?).unwrap();
        Ok(out)
    };
    let with_threads = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(battery)
    };
    let one = with_threads(1)?;
    let four = with_threads(4)?;
    verdict(
        one == four,
        format!(
            "{} bytes of reports, identical across 1 and 4 threads: {}",
            one.len(),
            one == four
        ),
    )
}

type Criterion = (&'static str, fn() -> Result<Verdict>, Duration);

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria: [Criterion; 12] = [
        ("classical-limit oracle", classical_limit, secs(1)),
        ("Riccati oracle under environment", riccati_under_environment, secs(30)),
        ("flow property", flow_property, secs(30)),
        ("backward-SDE residual convergence", bsde_convergence, secs(60)),
        ("quenched dual-engine Laplace", quenched_dual_engine, secs(300)),
        ("annealed dual-engine Laplace", annealed_dual_engine, secs(600)),
        ("martingale of e^{bt} Z(t)", martingale, secs(300)),
        ("extinction probabilities", extinction, secs(600)),
        ("strong-Feller coupling", strong_feller, secs(600)),
        ("generator short-time check", generator_short_time, secs(300)),
        ("stationarity with immigration", cbire_stationarity, secs(600)),
        ("determinism across thread counts", determinism, secs(60)),
    ];
    let mut failures = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass && elapsed < *limit, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1} s, limit {} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of 12 acceptance criteria passed", 12 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
