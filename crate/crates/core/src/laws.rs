//! Law-level comparisons between the forward and backward engines.
//!
//! Every estimator here is a pure function of its inputs and the master
//! seed. Replicas and environment draws run on the rayon pool, results are
//! collected in index order and reduced sequentially, so the thread count
//! never changes a digit.
//!
//! Environments come from two independent families of substreams:
//! `Environment` paths drive forward simulations, `AnalyticEnvironment`
//! paths feed the backward side when it is estimated independently.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::cumulant::{check_ergodic, extinction_u_bar, solve_v, solve_v_curve, stationary_exponent};
use crate::environment::{EnvLevyCharacteristics, EnvSampler, EnvironmentPath};
use crate::error::{Error, Result};
use crate::forward_sim::{generator_apply, ExpDecay, Identity, SimConfig, StepKernel, TestFunction};
use crate::mechanisms::{BranchingMechanism, ImmigrationMechanism};
use crate::rng::{substream, SeedTag, Stream, StreamKind};
use crate::stats::{MCEstimate, Moments};

/// Number of standard errors allowed between the two engines.
pub const Z_THRESHOLD: f64 = 4.0;

/// Environment, branching and (optionally) immigration mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Model {
    pub chars: EnvLevyCharacteristics,
    pub bm: BranchingMechanism,
    pub im: Option<ImmigrationMechanism>,
}

impl Model {
    pub fn new(chars: EnvLevyCharacteristics, bm: BranchingMechanism) -> Self {
        Self { chars, bm, im: None }
    }

    pub fn with_immigration(mut self, im: ImmigrationMechanism) -> Self {
        self.im = Some(im);
        self
    }

    /// ξ has no randomness, so one path stands for every draw.
    pub fn env_is_deterministic(&self) -> bool {
        self.chars.sigma == 0.0 && self.chars.nu.is_empty()
    }

    fn immigration(&self) -> Result<&ImmigrationMechanism> {
        self.im
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this operation needs an immigration mechanism".into()))
    }
}

/// Simulation grid, master seed and the numerical tolerance of the
/// backward engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Run {
    pub cfg: SimConfig,
    pub seed: u64,
    pub tol: f64,
}

impl Run {
    pub fn new(cfg: SimConfig, seed: u64, tol: f64) -> Result<Self> {
        cfg.validate()?;
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::InvalidArgument(format!("tol must lie in (0, 1), got {tol}")));
        }
        Ok(Self { cfg, seed, tol })
    }
}

/// Where the environment of a comparison comes from.
#[derive(Debug, Clone, Copy)]
pub enum Environments<'a> {
    /// One fixed path; only branching noise varies.
    Quenched(&'a EnvironmentPath),
    /// `n_env` forward environments with `n_paths` replicas each. The
    /// backward side uses `n_analytic` independent environments, or the
    /// forward ones (paired) when `n_analytic` is 0.
    Annealed { n_env: u64, n_analytic: u64 },
}

/// One forward-versus-backward comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawReport {
    pub operation: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    /// Backward-engine value.
    pub analytic: f64,
    /// Zero when the backward side is exact given its environment.
    pub analytic_stderr: f64,
    /// Forward-engine estimate.
    pub mc: MCEstimate,
    /// Standard error of mc - analytic.
    pub stderr: f64,
    pub z_score: f64,
    /// Numerical tolerance of the backward side, added to the statistical
    /// band so that zero-variance comparisons do not demand exact equality.
    pub tolerance: f64,
    /// |mc - analytic| ≤ 4 stderr + tolerance.
    pub pass: bool,
}

impl LawReport {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        operation: &str,
        seed: u64,
        params: BTreeMap<String, f64>,
        analytic: f64,
        analytic_stderr: f64,
        mc: MCEstimate,
        stderr: f64,
        tolerance: f64,
    ) -> Self {
        let diff = mc.value - analytic;
        let z_score = if stderr > 0.0 {
            diff / stderr
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        Self {
            operation: operation.to_string(),
            seed,
            params,
            analytic,
            analytic_stderr,
            mc,
            stderr,
            z_score,
            tolerance,
            pass: diff.abs() <= Z_THRESHOLD * stderr + tolerance,
        }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// f(0), …, f(n-1) on the pool, returned in index order. The first error
/// by index wins, whatever the scheduling.
fn par_map<T, F>(n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(f)
        .collect::<Vec<Result<T>>>()
        .into_iter()
        .collect()
}

/// Rows of per-column samples; a row is one path (quenched) or the mean
/// over the paths of one environment (annealed).
type Rows = Vec<Vec<f64>>;

fn column(rows: &[Vec<f64>], c: usize) -> Moments {
    rows.iter().map(|r| r[c]).collect()
}

fn column_estimate(rows: &[Vec<f64>], c: usize, per_row: u64) -> Result<MCEstimate> {
    let m = column(rows, c);
    let e = m.estimate()?;
    MCEstimate::new(e.value, e.stderr, m.n * per_row)
}

/// Standard error of the mean of a[·][ca] - b[·][cb] over shared rows.
fn paired_stderr(a: &[Vec<f64>], ca: usize, b: &[Vec<f64>], cb: usize) -> f64 {
    let m: Moments = a.iter().zip(b).map(|(x, y)| x[ca] - y[cb]).collect();
    (m.variance() / m.n as f64).sqrt()
}

fn check_counts(n_env: u64, n_paths: u64) -> Result<()> {
    if n_env < 2 || n_paths < 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 environments and 1 path each, got {n_env} × {n_paths}"
        )));
    }
    Ok(())
}

/// Backward-side functional of one environment, one value per column.
type Analytic<'a> = dyn Fn(&EnvironmentPath, usize) -> Result<Vec<f64>> + Sync + 'a;
/// One forward replica given the growth factors up to the horizon.
type Replica<'a> = dyn Fn(&[f64], &mut Stream, &mut [f64]) -> Result<()> + Sync + 'a;

struct Ensemble {
    forward: Rows,
    /// Backward values on the forward environments (annealed, paired).
    paired: Option<Rows>,
    per_row: u64,
}

#[allow(clippy::too_many_arguments)]
fn forward_ensemble(
    model: &Model,
    envs: Environments<'_>,
    horizon: f64,
    n_paths: u64,
    run: &Run,
    cols: usize,
    replica: &Replica<'_>,
    paired: Option<&Analytic<'_>>,
) -> Result<Ensemble> {
    let coupling = run.cfg.env_coupling;
    match envs {
        Environments::Quenched(env) => {
            if n_paths < 2 {
                return Err(Error::InvalidArgument("need at least 2 replicas".into()));
            }
            let ti = env.index_of(horizon)?;
            let growth = env.growth_factors(&model.chars, coupling)?;
            let growth = &growth[..ti];
            let forward = par_map(n_paths, |k| {
                let mut out = vec![0.0; cols];
                replica(growth, &mut substream(run.seed, StreamKind::Replica, k), &mut out)?;
                Ok(out)
            })?;
            Ok(Ensemble {
                forward,
                paired: None,
                per_row: 1,
            })
        }
        Environments::Annealed { n_env, n_analytic } => {
            check_counts(n_env, n_paths)?;
            let sampler = EnvSampler::new(&model.chars)?;
            let pair = if n_analytic == 0 { paired } else { None };
            let rows = par_map(n_env, |j| {
                let env = sampler.sample(horizon, run.cfg.dt, SeedTag::new(run.seed, StreamKind::Environment, j))?;
                let growth = sampler.growth_factors(&env, coupling);
                let mut sums = vec![0.0; cols];
                let mut out = vec![0.0; cols];
                for k in 0..n_paths {
                    let mut rng = substream(run.seed, StreamKind::Replica, j * n_paths + k);
                    replica(&growth, &mut rng, &mut out)?;
                    sums.iter_mut().zip(&out).for_each(|(s, o)| *s += o);
                }
                sums.iter_mut().for_each(|s| *s /= n_paths as f64);
                let analytic = match pair {
                    Some(f) => Some(f(&env, env.steps())?),
                    None => None,
                };
                Ok((sums, analytic))
            })?;
            let (forward, analytic): (Rows, Vec<Option<Vec<f64>>>) = rows.into_iter().unzip();
            let paired = analytic.into_iter().collect::<Option<Rows>>();
            Ok(Ensemble {
                forward,
                paired,
                per_row: n_paths,
            })
        }
    }
}

/// Backward values over `n` independent analytic environments on [0, horizon].
fn analytic_rows(model: &Model, n: u64, horizon: f64, dt: f64, seed: u64, f: &Analytic<'_>) -> Result<Rows> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 analytic environments, got {n}"
        )));
    }
    let sampler = EnvSampler::new(&model.chars)?;
    let draw = |j: u64| -> Result<Vec<f64>> {
        let env = sampler.sample(horizon, dt, SeedTag::new(seed, StreamKind::AnalyticEnvironment, j))?;
        f(&env, env.steps())
    };
    if model.env_is_deterministic() {
        let row = draw(0)?;
        return Ok(vec![row; n as usize]);
    }
    par_map(n, draw)
}

/// Column-by-column comparison of forward samples with backward values.
#[derive(Debug, Clone, Copy)]
struct Compared {
    analytic: f64,
    analytic_stderr: f64,
    mc: MCEstimate,
    stderr: f64,
}

#[allow(clippy::too_many_arguments)]
fn compare(
    model: &Model,
    envs: Environments<'_>,
    horizon: f64,
    n_paths: u64,
    run: &Run,
    cols: usize,
    replica: &Replica<'_>,
    analytic: &Analytic<'_>,
) -> Result<Vec<Compared>> {
    let ens = forward_ensemble(model, envs, horizon, n_paths, run, cols, replica, Some(analytic))?;
    let mut out = Vec::with_capacity(cols);
    match envs {
        Environments::Quenched(env) => {
            let values = analytic(env, env.index_of(horizon)?)?;
            for (c, &a) in values.iter().enumerate() {
                let mc = column_estimate(&ens.forward, c, ens.per_row)?;
                out.push(Compared {
                    analytic: a,
                    analytic_stderr: 0.0,
                    mc,
                    stderr: mc.stderr,
                });
            }
        }
        Environments::Annealed { n_analytic, .. } => {
            let (rows, paired) = match ens.paired {
                Some(rows) => (rows, true),
                None => (
                    analytic_rows(model, n_analytic, horizon, run.cfg.dt, run.seed, analytic)?,
                    false,
                ),
            };
            for c in 0..cols {
                let mc = column_estimate(&ens.forward, c, ens.per_row)?;
                let an = column(&rows, c).estimate()?;
                let stderr = if paired {
                    paired_stderr(&ens.forward, c, &rows, c)
                } else {
                    mc.stderr.hypot(an.stderr)
                };
                out.push(Compared {
                    analytic: an.value,
                    analytic_stderr: an.stderr,
                    mc,
                    stderr,
                });
            }
        }
    }
    Ok(out)
}

fn env_label(envs: Environments<'_>) -> &'static str {
    match envs {
        Environments::Quenched(_) => "quenched",
        Environments::Annealed { .. } => "annealed",
    }
}

fn check_lambdas(lams: &[f64]) -> Result<()> {
    if lams.is_empty() || lams.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "λ-grid must be nonempty and nonnegative, got {lams:?}"
        )));
    }
    Ok(())
}

fn check_state(x: f64) -> Result<()> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial state must be nonnegative, got {x}"
        )));
    }
    Ok(())
}

/// exp(-x0 v_{0,t}(λ) - ∫₀^t ψ(v_{s,t}(λ)) ds), or without the ψ-term.
fn laplace_functional(
    env: &EnvironmentPath,
    ti: usize,
    x0: f64,
    lam: f64,
    bm: &BranchingMechanism,
    im: Option<&ImmigrationMechanism>,
    tol: f64,
) -> Result<f64> {
    let t = env.time(ti);
    match im {
        Some(im) if !im.is_trivial() => {
            let curve = solve_v_curve(env, 0.0, t, lam, bm, tol)?;
            Ok((-x0 * curve.initial() - curve.integrate(|v| im.psi(v))?).exp())
        }
        _ => Ok((-x0 * solve_v(env, 0.0, t, lam, bm, tol)?).exp()),
    }
}

#[allow(clippy::too_many_arguments)]
fn laplace_reports(
    operation: &str,
    model: &Model,
    im: Option<&ImmigrationMechanism>,
    envs: Environments<'_>,
    x0: f64,
    t: f64,
    lams: &[f64],
    n_paths: u64,
    run: &Run,
) -> Result<Vec<LawReport>> {
    check_lambdas(lams)?;
    check_state(x0)?;
    let kernel = StepKernel::new(&model.bm, im, &run.cfg)?;
    let replica = |growth: &[f64], rng: &mut Stream, out: &mut [f64]| -> Result<()> {
        let x = kernel.terminal(x0, growth, rng)?;
        for (o, &l) in out.iter_mut().zip(lams) {
            *o = (-l * x).exp();
        }
        Ok(())
    };
    let solver_tol = 0.1 * run.tol;
    let analytic = |env: &EnvironmentPath, ti: usize| -> Result<Vec<f64>> {
        lams.iter()
            .map(|&l| laplace_functional(env, ti, x0, l, &model.bm, im, solver_tol))
            .collect()
    };
    let rows = compare(model, envs, t, n_paths, run, lams.len(), &replica, &analytic)?;
    Ok(rows
        .into_iter()
        .zip(lams)
        .map(|(c, &l)| {
            LawReport::assemble(
                &format!("{operation}/{}", env_label(envs)),
                run.seed,
                params(&[("lambda", l), ("t", t), ("x0", x0)]),
                c.analytic,
                c.analytic_stderr,
                c.mc,
                c.stderr,
                run.tol,
            )
        })
        .collect())
}

/// E^ξ[e^{-λX(t)}] on one path against exp(-x0 v_{0,t}(λ)), per λ.
pub fn quenched_laplace(
    model: &Model,
    env: &EnvironmentPath,
    x0: f64,
    t: f64,
    lams: &[f64],
    n_paths: u64,
    run: &Run,
) -> Result<Vec<LawReport>> {
    laplace_reports(
        "laplace",
        model,
        None,
        Environments::Quenched(env),
        x0,
        t,
        lams,
        n_paths,
        run,
    )
}

/// E[e^{-λX(t)}] against the environment average of exp(-x0 v_{0,t}(λ)).
#[allow(clippy::too_many_arguments)]
pub fn annealed_laplace(
    model: &Model,
    x0: f64,
    t: f64,
    lams: &[f64],
    n_env: u64,
    n_paths: u64,
    n_analytic: u64,
    run: &Run,
) -> Result<Vec<LawReport>> {
    let envs = Environments::Annealed { n_env, n_analytic };
    laplace_reports("laplace", model, None, envs, x0, t, lams, n_paths, run)
}

/// E[e^{-λY(t)}] for the process with immigration against
/// exp(-x0 v_{0,t}(λ) - ∫₀^t ψ(v_{s,t}(λ)) ds).
pub fn cbire_laplace(
    model: &Model,
    envs: Environments<'_>,
    x0: f64,
    t: f64,
    lams: &[f64],
    n_paths: u64,
    run: &Run,
) -> Result<Vec<LawReport>> {
    let im = model.immigration()?;
    laplace_reports("cbire_laplace", model, Some(im), envs, x0, t, lams, n_paths, run)
}

/// exp(-x0 ū_{0,t}), or 0 when Grey's condition fails.
fn extinction_probability(env: &EnvironmentPath, ti: usize, x0: f64, bm: &BranchingMechanism, tol: f64) -> Result<f64> {
    if x0 == 0.0 {
        return Ok(1.0);
    }
    if !bm.grows_superlinearly() {
        return Ok(0.0);
    }
    let u_bar = extinction_u_bar(env, env.time(ti), bm, tol)?.u_bar;
    Ok((-x0 * u_bar).exp())
}

/// P(X(t) = 0) against exp(-x0 ū_{0,t}). When Grey's condition fails the
/// backward value is 0 and the report passes only with no extinctions.
pub fn extinction_report(
    model: &Model,
    envs: Environments<'_>,
    x0: f64,
    t: f64,
    n_paths: u64,
    run: &Run,
) -> Result<LawReport> {
    check_state(x0)?;
    let kernel = StepKernel::new(&model.bm, None, &run.cfg)?;
    let replica = |growth: &[f64], rng: &mut Stream, out: &mut [f64]| -> Result<()> {
        out[0] = if kernel.terminal(x0, growth, rng)? == 0.0 {
            1.0
        } else {
            0.0
        };
        Ok(())
    };
    let analytic = |env: &EnvironmentPath, ti: usize| -> Result<Vec<f64>> {
        Ok(vec![extinction_probability(env, ti, x0, &model.bm, run.tol)?])
    };
    let c = compare(model, envs, t, n_paths, run, 1, &replica, &analytic)?[0];
    let tolerance = if model.bm.grows_superlinearly() { run.tol } else { 0.0 };
    Ok(LawReport::assemble(
        &format!("extinction/{}", env_label(envs)),
        run.seed,
        params(&[("t", t), ("x0", x0)]),
        c.analytic,
        c.analytic_stderr,
        c.mc,
        c.stderr,
        tolerance,
    ))
}

/// Coalescence of the monotone coupling from x ≤ y against exp(-(y-x) ū_{0,t}).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingReport {
    pub law: LawReport,
    /// Grid points at which lower ≤ upper was verified.
    pub grid_points_checked: u64,
    pub monotonicity_violations: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn strong_feller_gap(
    model: &Model,
    envs: Environments<'_>,
    x: f64,
    y: f64,
    t: f64,
    n_paths: u64,
    run: &Run,
) -> Result<CouplingReport> {
    check_state(x)?;
    if !(y >= x && y.is_finite()) {
        return Err(Error::InvalidArgument(format!("needs x ≤ y, got x = {x}, y = {y}")));
    }
    let kernel = StepKernel::new(&model.bm, None, &run.cfg)?;
    let replica = |growth: &[f64], rng: &mut Stream, out: &mut [f64]| -> Result<()> {
        let mut crossed = 0u64;
        let met = kernel.run_coupled(x, y, growth, rng, |_, lo, hi| {
            if lo > hi {
                crossed += 1;
            }
        })?;
        out[0] = if met.is_some() { 1.0 } else { 0.0 };
        out[1] = crossed as f64;
        Ok(())
    };
    let analytic = |env: &EnvironmentPath, ti: usize| -> Result<Vec<f64>> {
        Ok(vec![extinction_probability(env, ti, y - x, &model.bm, run.tol)?, 0.0])
    };
    let rows = compare(model, envs, t, n_paths, run, 2, &replica, &analytic)?;
    let c = rows[0];
    let replicas = c.mc.n;
    let steps = (t / run.cfg.dt).round() as u64;
    let violations = (rows[1].mc.value * replicas as f64).round() as u64;
    let tolerance = if model.bm.grows_superlinearly() { run.tol } else { 0.0 };
    Ok(CouplingReport {
        law: LawReport::assemble(
            &format!("coupling/{}", env_label(envs)),
            run.seed,
            params(&[("t", t), ("x", x), ("y", y)]),
            c.analytic,
            c.analytic_stderr,
            c.mc,
            c.stderr,
            tolerance,
        ),
        grid_points_checked: replicas * (steps + 1),
        monotonicity_violations: violations,
    })
}

/// P[exp(-x0 v_{0,t}(λ) - ∫₀^t φ₀'(v_{s,t}(λ)) ds)] over analytic environments.
pub fn sizebiased_laplace(model: &Model, x0: f64, t: f64, lam: f64, n_env: u64, run: &Run) -> Result<MCEstimate> {
    check_state(x0)?;
    check_lambdas(&[lam])?;
    let bm = &model.bm;
    let f = |env: &EnvironmentPath, ti: usize| -> Result<Vec<f64>> {
        let curve = solve_v_curve(env, 0.0, env.time(ti), lam, bm, 0.1 * run.tol)?;
        let drift = curve.integrate(|v| bm.phi0_prime(v))?;
        Ok(vec![(-x0 * curve.initial() - drift).exp()])
    };
    let rows = analytic_rows(model, n_env, t, run.cfg.dt, run.seed, &f)?;
    column(&rows, 0).estimate()
}

/// Laplace transform of the stationary law at λ: the environment average of
/// exp(-∫ ψ(v_{s,0}(λ)) ds) over a backward horizon T.
pub fn stationary_laplace(model: &Model, lam: f64, horizon: f64, n_env: u64, run: &Run) -> Result<MCEstimate> {
    let im = model.immigration()?;
    check_ergodic(&model.chars, &model.bm, im)?;
    check_lambdas(&[lam])?;
    let f = |env: &EnvironmentPath, _: usize| -> Result<Vec<f64>> {
        Ok(vec![(-stationary_exponent(
            env,
            &model.chars,
            lam,
            &model.bm,
            im,
            run.tol,
        )?)
        .exp()])
    };
    let rows = analytic_rows(model, n_env, horizon, run.cfg.dt, run.seed, &f)?;
    column(&rows, 0).estimate()
}

/// Long-run extinction probability P[exp(-x0 v̄)], v̄ = lim_t ū_{0,t}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalReport {
    pub estimate: MCEstimate,
    /// Estimate of P(X(t) = 0) at each ladder time; nondecreasing per path.
    pub ladder: Vec<(f64, MCEstimate)>,
    /// Extinction is certain by the parameters alone.
    pub certain_extinction: bool,
}

/// a₁ < b, or a₁ = b with a nondegenerate environment, so that
/// liminf (ξ(t) - bt) = -∞.
pub fn certain_extinction(chars: &EnvLevyCharacteristics, bm: &BranchingMechanism) -> bool {
    match chars.mean_xi1() {
        Ok(a1) => a1 < bm.b || (a1 == bm.b && (chars.sigma > 0.0 || !chars.nu.is_empty())),
        Err(_) => false,
    }
}

/// Climbs `t_ladder` until exp(-x0 ū_{0,t}) changes by at most tol on
/// every analytic environment.
pub fn survival_longrun(model: &Model, x0: f64, t_ladder: &[f64], n_env: u64, run: &Run) -> Result<SurvivalReport> {
    check_state(x0)?;
    if t_ladder.len() < 2 || t_ladder.windows(2).any(|w| !(w[1] > w[0])) || t_ladder[0] <= 0.0 {
        return Err(Error::InvalidArgument(
            "t-ladder must be positive and strictly increasing with ≥ 2 entries".into(),
        ));
    }
    if !model.bm.grows_superlinearly() {
        return Err(Error::ExtinctionDegenerate);
    }
    let horizon = *t_ladder.last().unwrap();
    let f = |env: &EnvironmentPath, _: usize| -> Result<Vec<f64>> {
        t_ladder
            .iter()
            .map(|&t| extinction_probability(env, env.index_of(t)?, x0, &model.bm, run.tol))
            .collect()
    };
    let rows = analytic_rows(model, n_env, horizon, run.cfg.dt, run.seed, &f)?;
    let k = t_ladder.len();
    let unsettled = rows.iter().filter(|r| (r[k - 1] - r[k - 2]).abs() > run.tol).count();
    let ladder = t_ladder
        .iter()
        .enumerate()
        .map(|(c, &t)| Ok((t, column(&rows, c).estimate()?)))
        .collect::<Result<Vec<_>>>()?;
    if unsettled > 0 {
        let lower = ladder[k - 1].1.value;
        return Err(Error::NoConvergence(format!(
            "{unsettled} of {n_env} paths still moving at t = {horizon}; long-run extinction probability lies in [{lower}, 1]"
        )));
    }
    Ok(SurvivalReport {
        estimate: ladder[k - 1].1,
        ladder,
        certain_extinction: certain_extinction(&model.chars, &model.bm),
    })
}

/// Forward Laplace transforms of Y(t) from several starting points against
/// the stationary value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicReport {
    pub lambda: f64,
    pub stationary: MCEstimate,
    /// One comparison per (x, t), ordered by x then t.
    pub rows: Vec<LawReport>,
    /// Gaps shrink along the t-ladder up to 4 standard errors.
    pub gap_nonincreasing: bool,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn ergodic_convergence(
    model: &Model,
    lam: f64,
    xs: &[f64],
    t_ladder: &[f64],
    stationary_horizon: f64,
    n_env: u64,
    n_paths: u64,
    n_analytic: u64,
    run: &Run,
) -> Result<ErgodicReport> {
    let im = model.immigration()?;
    check_ergodic(&model.chars, &model.bm, im)?;
    check_lambdas(&[lam])?;
    if xs.is_empty() || t_ladder.is_empty() {
        return Err(Error::InvalidArgument("x-list and t-ladder must be nonempty".into()));
    }
    xs.iter().try_for_each(|&x| check_state(x))?;
    let indices = t_ladder
        .iter()
        .map(|&t| {
            let k = (t / run.cfg.dt).round();
            if k < 1.0 || (k * run.cfg.dt - t).abs() > 1e-9 * t {
                Err(Error::GridMismatch(format!(
                    "t = {t} is not a positive multiple of dt = {}",
                    run.cfg.dt
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let t_max = t_ladder.iter().copied().fold(0.0, f64::max);
    let stationary = stationary_laplace(model, lam, stationary_horizon, n_analytic, run)?;

    let kernel = StepKernel::new(&model.bm, Some(im), &run.cfg)?;
    let nt = t_ladder.len();
    let replica = |growth: &[f64], rng: &mut Stream, out: &mut [f64]| -> Result<()> {
        for (xi, &x) in xs.iter().enumerate() {
            let slot = &mut out[xi * nt..(xi + 1) * nt];
            kernel.run(x, growth, rng, |i, y| {
                for (s, &k) in slot.iter_mut().zip(&indices) {
                    if k == i {
                        *s = (-lam * y).exp();
                    }
                }
            })?;
        }
        Ok(())
    };
    let envs = Environments::Annealed { n_env, n_analytic };
    let ens = forward_ensemble(model, envs, t_max, n_paths, run, xs.len() * nt, &replica, None)?;

    let mut rows = Vec::with_capacity(xs.len() * nt);
    let mut gap_nonincreasing = true;
    for (xi, &x) in xs.iter().enumerate() {
        let mut prev_gap = f64::INFINITY;
        for (ti, &t) in t_ladder.iter().enumerate() {
            let mc = column_estimate(&ens.forward, xi * nt + ti, ens.per_row)?;
            let stderr = mc.stderr.hypot(stationary.stderr);
            let gap = (mc.value - stationary.value).abs();
            if gap > prev_gap + Z_THRESHOLD * stderr + run.tol {
                gap_nonincreasing = false;
            }
            prev_gap = gap;
            rows.push(LawReport::assemble(
                "ergodic",
                run.seed,
                params(&[("lambda", lam), ("t", t), ("x0", x)]),
                stationary.value,
                stationary.stderr,
                mc,
                stderr,
                run.tol,
            ));
        }
    }
    // Starting points must agree with each other at the end of the ladder.
    let last = nt - 1;
    for xi in 1..xs.len() {
        let a = column(&ens.forward, last).mean();
        let b = column(&ens.forward, xi * nt + last).mean();
        let se = paired_stderr(&ens.forward, last, &ens.forward, xi * nt + last);
        if (a - b).abs() > Z_THRESHOLD * se + run.tol {
            return Err(Error::ErgodicityRefuted(format!(
                "at t = {t_max} the Laplace transform from x = {} is {a} but from x = {} is {b} (stderr {se})",
                xs[0], xs[xi]
            )));
        }
    }
    let ends_pass = (0..xs.len()).all(|xi| rows[xi * nt + last].pass);
    Ok(ErgodicReport {
        lambda: lam,
        stationary,
        rows,
        gap_nonincreasing,
        pass: ends_pass && gap_nonincreasing,
    })
}

/// Short-time difference quotient of E f(X_h) against A f(x).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorReport {
    pub law: LawReport,
    pub h: f64,
    pub relative_error: f64,
    pub max_relative_error: f64,
}

/// Estimates (E f(X_h) - f(x))/h for f(x) = e^{-λx} from one Euler step of
/// length h per replica, each with its own environment increment. The
/// linear part of f is integrated exactly, leaving
/// E[f(X_h) - f(x) - f'(x)(X_h - x)]/h + f'(x) A[id](x) to Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn generator_check(
    model: &Model,
    lam: f64,
    x: f64,
    h: f64,
    n_paths: u64,
    max_relative_error: f64,
    run: &Run,
) -> Result<GeneratorReport> {
    check_state(x)?;
    let mut cfg = run.cfg;
    cfg.dt = h;
    let kernel = StepKernel::new(&model.bm, model.im.as_ref(), &cfg)?;
    let sampler = EnvSampler::new(&model.chars)?;
    let f = ExpDecay { lambda: lam };
    let im = model.im.as_ref();
    let analytic = generator_apply(&model.bm, im, &model.chars, &f, x, 0.01 * run.tol)?;
    let drift = generator_apply(&model.bm, im, &model.chars, &Identity, x, 0.01 * run.tol)?;
    let f1 = f.d1(x);
    let samples = par_map(n_paths, |k| {
        let env = sampler.sample(h, h, SeedTag::new(run.seed, StreamKind::Environment, k))?;
        let growth = sampler.growth_factors(&env, cfg.env_coupling);
        let mut rng = substream(run.seed, StreamKind::Replica, k);
        let xh = kernel.step(x, growth[0], &mut rng)?;
        Ok(f.taylor_remainder(x, xh - x) / h + f1 * drift)
    })?;
    let mc = MCEstimate::from_samples(&samples)?;
    let tolerance = max_relative_error * analytic.abs();
    let mut law = LawReport::assemble(
        "generator_check",
        run.seed,
        params(&[("h", h), ("lambda", lam), ("x", x)]),
        analytic,
        0.0,
        mc,
        mc.stderr,
        tolerance,
    );
    let relative_error = (mc.value - analytic).abs() / analytic.abs();
    law.pass = relative_error < max_relative_error;
    Ok(GeneratorReport {
        law,
        h,
        relative_error,
        max_relative_error,
    })
}

/// Mean of e^{bt} Z(t) - Z(0) over quenched replicas.
pub fn martingale_check(
    model: &Model,
    env: &EnvironmentPath,
    x0: f64,
    t: f64,
    n_paths: u64,
    run: &Run,
) -> Result<LawReport> {
    check_state(x0)?;
    let kernel = StepKernel::new(&model.bm, None, &run.cfg)?;
    let ti = env.index_of(t)?;
    let scale = (model.bm.b * t - env.xi()[ti]).exp();
    let replica = |growth: &[f64], rng: &mut Stream, out: &mut [f64]| -> Result<()> {
        out[0] = scale * kernel.terminal(x0, growth, rng)? - x0;
        Ok(())
    };
    let ens = forward_ensemble(model, Environments::Quenched(env), t, n_paths, run, 1, &replica, None)?;
    let mc = column_estimate(&ens.forward, 0, ens.per_row)?;
    Ok(LawReport::assemble(
        "martingale",
        run.seed,
        params(&[("t", t), ("x0", x0)]),
        0.0,
        0.0,
        mc,
        mc.stderr,
        0.0,
    ))
}
