//! Forward simulation of the CBRE and CBIRE equations on the environment grid.
//!
//! One step from X = X(t_i):
//!
//! ```text
//! Y = X - b X dt + sqrt(2 c_eff X) ΔW + J [+ Δη]
//! X(t_{i+1}) = e^{Δξ_i} max(0, Y)          (exponential coupling)
//! X(t_{i+1}) = max(0, Y + X ΔL_i)          (linear coupling)
//! ```
//!
//! Branching jumps below eps_branch enter through c_eff = c + ½∫₀^eps z² m(dz).
//! Larger ones arrive as a Poisson number with mean X dt m(z > eps), less the
//! compensator X dt ∫_{z>eps} z m(dz). Immigration jumps below eps_branch
//! enter as their mean.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvCoupling, EnvLevyCharacteristics, EnvSampler, EnvironmentPath};
use crate::error::{Error, Result};
use crate::measures::{AbsRange, MeasureSpec};
use crate::mechanisms::{BranchingMechanism, ImmigrationMechanism};
use crate::rng::{normal, poisson, SeedTag, Stream};

const QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub eps_branch: f64,
    /// One environment path shared by all replicas.
    pub quenched: bool,
    pub overflow_guard: f64,
    pub absorb_at_zero: bool,
    pub env_coupling: EnvCoupling,
}

impl SimConfig {
    pub fn new(dt: f64) -> Result<Self> {
        let cfg = Self {
            dt,
            eps_branch: 0.01,
            quenched: true,
            overflow_guard: 1e12,
            absorb_at_zero: true,
            env_coupling: EnvCoupling::Exponential,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.eps_branch > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps_branch must be positive, got {}",
                self.eps_branch
            )));
        }
        if !(self.overflow_guard > 0.0) {
            return Err(Error::InvalidArgument("overflow_guard must be positive".into()));
        }
        Ok(())
    }

    fn check_grid(&self, env: &EnvironmentPath) -> Result<()> {
        if (env.dt() - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::GridMismatch(format!(
                "simulation dt = {} but environment dt = {}",
                self.dt,
                env.dt()
            )));
        }
        Ok(())
    }
}

/// Jump tail of a measure above a threshold, ready for sampling.
#[derive(Debug, Clone)]
struct JumpTail {
    measure: MeasureSpec,
    eps: f64,
    rate: f64,
    mean: f64,
}

impl JumpTail {
    fn new(measure: &MeasureSpec, eps: f64) -> Result<Self> {
        let (rate, mean) = if measure.is_empty() {
            (0.0, 0.0)
        } else {
            (
                measure.tail_mass(eps)?,
                measure.integrate_range(AbsRange::above(eps), |z| z, QUAD_TOL)?,
            )
        };
        Ok(Self {
            measure: measure.clone(),
            eps,
            rate,
            mean,
        })
    }

    /// Sum of a Poisson(intensity · rate) number of tail draws.
    fn draw_sum<R: Rng + ?Sized>(&self, intensity: f64, rng: &mut R) -> Result<f64> {
        let count = poisson(rng, intensity * self.rate);
        let mut total = 0.0;
        for _ in 0..count {
            total += self.measure.sample_tail(self.eps, rng)?;
        }
        Ok(total)
    }
}

/// Per-step transition of the population, built once per mechanism.
#[derive(Debug, Clone)]
pub struct StepKernel {
    b: f64,
    diffusion: f64,
    branching: JumpTail,
    immigration: Option<(f64, JumpTail)>,
    cfg: SimConfig,
}

impl StepKernel {
    pub fn new(bm: &BranchingMechanism, im: Option<&ImmigrationMechanism>, cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let eps = cfg.eps_branch;
        let c_eff = bm.c
            + 0.5
                * if bm.m.is_empty() {
                    0.0
                } else {
                    bm.small_jump_second_moment(eps)?
                };
        let immigration = match im {
            Some(im) if !im.is_trivial() => {
                let small_mean = if im.n.is_empty() { 0.0 } else { im.small_jump_mean(eps)? };
                Some((im.h + small_mean, JumpTail::new(&im.n, eps)?))
            }
            _ => None,
        };
        Ok(Self {
            b: bm.b,
            diffusion: (2.0 * c_eff).sqrt(),
            branching: JumpTail::new(&bm.m, eps)?,
            immigration,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn has_immigration(&self) -> bool {
        self.immigration.is_some()
    }

    /// Branching and immigration part of one step, before the environment.
    #[inline]
    fn population_step<R: Rng + ?Sized>(&self, x: f64, immigrate: bool, rng: &mut R) -> Result<f64> {
        let dt = self.cfg.dt;
        let mut y = x;
        if x > 0.0 {
            y -= self.b * x * dt;
            if self.diffusion > 0.0 {
                y += self.diffusion * (x * dt).sqrt() * normal(rng);
            }
            if self.branching.rate > 0.0 {
                y += self.branching.draw_sum(x * dt, rng)? - x * dt * self.branching.mean;
            }
        }
        if immigrate {
            if let Some((drift, tail)) = &self.immigration {
                y += drift * dt;
                if tail.rate > 0.0 {
                    y += tail.draw_sum(dt, rng)?;
                }
            }
        }
        Ok(y)
    }

    /// X(t_{i+1}) from X(t_i) given the environment factor of step i.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, x: f64, growth: f64, rng: &mut R) -> Result<f64> {
        self.step_with(x, growth, true, rng)
    }

    #[inline]
    fn step_with<R: Rng + ?Sized>(&self, x: f64, growth: f64, immigrate: bool, rng: &mut R) -> Result<f64> {
        let y = self.population_step(x, immigrate, rng)?;
        Ok(match self.cfg.env_coupling {
            EnvCoupling::Exponential => y.max(0.0) * growth,
            EnvCoupling::Linear => (y + x * (growth - 1.0)).max(0.0),
        })
    }

    /// Run from x0 over the first `steps` factors, reporting each state.
    pub fn run<R, F>(&self, x0: f64, growth: &[f64], rng: &mut R, mut observe: F) -> Result<f64>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, f64),
    {
        let mut x = x0;
        observe(0, x);
        for (i, &g) in growth.iter().enumerate() {
            if x == 0.0 && self.cfg.absorb_at_zero && self.immigration.is_none() {
                observe(i + 1, 0.0);
                continue;
            }
            x = self.step(x, g, rng)?;
            if !(x <= self.cfg.overflow_guard) {
                return Err(Error::PathExploded { step: i + 1 });
            }
            observe(i + 1, x);
        }
        Ok(x)
    }

    /// State at the end of `growth` only.
    pub fn terminal<R: Rng + ?Sized>(&self, x0: f64, growth: &[f64], rng: &mut R) -> Result<f64> {
        self.run(x0, growth, rng, |_, _| {})
    }

    /// Lower path from x0 and difference path from y0 - x0, driven by
    /// independent noises so the upper path x0 + difference is a CBRE path
    /// from y0. Returns the first step at which the difference is 0, if any.
    pub fn run_coupled<R, F>(
        &self,
        x0: f64,
        y0: f64,
        growth: &[f64],
        rng: &mut R,
        mut observe: F,
    ) -> Result<Option<usize>>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, f64, f64),
    {
        if x0 > y0 {
            return Err(Error::InvalidArgument(format!(
                "coupling needs x0 ≤ y0, got {x0} > {y0}"
            )));
        }
        let mut lower = x0;
        let mut diff = y0 - x0;
        let mut met = if diff == 0.0 { Some(0) } else { None };
        observe(0, lower, lower + diff);
        for (i, &g) in growth.iter().enumerate() {
            if lower > 0.0 || !self.cfg.absorb_at_zero {
                lower = self.step(lower, g, rng)?;
            }
            if diff > 0.0 {
                diff = self.step_with(diff, g, false, rng)?;
                if diff == 0.0 && met.is_none() {
                    met = Some(i + 1);
                }
            }
            let upper = lower + diff;
            if !(upper <= self.cfg.overflow_guard) {
                return Err(Error::PathExploded { step: i + 1 });
            }
            if upper < lower {
                return Err(Error::CouplingFault { step: i + 1 });
            }
            observe(i + 1, lower, upper);
        }
        Ok(met)
    }
}

/// A simulated population path on the environment grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessPath {
    pub dt: f64,
    pub states: Vec<f64>,
    pub extinction_time: Option<f64>,
    pub env_tag: Option<SeedTag>,
}

impl ProcessPath {
    fn from_states(dt: f64, states: Vec<f64>, env: &EnvironmentPath) -> Self {
        let extinction_time = states.iter().position(|&x| x == 0.0).map(|i| i as f64 * dt);
        Self {
            dt,
            states,
            extinction_time,
            env_tag: env.seed_tag(),
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.states.len()).map(|i| i as f64 * self.dt)
    }

    /// CSV with header `t,state`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,state")?;
        for (t, x) in self.times().zip(&self.states) {
            writeln!(w, "{t},{x}")?;
        }
        Ok(())
    }
}

fn path_with(
    kernel: &StepKernel,
    x0: f64,
    env: &EnvironmentPath,
    chars: &EnvLevyCharacteristics,
    stream: &mut Stream,
) -> Result<ProcessPath> {
    kernel.cfg.check_grid(env)?;
    if !(x0 >= 0.0 && x0.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial state must be nonnegative, got {x0}"
        )));
    }
    let growth = EnvSampler::new(chars)?.growth_factors(env, kernel.cfg.env_coupling);
    let mut states = vec![0.0; growth.len() + 1];
    kernel.run(x0, &growth, stream, |i, x| states[i] = x)?;
    Ok(ProcessPath::from_states(kernel.cfg.dt, states, env))
}

pub fn simulate_cbre(
    x0: f64,
    bm: &BranchingMechanism,
    env: &EnvironmentPath,
    chars: &EnvLevyCharacteristics,
    cfg: &SimConfig,
    stream: &mut Stream,
) -> Result<ProcessPath> {
    path_with(&StepKernel::new(bm, None, cfg)?, x0, env, chars, stream)
}

pub fn simulate_cbire(
    y0: f64,
    bm: &BranchingMechanism,
    im: &ImmigrationMechanism,
    env: &EnvironmentPath,
    chars: &EnvLevyCharacteristics,
    cfg: &SimConfig,
    stream: &mut Stream,
) -> Result<ProcessPath> {
    path_with(&StepKernel::new(bm, Some(im), cfg)?, y0, env, chars, stream)
}

/// Monotone coupling of CBRE paths from x0 ≤ y0 on one environment.
pub fn simulate_coupled(
    x0: f64,
    y0: f64,
    bm: &BranchingMechanism,
    env: &EnvironmentPath,
    chars: &EnvLevyCharacteristics,
    cfg: &SimConfig,
    stream: &mut Stream,
) -> Result<(ProcessPath, ProcessPath)> {
    let kernel = StepKernel::new(bm, None, cfg)?;
    cfg.check_grid(env)?;
    let growth = EnvSampler::new(chars)?.growth_factors(env, cfg.env_coupling);
    let mut lower = vec![0.0; growth.len() + 1];
    let mut upper = vec![0.0; growth.len() + 1];
    kernel.run_coupled(x0, y0, &growth, stream, |i, l, u| {
        lower[i] = l;
        upper[i] = u;
    })?;
    Ok((
        ProcessPath::from_states(cfg.dt, lower, env),
        ProcessPath::from_states(cfg.dt, upper, env),
    ))
}

/// Z(t_i) = X(t_i) e^{-ξ(t_i)}.
pub fn z_transform(path: &ProcessPath, env: &EnvironmentPath) -> Result<Vec<f64>> {
    if path.states.len() > env.xi().len() || (path.dt - env.dt()).abs() > 1e-12 * path.dt {
        return Err(Error::GridMismatch("process path and environment grids differ".into()));
    }
    Ok(path
        .states
        .iter()
        .zip(env.xi())
        .map(|(x, xi)| x * (-xi).exp())
        .collect())
}

/// First grid time with state exactly 0.
pub fn hitting_time_zero(path: &ProcessPath) -> Option<f64> {
    path.extinction_time
}

/// A twice-differentiable test function for the generator.
pub trait TestFunction: Sync {
    fn value(&self, x: f64) -> f64;
    fn d1(&self, x: f64) -> f64;
    fn d2(&self, x: f64) -> f64;

    /// f(x + d) - f(x) - d f'(x), free of cancellation where possible.
    fn taylor_remainder(&self, x: f64, d: f64) -> f64 {
        if d.abs() < 1e-4 * (1.0 + x.abs()) {
            0.5 * d * d * self.d2(x)
        } else {
            self.value(x + d) - self.value(x) - d * self.d1(x)
        }
    }
}

/// f(x) = e^{-λx}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpDecay {
    pub lambda: f64,
}

impl TestFunction for ExpDecay {
    fn value(&self, x: f64) -> f64 {
        (-self.lambda * x).exp()
    }
    fn d1(&self, x: f64) -> f64 {
        -self.lambda * self.value(x)
    }
    fn d2(&self, x: f64) -> f64 {
        self.lambda * self.lambda * self.value(x)
    }
    fn taylor_remainder(&self, x: f64, d: f64) -> f64 {
        let s = self.lambda * d;
        let defect = if s.abs() < 1e-3 {
            s * s * (0.5 - s / 6.0 + s * s / 24.0)
        } else {
            (-s).exp_m1() + s
        };
        self.value(x) * defect
    }
}

/// f(x) = x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity;

impl TestFunction for Identity {
    fn value(&self, x: f64) -> f64 {
        x
    }
    fn d1(&self, _: f64) -> f64 {
        1.0
    }
    fn d2(&self, _: f64) -> f64 {
        0.0
    }
    fn taylor_remainder(&self, _: f64, _: f64) -> f64 {
        0.0
    }
}

/// f(x) = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constant;

impl TestFunction for Constant {
    fn value(&self, _: f64) -> f64 {
        1.0
    }
    fn d1(&self, _: f64) -> f64 {
        0.0
    }
    fn d2(&self, _: f64) -> f64 {
        0.0
    }
    fn taylor_remainder(&self, _: f64, _: f64) -> f64 {
        0.0
    }
}

/// The generator of the CBRE (plus immigration, when given) applied to f at x:
///
/// ```text
/// Af(x) = (β-b) x f' + c x f'' + x ∫ [f(x+z) - f(x) - z f'(x)] m(dz)
///       + σ²/2 x² f'' + ∫_{[-1,1]} [f(x e^z) - f(x) - x(e^z-1) f'(x)] ν(dz)
///       + ∫_{|z|>1} [f(x e^z) - f(x)] ν(dz)
///       + h f' + ∫ [f(x+u) - f(x)] n(du)
/// ```
pub fn generator_apply(
    bm: &BranchingMechanism,
    im: Option<&ImmigrationMechanism>,
    chars: &EnvLevyCharacteristics,
    f: &dyn TestFunction,
    x: f64,
    tol: f64,
) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("state must be nonnegative, got {x}")));
    }
    let (f0, f1, f2) = (f.value(x), f.d1(x), f.d2(x));
    let beta = chars.beta()?;
    let mut total = (beta - bm.b) * x * f1 + bm.c * x * f2 + 0.5 * chars.sigma * chars.sigma * x * x * f2;
    if !bm.m.is_empty() && x > 0.0 {
        total += x * bm.m.integrate(|z| f.taylor_remainder(x, z), tol)?;
    }
    if !chars.nu.is_empty() {
        total += chars
            .nu
            .integrate_range(AbsRange::up_to(1.0), |z| f.taylor_remainder(x, x * z.exp_m1()), tol)?;
        total += chars
            .nu
            .integrate_range(AbsRange::above(1.0), |z| f.value(x * z.exp()) - f0, tol)?;
    }
    if let Some(im) = im {
        total += im.h * f1;
        if !im.n.is_empty() {
            total += im.n.integrate(|u| f.value(x + u) - f0, tol)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{degenerate_env, simulate_env};
    use crate::measures::{Component, MeasureKind, Sign};
    use crate::rng::{substream, StreamKind};
    use crate::stats::Moments;

    fn quad(b: f64, c: f64) -> BranchingMechanism {
        BranchingMechanism::quadratic(b, c).unwrap()
    }

    fn env_chars() -> EnvLevyCharacteristics {
        EnvLevyCharacteristics::new(
            0.0,
            0.4,
            MeasureSpec::new(
                MeasureKind::Env,
                vec![Component::Atom {
                    location: -0.5,
                    mass: 0.5,
                }],
            )
            .unwrap(),
            0.1,
        )
        .unwrap()
    }

    fn stream(i: u64) -> Stream {
        substream(31, StreamKind::Replica, i)
    }

    fn jumpy_bm() -> BranchingMechanism {
        BranchingMechanism::new(
            0.2,
            0.5,
            MeasureSpec::new(
                MeasureKind::Branching,
                vec![Component::Exponential {
                    total_mass: 2.0,
                    rate: 3.0,
                    sign: Sign::Positive,
                }],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_is_absorbing() {
        let chars = env_chars();
        let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(1, StreamKind::Environment, 0)).unwrap();
        let cfg = SimConfig::new(0.01).unwrap();
        let p = simulate_cbre(0.0, &jumpy_bm(), &env, &chars, &cfg, &mut stream(0)).unwrap();
        assert!(p.states.iter().all(|&x| x == 0.0));
        assert_eq!(hitting_time_zero(&p), Some(0.0));
    }

    #[test]
    fn linear_ode_limit() {
        let env = degenerate_env(1.0, 0.001).unwrap();
        let chars = EnvLevyCharacteristics::degenerate();
        let cfg = SimConfig::new(0.001).unwrap();
        let p = simulate_cbre(2.0, &quad(0.7, 0.0), &env, &chars, &cfg, &mut stream(0)).unwrap();
        let end = *p.states.last().unwrap();
        assert!((end - 2.0 * (-0.7f64).exp()).abs() < 2.0 * 0.001);
        assert_eq!(hitting_time_zero(&p), None);
        assert_eq!(z_transform(&p, &env).unwrap(), p.states);
    }

    #[test]
    fn pure_drift_immigration() {
        let env = degenerate_env(2.0, 0.01).unwrap();
        let chars = EnvLevyCharacteristics::degenerate();
        let cfg = SimConfig::new(0.01).unwrap();
        let im = ImmigrationMechanism::drift(1.0).unwrap();
        let p = simulate_cbire(0.5, &quad(0.0, 0.0), &im, &env, &chars, &cfg, &mut stream(0)).unwrap();
        for (t, y) in p.times().zip(&p.states) {
            assert!((y - (0.5 + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_immigration_matches_cbre() {
        let chars = env_chars();
        let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(1, StreamKind::Environment, 3)).unwrap();
        let cfg = SimConfig::new(0.01).unwrap();
        let a = simulate_cbre(1.5, &jumpy_bm(), &env, &chars, &cfg, &mut stream(4)).unwrap();
        let b = simulate_cbire(
            1.5,
            &jumpy_bm(),
            &ImmigrationMechanism::none(),
            &env,
            &chars,
            &cfg,
            &mut stream(4),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn z_of_zero_path() {
        let chars = env_chars();
        let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(1, StreamKind::Environment, 0)).unwrap();
        let cfg = SimConfig::new(0.01).unwrap();
        let p = simulate_cbre(0.0, &quad(0.0, 1.0), &env, &chars, &cfg, &mut stream(0)).unwrap();
        assert!(z_transform(&p, &env).unwrap().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn grid_mismatch_detected() {
        let env = degenerate_env(1.0, 0.01).unwrap();
        let cfg = SimConfig::new(0.02).unwrap();
        assert!(matches!(
            simulate_cbre(
                1.0,
                &quad(0.0, 1.0),
                &env,
                &EnvLevyCharacteristics::degenerate(),
                &cfg,
                &mut stream(0)
            ),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn explosion_is_reported() {
        let env = degenerate_env(10.0, 0.01).unwrap();
        let mut cfg = SimConfig::new(0.01).unwrap();
        cfg.overflow_guard = 100.0;
        let res = simulate_cbre(
            1.0,
            &quad(-1.0, 0.0),
            &env,
            &EnvLevyCharacteristics::degenerate(),
            &cfg,
            &mut stream(0),
        );
        assert!(matches!(res, Err(Error::PathExploded { .. })));
    }

    #[test]
    fn coupling_examples() {
        let chars = env_chars();
        let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(2, StreamKind::Environment, 0)).unwrap();
        let cfg = SimConfig::new(0.01).unwrap();
        let bm = jumpy_bm();
        let (lo, hi) = simulate_coupled(1.0, 1.0, &bm, &env, &chars, &cfg, &mut stream(0)).unwrap();
        assert_eq!(lo, hi);
        let (lo, hi) = simulate_coupled(0.0, 2.0, &bm, &env, &chars, &cfg, &mut stream(1)).unwrap();
        assert!(lo.states.iter().all(|&x| x == 0.0));
        assert!(hi.states[0] == 2.0);
        for seed in 0..200 {
            let (lo, hi) = simulate_coupled(0.5, 1.5, &bm, &env, &chars, &cfg, &mut stream(seed)).unwrap();
            assert!(lo.states.iter().zip(&hi.states).all(|(l, u)| l <= u));
        }
        assert!(simulate_coupled(2.0, 1.0, &bm, &env, &chars, &cfg, &mut stream(0)).is_err());
    }

    #[test]
    fn quenched_martingale_of_z() {
        // b = 0: Z = X e^{-ξ} has constant mean given the environment
        let chars = env_chars();
        let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(5, StreamKind::Environment, 0)).unwrap();
        let cfg = SimConfig::new(0.01).unwrap();
        let bm = BranchingMechanism::new(0.0, 0.5, jumpy_bm().m).unwrap();
        let kernel = StepKernel::new(&bm, None, &cfg).unwrap();
        let growth = env.growth_factors(&chars, cfg.env_coupling).unwrap();
        let xi_end = *env.xi().last().unwrap();
        let m: Moments = (0..20_000)
            .map(|i| kernel.terminal(1.0, &growth, &mut stream(i)).unwrap() * (-xi_end).exp())
            .collect();
        let e = m.estimate().unwrap();
        assert!((e.value - 1.0).abs() < 4.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn quenched_branching_property() {
        let chars = env_chars();
        let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(6, StreamKind::Environment, 0)).unwrap();
        let cfg = SimConfig::new(0.01).unwrap();
        let kernel = StepKernel::new(&jumpy_bm(), None, &cfg).unwrap();
        let growth = env.growth_factors(&chars, cfg.env_coupling).unwrap();
        let n = 10_000u64;
        let lam = 0.8;
        let sum: Vec<f64> = (0..n)
            .map(|i| {
                let a = kernel.terminal(0.4, &growth, &mut stream(2 * i)).unwrap();
                let b = kernel.terminal(0.8, &growth, &mut stream(2 * i + 1)).unwrap();
                (-lam * (a + b)).exp()
            })
            .collect();
        let single: Vec<f64> = (0..n)
            .map(|i| (-lam * kernel.terminal(1.2, &growth, &mut stream(10 * n + i)).unwrap()).exp())
            .collect();
        let a = crate::stats::MCEstimate::from_samples(&sum).unwrap();
        let b = crate::stats::MCEstimate::from_samples(&single).unwrap();
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 4.0 * se, "{a:?} {b:?}");
    }

    #[test]
    fn generator_examples() {
        let bm = jumpy_bm();
        let chars = env_chars();
        assert_eq!(generator_apply(&bm, None, &chars, &Constant, 1.3, 1e-10).unwrap(), 0.0);
        let plain = EnvLevyCharacteristics::degenerate();
        let lin = quad(0.7, 0.4);
        let v = generator_apply(&lin, None, &plain, &Identity, 2.0, 1e-10).unwrap();
        assert!((v + 1.4).abs() < 1e-14);
        let im = ImmigrationMechanism::drift(0.5).unwrap();
        let v = generator_apply(&lin, Some(&im), &plain, &Identity, 2.0, 1e-10).unwrap();
        assert!((v + 0.9).abs() < 1e-14);
    }

    #[test]
    fn generator_on_exponential_matches_laplace_exponent() {
        // Without environment, A e^{-λx} = x φ(λ) e^{-λx}.
        let bm = jumpy_bm();
        let plain = EnvLevyCharacteristics::degenerate();
        for &(x, lam) in &[(1.0, 1.0), (0.3, 4.0), (2.0, 0.1)] {
            let f = ExpDecay { lambda: lam };
            let a = generator_apply(&bm, None, &plain, &f, x, 1e-12).unwrap();
            let exact = x * bm.phi(lam).unwrap() * f.value(x);
            assert!((a - exact).abs() < 1e-9 * exact.abs(), "{a} vs {exact}");
        }
    }

    #[test]
    fn weak_convergence_towards_backward_value() {
        use crate::cumulant::solve_v;
        let chars = env_chars();
        let coarse = simulate_env(&chars, 1.0, 0.04, SeedTag::new(8, StreamKind::Environment, 0)).unwrap();
        let mut refine = substream(8, StreamKind::Refinement, 0);
        let bm = quad(0.0, 1.0);
        let mut errors = Vec::new();
        let mut env = coarse;
        for _ in 0..3 {
            let cfg = SimConfig::new(env.dt()).unwrap();
            let kernel = StepKernel::new(&bm, None, &cfg).unwrap();
            let growth = env.growth_factors(&chars, cfg.env_coupling).unwrap();
            let exact = (-solve_v(&env, 0.0, 1.0, 1.0, &bm, 1e-10).unwrap()).exp();
            let m: Moments = (0..40_000)
                .map(|i| (-kernel.terminal(1.0, &growth, &mut stream(i)).unwrap()).exp())
                .collect();
            errors.push((m.mean() - exact, m.estimate().unwrap().stderr));
            env = env.refine(&chars, &mut refine).unwrap();
        }
        // every level agrees with its backward value; the bias is below noise
        for (err, se) in &errors {
            assert!(err.abs() < 4.0 * se + 0.002, "{errors:?}");
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn paths_are_nonnegative_and_absorbed(seed in 0u64..10_000, x0 in 0.0f64..3.0) {
                let chars = env_chars();
                let env = simulate_env(&chars, 2.0, 0.01, SeedTag::new(seed, StreamKind::Environment, 0)).unwrap();
                let cfg = SimConfig::new(0.01).unwrap();
                let p = simulate_cbre(x0, &jumpy_bm(), &env, &chars, &cfg, &mut stream(seed)).unwrap();
                prop_assert!(p.states.iter().all(|&x| x >= 0.0));
                if let Some(t) = p.extinction_time {
                    let k = (t / 0.01).round() as usize;
                    prop_assert!(p.states[k..].iter().all(|&x| x == 0.0));
                }
            }

            #[test]
            fn coupling_is_monotone(seed in 0u64..10_000, x0 in 0.0f64..2.0, d in 0.0f64..2.0) {
                let chars = env_chars();
                let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(seed, StreamKind::Environment, 0)).unwrap();
                let cfg = SimConfig::new(0.01).unwrap();
                let (lo, hi) = simulate_coupled(x0, x0 + d, &jumpy_bm(), &env, &chars, &cfg, &mut stream(seed)).unwrap();
                prop_assert!(lo.states.iter().zip(&hi.states).all(|(l, u)| l <= u));
            }

            #[test]
            fn deterministic_given_seed(seed in 0u64..10_000) {
                let chars = env_chars();
                let env = simulate_env(&chars, 1.0, 0.01, SeedTag::new(seed, StreamKind::Environment, 0)).unwrap();
                let cfg = SimConfig::new(0.01).unwrap();
                let a = simulate_cbre(1.0, &jumpy_bm(), &env, &chars, &cfg, &mut stream(seed)).unwrap();
                let b = simulate_cbre(1.0, &jumpy_bm(), &env, &chars, &cfg, &mut stream(seed)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
