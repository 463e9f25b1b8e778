//! Environment Lévy processes ξ and L on a uniform grid.
//!
//! ```text
//! ξ(t) = a t + σ B(t) + ∫∫_{|z|≤1} z Ñ(ds,dz) + ∫∫_{|z|>1} z N(ds,dz)
//! L(t) = β t + σ B(t) + ∫∫_{|z|≤1} (e^z-1) Ñ(ds,dz) + ∫∫_{|z|>1} (e^z-1) N(ds,dz)
//! ```
//!
//! Jumps with |z| > eps_env are simulated exactly and kept in a ledger.
//! Compensated jumps below eps_env are replaced by a Gaussian increment of
//! matched variance. L is never simulated on its own: its increments are
//! rebuilt from the noises stored with ξ.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{AbsRange, MeasureKind, MeasureSpec};
use crate::rng::{normal, SeedTag, Stream};

const QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvLevyCharacteristics {
    pub a: f64,
    pub sigma: f64,
    pub nu: MeasureSpec,
    pub eps_env: f64,
}

impl EnvLevyCharacteristics {
    pub fn new(a: f64, sigma: f64, nu: MeasureSpec, eps_env: f64) -> Result<Self> {
        if !a.is_finite() {
            return Err(Error::InvalidArgument(format!("a must be finite, got {a}")));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        if !(eps_env > 0.0 && eps_env <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eps_env must lie in (0, 1], got {eps_env}"
            )));
        }
        if nu.kind() != MeasureKind::Env {
            return Err(Error::InvalidMeasure(format!(
                "environment needs an env measure, got {:?}",
                nu.kind()
            )));
        }
        Ok(Self { a, sigma, nu, eps_env })
    }

    /// ξ(t) = a t + σ B(t).
    pub fn brownian(a: f64, sigma: f64) -> Result<Self> {
        Self::new(a, sigma, MeasureSpec::empty(MeasureKind::Env), 1.0)
    }

    /// ξ ≡ 0.
    pub fn degenerate() -> Self {
        Self::brownian(0.0, 0.0).expect("zero coefficients are valid")
    }

    /// β = a + σ²/2 + ∫_{[-1,1]} (e^z - 1 - z) ν(dz).
    pub fn beta(&self) -> Result<f64> {
        let correction = self
            .nu
            .integrate_range(AbsRange::up_to(1.0), |z| z.exp_m1() - z, QUAD_TOL)?;
        Ok(self.a + 0.5 * self.sigma * self.sigma + correction)
    }

    /// a₁ = E ξ(1) = a + ∫_{|z|>1} z ν(dz).
    pub fn mean_xi1(&self) -> Result<f64> {
        if !self.nu.has_large_jump_mean() {
            return Err(Error::MomentUndefined);
        }
        let large = self.nu.integrate_range(AbsRange::above(1.0), |z| z, QUAD_TOL)?;
        Ok(self.a + large)
    }

    pub(crate) fn step_model(&self) -> Result<StepModel> {
        let eps = self.eps_env;
        let small_var = self.nu.integrate_range(AbsRange::up_to(eps), |z| z * z, QUAD_TOL)?;
        let medium = AbsRange::new(eps, 1.0);
        Ok(StepModel {
            a: self.a,
            sigma: self.sigma,
            small_sd: small_var.sqrt(),
            big_rate: if self.nu.is_empty() {
                0.0
            } else {
                self.nu.tail_mass(eps)?
            },
            compensator: self.nu.integrate_range(medium, |z| z, QUAD_TOL)?,
            compensator_l: self.nu.integrate_range(medium, |z| z.exp_m1(), QUAD_TOL)?,
            beta: self.beta()?,
        })
    }
}

/// Per-step constants derived from the characteristics.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepModel {
    a: f64,
    sigma: f64,
    /// sqrt of ∫_{|z|≤eps} z² ν(dz).
    small_sd: f64,
    /// ν(|z| > eps).
    big_rate: f64,
    /// ∫_{eps<|z|≤1} z ν(dz).
    compensator: f64,
    /// ∫_{eps<|z|≤1} (e^z - 1) ν(dz).
    compensator_l: f64,
    beta: f64,
}

impl StepModel {
    #[inline]
    fn xi_increment(&self, dt: f64, d_b: f64, small: f64, jump_sum: f64) -> f64 {
        self.a * dt + self.sigma * d_b + small + jump_sum - dt * self.compensator
    }
}

/// One jump of ξ with |z| > eps_env.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerJump {
    pub time: f64,
    /// Grid step i with t_i < time ≤ t_{i+1}.
    pub step: usize,
    pub z: f64,
}

/// How the environment acts on the population over one grid step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvCoupling {
    /// Multiply by e^{ξ(t_{i+1}) - ξ(t_i)}; exact for the piecewise-constant
    /// environment the backward solver sees.
    #[default]
    Exponential,
    /// Add X·ΔL_i, the first-order Euler term.
    Linear,
}

/// One realized path of ξ. ξ is right-continuous and, between grid points,
/// held at its value at the left grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvironmentPath {
    dt: f64,
    xi: Vec<f64>,
    d_b: Vec<f64>,
    small: Vec<f64>,
    big_jumps: Vec<LedgerJump>,
    /// big_jumps[jump_start[i]..jump_start[i+1]] fall in step i.
    jump_start: Vec<usize>,
    seed_tag: Option<SeedTag>,
}

fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
    }
    if !(dt > 0.0 && dt <= t_end) {
        return Err(Error::InvalidArgument(format!(
            "step must lie in (0, T], got dt = {dt}, T = {t_end}"
        )));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end {
        return Err(Error::GridMismatch(format!("dt = {dt} does not divide T = {t_end}")));
    }
    Ok(n as usize)
}

/// Characteristics with their per-step integrals evaluated once, for
/// drawing many paths.
#[derive(Debug, Clone)]
pub struct EnvSampler {
    chars: EnvLevyCharacteristics,
    model: StepModel,
}

impl EnvSampler {
    pub fn new(chars: &EnvLevyCharacteristics) -> Result<Self> {
        Ok(Self {
            chars: chars.clone(),
            model: chars.step_model()?,
        })
    }

    pub fn chars(&self) -> &EnvLevyCharacteristics {
        &self.chars
    }

    pub fn sample(&self, t_end: f64, dt: f64, tag: SeedTag) -> Result<EnvironmentPath> {
        let n = step_count(t_end, dt)?;
        let model = &self.model;
        let chars = &self.chars;
        let mut rng = tag.stream();
        let sqrt_dt = dt.sqrt();
        let mut xi = Vec::with_capacity(n + 1);
        let mut d_b = Vec::with_capacity(n);
        let mut small = Vec::with_capacity(n);
        let mut big_jumps = Vec::new();
        let mut jump_start = Vec::with_capacity(n + 1);
        xi.push(0.0);
        for i in 0..n {
            jump_start.push(big_jumps.len());
            let db = if model.sigma > 0.0 {
                sqrt_dt * normal(&mut rng)
            } else {
                0.0
            };
            let sm = if model.small_sd > 0.0 {
                model.small_sd * sqrt_dt * normal(&mut rng)
            } else {
                0.0
            };
            let mut jump_sum = 0.0;
            if model.big_rate > 0.0 {
                let count = crate::rng::poisson(&mut rng, model.big_rate * dt);
                let t0 = i as f64 * dt;
                let mut step_jumps = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let offset = dt * (1.0 - rng.random::<f64>());
                    let z = chars.nu.sample_tail(chars.eps_env, &mut rng)?;
                    step_jumps.push(LedgerJump {
                        time: t0 + offset,
                        step: i,
                        z,
                    });
                }
                step_jumps.sort_by(|p, q| p.time.total_cmp(&q.time));
                for j in step_jumps {
                    jump_sum += j.z;
                    big_jumps.push(j);
                }
            }
            d_b.push(db);
            small.push(sm);
            xi.push(xi[i] + model.xi_increment(dt, db, sm, jump_sum));
        }
        jump_start.push(big_jumps.len());
        Ok(EnvironmentPath {
            dt,
            xi,
            d_b,
            small,
            big_jumps,
            jump_start,
            seed_tag: Some(tag),
        })
    }

    /// All ΔL_i along `path`.
    pub fn l_increments(&self, path: &EnvironmentPath) -> Vec<f64> {
        (0..path.steps())
            .map(|i| path.l_increment_with(&self.model, i))
            .collect()
    }

    /// Per-step multiplier applied to the population at t_{i+1}.
    pub fn growth_factors(&self, path: &EnvironmentPath, coupling: EnvCoupling) -> Vec<f64> {
        match coupling {
            EnvCoupling::Exponential => path.xi.windows(2).map(|w| (w[1] - w[0]).exp()).collect(),
            EnvCoupling::Linear => self.l_increments(path).into_iter().map(|dl| 1.0 + dl).collect(),
        }
    }
}

/// Draw one path of ξ on the grid of step `dt` over [0, t_end].
pub fn simulate_env(chars: &EnvLevyCharacteristics, t_end: f64, dt: f64, tag: SeedTag) -> Result<EnvironmentPath> {
    EnvSampler::new(chars)?.sample(t_end, dt, tag)
}

/// The path with ξ ≡ 0 and no noise.
pub fn degenerate_env(t_end: f64, dt: f64) -> Result<EnvironmentPath> {
    let n = step_count(t_end, dt)?;
    Ok(EnvironmentPath {
        dt,
        xi: vec![0.0; n + 1],
        d_b: vec![0.0; n],
        small: vec![0.0; n],
        big_jumps: Vec::new(),
        jump_start: vec![0; n + 1],
        seed_tag: None,
    })
}

impl EnvironmentPath {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps()).map(|i| self.time(i))
    }

    /// ξ(t_i), i = 0..=N.
    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn brownian_increments(&self) -> &[f64] {
        &self.d_b
    }

    pub fn big_jumps(&self) -> &[LedgerJump] {
        &self.big_jumps
    }

    pub fn jumps_in_step(&self, i: usize) -> &[LedgerJump] {
        &self.big_jumps[self.jump_start[i]..self.jump_start[i + 1]]
    }

    pub fn seed_tag(&self) -> Option<SeedTag> {
        self.seed_tag
    }

    /// Grid index of time `t`, which must sit on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if !(k >= 0.0 && k <= self.steps() as f64) || (k * self.dt - t).abs() > 1e-9 * self.dt.max(t.abs()) {
            return Err(Error::GridMismatch(format!(
                "t = {t} is not a grid time (dt = {}, T = {})",
                self.dt,
                self.horizon()
            )));
        }
        Ok(k as usize)
    }

    /// ξ values recomputed from the stored noises; bit-identical to `xi()`
    /// when `chars` are the characteristics that produced the path.
    pub fn replay(&self, chars: &EnvLevyCharacteristics) -> Result<Vec<f64>> {
        let model = chars.step_model()?;
        let mut out = Vec::with_capacity(self.xi.len());
        out.push(0.0);
        for i in 0..self.steps() {
            let jump_sum: f64 = self.jumps_in_step(i).iter().fold(0.0, |s, j| s + j.z);
            let next = out[i] + model.xi_increment(self.dt, self.d_b[i], self.small[i], jump_sum);
            out.push(next);
        }
        Ok(out)
    }

    /// ΔL_i = β dt + σ ΔB_i + small_i + Σ (e^z - 1) - dt ∫_{eps<|z|≤1} (e^z - 1) ν(dz).
    pub fn l_increment(&self, chars: &EnvLevyCharacteristics, i: usize) -> Result<f64> {
        if i >= self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step index {i} out of range for {} steps",
                self.steps()
            )));
        }
        let model = chars.step_model()?;
        Ok(self.l_increment_with(&model, i))
    }

    /// All ΔL_i, computing the characteristic integrals once.
    pub fn l_increments(&self, chars: &EnvLevyCharacteristics) -> Result<Vec<f64>> {
        Ok(EnvSampler::new(chars)?.l_increments(self))
    }

    fn l_increment_with(&self, model: &StepModel, i: usize) -> f64 {
        let jumps: f64 = self.jumps_in_step(i).iter().fold(0.0, |s, j| s + j.z.exp_m1());
        model.beta * self.dt + model.sigma * self.d_b[i] + self.small[i] + jumps - self.dt * model.compensator_l
    }

    /// Per-step multiplier applied to the population at t_{i+1}.
    pub fn growth_factors(&self, chars: &EnvLevyCharacteristics, coupling: EnvCoupling) -> Result<Vec<f64>> {
        Ok(EnvSampler::new(chars)?.growth_factors(self, coupling))
    }

    /// The same path on the grid of step dt/2. Brownian and small-jump
    /// increments are split by a Brownian bridge; ledger jumps keep their
    /// times.
    pub fn refine(&self, chars: &EnvLevyCharacteristics, stream: &mut Stream) -> Result<Self> {
        let model = chars.step_model()?;
        let n = self.steps();
        let half = 0.5 * self.dt;
        let bridge_sd = (self.dt / 4.0).sqrt();
        let mut d_b = Vec::with_capacity(2 * n);
        let mut small = Vec::with_capacity(2 * n);
        for i in 0..n {
            let db1 = 0.5 * self.d_b[i] + bridge_sd * normal(stream);
            d_b.push(db1);
            d_b.push(self.d_b[i] - db1);
            let sm1 = 0.5 * self.small[i] + model.small_sd * bridge_sd * normal(stream);
            small.push(sm1);
            small.push(self.small[i] - sm1);
        }
        let mut big_jumps = Vec::with_capacity(self.big_jumps.len());
        let mut jump_start = vec![0; 2 * n + 1];
        for j in &self.big_jumps {
            let step = if j.time <= (j.step as f64 + 0.5) * self.dt {
                2 * j.step
            } else {
                2 * j.step + 1
            };
            big_jumps.push(LedgerJump { step, ..*j });
            jump_start[step + 1] += 1;
        }
        for k in 0..2 * n {
            jump_start[k + 1] += jump_start[k];
        }
        let mut xi = Vec::with_capacity(2 * n + 1);
        xi.push(0.0);
        for k in 0..2 * n {
            let jump_sum: f64 = big_jumps[jump_start[k]..jump_start[k + 1]]
                .iter()
                .fold(0.0, |s, j| s + j.z);
            xi.push(xi[k] + model.xi_increment(half, d_b[k], small[k], jump_sum));
        }
        Ok(Self {
            dt: half,
            xi,
            d_b,
            small,
            big_jumps,
            jump_start,
            seed_tag: self.seed_tag,
        })
    }

    /// ∫₀^{t_k} e^{b s - ξ(s)} ds, exact for the piecewise-constant path.
    pub fn exponential_functional(&self, b: f64, k: usize) -> f64 {
        let step_weight = if b == 0.0 { self.dt } else { (b * self.dt).exp_m1() / b };
        (0..k)
            .map(|i| (b * self.time(i) - self.xi[i]).exp() * step_weight)
            .sum()
    }

    /// CSV with header `t,xi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,xi")?;
        for (i, x) in self.xi.iter().enumerate() {
            writeln!(w, "{},{}", self.time(i), x)?;
        }
        Ok(())
    }
}
