//! Backward cumulant equations along a fixed environment path.
//!
//! ```text
//! du/dr = e^{ξ(r)} φ(e^{-ξ(r)} u),   u(t) = λ
//! v_{r,t}(λ) = e^{-ξ(r)} u_{r,t}(e^{ξ(t)} λ)
//! ```
//!
//! ξ is held at ξ(t_i) on [t_i, t_{i+1}), so inside a step v solves the
//! classical equation dv/dr = φ(v) and crossing t_{i+1} backwards multiplies
//! v by e^{ξ(t_{i+1}) - ξ(t_i)}. Each grid step is integrated by classical
//! RK4 with step doubling; the local error per substep is held below
//! `tol · |y| / n` for a range of n grid steps. Near a singular terminal
//! value many substeps are taken, but the flow contracts there, so their
//! errors do not accumulate.

use std::io::{self, Write};

use serde::Serialize;

use crate::environment::{EnvLevyCharacteristics, EnvironmentPath};
use crate::error::{Error, Result};
use crate::measures::IntegrabilityTest;
use crate::mechanisms::{BranchingMechanism, ImmigrationMechanism};

pub const OVERFLOW_GUARD: f64 = 1e300;
const LADDER_MAX_EXPONENT: i32 = 30;
const MAX_SUBSTEPS: usize = 1_000_000;

/// Integrate dy/ds = g(y) over [0, span] from y0, adaptively.
fn rk4_adaptive<G>(g: &G, y0: f64, span: f64, rel_budget: f64, index: usize) -> Result<f64>
where
    G: Fn(f64) -> Result<f64>,
{
    let rk4 = |y: f64, h: f64| -> Result<f64> {
        let k1 = g(y)?;
        let k2 = g((y + 0.5 * h * k1).max(0.0))?;
        let k3 = g((y + 0.5 * h * k2).max(0.0))?;
        let k4 = g((y + h * k3).max(0.0))?;
        Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    };
    let mut y = y0;
    let mut s = 0.0;
    let mut h = span;
    let mut substeps = 0usize;
    while s < span {
        if h < span * 1e-14 || substeps > MAX_SUBSTEPS {
            return Err(Error::SolverFault(format!(
                "step size collapsed at grid index {index} (y = {y:e})"
            )));
        }
        let h_try = h.min(span - s);
        substeps += 1;
        let coarse = rk4(y, h_try)?;
        let mid = rk4(y, 0.5 * h_try)?;
        let fine = rk4(mid.max(0.0), 0.5 * h_try)?;
        let err = (fine - coarse).abs() / 15.0;
        let scale = y.abs().max(fine.abs());
        let allowed = rel_budget * scale;
        if err <= allowed || err == 0.0 {
            y = fine + (fine - coarse) / 15.0;
            s += h_try;
            if !y.is_finite() || y.abs() > OVERFLOW_GUARD {
                return Err(Error::SolutionDiverged { index });
            }
            let growth = if err == 0.0 {
                4.0
            } else {
                (0.9 * (allowed / err).powf(0.2)).clamp(0.2, 4.0)
            };
            h = h_try * growth;
        } else {
            h = h_try * (0.9 * (allowed / err).powf(0.2)).clamp(0.1, 0.5);
        }
    }
    Ok(y)
}

/// Clamp a solver value at zero, rejecting clearly negative excursions.
fn clamp_nonnegative(y: f64, scale: f64, tol: f64, index: usize) -> Result<f64> {
    if y < -tol * scale.max(1.0) {
        return Err(Error::SolverFault(format!(
            "negative excursion {y:e} at grid index {index}"
        )));
    }
    Ok(y.max(0.0))
}

fn check_lambda(lam: f64) -> Result<()> {
    if lam >= 0.0 && lam.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must be finite and nonnegative, got {lam}"
        )))
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tolerance must lie in (0, 1), got {tol}"
        )))
    }
}

fn grid_range(env: &EnvironmentPath, r: f64, t: f64) -> Result<(usize, usize)> {
    let ri = env.index_of(r)?;
    let ti = env.index_of(t)?;
    if ri > ti {
        return Err(Error::InvalidArgument(format!("need r ≤ t, got r = {r}, t = {t}")));
    }
    Ok((ri, ti))
}

/// r ↦ u_{r,t}(λ) on the grid points of [r, t].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulantSolution {
    pub r_index: usize,
    pub t_index: usize,
    pub dt: f64,
    pub lambda: f64,
    pub tol: f64,
    /// u at t_{r_index}, …, t_{t_index}.
    pub u_values: Vec<f64>,
}

impl CumulantSolution {
    /// u_{r,t}(λ) at the left end of the range.
    pub fn initial(&self) -> f64 {
        self.u_values[0]
    }

    pub fn at(&self, grid_index: usize) -> f64 {
        self.u_values[grid_index - self.r_index]
    }

    /// CSV with header `r,u`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "r,u")?;
        for (k, u) in self.u_values.iter().enumerate() {
            writeln!(w, "{},{}", (self.r_index + k) as f64 * self.dt, u)?;
        }
        Ok(())
    }
}

fn u_backward(
    env: &EnvironmentPath,
    ri: usize,
    ti: usize,
    lam: f64,
    bm: &BranchingMechanism,
    tol: f64,
    mut record: impl FnMut(usize, f64),
) -> Result<f64> {
    let xi = env.xi();
    let dt = env.dt();
    let budget = if ti > ri { tol / (ti - ri) as f64 } else { tol };
    let mut u = lam;
    record(ti, u);
    for i in (ri..ti).rev() {
        if u > 0.0 {
            let e = xi[i].exp();
            let g = |y: f64| -> Result<f64> { Ok(-e * bm.phi(y / e)?) };
            let next = rk4_adaptive(&g, u, dt, budget, i)?;
            u = clamp_nonnegative(next, u, tol, i)?;
        }
        record(i, u);
    }
    Ok(u)
}

/// Solve for u_{·,t}(λ) on [r, t].
pub fn solve_u(
    env: &EnvironmentPath,
    r: f64,
    t: f64,
    lam: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<CumulantSolution> {
    check_lambda(lam)?;
    check_tol(tol)?;
    let (ri, ti) = grid_range(env, r, t)?;
    let mut u_values = vec![0.0; ti - ri + 1];
    u_backward(env, ri, ti, lam, bm, tol, |i, u| u_values[i - ri] = u)?;
    Ok(CumulantSolution {
        r_index: ri,
        t_index: ti,
        dt: env.dt(),
        lambda: lam,
        tol,
        u_values,
    })
}

/// u_{r,t}(λ) without storing the curve.
pub fn u_value(
    env: &EnvironmentPath,
    ri: usize,
    ti: usize,
    lam: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<f64> {
    check_lambda(lam)?;
    u_backward(env, ri, ti, lam, bm, tol, |_, _| {})
}

/// r ↦ v_{r,t}(λ) on the grid points of [r, t], with the left limits at
/// each grid point where ξ jumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VCurve {
    pub r_index: usize,
    pub t_index: usize,
    pub dt: f64,
    pub lambda: f64,
    /// v at t_{r_index}, …, t_{t_index}.
    pub values: Vec<f64>,
    /// v just before t_{r_index+1}, …, t_{t_index}.
    pub left_limits: Vec<f64>,
}

impl VCurve {
    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    /// ∫_r^t f(v_{s,t}) ds by the trapezoid rule on each step, using the
    /// left limit at the right end of the step since v is continuous there
    /// only from the left.
    pub fn integrate<F: Fn(f64) -> Result<f64>>(&self, f: F) -> Result<f64> {
        let mut total = 0.0;
        let mut f_left = f(self.values[0])?;
        for k in 0..self.left_limits.len() {
            let f_right = f(self.left_limits[k])?;
            total += 0.5 * self.dt * (f_left + f_right);
            f_left = f(self.values[k + 1])?;
        }
        Ok(total)
    }

    /// CSV with header `r,v`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "r,v")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", (self.r_index + k) as f64 * self.dt, v)?;
        }
        Ok(())
    }
}

fn v_direct(
    env: &EnvironmentPath,
    ri: usize,
    ti: usize,
    lam: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<VCurve> {
    let xi = env.xi();
    let dt = env.dt();
    let budget = if ti > ri { tol / (ti - ri) as f64 } else { tol };
    let n = ti - ri;
    let mut values = vec![0.0; n + 1];
    let mut left_limits = vec![0.0; n];
    let mut v = lam;
    values[n] = v;
    let g = |y: f64| -> Result<f64> { Ok(-bm.phi(y)?) };
    for i in (ri..ti).rev() {
        v *= (xi[i + 1] - xi[i]).exp();
        if !v.is_finite() || v > OVERFLOW_GUARD {
            return Err(Error::SolutionDiverged { index: i + 1 });
        }
        left_limits[i - ri] = v;
        if v > 0.0 {
            let next = rk4_adaptive(&g, v, dt, budget, i)?;
            v = clamp_nonnegative(next, v, tol, i)?;
        }
        values[i - ri] = v;
    }
    Ok(VCurve {
        r_index: ri,
        t_index: ti,
        dt,
        lambda: lam,
        values,
        left_limits,
    })
}

/// The v-curve on [r, t] by direct integration with jump bookkeeping.
pub fn solve_v_curve(
    env: &EnvironmentPath,
    r: f64,
    t: f64,
    lam: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<VCurve> {
    check_lambda(lam)?;
    check_tol(tol)?;
    let (ri, ti) = grid_range(env, r, t)?;
    v_direct(env, ri, ti, lam, bm, tol)
}

/// v_{r,t}(λ) = e^{-ξ(r)} u_{r,t}(e^{ξ(t)} λ), checked against direct
/// integration of the v-equation.
pub fn solve_v(env: &EnvironmentPath, r: f64, t: f64, lam: f64, bm: &BranchingMechanism, tol: f64) -> Result<f64> {
    check_lambda(lam)?;
    check_tol(tol)?;
    let (ri, ti) = grid_range(env, r, t)?;
    let xi = env.xi();
    let transform = (-xi[ri]).exp() * u_value(env, ri, ti, xi[ti].exp() * lam, bm, tol)?;
    let direct = v_direct(env, ri, ti, lam, bm, tol)?.initial();
    if (transform - direct).abs() > 10.0 * tol * transform.abs().max(direct.abs()).max(f64::MIN_POSITIVE) {
        return Err(Error::ConsistencyFault { transform, direct });
    }
    Ok(transform)
}

/// |u_{r,t}(λ) - u_{r,s}(u_{s,t}(λ))|.
#[allow(clippy::too_many_arguments)]
pub fn flow_residual(
    env: &EnvironmentPath,
    r: f64,
    s: f64,
    t: f64,
    lam: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<f64> {
    check_tol(tol)?;
    let (ri, si) = grid_range(env, r, s)?;
    let (_, ti) = grid_range(env, s, t)?;
    let whole = u_value(env, ri, ti, lam, bm, tol)?;
    let inner = u_value(env, si, ti, lam, bm, tol)?;
    let composed = u_value(env, ri, si, inner, bm, tol)?;
    Ok((whole - composed).abs())
}

/// Maximum over grid r of the defect in the discretized backward equation
///
/// ```text
/// v_{r,t} = λ - Σ φ(v_{s,t}) Δs + Σ v_{s,t} ΔL(backward)
/// ```
///
/// with both sums taken over the steps of [r, t] and the integrands
/// evaluated at the later end of each step.
pub fn bsde_residual(
    env: &EnvironmentPath,
    chars: &EnvLevyCharacteristics,
    lam: f64,
    t: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<f64> {
    let curve = solve_v_curve(env, 0.0, t, lam, bm, tol)?;
    let dl = env.l_increments(chars)?;
    let dt = env.dt();
    let mut rhs = lam;
    let mut worst: f64 = 0.0;
    for i in (0..curve.t_index).rev() {
        let v_next = curve.values[i + 1];
        rhs += -bm.phi(v_next)? * dt + v_next * dl[i];
        worst = worst.max((curve.values[i] - rhs).abs());
    }
    Ok(worst)
}

/// ū_{0,t} = lim_{λ→∞} u_{0,t}(λ), with ladder diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionFunctional {
    pub t: f64,
    pub u_bar: f64,
    pub lambda_ladder: Vec<f64>,
    pub ladder_values: Vec<f64>,
    pub converged: bool,
}

/// Climb the ladder λ_k = 10^k until successive values of u_{0,t}(λ_k)
/// agree to relative accuracy `tol`. When c > 0 and m has no stable slab,
/// the result is checked against the 1/u-substituted equation started
/// from the singular terminal value.
pub fn extinction_u_bar(
    env: &EnvironmentPath,
    t: f64,
    bm: &BranchingMechanism,
    tol: f64,
) -> Result<ExtinctionFunctional> {
    check_tol(tol)?;
    if !bm.grows_superlinearly() {
        return Err(Error::ExtinctionDegenerate);
    }
    let ti = env.index_of(t)?;
    if ti == 0 {
        return Ok(ExtinctionFunctional {
            t,
            u_bar: f64::INFINITY,
            lambda_ladder: Vec::new(),
            ladder_values: Vec::new(),
            converged: true,
        });
    }
    let solver_tol = (0.01 * tol).max(1e-13);
    let mut lambda_ladder = Vec::new();
    let mut ladder_values: Vec<f64> = Vec::new();
    for k in 0..=LADDER_MAX_EXPONENT {
        let lam = 10f64.powi(k);
        let u = u_value(env, 0, ti, lam, bm, solver_tol)?;
        lambda_ladder.push(lam);
        ladder_values.push(u);
        if let [.., prev, last] = ladder_values[..] {
            if (last - prev).abs() <= tol * last {
                if bm.c > 0.0 && !bm.m.has_stable_slab() {
                    let direct = singular_u_bar(env, ti, bm, solver_tol)?;
                    if (direct - last).abs() > 100.0 * tol * last {
                        return Err(Error::ConsistencyFault {
                            transform: last,
                            direct,
                        });
                    }
                }
                return Ok(ExtinctionFunctional {
                    t,
                    u_bar: last,
                    lambda_ladder,
                    ladder_values,
                    converged: true,
                });
            }
        }
    }
    Err(Error::NoConvergence(format!(
        "λ-ladder up to 1e{LADDER_MAX_EXPONENT} did not settle; last values {:?}",
        &ladder_values[ladder_values.len() - 2..]
    )))
}

/// ū_{0,t} from the singular terminal condition u(t-) = ∞, integrating
/// q = 1/(e^{-ξ}u) from q = 0:  dq/ds = q² φ(1/q), with q² φ(1/q) → c at 0.
pub fn singular_u_bar(env: &EnvironmentPath, ti: usize, bm: &BranchingMechanism, tol: f64) -> Result<f64> {
    if bm.c <= 0.0 {
        return Err(Error::NotApplicable(
            "the 1/u start needs a diffusion coefficient c > 0".into(),
        ));
    }
    let xi = env.xi();
    let g = |q: f64| -> Result<f64> {
        if q <= 0.0 {
            Ok(bm.c)
        } else {
            Ok(q * q * bm.phi(1.0 / q)?)
        }
    };
    let budget = tol / ti.max(1) as f64;
    let mut q = 0.0;
    for i in (0..ti).rev() {
        if i + 1 < ti {
            q *= (xi[i] - xi[i + 1]).exp();
        }
        q = rk4_singular(&g, q, env.dt(), budget, i)?;
    }
    Ok((xi[0]).exp() / q)
}

/// RK4 from a possibly zero start, where relative error control is
/// meaningless for the first substep.
fn rk4_singular<G>(g: &G, q0: f64, span: f64, budget: f64, index: usize) -> Result<f64>
where
    G: Fn(f64) -> Result<f64>,
{
    if q0 > 0.0 {
        return rk4_adaptive(g, q0, span, budget, index);
    }
    // q grows like c s near 0; seed with a tiny explicit step.
    let h0 = span * 1e-9;
    let q1 = h0 * g(0.0)?;
    let q = rk4_adaptive(g, q1, span - h0, budget, index)?;
    Ok(q)
}

/// ∫₀^T ψ(v_{s,T}(λ)) ds along the path on [0, T], standing in for the
/// integral over (-∞, 0] by time homogeneity. Fails with
/// `TailNotNegligible` when ψ(e^{(a₁-b)T/2} λ)·2/(b - a₁) ≥ tol.
pub fn stationary_exponent(
    env: &EnvironmentPath,
    chars: &EnvLevyCharacteristics,
    lam: f64,
    bm: &BranchingMechanism,
    im: &ImmigrationMechanism,
    tol: f64,
) -> Result<f64> {
    let rate = check_ergodic(chars, bm, im)?;
    check_lambda(lam)?;
    if im.is_trivial() || lam == 0.0 {
        return Ok(0.0);
    }
    let horizon = env.horizon();
    let bound = im.psi((-0.5 * rate * horizon).exp() * lam)? * 2.0 / rate;
    if bound >= tol {
        return Err(Error::TailNotNegligible { bound });
    }
    let curve = solve_v_curve(env, 0.0, horizon, lam, bm, (0.1 * tol).min(1e-8))?;
    curve.integrate(|v| im.psi(v))
}

/// b - a₁ > 0 and ∫ log u n(du) < ∞; returns b - a₁.
pub fn check_ergodic(
    chars: &EnvLevyCharacteristics,
    bm: &BranchingMechanism,
    im: &ImmigrationMechanism,
) -> Result<f64> {
    let a1 = match chars.mean_xi1() {
        Ok(a1) => a1,
        Err(Error::MomentUndefined) => return Err(Error::NotErgodic("E ξ(1) is undefined".into())),
        Err(e) => return Err(e),
    };
    if !(a1 < bm.b) {
        return Err(Error::NotErgodic(format!(
            "needs E ξ(1) < b, got a₁ = {a1}, b = {}",
            bm.b
        )));
    }
    if !im.n.check_integrability(IntegrabilityTest::LogImmigration) {
        return Err(Error::NotErgodic("immigration measure fails ∫ log u n(du) < ∞".into()));
    }
    Ok(bm.b - a1)
}
