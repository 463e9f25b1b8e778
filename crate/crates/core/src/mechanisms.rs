//! Branching mechanism φ and immigration mechanism ψ.
//!
//! ```text
//! φ(z) = b z + c z² + ∫ (e^{-uz} - 1 + uz) m(du)
//! ψ(λ) = h λ + ∫ (1 - e^{-λu}) n(du)
//! ```
//!
//! Atoms, exponential densities and stable slabs are evaluated in closed
//! form; power tails go through quadrature.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{integrate_component, AbsRange, Component, MeasureKind, MeasureSpec};

const QUAD_TOL: f64 = 1e-13;

/// e^{-x} - 1 + x without cancellation for small x.
fn exp_defect(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        x2 * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0)
    } else {
        neg_expm1(x) + x
    }
}

/// e^{-x} - 1
#[inline]
fn neg_expm1(x: f64) -> f64 {
    (-x).exp_m1()
}

fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchingMechanism {
    pub b: f64,
    pub c: f64,
    pub m: MeasureSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GreyStatus {
    Holds,
    Fails,
}

impl BranchingMechanism {
    pub fn new(b: f64, c: f64, m: MeasureSpec) -> Result<Self> {
        if !b.is_finite() {
            return Err(Error::InvalidArgument(format!("b must be finite, got {b}")));
        }
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidArgument(format!("c must be nonnegative, got {c}")));
        }
        if m.kind() != MeasureKind::Branching {
            return Err(Error::InvalidMeasure(format!(
                "branching mechanism needs a branching measure, got {:?}",
                m.kind()
            )));
        }
        Ok(Self { b, c, m })
    }

    /// φ(z) = bz + cz² with no jumps.
    pub fn quadratic(b: f64, c: f64) -> Result<Self> {
        Self::new(b, c, MeasureSpec::empty(MeasureKind::Branching))
    }

    fn check_arg(z: f64) -> Result<()> {
        if z >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "mechanism argument must be nonnegative, got {z}"
            )))
        }
    }

    pub fn phi(&self, z: f64) -> Result<f64> {
        Self::check_arg(z)?;
        if z == 0.0 {
            return Ok(0.0);
        }
        let mut jumps = 0.0;
        for comp in self.m.components() {
            jumps += match *comp {
                Component::Atom { location, mass } => mass * exp_defect(location * z),
                Component::Exponential { total_mass, rate, .. } => total_mass * z * z / (rate * (rate + z)),
                Component::StableSlab { scale, alpha } => scale * gamma(-alpha) * z.powf(alpha),
                Component::PowerTail { .. } => {
                    integrate_component(comp, AbsRange::ALL, |u| exp_defect(u * z), QUAD_TOL)?
                }
            };
        }
        Ok(self.b * z + self.c * z * z + jumps)
    }

    pub fn phi_prime(&self, z: f64) -> Result<f64> {
        Ok(self.b + self.phi0_prime(z)?)
    }

    /// φ'(z) - b.
    pub fn phi0_prime(&self, z: f64) -> Result<f64> {
        Self::check_arg(z)?;
        if z == 0.0 {
            return Ok(0.0);
        }
        let mut jumps = 0.0;
        for comp in self.m.components() {
            jumps += match *comp {
                Component::Atom { location, mass } => -mass * location * neg_expm1(location * z),
                Component::Exponential { total_mass, rate, .. } => {
                    total_mass * z * (2.0 * rate + z) / (rate * (rate + z) * (rate + z))
                }
                Component::StableSlab { scale, alpha } => scale * gamma(-alpha) * alpha * z.powf(alpha - 1.0),
                Component::PowerTail { .. } => {
                    integrate_component(comp, AbsRange::ALL, |u| -u * neg_expm1(u * z), QUAD_TOL)?
                }
            };
        }
        Ok(2.0 * self.c * z + jumps)
    }

    /// ∫₀^eps z² m(dz): variance rate of the branching jumps below `eps`.
    pub fn small_jump_second_moment(&self, eps: f64) -> Result<f64> {
        self.m.integrate_range(AbsRange::up_to(eps), |z| z * z, 1e-12)
    }

    /// Grey's condition ∫₁^∞ dz/φ(z) < ∞, decided from the growth of φ:
    /// it holds iff φ(z)/(z log z) → ∞, i.e. iff c > 0 or m carries a
    /// stable slab (φ then grows like z^α with α ∈ (1, 2)). Atoms,
    /// exponential densities and power tails with finite mean only add a
    /// linear term. Returns `NotApplicable` when φ(1) ≤ 0; since φ(z)/z is
    /// nondecreasing this is exactly when φ fails to be positive on [1, ∞).
    pub fn greys_condition(&self) -> Result<GreyStatus> {
        let at_one = self.phi(1.0)?;
        if at_one <= 0.0 {
            return Err(Error::NotApplicable(format!(
                "φ(1) = {at_one} ≤ 0, so φ is not positive on [1, ∞)"
            )));
        }
        if self.grows_superlinearly() {
            Ok(GreyStatus::Holds)
        } else {
            Ok(GreyStatus::Fails)
        }
    }

    /// φ(z)/(z log z) → ∞. Together with eventual positivity of φ this is
    /// Grey's condition.
    pub fn grows_superlinearly(&self) -> bool {
        self.c > 0.0 || self.m.has_stable_slab()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImmigrationMechanism {
    pub h: f64,
    pub n: MeasureSpec,
}

impl ImmigrationMechanism {
    pub fn new(h: f64, n: MeasureSpec) -> Result<Self> {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Error::InvalidArgument(format!("h must be nonnegative, got {h}")));
        }
        if n.kind() != MeasureKind::Immigration {
            return Err(Error::InvalidMeasure(format!(
                "immigration mechanism needs an immigration measure, got {:?}",
                n.kind()
            )));
        }
        Ok(Self { h, n })
    }

    pub fn none() -> Self {
        Self {
            h: 0.0,
            n: MeasureSpec::empty(MeasureKind::Immigration),
        }
    }

    pub fn drift(h: f64) -> Result<Self> {
        Self::new(h, MeasureSpec::empty(MeasureKind::Immigration))
    }

    /// ψ ≡ 0.
    pub fn is_trivial(&self) -> bool {
        self.h == 0.0 && self.n.is_empty()
    }

    pub fn psi(&self, lam: f64) -> Result<f64> {
        if !(lam >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "immigration mechanism argument must be nonnegative, got {lam}"
            )));
        }
        if lam == 0.0 {
            return Ok(0.0);
        }
        let mut jumps = 0.0;
        for comp in self.n.components() {
            jumps += match *comp {
                Component::Atom { location, mass } => -mass * neg_expm1(location * lam),
                Component::Exponential { total_mass, rate, .. } => total_mass * lam / (rate + lam),
                Component::StableSlab { scale, alpha } => scale * gamma(1.0 - alpha) / alpha * lam.powf(alpha),
                Component::PowerTail { .. } => {
                    integrate_component(comp, AbsRange::ALL, |u| -neg_expm1(u * lam), QUAD_TOL)?
                }
            };
        }
        Ok(self.h * lam + jumps)
    }

    /// ∫₀^eps u n(du): mean rate of the immigration jumps below `eps`.
    pub fn small_jump_mean(&self, eps: f64) -> Result<f64> {
        self.n.integrate_range(AbsRange::up_to(eps), |u| u, 1e-12)
    }
}
