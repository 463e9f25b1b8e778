//! Jump measures built from point masses and three parametric families.
//!
//! A [`MeasureSpec`] is used for the environment Lévy measure ν (two-sided),
//! the branching measure m and the immigration measure n (both on (0, ∞)).
//! Integrability conditions are decided analytically per family; integrals
//! are computed by adaptive quadrature after a family-specific substitution
//! that removes the infinite range and, for the stable slab, the singularity
//! at the origin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::integrate_interval;
use crate::rng::open_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    /// Environment Lévy measure: ∫(1∧z²)ν(dz) < ∞.
    Env,
    /// Branching measure: ∫(z∧z²)m(dz) < ∞.
    Branching,
    /// Immigration measure: ∫(1∧u)n(du) < ∞.
    Immigration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            other => Err(format!("sign must be 1 or -1, got {other}")),
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        match s {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }
}

/// One piece of a measure, as it appears in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Component {
    /// Point mass `mass` at `location`.
    Atom { location: f64, mass: f64 },
    /// Density `total_mass·rate·exp(-rate·|z|)` on the half-line selected by `sign`.
    Exponential {
        total_mass: f64,
        rate: f64,
        #[serde(default = "positive")]
        sign: Sign,
    },
    /// Density `scale·|z|^(-1-exponent)` for `|z| > lower_cut`.
    PowerTail {
        scale: f64,
        exponent: f64,
        lower_cut: f64,
        #[serde(default = "positive")]
        sign: Sign,
    },
    /// Density `scale·z^(-1-alpha)` on (0, ∞).
    StableSlab { scale: f64, alpha: f64 },
}

fn positive() -> Sign {
    Sign::Positive
}

impl Component {
    fn sign(&self) -> Sign {
        match *self {
            Component::Atom { location, .. } if location < 0.0 => Sign::Negative,
            Component::Exponential { sign, .. } | Component::PowerTail { sign, .. } => sign,
            _ => Sign::Positive,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidMeasure(msg));
        match *self {
            Component::Atom { location, mass } => {
                if !(location.is_finite() && location != 0.0) {
                    return bad(format!("atom location must be finite and nonzero, got {location}"));
                }
                if !(mass.is_finite() && mass > 0.0) {
                    return bad(format!("atom mass must be positive, got {mass}"));
                }
            }
            Component::Exponential { total_mass, rate, .. } => {
                if !(total_mass.is_finite() && total_mass > 0.0) {
                    return bad(format!("exponential total_mass must be positive, got {total_mass}"));
                }
                if !(rate.is_finite() && rate > 0.0) {
                    return bad(format!("exponential rate must be positive, got {rate}"));
                }
            }
            Component::PowerTail {
                scale,
                exponent,
                lower_cut,
                ..
            } => {
                if !(scale.is_finite() && scale > 0.0) {
                    return bad(format!("power tail scale must be positive, got {scale}"));
                }
                if !exponent.is_finite() {
                    return bad(format!("power tail exponent must be finite, got {exponent}"));
                }
                if !(lower_cut.is_finite() && lower_cut > 0.0) {
                    return bad(format!("power tail lower_cut must be positive, got {lower_cut}"));
                }
            }
            Component::StableSlab { scale, alpha } => {
                if !(scale.is_finite() && scale > 0.0) {
                    return bad(format!("stable slab scale must be positive, got {scale}"));
                }
                if !(alpha > 0.0 && alpha < 2.0) {
                    return bad(format!("stable slab alpha must lie in (0, 2), got {alpha}"));
                }
            }
        }
        Ok(())
    }
}

/// Which integrability condition to test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrabilityTest {
    /// The defining condition of the measure's kind.
    Base,
    /// ∫_(1,∞) u·log(u) m(du) < ∞.
    XlogxBranching,
    /// ∫_(1,∞) log(u) n(du) < ∞.
    LogImmigration,
}

/// The set `{z : lo < |z| ≤ hi}`; `hi` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsRange {
    pub lo: f64,
    pub hi: f64,
}

impl AbsRange {
    pub const ALL: AbsRange = AbsRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// `{|z| ≤ hi}`
    pub fn up_to(hi: f64) -> Self {
        Self { lo: 0.0, hi }
    }

    /// `{|z| > lo}`
    pub fn above(lo: f64) -> Self {
        Self { lo, hi: f64::INFINITY }
    }

    fn contains(&self, z: f64) -> bool {
        let a = z.abs();
        a > self.lo && a <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureSpec {
    kind: MeasureKind,
    components: Vec<Component>,
}

impl MeasureSpec {
    pub fn empty(kind: MeasureKind) -> Self {
        Self {
            kind,
            components: Vec::new(),
        }
    }

    /// Build and validate a measure. Fails with `InvalidMeasure` when a
    /// parameter is out of range, atoms collide, a one-sided kind receives
    /// negative support, or the base integrability condition fails.
    pub fn new(kind: MeasureKind, components: Vec<Component>) -> Result<Self> {
        for c in &components {
            c.validate()?;
            if kind != MeasureKind::Env && c.sign() == Sign::Negative {
                return Err(Error::InvalidMeasure(format!(
                    "{kind:?} measures live on (0, ∞); component {c:?} has negative support"
                )));
            }
        }
        let mut locations: Vec<f64> = components
            .iter()
            .filter_map(|c| match c {
                Component::Atom { location, .. } => Some(*location),
                _ => None,
            })
            .collect();
        locations.sort_by(f64::total_cmp);
        if locations.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidMeasure("atoms must sit at distinct locations".into()));
        }
        let spec = Self { kind, components };
        if !spec.check_integrability(IntegrabilityTest::Base) {
            return Err(Error::InvalidMeasure(format!(
                "{kind:?} measure fails its base integrability condition"
            )));
        }
        Ok(spec)
    }

    pub fn atom(kind: MeasureKind, location: f64, mass: f64) -> Result<Self> {
        Self::new(kind, vec![Component::Atom { location, mass }])
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn has_stable_slab(&self) -> bool {
        self.components
            .iter()
            .any(|c| matches!(c, Component::StableSlab { .. }))
    }

    /// ∫ f dμ over the whole support.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, tol: f64) -> Result<f64> {
        self.integrate_range(AbsRange::ALL, f, tol)
    }

    /// ∫ f dμ over `{lo < |z| ≤ hi}`, each continuous component to absolute
    /// accuracy `tol`.
    pub fn integrate_range<F: Fn(f64) -> f64>(&self, range: AbsRange, f: F, tol: f64) -> Result<f64> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        let mut total = 0.0;
        for c in &self.components {
            total += component_integral(c, range, &f, tol)?;
        }
        Ok(total)
    }

    /// μ({|z| > eps}).
    pub fn tail_mass(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        Ok(self.components.iter().map(|c| component_tail(c, eps)).sum())
    }

    /// Draw from μ restricted to `{|z| > eps}` and normalized.
    pub fn sample_tail<R: Rng + ?Sized>(&self, eps: f64, rng: &mut R) -> Result<f64> {
        let total = self.tail_mass(eps)?;
        if total <= 0.0 {
            return Err(Error::EmptyTail);
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for c in &self.components {
            let w = component_tail(c, eps);
            if w <= 0.0 {
                continue;
            }
            chosen = Some(c);
            acc += w;
            if target < acc {
                break;
            }
        }
        let c = chosen.expect("positive tail mass implies a contributing component");
        Ok(match *c {
            Component::Atom { location, .. } => location,
            Component::Exponential { rate, sign, .. } => sign.factor() * (eps - open_uniform(rng).ln() / rate),
            Component::PowerTail {
                exponent,
                lower_cut,
                sign,
                ..
            } => sign.factor() * eps.max(lower_cut) * open_uniform(rng).powf(-1.0 / exponent),
            Component::StableSlab { alpha, .. } => eps * open_uniform(rng).powf(-1.0 / alpha),
        })
    }

    /// Integrability tests, decided per family from the tail exponents.
    pub fn check_integrability(&self, test: IntegrabilityTest) -> bool {
        self.components.iter().all(|c| match *c {
            Component::Atom { .. } | Component::Exponential { .. } => true,
            Component::PowerTail { exponent, .. } => match (test, self.kind) {
                (IntegrabilityTest::Base, MeasureKind::Branching) => exponent > 1.0,
                (IntegrabilityTest::Base, _) => exponent > 0.0,
                (IntegrabilityTest::XlogxBranching, _) => exponent > 1.0,
                (IntegrabilityTest::LogImmigration, _) => exponent > 0.0,
            },
            Component::StableSlab { alpha, .. } => match (test, self.kind) {
                (IntegrabilityTest::Base, MeasureKind::Env) => true,
                (IntegrabilityTest::Base, MeasureKind::Branching) => alpha > 1.0,
                (IntegrabilityTest::Base, MeasureKind::Immigration) => alpha < 1.0,
                (IntegrabilityTest::XlogxBranching, _) => alpha > 1.0,
                (IntegrabilityTest::LogImmigration, _) => true,
            },
        })
    }

    /// ∫|z| μ(dz) over `{|z| > 1}` is finite.
    pub fn has_large_jump_mean(&self) -> bool {
        self.components.iter().all(|c| match *c {
            Component::PowerTail { exponent, .. } => exponent > 1.0,
            Component::StableSlab { alpha, .. } => alpha > 1.0,
            _ => true,
        })
    }
}

fn component_tail(c: &Component, eps: f64) -> f64 {
    match *c {
        Component::Atom { location, mass } => {
            if location.abs() > eps {
                mass
            } else {
                0.0
            }
        }
        Component::Exponential { total_mass, rate, .. } => total_mass * (-rate * eps).exp(),
        Component::PowerTail {
            scale,
            exponent,
            lower_cut,
            ..
        } => {
            if exponent <= 0.0 {
                f64::INFINITY
            } else {
                scale * eps.max(lower_cut).powf(-exponent) / exponent
            }
        }
        Component::StableSlab { scale, alpha } => scale * eps.powf(-alpha) / alpha,
    }
}

/// ∫ f over one component restricted to `range`, to absolute accuracy `tol`.
pub fn integrate_component<F: Fn(f64) -> f64>(c: &Component, range: AbsRange, f: F, tol: f64) -> Result<f64> {
    component_integral(c, range, &f, tol)
}

fn component_integral<F: Fn(f64) -> f64>(c: &Component, range: AbsRange, f: &F, tol: f64) -> Result<f64> {
    if range.hi <= range.lo {
        return Ok(0.0);
    }
    match *c {
        Component::Atom { location, mass } => {
            if range.contains(location) {
                let v = f(location);
                if !v.is_finite() {
                    return Err(Error::NumericalDomainError(location));
                }
                Ok(v * mass)
            } else {
                Ok(0.0)
            }
        }
        Component::Exponential { total_mass, rate, sign } => {
            // y = lo - ln(w)/rate maps w ∈ [exp(-rate(hi-lo)), 1] onto (lo, hi].
            let s = sign.factor();
            let lo = range.lo;
            let w_min = if range.hi.is_finite() {
                (-rate * (range.hi - lo)).exp()
            } else {
                0.0
            };
            let prefactor = total_mass * (-rate * lo).exp();
            if prefactor == 0.0 {
                return Ok(0.0);
            }
            let g = |w: f64| f(s * (lo - w.ln() / rate));
            Ok(prefactor * integrate_interval(g, w_min, 1.0, tol / prefactor)?)
        }
        Component::PowerTail {
            scale,
            exponent,
            lower_cut,
            sign,
        } => {
            let s = sign.factor();
            let a = range.lo.max(lower_cut);
            if a >= range.hi {
                return Ok(0.0);
            }
            // y = a/w
            let w_min = if range.hi.is_finite() { a / range.hi } else { 0.0 };
            let prefactor = scale * a.powf(-exponent);
            let g = |w: f64| f(s * a / w) * w.powf(exponent - 1.0);
            Ok(prefactor * integrate_interval(g, w_min, 1.0, tol / prefactor)?)
        }
        Component::StableSlab { scale, alpha } => {
            let mut total = 0.0;
            // Near part (lo, min(hi, 1)]: y = h·w^(1/(2-α)) turns z^(-1-α)dz into
            // a bounded weight against f(y)/y².
            let h = range.hi.min(1.0);
            if range.lo < h {
                let k = 2.0 - alpha;
                let w_min = (range.lo / h).powf(k);
                let prefactor = scale * h.powf(k) / k;
                let g = |w: f64| {
                    let y = h * w.powf(1.0 / k);
                    f(y) / (y * y)
                };
                total += prefactor * integrate_interval(g, w_min, 1.0, tol / prefactor)?;
            }
            // Far part (max(lo, 1), hi]: y = a/w.
            let a = range.lo.max(1.0);
            if a < range.hi {
                let w_min = if range.hi.is_finite() { a / range.hi } else { 0.0 };
                let prefactor = scale * a.powf(-alpha);
                let g = |w: f64| f(a / w) * w.powf(alpha - 1.0);
                total += prefactor * integrate_interval(g, w_min, 1.0, tol / prefactor)?;
            }
            Ok(total)
        }
    }
}
