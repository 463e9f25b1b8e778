//! Experiment configuration files.
//!
//! A config is TOML with one table per record:
//!
//! ```toml
//! kind = "laplace"
//! seed = 7
//!
//! [environment]
//! a = 0.1
//! sigma = 0.5
//! [[environment.nu]]
//! family = "exponential"
//! total_mass = 1.0
//! rate = 4.0
//!
//! [branching]
//! b = 0.2
//! c = 1.0
//!
//! [simulation]
//! dt = 0.001
//! t = 1.0
//! n_paths = 100000
//!
//! [experiment]
//! lambdas = [0.5, 1.0, 2.0]
//! ```
//!
//! Every record is validated by the core constructors before any
//! computation; failures point at the line of the offending table or
//! measure component.

use std::ops::Range;
use std::path::{Path, PathBuf};

use cbrelab_core::environment::{EnvCoupling, EnvLevyCharacteristics};
use cbrelab_core::forward_sim::SimConfig;
use cbrelab_core::laws::{Environments, Model, Run};
use cbrelab_core::measures::{Component, MeasureKind, MeasureSpec};
use cbrelab_core::mechanisms::{BranchingMechanism, ImmigrationMechanism};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::CliError;

/// The experiment a config describes; one per subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Validate,
    EnvSample,
    Simulate,
    Laplace,
    Extinction,
    Stationary,
    Coupling,
    GeneratorCheck,
    Battery,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Validate => "validate",
            Kind::EnvSample => "env-sample",
            Kind::Simulate => "simulate",
            Kind::Laplace => "laplace",
            Kind::Extinction => "extinction",
            Kind::Stationary => "stationary",
            Kind::Coupling => "coupling",
            Kind::GeneratorCheck => "generator-check",
            Kind::Battery => "battery",
        }
    }
}

/// Variants within a subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The subcommand's main comparison.
    #[default]
    Standard,
    /// `laplace`: the size-biased transform (backward engine only).
    SizeBiased,
    /// `extinction`: long-run extinction along the t-ladder.
    Survival,
    /// `stationary`: forward convergence to the stationary law.
    Ergodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Quenched,
    Annealed,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentRecord {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "one")]
    pub eps: f64,
    #[serde(default)]
    pub coupling: EnvCoupling,
    #[serde(default)]
    pub nu: Vec<Spanned<Component>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchingRecord {
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub m: Vec<Spanned<Component>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImmigrationRecord {
    #[serde(default)]
    pub h: f64,
    #[serde(default)]
    pub n: Vec<Spanned<Component>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecord {
    pub dt: f64,
    /// Horizon of the experiment.
    pub t: f64,
    #[serde(default = "default_eps_branch")]
    pub eps_branch: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: u64,
    /// Forward environments in annealed mode.
    #[serde(default = "default_n_env")]
    pub n_env: u64,
    /// Independent backward-side environments; 0 pairs them with the
    /// forward environments.
    #[serde(default)]
    pub n_analytic: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_overflow_guard")]
    pub overflow_guard: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub t_ladder: Vec<f64>,
    /// Initial states.
    #[serde(default = "default_x")]
    pub x: Vec<f64>,
    /// Upper starting point of the coupling.
    pub y: Option<f64>,
    /// Step of the generator check.
    pub h: Option<f64>,
    #[serde(default = "default_max_relative_error")]
    pub max_relative_error: f64,
    /// Backward horizon of the stationary transform.
    pub stationary_horizon: Option<f64>,
    /// Paths written by `simulate`.
    #[serde(default = "default_export_paths")]
    pub export_paths: u64,
}

impl Default for ExperimentRecord {
    fn default() -> Self {
        Self {
            variant: Variant::default(),
            lambdas: default_lambdas(),
            t_ladder: Vec::new(),
            x: default_x(),
            y: None,
            h: None,
            max_relative_error: default_max_relative_error(),
            stationary_horizon: None,
            export_paths: default_export_paths(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_eps_branch() -> f64 {
    0.01
}
fn default_n_paths() -> u64 {
    1000
}
fn default_n_env() -> u64 {
    100
}
fn default_tol() -> f64 {
    1e-6
}
fn default_overflow_guard() -> f64 {
    1e12
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}
fn default_x() -> Vec<f64> {
    vec![1.0]
}
fn default_max_relative_error() -> f64 {
    0.05
}
fn default_export_paths() -> u64 {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: Spanned<Kind>,
    #[serde(default)]
    seed: u64,
    out: Option<PathBuf>,
    environment: Option<Spanned<EnvironmentRecord>>,
    branching: Option<Spanned<BranchingRecord>>,
    immigration: Option<Spanned<ImmigrationRecord>>,
    simulation: Option<Spanned<SimulationRecord>>,
    experiment: Option<Spanned<ExperimentRecord>>,
    /// Battery members, relative to the battery file.
    #[serde(default)]
    configs: Vec<Spanned<PathBuf>>,
}

/// A parsed and validated experiment.
#[derive(Debug, Clone)]
pub struct Config {
    pub path: PathBuf,
    pub kind: Kind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub digest: String,
    pub coupling: EnvCoupling,
    /// Degenerate when the config has no [environment] table.
    pub chars: EnvLevyCharacteristics,
    pub model: Option<Model>,
    pub simulation: Option<SimulationRecord>,
    pub experiment: ExperimentRecord,
    pub members: Vec<PathBuf>,
}

/// Hex SHA-256 of the config file content.
pub fn digest(content: &str) -> String {
    Sha256::digest(content.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Source<'a> {
    path: &'a Path,
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn error(&self, span: Range<usize>, msg: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{}:{}: {msg}", self.path.display(), self.line(span)))
    }

    /// Build a measure, blaming the first component that fails on its own,
    /// or the enclosing table when only the combination is invalid.
    fn measure(
        &self,
        kind: MeasureKind,
        comps: &[Spanned<Component>],
        table: Range<usize>,
    ) -> Result<MeasureSpec, CliError> {
        for c in comps {
            if let Err(e) = MeasureSpec::new(kind, vec![*c.get_ref()]) {
                return Err(self.error(c.span(), e));
            }
        }
        MeasureSpec::new(kind, comps.iter().map(|c| *c.get_ref()).collect()).map_err(|e| self.error(table, e))
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let src = Source { path, text };
        let raw: RawConfig = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => src.error(span, e.message()),
            None => CliError::Config(format!("{}: {}", path.display(), e.message())),
        })?;

        let env_rec = raw.environment.as_ref();
        let chars = match env_rec {
            Some(rec) => {
                let r = rec.get_ref();
                let nu = src.measure(MeasureKind::Env, &r.nu, rec.span())?;
                Some(EnvLevyCharacteristics::new(r.a, r.sigma, nu, r.eps).map_err(|e| src.error(rec.span(), e))?)
            }
            None => None,
        };
        let bm = match &raw.branching {
            Some(rec) => {
                let r = rec.get_ref();
                let m = src.measure(MeasureKind::Branching, &r.m, rec.span())?;
                Some(BranchingMechanism::new(r.b, r.c, m).map_err(|e| src.error(rec.span(), e))?)
            }
            None => None,
        };
        let im = match &raw.immigration {
            Some(rec) => {
                let r = rec.get_ref();
                let n = src.measure(MeasureKind::Immigration, &r.n, rec.span())?;
                Some(ImmigrationMechanism::new(r.h, n).map_err(|e| src.error(rec.span(), e))?)
            }
            None => None,
        };
        let coupling = env_rec.map(|r| r.get_ref().coupling).unwrap_or_default();

        if let Some(sim) = &raw.simulation {
            let s = sim.get_ref();
            let check = || -> cbrelab_core::Result<()> {
                let cfg = sim_config(s, coupling)?;
                Run::new(cfg, raw.seed, s.tol)?;
                let steps = s.t / s.dt;
                if !(s.t > 0.0 && (steps - steps.round()).abs() < 1e-9 * steps.max(1.0)) {
                    return Err(cbrelab_core::Error::GridMismatch(format!(
                        "t = {} is not a positive multiple of dt = {}",
                        s.t, s.dt
                    )));
                }
                Ok(())
            };
            check().map_err(|e| src.error(sim.span(), e))?;
        }
        if let Some(exp) = &raw.experiment {
            let e = exp.get_ref();
            let bad = |msg: &str| Err(src.error(exp.span(), msg));
            if e.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return bad("lambdas must be nonnegative");
            }
            if e.x.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return bad("initial states x must be nonnegative");
            }
            if !e.t_ladder.windows(2).all(|w| w[1] > w[0]) {
                return bad("t_ladder must be strictly increasing");
            }
        }

        let kind = *raw.kind.get_ref();
        let needs_model = !matches!(kind, Kind::Battery | Kind::Validate | Kind::EnvSample);
        let chars = chars.unwrap_or_else(EnvLevyCharacteristics::degenerate);
        let model = bm.map(|bm| Model {
            chars: chars.clone(),
            bm,
            im,
        });
        if needs_model && model.is_none() {
            return Err(src.error(raw.kind.span(), format!("`{}` needs a [branching] table", kind.name())));
        }
        if (needs_model || kind == Kind::EnvSample) && raw.simulation.is_none() {
            return Err(src.error(raw.kind.span(), format!("`{}` needs a [simulation] table", kind.name())));
        }
        if kind == Kind::Battery && raw.configs.is_empty() {
            return Err(src.error(raw.kind.span(), "a battery needs a nonempty `configs` list"));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Config {
            path: path.to_path_buf(),
            kind,
            seed: raw.seed,
            out: raw.out,
            digest: digest(text),
            coupling,
            chars,
            model,
            simulation: raw.simulation.map(|s| s.into_inner()),
            experiment: raw.experiment.map(|e| e.into_inner()).unwrap_or_default(),
            members: raw.configs.into_iter().map(|p| base.join(p.into_inner())).collect(),
        })
    }

    pub fn model(&self) -> &Model {
        self.model.as_ref().expect("validated at load")
    }

    pub fn simulation(&self) -> &SimulationRecord {
        self.simulation.as_ref().expect("validated at load")
    }

    pub fn run(&self) -> Run {
        let s = self.simulation();
        Run::new(
            sim_config(s, self.coupling).expect("validated at load"),
            self.seed,
            s.tol,
        )
        .expect("validated at load")
    }

    pub fn environments<'a>(&self, quenched: &'a cbrelab_core::environment::EnvironmentPath) -> Environments<'a> {
        let s = self.simulation();
        match s.mode {
            Mode::Quenched => Environments::Quenched(quenched),
            Mode::Annealed => Environments::Annealed {
                n_env: s.n_env,
                n_analytic: s.n_analytic,
            },
        }
    }
}

fn sim_config(s: &SimulationRecord, coupling: EnvCoupling) -> cbrelab_core::Result<SimConfig> {
    let mut cfg = SimConfig::new(s.dt)?;
    cfg.eps_branch = s.eps_branch;
    cfg.overflow_guard = s.overflow_guard;
    cfg.env_coupling = coupling;
    cfg.validate()?;
    Ok(cfg)
}
