//! One function per subcommand. Each writes `report.json` and its CSV
//! files into the output directory and returns the run's outcome.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use cbrelab_core::cumulant::check_ergodic;
use cbrelab_core::environment::{EnvSampler, EnvironmentPath};
use cbrelab_core::forward_sim::{simulate_cbire, simulate_cbre, z_transform, ProcessPath};
use cbrelab_core::laws::{
    annealed_laplace, cbire_laplace, ergodic_convergence, extinction_report, generator_check, martingale_check,
    quenched_laplace, sizebiased_laplace, stationary_laplace, strong_feller_gap, survival_longrun, LawReport, Model,
    Z_THRESHOLD,
};
use cbrelab_core::mechanisms::GreyStatus;
use cbrelab_core::rng::{substream, SeedTag, StreamKind};
use serde::Serialize;
use serde_json::json;

use crate::config::{Config, Kind, Mode, Variant};
use crate::error::{CliError, Outcome};

/// Where a run writes, and the stamp every file carries.
pub struct Output {
    dir: PathBuf,
    digest: String,
    seed: u64,
}

/// A value with the config digest attached, flattened into one JSON object.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_digest: &'a str,
    #[serde(flatten)]
    inner: &'a T,
}

impl Output {
    pub fn new(dir: PathBuf, cfg: &Config) -> Result<Self, CliError> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            digest: cfg.digest.clone(),
            seed: cfg.seed,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// CSV preceded by `#` lines carrying the digest and seed.
    fn csv(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        writeln!(w, "# config_digest: {}", self.digest)?;
        writeln!(w, "# seed: {}", self.seed)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn report<T: Serialize>(&self, command: Kind, pass: bool, results: &T) -> Result<(), CliError> {
        let doc = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command.name(),
            "config_digest": self.digest,
            "seed": self.seed,
            "pass": pass,
            "results": results,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("reports serialize");
        text.push('\n');
        fs::write(self.dir.join("report.json"), text)?;
        Ok(())
    }

    fn stamp<'a, T: Serialize>(&'a self, items: &'a [T]) -> Vec<Stamped<'a, T>> {
        items
            .iter()
            .map(|inner| Stamped {
                config_digest: &self.digest,
                inner,
            })
            .collect()
    }
}

fn outcome(pass: bool) -> Outcome {
    if pass {
        Outcome::Pass
    } else {
        Outcome::StatisticalFail
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn print_law(r: &LawReport) {
    let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{} {} [{}]: analytic {:.6} ± {:.1e}, mc {:.6} ± {:.1e}, z {:+.2}",
        verdict(r.pass),
        r.operation,
        params.join(" "),
        r.analytic,
        r.analytic_stderr,
        r.mc.value,
        r.mc.stderr,
        r.z_score
    );
}

fn law_csv(w: &mut dyn Write, reports: &[LawReport]) -> io::Result<()> {
    writeln!(
        w,
        "operation,x0,lambda,t,analytic,analytic_stderr,mc,mc_stderr,n,z_score,pass"
    )?;
    let p = |r: &LawReport, k: &str| r.param(k).map(|v| v.to_string()).unwrap_or_default();
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.operation,
            p(r, "x0"),
            p(r, "lambda"),
            p(r, "t"),
            r.analytic,
            r.analytic_stderr,
            r.mc.value,
            r.mc.stderr,
            r.mc.n,
            r.z_score,
            r.pass
        )?;
    }
    Ok(())
}

/// The fixed environment of quenched runs: forward environment 0.
fn quenched_env(cfg: &Config) -> Result<EnvironmentPath, CliError> {
    let s = cfg.simulation();
    Ok(EnvSampler::new(&cfg.chars)?.sample(s.t, s.dt, SeedTag::new(cfg.seed, StreamKind::Environment, 0))?)
}

fn finish_laws(out: &Output, kind: Kind, reports: &[LawReport], csv: &str) -> Result<Outcome, CliError> {
    reports.iter().for_each(print_law);
    let pass = reports.iter().all(|r| r.pass);
    out.csv(csv, |w| law_csv(w, reports))?;
    out.report(kind, pass, &out.stamp(reports))?;
    Ok(outcome(pass))
}

pub fn validate(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let beta = cfg.chars.beta()?;
    let mean = cfg.chars.mean_xi1().ok();
    let mut summary = json!({
        "config_kind": cfg.kind.name(),
        "valid": true,
        "beta": beta,
        "mean_xi1": mean,
    });
    println!("config {} is valid ({})", cfg.path.display(), cfg.kind.name());
    println!(
        "  beta = {beta}, E xi(1) = {}",
        mean.map_or("undefined".into(), |m| m.to_string())
    );
    if let Some(model) = &cfg.model {
        let grey = match model.bm.greys_condition() {
            Ok(GreyStatus::Holds) => "holds",
            Ok(GreyStatus::Fails) => "fails",
            Err(_) => "not applicable",
        };
        summary["grey_condition"] = json!(grey);
        println!("  Grey's condition: {grey}");
        if let Some(im) = &model.im {
            let ergodic = match check_ergodic(&model.chars, &model.bm, im) {
                Ok(rate) => json!({ "ergodic": true, "rate": rate }),
                Err(e) => json!({ "ergodic": false, "reason": e.to_string() }),
            };
            println!("  ergodicity: {ergodic}");
            summary["ergodicity"] = ergodic;
        }
    }
    out.report(Kind::Validate, true, &summary)?;
    Ok(Outcome::Pass)
}

pub fn env_sample(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let s = cfg.simulation();
    let sampler = EnvSampler::new(&cfg.chars)?;
    let n = cfg.experiment.export_paths.max(1);
    let mut finals = Vec::with_capacity(n as usize);
    for j in 0..n {
        let env = sampler.sample(s.t, s.dt, SeedTag::new(cfg.seed, StreamKind::Environment, j))?;
        finals.push(*env.xi().last().expect("paths have a start"));
        out.csv(&format!("env_{j:04}.csv"), |w| env.write_csv(w))?;
    }
    println!("wrote {n} environment paths to {}", out.dir().display());
    out.report(
        Kind::EnvSample,
        true,
        &json!({ "paths": n, "dt": s.dt, "t": s.t, "final_xi": finals }),
    )?;
    Ok(Outcome::Pass)
}

fn paths_csv(w: &mut dyn Write, paths: &[ProcessPath], column: &str) -> io::Result<()> {
    write!(w, "t")?;
    for k in 0..paths.len() {
        write!(w, ",{column}_{k}")?;
    }
    writeln!(w)?;
    for (i, t) in paths[0].times().enumerate() {
        write!(w, "{t}")?;
        for p in paths {
            write!(w, ",{}", p.states[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn simulate(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let model = cfg.model();
    let s = cfg.simulation();
    let run = cfg.run();
    let env = quenched_env(cfg)?;
    let x0 = cfg.experiment.x[0];
    let n = cfg.experiment.export_paths.max(1);
    let paths = (0..n)
        .map(|k| {
            let mut rng = substream(cfg.seed, StreamKind::Replica, k);
            match &model.im {
                Some(im) => simulate_cbire(x0, &model.bm, im, &env, &model.chars, &run.cfg, &mut rng),
                None => simulate_cbre(x0, &model.bm, &env, &model.chars, &run.cfg, &mut rng),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.csv("env.csv", |w| env.write_csv(w))?;
    out.csv("paths.csv", |w| paths_csv(w, &paths, "x"))?;
    let extinct = paths.iter().filter(|p| p.extinction_time.is_some()).count();
    println!(
        "wrote {n} paths ({extinct} extinct by t = {}) to {}",
        s.t,
        out.dir().display()
    );
    if model.im.is_some() {
        out.report(Kind::Simulate, true, &json!({ "paths": n, "extinct": extinct }))?;
        return Ok(Outcome::Pass);
    }
    let z: Vec<ProcessPath> = paths
        .iter()
        .map(|p| {
            Ok(ProcessPath {
                states: z_transform(p, &env)?,
                ..p.clone()
            })
        })
        .collect::<Result<_, cbrelab_core::Error>>()?;
    out.csv("z.csv", |w| paths_csv(w, &z, "z"))?;
    let mart = martingale_check(model, &env, x0, s.t, s.n_paths.max(2), &run)?;
    print_law(&mart);
    let pass = mart.pass;
    out.report(
        Kind::Simulate,
        pass,
        &json!({ "paths": n, "extinct": extinct, "martingale": out.stamp(std::slice::from_ref(&mart))[0] }),
    )?;
    Ok(outcome(pass))
}

pub fn laplace(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let model = cfg.model();
    let s = cfg.simulation();
    let run = cfg.run();
    let e = &cfg.experiment;
    if e.variant == Variant::SizeBiased {
        return sizebiased(cfg, model, out);
    }
    let env = quenched_env(cfg)?;
    let mut reports = Vec::new();
    for &x in &e.x {
        let batch = match (&model.im, s.mode) {
            (Some(_), _) => cbire_laplace(model, cfg.environments(&env), x, s.t, &e.lambdas, s.n_paths, &run)?,
            (None, Mode::Quenched) => quenched_laplace(model, &env, x, s.t, &e.lambdas, s.n_paths, &run)?,
            (None, Mode::Annealed) => {
                annealed_laplace(model, x, s.t, &e.lambdas, s.n_env, s.n_paths, s.n_analytic, &run)?
            }
        };
        reports.extend(batch);
    }
    finish_laws(out, Kind::Laplace, &reports, "laplace.csv")
}

fn sizebiased(cfg: &Config, model: &Model, out: &Output) -> Result<Outcome, CliError> {
    let s = cfg.simulation();
    let run = cfg.run();
    let mut rows = Vec::new();
    for &x in &cfg.experiment.x {
        for &lam in &cfg.experiment.lambdas {
            let est = sizebiased_laplace(model, x, s.t, lam, s.n_env, &run)?;
            println!(
                "size-biased [x0={x} lambda={lam} t={}]: {:.6} ± {:.1e}",
                s.t, est.value, est.stderr
            );
            rows.push(json!({ "x0": x, "lambda": lam, "t": s.t, "estimate": est }));
        }
    }
    out.csv("sizebiased.csv", |w| {
        writeln!(w, "x0,lambda,t,value,stderr,n")?;
        for r in &rows {
            let est = &r["estimate"];
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r["x0"], r["lambda"], r["t"], est["value"], est["stderr"], est["n"]
            )?;
        }
        Ok(())
    })?;
    out.report(Kind::Laplace, true, &rows)?;
    Ok(Outcome::Pass)
}

pub fn extinction(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let model = cfg.model();
    let s = cfg.simulation();
    let run = cfg.run();
    let e = &cfg.experiment;
    if e.variant == Variant::Survival {
        let mut rows = Vec::new();
        let mut pass = true;
        for &x in &e.x {
            let rep = survival_longrun(model, x, &e.t_ladder, s.n_env, &run)?;
            let est = rep.estimate;
            let ok = !rep.certain_extinction || (1.0 - est.value) <= Z_THRESHOLD * est.stderr + run.tol;
            pass &= ok;
            println!(
                "{} survival [x0={x}]: P(extinction) = {:.6} ± {:.1e}, certain extinction by parameters: {}",
                verdict(ok),
                est.value,
                est.stderr,
                rep.certain_extinction
            );
            rows.push((x, rep));
        }
        out.csv("survival.csv", |w| {
            writeln!(w, "x0,t,probability,stderr")?;
            for (x, rep) in &rows {
                for (t, est) in &rep.ladder {
                    writeln!(w, "{x},{t},{},{}", est.value, est.stderr)?;
                }
            }
            Ok(())
        })?;
        let body: Vec<_> = rows
            .iter()
            .map(|(x, rep)| json!({ "x0": x, "survival": rep }))
            .collect();
        out.report(Kind::Extinction, pass, &body)?;
        return Ok(outcome(pass));
    }
    let env = quenched_env(cfg)?;
    let reports =
        e.x.iter()
            .map(|&x| extinction_report(model, cfg.environments(&env), x, s.t, s.n_paths, &run))
            .collect::<Result<Vec<_>, _>>()?;
    finish_laws(out, Kind::Extinction, &reports, "extinction.csv")
}

pub fn stationary(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let model = cfg.model();
    let s = cfg.simulation();
    let run = cfg.run();
    let e = &cfg.experiment;
    let horizon = e.stationary_horizon.unwrap_or(s.t);
    if e.variant == Variant::Ergodic {
        let n_analytic = s.n_analytic.max(2);
        let mut reports = Vec::new();
        let mut pass = true;
        let mut bodies = Vec::new();
        for &lam in &e.lambdas {
            let rep = ergodic_convergence(
                model,
                lam,
                &e.x,
                &e.t_ladder,
                horizon,
                s.n_env,
                s.n_paths,
                n_analytic,
                &run,
            )?;
            pass &= rep.pass;
            println!(
                "stationary transform at lambda={lam}: {:.6} ± {:.1e}; gaps nonincreasing: {}",
                rep.stationary.value, rep.stationary.stderr, rep.gap_nonincreasing
            );
            reports.extend(rep.rows.iter().cloned());
            bodies.push(rep);
        }
        for r in &reports {
            println!(
                "  x0={} t={}: forward {:.6} ± {:.1e}, gap {:.1e}",
                r.param("x0").unwrap_or_default(),
                r.param("t").unwrap_or_default(),
                r.mc.value,
                r.mc.stderr,
                (r.mc.value - r.analytic).abs()
            );
        }
        println!("{} ergodic convergence", verdict(pass));
        out.csv("ergodic.csv", |w| law_csv(w, &reports))?;
        out.report(Kind::Stationary, pass, &bodies)?;
        return Ok(outcome(pass));
    }
    let mut rows = Vec::new();
    for &lam in &e.lambdas {
        let est = stationary_laplace(model, lam, horizon, s.n_env, &run)?;
        println!("stationary [lambda={lam}]: {:.6} ± {:.1e}", est.value, est.stderr);
        rows.push((lam, est));
    }
    out.csv("stationary.csv", |w| {
        writeln!(w, "lambda,value,stderr,n")?;
        for (lam, est) in &rows {
            writeln!(w, "{lam},{},{},{}", est.value, est.stderr, est.n)?;
        }
        Ok(())
    })?;
    let body: Vec<_> = rows
        .iter()
        .map(|(lam, est)| json!({ "lambda": lam, "estimate": est }))
        .collect();
    out.report(Kind::Stationary, true, &body)?;
    Ok(Outcome::Pass)
}

pub fn coupling(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let model = cfg.model();
    let s = cfg.simulation();
    let run = cfg.run();
    let e = &cfg.experiment;
    let y =
        e.y.ok_or_else(|| CliError::Config(format!("{}: coupling needs experiment.y", cfg.path.display())))?;
    let env = quenched_env(cfg)?;
    let rep = strong_feller_gap(model, cfg.environments(&env), e.x[0], y, s.t, s.n_paths, &run)?;
    print_law(&rep.law);
    println!(
        "monotonicity: {} violations over {} grid points",
        rep.monotonicity_violations, rep.grid_points_checked
    );
    let pass = rep.law.pass && rep.monotonicity_violations == 0;
    out.csv("coupling.csv", |w| law_csv(w, std::slice::from_ref(&rep.law)))?;
    out.report(Kind::Coupling, pass, &out.stamp(std::slice::from_ref(&rep)))?;
    Ok(outcome(pass))
}

pub fn generator(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    let model = cfg.model();
    let s = cfg.simulation();
    let run = cfg.run();
    let e = &cfg.experiment;
    let h = e.h.unwrap_or(s.dt);
    let mut reports = Vec::new();
    for &x in &e.x {
        for &lam in &e.lambdas {
            let rep = generator_check(model, lam, x, h, s.n_paths, e.max_relative_error, &run)?;
            println!(
                "{} generator [x={x} lambda={lam} h={h}]: Af = {:.6}, quotient {:.6} ± {:.1e}, relative error {:.2}%",
                verdict(rep.law.pass),
                rep.law.analytic,
                rep.law.mc.value,
                rep.law.mc.stderr,
                100.0 * rep.relative_error
            );
            reports.push(rep);
        }
    }
    let pass = reports.iter().all(|r| r.law.pass);
    out.csv("generator.csv", |w| {
        writeln!(w, "x,lambda,h,analytic,mc,mc_stderr,relative_error,pass")?;
        for r in &reports {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.law.param("x").unwrap_or_default(),
                r.law.param("lambda").unwrap_or_default(),
                r.h,
                r.law.analytic,
                r.law.mc.value,
                r.law.mc.stderr,
                r.relative_error,
                r.law.pass
            )?;
        }
        Ok(())
    })?;
    out.report(Kind::GeneratorCheck, pass, &out.stamp(&reports))?;
    Ok(outcome(pass))
}

/// Runs one config of any non-battery kind.
pub fn dispatch(cfg: &Config, out: &Output) -> Result<Outcome, CliError> {
    match cfg.kind {
        Kind::Validate => validate(cfg, out),
        Kind::EnvSample => env_sample(cfg, out),
        Kind::Simulate => simulate(cfg, out),
        Kind::Laplace => laplace(cfg, out),
        Kind::Extinction => extinction(cfg, out),
        Kind::Stationary => stationary(cfg, out),
        Kind::Coupling => coupling(cfg, out),
        Kind::GeneratorCheck => generator(cfg, out),
        Kind::Battery => Err(CliError::Config(format!(
            "{}: batteries cannot be nested",
            cfg.path.display()
        ))),
    }
}

#[derive(Serialize)]
struct BatteryEntry {
    config: String,
    kind: Option<&'static str>,
    exit_code: u8,
    pass: bool,
    message: Option<String>,
}

/// Runs every member config into its own subdirectory; the outcome is the
/// most severe member outcome.
pub fn battery(cfg: &Config, out: &Output, seed: Option<u64>) -> Result<Outcome, CliError> {
    let mut entries = Vec::new();
    let mut worst = Outcome::Pass;
    for path in &cfg.members {
        let stem = path
            .file_stem()
            .map_or("member".into(), |s| s.to_string_lossy().into_owned());
        let result = Config::load(path).and_then(|mut member| {
            if let Some(seed) = seed {
                member.seed = seed;
            }
            let kind = member.kind;
            let sub = Output::new(out.dir().join(&stem), &member)?;
            dispatch(&member, &sub).map(|o| (kind, o))
        });
        let (kind, outcome, message) = match result {
            Ok((kind, o)) => (Some(kind.name()), o, None),
            Err(e) => {
                eprintln!("error: {e}");
                (None, e.outcome(), Some(e.to_string()))
            }
        };
        println!(
            "{} battery member {}",
            verdict(outcome == Outcome::Pass),
            path.display()
        );
        worst = worst.max(outcome);
        entries.push(BatteryEntry {
            config: path.display().to_string(),
            kind,
            exit_code: outcome.code(),
            pass: outcome == Outcome::Pass,
            message,
        });
    }
    let pass = worst == Outcome::Pass;
    println!(
        "battery: {} of {} members passed",
        entries.iter().filter(|e| e.pass).count(),
        entries.len()
    );
    out.report(Kind::Battery, pass, &entries)?;
    Ok(worst)
}
