//! Experiment dispatch: one function per subcommand, each writing its
//! outputs under the configured directory and returning a summary line.

use std::path::{Path, PathBuf};

use rnls_core::analysis::{
    self, Abscissa, JumpReport, LoopReport, OmegaCReport, Ordinate, RateFit, SweepOptions,
    SweepRecord,
};
use rnls_core::fieldfile::write_field;
use rnls_core::solver::{self, GroundStateResult};
use rnls_core::{Error, Field, ModelParams};
use serde::Serialize;

use crate::config::{ExperimentKind, Format, RunConfig};
use crate::output::{csv_file, fmt_f64, json_lines_file, CsvRow, DirLock};

/// Field values this far below the peak count as decayed at the box edge.
const BOUNDARY_WARN_FRAC: f64 = 1e-6;

/// Default bisection width of `omega-c`.
pub const DEFAULT_BRACKET_TOL: f64 = 1.0 / 128.0;

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(String),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::InvalidParams(_)
            | Error::InvalidConfig(_)
            | Error::OmegaAboveThreshold { .. }
            | Error::FieldFile { .. } => RunError::Config(e.to_string()),
            _ => RunError::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Solver(format!("io: {e}"))
    }
}

pub struct Outcome {
    pub summary: String,
    /// Every solve reached its tolerances.
    pub converged: bool,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    if cfg.kind == ExperimentKind::Info {
        return info(cfg);
    }
    let _lock = DirLock::acquire(&cfg.output.directory)?;
    match cfg.kind {
        ExperimentKind::Solve => solve(cfg),
        ExperimentKind::SolveEnergy => solve_energy(cfg),
        ExperimentKind::Sweep => {
            sweep(cfg, cfg.experiment.warm_start.unwrap_or(false)).map(|(o, _)| o)
        }
        ExperimentKind::Rates => rates(cfg),
        ExperimentKind::OmegaC => omega_c(cfg),
        ExperimentKind::Loop => equivalence_loop(cfg),
        ExperimentKind::Scan => scan(cfg),
        ExperimentKind::Tf => tf(cfg),
        ExperimentKind::Lambda0 => lambda0(cfg),
        ExperimentKind::Info => unreachable!(),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.directory.join(name)
}

/// Writes `rows` as `stem.csv` and/or `stem.jsonl` per the output formats.
fn emit<R: CsvRow + Serialize>(cfg: &RunConfig, stem: &str, rows: &[R]) -> std::io::Result<()> {
    if cfg.wants(Format::Csv) {
        csv_file(rows, &out_path(cfg, &format!("{stem}.csv")))?;
    }
    if cfg.wants(Format::JsonLines) {
        json_lines_file(rows, &out_path(cfg, &format!("{stem}.jsonl")))?;
    }
    Ok(())
}

fn warn_boundary(field: &Field, what: &str) {
    let peak = field.max_abs();
    let edge = field.boundary_max_abs();
    if peak > 0.0 && edge > BOUNDARY_WARN_FRAC * peak {
        eprintln!(
            "warning: {what}: |phi| at the box edge is {:.2e} of its peak; enlarge the box",
            edge / peak
        );
    }
}

fn save(cfg: &RunConfig, name: &str, field: &Field, params: &ModelParams) -> std::io::Result<()> {
    write_field(field, params, &out_path(cfg, name))
        .map_err(|e| std::io::Error::other(e.to_string()))
}

fn summary(r: &SweepRecord) -> String {
    format!(
        "action={} mass={} n_v={} iters={} converged={}",
        fmt_f64(r.action),
        fmt_f64(r.mass),
        r.n_vortices,
        r.iters,
        r.converged
    )
}

fn solve(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let res = analysis::solve_action(&cfg.params, &cfg.grid, &cfg.solver, &[])?;
    warn_boundary(&res.field, "solve");
    let rec = SweepRecord::from_result(&cfg.params, &res);
    save(cfg, "gs.field", &res.field, &cfg.params)?;
    emit(cfg, "gs", std::slice::from_ref(&rec))?;
    Ok(Outcome {
        summary: summary(&rec),
        converged: res.converged,
    })
}

/// Parameters at which an energy ground state is stationary: `ω = −μ`.
fn energy_params(cfg: &RunConfig, res: &GroundStateResult) -> ModelParams {
    cfg.params.with_omega(-res.diags.mu)
}

fn solve_energy(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let mass = cfg.experiment.mass.expect("validated");
    let ecfg = solver::SolverConfig {
        init: cfg.solver.init.clone(),
        ..cfg.energy_solver.clone()
    };
    let res = analysis::solve_energy(mass, &cfg.params, &cfg.grid, &ecfg)?;
    warn_boundary(&res.field, "solve-energy");
    let params = energy_params(cfg, &res);
    let rec = SweepRecord::from_result(&params, &res);
    save(cfg, "egs.field", &res.field, &params)?;
    emit(cfg, "egs", std::slice::from_ref(&rec))?;
    Ok(Outcome {
        summary: format!(
            "{} energy={} mu={}",
            summary(&rec),
            fmt_f64(rec.energy),
            fmt_f64(rec.mu)
        ),
        converged: res.converged,
    })
}

fn sweep(cfg: &RunConfig, warm_start: bool) -> Result<(Outcome, Vec<SweepRecord>), RunError> {
    let opts = SweepOptions {
        warm_start,
        both_directions: cfg.experiment.both_directions,
        ..Default::default()
    };
    let outcomes = analysis::sweep_omega(&cfg.params, &cfg.omegas, &cfg.grid, &cfg.solver, opts);
    let mut records = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => {
                eprintln!("sweep: omega={} failed: {}", f.omega, f.message);
                failed += 1;
            }
        }
    }
    emit(cfg, "sweep", &records)?;
    let unconverged = records.iter().filter(|r| !r.converged).count();
    let summary = format!(
        "points={} converged={} unconverged={unconverged} failed={failed}",
        cfg.omegas.len(),
        records.len() - unconverged
    );
    Ok((
        Outcome {
            summary,
            converged: unconverged == 0 && failed == 0,
        },
        records,
    ))
}

#[derive(Serialize)]
struct RateRow {
    quantity: &'static str,
    abscissa: String,
    #[serde(flatten)]
    fit: RateFit,
}

impl CsvRow for RateRow {
    fn header() -> Vec<&'static str> {
        vec![
            "quantity",
            "abscissa",
            "slope",
            "intercept",
            "r_squared",
            "window_lo",
            "window_hi",
            "points",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.quantity.to_string(),
            self.abscissa.clone(),
            fmt_f64(self.fit.slope),
            fmt_f64(self.fit.intercept),
            fmt_f64(self.fit.r_squared),
            fmt_f64(self.fit.window.0),
            fmt_f64(self.fit.window.1),
            self.fit.points.to_string(),
        ]
    }
}

fn rates(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let (outcome, records) = sweep(cfg, cfg.experiment.warm_start.unwrap_or(true))?;
    let abscissa = match cfg.experiment.abscissa.as_deref() {
        Some("abs_omega") => Abscissa::AbsOmega,
        _ => Abscissa::ThresholdDistance(solver::lambda0(&cfg.params, &cfg.grid, &cfg.solver)?),
    };
    let label = match abscissa {
        Abscissa::AbsOmega => "abs_omega".to_string(),
        Abscissa::ThresholdDistance(l) => format!("threshold(lambda0={l})"),
    };
    let (lo, hi) = cfg
        .omegas
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| {
            (a.min(w), b.max(w))
        });
    let window = cfg
        .experiment
        .window
        .map(|w| (w[0], w[1]))
        .unwrap_or((lo, hi));
    let fit = |y| analysis::fit_rate(&records, abscissa, y, window);
    let rows = vec![
        RateRow {
            quantity: "mass",
            abscissa: label.clone(),
            fit: fit(Ordinate::Mass)?,
        },
        RateRow {
            quantity: "abs_action",
            abscissa: label,
            fit: fit(Ordinate::AbsAction)?,
        },
    ];
    emit(cfg, "rates", &rows)?;
    Ok(Outcome {
        summary: format!(
            "mass_slope={:.6} action_slope={:.6} {}",
            rows[0].fit.slope, rows[1].fit.slope, outcome.summary
        ),
        converged: outcome.converged,
    })
}

impl CsvRow for OmegaCReport {
    fn header() -> Vec<&'static str> {
        vec![
            "omega",
            "lo",
            "hi",
            "action_lo",
            "action_hi",
            "ambiguous",
            "action_at_rest",
            "probes",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt_f64(self.omega),
            fmt_f64(self.lo),
            fmt_f64(self.hi),
            fmt_f64(self.action_lo),
            fmt_f64(self.action_hi),
            self.ambiguous.to_string(),
            fmt_f64(self.action_at_rest),
            self.probes.len().to_string(),
        ]
    }
}

fn omega_c(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let tol = cfg.experiment.bracket_tol.unwrap_or(DEFAULT_BRACKET_TOL);
    let mut reports = Vec::new();
    for &w in &cfg.omegas {
        reports.push(analysis::critical_omega_c(
            &cfg.params.with_omega(w),
            &cfg.grid,
            &cfg.solver,
            tol,
        )?);
    }
    emit(cfg, "omega_c", &reports)?;
    let brackets: Vec<String> = reports
        .iter()
        .map(|r| format!("omega={} Omega_c=({:.6},{:.6})", r.omega, r.lo, r.hi))
        .collect();
    Ok(Outcome {
        summary: brackets.join(" "),
        converged: true,
    })
}

impl CsvRow for LoopReport {
    fn header() -> Vec<&'static str> {
        vec![
            "omega",
            "Omega",
            "action_gs",
            "mass",
            "energy_gs",
            "mu_gs",
            "e_rel_omega",
            "e_rel_S",
            "action_converged",
            "energy_converged",
            "action_iters",
            "energy_iters",
            "n_vortices",
            "action_init",
            "energy_init",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt_f64(self.omega),
            fmt_f64(self.rotation),
            fmt_f64(self.action_gs),
            fmt_f64(self.mass),
            fmt_f64(self.energy_gs),
            fmt_f64(self.mu_gs),
            fmt_f64(self.e_rel_omega),
            fmt_f64(self.e_rel_s),
            self.action_converged.to_string(),
            self.energy_converged.to_string(),
            self.action_iters.to_string(),
            self.energy_iters.to_string(),
            self.n_vortices.to_string(),
            self.action_init.clone(),
            self.energy_init.clone(),
        ]
    }
}

fn equivalence_loop(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let single = cfg.omegas.len() == 1;
    let mut reports = Vec::new();
    for (i, &w) in cfg.omegas.iter().enumerate() {
        let params = cfg.params.with_omega(w);
        let (report, action, energy) =
            analysis::equivalence_loop(&params, &cfg.grid, &cfg.solver, &cfg.energy_solver)?;
        warn_boundary(&action.field, "loop");
        let (g, e) = if single {
            ("gs.field".into(), "egs.field".into())
        } else {
            (format!("gs_{i}.field"), format!("egs_{i}.field"))
        };
        save(cfg, &g, &action.field, &params)?;
        save(cfg, &e, &energy.field, &energy_params(cfg, &energy))?;
        reports.push(report);
    }
    emit(cfg, "loop", &reports)?;
    let converged = reports
        .iter()
        .all(|r| r.action_converged && r.energy_converged);
    let parts: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "omega={} action={} mass={} mu_g={:.9} e_rel_omega={:.3e} e_rel_S={:.3e} n_v={} iters={}",
                r.omega, fmt_f64(r.action_gs), fmt_f64(r.mass), r.mu_gs, r.e_rel_omega, r.e_rel_s, r.n_vortices, r.action_iters
            )
        })
        .collect();
    Ok(Outcome {
        summary: parts.join("; "),
        converged,
    })
}

impl CsvRow for JumpReport {
    fn header() -> Vec<&'static str> {
        vec![
            "omega_critical",
            "bracket_lo",
            "bracket_hi",
            "bracket_width",
            "mass_below",
            "mass_above",
            "forbidden_lo",
            "forbidden_hi",
            "n_vortices_below",
            "n_vortices_above",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt_f64(self.omega_critical),
            fmt_f64(self.bracket.0),
            fmt_f64(self.bracket.1),
            fmt_f64(self.bracket_width),
            fmt_f64(self.mass_below),
            fmt_f64(self.mass_above),
            fmt_f64(self.forbidden_interval.0),
            fmt_f64(self.forbidden_interval.1),
            self.n_vortices_below.to_string(),
            self.n_vortices_above.to_string(),
        ]
    }
}

fn scan(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let e = &cfg.experiment;
    let range = match e.range {
        Some(r) => (r[0], r[1]),
        None => {
            return Err(RunError::Config(
                "config: scan needs experiment.range = [lo, hi]".into(),
            ))
        }
    };
    let mesh = e.mesh_step.unwrap_or(0.01);
    let resolution = e.resolution.unwrap_or(1e-3);
    let report = analysis::nonequivalence_scan(
        &cfg.params,
        range,
        mesh,
        resolution,
        &cfg.grid,
        &cfg.solver,
    )?;
    emit(cfg, "scan", &report.records)?;
    emit(cfg, "jumps", &report.jumps)?;
    let jumps: Vec<String> = report
        .jumps
        .iter()
        .map(|j| {
            format!(
                "omega_cr={:.6} forbidden=({:.4},{:.4})",
                j.omega_critical, j.forbidden_interval.0, j.forbidden_interval.1
            )
        })
        .collect();
    Ok(Outcome {
        summary: format!(
            "points={} jumps={} {}",
            report.records.len(),
            report.jumps.len(),
            jumps.join(" ")
        ),
        converged: report.records.iter().all(|r| r.converged),
    })
}

#[derive(Serialize)]
struct TfRow {
    omega: f64,
    mass: f64,
    action: f64,
    l2_error: f64,
    converged: bool,
}

impl CsvRow for TfRow {
    fn header() -> Vec<&'static str> {
        vec!["omega", "mass", "action", "l2_error", "converged"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt_f64(self.omega),
            fmt_f64(self.mass),
            fmt_f64(self.action),
            fmt_f64(self.l2_error),
            self.converged.to_string(),
        ]
    }
}

fn tf(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let mut rows = Vec::new();
    for &w in &cfg.omegas {
        let params = cfg.params.with_omega(w);
        let res = analysis::solve_action(&params, &cfg.grid, &cfg.solver, &[])?;
        rows.push(TfRow {
            omega: w,
            mass: res.diags.mass,
            action: res.diags.action,
            l2_error: analysis::tf_compare(&res.field, &params)?,
            converged: res.converged,
        });
    }
    emit(cfg, "tf", &rows)?;
    let parts: Vec<String> = rows
        .iter()
        .map(|r| format!("omega={} l2_error={:.6e}", r.omega, r.l2_error))
        .collect();
    Ok(Outcome {
        summary: parts.join(" "),
        converged: rows.iter().all(|r| r.converged),
    })
}

#[derive(Serialize)]
struct Lambda0Row {
    #[serde(rename = "Omega")]
    rotation: f64,
    lambda0: f64,
    closed_form: Option<f64>,
}

impl CsvRow for Lambda0Row {
    fn header() -> Vec<&'static str> {
        vec!["Omega", "lambda0", "closed_form"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt_f64(self.rotation),
            fmt_f64(self.lambda0),
            self.closed_form.map(fmt_f64).unwrap_or_default(),
        ]
    }
}

/// Smallest eigenvalue of the linear rotating operator from the normalized
/// linear flow, next to the closed form where one exists.
fn lambda0(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let p = &cfg.params;
    let (value, _) =
        solver::linear_ground_mode(&p.potential, p.rotation, &cfg.grid, &cfg.energy_solver)?;
    let row = Lambda0Row {
        rotation: p.rotation,
        lambda0: value,
        closed_form: p.potential.closed_form_lambda0(cfg.grid.dim(), p.rotation),
    };
    emit(cfg, "lambda0", std::slice::from_ref(&row))?;
    let closed = row
        .closed_form
        .map(|c| format!(" closed_form={c:.6}"))
        .unwrap_or_default();
    Ok(Outcome {
        summary: format!("lambda0={value:.6}{closed}"),
        converged: true,
    })
}

fn info(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let p = &cfg.params;
    let axes: Vec<String> = cfg
        .grid
        .axes()
        .iter()
        .map(|a| format!("[{}, {}]x{}", a.min, a.max, a.n))
        .collect();
    let closed = p.potential.closed_form_lambda0(cfg.grid.dim(), p.rotation);
    let tf_mass = analysis::thomas_fermi_mass(p, cfg.grid.dim()).ok();
    println!("grid: dim={} axes={}", cfg.grid.dim(), axes.join(" "));
    println!(
        "model: p={} beta={} Omega={} omega={:?} potential={:?}",
        p.p, p.beta, p.rotation, cfg.omegas, p.potential
    );
    println!("Omega_max={}", p.potential.omega_max());
    match closed {
        Some(l) => println!("lambda0 (closed form)={l}"),
        None => println!("lambda0: no closed form, computed by the linear flow"),
    }
    if let Some(m) = tf_mass {
        println!("rescaled Thomas-Fermi mass={m}");
    }
    println!("threads={}", rayon::current_num_threads());
    println!(
        "output: {} {:?}",
        cfg.output.directory.display(),
        cfg.output.formats
    );
    Ok(Outcome {
        summary: format!("experiment={} ok", cfg.kind.name()),
        converged: true,
    })
}

/// Reads a config file, naming the path on failure.
pub fn read_config_text(path: &Path) -> Result<String, RunError> {
    std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("config: cannot read {}: {e}", path.display())))
}
