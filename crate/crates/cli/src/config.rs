//! Sectioned run configuration (TOML) with `--set section.key=value`
//! overrides applied before validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use rnls_core::analysis::omega_mesh;
use rnls_core::solver::{InitSpec, Method, SolverConfig, Stabilization};
use rnls_core::{Axis, Grid, ModelParams, PotentialSpec};

#[derive(Debug, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    SolveEnergy,
    Sweep,
    Rates,
    OmegaC,
    Loop,
    Scan,
    Tf,
    Lambda0,
    Info,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::SolveEnergy => "solve-energy",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Rates => "rates",
            ExperimentKind::OmegaC => "omega-c",
            ExperimentKind::Loop => "loop",
            ExperimentKind::Scan => "scan",
            ExperimentKind::Tf => "tf",
            ExperimentKind::Lambda0 => "lambda0",
            ExperimentKind::Info => "info",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub dim: usize,
    /// Symmetric box `[−half_width, half_width]` on every axis.
    pub half_width: f64,
    /// Points per axis.
    pub n: usize,
    /// Per-axis `[min, max]`; overrides `half_width`.
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Per-axis point counts; overrides `n`.
    pub sizes: Option<Vec<usize>>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            dim: 2,
            half_width: 12.0,
            n: 256,
            bounds: None,
            sizes: None,
        }
    }
}

/// Explicit list or arithmetic range of frequencies.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum OmegaList {
    Values(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub p: f64,
    pub beta: f64,
    #[serde(rename = "Omega")]
    pub rotation: f64,
    pub omega: Option<f64>,
    pub omega_list: Option<OmegaList>,
    pub potential: PotentialSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            p: 3.0,
            beta: 1.0,
            rotation: 0.0,
            omega: None,
            omega_list: None,
            potential: PotentialSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum StabilizationValue {
    Fixed(f64),
    Named(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum InitValue {
    One(String),
    Many(Vec<String>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub method: Method,
    pub tau: f64,
    pub stabilization: StabilizationValue,
    pub tol_step: f64,
    pub tol_residual: f64,
    pub max_iters: usize,
    pub init: InitValue,
    pub seed: u64,
    pub max_restarts: usize,
    pub nehari_every: usize,
    pub screen_iters: Option<usize>,
    /// Step size of the energy flow in `solve-energy` and `loop`.
    pub energy_tau: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSection {
            method: d.method,
            tau: 0.01,
            stabilization: StabilizationValue::Named("auto".into()),
            tol_step: d.tol_step,
            tol_residual: d.tol_residual,
            max_iters: d.max_iters,
            init: InitValue::One("auto".into()),
            seed: d.seed,
            max_restarts: d.max_restarts,
            nehari_every: d.nehari_every,
            screen_iters: None,
            energy_tau: None,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub kind: Option<ExperimentKind>,
    /// Target mass of `solve-energy`.
    pub mass: Option<f64>,
    /// Warm starts along the frequency list; defaults on for `rates`.
    pub warm_start: Option<bool>,
    pub both_directions: bool,
    /// Fit window in `ω` for `rates`.
    pub window: Option<[f64; 2]>,
    /// `threshold` (distance to `−λ₀`) or `abs_omega`.
    pub abscissa: Option<String>,
    pub bracket_tol: Option<f64>,
    /// Frequency range, mesh and bisection resolution of `scan`.
    pub range: Option<[f64; 2]>,
    pub mesh_step: Option<f64>,
    pub resolution: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    JsonLines,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec![Format::Csv],
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub grid: GridSection,
    pub model: ModelSection,
    pub solver: SolverSection,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

/// Validated configuration ready to run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub grid: Arc<Grid>,
    pub params: ModelParams,
    /// Frequencies of list-driven experiments; `[params.omega]` otherwise.
    pub omegas: Vec<f64>,
    pub solver: SolverConfig,
    pub energy_solver: SolverConfig,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_with_overrides(text, &[])
}

/// Parses configuration text, applies `section.key=value` overrides, and
/// validates the result.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
    validate(raw)
}

/// Sets `section.key` (dotted path of any depth) to `value`, read as a TOML
/// value and taken as a plain string if that fails.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let Some((path, value)) = spec.split_once('=') else {
        return err(format!(
            "override '{spec}' must have the form section.key=value"
        ));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return err(format!(
            "override key '{path}' must have the form section.key"
        ));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return err(format!("override '{path}': '{k}' is not a section")),
        };
    }
    node.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

fn build_grid(g: &GridSection) -> Result<Arc<Grid>, ConfigError> {
    if !(1..=2).contains(&g.dim) {
        return err(format!("grid.dim must be 1 or 2, got {}", g.dim));
    }
    let bounds = match &g.bounds {
        Some(b) if b.len() != g.dim => {
            return err(format!(
                "grid.bounds needs {} entries, got {}",
                g.dim,
                b.len()
            ))
        }
        Some(b) => b.clone(),
        None => vec![[-g.half_width, g.half_width]; g.dim],
    };
    let sizes = match &g.sizes {
        Some(s) if s.len() != g.dim => {
            return err(format!(
                "grid.sizes needs {} entries, got {}",
                g.dim,
                s.len()
            ))
        }
        Some(s) => s.clone(),
        None => vec![g.n; g.dim],
    };
    let axes = bounds
        .iter()
        .zip(&sizes)
        .map(|(b, &n)| Axis::new(b[0], b[1], n))
        .collect();
    Grid::new(axes).map_err(|e| ConfigError(e.to_string()))
}

fn parse_init(token: &str) -> Result<InitSpec, ConfigError> {
    let token = token.trim();
    let (head, arg) = match token.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (token, None),
    };
    let number = |a: Option<&str>, what: &str| -> Result<f64, ConfigError> {
        let a = a.ok_or_else(|| ConfigError(format!("solver.init '{token}' needs a {what}")))?;
        a.parse()
            .map_err(|_| ConfigError(format!("solver.init '{token}': bad {what} '{a}'")))
    };
    Ok(match head {
        "auto" => InitSpec::Auto,
        "gaussian" => InitSpec::gaussian(),
        "noisy_gaussian" => InitSpec::noisy_gaussian(number(arg, "noise level")?),
        "thomas_fermi" => InitSpec::ThomasFermi { amplitude: 1.0 },
        "multistart" => InitSpec::default_multistart(),
        "vortex" => {
            let m = number(arg, "winding")?;
            if !(m >= 0.0 && m.fract() == 0.0) {
                return err(format!("solver.init '{token}': winding must be a non-negative integer"));
            }
            InitSpec::vortex(m as u32)
        }
        "file" => {
            let path = PathBuf::from(arg.ok_or_else(|| ConfigError(format!("solver.init '{token}' needs a path")))?);
            if !Path::new(&path).is_file() {
                return err(format!("solver.init: field file {} does not exist", path.display()));
            }
            InitSpec::File(path)
        }
        _ => {
            return err(format!(
                "solver.init '{token}' is not one of auto, gaussian, noisy_gaussian:<a>, vortex:<m>, thomas_fermi, multistart, file:<path>"
            ))
        }
    })
}

fn build_solver(s: &SolverSection, tau: f64) -> Result<SolverConfig, ConfigError> {
    let stabilization = match &s.stabilization {
        StabilizationValue::Fixed(a) => Stabilization::Fixed(*a),
        StabilizationValue::Named(n) if n == "auto" => Stabilization::Auto,
        StabilizationValue::Named(n) => {
            return err(format!(
                "solver.stabilization must be \"auto\" or a number, got '{n}'"
            ))
        }
    };
    let init = match &s.init {
        InitValue::One(t) => parse_init(t)?,
        InitValue::Many(ts) => {
            InitSpec::Multistart(ts.iter().map(|t| parse_init(t)).collect::<Result<_, _>>()?)
        }
    };
    let cfg = SolverConfig {
        method: s.method,
        tau: Some(tau),
        stabilization,
        tol_step: s.tol_step,
        tol_residual: s.tol_residual,
        max_iters: s.max_iters,
        init,
        seed: s.seed,
        max_restarts: s.max_restarts,
        nehari_every: s.nehari_every,
        screen_iters: s.screen_iters,
        record_history: false,
    };
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn validate(raw: RawConfig) -> Result<RunConfig, ConfigError> {
    let Some(kind) = raw.experiment.kind else {
        return err("no experiment selected (set experiment.kind or use a subcommand)");
    };
    let grid = build_grid(&raw.grid)?;
    let m = &raw.model;
    if !(m.beta > 0.0) {
        return err(format!("model.beta must be > 0, got {}", m.beta));
    }
    let omegas = match (&m.omega_list, m.omega) {
        (Some(_), Some(_)) => return err("set model.omega or model.omega_list, not both"),
        (Some(OmegaList::Values(v)), None) => v.clone(),
        (Some(OmegaList::Range { start, stop, step }), None) => omega_mesh(*start, *stop, *step)
            .map_err(|e| ConfigError(format!("model.omega_list: {e}")))?,
        (None, Some(w)) => vec![w],
        (None, None) => vec![-2.0],
    };
    if omegas.is_empty() || omegas.iter().any(|w| !w.is_finite()) {
        return err("model.omega_list must hold finite values");
    }
    let params = ModelParams {
        p: m.p,
        beta: m.beta,
        rotation: m.rotation,
        omega: omegas[0],
        potential: m.potential,
    };
    params
        .validate(grid.dim())
        .map_err(|e| ConfigError(e.to_string()))?;

    let solver = build_solver(&raw.solver, raw.solver.tau)?;
    let energy_tau = raw
        .solver
        .energy_tau
        .unwrap_or(rnls_core::solver::DEFAULT_ENERGY_TAU);
    let energy_solver = SolverConfig {
        init: InitSpec::Auto,
        ..build_solver(&raw.solver, energy_tau)?
    };

    let e = &raw.experiment;
    match kind {
        ExperimentKind::SolveEnergy if !matches!(e.mass, Some(x) if x > 0.0) => {
            return err("solve-energy needs experiment.mass > 0")
        }
        ExperimentKind::OmegaC if grid.dim() != 2 => return err("omega-c needs grid.dim = 2"),
        ExperimentKind::Tf if !matches!(m.potential, PotentialSpec::Harmonic { .. }) => {
            return err("tf needs a harmonic potential")
        }
        ExperimentKind::Rates if omegas.len() < 3 => {
            return err("rates needs model.omega_list with at least three points")
        }
        _ => {}
    }
    if let Some(a) = &e.abscissa {
        if a != "threshold" && a != "abs_omega" {
            return err(format!(
                "experiment.abscissa must be \"threshold\" or \"abs_omega\", got '{a}'"
            ));
        }
    }
    if raw.output.formats.is_empty() {
        return err("output.formats must list at least one of csv, json-lines");
    }
    Ok(RunConfig {
        kind,
        grid,
        params,
        omegas,
        solver,
        energy_solver,
        experiment: raw.experiment,
        output: raw.output,
    })
}
