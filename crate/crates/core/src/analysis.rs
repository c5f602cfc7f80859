//! Experiments built on the solvers: frequency sweeps, power-law fits,
//! Thomas-Fermi comparison, vortex counting, the critical rotation speed,
//! the action/energy loop and the mass-jump scan.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, Field, Grid};
use crate::physics::{Hamiltonian, ModelParams, PotentialSpec};
use crate::solver::{self, GroundStateResult, InitSpec, SolverConfig};

/// Default bulk threshold for vortex counting, relative to `max|φ|²`.
pub const DEFAULT_BULK_FRAC: f64 = 1e-6;

/// Factor over the local median mass increment that marks a jump.
pub const JUMP_FACTOR: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub omega: f64,
    #[serde(rename = "Omega")]
    pub rotation: f64,
    pub mass: f64,
    pub action: f64,
    pub energy: f64,
    pub mu: f64,
    pub lz_expect: f64,
    pub n_vortices: usize,
    pub iters: usize,
    pub converged: bool,
    pub residual: f64,
    pub init_used: String,
}

impl SweepRecord {
    pub fn from_result(params: &ModelParams, res: &GroundStateResult) -> Self {
        SweepRecord {
            omega: params.omega,
            rotation: params.rotation,
            mass: res.diags.mass,
            action: res.diags.action,
            energy: res.diags.energy,
            mu: res.diags.mu,
            lz_expect: res.diags.lz_expect,
            n_vortices: res.vortex_count.unwrap_or(0),
            iters: res.iters,
            converged: res.converged,
            residual: res.diags.pde_residual_l2,
            init_used: res.init_used.clone(),
        }
    }
}

/// A sweep point whose solve failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub omega: f64,
    pub message: String,
}

pub type SweepOutcome = std::result::Result<SweepRecord, SweepFailure>;

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    /// Add the previous point's state to the starts of the next one.
    pub warm_start: bool,
    /// Also sweep the list in reverse and keep the lower action per point.
    pub both_directions: bool,
    pub bulk_frac: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            warm_start: false,
            both_directions: false,
            bulk_frac: DEFAULT_BULK_FRAC,
        }
    }
}

/// Starts for one solve: the configured init plus any warm fields.
fn starts_with_warm(cfg: &SolverConfig, rotation: f64, warm: &[&Field]) -> InitSpec {
    if warm.is_empty() {
        return cfg.init.clone();
    }
    let mut starts = match cfg.init.resolve(rotation) {
        InitSpec::Multistart(v) => v,
        single => vec![single],
    };
    starts.extend(warm.iter().map(|f| InitSpec::Field((*f).clone())));
    InitSpec::Multistart(starts)
}

/// Action ground state from the configured starts plus the given warm
/// fields, with the vortex count filled in.
pub fn solve_action(
    params: &ModelParams,
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
    warm: &[&Field],
) -> Result<GroundStateResult> {
    let cfg = SolverConfig {
        init: starts_with_warm(cfg, params.rotation, warm),
        ..cfg.clone()
    };
    let mut res = solver::action_ground_state(params, grid, &cfg)?;
    annotate_vortices(&mut res, DEFAULT_BULK_FRAC);
    Ok(res)
}

pub fn annotate_vortices(res: &mut GroundStateResult, bulk_frac: f64) {
    res.vortex_count = Some(count_vortices(&res.field, bulk_frac).count);
}

/// One action ground state per frequency, reported in input order.
/// Failures are recorded per point and do not stop the sweep.
pub fn sweep_omega(
    template: &ModelParams,
    omegas: &[f64],
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
    opts: SweepOptions,
) -> Vec<SweepOutcome> {
    sweep_states(template, omegas, grid, cfg, opts)
        .into_iter()
        .zip(omegas)
        .map(|(r, &omega)| match r {
            Ok(res) => Ok(SweepRecord::from_result(&template.with_omega(omega), &res)),
            Err(e) => Err(SweepFailure {
                omega,
                message: e.to_string(),
            }),
        })
        .collect()
}

/// Like [`sweep_omega`] but keeps the full solver results.
pub fn sweep_states(
    template: &ModelParams,
    omegas: &[f64],
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
    opts: SweepOptions,
) -> Vec<Result<GroundStateResult>> {
    let solve = |omega: f64, warm: Option<&Field>| -> Result<GroundStateResult> {
        let params = template.with_omega(omega);
        let warm: Vec<&Field> = warm.into_iter().collect();
        let mut res = solve_action(&params, grid, cfg, &warm)?;
        annotate_vortices(&mut res, opts.bulk_frac);
        Ok(res)
    };
    if !opts.warm_start {
        return omegas.par_iter().map(|&w| solve(w, None)).collect();
    }
    let pass = |order: &mut dyn Iterator<Item = usize>,
                out: &mut Vec<Option<Result<GroundStateResult>>>| {
        let mut last: Option<Field> = None;
        for i in order {
            let r = solve(omegas[i], last.as_ref());
            if let Ok(res) = &r {
                last = Some(res.field.clone());
            }
            out[i] = Some(match out[i].take() {
                Some(Ok(prev)) => match r {
                    Ok(new) if new.diags.action < prev.diags.action => Ok(new),
                    _ => Ok(prev),
                },
                _ => r,
            });
        }
    };
    let mut out: Vec<Option<Result<GroundStateResult>>> = (0..omegas.len()).map(|_| None).collect();
    pass(&mut (0..omegas.len()), &mut out);
    if opts.both_directions {
        pass(&mut (0..omegas.len()).rev(), &mut out);
    }
    out.into_iter()
        .map(|r| r.expect("every point visited"))
        .collect()
}

/// Evenly spaced list from `start` towards `stop` (inclusive when it lands
/// on the mesh), robust to rounding in the step count.
pub fn omega_mesh(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step != 0.0 && start.is_finite() && stop.is_finite()) {
        return Err(Error::Analysis(format!(
            "invalid mesh {start}..{stop} step {step}"
        )));
    }
    let span = (stop - start) / step;
    if span < -1e-9 {
        return Ok(Vec::new());
    }
    let count = (span + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + step * i as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Abscissa range of the fitted points (before the log).
    pub window: (f64, f64),
    pub points: usize,
}

/// Abscissa of a rate fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abscissa {
    /// `|ω + λ₀|`.
    ThresholdDistance(f64),
    /// `|ω|`.
    AbsOmega,
}

/// Ordinate of a rate fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordinate {
    Mass,
    AbsAction,
}

/// Least-squares log-log slope of a record quantity against a frequency
/// transform, over converged records with `ω` in `window`.
pub fn fit_rate(
    records: &[SweepRecord],
    x: Abscissa,
    y: Ordinate,
    window: (f64, f64),
) -> Result<RateFit> {
    let (lo, hi) = (window.0.min(window.1), window.0.max(window.1));
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.converged && r.omega >= lo && r.omega <= hi)
        .map(|r| {
            let xv = match x {
                Abscissa::ThresholdDistance(l) => (r.omega + l).abs(),
                Abscissa::AbsOmega => r.omega.abs(),
            };
            let yv = match y {
                Ordinate::Mass => r.mass,
                Ordinate::AbsAction => r.action.abs(),
            };
            (xv, yv)
        })
        .collect();
    fit_loglog(&pts)
}

/// Least-squares fit of `ln y = slope·ln x + intercept`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::Analysis(format!(
            "rate fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::Analysis(
            "rate fit needs positive finite values".into(),
        ));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-300 {
        return Err(Error::Analysis("degenerate abscissa in rate fit".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    let (xmin, xmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        window: (xmin, xmax),
        points: points.len(),
    })
}

fn harmonic_gamma(params: &ModelParams) -> Result<[f64; 2]> {
    match params.potential {
        PotentialSpec::Harmonic { gamma } => Ok(gamma),
        _ => Err(Error::Analysis(
            "the Thomas-Fermi rescaling needs a harmonic potential".into(),
        )),
    }
}

/// `[(1 − V)₊/β]^{1/(p−1)}` on `grid`.
pub fn thomas_fermi_profile(params: &ModelParams, grid: &Arc<Grid>) -> Result<Field> {
    harmonic_gamma(params)?;
    if !(params.beta > 0.0) {
        return Err(Error::Analysis(
            "Thomas-Fermi profile needs beta > 0".into(),
        ));
    }
    let dim = grid.dim();
    let e = 1.0 / (params.p - 1.0);
    let vals: Vec<f64> = grid
        .points()
        .map(|x| ((1.0 - params.potential.value(x, dim)).max(0.0) / params.beta).powf(e))
        .collect();
    Field::from_real(grid.clone(), &vals)
}

/// `‖φ̃‖₂²` of the Thomas-Fermi profile by Gauss-Legendre quadrature over
/// its support, mapped to the unit interval (1D) or disk (2D).
pub fn thomas_fermi_mass(params: &ModelParams, dim: usize) -> Result<f64> {
    let gamma = harmonic_gamma(params)?;
    if !(params.beta > 0.0) {
        return Err(Error::Analysis(
            "Thomas-Fermi profile needs beta > 0".into(),
        ));
    }
    let e = 2.0 / (params.p - 1.0);
    let (nodes, weights) = gauss_legendre(64);
    let scale = params.beta.powf(-e);
    match dim {
        1 => {
            let r = 2f64.sqrt() / gamma[0];
            let s: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(t, w)| w * (1.0 - t * t).powf(e))
                .sum();
            Ok(scale * r * s)
        }
        2 => {
            // x = (√2/γ₁) ρ cos θ, y = (√2/γ₂) ρ sin θ; the profile depends on ρ only
            let jac = 2.0 / (gamma[0] * gamma[1]);
            let s: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(t, w)| {
                    let rho = 0.5 * (t + 1.0);
                    0.5 * w * rho * (1.0 - rho * rho).powf(e)
                })
                .sum();
            Ok(scale * jac * 2.0 * std::f64::consts::PI * s)
        }
        _ => Err(Error::Analysis(format!("unsupported dimension {dim}"))),
    }
}

/// Gauss-Legendre nodes and weights on `[−1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Grid for the rescaled comparison: the support `V ≤ 1` with a 25% margin.
pub fn thomas_fermi_grid(params: &ModelParams, dim: usize) -> Result<Arc<Grid>> {
    let gamma = harmonic_gamma(params)?;
    let n = if dim == 1 { 2048 } else { 256 };
    let axes = (0..dim)
        .map(|a| Axis::symmetric(1.25 * 2f64.sqrt() / gamma[a], n))
        .collect();
    Grid::new(axes)
}

/// Relative L² distance between the rescaled modulus
/// `|ω|^{−1/(p−1)}·|φ(√|ω|·x)|` and the Thomas-Fermi profile.
pub fn tf_compare(field: &Field, params: &ModelParams) -> Result<f64> {
    let gamma = harmonic_gamma(params)?;
    let w = -params.omega;
    if !(w > 0.0) {
        return Err(Error::Analysis(format!(
            "tf_compare needs omega < 0, got {}",
            params.omega
        )));
    }
    let dim = field.grid().dim();
    let src = field.grid().axes();
    let s = w.sqrt();
    for a in 0..dim {
        let support = s * 2f64.sqrt() / gamma[a];
        if support > src[a].max || -support < src[a].min {
            return Err(Error::Analysis(format!(
                "rescaled Thomas-Fermi support {support:.3} exceeds the box on axis {a}"
            )));
        }
    }
    let tf_grid = thomas_fermi_grid(params, dim)?;
    let tf = thomas_fermi_profile(params, &tf_grid)?;
    let amp = w.powf(-1.0 / (params.p - 1.0));
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, t) in tf_grid.points().zip(tf.values()) {
        let y = [s * x[0], s * x[1]];
        let inside = (0..dim).all(|a| y[a] >= src[a].min && y[a] < src[a].max - src[a].spacing());
        let v = if inside {
            amp * field.interpolate(&y[..dim]).norm()
        } else {
            0.0
        };
        num += (v - t.re).powi(2);
        den += t.re * t.re;
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VortexReport {
    pub count: usize,
    pub locations: Vec<[f64; 2]>,
    pub windings: Vec<i64>,
}

/// Counts quantized vortices by the phase winding around grid plaquettes.
///
/// Plaquettes whose centre lies in the convex hull of the bulk nodes
/// (`|φ|² > bulk_frac·max|φ|²`) and carry a nonzero winding are grouped by
/// 8-adjacency; each group contributes the absolute value of its rounded
/// total winding.
pub fn count_vortices(phi: &Field, bulk_frac: f64) -> VortexReport {
    let grid = phi.grid();
    if grid.dim() != 2 {
        return VortexReport::default();
    }
    let (n1, n2) = (grid.axes()[0].n, grid.axes()[1].n);
    let v = phi.values();
    let peak = v.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    if peak == 0.0 {
        return VortexReport::default();
    }
    let bulk: Vec<[f64; 2]> = (0..v.len())
        .filter(|&f| v[f].norm_sqr() > bulk_frac * peak)
        .map(|f| grid.point(f))
        .collect();
    let hull = convex_hull(bulk);
    let x1 = grid.coords(0);
    let x2 = grid.coords(1);
    let at = |i: usize, j: usize| v[i + n1 * j];
    let phase = |a: Complex64, b: Complex64| {
        let z = b * a.conj();
        // exact zeros carry no phase (and a signed zero would give ±π)
        if z.re == 0.0 && z.im == 0.0 {
            0.0
        } else {
            z.arg()
        }
    };

    let (m1, m2) = (n1 - 1, n2 - 1);
    let mut wind = vec![0.0f64; m1 * m2];
    for j in 0..m2 {
        for i in 0..m1 {
            let c = [0.5 * (x1[i] + x1[i + 1]), 0.5 * (x2[j] + x2[j + 1])];
            if !inside_hull(&hull, c) {
                continue;
            }
            let (a, b, cc, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            let total = phase(a, b) + phase(b, cc) + phase(cc, d) + phase(d, a);
            wind[i + m1 * j] = total / (2.0 * std::f64::consts::PI);
        }
    }

    // A node sitting exactly on a zero splits its winding between the
    // plaquettes around it, so hits are fractional and only cluster sums
    // are rounded.
    let hit = |w: f64| w.abs() > 0.1;
    let mut seen = vec![false; wind.len()];
    let mut report = VortexReport::default();
    for start in 0..wind.len() {
        if !hit(wind[start]) || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut sum, mut cx, mut cy, mut k) = (0.0, 0.0, 0.0, 0.0);
        while let Some(f) = stack.pop() {
            let (i, j) = (f % m1, f / m1);
            sum += wind[f];
            cx += 0.5 * (x1[i] + x1[i + 1]);
            cy += 0.5 * (x2[j] + x2[j + 1]);
            k += 1.0;
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= m1 as i64 || nj >= m2 as i64 {
                        continue;
                    }
                    let g = ni as usize + m1 * nj as usize;
                    if hit(wind[g]) && !seen[g] {
                        seen[g] = true;
                        stack.push(g);
                    }
                }
            }
        }
        let sum = sum.round() as i64;
        if sum != 0 {
            report.count += sum.unsigned_abs() as usize;
            report.locations.push([cx / k, cy / k]);
            report.windings.push(sum);
        }
    }
    report
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// One probe of the critical-speed bisection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaCProbe {
    #[serde(rename = "Omega")]
    pub rotation: f64,
    pub n_vortices: usize,
    pub action: f64,
    pub mass: f64,
    pub init_used: String,
    pub by_vortices: bool,
    pub by_action: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaCReport {
    pub omega: f64,
    /// Bracket from the vortex classification.
    pub lo: f64,
    pub hi: f64,
    /// Bracket from the action classification over the same probes.
    pub action_lo: f64,
    pub action_hi: f64,
    /// The two classifications disagree on at least one probe.
    pub ambiguous: bool,
    /// Action ground state at `Ω = 0`.
    pub action_at_rest: f64,
    pub probes: Vec<OmegaCProbe>,
}

/// Brackets the smallest rotation speed at which the action ground state
/// carries a vortex, by bisection on `(0, Ω_max)`.
///
/// Each probe is classified by the vortex count (primary) and by whether
/// its action lies below the non-rotating ground-state action by more than
/// `1e−8` relative (cross-check). Probes reuse the non-rotating state and
/// the latest vortex-side state as extra starts.
pub fn critical_omega_c(
    template: &ModelParams,
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
    bracket_tol: f64,
) -> Result<OmegaCReport> {
    if !(bracket_tol > 0.0) {
        return Err(Error::Analysis(format!(
            "bracket_tol must be positive, got {bracket_tol}"
        )));
    }
    if grid.dim() != 2 {
        return Err(Error::Analysis(
            "critical rotation speed needs a 2D grid".into(),
        ));
    }
    let upper = template.potential.omega_max();
    if !upper.is_finite() {
        return Err(Error::Analysis(
            "critical rotation speed needs a finite rotation bound".into(),
        ));
    }
    let rest_params = template.with_rotation(0.0);
    let rest_cfg = SolverConfig {
        init: InitSpec::gaussian(),
        ..cfg.clone()
    };
    let rest = solve_action(&rest_params, grid, &rest_cfg, &[])?;
    let s0 = rest.diags.action;

    let (mut lo, mut hi) = (0.0, upper);
    let (mut a_lo, mut a_hi): (f64, f64) = (0.0, upper);
    let mut vortex_state: Option<Field> = None;
    let mut probes = Vec::new();
    let mut ambiguous = false;
    while hi - lo > bracket_tol {
        let mid = 0.5 * (lo + hi);
        let params = template.with_rotation(mid);
        let mut warm = vec![&rest.field];
        if let Some(f) = &vortex_state {
            warm.push(f);
        }
        let res = solve_action(&params, grid, cfg, &warm)?;
        let n_v = res.vortex_count.unwrap_or(0);
        let by_vortices = n_v >= 1;
        let by_action = res.diags.action < s0 - 1e-8 * s0.abs();
        ambiguous |= by_vortices != by_action;
        if by_vortices {
            hi = mid;
            vortex_state = Some(res.field.clone());
        } else {
            lo = mid;
        }
        if by_action {
            a_hi = a_hi.min(mid);
        } else {
            a_lo = a_lo.max(mid);
        }
        probes.push(OmegaCProbe {
            rotation: mid,
            n_vortices: n_v,
            action: res.diags.action,
            mass: res.diags.mass,
            init_used: res.init_used.clone(),
            by_vortices,
            by_action,
        });
    }
    Ok(OmegaCReport {
        omega: template.omega,
        lo,
        hi,
        action_lo: a_lo,
        action_hi: a_hi,
        ambiguous,
        action_at_rest: s0,
        probes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub omega: f64,
    #[serde(rename = "Omega")]
    pub rotation: f64,
    pub action_gs: f64,
    pub mass: f64,
    pub energy_gs: f64,
    pub mu_gs: f64,
    /// `|ω + μ_g|/|ω|`.
    pub e_rel_omega: f64,
    /// `|S_g − (E_g + mω)|/|S_g|`.
    pub e_rel_s: f64,
    pub action_converged: bool,
    pub energy_converged: bool,
    pub action_iters: usize,
    pub energy_iters: usize,
    pub n_vortices: usize,
    pub action_init: String,
    pub energy_init: String,
}

/// Action ground state, then the energy ground state at its mass, and the
/// two relative loop errors.
///
/// The energy flow always starts from the action ground state; starts in
/// `energy_cfg.init` other than `Auto` are tried as well and the lowest
/// energy wins.
pub fn equivalence_loop(
    params: &ModelParams,
    grid: &Arc<Grid>,
    action_cfg: &SolverConfig,
    energy_cfg: &SolverConfig,
) -> Result<(LoopReport, GroundStateResult, GroundStateResult)> {
    let action = solve_action(params, grid, action_cfg, &[])?;
    let mass = action.diags.mass;
    let mut starts = vec![InitSpec::Field(action.field.clone())];
    match &energy_cfg.init {
        InitSpec::Auto => {}
        InitSpec::Multistart(v) => starts.extend(v.iter().cloned()),
        other => starts.push(other.clone()),
    }
    let init = if starts.len() == 1 {
        starts.pop().unwrap()
    } else {
        InitSpec::Multistart(starts)
    };
    let ecfg = SolverConfig {
        init,
        ..energy_cfg.clone()
    };
    let mut energy = solver::energy_ground_state(mass, params, grid, &ecfg)?;
    annotate_vortices(&mut energy, DEFAULT_BULK_FRAC);
    let (s_g, e_g, mu_g) = (action.diags.action, energy.diags.energy, energy.diags.mu);
    let omega = params.omega;
    let report = LoopReport {
        omega,
        rotation: params.rotation,
        action_gs: s_g,
        mass,
        energy_gs: e_g,
        mu_gs: mu_g,
        e_rel_omega: (omega + mu_g).abs() / omega.abs(),
        e_rel_s: (s_g - (e_g + mass * omega)).abs() / s_g.abs(),
        action_converged: action.converged,
        energy_converged: energy.converged,
        action_iters: action.iters,
        energy_iters: energy.iters,
        n_vortices: action.vortex_count.unwrap_or(0),
        action_init: action.init_used.clone(),
        energy_init: energy.init_used.clone(),
    };
    Ok((report, action, energy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpReport {
    /// Midpoint of the final bracket.
    pub omega_critical: f64,
    /// Final bracket `(ω_b, ω_a)` with `ω_b < ω_a`.
    pub bracket: (f64, f64),
    pub bracket_width: f64,
    /// Mass on the upper-frequency side of the bracket.
    pub mass_below: f64,
    /// Mass on the lower-frequency side of the bracket.
    pub mass_above: f64,
    pub forbidden_interval: (f64, f64),
    pub n_vortices_below: usize,
    pub n_vortices_above: usize,
}

#[derive(Clone, Debug)]
pub struct ScanReport {
    pub records: Vec<SweepRecord>,
    pub jumps: Vec<JumpReport>,
}

/// Indices `i` where `|m_{i+1} − m_i|` exceeds [`JUMP_FACTOR`] times the
/// median of the other increments within three places.
pub fn detect_jumps(masses: &[f64]) -> Vec<usize> {
    let inc: Vec<f64> = masses.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let mut out = Vec::new();
    for i in 0..inc.len() {
        let lo = i.saturating_sub(3);
        let hi = (i + 4).min(inc.len());
        let mut local: Vec<f64> = (lo..hi).filter(|&j| j != i).map(|j| inc[j]).collect();
        if local.is_empty() {
            continue;
        }
        local.sort_by(f64::total_cmp);
        let median = if local.len() % 2 == 1 {
            local[local.len() / 2]
        } else {
            0.5 * (local[local.len() / 2 - 1] + local[local.len() / 2])
        };
        if inc[i] > JUMP_FACTOR * median {
            out.push(i);
        }
    }
    out
}

/// Sweeps `omega_range` on a mesh of spacing `mesh_step` in both directions
/// with warm starts, flags mass jumps, and bisects each jump to `resolution`
/// with warm starts from both sides.
pub fn nonequivalence_scan(
    template: &ModelParams,
    omega_range: (f64, f64),
    mesh_step: f64,
    resolution: f64,
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
) -> Result<ScanReport> {
    let (lo, hi) = (
        omega_range.0.min(omega_range.1),
        omega_range.0.max(omega_range.1),
    );
    if !(resolution > 0.0 && mesh_step > 0.0) {
        return Err(Error::Analysis(
            "scan mesh step and resolution must be positive".into(),
        ));
    }
    // from high to low frequency, so index order is decreasing ω
    let omegas = omega_mesh(hi, lo, -mesh_step)?;
    let opts = SweepOptions {
        warm_start: true,
        both_directions: true,
        ..Default::default()
    };
    let states = sweep_states(template, &omegas, grid, cfg, opts);
    let mut records = Vec::new();
    let mut kept: Vec<(f64, GroundStateResult)> = Vec::new();
    for (r, &w) in states.into_iter().zip(&omegas) {
        let res = r?;
        records.push(SweepRecord::from_result(&template.with_omega(w), &res));
        kept.push((w, res));
    }
    let masses: Vec<f64> = kept.iter().map(|(_, r)| r.diags.mass).collect();
    let mut jumps = Vec::new();
    for i in detect_jumps(&masses) {
        let (mut wa, mut a) = (kept[i].0, kept[i].1.clone());
        let (mut wb, mut b) = (kept[i + 1].0, kept[i + 1].1.clone());
        while wa - wb > resolution {
            let mid = 0.5 * (wa + wb);
            let res = solve_action(&template.with_omega(mid), grid, cfg, &[&a.field, &b.field])?;
            let m = res.diags.mass;
            if (m - a.diags.mass).abs() <= (m - b.diags.mass).abs() {
                wa = mid;
                a = res;
            } else {
                wb = mid;
                b = res;
            }
        }
        let (ma, mb) = (a.diags.mass, b.diags.mass);
        jumps.push(JumpReport {
            omega_critical: 0.5 * (wa + wb),
            bracket: (wb, wa),
            bracket_width: wa - wb,
            mass_below: ma,
            mass_above: mb,
            forbidden_interval: (ma.min(mb), ma.max(mb)),
            n_vortices_below: a.vortex_count.unwrap_or(0),
            n_vortices_above: b.vortex_count.unwrap_or(0),
        });
    }
    records.sort_by(|x, y| x.omega.total_cmp(&y.omega));
    Ok(ScanReport { records, jumps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub max_deviation: f64,
    pub points_used: usize,
    pub excluded: usize,
}

/// Central difference of the action against the frequency, compared with
/// the recorded mass. Triples touching a detected mass jump are skipped.
pub fn dsg_domega_check(records: &[SweepRecord]) -> Result<DerivativeCheck> {
    let mut rs: Vec<&SweepRecord> = records.iter().filter(|r| r.converged).collect();
    rs.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    let masses: Vec<f64> = rs.iter().map(|r| r.mass).collect();
    let flagged = detect_jumps(&masses);
    let mut max_dev: f64 = 0.0;
    let (mut used, mut excluded) = (0, 0);
    for i in 1..rs.len().saturating_sub(1) {
        if flagged.contains(&(i - 1)) || flagged.contains(&i) {
            excluded += 1;
            continue;
        }
        let (a, b, c) = (rs[i - 1], rs[i], rs[i + 1]);
        let fd = (c.action - a.action) / (c.omega - a.omega);
        max_dev = max_dev.max((fd - b.mass).abs() / b.mass.abs());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Analysis(
            "derivative check needs three consecutive records away from jumps".into(),
        ));
    }
    Ok(DerivativeCheck {
        max_deviation: max_dev,
        points_used: used,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    pub value: f64,
    pub omega_star: f64,
    /// The maximum sits at an end of the record range.
    pub at_boundary: bool,
}

/// `sup_ω [S_g(ω) − ωm]` over the records, refined by the parabola through
/// the best point and its neighbours.
pub fn dual_value(mass: f64, records: &[SweepRecord]) -> Result<DualValue> {
    let mut rs: Vec<&SweepRecord> = records.iter().filter(|r| r.converged).collect();
    if rs.is_empty() {
        return Err(Error::Analysis("dual value needs converged records".into()));
    }
    rs.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    let f = |r: &SweepRecord| r.action - r.omega * mass;
    let best = (0..rs.len())
        .max_by(|&i, &j| f(rs[i]).total_cmp(&f(rs[j])))
        .unwrap();
    if best == 0 || best == rs.len() - 1 {
        return Ok(DualValue {
            value: f(rs[best]),
            omega_star: rs[best].omega,
            at_boundary: true,
        });
    }
    let (x0, x1, x2) = (rs[best - 1].omega, rs[best].omega, rs[best + 1].omega);
    let (y0, y1, y2) = (f(rs[best - 1]), f(rs[best]), f(rs[best + 1]));
    // Newton form of the interpolating parabola
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let c2 = (d12 - d01) / (x2 - x0);
    if c2 >= 0.0 {
        return Ok(DualValue {
            value: y1,
            omega_star: x1,
            at_boundary: false,
        });
    }
    let c1 = d01 - c2 * (x0 + x1);
    let xs = (-c1 / (2.0 * c2)).clamp(x0, x2);
    let value = y0 + d01 * (xs - x0) + c2 * (xs - x0) * (xs - x1);
    Ok(DualValue {
        value: value.max(y1),
        omega_star: xs,
        at_boundary: false,
    })
}

/// `min_θ ‖φ/‖φ‖₂ − e^{iθ}·mode‖_X` for a unit-mass `mode`.
pub fn distance_to_linear_mode(field: &Field, mode: &Field, params: &ModelParams) -> Result<f64> {
    if (mode.mass() - 1.0).abs() > 1e-6 {
        return Err(Error::Analysis(format!(
            "mode must have unit mass, got {}",
            mode.mass()
        )));
    }
    let norm = field.norm_l2();
    if norm == 0.0 {
        return Err(Error::Analysis("distance of the zero field".into()));
    }
    let ham = Hamiltonian::new(
        params.with_rotation(0.0).with_omega(-1.0),
        field.grid().clone(),
    )?;
    let u = field.scale(Complex64::new(1.0 / norm, 0.0));
    let uu = ham.x_inner(&u, &u)?.re;
    let mm = ham.x_inner(mode, mode)?.re;
    let um = ham.x_inner(&u, mode)?.norm();
    Ok((uu + mm - 2.0 * um).max(0.0).sqrt())
}

/// `‖|a| − b‖_X`, the distance between the modulus of `a` and `b`.
pub fn modulus_distance(a: &Field, b: &Field, params: &ModelParams) -> Result<f64> {
    let ham = Hamiltonian::new(params.with_rotation(0.0).with_omega(-1.0), a.grid().clone())?;
    let modulus = a.map(|z| Complex64::new(z.norm(), 0.0))?;
    let diff = modulus.axpby(Complex64::new(1.0, 0.0), b, Complex64::new(-1.0, 0.0))?;
    ham.x_norm(&diff)
}

/// Energy ground state at `mass` with the vortex count filled in.
pub fn solve_energy(
    mass: f64,
    params: &ModelParams,
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
) -> Result<GroundStateResult> {
    let mut res = solver::energy_ground_state(mass, params, grid, cfg)?;
    annotate_vortices(&mut res, DEFAULT_BULK_FRAC);
    Ok(res)
}
