//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 4 11` runs a subset by number.
//! Set `RNLS_ACCEPT_SLOW=1` to add the ω = −40, −50 loop rows.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnls_core::analysis::{self, Abscissa, Ordinate, SweepOptions, SweepRecord};
use rnls_core::physics::Hamiltonian;
use rnls_core::solver::{self, InitSpec, Method, SolverConfig};
use rnls_core::{Field, Grid, ModelParams, PotentialSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn(&mut Shared) -> Verdict;

/// Results reused across criteria.
#[derive(Default)]
struct Shared {
    sweep_rest: Option<Vec<SweepRecord>>,
}

fn params(omega: f64, rotation: f64) -> ModelParams {
    ModelParams {
        omega,
        rotation,
        ..Default::default()
    }
}

fn square(half_width: f64, n: usize) -> Arc<Grid> {
    Grid::cube(2, half_width, n).unwrap()
}

fn fail_on<T>(r: rnls_core::Result<T>) -> Result<T, Verdict> {
    r.map_err(|e| Verdict::new(false, format!("error: {e}")))
}

macro_rules! tryv {
    ($e:expr) => {
        match fail_on($e) {
            Ok(v) => v,
            Err(v) => return v,
        }
    };
}

// 1. λ₀ from the linear flow against the closed form.
fn lambda0(_: &mut Shared) -> Verdict {
    let g = square(12.0, 256);
    let cfg = SolverConfig {
        tol_step: 1e-12,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for rotation in [0.0, 0.3, 0.5, 0.9] {
        let (l, _) = tryv!(solver::linear_ground_mode(
            &PotentialSpec::harmonic(1.0),
            rotation,
            &g,
            &cfg
        ));
        worst = worst.max((l - 1.0).abs());
        parts.push(format!("{rotation}:{l:.10}"));
    }
    Verdict::new(
        worst <= 1e-6,
        format!("lambda0 {} max|err|={worst:.2e}", parts.join(" ")),
    )
}

// 2. Nehari and action identities on converged ground states.
fn identities(_: &mut Shared) -> Verdict {
    let mut worst_k: f64 = 0.0;
    let mut worst_s: f64 = 0.0;
    let mut unconverged = Vec::new();
    for rotation in [0.0, 0.5] {
        for omega in [-2.0, -5.0, -10.0, -20.0, -30.0] {
            let (g, cfg) = identity_setup(omega, rotation);
            let res = tryv!(solver::action_ground_state(
                &params(omega, rotation),
                &g,
                &cfg
            ));
            if !res.converged {
                unconverged.push(format!("({rotation},{omega})"));
            }
            let d = res.diags;
            let c = params(omega, rotation).nehari_coefficient();
            worst_k = worst_k.max(d.nehari.abs() / d.x_norm_sq);
            worst_s = worst_s.max((d.action + c * d.nonlinear).abs() / d.action.abs());
        }
    }
    Verdict::new(
        unconverged.is_empty() && worst_k <= 1e-6 && worst_s <= 1e-8,
        format!(
            "max|K|/x_norm_sq={worst_k:.2e} max S-identity={worst_s:.2e} unconverged=[{}]",
            unconverged.join(" ")
        ),
    )
}

fn identity_setup(omega: f64, rotation: f64) -> (Arc<Grid>, SolverConfig) {
    let half = if omega < -10.0 { 12.0 } else { 8.0 };
    let n = if omega < -10.0 { 128 } else { 64 };
    let init = if rotation > 0.0 {
        InitSpec::Multistart(vec![
            InitSpec::ThomasFermi { amplitude: 1.0 },
            InitSpec::vortex(1),
            InitSpec::gaussian(),
        ])
    } else {
        InitSpec::gaussian()
    };
    let cfg = SolverConfig {
        method: Method::Pcg,
        init,
        record_history: false,
        ..Default::default()
    };
    (square(half, n), cfg)
}

// 3. Gradient against central differences of the action.
fn gradient(_: &mut Shared) -> Verdict {
    let g = square(8.0, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = params(rng.gen_range(-10.0..-1.5), rng.gen_range(0.0..0.9));
        let mut blob = || {
            let (cx, cy, s, kx, ky, a) = (
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.8..2.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..3.0),
            );
            Field::from_fn(g.clone(), move |x, y| {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                Complex64::from_polar(a * (-r2 / (s * s)).exp(), kx * x + ky * y)
            })
            .unwrap()
        };
        let (phi, xi) = (blob(), blob());
        let ham = tryv!(Hamiltonian::new(p, g.clone()));
        let exact = tryv!(tryv!(ham.action_gradient(&phi)).inner(&xi)).re;
        let h = 1e-4 * phi.norm_l2() / xi.norm_l2();
        let at = |t: f64| {
            ham.action(
                &phi.axpby(Complex64::new(1.0, 0.0), &xi, Complex64::new(t, 0.0))
                    .unwrap(),
            )
            .unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((fd - exact).abs() / exact.abs());
    }
    Verdict::new(
        worst < 1e-6,
        format!("max relative error {worst:.2e} over 20 pairs"),
    )
}

const SWEEP_HALF_WIDTH: f64 = 8.0;
const SWEEP_N: usize = 96;

fn sweep_cfg() -> SolverConfig {
    SolverConfig {
        method: Method::Pcg,
        record_history: false,
        ..Default::default()
    }
}

fn monotone_pairs(records: &[SweepRecord], skip: &BTreeSet<usize>) -> (usize, Vec<String>) {
    let mut rs: Vec<(usize, &SweepRecord)> = records.iter().enumerate().collect();
    rs.sort_by(|a, b| a.1.omega.total_cmp(&b.1.omega));
    let mut checked = 0;
    let mut bad = Vec::new();
    for w in rs.windows(2) {
        let ((i, a), (_, b)) = (w[0], w[1]);
        if !(a.converged && b.converged) || skip.contains(&i) {
            continue;
        }
        checked += 1;
        // ω increases from a to b
        if !(b.mass < a.mass && b.action > a.action) {
            bad.push(format!("[{:.2},{:.2}]", a.omega, b.omega));
        }
    }
    (checked, bad)
}

// 4. Mass decreasing, action increasing along ω ∈ [−10, −1.2].
fn monotonicity(shared: &mut Shared) -> Verdict {
    let g = square(SWEEP_HALF_WIDTH, SWEEP_N);
    let omegas = tryv!(analysis::omega_mesh(-10.0, -1.2, 0.1));
    let mut detail = Vec::new();
    let mut pass = true;
    for rotation in [0.0, 0.5] {
        let opts = SweepOptions {
            warm_start: true,
            both_directions: rotation > 0.0,
            ..Default::default()
        };
        let out = analysis::sweep_omega(&params(-2.0, rotation), &omegas, &g, &sweep_cfg(), opts);
        let failed = out.iter().filter(|o| o.is_err()).count();
        let records: Vec<SweepRecord> = out.into_iter().filter_map(|o| o.ok()).collect();
        let unconverged = records.iter().filter(|r| !r.converged).count();
        // pairs straddling a detected mass jump are excluded in the rotating case
        let mut sorted: Vec<usize> = (0..records.len()).collect();
        sorted.sort_by(|&a, &b| records[a].omega.total_cmp(&records[b].omega));
        let masses: Vec<f64> = sorted.iter().map(|&i| records[i].mass).collect();
        let skip: BTreeSet<usize> = if rotation > 0.0 {
            analysis::detect_jumps(&masses)
                .into_iter()
                .map(|j| sorted[j])
                .collect()
        } else {
            BTreeSet::new()
        };
        let (checked, bad) = monotone_pairs(&records, &skip);
        pass &= bad.is_empty()
            && failed == 0
            && checked + skip.len() + 2 * unconverged >= omegas.len() - 1;
        detail.push(format!(
            "Omega={rotation}: pairs={checked} excluded={} unconverged={unconverged} failed={failed} violations=[{}]",
            skip.len(),
            bad.join(" ")
        ));
        if rotation == 0.0 {
            shared.sweep_rest = Some(records);
        }
    }
    Verdict::new(pass, detail.join("; "))
}

// 5. Near-threshold rates with p = 3.
fn near_threshold(_: &mut Shared) -> Verdict {
    let g = square(8.0, 64);
    let omegas = tryv!(analysis::omega_mesh(-1.3, -1.01, 0.01));
    let mut detail = Vec::new();
    let mut pass = true;
    for rotation in [0.0, 0.5] {
        let p = params(-1.3, rotation);
        let l0 = tryv!(solver::lambda0(&p, &g, &sweep_cfg()));
        let cfg = SolverConfig {
            init: InitSpec::gaussian(),
            ..sweep_cfg()
        };
        let opts = SweepOptions {
            warm_start: true,
            ..Default::default()
        };
        let records: Vec<SweepRecord> = analysis::sweep_omega(&p, &omegas, &g, &cfg, opts)
            .into_iter()
            .filter_map(|o| o.ok())
            .collect();
        let fm = tryv!(analysis::fit_rate(
            &records,
            Abscissa::ThresholdDistance(l0),
            Ordinate::Mass,
            (-1.3, -1.01)
        ));
        let fs = tryv!(analysis::fit_rate(
            &records,
            Abscissa::ThresholdDistance(l0),
            Ordinate::AbsAction,
            (-1.3, -1.01)
        ));
        pass &= (fm.slope - 1.0).abs() <= 0.1
            && (fs.slope - 2.0).abs() <= 0.1
            && fm.points == omegas.len();
        detail.push(format!(
            "Omega={rotation}: mass slope {:.4}, |action| slope {:.4} ({} points)",
            fm.slope, fs.slope, fm.points
        ));
    }
    Verdict::new(pass, detail.join("; "))
}

// 6. Far-field rates on [−16,16]² at 384².
fn far_field(_: &mut Shared) -> Verdict {
    let g = square(16.0, 384);
    let omegas: Vec<f64> = (0..9).map(|i| -10.0 - 5.0 * i as f64).collect();
    let mut pass = true;
    let mut detail = Vec::new();
    for rotation in [0.0, 0.5] {
        // lattices at Ω = 0.5 plateau on soft modes long before the action
        // stops moving at the digits a log-log fit can see
        let max_iters = if rotation > 0.0 {
            FAR_FIELD_LATTICE_ITERS
        } else {
            SolverConfig::default().max_iters
        };
        let cfg = SolverConfig {
            init: InitSpec::ThomasFermi { amplitude: 1.0 },
            max_iters,
            ..sweep_cfg()
        };
        let opts = SweepOptions {
            warm_start: true,
            ..Default::default()
        };
        let records: Vec<SweepRecord> =
            analysis::sweep_omega(&params(-10.0, rotation), &omegas, &g, &cfg, opts)
                .into_iter()
                .filter_map(|o| o.ok())
                .collect();
        // the library fit keeps converged records only; plateaued lattice
        // states enter here with their residual reported
        let pts = |y: fn(&SweepRecord) -> f64| -> Vec<(f64, f64)> {
            records.iter().map(|r| (r.omega.abs(), y(r))).collect()
        };
        let fm = tryv!(analysis::fit_loglog(&pts(|r| r.mass)));
        let fs = tryv!(analysis::fit_loglog(&pts(|r| r.action.abs())));
        let worst = records
            .iter()
            .map(|r| r.residual / r.mass.sqrt())
            .fold(0.0, f64::max);
        let unconverged = records.iter().filter(|r| !r.converged).count();
        pass &= (fm.slope - 2.0).abs() <= 0.1
            && (fs.slope - 3.0).abs() <= 0.1
            && fm.points == omegas.len();
        detail.push(format!(
            "Omega={rotation}: mass slope {:.4}, |action| slope {:.4} ({} points, {unconverged} unconverged, max residual/|phi| {worst:.1e})",
            fm.slope, fs.slope, fm.points
        ));
    }
    Verdict::new(pass, detail.join("; "))
}

const FAR_FIELD_LATTICE_ITERS: usize = 2_000;

// 7. Rescaled 1D profiles approach the Thomas-Fermi limit.
fn thomas_fermi(_: &mut Shared) -> Verdict {
    let g = Grid::cube(1, 16.0, 2048).unwrap();
    let cfg = SolverConfig {
        init: InitSpec::ThomasFermi { amplitude: 1.0 },
        ..sweep_cfg()
    };
    let mut errs = Vec::new();
    for omega in [-20.0, -40.0, -80.0] {
        let p = params(omega, 0.0);
        let res = tryv!(solver::action_ground_state(&p, &g, &cfg));
        if !res.converged {
            return Verdict::new(false, format!("omega={omega} not converged"));
        }
        errs.push(tryv!(analysis::tf_compare(&res.field, &p)));
    }
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    Verdict::new(
        decreasing && errs[2] < 0.05,
        format!("L2 errors {:.4e} {:.4e} {:.4e}", errs[0], errs[1], errs[2]),
    )
}

// 8. Action ground state → energy ground state → back, Ω = 0.5.
fn table_loop(_: &mut Shared) -> Verdict {
    let mut rows = vec![(-30.0, 3517.33, 30.0)];
    if std::env::var_os("RNLS_ACCEPT_SLOW").is_some() {
        rows.push((-40.0, 6335.55, 40.0));
        rows.push((-50.0, 9997.17, 50.0));
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (omega, m_ref, mu_ref) in rows {
        let p = params(omega, 0.5);
        let field = tryv!(coarse_lattice(&p));
        let g = square(14.0, 512);
        let action_cfg = SolverConfig {
            method: Method::Pcg,
            init: InitSpec::Field(tryv!(field.resample(&g))),
            max_iters: LOOP_FINE_ITERS,
            record_history: false,
            ..Default::default()
        };
        let energy_cfg = SolverConfig {
            init: InitSpec::Auto,
            ..action_cfg.clone()
        };
        let (r, _, _) = tryv!(analysis::equivalence_loop(&p, &g, &action_cfg, &energy_cfg));
        let ok = (r.mass - m_ref).abs() <= 5e-3 * m_ref
            && (r.mu_gs - mu_ref).abs() <= 5e-3 * mu_ref
            && r.e_rel_omega < 1e-6
            && r.e_rel_s < 1e-8;
        pass &= ok;
        detail.push(format!(
            "omega={omega}: m={:.2} (ref {m_ref}) S={:.2} E={:.2} mu_g={:.6} e_rel_omega={:.2e} e_rel_S={:.2e} n_v={} iters={}+{} converged={}/{}",
            r.mass, r.action_gs, r.energy_gs, r.mu_gs, r.e_rel_omega, r.e_rel_s, r.n_vortices,
            r.action_iters, r.energy_iters, r.action_converged, r.energy_converged
        ));
    }
    Verdict::new(pass, detail.join("; "))
}

/// Iteration cap per stage on the 512² grid. Lattice states have very soft
/// modes, so the residual plateaus long before the loop errors stop moving.
const LOOP_FINE_ITERS: usize = 2_000;

/// Vortex lattice relaxed on coarser grids, used as the start on 512².
fn coarse_lattice(p: &ModelParams) -> rnls_core::Result<Field> {
    let mut field: Option<Field> = None;
    for (n, iters) in [(128, 20_000), (256, 4_000)] {
        let g = square(14.0, n);
        let init = match field.take() {
            Some(f) => InitSpec::Field(f.resample(&g)?),
            None => InitSpec::ThomasFermi { amplitude: 1.0 },
        };
        let cfg = SolverConfig {
            method: Method::Pcg,
            init,
            max_iters: iters,
            record_history: false,
            ..Default::default()
        };
        let res = solver::action_ground_state(p, &g, &cfg)?;
        eprintln!(
            "  coarse {n}^2: S={:.4} m={:.4} iters={} n_v={}",
            res.diags.action,
            res.diags.mass,
            res.iters,
            analysis::count_vortices(&res.field, analysis::DEFAULT_BULK_FRAC).count
        );
        field = Some(res.field);
    }
    Ok(field.expect("at least one stage"))
}

// 9. Brackets on the critical rotation speed.
fn critical_speed(_: &mut Shared) -> Verdict {
    let cases = [
        (-2.0, 8.0, 96, 1.0 / 128.0, (0.75, 0.78), 0.766),
        (-10.0, 8.0, 96, 1.0 / 64.0, (0.28, 0.31), 0.292),
        (-50.0, 13.0, 256, 1.0 / 64.0, (0.07, 0.11), 0.089),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (omega, half, n, tol, window, reference) in cases {
        let g = square(half, n);
        // probes far above the bracket are dense lattices with very soft
        // modes; classifying them needs the vortex count, not full convergence
        let cfg = SolverConfig {
            max_iters: 5_000,
            ..sweep_cfg()
        };
        let r = tryv!(analysis::critical_omega_c(
            &params(omega, 0.0),
            &g,
            &cfg,
            tol
        ));
        let ok = r.lo > window.0
            && r.hi < window.1
            && r.lo < reference
            && reference < r.hi
            && !r.ambiguous;
        pass &= ok;
        detail.push(format!(
            "omega={omega}: ({:.6},{:.6}){} probes={}",
            r.lo,
            r.hi,
            if r.ambiguous { " ambiguous" } else { "" },
            r.probes.len()
        ));
    }
    Verdict::new(pass, detail.join("; "))
}

// 10. Mass jump of the rotating ground states and its absence at rest.
fn jump(_: &mut Shared) -> Verdict {
    let g = square(8.0, 96);
    let cfg = sweep_cfg();
    let rot = tryv!(analysis::nonequivalence_scan(
        &params(-4.5, 0.5),
        (-5.0, -4.0),
        0.02,
        1e-3,
        &g,
        &cfg
    ));
    let rest = tryv!(analysis::nonequivalence_scan(
        &params(-4.5, 0.0),
        (-5.0, -4.0),
        0.02,
        1e-3,
        &g,
        &cfg
    ));
    let mut pass = rot.jumps.len() == 1 && rest.jumps.is_empty();
    let mut detail = format!(
        "Omega=0.5: {} jump(s); Omega=0: {} jump(s)",
        rot.jumps.len(),
        rest.jumps.len()
    );
    if let Some(j) = rot.jumps.first() {
        let (a, b) = j.forbidden_interval;
        let near = |x: f64, r: f64| (x - r).abs() <= 0.05 * r;
        pass &= j.omega_critical > -4.36
            && j.omega_critical < -4.33
            && near(a, 55.4535)
            && near(b, 59.6198);
        detail += &format!(
            "; omega_cr={:.5} bracket=({:.5},{:.5}) forbidden=({a:.4},{b:.4}) n_v {}->{}",
            j.omega_critical, j.bracket.0, j.bracket.1, j.n_vortices_below, j.n_vortices_above
        );
    }
    Verdict::new(pass, detail)
}

// 11. dS_g/dω = M_g on the non-rotating sweep of criterion 4.
fn derivative(shared: &mut Shared) -> Verdict {
    if shared.sweep_rest.is_none() {
        let v = monotonicity(shared);
        if shared.sweep_rest.is_none() {
            return Verdict::new(false, format!("sweep unavailable: {}", v.detail));
        }
    }
    let records = shared.sweep_rest.as_ref().unwrap();
    let c = tryv!(analysis::dsg_domega_check(records));
    Verdict::new(
        c.max_deviation < 1e-2,
        format!(
            "max relative deviation {:.3e} over {} points ({} excluded)",
            c.max_deviation, c.points_used, c.excluded
        ),
    )
}

// 12. |φ_{Ω,−2}| → φ_{0,−2} as Ω → 0.
fn slow_rotation(_: &mut Shared) -> Verdict {
    let g = square(8.0, 96);
    let cfg = sweep_cfg();
    let p0 = params(-2.0, 0.0);
    let rest = tryv!(analysis::solve_action(
        &p0,
        &g,
        &SolverConfig {
            init: InitSpec::gaussian(),
            ..cfg.clone()
        },
        &[]
    ));
    let ham = tryv!(Hamiltonian::new(p0, g.clone()));
    let scale = tryv!(ham.x_norm(&rest.field));
    let floor = 1e-8 * scale;
    let mut dists = Vec::new();
    let mut vortices = Vec::new();
    for rotation in [0.4, 0.2, 0.1] {
        let res = tryv!(analysis::solve_action(
            &params(-2.0, rotation),
            &g,
            &cfg,
            &[]
        ));
        vortices.push(res.vortex_count.unwrap_or(0));
        dists.push(tryv!(analysis::modulus_distance(
            &res.field,
            &rest.field,
            &p0
        )));
    }
    // below Ω^c all three states coincide with the rest state up to solver noise
    let decreasing = dists.windows(2).all(|w| w[1] < w[0] || w[1] <= floor);
    Verdict::new(
        decreasing && vortices.iter().all(|&v| v == 0),
        format!(
            "distances {:.3e} {:.3e} {:.3e} (noise floor {floor:.1e}), n_v {:?}",
            dists[0], dists[1], dists[2], vortices
        ),
    )
}

fn main() {
    let wanted: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, Check); 12] = [
        (1, "lambda0 closed form", lambda0),
        (2, "Nehari and action identities", identities),
        (3, "gradient correctness", gradient),
        (4, "monotonicity in omega", monotonicity),
        (5, "near-threshold rates", near_threshold),
        (6, "far-field rates", far_field),
        (7, "Thomas-Fermi limit", thomas_fermi),
        (8, "action/energy loop at omega=-30", table_loop),
        (9, "critical rotation brackets", critical_speed),
        (10, "non-equivalence jump", jump),
        (11, "derivative identity", derivative),
        (12, "slow-rotation convergence", slow_rotation),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut shared);
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!(
            "{status} {id:>2} {name}: {} [{:.1}s]",
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
