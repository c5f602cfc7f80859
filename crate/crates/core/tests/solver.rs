use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnls_core::physics::diagnostics;
use rnls_core::solver::{
    self, action_ground_state, energy_ground_state, linear_ground_mode, InitSpec, Method,
    SolverConfig,
};
use rnls_core::{Field, Grid, ModelParams, PotentialSpec};

fn box8(n: usize) -> Arc<Grid> {
    Grid::cube(2, 8.0, n).unwrap()
}

fn at(omega: f64, rotation: f64) -> ModelParams {
    ModelParams {
        omega,
        rotation,
        ..Default::default()
    }
}

#[test]
fn non_rotating_ground_state_is_a_positive_profile() {
    let cfg = SolverConfig {
        init: InitSpec::gaussian(),
        ..Default::default()
    };
    let res = action_ground_state(&at(-2.0, 0.0), &box8(64), &cfg).unwrap();
    assert!(res.converged);
    let f = res.field.align_phase();
    let peak = f.max_abs();
    let max_im = f.values().iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    assert!(max_im < 1e-8 * peak, "max |Im| = {max_im}");
    assert!(f.values().iter().all(|z| z.re > -1e-8 * peak));

    // stationary points sit on the Nehari manifold and satisfy S = −β(p−1)/(p+1)‖φ‖₄⁴
    let d = res.diags;
    assert!(d.nehari.abs() <= 1e-6 * d.x_norm_sq, "K = {}", d.nehari);
    let c = at(-2.0, 0.0).nehari_coefficient();
    assert!((d.action + c * d.nonlinear).abs() <= 1e-8 * d.action.abs());
    assert!(d.action < 0.0);
    assert!((d.mu - 2.0).abs() < 1e-8, "mu = {}", d.mu);
}

#[test]
fn linear_ground_mode_eigenvalues() {
    let cfg = SolverConfig {
        tol_step: 1e-12,
        ..Default::default()
    };
    let g = Grid::cube(2, 10.0, 96).unwrap();
    for rotation in [0.0, 0.5, 0.9] {
        let (l, mode) =
            linear_ground_mode(&PotentialSpec::harmonic(1.0), rotation, &g, &cfg).unwrap();
        assert!((l - 1.0).abs() < 1e-8, "Omega = {rotation}: {l}");
        assert!((mode.mass() - 1.0).abs() < 1e-12);
    }
    let aniso = PotentialSpec::Harmonic { gamma: [1.0, 2.0] };
    let (l, _) = linear_ground_mode(&aniso, 0.0, &g, &cfg).unwrap();
    assert!((l - 1.5).abs() < 1e-8, "{l}");
    let line = Grid::cube(1, 10.0, 256).unwrap();
    let (l, _) = linear_ground_mode(&PotentialSpec::harmonic(1.0), 0.0, &line, &cfg).unwrap();
    assert!((l - 0.5).abs() < 1e-10, "{l}");
}

#[test]
fn action_never_increases_along_the_flow() {
    let cfg = SolverConfig {
        init: InitSpec::vortex(1),
        max_iters: 3000,
        ..Default::default()
    };
    let res = action_ground_state(&at(-4.0, 0.6), &box8(64), &cfg).unwrap();
    let h = &res.action_history;
    assert!(h.len() > 10);
    for w in h.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()),
            "{} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn solves_are_deterministic() {
    let cfg = SolverConfig {
        max_iters: 2000,
        ..Default::default()
    };
    let p = at(-3.0, 0.4);
    let a = action_ground_state(&p, &box8(48), &cfg).unwrap();
    let b = action_ground_state(&p, &box8(48), &cfg).unwrap();
    assert_eq!(a.init_used, b.init_used);
    assert_eq!(a.iters, b.iters);
    for (x, y) in a.field.values().iter().zip(b.field.values()) {
        assert_eq!(x.re.to_bits(), y.re.to_bits());
        assert_eq!(x.im.to_bits(), y.im.to_bits());
    }
}

#[test]
fn ground_state_beats_random_nehari_points() {
    let g = box8(48);
    let p = at(-3.0, 0.0);
    let res = action_ground_state(&p, &g, &SolverConfig::default()).unwrap();
    assert!(res.converged);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (cx, cy, s, k): (f64, f64, f64, f64) = (
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.7..2.5),
            rng.gen_range(-1.0..1.0),
        );
        let f = Field::from_fn(g.clone(), |x, y| {
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            Complex64::from_polar((-r2 / (s * s)).exp(), k * x)
        })
        .unwrap();
        // scale onto the Nehari manifold: c² = −Q/(β‖f‖₄⁴)
        let d = diagnostics(&f, &p).unwrap();
        assert!(d.quadratic < 0.0);
        let scaled = f.scale(Complex64::new(
            (-d.quadratic / (p.beta * d.nonlinear)).sqrt(),
            0.0,
        ));
        let s_trial = diagnostics(&scaled, &p).unwrap().action;
        assert!(
            res.diags.action <= s_trial + 1e-12,
            "{} > {s_trial}",
            res.diags.action
        );
    }
}

#[test]
fn energy_flow_keeps_the_mass_exactly() {
    let cfg = SolverConfig {
        max_iters: 500,
        ..Default::default()
    };
    let res = energy_ground_state(7.5, &at(-2.0, 0.3), &box8(48), &cfg).unwrap();
    assert!((res.field.mass() - 7.5).abs() <= 1e-12 * 7.5);
}

#[test]
fn energy_ground_state_closes_the_loop() {
    let g = box8(64);
    let p = at(-2.5, 0.0);
    let action = action_ground_state(&p, &g, &SolverConfig::default()).unwrap();
    let m = action.diags.mass;
    let energy = energy_ground_state(m, &p, &g, &SolverConfig::default()).unwrap();
    assert!(energy.converged);
    assert!(
        (energy.diags.mu - 2.5).abs() < 1e-6 * 2.5,
        "mu = {}",
        energy.diags.mu
    );
    let s = action.diags.action;
    assert!((s - (energy.diags.energy + m * p.omega)).abs() < 1e-8 * s.abs());
}

#[test]
fn threshold_is_enforced() {
    let g = box8(32);
    let err = action_ground_state(&at(-0.99, 0.5), &g, &SolverConfig::default()).unwrap_err();
    assert!(err.to_string().contains("lambda0"), "{err}");
    assert_eq!(
        solver::lambda0(&at(-2.0, 0.5), &g, &SolverConfig::default()).unwrap(),
        1.0
    );
}

#[test]
fn conjugate_gradients_reach_the_flow_ground_states() {
    let g = box8(64);
    let p = at(-4.0, 0.4);
    let pcg = SolverConfig {
        method: Method::Pcg,
        ..Default::default()
    };
    let flow = action_ground_state(&p, &g, &SolverConfig::default()).unwrap();
    let fast = action_ground_state(&p, &g, &pcg).unwrap();
    assert!(flow.converged && fast.converged);
    assert!(fast.iters < flow.iters);
    assert!((fast.diags.action - flow.diags.action).abs() < 1e-9 * flow.diags.action.abs());
    assert!((fast.diags.mass - flow.diags.mass).abs() < 1e-7 * flow.diags.mass);

    let m = flow.diags.mass;
    let e_flow = energy_ground_state(m, &p, &g, &SolverConfig::default()).unwrap();
    let e_fast = energy_ground_state(m, &p, &g, &pcg).unwrap();
    assert!(e_fast.converged);
    assert!((e_fast.field.mass() - m).abs() <= 1e-12 * m);
    assert!((e_fast.diags.energy - e_flow.diags.energy).abs() < 1e-9 * e_flow.diags.energy);
    assert!(
        (e_fast.diags.mu - 4.0).abs() < 1e-6 * 4.0,
        "mu = {}",
        e_fast.diags.mu
    );

    let (l, _) = linear_ground_mode(
        &PotentialSpec::harmonic(1.0),
        0.5,
        &g,
        &SolverConfig {
            tol_step: 1e-12,
            ..pcg
        },
    )
    .unwrap();
    assert!((l - 1.0).abs() < 1e-8, "{l}");
}

#[test]
fn conjugate_gradients_decrease_the_action() {
    let cfg = SolverConfig {
        method: Method::Pcg,
        init: InitSpec::vortex(1),
        max_iters: 300,
        ..Default::default()
    };
    let res = action_ground_state(&at(-6.0, 0.6), &box8(64), &cfg).unwrap();
    for w in res.action_history.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()),
            "{} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn conjugate_gradients_detect_an_unbounded_action() {
    let linear = ModelParams {
        beta: 0.0,
        ..at(-1.5, 0.0)
    };
    let cfg = SolverConfig {
        method: Method::Pcg,
        ..Default::default()
    };
    let err = action_ground_state(&linear, &box8(32), &cfg).unwrap_err();
    assert!(err.to_string().contains("unbounded"), "{err}");
}

#[test]
fn collapse_onto_zero_is_not_convergence() {
    // the winding-one oscillator level sits exactly at 2, so this start has
    // no component below threshold and decays to zero
    let cfg = SolverConfig {
        init: InitSpec::vortex(1),
        max_iters: 2000,
        ..Default::default()
    };
    let res = action_ground_state(&at(-2.0, 0.0), &box8(48), &cfg).unwrap();
    assert!(!res.converged, "mass {}", res.diags.mass);
}
