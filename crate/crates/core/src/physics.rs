//! Trapping potentials and the variational functionals built on them:
//! mass, energy `E`, action `S = E + ω‖φ‖²`, the quadratic part `Q`, the
//! Nehari functional `K`, the chemical potential `μ`, and the residual of the
//! stationary equation `H(φ) = 0`.
//!
//! The energy is
//!
//! ```text
//!   E(φ) = ½‖∇φ‖² + ∫V|φ|² + 2β/(p+1)‖φ‖_{p+1}^{p+1} − Ω∫φ̄ L_z φ
//! ```
//!
//! and `H(φ) = −½Δφ + Vφ + β|φ|^{p−1}φ − ΩL_zφ + ωφ` is half of the `L²`
//! gradient of `S` with respect to `(Re φ, Im φ)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{lq_power, FftScratch, Field, Grid};

/// External trapping potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `½(γ₁²x₁² + γ₂²x₂²)`.
    Harmonic { gamma: [f64; 2] },
    /// `Σ_j ½γ_j²x_j² + κ sin²(πx_j/2)`.
    HarmonicLattice { gamma: [f64; 2], kappa: f64 },
    /// `(c₁/4)(|x|² − c₂)²`.
    HarmonicQuartic { c1: f64, c2: f64 },
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::Harmonic { gamma: [1.0, 1.0] }
    }
}

impl PotentialSpec {
    pub fn harmonic(gamma: f64) -> Self {
        PotentialSpec::Harmonic {
            gamma: [gamma, gamma],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!(
                    "potential coefficient {name} must be positive, got {v}"
                )))
            }
        };
        match *self {
            PotentialSpec::Harmonic { gamma } => {
                positive("gamma1", gamma[0])?;
                positive("gamma2", gamma[1])
            }
            PotentialSpec::HarmonicLattice { gamma, kappa } => {
                positive("gamma1", gamma[0])?;
                positive("gamma2", gamma[1])?;
                positive("kappa", kappa)
            }
            PotentialSpec::HarmonicQuartic { c1, c2 } => {
                positive("c1", c1)?;
                positive("c2", c2)
            }
        }
    }

    /// Value at `x`; only the first `dim` coordinates are used.
    pub fn value(&self, x: [f64; 2], dim: usize) -> f64 {
        let r2 = if dim == 1 {
            x[0] * x[0]
        } else {
            x[0] * x[0] + x[1] * x[1]
        };
        match *self {
            PotentialSpec::Harmonic { gamma } => (0..dim)
                .map(|j| 0.5 * gamma[j] * gamma[j] * x[j] * x[j])
                .sum(),
            PotentialSpec::HarmonicLattice { gamma, kappa } => (0..dim)
                .map(|j| {
                    let s = (PI * x[j] / 2.0).sin();
                    0.5 * gamma[j] * gamma[j] * x[j] * x[j] + kappa * s * s
                })
                .sum(),
            PotentialSpec::HarmonicQuartic { c1, c2 } => 0.25 * c1 * (r2 - c2).powi(2),
        }
    }

    /// Supremum of rotation speeds for which `V − ½Ω²|x|²` stays confining.
    pub fn omega_max(&self) -> f64 {
        match *self {
            PotentialSpec::Harmonic { gamma } | PotentialSpec::HarmonicLattice { gamma, .. } => {
                gamma[0].min(gamma[1])
            }
            PotentialSpec::HarmonicQuartic { .. } => f64::INFINITY,
        }
    }

    /// Smallest eigenvalue of `−½Δ + V − ΩL_z` where it is known in closed
    /// form: separable oscillators without rotation, and isotropic 2D
    /// oscillators for any admissible `Ω`.
    pub fn closed_form_lambda0(&self, dim: usize, rotation: f64) -> Option<f64> {
        match *self {
            PotentialSpec::Harmonic { gamma } => match dim {
                1 => Some(0.5 * gamma[0]),
                _ if rotation == 0.0 => Some(0.5 * (gamma[0] + gamma[1])),
                _ if gamma[0] == gamma[1] && rotation.abs() < gamma[0] => Some(gamma[0]),
                _ => None,
            },
            _ => None,
        }
    }

    /// Tag used in the binary field format.
    pub fn tag(&self) -> u8 {
        match self {
            PotentialSpec::Harmonic { .. } => 0,
            PotentialSpec::HarmonicLattice { .. } => 1,
            PotentialSpec::HarmonicQuartic { .. } => 2,
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        match *self {
            PotentialSpec::Harmonic { gamma } => gamma.to_vec(),
            PotentialSpec::HarmonicLattice { gamma, kappa } => vec![gamma[0], gamma[1], kappa],
            PotentialSpec::HarmonicQuartic { c1, c2 } => vec![c1, c2],
        }
    }

    pub fn coefficient_count(tag: u8) -> Option<usize> {
        match tag {
            0 | 2 => Some(2),
            1 => Some(3),
            _ => None,
        }
    }

    pub fn from_tag(tag: u8, c: &[f64]) -> Option<PotentialSpec> {
        if Some(c.len()) != PotentialSpec::coefficient_count(tag) {
            return None;
        }
        Some(match tag {
            0 => PotentialSpec::Harmonic {
                gamma: [c[0], c[1]],
            },
            1 => PotentialSpec::HarmonicLattice {
                gamma: [c[0], c[1]],
                kappa: c[2],
            },
            _ => PotentialSpec::HarmonicQuartic { c1: c[0], c2: c[1] },
        })
    }
}

/// Samples the potential at every grid node.
pub fn eval_potential(spec: &PotentialSpec, grid: &Grid) -> Result<Vec<f64>> {
    spec.validate()?;
    let dim = grid.dim();
    Ok(grid.points().map(|x| spec.value(x, dim)).collect())
}

/// Full parameterization of the action `S_{Ω,ω}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Nonlinearity exponent, `p > 1`.
    pub p: f64,
    /// Interaction strength, `β > 0`.
    pub beta: f64,
    /// Rotation speed `Ω ≥ 0`.
    #[serde(rename = "Omega")]
    pub rotation: f64,
    /// Frequency `ω`; `−ω` plays the role of a chemical potential.
    pub omega: f64,
    pub potential: PotentialSpec,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            p: 3.0,
            beta: 1.0,
            rotation: 0.0,
            omega: -2.0,
            potential: PotentialSpec::default(),
        }
    }
}

impl ModelParams {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_rotation(mut self, rotation: f64) -> Self {
        self.rotation = rotation;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "p must be > 1, got {}",
                self.p
            )));
        }
        // β = 0 is the linear limit used for λ₀; focusing β < 0 is unsupported.
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "beta must be >= 0 (defocusing only), got {}",
                self.beta
            )));
        }
        if !self.omega.is_finite() {
            return Err(Error::InvalidParams(format!(
                "omega must be finite, got {}",
                self.omega
            )));
        }
        self.potential.validate()?;
        if dim == 1 {
            if self.rotation != 0.0 {
                return Err(Error::InvalidParams(format!(
                    "Omega must be 0 in one dimension, got {}",
                    self.rotation
                )));
            }
        } else {
            let max = self.potential.omega_max();
            if !(self.rotation >= 0.0 && self.rotation < max) {
                return Err(Error::InvalidParams(format!(
                    "Omega must satisfy 0 <= Omega < Omega_max = {max}, got {}",
                    self.rotation
                )));
            }
        }
        Ok(())
    }

    /// `β(p−1)/(p+1)`, the coefficient linking `S`, `K` and `‖φ‖_{p+1}^{p+1}`.
    pub fn nehari_coefficient(&self) -> f64 {
        self.beta * (self.p - 1.0) / (self.p + 1.0)
    }
}

/// All scalar functionals of a field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mass: f64,
    pub action: f64,
    pub energy: f64,
    pub quadratic: f64,
    pub nehari: f64,
    pub mu: f64,
    /// `⟨L_z⟩ = ∫φ̄L_zφ / ‖φ‖²`.
    pub lz_expect: f64,
    /// `‖∇φ‖² + ∫(1+V)|φ|²`.
    pub x_norm_sq: f64,
    pub pde_residual_l2: f64,
    /// `‖φ‖_{p+1}^{p+1}`.
    pub nonlinear: f64,
}

/// Quadratic and nonlinear integrals from which every functional follows.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Integrals {
    pub mass: f64,
    pub grad_sq: f64,
    pub potential: f64,
    pub nonlinear: f64,
    /// `Re ∫φ̄ L_z φ`.
    pub lz: f64,
}

impl Integrals {
    pub fn energy(&self, m: &ModelParams) -> f64 {
        0.5 * self.grad_sq + self.potential + 2.0 * m.beta / (m.p + 1.0) * self.nonlinear
            - m.rotation * self.lz
    }

    pub fn action(&self, m: &ModelParams) -> f64 {
        self.energy(m) + m.omega * self.mass
    }

    pub fn mu(&self, m: &ModelParams) -> f64 {
        if self.mass == 0.0 {
            0.0
        } else {
            (self.energy(m) + m.nehari_coefficient() * self.nonlinear) / self.mass
        }
    }
}

/// `|z|^{e}` with `0 ↦ 0`, using the exact square for `e = 2`.
#[inline]
pub(crate) fn abs_pow(z: Complex64, e: f64) -> f64 {
    if e == 2.0 {
        z.norm_sqr()
    } else {
        let r = z.norm();
        if r == 0.0 {
            0.0
        } else {
            (e * r.ln()).exp()
        }
    }
}

/// Reusable evaluation context: a grid, the model, the sampled potential and
/// transform buffers.
pub struct Hamiltonian {
    grid: Arc<Grid>,
    params: ModelParams,
    potential: Vec<f64>,
}

/// Spectral work buffers for one field evaluation.
pub(crate) struct Workspace {
    pub fft: FftScratch,
    pub spectrum: Vec<Complex64>,
    pub d1: Vec<Complex64>,
    pub d2: Vec<Complex64>,
    pub lz: Vec<Complex64>,
}

impl Workspace {
    pub fn new(grid: &Grid) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); grid.len()];
        Workspace {
            fft: grid.scratch(),
            spectrum: z.clone(),
            d1: z.clone(),
            d2: z.clone(),
            lz: z,
        }
    }
}

impl Hamiltonian {
    pub fn new(params: ModelParams, grid: Arc<Grid>) -> Result<Self> {
        params.validate(grid.dim())?;
        let potential = eval_potential(&params.potential, &grid)?;
        Ok(Hamiltonian {
            grid,
            params,
            potential,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    /// Same grid and potential with a different frequency or rotation.
    pub fn with_params(&self, params: ModelParams) -> Result<Self> {
        params.validate(self.grid.dim())?;
        let potential = if params.potential == self.params.potential {
            self.potential.clone()
        } else {
            eval_potential(&params.potential, &self.grid)?
        };
        Ok(Hamiltonian {
            grid: self.grid.clone(),
            params,
            potential,
        })
    }

    fn check(&self, phi: &Field) -> Result<()> {
        if !(Arc::ptr_eq(phi.grid(), &self.grid) || **phi.grid() == *self.grid) {
            return Err(Error::GridMismatch);
        }
        phi.check_finite()
    }

    /// Fills `ws.spectrum` with the DFT of `phi` and, when rotation is
    /// active, `ws.lz` with `L_z φ`.
    pub(crate) fn prepare(&self, phi: &[Complex64], ws: &mut Workspace) {
        ws.spectrum.copy_from_slice(phi);
        self.grid.forward_with(&mut ws.spectrum, &mut ws.fft);
        if self.rotating() {
            self.lz_from_spectrum(ws);
        }
    }

    pub(crate) fn rotating(&self) -> bool {
        self.grid.dim() == 2 && self.params.rotation != 0.0
    }

    /// Computes `L_z φ` into `ws.lz` from `ws.spectrum`.
    pub(crate) fn lz_from_spectrum(&self, ws: &mut Workspace) {
        let g = &self.grid;
        let n1 = g.axes()[0].n;
        let k1 = g.derivative_wavenumbers(0);
        let k2 = g.derivative_wavenumbers(1);
        for (f, (a, b)) in ws.d1.iter_mut().zip(ws.d2.iter_mut()).enumerate() {
            let s = ws.spectrum[f];
            let (i, j) = (f % n1, f / n1);
            *a = Complex64::new(-s.im * k1[i], s.re * k1[i]);
            *b = Complex64::new(-s.im * k2[j], s.re * k2[j]);
        }
        g.inverse_with(&mut ws.d1, &mut ws.fft);
        g.inverse_with(&mut ws.d2, &mut ws.fft);
        let x1 = g.coords(0);
        let x2 = g.coords(1);
        for (f, out) in ws.lz.iter_mut().enumerate() {
            let (i, j) = (f % n1, f / n1);
            let v = ws.d1[f] * x2[j] - ws.d2[f] * x1[i];
            *out = Complex64::new(-v.im, v.re);
        }
    }

    /// Integrals of `phi` given a prepared workspace.
    pub(crate) fn integrals(&self, phi: &[Complex64], ws: &Workspace) -> Integrals {
        let g = &self.grid;
        let dv = g.cell_volume();
        let n = g.len() as f64;
        let grad_sq: f64 = ws
            .spectrum
            .iter()
            .zip(g.k_squared())
            .map(|(c, k2)| k2 * c.norm_sqr())
            .sum::<f64>()
            * dv
            / n;
        let mut mass = 0.0;
        let mut potential = 0.0;
        for (v, w) in phi.iter().zip(&self.potential) {
            let d = v.norm_sqr();
            mass += d;
            potential += w * d;
        }
        let lz = if self.rotating() {
            phi.iter()
                .zip(&ws.lz)
                .map(|(a, b)| (a.conj() * b).re)
                .sum::<f64>()
                * dv
        } else {
            0.0
        };
        Integrals {
            mass: mass * dv,
            grad_sq,
            potential: potential * dv,
            nonlinear: lq_power(phi, self.params.p + 1.0, dv),
            lz,
        }
    }

    /// `H(φ)` into `out`, given a prepared workspace.
    pub(crate) fn residual_into(
        &self,
        phi: &[Complex64],
        ws: &mut Workspace,
        out: &mut [Complex64],
        omega: f64,
    ) {
        let g = &self.grid;
        for ((o, s), k2) in out.iter_mut().zip(&ws.spectrum).zip(g.k_squared()) {
            *o = s * (0.5 * k2);
        }
        g.inverse_with(out, &mut ws.fft);
        let ModelParams {
            p, beta, rotation, ..
        } = self.params;
        let rot = self.rotating();
        for (f, o) in out.iter_mut().enumerate() {
            let v = phi[f];
            let w = self.potential[f] + beta * abs_pow(v, p - 1.0) + omega;
            *o += v * w;
            if rot {
                *o -= ws.lz[f] * rotation;
            }
        }
    }

    /// `H(φ) = −½Δφ + Vφ + β|φ|^{p−1}φ − ΩL_zφ + ωφ`.
    pub fn apply_h(&self, phi: &Field) -> Result<Field> {
        self.check(phi)?;
        let mut ws = Workspace::new(&self.grid);
        self.prepare(phi.values(), &mut ws);
        let mut out = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        self.residual_into(phi.values(), &mut ws, &mut out, self.params.omega);
        Field::new(self.grid.clone(), out)
    }

    /// `L²` gradient of `S` with respect to `(Re φ, Im φ)`, i.e. `2H(φ)`.
    pub fn action_gradient(&self, phi: &Field) -> Result<Field> {
        Ok(self.apply_h(phi)?.scale(Complex64::new(2.0, 0.0)))
    }

    pub fn action(&self, phi: &Field) -> Result<f64> {
        self.check(phi)?;
        let mut ws = Workspace::new(&self.grid);
        self.prepare(phi.values(), &mut ws);
        Ok(self.integrals(phi.values(), &ws).action(&self.params))
    }

    pub fn energy(&self, phi: &Field) -> Result<f64> {
        self.check(phi)?;
        let mut ws = Workspace::new(&self.grid);
        self.prepare(phi.values(), &mut ws);
        Ok(self.integrals(phi.values(), &ws).energy(&self.params))
    }

    pub fn diagnostics(&self, phi: &Field) -> Result<Diagnostics> {
        self.check(phi)?;
        let mut ws = Workspace::new(&self.grid);
        self.prepare(phi.values(), &mut ws);
        let it = self.integrals(phi.values(), &ws);
        let mut h = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        self.residual_into(phi.values(), &mut ws, &mut h, self.params.omega);
        let dv = self.grid.cell_volume();
        let residual = (h.iter().map(|v| v.norm_sqr()).sum::<f64>() * dv).sqrt();
        Ok(self.assemble(&it, residual))
    }

    pub(crate) fn assemble(&self, it: &Integrals, residual: f64) -> Diagnostics {
        let m = &self.params;
        let energy = it.energy(m);
        let quadratic = 0.5 * it.grad_sq + it.potential + m.omega * it.mass - m.rotation * it.lz;
        Diagnostics {
            mass: it.mass,
            action: energy + m.omega * it.mass,
            energy,
            quadratic,
            nehari: quadratic + m.beta * it.nonlinear,
            mu: it.mu(m),
            lz_expect: if it.mass > 0.0 { it.lz / it.mass } else { 0.0 },
            x_norm_sq: it.grad_sq + it.mass + it.potential,
            pde_residual_l2: residual,
            nonlinear: it.nonlinear,
        }
    }

    /// `(u, v)_X = ∫ ∇u·∇v̄ + (1+V)uv̄`.
    pub fn x_inner(&self, u: &Field, v: &Field) -> Result<Complex64> {
        self.check(u)?;
        self.check(v)?;
        let g = &self.grid;
        let mut su = u.values().to_vec();
        let mut sv = v.values().to_vec();
        g.forward(&mut su);
        g.forward(&mut sv);
        let grad: Complex64 = su
            .iter()
            .zip(&sv)
            .zip(g.k_squared())
            .map(|((a, b), k2)| a * b.conj() * k2)
            .sum::<Complex64>()
            / g.len() as f64;
        let rest: Complex64 = u
            .values()
            .iter()
            .zip(v.values())
            .zip(&self.potential)
            .map(|((a, b), w)| a * b.conj() * (1.0 + w))
            .sum();
        Ok((grad + rest) * g.cell_volume())
    }

    pub fn x_norm(&self, u: &Field) -> Result<f64> {
        Ok(self.x_inner(u, u)?.re.max(0.0).sqrt())
    }
}

/// Diagnostics of `phi` under `params`.
pub fn diagnostics(phi: &Field, params: &ModelParams) -> Result<Diagnostics> {
    Hamiltonian::new(*params, phi.grid().clone())?.diagnostics(phi)
}

/// `2H(φ)`, the `L²` gradient of the action.
pub fn action_gradient(phi: &Field, params: &ModelParams) -> Result<Field> {
    Hamiltonian::new(*params, phi.grid().clone())?.action_gradient(phi)
}
