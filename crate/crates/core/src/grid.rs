//! Uniform periodic grids in one or two dimensions with FFT-based
//! differential operators and trapezoidal quadrature.
//!
//! Samples are stored with `x₁` varying fastest: node `(j₁, j₂)` lives at
//! flat index `j₁ + n₁·j₂`. Node coordinates are `x = min + j·h` with
//! `h = (max - min)/n`, so the right endpoint of each axis is the periodic
//! image of the left one.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One axis of a tensor grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Axis { min, max, n }
    }

    /// Symmetric axis `[-half_width, half_width)`.
    pub fn symmetric(half_width: f64, n: usize) -> Self {
        Axis::new(-half_width, half_width, n)
    }

    pub fn length(&self) -> f64 {
        self.max - self.min
    }

    pub fn spacing(&self) -> f64 {
        self.length() / self.n as f64
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.max <= self.min {
            return Err(Error::InvalidGrid(format!(
                "axis {index}: need finite bounds with max > min, got [{}, {}]",
                self.min, self.max
            )));
        }
        if self.n < 8 || !self.n.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "axis {index}: point count must be even and at least 8, got {}",
                self.n
            )));
        }
        Ok(())
    }
}

struct AxisPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Tensor-product periodic grid with precomputed wavenumbers and FFT plans.
pub struct Grid {
    axes: Vec<Axis>,
    coords: Vec<Vec<f64>>,
    wavenumbers: Vec<Vec<f64>>,
    /// Wavenumbers with the Nyquist entry zeroed, for odd-order derivatives.
    derivative_wavenumbers: Vec<Vec<f64>>,
    k_squared: Vec<f64>,
    plans: Vec<AxisPlan>,
    cell_volume: f64,
    len: usize,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("axes", &self.axes).finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.axes == other.axes
    }
}

/// Reusable buffers for multi-dimensional transforms.
pub struct FftScratch {
    transpose: Vec<Complex64>,
    fft: Vec<Complex64>,
}

fn signed_index(j: usize, n: usize) -> i64 {
    if j < n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Arc<Grid>> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 1 or 2, got {}",
                axes.len()
            )));
        }
        for (i, a) in axes.iter().enumerate() {
            a.validate(i)?;
        }

        let mut planner = FftPlanner::<f64>::new();
        let mut coords = Vec::new();
        let mut wavenumbers = Vec::new();
        let mut derivative_wavenumbers = Vec::new();
        let mut plans = Vec::new();
        for a in &axes {
            let h = a.spacing();
            coords.push((0..a.n).map(|j| a.min + j as f64 * h).collect());
            let k: Vec<f64> = (0..a.n)
                .map(|j| 2.0 * PI * signed_index(j, a.n) as f64 / a.length())
                .collect();
            let mut kd = k.clone();
            kd[a.n / 2] = 0.0;
            wavenumbers.push(k);
            derivative_wavenumbers.push(kd);
            plans.push(AxisPlan {
                forward: planner.plan_fft_forward(a.n),
                inverse: planner.plan_fft_inverse(a.n),
            });
        }

        let len = axes.iter().map(|a| a.n).product();
        let cell_volume = axes.iter().map(Axis::spacing).product();
        let k_squared = match axes.len() {
            1 => wavenumbers[0].iter().map(|k| k * k).collect(),
            _ => {
                let mut out = Vec::with_capacity(len);
                for k2 in &wavenumbers[1] {
                    for k1 in &wavenumbers[0] {
                        out.push(k1 * k1 + k2 * k2);
                    }
                }
                out
            }
        };

        Ok(Arc::new(Grid {
            axes,
            coords,
            wavenumbers,
            derivative_wavenumbers,
            k_squared,
            plans,
            cell_volume,
            len,
        }))
    }

    /// Square (or 1D) grid `[-half_width, half_width)^dim` with `n` points per axis.
    pub fn cube(dim: usize, half_width: f64, n: usize) -> Result<Arc<Grid>> {
        Grid::new(vec![Axis::symmetric(half_width, n); dim])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Quadrature weight `Π h_j`.
    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn coords(&self, axis: usize) -> &[f64] {
        &self.coords[axis]
    }

    pub fn wavenumbers(&self, axis: usize) -> &[f64] {
        &self.wavenumbers[axis]
    }

    pub fn derivative_wavenumbers(&self, axis: usize) -> &[f64] {
        &self.derivative_wavenumbers[axis]
    }

    /// `|k|²` per spectral index, Nyquist modes included.
    pub fn k_squared(&self) -> &[f64] {
        &self.k_squared
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        match idx {
            [i] => *i,
            [i, j] => i + self.axes[0].n * j,
            _ => panic!("index rank does not match grid dimension"),
        }
    }

    /// Multi-index `(j₁, j₂)` of a flat index; `j₂ = 0` in 1D.
    pub fn multi_index(&self, flat: usize) -> (usize, usize) {
        let n1 = self.axes[0].n;
        (flat % n1, flat / n1)
    }

    /// Physical coordinates of a flat index (second component 0 in 1D).
    pub fn point(&self, flat: usize) -> [f64; 2] {
        let (i, j) = self.multi_index(flat);
        let x2 = if self.dim() == 2 {
            self.coords[1][j]
        } else {
            0.0
        };
        [self.coords[0][i], x2]
    }

    /// Iterator over node coordinates in flat order.
    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len).map(move |f| self.point(f))
    }

    pub fn scratch(&self) -> FftScratch {
        let longest = self.axes.iter().map(|a| a.n).max().unwrap_or(0);
        let scratch_len = self
            .plans
            .iter()
            .map(|p| {
                p.forward
                    .get_inplace_scratch_len()
                    .max(p.inverse.get_inplace_scratch_len())
            })
            .max()
            .unwrap_or(0)
            .max(longest);
        FftScratch {
            transpose: if self.dim() == 2 {
                vec![Complex64::new(0.0, 0.0); self.len]
            } else {
                Vec::new()
            },
            fft: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    /// Unnormalized forward DFT in place.
    pub fn forward_with(&self, data: &mut [Complex64], scratch: &mut FftScratch) {
        self.transform(data, scratch, true);
    }

    /// Inverse DFT in place, normalized by `1/N`.
    pub fn inverse_with(&self, data: &mut [Complex64], scratch: &mut FftScratch) {
        self.transform(data, scratch, false);
        let s = 1.0 / self.len as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        let mut s = self.scratch();
        self.forward_with(data, &mut s);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        let mut s = self.scratch();
        self.inverse_with(data, &mut s);
    }

    fn transform(&self, data: &mut [Complex64], scratch: &mut FftScratch, forward: bool) {
        assert_eq!(data.len(), self.len, "buffer length does not match grid");
        let pick = |p: &AxisPlan| {
            if forward {
                p.forward.clone()
            } else {
                p.inverse.clone()
            }
        };
        let fft0 = pick(&self.plans[0]);
        let s0 = fft0.get_inplace_scratch_len();
        fft0.process_with_scratch(data, &mut scratch.fft[..s0]);
        if self.dim() == 2 {
            let (n1, n2) = (self.axes[0].n, self.axes[1].n);
            let t = &mut scratch.transpose;
            transpose(data, t, n1, n2);
            let fft1 = pick(&self.plans[1]);
            let s1 = fft1.get_inplace_scratch_len();
            fft1.process_with_scratch(t, &mut scratch.fft[..s1]);
            transpose(t, data, n2, n1);
        }
    }
}

/// `dst[c·rows + r] = src[r·cols + c]` for a `rows × cols` row-major `src`,
/// where `cols` is the fast index.
fn transpose(src: &[Complex64], dst: &mut [Complex64], cols: usize, rows: usize) {
    transpose::transpose(src, dst, cols, rows);
}

/// A complex function sampled on every node of a [`Grid`].
#[derive(Clone)]
pub struct Field {
    grid: Arc<Grid>,
    data: Vec<Complex64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("grid", &self.grid)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Field {
    pub fn new(grid: Arc<Grid>, data: Vec<Complex64>) -> Result<Field> {
        if data.len() != grid.len() {
            return Err(Error::InvalidField(format!(
                "{} samples for a grid with {} nodes",
                data.len(),
                grid.len()
            )));
        }
        let f = Field { grid, data };
        f.check_finite()?;
        Ok(f)
    }

    pub fn zeros(grid: Arc<Grid>) -> Field {
        let data = vec![Complex64::new(0.0, 0.0); grid.len()];
        Field { grid, data }
    }

    /// Samples `f(x₁, x₂)` at every node (`x₂ = 0` in 1D).
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64, f64) -> Complex64) -> Result<Field> {
        let data = grid.points().map(|[x1, x2]| f(x1, x2)).collect();
        Field::new(grid, data)
    }

    pub fn from_real(grid: Arc<Grid>, values: &[f64]) -> Result<Field> {
        Field::new(
            grid,
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    /// Skips the finiteness check; callers guarantee the invariant.
    pub(crate) fn from_parts_unchecked(grid: Arc<Grid>, data: Vec<Complex64>) -> Field {
        debug_assert_eq!(grid.len(), data.len());
        Field { grid, data }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|v| !(v.re.is_finite() && v.im.is_finite()))
        {
            Some(i) => Err(Error::InvalidField(format!(
                "non-finite sample at node {i}"
            ))),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    fn require_same_grid(&self, other: &Field) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Pointwise map; the result is validated for finiteness.
    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Result<Field> {
        Field::new(self.grid.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: Complex64) -> Field {
        Field::from_parts_unchecked(
            self.grid.clone(),
            self.data.iter().map(|&v| v * c).collect(),
        )
    }

    /// `a·self + b·other`.
    pub fn axpby(&self, a: Complex64, other: &Field, b: Complex64) -> Result<Field> {
        self.require_same_grid(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Field::new(self.grid.clone(), data)
    }

    /// Unnormalized DFT coefficients.
    pub fn spectrum(&self) -> Vec<Complex64> {
        let mut c = self.data.clone();
        self.grid.forward(&mut c);
        c
    }

    fn spectral_multiply(&self, symbol: impl Fn(usize) -> Complex64) -> Result<Field> {
        self.check_finite()?;
        let mut c = self.spectrum();
        for (i, v) in c.iter_mut().enumerate() {
            *v *= symbol(i);
        }
        self.grid.inverse(&mut c);
        Field::new(self.grid.clone(), c)
    }

    /// Spectral Laplacian `Δf`.
    pub fn apply_laplacian(&self) -> Result<Field> {
        let k2 = self.grid.k_squared();
        self.spectral_multiply(|i| Complex64::new(-k2[i], 0.0))
    }

    /// Spectral `∂f/∂x_axis` with the Nyquist coefficient dropped.
    pub fn apply_partial(&self, axis: usize) -> Result<Field> {
        let dim = self.grid.dim();
        if axis >= dim {
            return Err(Error::AxisOutOfRange { axis, dim });
        }
        let k = self.grid.derivative_wavenumbers(axis);
        let n1 = self.grid.axes()[0].n;
        self.spectral_multiply(|i| {
            let j = if axis == 0 { i % n1 } else { i / n1 };
            Complex64::new(0.0, k[j])
        })
    }

    /// Angular momentum `L_z f = i(x₂ ∂₁f − x₁ ∂₂f)`; identically zero in 1D.
    pub fn apply_lz(&self) -> Result<Field> {
        self.check_finite()?;
        if self.grid.dim() == 1 {
            return Ok(Field::zeros(self.grid.clone()));
        }
        let d1 = self.apply_partial(0)?;
        let d2 = self.apply_partial(1)?;
        let data = self
            .grid
            .points()
            .zip(d1.data.iter().zip(&d2.data))
            .map(|([x1, x2], (&a, &b))| Complex64::i() * (x2 * a - x1 * b))
            .collect();
        Field::new(self.grid.clone(), data)
    }

    /// `∫ f·conj(g)` by the periodic trapezoid rule.
    pub fn inner(&self, g: &Field) -> Result<Complex64> {
        self.require_same_grid(g)?;
        let s: Complex64 = self
            .data
            .iter()
            .zip(&g.data)
            .map(|(&f, &g)| f * g.conj())
            .sum();
        Ok(s * self.grid.cell_volume())
    }

    /// `(∫|f|^q)^{1/q}`.
    pub fn norm_lq(&self, q: f64) -> Result<f64> {
        if !(q >= 1.0) {
            return Err(Error::InvalidField(format!(
                "norm exponent must be >= 1, got {q}"
            )));
        }
        Ok(lq_power(&self.data, q, self.grid.cell_volume()).powf(1.0 / q))
    }

    pub fn norm_l2(&self) -> f64 {
        self.mass().sqrt()
    }

    /// `‖f‖₂²`.
    pub fn mass(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest `|f|` over the nodes on the box boundary.
    pub fn boundary_max_abs(&self) -> f64 {
        let g = &self.grid;
        let n1 = g.axes()[0].n;
        (0..g.len())
            .filter(|&f| {
                let (i, j) = g.multi_index(f);
                let on1 = i == 0 || i == n1 - 1;
                let on2 = g.dim() == 2 && (j == 0 || j == g.axes()[1].n - 1);
                on1 || on2
            })
            .map(|f| self.data[f].norm())
            .fold(0.0, f64::max)
    }

    /// Multiplies by the constant phase that makes the sample of largest
    /// modulus real and positive.
    pub fn align_phase(&self) -> Field {
        let peak = self
            .data
            .iter()
            .copied()
            .max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr()))
            .unwrap_or_default();
        if peak.norm() == 0.0 {
            return self.clone();
        }
        self.scale(peak.conj() / peak.norm())
    }

    /// Cubic Lagrange interpolation at an arbitrary point, with periodic
    /// wrap-around of the stencil.
    pub fn interpolate(&self, x: &[f64]) -> Complex64 {
        let g = &self.grid;
        let stencil = |axis: usize, xv: f64| -> ([usize; 4], [f64; 4]) {
            let a = g.axes()[axis];
            let h = a.spacing();
            let s = (xv - a.min) / h;
            let base = s.floor();
            let t = s - base;
            let n = a.n as i64;
            let b = base as i64;
            let idx = [b - 1, b, b + 1, b + 2].map(|j| j.rem_euclid(n) as usize);
            let w = [
                -t * (t - 1.0) * (t - 2.0) / 6.0,
                (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                -(t + 1.0) * t * (t - 2.0) / 2.0,
                (t + 1.0) * t * (t - 1.0) / 6.0,
            ];
            (idx, w)
        };
        let (i1, w1) = stencil(0, x[0]);
        if g.dim() == 1 {
            return (0..4).map(|a| self.data[i1[a]] * w1[a]).sum();
        }
        let (i2, w2) = stencil(1, x[1]);
        let n1 = g.axes()[0].n;
        let mut acc = Complex64::new(0.0, 0.0);
        for b in 0..4 {
            let row: Complex64 = (0..4).map(|a| self.data[i1[a] + n1 * i2[b]] * w1[a]).sum();
            acc += row * w2[b];
        }
        acc
    }

    /// Transfers the field to another grid. Boxes that coincide use exact
    /// Fourier zero-padding or truncation; otherwise cubic interpolation is
    /// used, with zero outside the source box.
    pub fn resample(&self, target: &Arc<Grid>) -> Result<Field> {
        if self.grid.dim() != target.dim() {
            return Err(Error::GridMismatch);
        }
        if *self.grid == **target {
            return Ok(Field::from_parts_unchecked(
                target.clone(),
                self.data.clone(),
            ));
        }
        let same_box = self
            .grid
            .axes()
            .iter()
            .zip(target.axes())
            .all(|(a, b)| a.min == b.min && a.max == b.max);
        if same_box {
            return self.resample_spectral(target);
        }
        let src_axes = self.grid.axes();
        let data = target
            .points()
            .map(|p| {
                let inside = (0..target.dim()).all(|ax| {
                    p[ax] >= src_axes[ax].min && p[ax] <= src_axes[ax].max - src_axes[ax].spacing()
                });
                if inside {
                    self.interpolate(&p[..target.dim()])
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Field::new(target.clone(), data)
    }

    fn resample_spectral(&self, target: &Arc<Grid>) -> Result<Field> {
        let src = self.spectrum();
        let mut dst = vec![Complex64::new(0.0, 0.0); target.len()];
        let sa = self.grid.axes();
        let ta = target.axes();
        // Modes strictly below both Nyquist frequencies are carried over.
        let keep = |j: usize, n_src: usize, n_dst: usize| -> Option<usize> {
            let s = signed_index(j, n_src);
            let lim = (n_src.min(n_dst) / 2) as i64;
            if s.abs() >= lim {
                None
            } else {
                Some(s.rem_euclid(n_dst as i64) as usize)
            }
        };
        let scale = target.len() as f64 / self.grid.len() as f64;
        for (f, &c) in src.iter().enumerate() {
            let (i, j) = self.grid.multi_index(f);
            let Some(ti) = keep(i, sa[0].n, ta[0].n) else {
                continue;
            };
            let tj = if sa.len() == 2 {
                match keep(j, sa[1].n, ta[1].n) {
                    Some(tj) => tj,
                    None => continue,
                }
            } else {
                0
            };
            dst[ti + ta[0].n * tj] = c * scale;
        }
        target.inverse(&mut dst);
        Field::new(target.clone(), dst)
    }
}

/// `Σ|v|^q · dV`, with `|v| = 0` contributing exactly zero.
pub(crate) fn lq_power(data: &[Complex64], q: f64, dv: f64) -> f64 {
    let s: f64 = if q == 2.0 {
        data.iter().map(|v| v.norm_sqr()).sum()
    } else if q == 4.0 {
        data.iter().map(|v| v.norm_sqr() * v.norm_sqr()).sum()
    } else {
        data.iter()
            .map(|v| {
                let r = v.norm();
                if r == 0.0 {
                    0.0
                } else {
                    (q * r.ln()).exp()
                }
            })
            .sum()
    };
    s * dv
}
