//! Periodic-box discretization: grids, complex fields, Fourier multipliers,
//! spatial weights `<x>^s` and the dilation group `e^{iθA}`.
//!
//! FFT convention: the forward transform is unnormalized and the inverse
//! divides by the point count. Norms carry the quadrature weight
//! `spacing^d`, so discrete L² norms approximate continuum ones.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Uniform periodic grid on `[-L, L)^d` with `n` points per axis.
pub struct Grid {
    dim: usize,
    n: usize,
    half_length: f64,
    spacing: f64,
    /// Per-axis frequencies `πk/L` in FFT storage order (Nyquist is `+π n/(2L)`).
    freqs: Vec<f64>,
    coords: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    exec: Exec,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("half_length", &self.half_length)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n && self.half_length == other.half_length
    }
}

impl Grid {
    pub fn new(dim: usize, n_per_axis: usize, half_length: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be at least 1".into()));
        }
        if n_per_axis < 4 || !n_per_axis.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be even and >= 4, got {n_per_axis}"
            )));
        }
        if !(half_length > 0.0 && half_length.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "half length must be positive, got {half_length}"
            )));
        }
        if (n_per_axis as f64).powi(dim as i32) > 1.0e9 {
            return Err(Error::InvalidGrid("grid too large".into()));
        }
        let n = n_per_axis;
        let spacing = 2.0 * half_length / n as f64;
        let freqs = (0..n)
            .map(|i| {
                let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                std::f64::consts::PI * k / half_length
            })
            .collect();
        let coords = (0..n).map(|i| -half_length + i as f64 * spacing).collect();
        let mut planner = FftPlanner::new();
        Ok(Grid {
            dim,
            n,
            half_length,
            spacing,
            freqs,
            coords,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            exec: Exec::default(),
        })
    }

    /// Same grid with a different execution policy for its transforms.
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_per_axis(&self) -> usize {
        self.n
    }
    pub fn half_length(&self) -> f64 {
        self.half_length
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn exec(&self) -> Exec {
        self.exec
    }
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Quadrature weight `spacing^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }
    /// Per-axis frequencies in FFT storage order.
    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }
    /// Per-axis node coordinates `-L + i h`.
    pub fn coordinates(&self) -> &[f64] {
        &self.coords
    }

    /// Multi-index of a flat (row-major) index.
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for axis in (0..self.dim).rev() {
            out[axis] = flat % self.n;
            flat /= self.n;
        }
    }

    /// Coordinates of the point with flat index `flat`.
    pub fn point(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.dim).rev() {
            out[axis] = self.coords[rem % self.n];
            rem /= self.n;
        }
    }

    /// Frequency vector of the Fourier mode with flat index `flat`.
    pub fn frequency(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.dim).rev() {
            out[axis] = self.freqs[rem % self.n];
            rem /= self.n;
        }
    }

    /// Evaluates `f` at every grid point.
    pub fn tabulate_points<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&[f64]) -> T + Sync + Send,
    {
        par::map_range(self.exec, self.len(), |i| {
            let mut x = vec![0.0; self.dim];
            self.point(i, &mut x);
            f(&x)
        })
    }

    /// Evaluates `f` at every frequency vector (FFT storage order).
    pub fn tabulate_frequencies<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&[f64]) -> T + Sync + Send,
    {
        par::map_range(self.exec, self.len(), |i| {
            let mut xi = vec![0.0; self.dim];
            self.frequency(i, &mut xi);
            f(&xi)
        })
    }

    /// `|ξ|²` for every Fourier mode.
    pub fn xi_squared(&self) -> Vec<f64> {
        self.tabulate_frequencies(|xi| xi.iter().map(|v| v * v).sum())
    }

    /// `<x>^s = (1 + |x|²)^{s/2}` at every grid point.
    pub fn bracket_power(&self, s: f64) -> Vec<f64> {
        self.tabulate_points(|x| (1.0 + x.iter().map(|v| v * v).sum::<f64>()).powf(0.5 * s))
    }

    /// `<ξ>^s` for every Fourier mode, the symbol of `<D>^s`.
    pub fn symbol_bracket_power(&self, s: f64) -> Vec<f64> {
        self.tabulate_frequencies(|xi| (1.0 + xi.iter().map(|v| v * v).sum::<f64>()).powf(0.5 * s))
    }

    /// In-place forward FFT (unnormalized).
    pub fn fft(&self, data: &mut [C64]) {
        self.transform(data, &self.forward);
    }

    /// In-place inverse FFT, divided by the point count.
    pub fn ifft(&self, data: &mut [C64]) {
        self.transform(data, &self.inverse);
        let scale = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    fn transform(&self, data: &mut [C64], plan: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len(), "field length does not match grid");
        let n = self.n;
        for axis in 0..self.dim {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            if stride == 1 {
                let lines_per_chunk = (4096 / n).max(1);
                par::for_each_chunk_mut(self.exec, data, n * lines_per_chunk, |_, chunk| {
                    let mut scratch = vec![C64::default(); plan.get_inplace_scratch_len()];
                    plan.process_with_scratch(chunk, &mut scratch);
                });
            } else {
                // Each block is an n x stride matrix; transpose so the axis is
                // contiguous, transform all lines at once, transpose back.
                par::for_each_chunk_mut(self.exec, data, n * stride, |_, block| {
                    let mut buf = vec![C64::default(); n * stride];
                    for j in 0..n {
                        for s in 0..stride {
                            buf[s * n + j] = block[j * stride + s];
                        }
                    }
                    let mut scratch = vec![C64::default(); plan.get_inplace_scratch_len()];
                    plan.process_with_scratch(&mut buf, &mut scratch);
                    for j in 0..n {
                        for s in 0..stride {
                            block[j * stride + s] = buf[s * n + j];
                        }
                    }
                });
            }
        }
    }
}

/// Complex-valued state on a grid, stored row-major (axis 0 slowest).
#[derive(Clone, Debug)]
pub struct ComplexField {
    grid: Arc<Grid>,
    values: Vec<C64>,
}

impl ComplexField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        ComplexField {
            grid: grid.clone(),
            values: vec![C64::default(); grid.len()],
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(ComplexField {
            grid: grid.clone(),
            values,
        })
    }

    pub fn from_fn<F>(grid: &Arc<Grid>, f: F) -> Self
    where
        F: Fn(&[f64]) -> C64 + Sync + Send,
    {
        ComplexField {
            grid: grid.clone(),
            values: grid.tabulate_points(f),
        }
    }

    /// Plane wave `e^{iξ·x}`.
    pub fn plane_wave(grid: &Arc<Grid>, xi: &[f64]) -> Self {
        Self::from_fn(grid, |x| {
            let phase: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
            C64::from_polar(1.0, phase)
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<C64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ComplexField {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        (norm_sqr(&self.values) * self.grid.cell_volume()).sqrt()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        lp_norm(&self.values, p, self.grid.cell_volume())
    }

    /// `⟨self, other⟩ = Σ self · conj(other) · h^d`.
    pub fn inner(&self, other: &ComplexField) -> C64 {
        inner(&self.values, &other.values) * self.grid.cell_volume()
    }

    pub fn scale(&mut self, s: C64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: C64, other: &ComplexField) {
        axpy(&mut self.values, s, &other.values);
    }

    pub fn sub(&self, other: &ComplexField) -> ComplexField {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Fraction of `‖f‖²` lying within `fraction · L` of the box boundary.
    pub fn boundary_mass_fraction(&self, fraction: f64) -> f64 {
        let grid = &self.grid;
        let edge = grid.half_length() * (1.0 - fraction);
        let mut x = vec![0.0; grid.dim()];
        let (mut near, mut total) = (0.0, 0.0);
        for (i, v) in self.values.iter().enumerate() {
            grid.point(i, &mut x);
            let m = v.norm_sqr();
            total += m;
            if x.iter().any(|c| c.abs() >= edge) {
                near += m;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            near / total
        }
    }
}

pub(crate) fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

pub(crate) fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub(crate) fn axpy(y: &mut [C64], s: C64, x: &[C64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += s * b);
}

pub(crate) fn lp_norm(v: &[C64], p: f64, cell: f64) -> f64 {
    if p.is_infinite() {
        v.iter().map(|c| c.norm()).fold(0.0, f64::max)
    } else {
        (v.iter().map(|c| c.norm().powf(p)).sum::<f64>() * cell).powf(1.0 / p)
    }
}

type SymbolFn = dyn Fn(&[f64]) -> C64 + Send + Sync;

/// A Fourier multiplier `m(ξ)`.
#[derive(Clone)]
pub struct FourierSymbol {
    description: String,
    evaluator: Arc<SymbolFn>,
}

impl fmt::Debug for FourierSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FourierSymbol({})", self.description)
    }
}

impl FourierSymbol {
    pub fn new<F>(description: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> C64 + Send + Sync + 'static,
    {
        FourierSymbol {
            description: description.into(),
            evaluator: Arc::new(f),
        }
    }

    /// `<ξ>^s = (1 + |ξ|²)^{s/2}`, the symbol of `<D>^s`.
    pub fn japanese_power(s: f64) -> Self {
        Self::new(format!("<xi>^{s}"), move |xi| {
            C64::from((1.0 + xi.iter().map(|v| v * v).sum::<f64>()).powf(0.5 * s))
        })
    }

    /// `|ξ|²`, the symbol of `-Δ`.
    pub fn laplacian() -> Self {
        Self::new("|xi|^2", |xi| C64::from(xi.iter().map(|v| v * v).sum::<f64>()))
    }

    /// `ξ_j`, the symbol of `D_j = -i ∂_j`.
    pub fn derivative(axis: usize) -> Self {
        Self::new(format!("xi_{axis}"), move |xi| C64::from(xi[axis]))
    }

    /// `(|ξ|² - z)^{-1}`.
    pub fn free_resolvent(z: C64) -> Self {
        Self::new(format!("(|xi|^2 - {z})^-1"), move |xi| {
            (C64::from(xi.iter().map(|v| v * v).sum::<f64>()) - z).inv()
        })
    }

    /// `e^{-it|ξ|²}`, the free propagator `e^{itΔ}`.
    pub fn free_propagator(t: f64) -> Self {
        Self::new(format!("exp(-i {t} |xi|^2)"), move |xi| {
            C64::from_polar(1.0, -t * xi.iter().map(|v| v * v).sum::<f64>())
        })
    }

    /// Pointwise product of two symbols.
    pub fn product(&self, other: &FourierSymbol) -> Self {
        let (a, b) = (self.evaluator.clone(), other.evaluator.clone());
        Self::new(
            format!("({})*({})", self.description, other.description),
            move |xi| a(xi) * b(xi),
        )
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn eval(&self, xi: &[f64]) -> C64 {
        (self.evaluator)(xi)
    }

    /// Values at every Fourier mode of `grid`, in FFT storage order.
    pub fn tabulate(&self, grid: &Grid) -> Vec<C64> {
        grid.tabulate_frequencies(|xi| self.eval(xi))
    }
}

/// `IFFT(m · FFT(f))`.
pub fn apply_multiplier(f: &ComplexField, m: &FourierSymbol) -> ComplexField {
    let table = m.tabulate(f.grid());
    apply_table(f, &table)
}

/// Multiplier application with a precomputed table.
pub fn apply_table(f: &ComplexField, table: &[C64]) -> ComplexField {
    let mut v = f.values().to_vec();
    multiply_in_fourier(f.grid(), &mut v, table);
    f.with_values(v)
}

pub(crate) fn multiply_in_fourier(grid: &Grid, v: &mut [C64], table: &[C64]) {
    grid.fft(v);
    v.iter_mut().zip(table).for_each(|(a, m)| *a *= m);
    grid.ifft(v);
}

pub(crate) fn multiply_in_fourier_real(grid: &Grid, v: &mut [C64], table: &[f64]) {
    grid.fft(v);
    v.iter_mut().zip(table).for_each(|(a, m)| *a *= m);
    grid.ifft(v);
}

/// Pointwise multiplication by `<x>^s`.
pub fn weight_apply(f: &ComplexField, s: f64) -> ComplexField {
    if s == 0.0 {
        return f.clone();
    }
    let w = f.grid().bracket_power(s);
    f.with_values(f.values().iter().zip(&w).map(|(v, w)| v * w).collect())
}

/// Dilation parameter: `(e^{iθA} u)(x) = e^{dθ/2} u(e^θ x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DilationParams {
    pub theta: f64,
    pub dim: usize,
}

impl DilationParams {
    /// The rescaling `Θ_z` used for low frequencies, `θ = ln|z| / 2`.
    pub fn for_spectral_parameter(z: C64, dim: usize) -> Self {
        DilationParams {
            theta: 0.5 * z.norm().ln(),
            dim,
        }
    }
}

/// Result of a dilation, with the share of sample points that left the box.
#[derive(Clone, Debug)]
pub struct Dilated {
    pub field: ComplexField,
    pub outside_fraction: f64,
}

/// `x ↦ e^{dθ/2} f(e^θ x)`. Samples whose image leaves the box are set to
/// zero. Off-grid images use trigonometric interpolation along each axis.
pub fn dilate(f: &ComplexField, p: DilationParams) -> Result<Dilated> {
    let grid = f.grid();
    if p.dim != grid.dim() {
        return Err(Error::InvalidParameter(format!(
            "dilation dimension {} does not match grid dimension {}",
            p.dim,
            grid.dim()
        )));
    }
    if !p.theta.is_finite() {
        return Err(Error::InvalidParameter("dilation parameter must be finite".into()));
    }
    let n = grid.n_per_axis();
    let scale = p.theta.exp();
    let (rows, inside) = interpolation_rows(grid, scale);
    let outside_fraction = 1.0 - (inside as f64 / n as f64).powi(grid.dim() as i32);
    if outside_fraction > 0.01 {
        log::warn!(
            "dilation by e^theta = {scale:.4}: {:.1}% of samples fall outside the box",
            100.0 * outside_fraction
        );
    }

    let mut values = f.values().to_vec();
    let mut line = vec![C64::default(); n];
    for axis in 0..grid.dim() {
        let stride = n.pow((grid.dim() - 1 - axis) as u32);
        for block in values.chunks_mut(n * stride) {
            for s in 0..stride {
                for (j, l) in line.iter_mut().enumerate() {
                    *l = block[j * stride + s];
                }
                for (i, row) in rows.iter().enumerate() {
                    block[i * stride + s] = match row {
                        Row::Zero => C64::default(),
                        Row::Select(j) => line[*j],
                        Row::Dense(w) => w.iter().zip(&line).map(|(w, v)| v * w).sum(),
                    };
                }
            }
        }
    }
    let amp = (0.5 * grid.dim() as f64 * p.theta).exp();
    values.iter_mut().for_each(|v| *v *= amp);
    Ok(Dilated {
        field: f.with_values(values),
        outside_fraction,
    })
}

enum Row {
    Zero,
    Select(usize),
    Dense(Vec<f64>),
}

fn interpolation_rows(grid: &Grid, scale: f64) -> (Vec<Row>, usize) {
    let n = grid.n_per_axis();
    let l = grid.half_length();
    let h = grid.spacing();
    let mut inside = 0;
    let rows = grid
        .coordinates()
        .iter()
        .map(|&x| {
            let y = scale * x;
            if y < -l - 1e-12 * h || y >= l - 1e-12 * h {
                return Row::Zero;
            }
            inside += 1;
            let pos = (y + l) / h;
            let j = pos.round();
            if (pos - j).abs() < 1e-10 {
                return Row::Select((j as usize).min(n - 1));
            }
            // Band-limited interpolant; the Nyquist mode enters as a cosine.
            let w = (0..n)
                .map(|jj| {
                    let dx = y - grid.coordinates()[jj];
                    let mut acc = 1.0;
                    for k in 1..n / 2 {
                        acc += 2.0 * (std::f64::consts::PI * k as f64 / l * dx).cos();
                    }
                    acc += (std::f64::consts::PI * (n / 2) as f64 / l * dx).cos();
                    acc / n as f64
                })
                .collect();
            Row::Dense(w)
        })
        .collect();
    (rows, inside)
}

/// `e^{θ(d/2 - d/p)}`, the operator norm of the dilation on `L^p`.
pub fn dilation_lp_factor(theta: f64, dim: usize, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("p must be >= 1, got {p}")));
    }
    let d = dim as f64;
    let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
    Ok((theta * (0.5 * d - d * inv_p)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: &Arc<Grid>, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..grid.len())
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        ComplexField::from_values(grid, v).unwrap()
    }

    fn rel(a: &ComplexField, b: &ComplexField) -> f64 {
        a.sub(b).l2_norm() / b.l2_norm()
    }

    #[test]
    fn grid_geometry() {
        let g = Grid::new(1, 8, 4.0).unwrap();
        assert_eq!(g.spacing(), 1.0);
        let mut f: Vec<f64> = g.frequencies().to_vec();
        f.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<f64> = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|k| k * PI / 4.0)
            .collect();
        for (a, b) in f.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(Grid::new(3, 4, 2.0).unwrap().len(), 64);
        assert_eq!(Grid::new(2, 16, 10.0).unwrap().spacing(), 1.25);
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(Grid::new(1, 7, 1.0).is_err());
        assert!(Grid::new(1, 2, 1.0).is_err());
        assert!(Grid::new(1, 8, 0.0).is_err());
        assert!(Grid::new(1, 8, -1.0).is_err());
        assert!(Grid::new(0, 8, 1.0).is_err());
    }

    #[test]
    fn plancherel() {
        let grid = Arc::new(Grid::new(2, 16, 3.0).unwrap());
        let f = random_field(&grid, 1);
        let mut v = f.values().to_vec();
        grid.fft(&mut v);
        let lhs = norm_sqr(&v) / grid.len() as f64;
        let rhs = norm_sqr(f.values());
        assert!((lhs - rhs).abs() / rhs < 1e-12);
    }

    #[test]
    fn fft_round_trip_3d() {
        let grid = Arc::new(Grid::new(3, 8, 3.0).unwrap());
        let f = random_field(&grid, 2);
        let mut v = f.values().to_vec();
        grid.fft(&mut v);
        grid.ifft(&mut v);
        assert!(rel(&f.with_values(v), &f) < 1e-14);
    }

    #[test]
    fn japanese_bracket_on_constants_and_plane_waves() {
        let grid = Arc::new(Grid::new(2, 16, 4.0).unwrap());
        let m = FourierSymbol::japanese_power(1.3);
        let one = ComplexField::from_fn(&grid, |_| C64::new(1.0, 0.0));
        assert!(rel(&apply_multiplier(&one, &m), &one) < 1e-13);

        let xi0 = [3.0 * PI / 4.0, -PI / 2.0];
        let pw = ComplexField::plane_wave(&grid, &xi0);
        let mut expect = pw.clone();
        expect.scale(C64::from((1.0 + xi0[0] * xi0[0] + xi0[1] * xi0[1]).powf(0.65)));
        assert!(rel(&apply_multiplier(&pw, &m), &expect) < 1e-12);
    }

    #[test]
    fn bracket_squared_matches_composed_derivatives() {
        // <D>^2 f = f - Δf, with Δ assembled from first-order spectral derivatives.
        let grid = Arc::new(Grid::new(2, 16, 3.0).unwrap());
        let f = random_field(&grid, 3);
        let lhs = apply_multiplier(&f, &FourierSymbol::japanese_power(2.0));
        let mut rhs = f.clone();
        for axis in 0..2 {
            let d = FourierSymbol::derivative(axis);
            let dd = apply_multiplier(&apply_multiplier(&f, &d), &d);
            rhs.axpy(C64::new(1.0, 0.0), &dd);
        }
        assert!(rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn weights() {
        let grid = Arc::new(Grid::new(3, 4, 2.0).unwrap());
        let f = random_field(&grid, 4);
        assert!(rel(&weight_apply(&f, 0.0), &f) < 1e-15);
        let g = weight_apply(&f, -2.0);
        let mut x = [0.0; 3];
        for i in 0..grid.len() {
            grid.point(i, &mut x);
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 == 0.0 {
                assert_eq!(g.values()[i], f.values()[i]);
            }
            if (r2 - 3.0).abs() < 1e-12 {
                assert!((g.values()[i] * 4.0 - f.values()[i]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn dilation_identity_and_factors() {
        let grid = Arc::new(Grid::new(1, 16, 4.0).unwrap());
        let f = random_field(&grid, 5);
        let d = dilate(&f, DilationParams { theta: 0.0, dim: 1 }).unwrap();
        assert!(rel(&d.field, &f) < 1e-15);
        assert_eq!(d.outside_fraction, 0.0);

        assert!((dilation_lp_factor(0.7, 3, 2.0).unwrap() - 1.0).abs() < 1e-15);
        let f = dilation_lp_factor(4f64.ln() / 2.0, 3, f64::INFINITY).unwrap();
        assert!((f - 4f64.powf(0.75)).abs() < 1e-12);
        let f = dilation_lp_factor(9f64.ln() / 2.0, 2, 1.0).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
        assert!(dilation_lp_factor(0.0, 1, 0.5).is_err());
    }

    #[test]
    fn dilation_interpolates_band_limited_data() {
        // A low plane wave is reproduced exactly by trigonometric interpolation.
        let grid = Arc::new(Grid::new(1, 32, 4.0).unwrap());
        let xi = PI / 4.0;
        let f = ComplexField::plane_wave(&grid, &[xi]);
        let theta = 0.8f64.ln();
        let d = dilate(&f, DilationParams { theta, dim: 1 }).unwrap();
        let s = theta.exp();
        let expect = ComplexField::plane_wave(&grid, &[s * xi]);
        let mut expect = expect;
        expect.scale(C64::from(s.sqrt()));
        assert!(rel(&d.field, &expect) < 1e-11);
    }

    #[test]
    fn dilation_reports_escaping_samples() {
        let grid = Arc::new(Grid::new(1, 16, 4.0).unwrap());
        let f = random_field(&grid, 6);
        let d = dilate(&f, DilationParams { theta: 2f64.ln(), dim: 1 }).unwrap();
        assert!((d.outside_fraction - 0.5).abs() < 1e-12);
    }
}
