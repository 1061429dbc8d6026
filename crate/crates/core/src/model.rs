//! Assembly of the damped operator `H = P - i B_α` on a periodic grid.
//!
//! `P = -(1/w) Σ ∂_j (w G_jk ∂_k) + Σ b_j D_j` is discretized as
//! `(1/w) Σ D_j (w G_jk D_k ·)` with spectral `D_j = -i∂_j`, which is
//! Hermitian in the `w`-weighted inner product for real symmetric `G`.
//! `B_α = a <D>^α a` is applied with a Fourier multiplier.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::spectral::{self, ComplexField, Grid};

const I: C64 = C64::new(0.0, 1.0);

/// Built-in metric families. All but `UserTable` are conformal, `G = c(x) I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `c ≡ 1`.
    Identity,
    /// `c(x) = 1 + amplitude · exp(-|x|²/width²)`.
    ConformalBump,
    /// `c(x) = 1 - amplitude · exp(-(|x|/width)^4)`. For amplitude above
    /// `e^{1/2}/2 ≈ 0.824` the effective potential has a well and a stable
    /// closed circular geodesic (see [`MetricSpec::trapping_ring_radius`]).
    TrappingWell,
    /// Per-point symmetric `d×d` matrices supplied in `table`.
    UserTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// Long-range decay rate audited against `<x>^{-ρ}`.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    /// Row-major per-point matrices for `UserTable` (length `points · d²`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

fn default_rho() -> f64 {
    1.0
}
fn default_width() -> f64 {
    1.0
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl MetricSpec {
    pub fn identity() -> Self {
        MetricSpec {
            kind: MetricKind::Identity,
            rho: 1.0,
            amplitude: 0.0,
            width: 1.0,
            table: None,
        }
    }

    pub fn conformal_bump(amplitude: f64, width: f64) -> Self {
        MetricSpec {
            kind: MetricKind::ConformalBump,
            amplitude,
            width,
            ..Self::identity()
        }
    }

    pub fn trapping_well(depth: f64, radius: f64) -> Self {
        MetricSpec {
            kind: MetricKind::TrappingWell,
            amplitude: depth,
            width: radius,
            ..Self::identity()
        }
    }

    pub fn is_flat(&self) -> bool {
        match self.kind {
            MetricKind::Identity => true,
            MetricKind::ConformalBump | MetricKind::TrappingWell => self.amplitude == 0.0,
            MetricKind::UserTable => false,
        }
    }

    /// Conformal factor `c(x)` for the analytic kinds.
    pub fn conformal_factor(&self, x: &[f64]) -> Option<f64> {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match self.kind {
            MetricKind::Identity => Some(1.0),
            MetricKind::ConformalBump => {
                Some(1.0 + self.amplitude * (-r2 / (self.width * self.width)).exp())
            }
            MetricKind::TrappingWell => {
                let s = r2 * r2 / self.width.powi(4);
                Some(1.0 - self.amplitude * (-s).exp())
            }
            MetricKind::UserTable => None,
        }
    }

    /// Gradient of the conformal factor, written into `out`.
    pub fn conformal_gradient(&self, x: &[f64], out: &mut [f64]) -> Option<()> {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let coef = match self.kind {
            MetricKind::Identity => 0.0,
            MetricKind::ConformalBump => {
                let w2 = self.width * self.width;
                -2.0 * self.amplitude * (-r2 / w2).exp() / w2
            }
            MetricKind::TrappingWell => {
                let r4 = self.width.powi(4);
                let s = r2 * r2 / r4;
                // d/dx_i of -A e^{-s} with s = |x|^4/R^4
                self.amplitude * (-s).exp() * 4.0 * r2 / r4
            }
            MetricKind::UserTable => return None,
        };
        out.iter_mut().zip(x).for_each(|(o, xi)| *o = coef * xi);
        Some(())
    }

    /// Radius of the stable closed circular geodesic of a trapping well,
    /// the inner root of `r c'(r) = 2 c(r)`.
    pub fn trapping_ring_radius(&self) -> Option<f64> {
        if self.kind != MetricKind::TrappingWell {
            return None;
        }
        // With s = (r/R)^4: r c'/c = 2 ⇔ A e^{-s}(2s+1) = 1. The left side
        // increases on [0, 1/2], so the inner root is bracketed there.
        let g = |s: f64| self.amplitude * (-s).exp() * (2.0 * s + 1.0) - 1.0;
        if g(0.5) <= 0.0 || g(0.0) >= 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (0.0, 0.5);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(self.width * (0.5 * (lo + hi)).powf(0.25))
    }

    /// Materializes `G` at every grid point as row-major `d×d` matrices.
    pub fn materialize(&self, grid: &Grid) -> Result<Vec<f64>> {
        let d = grid.dim();
        if self.kind == MetricKind::UserTable {
            let t = self
                .table
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("user_table metric without table".into()))?;
            if t.len() != grid.len() * d * d {
                return Err(Error::InvalidParameter(format!(
                    "metric table has {} entries, expected {}",
                    t.len(),
                    grid.len() * d * d
                )));
            }
            return Ok(t.clone());
        }
        let per_point: Vec<f64> = grid.tabulate_points(|x| self.conformal_factor(x).unwrap());
        let mut out = vec![0.0; grid.len() * d * d];
        for (p, c) in per_point.iter().enumerate() {
            for j in 0..d {
                out[p * d * d + j * d + j] = *c;
            }
        }
        Ok(out)
    }
}

/// Spatial profile of the damping coefficient `a(x) ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum DampingProfile {
    None,
    /// `amplitude · exp(-|x - center|²/width²)`; empty center means the origin.
    Gaussian {
        amplitude: f64,
        #[serde(default)]
        center: Vec<f64>,
        width: f64,
    },
    /// `amplitude · exp(-(|x| - radius)²/width²)`, concentrated on a sphere.
    Ring {
        amplitude: f64,
        radius: f64,
        width: f64,
    },
    /// Per-point values on the operator grid.
    Table { values: Vec<f64> },
}

impl DampingProfile {
    /// `a(x)` for the analytic shapes (`None` for tables).
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        match self {
            DampingProfile::None => Some(0.0),
            DampingProfile::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let r2: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let c = center.get(i).copied().unwrap_or(0.0);
                        (v - c) * (v - c)
                    })
                    .sum();
                Some(amplitude * (-r2 / (width * width)).exp())
            }
            DampingProfile::Ring {
                amplitude,
                radius,
                width,
            } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                Some(amplitude * (-(r - radius) * (r - radius) / (width * width)).exp())
            }
            DampingProfile::Table { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingSpec {
    pub profile: DampingProfile,
    /// Order of the fractional damping `<D>^α`.
    #[serde(default)]
    pub alpha: f64,
    /// Short-range decay rate audited against `<x>^{-1-ρ}`.
    #[serde(default = "default_rho")]
    pub rho: f64,
}

impl Default for DampingSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl DampingSpec {
    pub fn none() -> Self {
        DampingSpec {
            profile: DampingProfile::None,
            alpha: 0.0,
            rho: 1.0,
        }
    }

    pub fn gaussian(amplitude: f64, width: f64, alpha: f64) -> Self {
        DampingSpec {
            profile: DampingProfile::Gaussian {
                amplitude,
                center: vec![],
                width,
            },
            alpha,
            rho: 1.0,
        }
    }

    pub fn materialize(&self, grid: &Grid) -> Result<Vec<f64>> {
        match &self.profile {
            DampingProfile::Table { values } => {
                if values.len() != grid.len() {
                    return Err(Error::InvalidParameter(format!(
                        "damping table has {} entries, grid has {} points",
                        values.len(),
                        grid.len()
                    )));
                }
                Ok(values.clone())
            }
            p => Ok(grid.tabulate_points(|x| p.eval(x).unwrap())),
        }
    }
}

/// Choice of reference measure `w(x) dx`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    /// Divergence form: `w = 1`, no first-order term.
    #[default]
    Unit,
    /// Laplace–Beltrami: `w = |g|^{1/2}` with `g = G^{-1}`.
    Beltrami,
}

/// Sampled decay constants for the long-range / short-range hypotheses.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct HypothesisAudit {
    /// `max |G - I| <x>^ρ` over grid points.
    pub metric_c0: f64,
    /// `max |∇G| <x>^{ρ+1}` (first derivatives only).
    pub metric_c1: f64,
    /// `max a <x>^{1+ρ}`.
    pub damping_c0: f64,
    /// `max |∇a| <x>^{2+ρ}`.
    pub damping_c1: f64,
    /// `max |w - 1|` near the box boundary (Beltrami only).
    pub beltrami_far_defect: Option<f64>,
    pub warnings: Vec<String>,
    pub out_of_hypothesis: Vec<String>,
}

#[derive(Clone, Debug)]
enum Stiffness {
    Identity,
    Scalar(Vec<f64>),
    Matrix(Vec<f64>),
}

/// The damped operator and everything needed to apply it.
#[derive(Clone, Debug)]
pub struct DampedOperator {
    grid: Arc<Grid>,
    metric: MetricSpec,
    damping: DampingSpec,
    weight_choice: WeightChoice,
    weight: Option<Vec<f64>>,
    stiffness: Stiffness,
    /// `wG - I` used by the split-step remainder when `w = 1`.
    correction: Stiffness,
    b_coeffs: Option<Vec<Vec<f64>>>,
    a: Vec<f64>,
    damped: bool,
    damping_sign: f64,
    xi: Vec<Vec<f64>>,
    xi2: Vec<f64>,
    bracket_alpha: Vec<f64>,
    bracket_half_alpha: Vec<f64>,
    alpha_tilde: f64,
    kappa: f64,
    audit: HypothesisAudit,
}

/// `κ = d/2` for even `d`, `(d+1)/2` for odd `d`.
pub fn kappa(dim: usize) -> f64 {
    if dim.is_multiple_of(2) {
        dim as f64 / 2.0
    } else {
        (dim as f64 + 1.0) / 2.0
    }
}

/// `α̃ = min(1, α)`.
pub fn alpha_tilde(alpha: f64) -> f64 {
    alpha.min(1.0)
}

fn cholesky_ok(m: &[f64], d: usize) -> bool {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i * d + j];
            if (m[i * d + j] - m[j * d + i]).abs() > 1e-12 * (1.0 + m[i * d + j].abs()) {
                return false;
            }
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    true
}

fn determinant(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => nalgebra::DMatrix::from_row_slice(d, d, m).determinant(),
    }
}

/// Builds the operator. `b_coeffs`, when given, must make `P` symmetric;
/// otherwise assembly fails the symmetry audit.
pub fn assemble(
    grid: &Arc<Grid>,
    metric: &MetricSpec,
    damping: &DampingSpec,
    weight_choice: WeightChoice,
    b_coeffs: Option<Vec<Vec<f64>>>,
) -> Result<DampedOperator> {
    let d = grid.dim();
    let len = grid.len();
    if !damping.alpha.is_finite() || damping.alpha < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "damping order alpha must be finite and >= 0, got {}",
            damping.alpha
        )));
    }
    let g = metric.materialize(grid)?;
    let mut x = vec![0.0; d];
    for p in 0..len {
        if !cholesky_ok(&g[p * d * d..(p + 1) * d * d], d) {
            grid.point(p, &mut x);
            return Err(Error::MetricNotSpd { coord: x });
        }
    }
    let a = damping.materialize(grid)?;
    for (p, v) in a.iter().enumerate() {
        if *v < 0.0 || !v.is_finite() {
            grid.point(p, &mut x);
            return Err(Error::NegativeDamping {
                coord: x,
                value: *v,
            });
        }
    }

    let weight: Option<Vec<f64>> = match weight_choice {
        WeightChoice::Unit => None,
        WeightChoice::Beltrami => Some(
            (0..len)
                .map(|p| determinant(&g[p * d * d..(p + 1) * d * d], d).powf(-0.5))
                .collect(),
        ),
    };

    let conformal = metric.kind != MetricKind::UserTable;
    let stiffness = if metric.is_flat() && weight.is_none() {
        Stiffness::Identity
    } else if conformal {
        Stiffness::Scalar(
            (0..len)
                .map(|p| g[p * d * d] * weight.as_ref().map_or(1.0, |w| w[p]))
                .collect(),
        )
    } else {
        let mut s = g.clone();
        if let Some(w) = &weight {
            for p in 0..len {
                s[p * d * d..(p + 1) * d * d].iter_mut().for_each(|v| *v *= w[p]);
            }
        }
        Stiffness::Matrix(s)
    };
    let correction = match &stiffness {
        Stiffness::Identity => Stiffness::Identity,
        Stiffness::Scalar(s) => Stiffness::Scalar(s.iter().map(|v| v - 1.0).collect()),
        Stiffness::Matrix(m) => {
            let mut c = m.clone();
            for p in 0..len {
                for j in 0..d {
                    c[p * d * d + j * d + j] -= 1.0;
                }
            }
            Stiffness::Matrix(c)
        }
    };

    if let Some(b) = &b_coeffs {
        if b.len() != d || b.iter().any(|bj| bj.len() != len) {
            return Err(Error::InvalidParameter(
                "b_coeffs must hold one field per axis".into(),
            ));
        }
    }

    let xi: Vec<Vec<f64>> = (0..d)
        .map(|axis| grid.tabulate_frequencies(|f| f[axis]))
        .collect();
    let xi2 = grid.xi_squared();
    let alpha = damping.alpha;
    let bracket_alpha = xi2.iter().map(|v| (1.0 + v).powf(0.5 * alpha)).collect();
    let bracket_half_alpha = xi2.iter().map(|v| (1.0 + v).powf(0.25 * alpha)).collect();
    let damped = a.iter().any(|v| *v != 0.0);

    let audit = audit_hypotheses(grid, metric, damping, &g, &a, weight.as_deref());
    let op = DampedOperator {
        grid: grid.clone(),
        metric: metric.clone(),
        damping: damping.clone(),
        weight_choice,
        weight,
        stiffness,
        correction,
        b_coeffs,
        a,
        damped,
        damping_sign: 1.0,
        xi,
        xi2,
        bracket_alpha,
        bracket_half_alpha,
        alpha_tilde: alpha_tilde(alpha),
        kappa: kappa(d),
        audit,
    };
    if op.b_coeffs.is_some() {
        let defect = op.symmetry_defect_of_p(10, 0x5eed);
        if defect > 1e-10 {
            return Err(Error::AsymmetricFirstOrder { defect });
        }
    }
    Ok(op)
}

fn audit_hypotheses(
    grid: &Grid,
    metric: &MetricSpec,
    damping: &DampingSpec,
    g: &[f64],
    a: &[f64],
    weight: Option<&[f64]>,
) -> HypothesisAudit {
    let d = grid.dim();
    let h = grid.spacing();
    let n = grid.n_per_axis();
    let mut audit = HypothesisAudit::default();
    let mut x = vec![0.0; d];
    let mut idx = vec![0usize; d];
    // Inner and outer shells, to flag coefficients whose weighted size
    // grows toward the boundary.
    let mut inner = [0.0f64; 2];
    let mut outer = [0.0f64; 2];
    let half = 0.5 * grid.half_length();
    let neighbor = |idx: &[usize], axis: usize, step: isize| -> usize {
        let mut flat = 0;
        for (k, &i) in idx.iter().enumerate() {
            let ii = if k == axis {
                ((i as isize + step).rem_euclid(n as isize)) as usize
            } else {
                i
            };
            flat = flat * n + ii;
        }
        flat
    };
    for p in 0..grid.len() {
        grid.point(p, &mut x);
        grid.multi_index(p, &mut idx);
        let bracket = (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let gm = &g[p * d * d..(p + 1) * d * d];
        let dev = (0..d * d)
            .map(|k| {
                let id = if k / d == k % d { 1.0 } else { 0.0 };
                (gm[k] - id).abs()
            })
            .fold(0.0, f64::max);
        let mut grad_g: f64 = 0.0;
        let mut grad_a: f64 = 0.0;
        let interior = idx.iter().all(|&i| i > 0 && i + 1 < n);
        if interior {
            for axis in 0..d {
                let (pp, pm) = (neighbor(&idx, axis, 1), neighbor(&idx, axis, -1));
                for k in 0..d * d {
                    grad_g = grad_g.max(((g[pp * d * d + k] - g[pm * d * d + k]) / (2.0 * h)).abs());
                }
                grad_a = grad_a.max(((a[pp] - a[pm]) / (2.0 * h)).abs());
            }
        }
        let c0 = dev * bracket.powf(metric.rho);
        let c1 = grad_g * bracket.powf(metric.rho + 1.0);
        let a0 = a[p] * bracket.powf(1.0 + damping.rho);
        let a1 = grad_a * bracket.powf(2.0 + damping.rho);
        audit.metric_c0 = audit.metric_c0.max(c0);
        audit.metric_c1 = audit.metric_c1.max(c1);
        audit.damping_c0 = audit.damping_c0.max(a0);
        audit.damping_c1 = audit.damping_c1.max(a1);
        let shell = if x.iter().any(|c| c.abs() > half) {
            &mut outer
        } else {
            &mut inner
        };
        shell[0] = shell[0].max(c0);
        shell[1] = shell[1].max(a0);
    }
    if outer[0] > inner[0] * (1.0 + 1e-9) && outer[0] > 1e-12 {
        audit.warnings.push(format!(
            "metric perturbation does not decay like <x>^-{}: outer-shell constant {:.3e} exceeds inner {:.3e}",
            metric.rho, outer[0], inner[0]
        ));
    }
    if outer[1] > inner[1] * (1.0 + 1e-9) && outer[1] > 1e-12 {
        audit.warnings.push(format!(
            "damping is not short range at rate {}: outer-shell constant {:.3e} exceeds inner {:.3e}",
            damping.rho, outer[1], inner[1]
        ));
    }
    if let Some(w) = weight {
        let edge = 0.8 * grid.half_length();
        let mut worst: f64 = 0.0;
        for (p, wp) in w.iter().enumerate() {
            grid.point(p, &mut x);
            if x.iter().any(|c| c.abs() > edge) {
                worst = worst.max((wp - 1.0).abs());
            }
        }
        audit.beltrami_far_defect = Some(worst);
        if worst > 1e-6 {
            audit.warnings.push(format!(
                "Beltrami weight differs from 1 near the boundary by {worst:.3e}"
            ));
        }
    }
    if !(0.0..2.0).contains(&damping.alpha) {
        audit
            .out_of_hypothesis
            .push(format!("alpha = {} outside [0, 2)", damping.alpha));
    }
    if d < 3 {
        audit
            .out_of_hypothesis
            .push(format!("dimension {d} < 3"));
    }
    audit
}

impl DampedOperator {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn metric(&self) -> &MetricSpec {
        &self.metric
    }
    pub fn damping(&self) -> &DampingSpec {
        &self.damping
    }
    pub fn weight_choice(&self) -> WeightChoice {
        self.weight_choice
    }
    pub fn alpha(&self) -> f64 {
        self.damping.alpha
    }
    pub fn alpha_tilde(&self) -> f64 {
        self.alpha_tilde
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn audit(&self) -> &HypothesisAudit {
        &self.audit
    }
    /// Sampled damping coefficient `a` at the grid points.
    pub fn damping_coefficient(&self) -> &[f64] {
        &self.a
    }
    /// Whether `a` vanishes identically.
    pub fn is_undamped(&self) -> bool {
        !self.damped
    }
    /// Whether `H = -Δ` exactly (flat metric, unit weight, no damping, no W).
    pub fn is_free(&self) -> bool {
        matches!(self.stiffness, Stiffness::Identity) && !self.damped && self.b_coeffs.is_none()
    }
    /// `|ξ|²` in FFT order.
    pub fn xi_squared(&self) -> &[f64] {
        &self.xi2
    }
    /// Reference measure `w` at the grid points (`None` means `w ≡ 1`).
    pub fn weight(&self) -> Option<&[f64]> {
        self.weight.as_deref()
    }

    /// Negative control: replaces `a` by `ia`, i.e. `B_α ↦ -B_α`. The
    /// result is anti-dissipative and must fail the dissipativity report.
    pub fn with_flipped_damping(mut self) -> Self {
        self.damping_sign = -self.damping_sign;
        self
    }

    fn second_order(&self, f: &[C64], stiffness: &Stiffness) -> Vec<C64> {
        let grid = &self.grid;
        let d = grid.dim();
        let mut spec = f.to_vec();
        grid.fft(&mut spec);
        if matches!(stiffness, Stiffness::Identity) && self.b_coeffs.is_none() {
            spec.iter_mut().zip(&self.xi2).for_each(|(v, m)| *v *= m);
            grid.ifft(&mut spec);
            return spec;
        }
        // g_k = D_k f
        let grads: Vec<Vec<C64>> = (0..d)
            .map(|k| {
                let mut g: Vec<C64> = spec.iter().zip(&self.xi[k]).map(|(v, m)| v * m).collect();
                grid.ifft(&mut g);
                g
            })
            .collect();
        let mut acc = vec![C64::default(); f.len()];
        for j in 0..d {
            let mut v: Vec<C64> = match stiffness {
                Stiffness::Identity => grads[j].clone(),
                Stiffness::Scalar(s) => grads[j].iter().zip(s).map(|(g, s)| g * s).collect(),
                Stiffness::Matrix(m) => (0..f.len())
                    .map(|p| {
                        (0..d)
                            .map(|k| grads[k][p] * m[p * d * d + j * d + k])
                            .sum()
                    })
                    .collect(),
            };
            grid.fft(&mut v);
            acc.iter_mut()
                .zip(&v)
                .zip(&self.xi[j])
                .for_each(|((a, v), m)| *a += v * m);
        }
        grid.ifft(&mut acc);
        if let Some(b) = &self.b_coeffs {
            for j in 0..d {
                acc.iter_mut()
                    .zip(&grads[j])
                    .zip(&b[j])
                    .for_each(|((a, g), bj)| *a += g * bj);
            }
        }
        acc
    }

    pub(crate) fn p_raw(&self, f: &[C64]) -> Vec<C64> {
        let mut out = self.second_order(f, &self.stiffness);
        if let Some(w) = &self.weight {
            out.iter_mut().zip(w).for_each(|(v, w)| *v /= w);
        }
        out
    }

    pub(crate) fn b_raw(&self, f: &[C64]) -> Vec<C64> {
        if !self.damped {
            return vec![C64::default(); f.len()];
        }
        let mut v: Vec<C64> = f.iter().zip(&self.a).map(|(f, a)| f * a).collect();
        if self.damping.alpha != 0.0 {
            spectral::multiply_in_fourier_real(&self.grid, &mut v, &self.bracket_alpha);
        }
        let s = self.damping_sign;
        v.iter_mut().zip(&self.a).for_each(|(v, a)| *v *= a * s);
        v
    }

    pub(crate) fn h_raw(&self, f: &[C64]) -> Vec<C64> {
        let mut p = self.p_raw(f);
        if self.damped {
            let b = self.b_raw(f);
            p.iter_mut().zip(&b).for_each(|(p, b)| *p -= I * b);
        }
        p
    }

    /// Adjoint of `H` in the unweighted `L²` product: `w P w^{-1} + i B_α`.
    pub(crate) fn h_adjoint_raw(&self, f: &[C64]) -> Vec<C64> {
        let mut p = match &self.weight {
            None => self.p_raw(f),
            Some(w) => {
                let g: Vec<C64> = f.iter().zip(w).map(|(f, w)| f / w).collect();
                let mut p = self.p_raw(&g);
                p.iter_mut().zip(w).for_each(|(p, w)| *p *= w);
                p
            }
        };
        if self.damped {
            let b = self.b_raw(f);
            p.iter_mut().zip(&b).for_each(|(p, b)| *p += I * b);
        }
        p
    }

    /// `H - (-Δ)`: the part of the generator the split-step scheme does not
    /// integrate exactly.
    pub(crate) fn remainder_raw(&self, f: &[C64]) -> Vec<C64> {
        let mut out = if self.weight.is_none() {
            match self.correction {
                Stiffness::Identity if self.b_coeffs.is_none() => vec![C64::default(); f.len()],
                _ => self.second_order(f, &self.correction),
            }
        } else {
            let mut p = self.p_raw(f);
            let mut lap = f.to_vec();
            spectral::multiply_in_fourier_real(&self.grid, &mut lap, &self.xi2);
            p.iter_mut().zip(&lap).for_each(|(p, l)| *p -= l);
            p
        };
        if self.damped {
            let b = self.b_raw(f);
            out.iter_mut().zip(&b).for_each(|(o, b)| *o -= I * b);
        }
        out
    }

    /// `T = <D>^{α/2} (a ·)`, so that `T†T = B_α`.
    pub(crate) fn t_raw(&self, f: &[C64]) -> Vec<C64> {
        let mut v: Vec<C64> = f.iter().zip(&self.a).map(|(f, a)| f * a).collect();
        spectral::multiply_in_fourier_real(&self.grid, &mut v, &self.bracket_half_alpha);
        v
    }

    /// `T† = a <D>^{α/2}`.
    pub(crate) fn t_adjoint_raw(&self, f: &[C64]) -> Vec<C64> {
        let mut v = f.to_vec();
        spectral::multiply_in_fourier_real(&self.grid, &mut v, &self.bracket_half_alpha);
        v.iter_mut().zip(&self.a).for_each(|(v, a)| *v *= a);
        v
    }

    pub fn apply_p(&self, f: &ComplexField) -> ComplexField {
        f.with_values(self.p_raw(f.values()))
    }

    pub fn apply_b_alpha(&self, f: &ComplexField) -> ComplexField {
        f.with_values(self.b_raw(f.values()))
    }

    pub fn apply_h(&self, f: &ComplexField) -> ComplexField {
        f.with_values(self.h_raw(f.values()))
    }

    pub fn apply_h_adjoint(&self, f: &ComplexField) -> ComplexField {
        f.with_values(self.h_adjoint_raw(f.values()))
    }

    /// `⟨f, g⟩_w = Σ w f conj(g) h^d`.
    pub fn inner_w(&self, f: &ComplexField, g: &ComplexField) -> C64 {
        self.inner_w_raw(f.values(), g.values())
    }

    pub(crate) fn inner_w_raw(&self, f: &[C64], g: &[C64]) -> C64 {
        let cell = self.grid.cell_volume();
        match &self.weight {
            None => spectral::inner(f, g) * cell,
            Some(w) => {
                f.iter()
                    .zip(g)
                    .zip(w)
                    .map(|((a, b), w)| a * b.conj() * w)
                    .sum::<C64>()
                    * cell
            }
        }
    }

    /// Largest `|⟨Pf,g⟩_w - conj⟨Pg,f⟩_w| / (‖f‖_w ‖g‖_w)` over random pairs.
    pub fn symmetry_defect_of_p(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let f = random_values(self.grid.len(), &mut rng);
            let g = random_values(self.grid.len(), &mut rng);
            let pf = self.p_raw(&f);
            let pg = self.p_raw(&g);
            let lhs = self.inner_w_raw(&pf, &g);
            let rhs = self.inner_w_raw(&pg, &f).conj();
            let nf = self.inner_w_raw(&f, &f).re.sqrt();
            let ng = self.inner_w_raw(&g, &g).re.sqrt();
            // Scale by ‖P‖ so the defect is relative to the operator size.
            let scale = nf * ng * (1.0 + self.xi2.iter().cloned().fold(0.0, f64::max));
            worst = worst.max((lhs - rhs).norm() / scale);
        }
        worst
    }
}

pub(crate) fn random_values(len: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re, im)
        })
        .collect()
}

/// A standard complex Gaussian field drawn from `seed`.
pub fn random_field(grid: &Arc<Grid>, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexField::from_values(grid, random_values(grid.len(), &mut rng)).unwrap()
}

/// Outcome of the sampled dissipativity / accretivity test.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DissipativityReport {
    pub n_samples: usize,
    /// `max Im⟨Hf,f⟩_w` over `‖f‖_w = 1`.
    pub max_imag: f64,
    /// `min Re⟨Hf,f⟩_w` over `‖f‖_w = 1`.
    pub min_real: f64,
    pub tolerance: f64,
    pub dissipative: bool,
    pub accretive: bool,
}

impl DissipativityReport {
    pub fn passed(&self) -> bool {
        self.dissipative && self.accretive
    }
}

/// Samples `⟨Hf, f⟩_w` on random normalized fields. Half the samples are
/// white noise, half are smoothed by `<D>^{-2}` to probe low frequencies.
pub fn dissipativity_report(op: &DampedOperator, n_samples: usize, seed: u64) -> DissipativityReport {
    let tolerance = 1e-10;
    let grid = op.grid.clone();
    let smoother: Vec<f64> = op.xi2.iter().map(|v| 1.0 / (1.0 + v)).collect();
    let samples = par::map_range(grid.exec(), n_samples.max(1), |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64));
        let mut f = random_values(grid.len(), &mut rng);
        if k % 2 == 1 {
            spectral::multiply_in_fourier_real(&grid, &mut f, &smoother);
        }
        let norm = op.inner_w_raw(&f, &f).re.sqrt();
        f.iter_mut().for_each(|v| *v /= norm);
        op.inner_w_raw(&op.h_raw(&f), &f)
    });
    let max_imag = samples.iter().map(|c| c.im).fold(f64::NEG_INFINITY, f64::max);
    let min_real = samples.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
    DissipativityReport {
        n_samples: samples.len(),
        max_imag,
        min_real,
        tolerance,
        dissipative: max_imag <= tolerance,
        accretive: min_real >= -tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(d: usize, n: usize, l: f64) -> Arc<Grid> {
        Arc::new(Grid::new(d, n, l).unwrap())
    }

    fn rel(a: &ComplexField, b: &ComplexField) -> f64 {
        a.sub(b).l2_norm() / b.l2_norm().max(1e-300)
    }

    #[test]
    fn kappa_and_alpha_tilde() {
        assert_eq!(kappa(3), 2.0);
        assert_eq!(kappa(4), 2.0);
        assert_eq!(kappa(5), 3.0);
        for (a, t) in [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0), (1.7, 1.0)] {
            assert_eq!(alpha_tilde(a), t);
        }
    }

    #[test]
    fn free_operator_is_minus_laplacian() {
        let g = grid(2, 16, 4.0);
        let op = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        assert!(op.is_free());
        let xi0 = [PI / 2.0, -3.0 * PI / 4.0];
        let f = ComplexField::plane_wave(&g, &xi0);
        let mut expect = f.clone();
        expect.scale(C64::from(xi0[0] * xi0[0] + xi0[1] * xi0[1]));
        assert!(rel(&op.apply_h(&f), &expect) < 1e-12);
        assert!(rel(&op.apply_p(&f), &expect) < 1e-12);
    }

    #[test]
    fn zero_amplitude_bump_is_identity() {
        let g = grid(2, 16, 4.0);
        let f = random_field(&g, 3);
        let a = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let b = assemble(&g, &MetricSpec::conformal_bump(0.0, 1.0), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        assert_eq!(a.apply_p(&f).values(), b.apply_p(&f).values());
    }

    #[test]
    fn bump_metric_p_is_hermitian_and_nonnegative() {
        let g = grid(2, 16, 4.0);
        let op = assemble(&g, &MetricSpec::conformal_bump(0.5, 1.5), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        assert!(op.symmetry_defect_of_p(20, 1) < 1e-13);
        for seed in 0..10 {
            let f = random_field(&g, seed);
            let q = op.inner_w(&op.apply_p(&f), &f);
            assert!(q.im.abs() <= 1e-10 * q.re.abs().max(1.0));
            assert!(q.re >= -1e-10 * f.l2_norm().powi(2));
        }
    }

    #[test]
    fn beltrami_weight_keeps_p_symmetric() {
        let g = grid(2, 16, 6.0);
        let op = assemble(&g, &MetricSpec::conformal_bump(0.3, 1.0), &DampingSpec::none(), WeightChoice::Beltrami, None).unwrap();
        assert!(op.symmetry_defect_of_p(10, 2) < 1e-13);
        assert!(op.audit().beltrami_far_defect.unwrap() < 1e-6);
        // The adjoint in the plain product is w P w^{-1} + iB.
        let f = random_field(&g, 4);
        let h = random_field(&g, 5);
        let lhs = op.apply_h(&f).inner(&h);
        let rhs = f.inner(&op.apply_h_adjoint(&h));
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
    }

    #[test]
    fn user_table_matches_conformal_assembly() {
        let g = grid(2, 8, 3.0);
        let bump = MetricSpec::conformal_bump(0.4, 1.0);
        let table = bump.materialize(&g).unwrap();
        let user = MetricSpec {
            kind: MetricKind::UserTable,
            table: Some(table),
            ..MetricSpec::identity()
        };
        let f = random_field(&g, 6);
        let a = assemble(&g, &bump, &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let b = assemble(&g, &user, &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        assert!(rel(&b.apply_p(&f), &a.apply_p(&f)) < 1e-13);
    }

    #[test]
    fn assembly_rejects_non_spd_and_negative_damping() {
        let g = grid(1, 8, 3.0);
        let bad = MetricSpec::conformal_bump(-2.0, 1.0);
        match assemble(&g, &bad, &DampingSpec::none(), WeightChoice::Unit, None) {
            Err(Error::MetricNotSpd { coord }) => assert_eq!(coord.len(), 1),
            other => panic!("expected SPD failure, got {other:?}"),
        }
        let neg = DampingSpec::gaussian(-1.0, 1.0, 1.0);
        assert!(matches!(
            assemble(&g, &MetricSpec::identity(), &neg, WeightChoice::Unit, None),
            Err(Error::NegativeDamping { .. })
        ));
    }

    #[test]
    fn non_symmetric_first_order_term_is_rejected() {
        let g = grid(1, 16, 4.0);
        let b = vec![g.tabulate_points(|x| (-x[0] * x[0]).exp())];
        let r = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, Some(b));
        assert!(matches!(r, Err(Error::AsymmetricFirstOrder { .. })));
        // A constant coefficient is Hermitian and accepted.
        let b = vec![vec![0.3; g.len()]];
        assert!(assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, Some(b)).is_ok());
    }

    #[test]
    fn damping_reductions() {
        let g = grid(1, 32, 5.0);
        let f = random_field(&g, 7);
        let none = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        assert!(none.apply_b_alpha(&f).l2_norm() == 0.0);
        assert_eq!(none.apply_h(&f).values(), none.apply_p(&f).values());

        let d0 = assemble(&g, &MetricSpec::identity(), &DampingSpec::gaussian(0.8, 1.0, 0.0), WeightChoice::Unit, None).unwrap();
        let a = d0.damping_coefficient().to_vec();
        let expect = f.with_values(f.values().iter().zip(&a).map(|(v, a)| v * a * a).collect());
        assert!(rel(&d0.apply_b_alpha(&f), &expect) < 1e-15);

        let d1 = assemble(&g, &MetricSpec::identity(), &DampingSpec::gaussian(0.8, 1.0, 1.0), WeightChoice::Unit, None).unwrap();
        for seed in 10..20 {
            let f = random_field(&g, seed);
            let af = f.with_values(f.values().iter().zip(&a).map(|(v, a)| v * a).collect());
            let q = d1.apply_b_alpha(&f).inner(&f);
            assert!(q.im.abs() < 1e-12 * q.re);
            assert!(q.re >= af.l2_norm().powi(2) * (1.0 - 1e-12));
        }
    }

    #[test]
    fn t_factorizes_b() {
        let g = grid(1, 32, 5.0);
        let op = assemble(&g, &MetricSpec::identity(), &DampingSpec::gaussian(0.8, 1.0, 1.3), WeightChoice::Unit, None).unwrap();
        let f = random_field(&g, 8);
        let ttf = f.with_values(op.t_adjoint_raw(&op.t_raw(f.values())));
        assert!(rel(&ttf, &op.apply_b_alpha(&f)) < 1e-13);
    }

    #[test]
    fn dissipativity_and_its_negative_control() {
        let g = grid(2, 16, 4.0);
        let flat = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let r = dissipativity_report(&flat, 10, 1);
        assert!(r.passed());
        assert!(r.max_imag.abs() < 1e-12);

        let op = assemble(&g, &MetricSpec::conformal_bump(0.5, 1.0), &DampingSpec::gaussian(1.0, 1.0, 1.0), WeightChoice::Unit, None).unwrap();
        assert!(dissipativity_report(&op, 20, 2).passed());

        // Localized bump where a > 0: strictly dissipative.
        let bump = ComplexField::from_fn(&g, |x| C64::from((-(x[0] * x[0] + x[1] * x[1]) / 0.5).exp()));
        let q = op.inner_w(&op.apply_h(&bump), &bump);
        assert!(q.im < -1e-3 * bump.l2_norm().powi(2));

        let flipped = op.with_flipped_damping();
        let r = dissipativity_report(&flipped, 20, 2);
        assert!(!r.dissipative);
    }

    #[test]
    fn trapping_ring_radius_solves_orbit_condition() {
        let m = MetricSpec::trapping_well(0.95, 2.0);
        let r = m.trapping_ring_radius().unwrap();
        let h = 1e-6;
        let c = |r: f64| m.conformal_factor(&[r, 0.0]).unwrap();
        let dc = (c(r + h) - c(r - h)) / (2.0 * h);
        assert!((r * dc - 2.0 * c(r)).abs() < 1e-8);
        assert!(MetricSpec::trapping_well(0.5, 2.0).trapping_ring_radius().is_none());
    }

    #[test]
    fn conformal_gradient_matches_finite_differences() {
        for m in [MetricSpec::conformal_bump(0.3, 1.2), MetricSpec::trapping_well(0.9, 2.0)] {
            let x = [0.7, -1.1, 0.4];
            let mut g = [0.0; 3];
            m.conformal_gradient(&x, &mut g).unwrap();
            for k in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += 1e-6;
                xm[k] -= 1e-6;
                let fd = (m.conformal_factor(&xp).unwrap() - m.conformal_factor(&xm).unwrap()) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-8);
            }
        }
    }
}
