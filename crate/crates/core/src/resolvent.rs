//! Resolvent `R(z) = (H - z)^{-1}`: matrix-free solves, weighted norms of
//! resolvent powers, and checks of the algebraic identities the estimates
//! rest on.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{self, GmresConfig, PowerConfig};
use crate::model::{random_values, DampedOperator};
use crate::par::{self, Exec};
use crate::spectral::{self, norm_sqr, ComplexField};

/// `z` must lie in `Im z > 0` or `Re z < 0`, where `H - z` is invertible
/// with `‖R(z)‖ ≤ 1 / max(Im z, -Re z)`.
pub fn check_spectral_parameter(z: C64) -> Result<()> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite spectral parameter {z}")));
    }
    if z.im > 0.0 || z.re < 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "spectral parameter {z} must satisfy Im z > 0 or Re z < 0"
        )))
    }
}

/// One converged application of `R(z)` or `R(z)†`.
#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub u: Vec<C64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Resolvent at a fixed `z`, with GMRES preconditioned by the exact free
/// resolvent `(-Δ - z)^{-1}`.
pub struct Resolvent<'a> {
    op: &'a DampedOperator,
    z: C64,
    cfg: GmresConfig,
    precond: Vec<C64>,
    precond_adjoint: Vec<C64>,
}

impl<'a> Resolvent<'a> {
    pub fn new(op: &'a DampedOperator, z: C64, tol: f64, max_iters: usize) -> Result<Self> {
        check_spectral_parameter(z)?;
        let precond: Vec<C64> = op
            .xi_squared()
            .iter()
            .map(|k| (C64::from(*k) - z).inv())
            .collect();
        let precond_adjoint = precond.iter().map(|c| c.conj()).collect();
        Ok(Resolvent {
            op,
            z,
            cfg: GmresConfig {
                tol,
                restart: 50,
                max_iters,
            },
            precond,
            precond_adjoint,
        })
    }

    pub fn z(&self) -> C64 {
        self.z
    }

    /// `u = R(z) f`.
    pub fn apply(&self, f: &[C64]) -> Result<SolveOutcome> {
        self.run(f, false)
    }

    /// `u = R(z)† f = (H† - z̄)^{-1} f`.
    pub fn apply_adjoint(&self, f: &[C64]) -> Result<SolveOutcome> {
        self.run(f, true)
    }

    fn run(&self, f: &[C64], adjoint: bool) -> Result<SolveOutcome> {
        let grid = self.op.grid();
        let (zz, table) = if adjoint {
            (self.z.conj(), &self.precond_adjoint)
        } else {
            (self.z, &self.precond)
        };
        let apply = |v: &[C64]| {
            let mut hv = if adjoint {
                self.op.h_adjoint_raw(v)
            } else {
                self.op.h_raw(v)
            };
            hv.iter_mut().zip(v).for_each(|(h, v)| *h -= zz * v);
            hv
        };
        if self.op.is_free() {
            // Exact: the preconditioner is the resolvent.
            let mut u = f.to_vec();
            spectral::multiply_in_fourier(grid, &mut u, table);
            return Ok(SolveOutcome {
                u,
                residual: 0.0,
                iterations: 0,
            });
        }
        let precond = |v: &[C64]| {
            let mut u = v.to_vec();
            spectral::multiply_in_fourier(grid, &mut u, table);
            u
        };
        let out = krylov::gmres(apply, precond, f, &self.cfg);
        if !out.converged {
            return Err(Error::SolverDiverged {
                residual: out.residual,
                iterations: out.iterations,
            });
        }
        Ok(SolveOutcome {
            u: out.x,
            residual: out.residual,
            iterations: out.iterations,
        })
    }
}

/// `u` with `‖(H - z)u - f‖ ≤ tol ‖f‖`.
pub fn solve(op: &DampedOperator, z: C64, f: &ComplexField, tol: f64) -> Result<ComplexField> {
    let r = Resolvent::new(op, z, tol, 5000)?;
    Ok(f.with_values(r.apply(f.values())?.u))
}

/// Weighted resolvent-power norm `‖<x>^{-δ_l} <D>^{β_l} R^{n+1}(z) <D>^{β_r} <x>^{-δ_r}‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventQuery {
    pub z: C64,
    /// The power is `n + 1`.
    pub n: usize,
    pub delta_left: f64,
    pub delta_right: f64,
    #[serde(default)]
    pub deriv_left: f64,
    #[serde(default)]
    pub deriv_right: f64,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Seed of the power-iteration start vector.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_solver_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    5000
}
fn default_seed() -> u64 {
    42
}

impl ResolventQuery {
    /// Symmetric weights `<x>^{-δ}` on both sides, no derivative factors.
    pub fn symmetric(z: C64, n: usize, delta: f64) -> Self {
        ResolventQuery {
            z,
            n,
            delta_left: delta,
            delta_right: delta,
            deriv_left: 0.0,
            deriv_right: 0.0,
            solver_tol: default_solver_tol(),
            max_iters: default_max_iters(),
            seed: default_seed(),
        }
    }

    pub fn with_z(mut self, z: C64) -> Self {
        self.z = z;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z.im > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "resolvent query needs Im z > 0, got {}",
                self.z
            )));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol <= 1e-2) {
            return Err(Error::InvalidParameter(format!(
                "solver tolerance {} outside (0, 1e-2]",
                self.solver_tol
            )));
        }
        if self.delta_left < 0.0 || self.delta_right < 0.0 {
            return Err(Error::InvalidParameter("weights must be >= 0".into()));
        }
        if self.deriv_left < 0.0 || self.deriv_right < 0.0 || self.deriv_left + self.deriv_right > 2.0 {
            return Err(Error::InvalidParameter(
                "derivative insertions must be >= 0 with sum <= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResolventResult {
    pub norm_estimate: f64,
    /// Power iterations performed.
    pub iterations: usize,
    /// Relative residual of every solve.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl ResolventResult {
    pub fn residual_max(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }
}

/// Applies `M = W_l D_l R^{n+1} D_r W_r` and its adjoint.
struct Sandwich<'a> {
    resolvent: Resolvent<'a>,
    n: usize,
    wl: Vec<f64>,
    wr: Vec<f64>,
    dl: Option<Vec<f64>>,
    dr: Option<Vec<f64>>,
}

impl Sandwich<'_> {
    fn apply(&self, v: &[C64], residuals: &mut Vec<f64>, adjoint: bool) -> Result<Vec<C64>> {
        let grid = self.resolvent.op.grid();
        let (w_in, d_in, d_out, w_out) = if adjoint {
            (&self.wl, &self.dl, &self.dr, &self.wr)
        } else {
            (&self.wr, &self.dr, &self.dl, &self.wl)
        };
        let mut u: Vec<C64> = v.iter().zip(w_in).map(|(v, w)| v * w).collect();
        if let Some(d) = d_in {
            spectral::multiply_in_fourier_real(grid, &mut u, d);
        }
        for _ in 0..=self.n {
            let s = if adjoint {
                self.resolvent.apply_adjoint(&u)?
            } else {
                self.resolvent.apply(&u)?
            };
            residuals.push(s.residual);
            u = s.u;
        }
        if let Some(d) = d_out {
            spectral::multiply_in_fourier_real(grid, &mut u, d);
        }
        u.iter_mut().zip(w_out).for_each(|(u, w)| *u *= w);
        Ok(u)
    }
}

/// Largest singular value of the sandwiched resolvent power, by power
/// iteration on `M†M` (relative eigenvalue tolerance 1e-4, 200 iterations).
pub fn weighted_norm(op: &DampedOperator, q: &ResolventQuery) -> Result<ResolventResult> {
    weighted_norm_with(op, q, &PowerConfig::default())
}

pub fn weighted_norm_with(op: &DampedOperator, q: &ResolventQuery, power: &PowerConfig) -> Result<ResolventResult> {
    q.validate()?;
    let grid = op.grid();
    let bracket = |beta: f64| -> Option<Vec<f64>> {
        (beta != 0.0).then(|| op.xi_squared().iter().map(|k| (1.0 + k).powf(0.5 * beta)).collect())
    };
    let m = Sandwich {
        resolvent: Resolvent::new(op, q.z, q.solver_tol, q.max_iters)?,
        n: q.n,
        wl: grid.bracket_power(-q.delta_left),
        wr: grid.bracket_power(-q.delta_right),
        dl: bracket(q.deriv_left),
        dr: bracket(q.deriv_right),
    };
    let mut residuals = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
    let start = random_values(grid.len(), &mut rng);
    let out = krylov::power_iteration(
        |v| {
            let mv = m.apply(v, &mut residuals, false)?;
            m.apply(&mv, &mut residuals, true)
        },
        start,
        power,
    )?;
    Ok(ResolventResult {
        norm_estimate: out.eigenvalue.max(0.0).sqrt(),
        iterations: out.iterations,
        residuals,
        converged: out.converged,
    })
}

/// Divided differences of the resolvent against `R²(z)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DerivativePowerReport {
    pub z: C64,
    pub steps: Vec<f64>,
    /// `‖(R(z+h) - R(z))f/h - R²(z)f‖ / ‖R²(z)f‖` for each step.
    pub errors: Vec<f64>,
    /// `error / h`, the observed first-order constant.
    pub error_constants: Vec<f64>,
    /// Error ratios between consecutive steps.
    pub ratios: Vec<f64>,
}

impl DerivativePowerReport {
    /// First-order convergence: every decade ratio in `[8, 12]`.
    pub fn first_order(&self) -> bool {
        self.ratios.iter().all(|r| (8.0..=12.0).contains(r))
    }
}

/// Checks `R'(z) = R²(z)` on a probe field with steps `h ∈ {1e-2, 1e-3, 1e-4}`.
pub fn derivative_power_check(op: &DampedOperator, z: C64, probe: &ComplexField) -> Result<DerivativePowerReport> {
    derivative_power_check_with(op, z, probe, &[1e-2, 1e-3, 1e-4])
}

pub fn derivative_power_check_with(
    op: &DampedOperator,
    z: C64,
    probe: &ComplexField,
    steps: &[f64],
) -> Result<DerivativePowerReport> {
    let h_max = steps.iter().cloned().fold(0.0, f64::max);
    if !(z.im > h_max && h_max > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "derivative check needs Im z > h > 0 (z = {z}, h = {h_max})"
        )));
    }
    let tol = 1e-13;
    let r = Resolvent::new(op, z, tol, 20_000)?;
    let rf = r.apply(probe.values())?.u;
    let r2f = r.apply(&rf)?.u;
    let r2_norm = norm_sqr(&r2f).sqrt();
    let mut errors = Vec::with_capacity(steps.len());
    for &h in steps {
        let rh = Resolvent::new(op, z + h, tol, 20_000)?;
        let rhf = rh.apply(probe.values())?.u;
        let err: f64 = rhf
            .iter()
            .zip(&rf)
            .zip(&r2f)
            .map(|((a, b), c)| ((a - b) / h - c).norm_sqr())
            .sum::<f64>()
            .sqrt();
        errors.push(err / r2_norm);
    }
    let ratios = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let error_constants = errors.iter().zip(steps).map(|(e, h)| e / h).collect();
    Ok(DerivativePowerReport {
        z,
        steps: steps.to_vec(),
        errors,
        error_constants,
        ratios,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QuadraticReport {
    pub z: C64,
    /// `‖T R(z) T†‖` estimate per start vector.
    pub norms: Vec<f64>,
    pub norm: f64,
    pub bound: f64,
    pub passed: bool,
}

/// Estimates `‖T R(z) T†‖` with `T = <D>^{α/2} a`, which satisfies
/// `T†T = B_α`; the quadratic estimate bounds it by 1.
pub fn quadratic_estimate_check(op: &DampedOperator, z: C64, probes: usize) -> Result<QuadraticReport> {
    if !(z.im > 0.0) {
        return Err(Error::InvalidParameter(format!("quadratic estimate needs Im z > 0, got {z}")));
    }
    let r = Resolvent::new(op, z, 1e-10, 20_000)?;
    let grid = op.grid();
    let mut norms = Vec::new();
    for k in 0..probes.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let start = random_values(grid.len(), &mut rng);
        let out = krylov::power_iteration(
            |v| {
                let a = r.apply(&op.t_adjoint_raw(v))?.u;
                let mv = op.t_raw(&a);
                let b = r.apply_adjoint(&op.t_adjoint_raw(&mv))?.u;
                Ok(op.t_raw(&b))
            },
            start,
            &PowerConfig {
                rel_tol: 1e-6,
                max_iters: 300,
            },
        )?;
        norms.push(out.eigenvalue.max(0.0).sqrt());
    }
    let norm = norms.iter().cloned().fold(0.0, f64::max);
    let bound = 1.0 + 1e-6;
    Ok(QuadraticReport {
        z,
        norms,
        norm,
        bound,
        passed: norm <= bound,
    })
}

/// One factor of an expansion term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    /// `R₀^k`
    R0(usize),
    /// `R₁` (always to the first power)
    R1,
    B,
}

/// Signed product of factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub factors: Vec<Factor>,
}

/// Expansion of `R₁^{m+1}` into terms `R₀^{m₁+1} B R_{j₂}^{m₂+1} B ⋯ B R₀^{m_k+1}`
/// using `R₁ = R₀ - R₀BR₀ + R₀BR₁BR₀` repeatedly on the right.
pub fn expansion_terms(m: usize) -> Vec<Term> {
    let base = |q: usize| -> Vec<Term> {
        vec![
            Term {
                coef: 1.0,
                factors: vec![Factor::R0(q + 1)],
            },
            Term {
                coef: -1.0,
                factors: vec![Factor::R0(q + 1), Factor::B, Factor::R0(1)],
            },
            Term {
                coef: 1.0,
                factors: vec![Factor::R0(q + 1), Factor::B, Factor::R1, Factor::B, Factor::R0(1)],
            },
        ]
    };
    let mut terms = base(0);
    for _ in 0..m {
        let mut next = Vec::with_capacity(terms.len() * 3);
        for t in &terms {
            let (last, head) = t.factors.split_last().unwrap();
            let q = match last {
                Factor::R0(q) => *q,
                _ => unreachable!("terms end with a power of R0"),
            };
            for tail in base(q) {
                let mut factors = head.to_vec();
                factors.extend(tail.factors);
                next.push(Term {
                    coef: t.coef * tail.coef,
                    factors,
                });
            }
        }
        terms = next;
    }
    terms
}

/// Checks the structural constraints of an expansion term: it starts and
/// ends with a power of `R₀`, alternates resolvent blocks with `B`, carries
/// `R₁` only to the first power, and `Σ m_l ≤ m`.
pub fn term_has_expected_form(t: &Term, m: usize) -> bool {
    let f = &t.factors;
    if f.is_empty() || f.len().is_multiple_of(2) {
        return false;
    }
    if !matches!(f[0], Factor::R0(_)) || !matches!(f[f.len() - 1], Factor::R0(_)) {
        return false;
    }
    let mut excess = 0;
    for (i, factor) in f.iter().enumerate() {
        match (i % 2, factor) {
            (0, Factor::R0(k)) if *k >= 1 => excess += k - 1,
            (0, Factor::R1) => {}
            (1, Factor::B) => {}
            _ => return false,
        }
    }
    excess <= m
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExpansionReport {
    pub m: usize,
    pub size: usize,
    /// Seed of the accepted draw.
    pub seed_used: u64,
    pub redraws: usize,
    pub n_terms: usize,
    /// `‖R₁ - (R₀ - R₀BR₀ + R₀BR₁BR₀)‖ / ‖R₁‖`
    pub second_order_error: f64,
    /// `‖R₁^{m+1} - Σ terms‖ / ‖R₁^{m+1}‖`
    pub expansion_error: f64,
    pub form_ok: bool,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_matrix(size: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
    DMatrix::from_fn(size, size, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im) * scale
    })
}

fn condition_number(m: &DMatrix<C64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Dense check of the resolvent perturbation expansion on random complex
/// `H₀`, `B` and `z`. Ill-conditioned draws are redrawn with the next seed.
pub fn perturbation_expansion_check(m: usize, size: usize, seed: u64) -> Result<ExpansionReport> {
    if m > 4 || size == 0 || size > 32 {
        return Err(Error::InvalidParameter(format!(
            "expansion check needs m <= 4 and 1 <= size <= 32 (m = {m}, size = {size})"
        )));
    }
    let mut redraws = 0;
    let mut s = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let scale = 1.0 / (size as f64).sqrt();
        let h0 = random_matrix(size, scale, &mut rng);
        let b = random_matrix(size, 0.5 * scale, &mut rng);
        let z = C64::new(
            StandardNormal.sample(&mut rng),
            1.0 + rand::Rng::random::<f64>(&mut rng),
        );
        let id = DMatrix::<C64>::identity(size, size);
        let a0 = &h0 - &id * z;
        let a1 = &h0 + &b - &id * z;
        if condition_number(&a0) > 1e6 || condition_number(&a1) > 1e6 {
            redraws += 1;
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            if redraws > 100 {
                return Err(Error::Unsupported("could not draw a well-conditioned system".into()));
            }
            continue;
        }
        let mut report = expansion_check_dense(&h0, &b, z, m)?;
        report.seed_used = s;
        report.redraws = redraws;
        return Ok(report);
    }
}

/// The expansion check on explicit matrices.
pub fn expansion_check_dense(h0: &DMatrix<C64>, b: &DMatrix<C64>, z: C64, m: usize) -> Result<ExpansionReport> {
    let size = h0.nrows();
    let id = DMatrix::<C64>::identity(size, size);
    let r0 = (h0 - &id * z)
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("H0 - z is singular".into()))?;
    let r1 = (h0 + b - &id * z)
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("H0 + B - z is singular".into()))?;
    let second = &r0 - &r0 * b * &r0 + &r0 * b * &r1 * b * &r0;
    let second_order_error = (&r1 - &second).norm() / r1.norm();

    let mut powers = vec![id.clone()];
    for k in 1..=m + 2 {
        powers.push(&powers[k - 1] * &r0);
    }
    let terms = expansion_terms(m);
    let form_ok = terms.iter().all(|t| term_has_expected_form(t, m));
    let mut sum = DMatrix::<C64>::zeros(size, size);
    for t in &terms {
        let mut prod = id.clone();
        for f in &t.factors {
            prod = match f {
                Factor::R0(k) => prod * &powers[*k],
                Factor::R1 => prod * &r1,
                Factor::B => prod * b,
            };
        }
        sum += prod * C64::from(t.coef);
    }
    let mut target = id.clone();
    for _ in 0..=m {
        target *= &r1;
    }
    let expansion_error = (&target - &sum).norm() / target.norm();
    let tolerance = 1e-10;
    Ok(ExpansionReport {
        m,
        size,
        seed_used: 0,
        redraws: 0,
        n_terms: terms.len(),
        second_order_error,
        expansion_error,
        form_ok,
        tolerance,
        passed: form_ok && expansion_error <= tolerance && second_order_error <= tolerance,
    })
}

/// Frequency regime of a resolvent sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `1 + |z|^{d/2 - ε - 1 - n}`
    Low,
    /// Constant envelope for `<x>^{-1} R(z) <x>^{-1}`.
    SharpLow,
    /// Constant envelope on a compact set away from 0.
    Intermediate,
    /// `|z|^{-(n+1)/2}` (non-trapping) or `|z|^{-(n+1)α̃/2}` (damping condition).
    High,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Regime::Low),
            "sharp_low" | "sharp-low" => Ok(Regime::SharpLow),
            "intermediate" => Ok(Regime::Intermediate),
            "high" => Ok(Regime::High),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Use the non-trapping high-frequency exponent instead of the damped one.
    pub non_trapping: bool,
    /// `ε` in the low-frequency envelope.
    pub epsilon: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            non_trapping: true,
            epsilon: 0.0,
            exec: Exec::default(),
        }
    }
}

/// Envelope shape of the regime at `|z|`.
pub fn envelope(regime: Regime, z: C64, dim: usize, n: usize, alpha_tilde: f64, opts: &SweepOptions) -> f64 {
    let r = z.norm();
    let n = n as f64;
    match regime {
        Regime::Low => 1.0 + r.powf(0.5 * dim as f64 - opts.epsilon - 1.0 - n),
        Regime::SharpLow | Regime::Intermediate => 1.0,
        Regime::High => {
            let rate = if opts.non_trapping { 1.0 } else { alpha_tilde };
            r.powf(-0.5 * (n + 1.0) * rate)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub z: C64,
    pub n: usize,
    pub delta: f64,
    pub norm: f64,
    pub envelope: f64,
    pub residual_max: f64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepTable {
    pub regime: Regime,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log norm` against `log |z|`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Slope the envelope predicts over the same points.
    pub envelope_slope: f64,
    /// `max norm / min norm` over usable rows.
    pub max_min_ratio: f64,
    /// `max_k (norm_k/env_k) / (norm_0/env_0)`.
    pub envelope_ratio: f64,
}

impl SweepTable {
    /// CSV with columns `z_re,z_im,n,delta,norm,envelope,residual_max,converged`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z_re,z_im,n,delta,norm,envelope,residual_max,converged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.z.re, r.z.im, r.n, r.delta, r.norm, r.envelope, r.residual_max, r.converged
            ));
        }
        s
    }
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Weighted norms over `z_list`, with a log–log slope fit and the regime
/// envelope. Points whose solves fail are recorded and skipped.
pub fn frequency_sweep(
    op: &DampedOperator,
    regime: Regime,
    template: &ResolventQuery,
    z_list: &[C64],
    opts: &SweepOptions,
) -> Result<SweepTable> {
    for z in z_list {
        if !(z.im > 0.0) {
            return Err(Error::InvalidParameter(format!("sweep point {z} is not in the upper half plane")));
        }
    }
    let dim = op.grid().dim();
    let rows = par::map(opts.exec, z_list, |&z| {
        let q = template.with_z(z);
        let env = envelope(regime, z, dim, q.n, op.alpha_tilde(), opts);
        match weighted_norm(op, &q) {
            Ok(r) => SweepRow {
                z,
                n: q.n,
                delta: q.delta_left,
                norm: r.norm_estimate,
                envelope: env,
                residual_max: r.residual_max(),
                converged: r.converged,
                error: None,
            },
            Err(e) => SweepRow {
                z,
                n: q.n,
                delta: q.delta_left,
                norm: f64::NAN,
                envelope: env,
                residual_max: f64::NAN,
                converged: false,
                error: Some(e.to_string()),
            },
        }
    });
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.error.is_none() && r.norm > 0.0).collect();
    let lx: Vec<f64> = ok.iter().map(|r| r.z.norm().ln()).collect();
    let ly: Vec<f64> = ok.iter().map(|r| r.norm.ln()).collect();
    let le: Vec<f64> = ok.iter().map(|r| r.envelope.ln()).collect();
    let (slope, intercept, r_squared) = fit_line(&lx, &ly);
    let (envelope_slope, _, _) = fit_line(&lx, &le);
    let max = ok.iter().map(|r| r.norm).fold(f64::NEG_INFINITY, f64::max);
    let min = ok.iter().map(|r| r.norm).fold(f64::INFINITY, f64::min);
    let envelope_ratio = match ok.first() {
        Some(first) => {
            let c = first.norm / first.envelope;
            ok.iter().map(|r| r.norm / (c * r.envelope)).fold(0.0, f64::max)
        }
        None => f64::NAN,
    };
    Ok(SweepTable {
        regime,
        rows,
        slope,
        intercept,
        r_squared,
        envelope_slope,
        max_min_ratio: max / min,
        envelope_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble, random_field, DampingSpec, MetricSpec, WeightChoice};
    use crate::spectral::Grid;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn damped_1d(n: usize) -> DampedOperator {
        let g = Arc::new(Grid::new(1, n, 6.0).unwrap());
        assemble(
            &g,
            &MetricSpec::conformal_bump(0.4, 1.0),
            &DampingSpec::gaussian(1.0, 1.0, 1.0),
            WeightChoice::Unit,
            None,
        )
        .unwrap()
    }

    #[test]
    fn free_plane_wave_resolvent() {
        let g = Arc::new(Grid::new(2, 16, 4.0).unwrap());
        let op = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let xi = [PI / 2.0, PI / 4.0];
        let f = ComplexField::plane_wave(&g, &xi);
        let z = C64::new(1.0, 0.3);
        let u = solve(&op, z, &f, 1e-10).unwrap();
        let mut expect = f.clone();
        expect.scale((C64::from(xi[0] * xi[0] + xi[1] * xi[1]) - z).inv());
        assert!(u.sub(&expect).l2_norm() / expect.l2_norm() < 1e-13);
    }

    #[test]
    fn rejects_real_positive_axis() {
        let op = damped_1d(16);
        let f = random_field(op.grid(), 1);
        assert!(solve(&op, C64::new(1.0, 0.0), &f, 1e-8).is_err());
        assert!(solve(&op, C64::new(1.0, -0.5), &f, 1e-8).is_err());
        // Left half plane below the axis is admissible.
        assert!(solve(&op, C64::new(-1.0, -0.5), &f, 1e-8).is_ok());
    }

    #[test]
    fn trivial_bound_and_residual() {
        let op = damped_1d(64);
        let f = random_field(op.grid(), 2);
        for z in [C64::new(2.0, 0.1), C64::new(-1.0, 0.5), C64::new(30.0, 1.0)] {
            let tol = 1e-8;
            let u = solve(&op, z, &f, tol).unwrap();
            let mut res = op.apply_h(&u);
            res.axpy(-z, &u);
            assert!(res.sub(&f).l2_norm() <= tol * f.l2_norm() * 1.0001);
            let bound = f.l2_norm() / z.im.max(-z.re);
            assert!(u.l2_norm() <= (1.0 + 10.0 * tol) * bound);
        }
    }

    #[test]
    fn free_weighted_norm_is_inverse_spectral_distance() {
        let g = Arc::new(Grid::new(1, 32, 5.0).unwrap());
        let op = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let z = C64::new(2.0, 0.4);
        let dist = g
            .xi_squared()
            .iter()
            .map(|k| (C64::from(*k) - z).norm())
            .fold(f64::INFINITY, f64::min);
        let r = weighted_norm(&op, &ResolventQuery::symmetric(z, 0, 0.0)).unwrap();
        assert!((r.norm_estimate * dist - 1.0).abs() < 1e-3, "{}", r.norm_estimate * dist);
    }

    #[test]
    fn weights_never_increase_the_norm() {
        let op = damped_1d(32);
        let z = C64::new(3.0, 0.5);
        let mut last = f64::INFINITY;
        for delta in [0.0, 0.5, 1.0, 2.0] {
            let r = weighted_norm(&op, &ResolventQuery::symmetric(z, 0, delta)).unwrap();
            assert!(r.norm_estimate <= last * (1.0 + 2e-4));
            last = r.norm_estimate;
        }
    }

    #[test]
    fn query_validation() {
        let q = ResolventQuery::symmetric(C64::new(1.0, -0.1), 0, 1.0);
        assert!(q.validate().is_err());
        let mut q = ResolventQuery::symmetric(C64::new(1.0, 0.1), 0, 1.0);
        q.deriv_left = 1.5;
        q.deriv_right = 1.0;
        assert!(q.validate().is_err());
        q.deriv_right = 0.5;
        assert!(q.validate().is_ok());
        q.solver_tol = 0.1;
        assert!(q.validate().is_err());
    }

    #[test]
    fn derivative_power_law_free_plane_wave() {
        let g = Arc::new(Grid::new(1, 16, 4.0).unwrap());
        let op = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let xi = PI / 2.0;
        let f = ComplexField::plane_wave(&g, &[xi]);
        let z = C64::new(1.5, 0.5);
        let rep = derivative_power_check(&op, z, &f).unwrap();
        // Scalar calculus: (1/(λ-z-h) - 1/(λ-z))/h - 1/(λ-z)^2 = h/((λ-z)^2(λ-z-h)).
        let lam = C64::from(xi * xi);
        for (h, e) in rep.steps.iter().zip(&rep.errors) {
            let exact = (h / (lam - z - h)).norm();
            assert!((e - exact).abs() < 1e-8 * exact.max(1e-12) + 1e-12, "{e} vs {exact}");
        }
        assert!(rep.first_order());
    }

    #[test]
    fn derivative_power_law_damped() {
        let op = damped_1d(32);
        let probe = random_field(op.grid(), 3);
        let rep = derivative_power_check(&op, C64::new(2.0, 0.7), &probe).unwrap();
        assert!(rep.first_order(), "{:?}", rep.ratios);
        assert!(derivative_power_check(&op, C64::new(2.0, 0.005), &probe).is_err());
    }

    #[test]
    fn quadratic_estimate() {
        let op = damped_1d(32);
        let rep = quadratic_estimate_check(&op, C64::new(0.0, 1.0), 2).unwrap();
        assert!(rep.passed, "{}", rep.norm);
        assert!(rep.norm > 0.05);
        let g = op.grid().clone();
        let free = assemble(&g, &MetricSpec::identity(), &DampingSpec::none(), WeightChoice::Unit, None).unwrap();
        let rep = quadratic_estimate_check(&free, C64::new(0.0, 1.0), 1).unwrap();
        assert_eq!(rep.norm, 0.0);
    }

    #[test]
    fn expansion_terms_have_expected_form() {
        for m in 0..=4 {
            let terms = expansion_terms(m);
            assert_eq!(terms.len(), 3usize.pow(m as u32 + 1));
            assert!(terms.iter().all(|t| term_has_expected_form(t, m)));
        }
        let bad = Term {
            coef: 1.0,
            factors: vec![Factor::R1, Factor::B, Factor::R0(1)],
        };
        assert!(!term_has_expected_form(&bad, 0));
    }

    #[test]
    fn expansion_with_zero_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h0 = random_matrix(6, 0.4, &mut rng);
        let b = DMatrix::<C64>::zeros(6, 6);
        let rep = expansion_check_dense(&h0, &b, C64::new(0.2, 1.5), 2).unwrap();
        assert!(rep.expansion_error < 1e-14 && rep.second_order_error < 1e-14);
    }

    #[test]
    fn expansion_random_draws() {
        for m in 0..=2 {
            let rep = perturbation_expansion_check(m, 8, 7).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
        assert!(perturbation_expansion_check(5, 8, 7).is_err());
    }

    #[test]
    fn envelope_shapes() {
        let o = SweepOptions::default();
        assert_eq!(envelope(Regime::SharpLow, C64::new(0.1, 0.01), 3, 0, 1.0, &o), 1.0);
        let e = envelope(Regime::High, C64::new(100.0, 0.0), 2, 0, 1.0, &o);
        assert!((e - 0.1).abs() < 1e-12);
        let damped = SweepOptions { non_trapping: false, ..o };
        let e = envelope(Regime::High, C64::new(16.0, 0.0), 2, 1, 0.5, &damped);
        assert!((e - 16f64.powf(-0.5)).abs() < 1e-12);
        let e = envelope(Regime::Low, C64::new(0.25, 0.0), 3, 0, 1.0, &o);
        assert!((e - (1.0 + 0.25f64.powf(0.5))).abs() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_power_law() {
        let x: Vec<f64> = (1..10).map(|k| (k as f64).ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| -0.5 * v + 0.3).collect();
        let (s, i, r2) = fit_line(&x, &y);
        assert!((s + 0.5).abs() < 1e-12 && (i - 0.3).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
