//! Time evolution `u(t) = e^{-itH} u₀` and time-domain observables.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{self, ExpmConfig};
use crate::model::DampedOperator;
use crate::par;
use crate::resolvent::fit_line;
use crate::spectral::{self, ComplexField, Grid};

const I: C64 = C64::new(0.0, 1.0);

/// Relative per-step norm growth that aborts an evolution.
pub const NORM_GROWTH_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exact free flow in Fourier space, Krylov exponential for `H + Δ`.
    #[default]
    StrangSplit,
    /// Krylov exponential of the full generator.
    KrylovExpm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    /// `‖<x>^{-δ} u‖`.
    LocalEnergy { delta: f64 },
    /// `‖<x>^{-1} <D>^{γ/2} u‖²`.
    Smoothing { gamma: f64 },
    L2Norm,
}

impl Observable {
    pub fn label(&self) -> String {
        match self {
            Observable::LocalEnergy { delta } => format!("local_energy(delta={delta})"),
            Observable::Smoothing { gamma } => format!("smoothing(gamma={gamma})"),
            Observable::L2Norm => "l2_norm".to_string(),
        }
    }

    fn is_local_energy(&self) -> bool {
        matches!(self, Observable::LocalEnergy { .. })
    }
}

/// Stop recording local-energy observables once more than `threshold` of
/// `‖u‖²` sits within `fraction · L` of the box boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrapGuard {
    pub threshold: f64,
    pub fraction: f64,
    /// End the evolution early when only local-energy observables remain.
    #[serde(default)]
    pub stop: bool,
}

impl Default for WrapGuard {
    fn default() -> Self {
        WrapGuard {
            threshold: 1e-6,
            fraction: 0.1,
            stop: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub dt: f64,
    pub t_max: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub observables: Vec<Observable>,
    #[serde(default)]
    pub wrap_guard: Option<WrapGuard>,
    /// Krylov dimension of the exponential (remainder or full generator).
    #[serde(default)]
    pub krylov_dim: Option<usize>,
}

fn one() -> usize {
    1
}

impl EvolutionConfig {
    pub fn new(dt: f64, t_max: f64) -> Self {
        EvolutionConfig {
            dt,
            t_max,
            scheme: Scheme::StrangSplit,
            record_every: 1,
            observables: Vec::new(),
            wrap_guard: None,
            krylov_dim: None,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn record_every(mut self, k: usize) -> Self {
        self.record_every = k;
        self
    }

    pub fn observe(mut self, o: Observable) -> Self {
        self.observables.push(o);
        self
    }

    pub fn with_wrap_guard(mut self, g: WrapGuard) -> Self {
        self.wrap_guard = Some(g);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.t_max.is_finite() || self.dt > self.t_max {
            return Err(Error::InvalidParameter(format!(
                "need dt <= t_max, got dt = {} and t_max = {}",
                self.dt, self.t_max
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        for o in &self.observables {
            match *o {
                Observable::LocalEnergy { delta } if !(delta >= 0.0) => {
                    return Err(Error::InvalidParameter(format!("delta must be >= 0, got {delta}")))
                }
                Observable::Smoothing { gamma } if !(0.0..=2.0).contains(&gamma) => {
                    return Err(Error::InvalidParameter(format!(
                        "gamma must lie in [0, 2], got {gamma}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt - 1e-9).ceil() as usize
    }
}

/// Sampled observable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub label: String,
}

impl DecaySeries {
    pub fn new(label: impl Into<String>) -> Self {
        DecaySeries {
            label: label.into(),
            ..Default::default()
        }
    }

    pub fn from_fn<F: Fn(f64) -> f64>(label: &str, times: Vec<f64>, f: F) -> Self {
        let values = times.iter().map(|&t| f(t)).collect();
        DecaySeries {
            times,
            values,
            label: label.to_string(),
        }
    }

    pub fn push(&mut self, t: f64, v: f64) {
        self.times.push(t);
        self.values.push(v);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Rows `t,value,observable,scenario_id` without a header.
    pub fn csv_rows(&self, scenario_id: &str, out: &mut String) {
        use std::fmt::Write;
        for (t, v) in self.times.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v},{},{scenario_id}", self.label);
        }
    }

    /// Full CSV with header.
    pub fn to_csv(&self, scenario_id: &str) -> String {
        let mut s = String::from("t,value,observable,scenario_id\n");
        self.csv_rows(scenario_id, &mut s);
        s
    }

    /// Trapezoid integral of the samples with `t ≤ t_end`.
    pub fn trapezoid(&self, t_end: f64) -> f64 {
        let mut acc = 0.0;
        for k in 1..self.times.len() {
            if self.times[k] > t_end * (1.0 + 1e-12) {
                break;
            }
            acc += 0.5 * (self.times[k] - self.times[k - 1]) * (self.values[k] + self.values[k - 1]);
        }
        acc
    }
}

#[derive(Clone, Debug)]
pub struct Evolution {
    pub state: ComplexField,
    /// One series per configured observable, in order.
    pub series: Vec<DecaySeries>,
    pub steps: usize,
    pub t_final: f64,
    /// Time at which the wrap guard tripped, if it did.
    pub wrap_time: Option<f64>,
    /// Largest recorded boundary-mass fraction (0 without a guard).
    pub max_boundary_mass: f64,
    /// Largest observed `‖u_{k+1}‖/‖u_k‖ - 1`.
    pub max_step_growth: f64,
}

/// `‖<x>^{-δ} u‖` with box quadrature.
pub fn local_energy(u: &ComplexField, delta: f64) -> f64 {
    if delta == 0.0 {
        return u.l2_norm();
    }
    let w = u.grid().bracket_power(-2.0 * delta);
    let s: f64 = u.values().iter().zip(&w).map(|(v, w)| v.norm_sqr() * w).sum();
    (s * u.grid().cell_volume()).sqrt()
}

/// `‖<x>^{-1} <D>^{γ/2} u‖²`.
pub fn smoothing_integrand(u: &ComplexField, gamma: f64) -> f64 {
    let grid = u.grid();
    let mut v = u.values().to_vec();
    if gamma != 0.0 {
        spectral::multiply_in_fourier_real(grid, &mut v, &grid.bracket_power(gamma / 2.0));
    }
    let w = grid.bracket_power(-2.0);
    v.iter().zip(&w).map(|(v, w)| v.norm_sqr() * w).sum::<f64>() * grid.cell_volume()
}

struct ObservableTables {
    tables: Vec<Vec<f64>>,
}

impl ObservableTables {
    fn new(grid: &Grid, obs: &[Observable]) -> Self {
        let tables = obs
            .iter()
            .map(|o| match *o {
                Observable::LocalEnergy { delta } => grid.bracket_power(-2.0 * delta),
                Observable::Smoothing { gamma } => grid.bracket_power(gamma / 2.0),
                Observable::L2Norm => Vec::new(),
            })
            .collect();
        ObservableTables { tables }
    }

    fn eval(&self, grid: &Grid, obs: &Observable, k: usize, u: &[C64], x_weight: &[f64]) -> f64 {
        let cell = grid.cell_volume();
        match obs {
            Observable::LocalEnergy { .. } => {
                let s: f64 = u.iter().zip(&self.tables[k]).map(|(v, w)| v.norm_sqr() * w).sum();
                (s * cell).sqrt()
            }
            Observable::Smoothing { gamma } => {
                let mut v = u.to_vec();
                if *gamma != 0.0 {
                    spectral::multiply_in_fourier_real(grid, &mut v, &self.tables[k]);
                }
                v.iter().zip(x_weight).map(|(v, w)| v.norm_sqr() * w).sum::<f64>() * cell
            }
            Observable::L2Norm => (spectral::norm_sqr(u) * cell).sqrt(),
        }
    }
}

struct Stepper<'a> {
    op: &'a DampedOperator,
    scheme: Scheme,
    half_free: Vec<C64>,
    full_free: Vec<C64>,
    expm: ExpmConfig,
    dt: f64,
}

impl<'a> Stepper<'a> {
    fn new(op: &'a DampedOperator, cfg: &EvolutionConfig) -> Self {
        let dt = cfg.dt;
        let half_free = op.xi_squared().iter().map(|k| C64::from_polar(1.0, -0.5 * dt * k)).collect();
        let full_free = op.xi_squared().iter().map(|k| C64::from_polar(1.0, -dt * k)).collect();
        let default_dim = match cfg.scheme {
            Scheme::StrangSplit => 10,
            Scheme::KrylovExpm => 30,
        };
        Stepper {
            op,
            scheme: cfg.scheme,
            half_free,
            full_free,
            expm: ExpmConfig {
                dim: cfg.krylov_dim.unwrap_or(default_dim),
                tol: 1e-12,
            },
            dt,
        }
    }

    fn step(&self, u: &mut Vec<C64>, dt: f64) {
        let op = self.op;
        let grid = op.grid();
        let exact_dt = (dt - self.dt).abs() <= 1e-15 * self.dt;
        if op.is_free() {
            if exact_dt {
                spectral::multiply_in_fourier(grid, u, &self.full_free);
            } else {
                let t: Vec<C64> = op.xi_squared().iter().map(|k| C64::from_polar(1.0, -dt * k)).collect();
                spectral::multiply_in_fourier(grid, u, &t);
            }
            return;
        }
        match self.scheme {
            Scheme::StrangSplit => {
                let half: Vec<C64>;
                let half_ref = if exact_dt {
                    &self.half_free
                } else {
                    half = op.xi_squared().iter().map(|k| C64::from_polar(1.0, -0.5 * dt * k)).collect();
                    &half
                };
                spectral::multiply_in_fourier(grid, u, half_ref);
                let v = krylov::expm_apply(
                    |f| {
                        let mut r = op.remainder_raw(f);
                        r.iter_mut().for_each(|x| *x *= -I);
                        r
                    },
                    u,
                    dt,
                    &self.expm,
                );
                *u = v;
                spectral::multiply_in_fourier(grid, u, half_ref);
            }
            Scheme::KrylovExpm => {
                let v = krylov::expm_apply(
                    |f| {
                        let mut r = op.h_raw(f);
                        r.iter_mut().for_each(|x| *x *= -I);
                        r
                    },
                    u,
                    dt,
                    &self.expm,
                );
                *u = v;
            }
        }
    }
}

/// Time-steps `i∂_t u = H u` from `u0` up to `cfg.t_max`.
pub fn evolve(op: &DampedOperator, u0: &ComplexField, cfg: &EvolutionConfig) -> Result<Evolution> {
    cfg.validate()?;
    if !Arc::ptr_eq(op.grid(), u0.grid()) && **op.grid() != **u0.grid() {
        return Err(Error::InvalidParameter("initial data lives on a different grid".into()));
    }
    let norm_sq = |v: &[C64]| op.inner_w_raw(v, v).re;
    let n0 = norm_sq(u0.values());
    if !(n0 > 0.0) {
        return Err(Error::InvalidParameter("initial data must be nonzero".into()));
    }
    let grid = op.grid().clone();
    let tables = ObservableTables::new(&grid, &cfg.observables);
    let x_weight = if cfg.observables.iter().any(|o| matches!(o, Observable::Smoothing { .. })) {
        grid.bracket_power(-2.0)
    } else {
        Vec::new()
    };
    let mut series: Vec<DecaySeries> = cfg.observables.iter().map(|o| DecaySeries::new(o.label())).collect();
    let stepper = Stepper::new(op, cfg);
    let n_steps = cfg.n_steps();

    let mut u = u0.values().to_vec();
    let mut prev = n0.sqrt();
    let mut wrap_time = None;
    let mut max_boundary_mass: f64 = 0.0;
    let mut max_growth: f64 = 0.0;
    let only_local = !cfg.observables.is_empty() && cfg.observables.iter().all(Observable::is_local_energy);

    let mut record = |t: f64, u: &[C64], wrap_time: &mut Option<f64>, max_bm: &mut f64| {
        if let Some(g) = &cfg.wrap_guard {
            if wrap_time.is_none() {
                let bm = u0.with_values(u.to_vec()).boundary_mass_fraction(g.fraction);
                *max_bm = max_bm.max(bm);
                if bm > g.threshold {
                    *wrap_time = Some(t);
                }
            }
        }
        for (k, o) in cfg.observables.iter().enumerate() {
            if o.is_local_energy() && wrap_time.is_some() {
                continue;
            }
            series[k].push(t, tables.eval(&grid, o, k, u, &x_weight));
        }
    };
    record(0.0, &u, &mut wrap_time, &mut max_boundary_mass);

    let mut t = 0.0;
    let mut steps = 0;
    for step in 1..=n_steps {
        let dt = (cfg.t_max - t).min(cfg.dt);
        stepper.step(&mut u, dt);
        t = if step == n_steps { cfg.t_max } else { step as f64 * cfg.dt };
        steps = step;
        let cur = norm_sq(&u);
        if !cur.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let cur = cur.sqrt();
        let growth = cur / prev - 1.0;
        max_growth = max_growth.max(growth);
        if growth > NORM_GROWTH_TOL {
            return Err(Error::NormGrowth {
                step,
                growth: cur / prev,
            });
        }
        prev = cur;
        if step % cfg.record_every == 0 || step == n_steps {
            record(t, &u, &mut wrap_time, &mut max_boundary_mass);
            if only_local && wrap_time.is_some() && cfg.wrap_guard.is_some_and(|g| g.stop) {
                break;
            }
        }
    }
    log::debug!("evolve: {steps} steps to t = {t}, max step growth {max_growth:.2e}");
    Ok(Evolution {
        state: u0.with_values(u),
        series,
        steps,
        t_final: t,
        wrap_time,
        max_boundary_mass,
        max_step_growth: max_growth,
    })
}

/// Independent evolutions of several initial data, in parallel.
pub fn evolve_ensemble(
    op: &DampedOperator,
    data: &[ComplexField],
    cfg: &EvolutionConfig,
) -> Vec<Result<Evolution>> {
    par::map(op.grid().exec(), data, |u| evolve(op, u, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// Least-squares slope of `log v` against `log t` over `t_window`.
pub fn fit_decay_exponent(series: &DecaySeries, t_window: (f64, f64)) -> Result<DecayFit> {
    let (t0, t1) = t_window;
    if !(t0 > 0.0) || !(t1 > t0) {
        return Err(Error::InvalidParameter(format!("bad fit window [{t0}, {t1}]")));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (t, v) in series.times.iter().zip(&series.values) {
        if *t >= t0 * (1.0 - 1e-12) && *t <= t1 * (1.0 + 1e-12) && *v > 0.0 {
            x.push(t.ln());
            y.push(v.ln());
        }
    }
    if x.len() < 8 {
        return Err(Error::TooFewPoints(x.len()));
    }
    let (slope, intercept, r_squared) = fit_line(&x, &y);
    Ok(DecayFit {
        slope,
        intercept,
        r_squared,
        n_points: x.len(),
        t_start: x[0].exp(),
        t_end: x[x.len() - 1].exp(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub gamma: f64,
    pub t_max: f64,
    pub integral: f64,
    pub initial_norm_sq: f64,
    /// `integral / ‖u₀‖²`.
    pub ratio: f64,
    /// Share of the integral accumulated over `[3 t_max / 4, t_max]`.
    pub final_quarter_increment: f64,
    pub series: DecaySeries,
}

impl SmoothingReport {
    /// Ratio of the truncated integral up to `t ≤ t_max`.
    pub fn ratio_at(&self, t: f64) -> f64 {
        if self.initial_norm_sq == 0.0 {
            0.0
        } else {
            self.series.trapezoid(t) / self.initial_norm_sq
        }
    }
}

/// Trapezoid approximation of `∫₀^{t_max} ‖<x>^{-1}<D>^{γ/2} u(t)‖² dt`.
/// Observables and wrap guard in `cfg` are ignored.
pub fn smoothing_integral(
    op: &DampedOperator,
    u0: &ComplexField,
    gamma: f64,
    cfg: &EvolutionConfig,
) -> Result<SmoothingReport> {
    let mut cfg = cfg.clone();
    cfg.observables = vec![Observable::Smoothing { gamma }];
    cfg.wrap_guard = None;
    cfg.validate()?;
    let n0 = u0.l2_norm().powi(2);
    if n0 == 0.0 {
        return Ok(SmoothingReport {
            gamma,
            t_max: cfg.t_max,
            integral: 0.0,
            initial_norm_sq: 0.0,
            ratio: 0.0,
            final_quarter_increment: 0.0,
            series: DecaySeries::new(Observable::Smoothing { gamma }.label()),
        });
    }
    let ev = evolve(op, u0, &cfg)?;
    let series = ev.series.into_iter().next().unwrap();
    let integral = series.trapezoid(cfg.t_max);
    let three_q = series.trapezoid(0.75 * cfg.t_max);
    let final_quarter_increment = if integral > 0.0 { (integral - three_q) / integral } else { 0.0 };
    Ok(SmoothingReport {
        gamma,
        t_max: cfg.t_max,
        integral,
        initial_norm_sq: n0,
        ratio: integral / n0,
        final_quarter_increment,
        series,
    })
}

/// `d/dt ‖u‖² = -2 Re⟨B_α u, u⟩` check: the defect of the centered
/// difference quotient after one step of size `dt`, relative to
/// `‖u₀‖² ‖B_α‖`-scale `2⟨B_α u₀, u₀⟩ + ‖u₀‖²`.
pub fn dissipation_balance_defect(op: &DampedOperator, u0: &ComplexField, dt: f64, scheme: Scheme) -> Result<f64> {
    let cfg = EvolutionConfig::new(dt, dt).with_scheme(scheme);
    let fwd = evolve(op, u0, &cfg)?.state;
    let nsq = |v: &[C64]| op.inner_w_raw(v, v).re;
    let n0 = nsq(u0.values());
    let n1 = nsq(fwd.values());
    // Midpoint rule for ∫ ⟨Bu,u⟩ over one step.
    let half = evolve(op, u0, &EvolutionConfig::new(dt / 2.0, dt / 2.0).with_scheme(scheme))?.state;
    let b = op.b_raw(half.values());
    let rate = op.inner_w_raw(&b, half.values()).re;
    let quotient = (n1 - n0) / dt;
    Ok((quotient + 2.0 * rate).abs() / (2.0 * rate.abs() + n0))
}
