//! Hamiltonian flow of `p(x, ξ) = ⟨G(x)ξ, ξ⟩` for conformal metrics,
//! finite-horizon trapping classification and geometric control probes.
//!
//! With `G = c(x) I` the equations of motion are
//! `ẋ = 2 c ξ`, `ξ̇ = -|ξ|² ∇c`, integrated by the implicit midpoint rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DampingSpec, MetricKind, MetricSpec};
use crate::par::{self, Exec};

/// Relative drift of `p` tolerated on an accepted trajectory.
pub const CONSERVATION_GATE: f64 = 1e-6;
const MAX_HALVINGS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpacePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhaseSpacePoint {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Self {
        PhaseSpacePoint { x, xi }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn radius(&self) -> f64 {
        norm(&self.x)
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.xi).all(|v| v.is_finite())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Escaped,
    /// Bounded over the integrated window; a finite-time surrogate for
    /// membership in the trapped set.
    TrappedUpToT,
    IntegratorFailure,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Escaped => "escaped",
            Classification::TrappedUpToT => "trapped_up_to_T",
            Classification::IntegratorFailure => "integrator_failure",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Samples ordered by increasing `t`, from `-t_max` to `t_max`.
    pub points: Vec<(f64, PhaseSpacePoint)>,
    pub p_values: Vec<f64>,
    pub classification: Classification,
    /// Signed time of the first escape (smallest `|t|`), if any.
    pub escape_time: Option<f64>,
    pub dt_used: f64,
    pub max_p_drift: f64,
    pub r_escape: f64,
    pub t_max: f64,
}

impl Trajectory {
    /// Rows `t,x_1..x_d,xi_1..xi_d,p` with header.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let d = self.points.first().map_or(0, |(_, w)| w.dim());
        let mut s = String::from("t");
        (1..=d).for_each(|i| s.push_str(&format!(",x_{i}")));
        (1..=d).for_each(|i| s.push_str(&format!(",xi_{i}")));
        s.push_str(",p\n");
        for ((t, w), p) in self.points.iter().zip(&self.p_values) {
            let _ = write!(s, "{t}");
            for v in w.x.iter().chain(&w.xi) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{p}");
        }
        s
    }

    /// Largest `|X(t)|` along the path.
    pub fn max_radius(&self) -> f64 {
        self.points.iter().map(|(_, w)| w.radius()).fold(0.0, f64::max)
    }

    pub fn at_time(&self, t: f64) -> Option<&PhaseSpacePoint> {
        self.points
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|(_, w)| w)
    }
}

/// Metric with analytic derivatives, borrowed from a [`MetricSpec`].
struct Conformal<'a>(&'a MetricSpec);

impl<'a> Conformal<'a> {
    fn new(m: &'a MetricSpec) -> Result<Self> {
        if m.kind == MetricKind::UserTable {
            return Err(Error::Unsupported(
                "classical flow needs an analytic metric; user_table is sampled on a grid only".into(),
            ));
        }
        Ok(Conformal(m))
    }

    fn c(&self, x: &[f64]) -> f64 {
        self.0.conformal_factor(x).unwrap()
    }

    fn grad_c(&self, x: &[f64], out: &mut [f64]) {
        self.0.conformal_gradient(x, out).unwrap();
    }

    fn p(&self, w: &PhaseSpacePoint) -> f64 {
        self.c(&w.x) * dot(&w.xi, &w.xi)
    }

    /// `(∂_ξ p, -∂_x p)`.
    fn field(&self, x: &[f64], xi: &[f64], dx: &mut [f64], dxi: &mut [f64]) {
        let c = self.c(x);
        let k2 = dot(xi, xi);
        dx.iter_mut().zip(xi).for_each(|(o, v)| *o = 2.0 * c * v);
        self.grad_c(x, dxi);
        dxi.iter_mut().for_each(|o| *o *= -k2);
    }
}

/// `p(x, ξ)` for analytic metrics.
pub fn symbol(metric: &MetricSpec, w: &PhaseSpacePoint) -> Result<f64> {
    Ok(Conformal::new(metric)?.p(w))
}

/// Rescales `ξ` so that `p(x, ξ) = energy`.
pub fn normalize_energy(metric: &MetricSpec, w: &PhaseSpacePoint, energy: f64) -> Result<PhaseSpacePoint> {
    let p = symbol(metric, w)?;
    if !(p > 0.0) {
        return Err(Error::InvalidParameter("p(w) must be positive".into()));
    }
    let s = (energy / p).sqrt();
    Ok(PhaseSpacePoint::new(w.x.clone(), w.xi.iter().map(|v| v * s).collect()))
}

/// One implicit midpoint step, solved by fixed-point iteration.
fn midpoint_step(m: &Conformal, w: &PhaseSpacePoint, dt: f64, scratch: &mut [Vec<f64>; 4]) -> Option<PhaseSpacePoint> {
    let d = w.dim();
    let [mx, mxi, fx, fxi] = scratch;
    let mut next = w.clone();
    // explicit Euler predictor
    m.field(&w.x, &w.xi, fx, fxi);
    for i in 0..d {
        next.x[i] = w.x[i] + dt * fx[i];
        next.xi[i] = w.xi[i] + dt * fxi[i];
    }
    for _ in 0..100 {
        for i in 0..d {
            mx[i] = 0.5 * (w.x[i] + next.x[i]);
            mxi[i] = 0.5 * (w.xi[i] + next.xi[i]);
        }
        m.field(mx, mxi, fx, fxi);
        let mut change: f64 = 0.0;
        let mut size: f64 = 0.0;
        for i in 0..d {
            let nx = w.x[i] + dt * fx[i];
            let nxi = w.xi[i] + dt * fxi[i];
            change = change.max((nx - next.x[i]).abs()).max((nxi - next.xi[i]).abs());
            size = size.max(nx.abs()).max(nxi.abs());
            next.x[i] = nx;
            next.xi[i] = nxi;
        }
        if change <= 1e-15 * (1.0 + size) {
            return next.is_finite().then_some(next);
        }
    }
    None
}

struct Leg {
    points: Vec<(f64, PhaseSpacePoint)>,
    p_values: Vec<f64>,
    escape_time: Option<f64>,
    max_drift: f64,
    failed: bool,
}

/// Integrates from `w0` over `[0, sign · t_max]`. When `stop_on_escape`
/// is set the leg ends at the first escape.
fn leg(
    m: &Conformal,
    w0: &PhaseSpacePoint,
    t_max: f64,
    dt: f64,
    sign: f64,
    r_escape: f64,
    stop_on_escape: bool,
) -> Leg {
    let d = w0.dim();
    let p0 = m.p(w0);
    let mut scratch = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let n = (t_max / dt).round().max(1.0) as usize;
    let h = sign * t_max / n as f64;
    let mut out = Leg {
        points: vec![(0.0, w0.clone())],
        p_values: vec![p0],
        escape_time: None,
        max_drift: 0.0,
        failed: false,
    };
    let mut w = w0.clone();
    let mut v = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for k in 1..=n {
        let Some(next) = midpoint_step(m, &w, h, &mut scratch) else {
            out.failed = true;
            break;
        };
        w = next;
        let t = k as f64 * h;
        let p = m.p(&w);
        let drift = (p - p0).abs() / p0;
        out.max_drift = out.max_drift.max(drift);
        out.points.push((t, w.clone()));
        out.p_values.push(p);
        if drift > CONSERVATION_GATE {
            out.failed = true;
            break;
        }
        if out.escape_time.is_none() && w.radius() > r_escape {
            // moving away from the origin in the direction of integration
            m.field(&w.x, &w.xi, &mut v, &mut tmp);
            if sign * dot(&w.x, &v) > 0.0 {
                out.escape_time = Some(t);
                if stop_on_escape {
                    break;
                }
            }
        }
    }
    out
}

/// Escape radius used when none is supplied: beyond where the built-in
/// metrics differ from the identity by more than about `e^{-16}`.
pub fn default_escape_radius(metric: &MetricSpec, w0: &PhaseSpacePoint) -> f64 {
    let support = match metric.kind {
        MetricKind::Identity => 0.0,
        _ if metric.amplitude == 0.0 => 0.0,
        MetricKind::ConformalBump => 4.0 * metric.width,
        _ => 2.0 * metric.width,
    };
    support.max(w0.radius()) + 1.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    pub dt: f64,
    pub r_escape: Option<f64>,
    /// End each time direction at the first escape.
    pub stop_on_escape: bool,
    pub exec: Exec,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            dt: 0.01,
            r_escape: None,
            stop_on_escape: false,
            exec: Exec::default(),
        }
    }
}

fn integrate(metric: &MetricSpec, w0: &PhaseSpacePoint, t_max: f64, opts: &FlowOptions) -> Result<Trajectory> {
    let m = Conformal::new(metric)?;
    if w0.x.len() != w0.xi.len() || w0.x.is_empty() {
        return Err(Error::InvalidParameter("x and xi must have the same positive length".into()));
    }
    if !w0.is_finite() {
        return Err(Error::InvalidParameter("non-finite phase-space point".into()));
    }
    if !(m.p(w0) > 0.0) {
        return Err(Error::InvalidParameter("p(w0) must be positive".into()));
    }
    if !(t_max > 0.0) || !(opts.dt > 0.0) {
        return Err(Error::InvalidParameter("t_max and dt must be positive".into()));
    }
    let r_escape = opts.r_escape.unwrap_or_else(|| default_escape_radius(metric, w0));
    let mut dt = opts.dt.min(t_max);
    let mut last = None;
    for attempt in 0..=MAX_HALVINGS {
        let fwd = leg(&m, w0, t_max, dt, 1.0, r_escape, opts.stop_on_escape);
        let bwd = leg(&m, w0, t_max, dt, -1.0, r_escape, opts.stop_on_escape);
        let failed = fwd.failed || bwd.failed;
        let escape_time = match (fwd.escape_time, bwd.escape_time) {
            (Some(a), Some(b)) => Some(if a <= -b { a } else { b }),
            (a, b) => a.or(b),
        };
        let classification = if failed {
            Classification::IntegratorFailure
        } else if escape_time.is_some() {
            Classification::Escaped
        } else {
            Classification::TrappedUpToT
        };
        let mut points: Vec<(f64, PhaseSpacePoint)> = bwd.points.into_iter().skip(1).rev().collect();
        let mut p_values: Vec<f64> = bwd.p_values.into_iter().skip(1).rev().collect();
        points.extend(fwd.points);
        p_values.extend(fwd.p_values);
        let traj = Trajectory {
            points,
            p_values,
            classification,
            escape_time,
            dt_used: dt,
            max_p_drift: fwd.max_drift.max(bwd.max_drift),
            r_escape,
            t_max,
        };
        if !failed {
            return Ok(traj);
        }
        log::debug!("flow: conservation gate failed at dt = {dt} (attempt {attempt})");
        last = Some(traj);
        dt *= 0.5;
    }
    Ok(last.unwrap())
}

/// Integrates the flow forward and backward over `|t| ≤ t_max`, halving
/// `dt` up to four times until `p` is conserved to the gate.
pub fn flow(metric: &MetricSpec, w0: &PhaseSpacePoint, t_max: f64, dt: f64) -> Result<Trajectory> {
    integrate(
        metric,
        w0,
        t_max,
        &FlowOptions {
            dt,
            ..FlowOptions::default()
        },
    )
}

pub fn flow_with(metric: &MetricSpec, w0: &PhaseSpacePoint, t_max: f64, opts: &FlowOptions) -> Result<Trajectory> {
    integrate(metric, w0, t_max, opts)
}

/// Endpoint of the flow at signed time `t` with fixed step `dt`, no gate.
pub fn flow_to(metric: &MetricSpec, w0: &PhaseSpacePoint, t: f64, dt: f64) -> Result<PhaseSpacePoint> {
    let m = Conformal::new(metric)?;
    if t == 0.0 {
        return Ok(w0.clone());
    }
    let d = w0.dim();
    let mut scratch = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let n = (t.abs() / dt).round().max(1.0) as usize;
    let h = t / n as f64;
    let mut w = w0.clone();
    for _ in 0..n {
        w = midpoint_step(&m, &w, h, &mut scratch).ok_or_else(|| {
            Error::Unsupported("implicit midpoint iteration did not converge".into())
        })?;
    }
    Ok(w)
}

/// Finite-horizon trapping classification. A trajectory counts as escaped
/// when it leaves the ball of radius `r_escape` moving outward in either
/// time direction, since bounded orbits must stay bounded for all `t`.
pub fn classify_trapped(
    metric: &MetricSpec,
    w0: &PhaseSpacePoint,
    t_max: f64,
    r_escape: f64,
) -> Result<Classification> {
    let opts = FlowOptions {
        r_escape: Some(r_escape),
        stop_on_escape: true,
        ..FlowOptions::default()
    };
    Ok(integrate(metric, w0, t_max, &opts)?.classification)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GccVerdict {
    Satisfied,
    Violated,
    Undecided,
    /// No sampled point was trapped.
    VacuouslySatisfied,
    /// Not trapped; the condition says nothing about this point.
    NotApplicable,
}

impl GccVerdict {
    pub fn describe(&self) -> &'static str {
        match self {
            GccVerdict::Satisfied => "satisfied",
            GccVerdict::Violated => "violated",
            GccVerdict::Undecided => "undecided",
            GccVerdict::VacuouslySatisfied => "GCC vacuously satisfied (no trapped samples)",
            GccVerdict::NotApplicable => "not applicable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GccPoint {
    pub classification: Classification,
    pub verdict: GccVerdict,
    /// Largest `a(X(t))` seen along the trajectory.
    pub max_damping: f64,
    /// Signed time at which `a(X(t))` first exceeded the threshold.
    pub hit_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GccReport {
    /// Always `"sampled GCC"`: only finitely many points are checked.
    pub label: String,
    pub n_samples: usize,
    pub n_trapped: usize,
    pub n_satisfied: usize,
    pub n_violated: usize,
    pub n_undecided: usize,
    pub t_max: f64,
    pub a_threshold: f64,
    pub points: Vec<GccPoint>,
    pub verdict: GccVerdict,
}

fn damping_at(damping: &DampingSpec, x: &[f64]) -> Result<f64> {
    damping
        .profile
        .eval(x)
        .ok_or_else(|| Error::Unsupported("tabulated damping cannot be evaluated off the grid".into()))
}

/// Sampled geometric control check: every trapped sample must reach
/// `{a > a_threshold}` within `|t| ≤ t_max`. Samples are rescaled to `p = 1`.
pub fn check_damping_condition(
    metric: &MetricSpec,
    damping: &DampingSpec,
    sample: &[PhaseSpacePoint],
    t_max: f64,
    a_threshold: f64,
    opts: &FlowOptions,
) -> Result<GccReport> {
    damping_at(damping, &vec![0.0; sample.first().map_or(1, |w| w.dim())])?;
    let normalized = sample
        .iter()
        .map(|w| normalize_energy(metric, w, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let flow_opts = FlowOptions {
        stop_on_escape: false,
        ..*opts
    };
    let results = par::map(opts.exec, &normalized, |w| -> Result<GccPoint> {
        let traj = integrate(metric, w, t_max, &flow_opts)?;
        let mut max_damping: f64 = 0.0;
        let mut hit_time: Option<f64> = None;
        for (t, p) in &traj.points {
            let a = damping_at(damping, &p.x)?;
            max_damping = max_damping.max(a);
            if a > a_threshold && hit_time.is_none_or(|h| t.abs() < h.abs()) {
                hit_time = Some(*t);
            }
        }
        let verdict = match traj.classification {
            Classification::Escaped => GccVerdict::NotApplicable,
            Classification::IntegratorFailure => GccVerdict::Undecided,
            Classification::TrappedUpToT if hit_time.is_some() => GccVerdict::Satisfied,
            Classification::TrappedUpToT => GccVerdict::Violated,
        };
        Ok(GccPoint {
            classification: traj.classification,
            verdict,
            max_damping,
            hit_time,
        })
    });
    let points = results.into_iter().collect::<Result<Vec<_>>>()?;
    let count = |v: GccVerdict| points.iter().filter(|p| p.verdict == v).count();
    let n_trapped = points
        .iter()
        .filter(|p| p.classification == Classification::TrappedUpToT)
        .count();
    let (n_satisfied, n_violated, n_undecided) = (
        count(GccVerdict::Satisfied),
        count(GccVerdict::Violated),
        count(GccVerdict::Undecided),
    );
    let verdict = if n_violated > 0 {
        GccVerdict::Violated
    } else if n_undecided > 0 {
        GccVerdict::Undecided
    } else if n_trapped == 0 {
        GccVerdict::VacuouslySatisfied
    } else {
        GccVerdict::Satisfied
    };
    Ok(GccReport {
        label: "sampled GCC".into(),
        n_samples: points.len(),
        n_trapped,
        n_satisfied,
        n_violated,
        n_undecided,
        t_max,
        a_threshold,
        points,
        verdict,
    })
}

/// Energy cutoff in the damping symbol `b = a² χ_α(|ξ|²)`: a smooth bump
/// centred at `r = 1`, supported in `(1/2, 3/2)`, scaled so that
/// `0 ≤ χ_α(r) ≤ r^{α/2}`.
pub fn chi_alpha(alpha: f64, r: f64) -> f64 {
    let s = (r - 1.0) / 0.5;
    if s.abs() >= 1.0 {
        return 0.0;
    }
    0.5f64.powf(alpha / 2.0) * (1.0 - 1.0 / (1.0 - s * s)).exp()
}

/// Correction term `f_c(x, ξ)` of an escape function.
pub type EscapeCorrection<'a> = &'a (dyn Fn(&[f64], &[f64]) -> f64 + Sync);

#[derive(Clone, Copy)]
pub struct EscapeProbe<'a> {
    pub f_c: Option<EscapeCorrection<'a>>,
    pub beta: f64,
    pub energy_window: (f64, f64),
    pub n_samples: usize,
    /// Samples have `|x| ≤ radius`.
    pub radius: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl<'a> EscapeProbe<'a> {
    pub fn new(n_samples: usize, radius: f64, seed: u64) -> Self {
        EscapeProbe {
            f_c: None,
            beta: 0.0,
            energy_window: (1.0, 1.0),
            n_samples,
            radius,
            seed,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeProbeReport {
    pub n_samples: usize,
    /// `min {p, f₀ + f_c} + β b` over the samples.
    pub min_value: f64,
    pub argmin: PhaseSpacePoint,
    /// `min_value / 3`.
    pub c0: f64,
    pub non_positive: bool,
    /// `χ_α(|ξ|²) ≤ |ξ|^α` held at every sample.
    pub chi_bound_ok: bool,
}

fn bracket_f0(m: &Conformal, x: &[f64], xi: &[f64], grad: &mut [f64]) -> f64 {
    // {p, x·ξ} = ∂_ξ p · ξ - ∂_x p · x = 2c|ξ|² - |ξ|² x·∇c
    let c = m.c(x);
    m.grad_c(x, grad);
    let k2 = dot(xi, xi);
    2.0 * c * k2 - k2 * dot(x, grad)
}

fn bracket_numeric(m: &Conformal, f: EscapeCorrection, x: &[f64], xi: &[f64]) -> f64 {
    let d = x.len();
    let (mut dx, mut dxi) = (vec![0.0; d], vec![0.0; d]);
    m.field(x, xi, &mut dx, &mut dxi);
    let h = 1e-5;
    let (mut xp, mut kp) = (x.to_vec(), xi.to_vec());
    let mut acc = 0.0;
    for i in 0..d {
        // ∂_ξ p · ∂_x f
        xp[i] = x[i] + h;
        let a = f(&xp, xi);
        xp[i] = x[i] - h;
        let b = f(&xp, xi);
        xp[i] = x[i];
        acc += dx[i] * (a - b) / (2.0 * h);
        // -∂_x p · ∂_ξ f, with -∂_x p = ξ̇
        kp[i] = xi[i] + h;
        let a = f(x, &kp);
        kp[i] = xi[i] - h;
        let b = f(x, &kp);
        kp[i] = xi[i];
        acc += dxi[i] * (a - b) / (2.0 * h);
    }
    acc
}

/// Samples `{p, f₀ + f_c} + β a² χ_α(|ξ|²)` with `f₀ = x·ξ` on
/// `{|x| ≤ R} ∩ p^{-1}(energy_window)` and reports its minimum.
pub fn escape_symbol_probe(
    metric: &MetricSpec,
    damping: &DampingSpec,
    probe: &EscapeProbe,
    dim: usize,
) -> Result<EscapeProbeReport> {
    let m = Conformal::new(metric)?;
    let (e0, e1) = probe.energy_window;
    if !(e0 > 0.0) || e1 < e0 || probe.n_samples == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "escape probe needs 0 < e0 <= e1, n_samples >= 1 and dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let samples: Vec<PhaseSpacePoint> = (0..probe.n_samples)
        .map(|_| {
            let x = uniform_ball(&mut rng, dim, probe.radius);
            let dir = uniform_ball(&mut rng, dim, 1.0);
            let e = if e1 > e0 { rng.random_range(e0..=e1) } else { e0 };
            let scale = (e / (m.c(&x) * dot(&dir, &dir))).sqrt();
            PhaseSpacePoint::new(x, dir.iter().map(|v| v * scale).collect())
        })
        .collect();
    let alpha = damping.alpha;
    let values = par::map(probe.exec, &samples, |w| -> Result<(f64, bool)> {
        let mut grad = vec![0.0; dim];
        let mut v = bracket_f0(&m, &w.x, &w.xi, &mut grad);
        if let Some(f) = probe.f_c {
            v += bracket_numeric(&m, f, &w.x, &w.xi);
        }
        let k2 = dot(&w.xi, &w.xi);
        let chi = chi_alpha(alpha, k2);
        let chi_ok = chi >= 0.0 && chi <= k2.powf(alpha / 2.0) + 1e-15;
        if probe.beta != 0.0 {
            let a = damping_at(damping, &w.x)?;
            v += probe.beta * a * a * chi;
        }
        Ok((v, chi_ok))
    });
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let (imin, &(min_value, _)) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .unwrap();
    Ok(EscapeProbeReport {
        n_samples: samples.len(),
        min_value,
        argmin: samples[imin].clone(),
        c0: min_value / 3.0,
        non_positive: min_value <= 0.0,
        chi_bound_ok: values.iter().all(|v| v.1),
    })
}

/// Uniform sample of the closed ball of radius `r` (never the zero vector
/// for `r > 0` with probability one).
fn uniform_ball(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&g);
    let u: f64 = rng.random();
    let rad = r * u.powf(1.0 / dim as f64);
    g.iter().map(|v| v / n * rad).collect()
}

/// Initial point on the stable circular orbit of a trapping well, moving
/// tangentially with `p = 1`.
pub fn trapping_ring_point(metric: &MetricSpec, dim: usize) -> Result<PhaseSpacePoint> {
    let r = metric.trapping_ring_radius().ok_or_else(|| {
        Error::InvalidParameter("metric has no closed circular geodesic (need trapping_well, amplitude > 0.83)".into())
    })?;
    if dim < 2 {
        return Err(Error::InvalidParameter("a circular orbit needs dim >= 2".into()));
    }
    let mut x = vec![0.0; dim];
    let mut xi = vec![0.0; dim];
    x[0] = r;
    xi[1] = 1.0;
    normalize_energy(metric, &PhaseSpacePoint::new(x, xi), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DampingProfile;

    #[test]
    fn flat_flow_is_a_straight_line() {
        let m = MetricSpec::identity();
        let w0 = PhaseSpacePoint::new(vec![0.3, -1.0], vec![0.6, 0.8]);
        let tr = flow(&m, &w0, 5.0, 0.05).unwrap();
        for (t, w) in &tr.points {
            for i in 0..2 {
                assert!((w.x[i] - (w0.x[i] + 2.0 * t * w0.xi[i])).abs() < 1e-9);
                assert!((w.xi[i] - w0.xi[i]).abs() < 1e-12);
            }
        }
        assert_eq!(tr.classification, Classification::Escaped);
    }

    #[test]
    fn bump_conserves_p() {
        let m = MetricSpec::conformal_bump(0.5, 1.0);
        let w0 = normalize_energy(&m, &PhaseSpacePoint::new(vec![-2.0, 0.4], vec![1.0, 0.0]), 1.0).unwrap();
        let tr = flow(&m, &w0, 50.0, 0.01).unwrap();
        assert_ne!(tr.classification, Classification::IntegratorFailure);
        assert!(tr.p_values.iter().all(|p| (p - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let m = MetricSpec::conformal_bump(0.4, 1.0);
        let w0 = PhaseSpacePoint::new(vec![-1.0, 0.5, 0.1], vec![0.7, -0.1, 0.2]);
        let w1 = flow_to(&m, &w0, 3.0, 0.01).unwrap();
        let back = flow_to(&m, &w1, -3.0, 0.01).unwrap();
        for i in 0..3 {
            assert!((back.x[i] - w0.x[i]).abs() < 1e-8);
            assert!((back.xi[i] - w0.xi[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn trapping_ring_stays_bounded() {
        let m = MetricSpec::trapping_well(0.95, 2.0);
        let w0 = trapping_ring_point(&m, 2).unwrap();
        let tr = flow(&m, &w0, 200.0, 0.01).unwrap();
        assert_eq!(tr.classification, Classification::TrappedUpToT);
        assert!(tr.max_radius() < 1.05 * w0.radius());
    }

    #[test]
    fn radial_escape_from_bump() {
        let m = MetricSpec::conformal_bump(0.5, 1.0);
        let w0 = PhaseSpacePoint::new(vec![6.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(classify_trapped(&m, &w0, 50.0, 8.0).unwrap(), Classification::Escaped);
    }

    #[test]
    fn gcc_on_flat_metric_is_vacuous() {
        let m = MetricSpec::identity();
        let sample = vec![
            PhaseSpacePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]),
            PhaseSpacePoint::new(vec![1.0, 1.0], vec![0.0, 2.0]),
        ];
        let r = check_damping_condition(&m, &DampingSpec::gaussian(1.0, 1.0, 0.0), &sample, 20.0, 0.1, &FlowOptions::default())
            .unwrap();
        assert_eq!(r.verdict, GccVerdict::VacuouslySatisfied);
        assert_eq!(r.verdict.describe(), "GCC vacuously satisfied (no trapped samples)");
    }

    #[test]
    fn gcc_on_and_off_the_ring() {
        let m = MetricSpec::trapping_well(0.95, 2.0);
        let w0 = trapping_ring_point(&m, 2).unwrap();
        let r0 = w0.radius();
        let on = DampingSpec {
            profile: DampingProfile::Ring {
                amplitude: 1.0,
                radius: r0,
                width: 0.3,
            },
            alpha: 0.0,
            rho: 1.0,
        };
        let off = DampingSpec {
            profile: DampingProfile::Gaussian {
                amplitude: 1.0,
                center: vec![10.0, 0.0],
                width: 0.5,
            },
            alpha: 0.0,
            rho: 1.0,
        };
        let opts = FlowOptions::default();
        let a = check_damping_condition(&m, &on, std::slice::from_ref(&w0), 50.0, 0.5, &opts).unwrap();
        let b = check_damping_condition(&m, &off, &[w0], 50.0, 0.5, &opts).unwrap();
        assert_eq!(a.verdict, GccVerdict::Satisfied);
        assert_eq!(b.verdict, GccVerdict::Violated);
    }

    #[test]
    fn flat_bracket_is_two() {
        let r = escape_symbol_probe(&MetricSpec::identity(), &DampingSpec::none(), &EscapeProbe::new(200, 3.0, 1), 3)
            .unwrap();
        assert!((r.min_value - 2.0).abs() < 1e-9);
        assert!(r.chi_bound_ok && !r.non_positive);
    }

    #[test]
    fn small_bump_bracket_near_two() {
        let r = escape_symbol_probe(
            &MetricSpec::conformal_bump(0.01, 1.0),
            &DampingSpec::none(),
            &EscapeProbe::new(500, 3.0, 2),
            2,
        )
        .unwrap();
        assert!((r.min_value - 2.0).abs() < 0.2);
    }

    #[test]
    fn trapping_bracket_goes_negative() {
        let m = MetricSpec::trapping_well(0.95, 2.0);
        let r = escape_symbol_probe(&m, &DampingSpec::none(), &EscapeProbe::new(2000, 3.0, 3), 2).unwrap();
        assert!(r.non_positive);
    }

    #[test]
    fn numeric_bracket_matches_analytic() {
        let m = MetricSpec::conformal_bump(0.3, 1.2);
        let c = Conformal::new(&m).unwrap();
        let f0 = |x: &[f64], xi: &[f64]| dot(x, xi);
        let x = [0.4, -0.3];
        let xi = [0.9, 0.2];
        let mut g = [0.0; 2];
        let a = bracket_f0(&c, &x, &xi, &mut g);
        let b = bracket_numeric(&c, &f0, &x, &xi);
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn chi_respects_bound() {
        for alpha in [0.0, 0.5, 1.0, 1.9] {
            for k in 0..=200 {
                let r = k as f64 * 0.01;
                assert!(chi_alpha(alpha, r) <= r.powf(alpha / 2.0) + 1e-15);
            }
            assert!((chi_alpha(alpha, 1.0) - 0.5f64.powf(alpha / 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_layout() {
        let tr = flow(&MetricSpec::identity(), &PhaseSpacePoint::new(vec![0.0], vec![1.0]), 0.1, 0.05).unwrap();
        let csv = tr.to_csv();
        assert!(csv.starts_with("t,x_1,xi_1,p\n"));
        assert_eq!(csv.lines().count(), 1 + tr.points.len());
    }
}
