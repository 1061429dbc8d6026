//! Scenario library, config files and verdict reports.
//!
//! A [`Scenario`] bundles a grid, a metric, a damping profile and the
//! parameters of one experiment. [`run_scenario`] dispatches on its kind and
//! returns a [`VerdictReport`] whose `report.json` and CSV artifacts are
//! byte-identical across runs with the same seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{Error, Result};
use crate::flow::{self, Classification, EscapeProbe, FlowOptions, GccVerdict, PhaseSpacePoint};
use crate::model::{self, assemble, DampedOperator, DampingProfile, DampingSpec, MetricSpec, WeightChoice};
use crate::par::{self, Exec};
use crate::propagator::{self, EvolutionConfig, Observable, Scheme, WrapGuard};
use crate::resolvent::{self, Regime, Resolvent, ResolventQuery, SweepOptions};
use crate::spectral::{self, ComplexField, DilationParams, Grid};

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Undecided,
    Fail,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Undecided => "undecided",
            Status::Fail => "fail",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    /// What the measurement is compared against, e.g. `[-1.7, -1.3]`.
    pub tolerance: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

impl Verdict {
    pub fn within(name: &str, measured: f64, lo: f64, hi: f64) -> Self {
        Verdict {
            name: name.into(),
            status: if measured >= lo && measured <= hi { Status::Pass } else { Status::Fail },
            measured,
            tolerance: format!("[{}, {}]", num(lo), num(hi)),
            detail: String::new(),
        }
    }

    pub fn at_most(name: &str, measured: f64, bound: f64) -> Self {
        Verdict {
            name: name.into(),
            status: if measured <= bound { Status::Pass } else { Status::Fail },
            measured,
            tolerance: format!("<= {}", num(bound)),
            detail: String::new(),
        }
    }

    pub fn below(name: &str, measured: f64, bound: f64) -> Self {
        Verdict {
            name: name.into(),
            status: if measured < bound { Status::Pass } else { Status::Fail },
            measured,
            tolerance: format!("< {}", num(bound)),
            detail: String::new(),
        }
    }

    pub fn at_least(name: &str, measured: f64, bound: f64) -> Self {
        Verdict {
            name: name.into(),
            status: if measured >= bound { Status::Pass } else { Status::Fail },
            measured,
            tolerance: format!(">= {}", num(bound)),
            detail: String::new(),
        }
    }

    pub fn flag(name: &str, ok: bool, expectation: &str) -> Self {
        Verdict {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            measured: if ok { 1.0 } else { 0.0 },
            tolerance: expectation.into(),
            detail: String::new(),
        }
    }

    pub fn undecided(name: &str, why: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            status: Status::Undecided,
            measured: f64::NAN,
            tolerance: String::new(),
            detail: why.into(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub status: Status,
    pub out_of_hypothesis: Vec<String>,
    pub warnings: Vec<String>,
    pub measurements: Vec<Measurement>,
    pub verdicts: Vec<Verdict>,
    pub diagnostics: BTreeMap<String, Json>,
    /// File names of the CSV artifacts.
    pub artifacts: Vec<String>,
    #[serde(skip)]
    pub csv: Vec<(String, String)>,
}

impl VerdictReport {
    pub fn new(scenario: &str, kind: ScenarioKind) -> Self {
        VerdictReport {
            scenario: scenario.into(),
            kind,
            status: Status::Pass,
            out_of_hypothesis: Vec::new(),
            warnings: Vec::new(),
            measurements: Vec::new(),
            verdicts: Vec::new(),
            diagnostics: BTreeMap::new(),
            artifacts: Vec::new(),
            csv: Vec::new(),
        }
    }

    /// Records a finite measurement; non-finite values are dropped.
    pub fn measure(&mut self, name: &str, value: f64) {
        if !value.is_finite() {
            return;
        }
        self.measurements.push(Measurement {
            name: name.into(),
            value,
        });
    }

    pub fn verdict(&mut self, v: Verdict) {
        self.verdicts.push(v);
    }

    pub fn diag(&mut self, key: &str, v: Json) {
        self.diagnostics.insert(key.into(), v);
    }

    pub fn attach_csv(&mut self, name: &str, content: String) {
        self.artifacts.push(name.into());
        self.csv.push((name.into(), content));
    }

    /// Turns every pass into undecided, recording the reason.
    pub fn demote(&mut self, reason: &str) {
        for v in &mut self.verdicts {
            if v.status == Status::Pass {
                v.status = Status::Undecided;
                if v.detail.is_empty() {
                    v.detail = reason.into();
                } else {
                    v.detail = format!("{}; {reason}", v.detail);
                }
            }
        }
        self.warnings.push(format!("demoted to undecided: {reason}"));
    }

    fn finish(mut self) -> Self {
        self.status = self.verdicts.iter().map(|v| v.status).max().unwrap_or(Status::Undecided);
        self
    }

    pub fn verdict_named(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn measurement(&self, name: &str) -> Option<f64> {
        self.measurements.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `report.json` and the CSV artifacts into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()?)?;
        written.push(path);
        for (name, content) in &self.csv {
            let path = dir.join(name);
            std::fs::write(&path, content)?;
            written.push(path);
        }
        Ok(written)
    }
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LocalEnergyDecay,
    Smoothing,
    Resolvent,
    Structural,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub n: usize,
    pub half_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    /// `exp(-|x - center|²/(2 width²) + i momentum·x)`.
    Gaussian {
        #[serde(default)]
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        momentum: Vec<f64>,
    },
    /// Seeded ensemble of Gaussian packets with random momentum direction,
    /// phase and centre offset.
    RandomPackets {
        count: usize,
        width: f64,
        momentum: f64,
        #[serde(default)]
        center_spread: f64,
    },
}

fn one() -> usize {
    1
}
fn default_wrap_threshold() -> f64 {
    1e-6
}
fn default_wrap_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSection {
    pub dt: f64,
    pub t_max: f64,
    pub delta: f64,
    pub fit_start: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub krylov_dim: Option<usize>,
    /// Accepted slope interval; defaults to `-d/2 ± 0.15`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_band: Option<[f64; 2]>,
    #[serde(default = "default_wrap_threshold")]
    pub wrap_threshold: f64,
    #[serde(default = "default_wrap_fraction")]
    pub wrap_fraction: f64,
    /// Report an out-of-band slope as undecided instead of failed.
    #[serde(default)]
    pub undecided_out_of_band: bool,
    /// Extra runs with data `<D>^{-σ} u₀`, recorded without a gate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compare_sigma: Vec<f64>,
}

fn default_smoothing_tol() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSection {
    /// Defaults to `α̃`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub dt: f64,
    /// The integral is compared at `t_max` and `2 t_max`.
    pub t_max: f64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub krylov_dim: Option<usize>,
    #[serde(default = "default_smoothing_tol")]
    pub tolerance: f64,
}

fn default_eta() -> f64 {
    0.01
}
fn yes() -> bool {
    true
}
fn default_slope_tol() -> f64 {
    0.15
}
fn default_solver_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventSection {
    pub regime: Regime,
    #[serde(default)]
    pub n: usize,
    pub delta: f64,
    /// Range `a:b:logstepR` or list `a,b,c` of `τ`, giving `z = τ(1 + iη)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<String>,
    /// Explicit `[re, im]` points, used in addition to `z`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub z_points: Vec<[f64; 2]>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "yes")]
    pub non_trapping: bool,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_slope_tol")]
    pub slope_tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_band: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_bound: Option<f64>,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
}

impl ResolventSection {
    pub fn z_list(&self) -> Result<Vec<C64>> {
        let mut out = match &self.z {
            Some(spec) => parse_tau_spec(spec)?
                .into_iter()
                .map(|t| C64::new(t, self.eta * t))
                .collect(),
            None => Vec::new(),
        };
        out.extend(self.z_points.iter().map(|p| C64::new(p[0], p[1])));
        if out.is_empty() {
            return Err(Error::Config("resolvent section needs `z` or `z_points`".into()));
        }
        Ok(out)
    }
}

/// Parses `a:b:logstepR` (geometric, ratio `R`), `a:b:stepS` (arithmetic)
/// or a comma-separated list.
pub fn parse_tau_spec(spec: &str) -> Result<Vec<f64>> {
    let bad = |what: &str| Error::Config(format!("bad z range '{spec}': {what}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("'{s}' is not a number")));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.len() {
        1 => spec.split(',').map(num).collect(),
        3 => {
            let (a, b) = (num(parts[0])?, num(parts[1])?);
            if !(a > 0.0) || b < a {
                return Err(bad("need 0 < start <= end"));
            }
            let mut out = Vec::new();
            if let Some(r) = parts[2].trim().strip_prefix("logstep") {
                let r = num(r)?;
                if !(r > 1.0) {
                    return Err(bad("log step must exceed 1"));
                }
                let mut k = 0;
                loop {
                    let t = a * r.powi(k);
                    if t > b * (1.0 + 1e-12) {
                        break;
                    }
                    out.push(t);
                    k += 1;
                }
            } else if let Some(s) = parts[2].trim().strip_prefix("step") {
                let s = num(s)?;
                if !(s > 0.0) {
                    return Err(bad("step must be positive"));
                }
                let mut k = 0;
                loop {
                    let t = a + s * k as f64;
                    if t > b * (1.0 + 1e-12) {
                        break;
                    }
                    out.push(t);
                    k += 1;
                }
            } else {
                return Err(bad("third field must be logstepR or stepS"));
            }
            Ok(out)
        }
        _ => Err(bad("expected a:b:logstepR, a:b:stepS or a list")),
    }
}

fn default_samples() -> usize {
    100
}
fn default_quadratic_z() -> Vec<[f64; 2]> {
    vec![[0.5, 1.0], [2.0, 0.5], [-1.0, 0.3], [5.0, 1.0], [0.1, 0.1]]
}
fn default_trivial() -> usize {
    20
}
fn default_derivative_z() -> [f64; 2] {
    [1.5, 0.5]
}
fn default_orders() -> Vec<usize> {
    vec![0, 1, 2]
}
fn default_expansion_size() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_quadratic_z")]
    pub quadratic_z: Vec<[f64; 2]>,
    #[serde(default = "default_trivial")]
    pub trivial_samples: usize,
    #[serde(default = "default_derivative_z")]
    pub derivative_z: [f64; 2],
    #[serde(default = "default_orders")]
    pub expansion_orders: Vec<usize>,
    #[serde(default = "default_expansion_size")]
    pub expansion_size: usize,
    #[serde(default = "yes")]
    pub negative_control: bool,
}

impl Default for StructuralSection {
    fn default() -> Self {
        StructuralSection {
            samples: default_samples(),
            quadratic_z: default_quadratic_z(),
            trivial_samples: default_trivial(),
            derivative_z: default_derivative_z(),
            expansion_orders: default_orders(),
            expansion_size: default_expansion_size(),
            negative_control: true,
        }
    }
}

fn default_flow_t() -> f64 {
    200.0
}
fn default_flow_dt() -> f64 {
    0.01
}
fn default_gcc_t() -> f64 {
    50.0
}
fn default_a_threshold() -> f64 {
    0.5
}
fn default_probe_samples() -> usize {
    2000
}
fn default_probe_radius() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default = "default_flow_t")]
    pub t_max: f64,
    #[serde(default = "default_flow_dt")]
    pub dt: f64,
    #[serde(default = "default_gcc_t")]
    pub gcc_t_max: f64,
    #[serde(default = "default_a_threshold")]
    pub a_threshold: f64,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default = "default_probe_radius")]
    pub probe_radius: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            t_max: default_flow_t(),
            dt: default_flow_dt(),
            gcc_t_max: default_gcc_t(),
            a_threshold: default_a_threshold(),
            probe_samples: default_probe_samples(),
            probe_radius: default_probe_radius(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub weight: WeightChoice,
    pub grid: GridSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub damping: DampingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolution: Option<EvolutionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<SmoothingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent: Option<ResolventSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structural: Option<StructuralSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
}

/// Everything a run needs besides the scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunContext {
    pub seed: u64,
    /// Multiplies every pass tolerance.
    pub tol_scale: f64,
    pub exec: Exec,
}

impl Default for RunContext {
    fn default() -> Self {
        RunContext {
            seed: 42,
            tol_scale: 1.0,
            exec: Exec::default(),
        }
    }
}

impl Scenario {
    fn base(id: &str, kind: ScenarioKind, description: &str, dim: usize, n: usize, half_length: f64) -> Self {
        Scenario {
            id: id.into(),
            kind,
            description: description.into(),
            weight: WeightChoice::Unit,
            grid: GridSpec { dim, n, half_length },
            metric: MetricSpec::identity(),
            damping: DampingSpec::none(),
            initial: None,
            evolution: None,
            smoothing: None,
            resolvent: None,
            structural: None,
            flow: None,
        }
    }

    pub fn make_grid(&self, exec: Exec) -> Result<Arc<Grid>> {
        Ok(Arc::new(
            Grid::new(self.grid.dim, self.grid.n, self.grid.half_length)?.with_exec(exec),
        ))
    }

    pub fn make_operator(&self, grid: &Arc<Grid>) -> Result<DampedOperator> {
        assemble(grid, &self.metric, &self.damping, self.weight, None)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parameter rules of the targeted estimate that this scenario breaks.
    pub fn hypothesis_violations(&self) -> Vec<String> {
        let d = self.grid.dim;
        let mut out = Vec::new();
        match self.kind {
            ScenarioKind::LocalEnergyDecay => {
                if let Some(e) = &self.evolution {
                    let need = model::kappa(d) + 0.5;
                    if !(e.delta > need) {
                        out.push(format!("delta = {} does not exceed kappa + 1/2 = {need}", e.delta));
                    }
                }
            }
            ScenarioKind::Resolvent => {
                if let Some(r) = &self.resolvent {
                    let n = r.n as f64;
                    let need = match r.regime {
                        Regime::Intermediate | Regime::High => Some(n + 0.5),
                        Regime::Low if 2 * r.n + 1 < d => Some(n + 1.0),
                        Regime::Low => Some(n + 0.5),
                        Regime::SharpLow => None,
                    };
                    if let Some(need) = need {
                        if !(r.delta > need) {
                            out.push(format!("delta = {} does not exceed {need}", r.delta));
                        }
                    }
                    if r.regime == Regime::SharpLow && (r.n != 0 || r.delta < 1.0) {
                        out.push("sharp low-frequency estimate covers n = 0 with weight <x>^-1".into());
                    }
                }
            }
            _ => {}
        }
        out
    }
}

fn builtin_list() -> Vec<Scenario> {
    let mut v = Vec::new();

    let mut s = Scenario::base(
        "free3d-decay",
        ScenarioKind::LocalEnergyDecay,
        "free evolution of a unit Gaussian in d = 3, weighted local energy decay",
        3,
        64,
        24.0,
    );
    s.initial = Some(InitialData::Gaussian {
        center: vec![],
        width: 1.0,
        momentum: vec![],
    });
    s.evolution = Some(EvolutionSection {
        dt: 0.05,
        t_max: 6.0,
        delta: 2.6,
        fit_start: 2.0,
        scheme: Scheme::StrangSplit,
        record_every: 2,
        krylov_dim: None,
        slope_band: Some([-1.7, -1.3]),
        wrap_threshold: 1e-6,
        wrap_fraction: 0.1,
        undecided_out_of_band: false,
        compare_sigma: vec![],
    });
    v.push(s.clone());

    let mut b = s.clone();
    b.id = "bump3d-damped-decay".into();
    b.description = "local energy decay with a conformal bump and short-range damping, d = 3".into();
    b.metric = MetricSpec::conformal_bump(0.3, 1.5);
    b.damping = DampingSpec::gaussian(0.5, 1.5, 1.0);
    if let Some(e) = b.evolution.as_mut() {
        // the faster speed inside the bump reaches the boundary earlier
        e.fit_start = 1.2;
        e.record_every = 1;
        e.undecided_out_of_band = true;
    }
    v.push(b);

    let mut s = Scenario::base(
        "free1d-decay",
        ScenarioKind::LocalEnergyDecay,
        "d = 1 sanity run outside the hypotheses, expected slope near -1/2",
        1,
        512,
        200.0,
    );
    s.initial = Some(InitialData::Gaussian {
        center: vec![],
        width: 1.0,
        momentum: vec![],
    });
    s.evolution = Some(EvolutionSection {
        dt: 0.1,
        t_max: 40.0,
        delta: 1.6,
        fit_start: 5.0,
        scheme: Scheme::StrangSplit,
        record_every: 5,
        krylov_dim: None,
        slope_band: None,
        wrap_threshold: 1e-6,
        wrap_fraction: 0.1,
        undecided_out_of_band: false,
        compare_sigma: vec![],
    });
    v.push(s);

    let mut s = Scenario::base(
        "damped3d-smoothing",
        ScenarioKind::Smoothing,
        "smoothing integral of an ensemble of moving packets under fractional damping, d = 3",
        3,
        48,
        24.0,
    );
    s.damping = DampingSpec::gaussian(4.0, 2.0, 1.0);
    s.initial = Some(InitialData::RandomPackets {
        count: 10,
        width: 1.2,
        momentum: 1.5,
        center_spread: 0.5,
    });
    s.smoothing = Some(SmoothingSection {
        gamma: None,
        dt: 0.1,
        t_max: 4.0,
        record_every: 1,
        // the strong damping is stiff; a wider basis needs fewer substeps
        krylov_dim: Some(20),
        tolerance: 0.05,
    });
    v.push(s);

    let mut s = Scenario::base(
        "flat2d-high-freq",
        ScenarioKind::Resolvent,
        "high-frequency weighted resolvent norm, flat metric with damping, d = 2",
        2,
        256,
        20.0,
    );
    s.damping = DampingSpec::gaussian(1.0, 2.0, 1.0);
    s.resolvent = Some(ResolventSection {
        regime: Regime::High,
        n: 0,
        delta: 1.0,
        z: Some("4:100:logstep1.3".into()),
        z_points: vec![],
        eta: 0.01,
        non_trapping: true,
        epsilon: 0.0,
        slope_tolerance: 0.15,
        slope_band: None,
        ratio_bound: None,
        solver_tol: 1e-8,
    });
    v.push(s.clone());

    let mut l = s.clone();
    l.id = "sharp-low".into();
    l.description = "sharp low-frequency sweep of <x>^-1 R(z) <x>^-1 along arg z = pi/4, d = 2".into();
    if let Some(r) = l.resolvent.as_mut() {
        r.regime = Regime::SharpLow;
        r.z = Some("0.01:1:logstep1.7782794100389228".into());
        r.eta = 1.0;
        r.ratio_bound = Some(10.0);
    }
    v.push(l);

    let mut s = Scenario::base(
        "intermediate",
        ScenarioKind::Resolvent,
        "intermediate frequencies on an arc, bump metric with damping, d = 2",
        2,
        64,
        8.0,
    );
    s.metric = MetricSpec::conformal_bump(0.3, 1.0);
    s.damping = DampingSpec::gaussian(1.0, 1.0, 1.0);
    s.resolvent = Some(ResolventSection {
        regime: Regime::Intermediate,
        n: 0,
        delta: 1.0,
        z: None,
        z_points: (0..7)
            .map(|k| {
                let th = 0.15 + k as f64 * 0.15;
                [2.0 * f64::cos(th), 2.0 * f64::sin(th)]
            })
            .collect(),
        eta: 0.01,
        non_trapping: true,
        epsilon: 0.0,
        slope_tolerance: 0.15,
        slope_band: None,
        ratio_bound: Some(50.0),
        solver_tol: 1e-8,
    });
    v.push(s);

    let mut s = Scenario::base(
        "trapping2d-gcc",
        ScenarioKind::Flow,
        "classical flow checks: flat lines, bump conservation, trapping ring and damping condition",
        2,
        64,
        8.0,
    );
    s.metric = MetricSpec::trapping_well(0.95, 2.0);
    s.flow = Some(FlowSection::default());
    v.push(s);

    let mut s = Scenario::base(
        "structural-flat",
        ScenarioKind::Structural,
        "structural identities on the free flat operator, d = 1",
        1,
        64,
        8.0,
    );
    s.structural = Some(StructuralSection::default());
    v.push(s);

    let mut s = Scenario::base(
        "structural-bump",
        ScenarioKind::Structural,
        "structural identities with a conformal bump and fractional damping, d = 2",
        2,
        32,
        6.0,
    );
    s.metric = MetricSpec::conformal_bump(0.5, 1.0);
    s.damping = DampingSpec::gaussian(1.0, 1.0, 1.0);
    s.structural = Some(StructuralSection::default());
    v.push(s);

    v
}

/// Names of the built-in scenarios.
pub fn builtin_names() -> Vec<String> {
    builtin_list().into_iter().map(|s| s.id).collect()
}

pub fn builtin(name: &str) -> Option<Scenario> {
    builtin_list().into_iter().find(|s| s.id == name)
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    builtin_list()
}

// ---------------------------------------------------------------------------
// Config files and overrides

/// Sets `path = raw` inside a TOML table, creating intermediate tables.
/// `raw` is read as a TOML value when possible and as a string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{k}' is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Loads `builtin:NAME` or a TOML file and applies `key=value` overrides.
pub fn load_scenario(source: &str, overrides: &[String]) -> Result<Scenario> {
    let mut table: toml::Table = if let Some(name) = source.strip_prefix("builtin:") {
        let s = builtin(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown built-in scenario '{name}' (known: {})",
                builtin_names().join(", ")
            ))
        })?;
        toml::Table::try_from(&s).map_err(|e| Error::Config(e.to_string()))?
    } else {
        let text = std::fs::read_to_string(source)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{source}: {e}")))?
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let s: Scenario = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// Initial data

fn gaussian_field(grid: &Arc<Grid>, center: &[f64], width: f64, momentum: &[f64], phase: f64) -> ComplexField {
    let d = grid.dim();
    let c = |i: usize| center.get(i).copied().unwrap_or(0.0);
    let k = |i: usize| momentum.get(i).copied().unwrap_or(0.0);
    ComplexField::from_fn(grid, |x| {
        let mut r2 = 0.0;
        let mut ph = phase;
        for (i, xi) in x.iter().enumerate().take(d) {
            r2 += (xi - c(i)).powi(2);
            ph += k(i) * xi;
        }
        C64::from_polar((-r2 / (2.0 * width * width)).exp(), ph)
    })
}

/// Materializes the initial data recipe; ensembles draw from `seed`.
pub fn initial_fields(recipe: &InitialData, grid: &Arc<Grid>, seed: u64) -> Result<Vec<ComplexField>> {
    let d = grid.dim();
    match recipe {
        InitialData::Gaussian {
            center,
            width,
            momentum,
        } => {
            if !(*width > 0.0) || center.len() > d || momentum.len() > d {
                return Err(Error::Config("gaussian needs width > 0 and vectors of length <= dim".into()));
            }
            Ok(vec![gaussian_field(grid, center, *width, momentum, 0.0)])
        }
        InitialData::RandomPackets {
            count,
            width,
            momentum,
            center_spread,
        } => {
            if !(*width > 0.0) || *count == 0 {
                return Err(Error::Config("random_packets needs count >= 1 and width > 0".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(*count);
            for _ in 0..*count {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let k: Vec<f64> = dir.iter().map(|v| v / norm * momentum).collect();
                let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0) * center_spread).collect();
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                out.push(gaussian_field(grid, &c, *width, &k, phase));
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Drivers

fn stamp(report: &mut VerdictReport, s: &Scenario, op: &DampedOperator) {
    report.out_of_hypothesis.extend(op.audit().out_of_hypothesis.iter().cloned());
    report.out_of_hypothesis.extend(s.hypothesis_violations());
    report.warnings.extend(op.audit().warnings.iter().cloned());
    for w in &report.out_of_hypothesis {
        log::warn!("{}: out of hypothesis: {w}", s.id);
    }
    report.diag(
        "audit",
        json!({
            "metric_c0": op.audit().metric_c0,
            "metric_c1": op.audit().metric_c1,
            "damping_c0": op.audit().damping_c0,
            "damping_c1": op.audit().damping_c1,
        }),
    );
}

/// Runs any scenario.
pub fn run_scenario(s: &Scenario, ctx: &RunContext) -> Result<VerdictReport> {
    match s.kind {
        ScenarioKind::LocalEnergyDecay => run_local_energy_decay(s, ctx),
        ScenarioKind::Smoothing => run_smoothing(s, ctx),
        ScenarioKind::Resolvent => run_resolvent_regime(s, ctx),
        ScenarioKind::Structural => run_structural_suite(s, ctx),
        ScenarioKind::Flow => run_flow_checks(s, ctx),
    }
}

/// Runs several scenarios concurrently; results keep the input order.
pub fn run_all(scenarios: &[Scenario], ctx: &RunContext) -> Vec<Result<VerdictReport>> {
    par::map(ctx.exec, scenarios, |s| run_scenario(s, ctx))
}

fn section<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("scenario is missing its [{name}] section")))
}

/// Fits the decay exponent of `‖<x>^{-δ} u(t)‖` before the wave reaches
/// the boundary of the box.
pub fn run_local_energy_decay(s: &Scenario, ctx: &RunContext) -> Result<VerdictReport> {
    let e = section(&s.evolution, "evolution")?;
    let recipe = section(&s.initial, "initial")?;
    let grid = s.make_grid(ctx.exec)?;
    let op = s.make_operator(&grid)?;
    let mut report = VerdictReport::new(&s.id, s.kind);
    stamp(&mut report, s, &op);
    let d = grid.dim() as f64;
    let u0 = initial_fields(recipe, &grid, ctx.seed)?.remove(0);
    if let InitialData::Gaussian { width, .. } = recipe {
        if e.fit_start < 5.0 * width * width {
            report.warnings.push(format!(
                "fit window starts at t = {} < 5 width^2 = {}",
                e.fit_start,
                5.0 * width * width
            ));
        }
    }
    let band = e.slope_band.unwrap_or([-d / 2.0 - 0.15, -d / 2.0 + 0.15]);
    let centre = 0.5 * (band[0] + band[1]);
    let half = 0.5 * (band[1] - band[0]) * ctx.tol_scale;
    let (lo, hi) = (centre - half, centre + half);
    report.measure("target_slope", -d / 2.0);

    let cfg = EvolutionConfig {
        dt: e.dt,
        t_max: e.t_max,
        scheme: e.scheme,
        record_every: e.record_every,
        observables: vec![Observable::LocalEnergy { delta: e.delta }],
        wrap_guard: Some(WrapGuard {
            threshold: e.wrap_threshold,
            fraction: e.wrap_fraction,
            stop: true,
        }),
        krylov_dim: e.krylov_dim,
    };
    let ev = match propagator::evolve(&op, &u0, &cfg) {
        Ok(ev) => ev,
        Err(err) => {
            report.verdict(Verdict::undecided("decay_slope", format!("evolution aborted: {err}")));
            report.diag("evolution_error", json!(err.to_string()));
            return Ok(report.finish());
        }
    };
    let series = &ev.series[0];
    report.attach_csv("local_energy.csv", series.to_csv(&s.id));
    let t_end = series.times.last().copied().unwrap_or(0.0);
    report.diag(
        "boundary",
        json!({
            "wrap_time": ev.wrap_time,
            "max_boundary_mass_recorded": ev.max_boundary_mass,
            "threshold": e.wrap_threshold,
            "fraction": e.wrap_fraction,
        }),
    );
    report.diag("max_step_growth", json!(ev.max_step_growth));
    report.diag("steps", json!(ev.steps));
    if let Some(tw) = ev.wrap_time {
        report.measure("t_wrap", tw);
    }
    match propagator::fit_decay_exponent(series, (e.fit_start, t_end)) {
        Ok(fit) => {
            report.measure("slope", fit.slope);
            report.measure("r_squared", fit.r_squared);
            report.measure("fit_t_start", fit.t_start);
            report.measure("fit_t_end", fit.t_end);
            report.diag("fit_points", json!(fit.n_points));
            let mut v = Verdict::within("decay_slope", fit.slope, lo, hi)
                .with_detail(format!("r^2 = {:.6}, {} points", fit.r_squared, fit.n_points));
            if v.status == Status::Fail && e.undecided_out_of_band {
                v.status = Status::Undecided;
                v.detail = format!(
                    "{}; outside the band, see boundary diagnostics (max boundary mass {:.3e})",
                    v.detail, ev.max_boundary_mass
                );
            }
            report.verdict(v);
        }
        Err(err) => {
            report.verdict(Verdict::undecided("decay_slope", format!("fit rejected: {err}")));
        }
    }
    if ev.wrap_time.is_none() && cfg.wrap_guard.is_some() {
        report.warnings.push("wave packet did not reach the boundary before t_max".into());
    }
    for &sigma in &e.compare_sigma {
        let mut v = u0.values().to_vec();
        spectral::multiply_in_fourier_real(&grid, &mut v, &grid.symbol_bracket_power(-sigma));
        let us = u0.with_values(v);
        let key = format!("slope_sigma_{sigma}");
        match propagator::evolve(&op, &us, &cfg)
            .and_then(|ev| {
                let t_end = ev.series[0].times.last().copied().unwrap_or(0.0);
                propagator::fit_decay_exponent(&ev.series[0], (e.fit_start, t_end))
            }) {
            Ok(fit) => report.measure(&key, fit.slope),
            Err(err) => {
                report.diag(&key, json!(err.to_string()));
            }
        }
    }
    Ok(report.finish())
}

/// Truncated smoothing integrals at `t_max` and `2 t_max` over the
/// initial-data ensemble.
pub fn run_smoothing(s: &Scenario, ctx: &RunContext) -> Result<VerdictReport> {
    let sec = section(&s.smoothing, "smoothing")?;
    let recipe = section(&s.initial, "initial")?;
    let grid = s.make_grid(ctx.exec)?;
    let op = s.make_operator(&grid)?;
    let mut report = VerdictReport::new(&s.id, s.kind);
    stamp(&mut report, s, &op);
    let gamma = sec.gamma.unwrap_or(op.alpha_tilde());
    report.measure("gamma", gamma);
    let fields = initial_fields(recipe, &grid, ctx.seed)?;
    let mut cfg = EvolutionConfig::new(sec.dt, 2.0 * sec.t_max).record_every(sec.record_every);
    cfg.krylov_dim = sec.krylov_dim;
    let results = par::map(ctx.exec, &fields, |u| propagator::smoothing_integral(&op, u, gamma, &cfg));
    let mut csv = String::from("t,value,observable,scenario_id\n");
    let mut members = Vec::new();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                let r1 = r.ratio_at(sec.t_max);
                let r2 = r.ratio;
                let change = if r1 > 0.0 { (r2 - r1).abs() / r1 } else { 0.0 };
                worst = worst.max(change);
                r.series.csv_rows(&format!("{}/{k}", s.id), &mut csv);
                members.push(json!({
                    "member": k,
                    "ratio_t_max": r1,
                    "ratio_2t_max": r2,
                    "relative_change": change,
                    "final_quarter_increment": r.final_quarter_increment,
                }));
            }
            Err(e) => failures.push(format!("member {k}: {e}")),
        }
    }
    report.attach_csv("smoothing.csv", csv);
    report.diag("members", Json::Array(members));
    report.measure("max_relative_change", worst);
    report.measure("ensemble_size", fields.len() as f64);
    if failures.is_empty() {
        report.verdict(
            Verdict::below("ratio_change_on_doubling", worst, sec.tolerance * ctx.tol_scale)
                .with_detail(format!("t_max = {}, doubled to {}", sec.t_max, 2.0 * sec.t_max)),
        );
    } else {
        report.diag("evolution_errors", json!(failures));
        report.verdict(Verdict::undecided("ratio_change_on_doubling", "some evolutions aborted"));
    }
    Ok(report.finish())
}

/// Weighted resolvent norms along a sweep of spectral parameters, checked
/// against the envelope of the regime.
pub fn run_resolvent_regime(s: &Scenario, ctx: &RunContext) -> Result<VerdictReport> {
    let sec = section(&s.resolvent, "resolvent")?;
    let grid = s.make_grid(ctx.exec)?;
    let op = s.make_operator(&grid)?;
    let mut report = VerdictReport::new(&s.id, s.kind);
    stamp(&mut report, s, &op);
    let z_list = sec.z_list()?;
    let mut template = ResolventQuery::symmetric(z_list[0], sec.n, sec.delta);
    template.solver_tol = sec.solver_tol;
    template.seed = ctx.seed;
    let opts = SweepOptions {
        non_trapping: sec.non_trapping,
        epsilon: sec.epsilon,
        exec: ctx.exec,
    };
    let table = resolvent::frequency_sweep(&op, sec.regime, &template, &z_list, &opts)?;
    report.attach_csv("sweep.csv", table.to_csv());
    report.measure("slope", table.slope);
    report.measure("r_squared", table.r_squared);
    report.measure("envelope_slope", table.envelope_slope);
    report.measure("max_min_ratio", table.max_min_ratio);
    report.measure("envelope_ratio", table.envelope_ratio);
    let residual_max = table.rows.iter().map(|r| r.residual_max).fold(0.0, f64::max);
    let errors: Vec<String> = table.rows.iter().filter_map(|r| r.error.clone()).collect();
    let all_converged = table.rows.iter().all(|r| r.converged);
    report.diag("solver_residual_max", json!(residual_max));
    report.diag("all_converged", json!(all_converged));
    report.diag("points", json!(table.rows.len()));
    if !errors.is_empty() {
        report.diag("solve_errors", json!(errors));
    }
    match sec.regime {
        Regime::High => {
            let (lo, hi) = match sec.slope_band {
                Some([a, b]) => {
                    let c = 0.5 * (a + b);
                    let h = 0.5 * (b - a) * ctx.tol_scale;
                    (c - h, c + h)
                }
                None => {
                    let h = sec.slope_tolerance * ctx.tol_scale;
                    (table.envelope_slope - h, table.envelope_slope + h)
                }
            };
            report.verdict(Verdict::within("high_frequency_slope", table.slope, lo, hi));
        }
        Regime::Intermediate | Regime::SharpLow => {
            let default = if sec.regime == Regime::Intermediate { 50.0 } else { 10.0 };
            let bound = sec.ratio_bound.unwrap_or(default) * ctx.tol_scale;
            report.verdict(Verdict::below("max_min_ratio", table.max_min_ratio, bound));
        }
        Regime::Low => {
            let bound = sec.ratio_bound.unwrap_or(10.0) * ctx.tol_scale;
            report.verdict(Verdict::below("envelope_ratio", table.envelope_ratio, bound));
        }
    }
    if !errors.is_empty() || !all_converged {
        report.demote("some resolvent solves or power iterations did not converge");
    }
    Ok(report.finish())
}

/// Largest `‖R(z) f‖ · max(Im z, -Re z) / ‖f‖` over random `(z, f)`, in
/// the reference-measure norm.
pub fn trivial_bound_check(op: &DampedOperator, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = op.grid().clone();
    let mut worst: f64 = 0.0;
    for k in 0..samples {
        let z = C64::new(rng.random_range(-2.0..5.0), rng.random_range(0.05..2.0));
        let f = model::random_field(&grid, seed.wrapping_add(7919 * (k as u64 + 1)));
        let r = Resolvent::new(op, z, 1e-11, 20_000)?;
        let u = r.apply(f.values())?.u;
        let nu = op.inner_w_raw(&u, &u).re.sqrt();
        let nf = op.inner_w_raw(f.values(), f.values()).re.sqrt();
        worst = worst.max(nu * z.im.max(-z.re) / nf);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilationLawRow {
    pub dim: usize,
    pub scale: f64,
    pub p: f64,
    pub measured: f64,
    pub predicted: f64,
    pub grid_exact: bool,
}

impl DilationLawRow {
    pub fn error(&self) -> f64 {
        (self.measured - self.predicted).abs() / self.predicted
    }
}

fn lp(v: &[C64], p: f64, cell: f64) -> f64 {
    spectral::lp_norm(v, p, cell)
}

/// Measured `‖e^{iθA} f‖_p / ‖f‖_p` against `e^{θ(d/2 - d/p)}`.
///
/// Grid-exact rows use `e^θ ∈ {2, 4}` and fields that are constant on
/// `e^θ`-blocks inside the central `1/e^θ` of the box, for which the
/// quadrature identity is exact. Interpolated rows use a narrow Gaussian
/// and `e^θ ∈ {1.5, 0.75}`.
pub fn dilation_law_check(seed: u64) -> Result<Vec<DilationLawRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (dim, n, l) in [(1usize, 64usize, 8.0), (2, 32, 4.0)] {
        let grid = Arc::new(Grid::new(dim, n, l)?);
        let cell = grid.cell_volume();
        for scale in [2usize, 4] {
            let lo = n / 2 - n / (2 * scale);
            let hi = n / 2 + n / (2 * scale);
            let mut idx = vec![0usize; dim];
            let block_vals: Vec<C64> = (0..grid.len())
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let values: Vec<C64> = (0..grid.len())
                .map(|flat| {
                    grid.multi_index(flat, &mut idx);
                    if idx.iter().all(|&i| i >= lo && i < hi) {
                        // representative of the block containing idx
                        let mut rep = 0;
                        for &i in idx.iter() {
                            rep = rep * n + (i / scale) * scale;
                        }
                        block_vals[rep]
                    } else {
                        C64::default()
                    }
                })
                .collect();
            let f = ComplexField::from_values(&grid, values)?;
            let theta = (scale as f64).ln();
            let g = spectral::dilate(&f, DilationParams { theta, dim })?.field;
            for p in [1.0, 2.0, f64::INFINITY] {
                rows.push(DilationLawRow {
                    dim,
                    scale: scale as f64,
                    p,
                    measured: lp(g.values(), p, cell) / lp(f.values(), p, cell),
                    predicted: spectral::dilation_lp_factor(theta, dim, p)?,
                    grid_exact: true,
                });
            }
        }
        let f = ComplexField::from_fn(&grid, |x| C64::from((-2.0 * x.iter().map(|v| v * v).sum::<f64>()).exp()));
        for scale in [1.5, 0.75] {
            let theta = f64::ln(scale);
            let g = spectral::dilate(&f, DilationParams { theta, dim })?.field;
            for p in [1.0, 2.0, f64::INFINITY] {
                rows.push(DilationLawRow {
                    dim,
                    scale,
                    p,
                    measured: lp(g.values(), p, cell) / lp(f.values(), p, cell),
                    predicted: spectral::dilation_lp_factor(theta, dim, p)?,
                    grid_exact: false,
                });
            }
        }
    }
    Ok(rows)
}

/// Dissipativity, quadratic estimate, trivial resolvent bound, derivative
/// identity, perturbation expansion and dilation laws in one batch, plus
/// the sign-flipped damping as a negative control.
pub fn run_structural_suite(s: &Scenario, ctx: &RunContext) -> Result<VerdictReport> {
    let default = StructuralSection::default();
    let sec = s.structural.as_ref().unwrap_or(&default);
    let grid = s.make_grid(ctx.exec)?;
    let op = s.make_operator(&grid)?;
    let mut report = VerdictReport::new(&s.id, s.kind);
    stamp(&mut report, s, &op);
    let ts = ctx.tol_scale;
    let seed = ctx.seed;

    let dr = model::dissipativity_report(&op, sec.samples, seed);
    report.measure("max_imag_hff", dr.max_imag);
    report.measure("min_real_hff", dr.min_real);
    report.verdict(Verdict::at_most("dissipative", dr.max_imag, 1e-10 * ts));
    report.verdict(Verdict::at_least("accretive", dr.min_real, -1e-10 * ts));

    let mut qnorm: f64 = 0.0;
    let mut qerr = Vec::new();
    for zz in &sec.quadratic_z {
        match resolvent::quadratic_estimate_check(&op, C64::new(zz[0], zz[1]), 1) {
            Ok(q) => qnorm = qnorm.max(q.norm),
            Err(e) => qerr.push(e.to_string()),
        }
    }
    report.measure("quadratic_norm_max", qnorm);
    if qerr.is_empty() {
        report.verdict(Verdict::at_most("quadratic_estimate", qnorm, 1.0 + 1e-6 * ts));
    } else {
        report.diag("quadratic_errors", json!(qerr));
        report.verdict(Verdict::undecided("quadratic_estimate", "solver failure"));
    }

    match trivial_bound_check(&op, sec.trivial_samples, seed) {
        Ok(w) => {
            report.measure("trivial_bound_ratio_max", w);
            report.verdict(Verdict::at_most("trivial_resolvent_bound", w, 1.0 + 1e-6 * ts));
        }
        Err(e) => report.verdict(Verdict::undecided("trivial_resolvent_bound", e.to_string())),
    }

    let probe = model::random_field(&grid, seed ^ 0x5eed);
    let probe = {
        // a smooth probe keeps the finite-difference errors clean
        let mut v = probe.values().to_vec();
        spectral::multiply_in_fourier_real(&grid, &mut v, &grid.symbol_bracket_power(-4.0));
        probe.with_values(v)
    };
    let zd = C64::new(sec.derivative_z[0], sec.derivative_z[1]);
    match resolvent::derivative_power_check(&op, zd, &probe) {
        Ok(r) => {
            let worst = r.ratios.iter().cloned().fold(f64::NAN, |a, b| if a.is_nan() { b } else { a.min(b) });
            report.measure("derivative_ratio_min", worst);
            report.diag("derivative_errors", json!(r.errors));
            report.verdict(
                Verdict::flag("derivative_equals_power", r.first_order(), "error ratios in [8, 12] per decade of h")
                    .with_detail(format!("ratios {:?}", r.ratios)),
            );
        }
        Err(e) => report.verdict(Verdict::undecided("derivative_equals_power", e.to_string())),
    }

    for &m in &sec.expansion_orders {
        let name = format!("perturbation_expansion_m{m}");
        match resolvent::perturbation_expansion_check(m, sec.expansion_size, seed) {
            Ok(r) => {
                let err = r.expansion_error.max(r.second_order_error);
                report.measure(&format!("{name}_error"), err);
                let mut v = Verdict::at_most(&name, err, 1e-10 * ts);
                if !r.form_ok {
                    v.status = Status::Fail;
                    v.detail = "a term does not have the expected form".into();
                }
                report.verdict(v);
            }
            Err(e) => report.verdict(Verdict::undecided(&name, e.to_string())),
        }
    }

    let rows = dilation_law_check(seed)?;
    let exact = rows.iter().filter(|r| r.grid_exact).map(|r| r.error()).fold(0.0, f64::max);
    let interp = rows.iter().filter(|r| !r.grid_exact).map(|r| r.error()).fold(0.0, f64::max);
    report.measure("dilation_exact_error", exact);
    report.measure("dilation_interpolated_error", interp);
    report.verdict(Verdict::at_most("dilation_lp_exact", exact, 1e-12 * ts));
    report.verdict(Verdict::at_most("dilation_lp_interpolated", interp, 1e-6 * ts));
    report.diag("dilation_rows", serde_json::to_value(&rows)?);

    if sec.negative_control {
        let base = if op.is_undamped() {
            assemble(
                &grid,
                &s.metric,
                &DampingSpec::gaussian(1.0, 1.0, s.damping.alpha),
                s.weight,
                None,
            )?
        } else {
            op.clone()
        };
        let flipped = base.with_flipped_damping();
        let fr = model::dissipativity_report(&flipped, sec.samples, seed);
        report.measure("negative_control_max_imag", fr.max_imag);
        report.verdict(
            Verdict::flag(
                "negative_control_fails_dissipativity",
                !fr.dissipative,
                "flipped damping must not be dissipative",
            )
            .with_detail(format!("max Im<Hf,f> = {:.3e}", fr.max_imag)),
        );
    }
    Ok(report.finish())
}

/// Classical-flow checks on the scenario's trapping metric: straight lines
/// for the flat metric, conservation on a bump, the trapping ring, the
/// sampled damping condition and the escape-symbol probe.
pub fn run_flow_checks(s: &Scenario, ctx: &RunContext) -> Result<VerdictReport> {
    let default = FlowSection::default();
    let sec = s.flow.as_ref().unwrap_or(&default);
    let mut report = VerdictReport::new(&s.id, s.kind);
    let dim = s.grid.dim.max(2);
    let opts = FlowOptions {
        dt: sec.dt,
        exec: ctx.exec,
        ..FlowOptions::default()
    };
    let ts = ctx.tol_scale;

    // flat metric: X(t) = x0 + 2tξ0
    let mut x0 = vec![0.0; dim];
    let mut xi0 = vec![0.0; dim];
    x0[0] = 0.5;
    xi0[0] = 0.6;
    xi0[1] = 0.8;
    let w0 = PhaseSpacePoint::new(x0.clone(), xi0.clone());
    let tr = flow::flow_with(&MetricSpec::identity(), &w0, 10.0, &opts)?;
    let flat_err = tr
        .points
        .iter()
        .map(|(t, w)| {
            (0..dim)
                .map(|i| (w.x[i] - (x0[i] + 2.0 * t * xi0[i])).abs().max((w.xi[i] - xi0[i]).abs()))
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    report.measure("flat_max_error", flat_err);
    report.verdict(Verdict::at_most("flat_exactness", flat_err, 1e-9 * ts));

    // p conservation on a bump over |t| <= 50
    let bump = MetricSpec::conformal_bump(0.5, 1.0);
    let mut bx = vec![0.0; dim];
    bx[0] = -2.0;
    bx[1] = 0.4;
    let mut bxi = vec![0.0; dim];
    bxi[0] = 1.0;
    let wb = flow::normalize_energy(&bump, &PhaseSpacePoint::new(bx, bxi), 1.0)?;
    // the midpoint rule only conserves p to O(dt²); a finer step keeps a
    // margin below the gate
    let fine = FlowOptions {
        dt: 0.1 * sec.dt,
        stop_on_escape: false,
        ..opts
    };
    let tf = flow::flow_with(&bump, &wb, 50.0, &fine)?;
    let drift = tf.max_p_drift;
    report.measure("bump_max_p_drift", drift);
    let mut v = Verdict::at_most("bump_p_conservation", drift, 1e-6 * ts);
    if tf.classification == Classification::IntegratorFailure {
        v.status = Status::Fail;
        v.detail = "integrator failure".into();
    }
    report.verdict(v);

    // trapping ring
    let ring = flow::trapping_ring_point(&s.metric, dim)?;
    let r0 = ring.radius();
    report.measure("ring_radius", r0);
    let tr = flow::flow_with(&s.metric, &ring, sec.t_max, &opts)?;
    report.measure("ring_max_radius", tr.max_radius());
    report.measure("ring_max_p_drift", tr.max_p_drift);
    report.diag("ring_dt_used", json!(tr.dt_used));
    report.diag("ring_classification", json!(tr.classification.as_str()));
    report.verdict(
        Verdict::flag(
            "ring_trapped_up_to_T",
            tr.classification == Classification::TrappedUpToT,
            "trapped_up_to_T",
        )
        .with_detail(format!("finite-time surrogate, t_max = {}", sec.t_max)),
    );
    let mut csv = tr.to_csv();
    if tr.points.len() > 4001 {
        // keep the artifact small: every k-th sample
        let k = tr.points.len() / 4000 + 1;
        let mut lines = csv.lines();
        let mut out = String::from(lines.next().unwrap());
        out.push('\n');
        for (i, l) in lines.enumerate() {
            if i % k == 0 {
                out.push_str(l);
                out.push('\n');
            }
        }
        csv = out;
    }
    report.attach_csv("ring_trajectory.csv", csv);

    // damping condition on the ring: a supported on the ring vs far away
    let sample: Vec<PhaseSpacePoint> = (0..4)
        .map(|k| {
            let th = k as f64 * std::f64::consts::FRAC_PI_2;
            let (c, sn) = (th.cos(), th.sin());
            let mut x = vec![0.0; dim];
            let mut xi = vec![0.0; dim];
            x[0] = r0 * c;
            x[1] = r0 * sn;
            xi[0] = -sn;
            xi[1] = c;
            PhaseSpacePoint::new(x, xi)
        })
        .collect();
    let on = DampingSpec {
        profile: DampingProfile::Ring {
            amplitude: 1.0,
            radius: r0,
            width: 0.3,
        },
        alpha: 0.0,
        rho: 1.0,
    };
    let mut far = vec![0.0; dim];
    far[0] = 4.0 * s.metric.width + 4.0;
    let off = DampingSpec {
        profile: DampingProfile::Gaussian {
            amplitude: 1.0,
            center: far,
            width: 0.5,
        },
        alpha: 0.0,
        rho: 1.0,
    };
    let gon = flow::check_damping_condition(&s.metric, &on, &sample, sec.gcc_t_max, sec.a_threshold, &opts)?;
    let goff = flow::check_damping_condition(&s.metric, &off, &sample, sec.gcc_t_max, sec.a_threshold, &opts)?;
    report.diag(
        "gcc",
        json!({
            "label": gon.label,
            "samples": gon.n_samples,
            "on_ring": gon.verdict.describe(),
            "off_ring": goff.verdict.describe(),
            "trapped_samples": gon.n_trapped,
        }),
    );
    report.verdict(Verdict::flag(
        "gcc_on_ring_satisfied",
        gon.verdict == GccVerdict::Satisfied,
        "satisfied",
    ));
    report.verdict(Verdict::flag(
        "gcc_off_ring_violated",
        goff.verdict == GccVerdict::Violated,
        "violated",
    ));

    // escape symbol: flat bracket is exactly 2 on p = 1
    let mut probe = EscapeProbe::new(sec.probe_samples, sec.probe_radius, ctx.seed);
    probe.exec = ctx.exec;
    let flat = flow::escape_symbol_probe(&MetricSpec::identity(), &DampingSpec::none(), &probe, dim)?;
    report.measure("flat_bracket_min", flat.min_value);
    report.verdict(Verdict::within(
        "flat_bracket_minimum",
        flat.min_value,
        2.0 - 1e-9 * ts,
        2.0 + 1e-9 * ts,
    ));
    let trap = flow::escape_symbol_probe(&s.metric, &s.damping, &probe, dim)?;
    report.measure("trapping_bracket_min", trap.min_value);
    report.measure("trapping_c0", trap.c0);
    report.verdict(
        Verdict::flag(
            "trapping_bracket_flagged",
            trap.non_positive,
            "x.xi alone is not an escape function on a trapping metric",
        )
        .with_detail(format!("argmin at |x| = {:.4}", trap.argmin.radius())),
    );
    report.diag("chi_bound_ok", json!(flat.chi_bound_ok && trap.chi_bound_ok));
    Ok(report.finish())
}
