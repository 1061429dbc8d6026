//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use dslab::experiments::{self, RunContext, Scenario, Status, VerdictReport};
use dslab::krylov::PowerConfig;
use dslab::resolvent::{self, ResolventQuery};
use dslab::{assemble, Complex64, ComplexField, DampedOperator, DampingSpec, Grid, MetricSpec, WeightChoice};
use nalgebra::{DMatrix, DVector};

type C = Complex64;

struct Outcome {
    ok: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            ok: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: String) {
        self.ok &= ok;
        self.lines.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
    }

    /// Every named verdict of the report must pass.
    fn verdicts(&mut self, r: &VerdictReport, names: &[&str]) {
        for n in names {
            match r.verdict_named(n) {
                Some(v) => self.check(
                    v.status == Status::Pass,
                    format!("{}/{}: {:.6e} vs {} [{}]", r.scenario, n, v.measured, v.tolerance, v.status.as_str()),
                ),
                None => self.check(false, format!("{}/{}: missing", r.scenario, n)),
            }
        }
    }
}

fn ctx() -> RunContext {
    RunContext::default()
}

fn run(name: &str) -> VerdictReport {
    let s: Scenario = experiments::builtin(name).expect("built-in scenario");
    experiments::run_scenario(&s, &ctx()).expect("scenario runs")
}

fn structural() -> Outcome {
    let mut o = Outcome::new();
    for name in ["structural-flat", "structural-bump"] {
        let s = experiments::builtin(name).unwrap();
        o.check(
            s.grid.dim <= 2 && s.grid.n <= 128,
            format!("{name}: grid {}^{}", s.grid.n, s.grid.dim),
        );
        let r = run(name);
        o.verdicts(
            &r,
            &["dissipative", "accretive", "quadratic_estimate", "trivial_resolvent_bound"],
        );
        let q = &s.structural.unwrap();
        o.check(
            q.samples >= 100 && q.quadratic_z.len() >= 5 && q.trivial_samples >= 20,
            format!("{name}: {} fields, {} z, {} (z, f)", q.samples, q.quadratic_z.len(), q.trivial_samples),
        );
    }
    o
}

fn dense(op: &DampedOperator) -> DMatrix<C> {
    let grid = op.grid();
    let n = grid.len();
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut e = vec![C::default(); n];
        e[k] = C::new(1.0, 0.0);
        let col = op.apply_h(&ComplexField::from_values(grid, e).unwrap());
        m.set_column(k, &DVector::from_column_slice(col.values()));
    }
    m
}

fn oracle() -> Outcome {
    let mut o = Outcome::new();
    let grid = Arc::new(Grid::new(1, 64, 8.0).unwrap());
    let op = assemble(
        &grid,
        &MetricSpec::conformal_bump(0.4, 1.0),
        &DampingSpec::gaussian(1.0, 1.5, 1.0),
        WeightChoice::Unit,
        None,
    )
    .unwrap();
    let h = dense(&op);
    let n = grid.len();
    let eye = DMatrix::<C>::identity(n, n);

    let mut worst_solve: f64 = 0.0;
    for (k, z) in [C::new(0.5, 0.1), C::new(3.0, 0.02), C::new(-1.0, 0.5)].into_iter().enumerate() {
        let f = dslab::model::random_field(&grid, 100 + k as u64);
        let exact = (&h - &eye * z).lu().solve(&DVector::from_column_slice(f.values())).unwrap();
        let got = resolvent::solve(&op, z, &f, 1e-12).unwrap();
        let err = (DVector::from_column_slice(got.values()) - &exact).norm() / exact.norm();
        worst_solve = worst_solve.max(err);
    }
    o.check(worst_solve <= 1e-8, format!("solve vs LU: max relative error {worst_solve:.3e} <= 1e-8"));

    let w = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        grid.coordinates().iter().map(|x| C::from((1.0 + x * x).powf(-0.5))),
    ));
    let mut worst_norm: f64 = 0.0;
    for k in 0..20 {
        let z = C::new(-1.0 + 0.5 * k as f64, 0.05 + 0.1 * (k % 5) as f64);
        let power = k % 2;
        let r = (&h - &eye * z).try_inverse().unwrap();
        let rp = if power == 1 { &r * &r } else { r };
        let sigma = (&w * rp * &w).singular_values()[0];
        let mut q = ResolventQuery::symmetric(z, power, 1.0);
        q.solver_tol = 1e-11;
        q.seed = k as u64;
        let est = resolvent::weighted_norm_with(
            &op,
            &q,
            &PowerConfig {
                rel_tol: 1e-9,
                max_iters: 2000,
            },
        )
        .unwrap();
        worst_norm = worst_norm.max((est.norm_estimate - sigma).abs() / sigma);
    }
    o.check(
        worst_norm <= 1e-3,
        format!("weighted_norm vs SVD over 20 queries: max relative error {worst_norm:.3e} <= 1e-3"),
    );

    for m in 0..=2 {
        let r = resolvent::perturbation_expansion_check(m, 8, 42).unwrap();
        let err = r.expansion_error.max(r.second_order_error);
        o.check(
            r.passed && r.form_ok && err <= 1e-10,
            format!("perturbation expansion m = {m} on 8x8: error {err:.3e} <= 1e-10"),
        );
    }
    o
}

fn dilation() -> Outcome {
    let mut o = Outcome::new();
    let rows = experiments::dilation_law_check(42).unwrap();
    for r in &rows {
        let tol = if r.grid_exact { 1e-12 } else { 1e-6 };
        o.check(
            r.error() <= tol,
            format!(
                "d = {}, e^theta = {}, p = {}: measured {:.15} vs formula {:.15} ({})",
                r.dim,
                r.scale,
                r.p,
                r.measured,
                r.predicted,
                if r.grid_exact { "grid-exact" } else { "interpolated" }
            ),
        );
    }
    o
}

fn decay() -> Outcome {
    let mut o = Outcome::new();
    let s = experiments::builtin("free3d-decay").unwrap();
    let e = s.evolution.as_ref().unwrap();
    o.check(
        s.grid.dim == 3 && s.grid.n == 64 && s.grid.half_length == 24.0 && e.delta == 2.6,
        format!("free3d-decay setup: {}^3, L = {}, delta = {}", s.grid.n, s.grid.half_length, e.delta),
    );
    let r = run("free3d-decay");
    o.verdicts(&r, &["decay_slope"]);
    o.check(
        r.measurement("fit_t_start").is_some_and(|t| (t - 2.0).abs() < 1e-9),
        format!(
            "fit window [{:?}, {:?}], t_wrap {:?}",
            r.measurement("fit_t_start"),
            r.measurement("fit_t_end"),
            r.measurement("t_wrap")
        ),
    );
    let b = run("bump3d-damped-decay");
    let v = b.verdict_named("decay_slope").unwrap();
    let diagnosed = b.diagnostics.contains_key("boundary");
    o.check(
        v.status == Status::Pass || (v.status == Status::Undecided && diagnosed),
        format!(
            "bump3d-damped-decay: slope {:.4} [{}] {}",
            v.measured,
            v.status.as_str(),
            if diagnosed { "with boundary-mass diagnostics" } else { "without diagnostics" }
        ),
    );
    o
}

fn smoothing() -> Outcome {
    let mut o = Outcome::new();
    let s = experiments::builtin("damped3d-smoothing").unwrap();
    let n = match s.initial {
        Some(experiments::InitialData::RandomPackets { count, .. }) => count,
        _ => 0,
    };
    o.check(
        s.grid.dim == 3 && s.damping.alpha == 1.0 && n == 10,
        format!("setup: d = {}, alpha = {}, ensemble of {n}", s.grid.dim, s.damping.alpha),
    );
    let r = run("damped3d-smoothing");
    o.check(
        r.measurement("gamma") == Some(1.0),
        format!("gamma = {:?}", r.measurement("gamma")),
    );
    o.verdicts(&r, &["ratio_change_on_doubling"]);
    o
}

fn resolvent_scaling() -> Outcome {
    let mut o = Outcome::new();
    let r = run("flat2d-high-freq");
    o.verdicts(&r, &["high_frequency_slope"]);
    let s = experiments::builtin("sharp-low").unwrap();
    let z = s.resolvent.as_ref().unwrap().z_list().unwrap();
    let lo = z.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    let hi = z.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let r = run("sharp-low");
    o.verdicts(&r, &["max_min_ratio"]);
    o.lines.push(format!("     sharp-low |z| in [{lo:.4}, {hi:.4}] on arg z = pi/4"));
    o
}

fn classical_flow() -> Outcome {
    let mut o = Outcome::new();
    let r = run("trapping2d-gcc");
    o.verdicts(
        &r,
        &[
            "flat_exactness",
            "bump_p_conservation",
            "ring_trapped_up_to_T",
            "gcc_on_ring_satisfied",
            "gcc_off_ring_violated",
            "flat_bracket_minimum",
        ],
    );
    let t = experiments::builtin("trapping2d-gcc").unwrap().flow.unwrap().t_max;
    o.check(t == 200.0, format!("trapping horizon t_max = {t}"));
    o
}

fn artifacts(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let mut o = Outcome::new();
    let root = std::env::temp_dir().join(format!("dslab-acceptance-{}", std::process::id()));
    for name in ["structural-flat", "structural-bump", "trapping2d-gcc", "free1d-decay", "intermediate", "free3d-decay"] {
        let a = root.join("a").join(name);
        let b = root.join("b").join(name);
        run(name).write_to(&a).unwrap();
        run(name).write_to(&b).unwrap();
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        o.check(
            fa == fb && !fa.is_empty(),
            format!("{name}: {} files byte-identical", fa.len()),
        );
    }
    let _ = std::fs::remove_dir_all(&root);
    o
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 8] = [
        ("1 structural suite", Duration::from_secs(60), structural),
        ("2 oracle equivalence", Duration::from_secs(120), oracle),
        ("3 dilation laws", Duration::from_secs(10), dilation),
        ("4 local energy decay", Duration::from_secs(600), decay),
        ("5 smoothing effect", Duration::from_secs(600), smoothing),
        ("6 resolvent scaling", Duration::from_secs(900), resolvent_scaling),
        ("7 classical flow", Duration::from_secs(120), classical_flow),
        ("8 determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, budget, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str()) || "acceptance".contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let out = f();
        let elapsed = t0.elapsed();
        for l in &out.lines {
            println!("    {l}");
        }
        // budgets assume an optimized build
        let slow = elapsed > budget;
        let ok = out.ok;
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {name} ({:.1}s, budget {}s{})",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if slow { ", over budget" } else { "" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
