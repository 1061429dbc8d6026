use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dslab::experiments::{self, RunContext, Scenario, ScenarioKind, Status, VerdictReport};
use dslab::flow::{self, FlowOptions, PhaseSpacePoint};
use dslab::resolvent::Regime;
use dslab::Exec;

const EXIT_FAIL: u8 = 1;
const EXIT_UNDECIDED: u8 = 2;
const EXIT_USAGE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dslab", version, about = "Damped Schrödinger operator lab")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run batch operations sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    /// Output directory; one subdirectory per scenario.
    #[arg(long, global = true, env = "DSLAB_OUT", default_value = "dslab-out")]
    out: PathBuf,
    /// Multiplies every pass tolerance.
    #[arg(long, global = true, default_value_t = 1.0)]
    tol_scale: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Source {
    /// Scenario file or `builtin:NAME`.
    source: String,
    /// Dotted `key=value` override, applied after loading. Repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run scenarios and write their reports.
    Run {
        /// Scenario files or `builtin:NAME`; `builtin:all` runs the library.
        #[arg(required = true)]
        sources: Vec<String>,
        #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Resolvent sweep on the scenario's operator.
    Sweep {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        regime: Option<Regime>,
        /// `a:b:logstepR`, `a:b:stepS` or a list of |z|.
        #[arg(long)]
        z: Option<String>,
        /// Ratio Im z / Re z along the sweep.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Classical flow: the scenario's flow checks, or one trajectory when
    /// `--x` and `--xi` are given.
    Flow {
        #[command(flatten)]
        src: Source,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        xi: Option<Vec<f64>>,
        #[arg(long, default_value_t = 50.0)]
        t_max: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
    },
    /// Structural checks on the scenario's operator.
    Check {
        #[command(flatten)]
        src: Source,
    },
    /// List the built-in scenarios.
    ListScenarios,
    /// Print the resolved scenario as TOML.
    Echo {
        #[command(flatten)]
        src: Source,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<dslab::Error>() {
                Some(
                    dslab::Error::Config(_)
                    | dslab::Error::InvalidGrid(_)
                    | dslab::Error::InvalidParameter(_)
                    | dslab::Error::Unsupported(_)
                    | dslab::Error::Io(_),
                ) => EXIT_USAGE,
                Some(_) => EXIT_FAIL,
                None => EXIT_USAGE,
            };
            ExitCode::from(code)
        }
    }
}

fn exit_code(status: Status) -> u8 {
    match status {
        Status::Pass => 0,
        Status::Fail => EXIT_FAIL,
        Status::Undecided => EXIT_UNDECIDED,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if cli.tol_scale.is_nan() || cli.tol_scale <= 0.0 {
        return Err(dslab::Error::Config("--tol-scale must be positive".into()).into());
    }
    let ctx = RunContext {
        seed: cli.seed,
        tol_scale: cli.tol_scale,
        exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel },
    };
    match cli.command {
        Command::ListScenarios => {
            for s in experiments::builtin_scenarios() {
                println!("{:<22} {:<20} {}", s.id, kind_name(s.kind), s.description);
            }
            Ok(0)
        }
        Command::Echo { src } => {
            let s = experiments::load_scenario(&src.source, &src.overrides)?;
            print!("{}", s.to_toml()?);
            Ok(0)
        }
        Command::Run { sources, overrides } => {
            let mut scenarios = Vec::new();
            for src in &sources {
                if src == "builtin:all" {
                    for name in experiments::builtin_names() {
                        scenarios.push(experiments::load_scenario(&format!("builtin:{name}"), &overrides)?);
                    }
                } else {
                    scenarios.push(experiments::load_scenario(src, &overrides)?);
                }
            }
            let mut worst = Status::Pass;
            for s in &scenarios {
                let report = experiments::run_scenario(s, &ctx)?;
                worst = worst.max(report.status);
                emit(&report, &cli.out)?;
            }
            Ok(exit_code(worst))
        }
        Command::Sweep { src, regime, z, eta } => {
            let mut s = experiments::load_scenario(&src.source, &src.overrides)?;
            s.kind = ScenarioKind::Resolvent;
            let sec = s.resolvent.get_or_insert_with(|| experiments::ResolventSection {
                regime: Regime::High,
                n: 0,
                delta: 1.0,
                z: None,
                z_points: vec![],
                eta: 0.01,
                non_trapping: true,
                epsilon: 0.0,
                slope_tolerance: 0.15,
                slope_band: None,
                ratio_bound: None,
                solver_tol: 1e-8,
            });
            if let Some(r) = regime {
                sec.regime = r;
            }
            if let Some(z) = z {
                sec.z = Some(z);
                sec.z_points.clear();
            }
            if let Some(e) = eta {
                sec.eta = e;
            }
            let report = experiments::run_resolvent_regime(&s, &ctx)?;
            emit(&report, &cli.out)?;
            Ok(exit_code(report.status))
        }
        Command::Check { src } => {
            let mut s = experiments::load_scenario(&src.source, &src.overrides)?;
            s.kind = ScenarioKind::Structural;
            let report = experiments::run_structural_suite(&s, &ctx)?;
            emit(&report, &cli.out)?;
            Ok(exit_code(report.status))
        }
        Command::Flow { src, x, xi, t_max, dt } => {
            let s = experiments::load_scenario(&src.source, &src.overrides)?;
            match (x, xi) {
                (Some(x), Some(xi)) => single_trajectory(&s, x, xi, t_max, dt, &ctx, &cli.out),
                (None, None) => {
                    let mut s = s;
                    s.kind = ScenarioKind::Flow;
                    let report = experiments::run_flow_checks(&s, &ctx)?;
                    emit(&report, &cli.out)?;
                    Ok(exit_code(report.status))
                }
                _ => Err(dslab::Error::Config("--x and --xi must be given together".into()).into()),
            }
        }
    }
}

fn single_trajectory(
    s: &Scenario,
    x: Vec<f64>,
    xi: Vec<f64>,
    t_max: f64,
    dt: f64,
    ctx: &RunContext,
    out: &Path,
) -> anyhow::Result<u8> {
    let w0 = PhaseSpacePoint::new(x, xi);
    let opts = FlowOptions {
        dt,
        exec: ctx.exec,
        ..FlowOptions::default()
    };
    let tr = flow::flow_with(&s.metric, &w0, t_max, &opts)?;
    let dir = out.join(&s.id);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("trajectory.csv");
    std::fs::write(&path, tr.to_csv())?;
    println!(
        "{}: {} (t_max = {t_max}, dt used {}, max p drift {:.3e}) -> {}",
        s.id,
        tr.classification.as_str(),
        tr.dt_used,
        tr.max_p_drift,
        path.display()
    );
    Ok(match tr.classification {
        flow::Classification::IntegratorFailure => EXIT_FAIL,
        _ => 0,
    })
}

fn kind_name(k: ScenarioKind) -> &'static str {
    match k {
        ScenarioKind::LocalEnergyDecay => "local_energy_decay",
        ScenarioKind::Smoothing => "smoothing",
        ScenarioKind::Resolvent => "resolvent",
        ScenarioKind::Structural => "structural",
        ScenarioKind::Flow => "flow",
    }
}

fn emit(report: &VerdictReport, out: &Path) -> anyhow::Result<()> {
    let dir = out.join(&report.scenario);
    report.write_to(&dir)?;
    println!("{} [{}]", report.scenario, report.status.as_str());
    for v in &report.verdicts {
        if v.measured.is_nan() {
            println!("  {:<8} {}: {}", v.status.as_str(), v.name, v.detail);
        } else {
            println!("  {:<8} {} = {:.6e} (tolerance {})", v.status.as_str(), v.name, v.measured, v.tolerance);
        }
    }
    for w in &report.out_of_hypothesis {
        println!("  out of hypothesis: {w}");
    }
    println!("  report: {}", dir.join("report.json").display());
    Ok(())
}
