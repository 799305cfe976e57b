//! `safeshield` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::demonstrations::DemoCorpus;
use crate::dynamics::{DynamicsKind, DynamicsModel};
use crate::error::{Error, Result};
use crate::evaluation::{grid_eval, level_set, score_field, ScoreOptions};
use crate::filter::{filtered_rollout, goal_reference, tau_from_acceptable, FilterConfig, FilteredRollout};
use crate::io;
use crate::learner::{learn, LearnConfig, LearnReport, Objective};
use crate::qp::SolverStatus;
use crate::service::{self, AppState, ServiceConfig};
use crate::simgen::{generate, GenSpec, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "safeshield", version, about = "Learn safety value functions from ranked demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic demonstration corpus.
    GenerateDemos(GenerateArgs),
    /// Learn a safety value function from a corpus.
    Learn(LearnArgs),
    /// Sample a model on a grid and optionally score it.
    EvalGrid(EvalArgs),
    /// Closed-loop rollout with the safety filter active.
    FilterSim(FilterSimArgs),
    /// Start the HTTP and WebSocket service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Generator preset: default or prefix_overlap.
    #[arg(long, default_value = "default")]
    scenario: String,
    /// JSON generator spec; replaces the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// JSON scenario geometry; defaults to the built-in obstacle course.
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dynamics: Option<DynamicsKind>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LearnArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the solver report and credit labels.
    #[arg(long)]
    result: Option<PathBuf>,
    /// Slack penalty.
    #[arg(long = "C", id = "C")]
    slack_penalty: Option<f64>,
    #[arg(long)]
    gamma_dyn: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_centers: Option<usize>,
    /// norm or squared_norm.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    nx: usize,
    #[arg(long, default_value_t = 100)]
    ny: usize,
    /// Heading used to slice a unicycle model.
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Level whose contour is included in the output.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Grid JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Greyscale image of the grid.
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Corpus used for scoring; enables --metrics.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Learn report holding credit labels.
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    metrics: Option<PathBuf>,
    /// Skip geometric metrics (for recorded demonstrations).
    #[arg(long)]
    no_geometry: bool,
}

#[derive(Debug, Args)]
struct FilterSimArgs {
    #[arg(long)]
    model: PathBuf,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    x0: Vec<f64>,
    /// Planar point the reference controller drives toward.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.5, 0.4])]
    goal: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    gain: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, conflicts_with = "acceptable")]
    tau: Option<f64>,
    /// Demo ids the user accepts as safe; τ is their lowest reward.
    #[arg(long, value_delimiter = ',', requires = "corpus")]
    acceptable: Vec<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<PathBuf>,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown objective '{s}'"))
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_objective(s)
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Solver(_) | Error::NotPsd => EXIT_SOLVER,
        _ => EXIT_DATA,
    }
}

/// Runs the command line and returns the process exit code. Diagnostics go
/// to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::GenerateDemos(a) => run_generate(a),
        Command::Learn(a) => run_learn(a),
        Command::EvalGrid(a) => run_eval(a),
        Command::FilterSim(a) => run_filter_sim(a),
        Command::Serve(a) => run_serve(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    io::versioned_from_str(&std::fs::read_to_string(path)?)
}

fn load_geometry(path: Option<&Path>) -> Result<Scenario> {
    let sc = match path {
        Some(p) => read_json(p)?,
        None => Scenario::default(),
    };
    sc.check()?;
    Ok(sc)
}

fn run_generate(a: GenerateArgs) -> std::result::Result<(), Failure> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<GenSpec>(p)?,
        None => GenSpec::preset(&a.scenario)?,
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(d) = a.dynamics {
        spec.dynamics = d;
    }
    let scenario = load_geometry(a.geometry.as_deref())?;
    let corpus = generate(&scenario, &spec)?;
    io::save_corpus(&a.out, &corpus)?;
    log::info!("wrote {} demonstrations to {}", corpus.demos.len(), a.out.display());
    Ok(())
}

fn load_valid_corpus(path: &Path) -> std::result::Result<DemoCorpus, Failure> {
    let corpus = io::load_corpus(path)?;
    let errors = corpus.validate();
    if !errors.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("corpus failed validation:\n  {}", errors.join("\n  ")),
        });
    }
    Ok(corpus)
}

fn learn_config(a: &LearnArgs) -> Result<LearnConfig> {
    let mut cfg = match &a.config {
        Some(p) => io::load_config(p)?,
        None => LearnConfig::default(),
    };
    if let Some(v) = a.slack_penalty {
        cfg.slack_penalty = v;
    }
    if let Some(v) = a.gamma_dyn {
        cfg.gamma_dyn = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha_gain = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.max_centers {
        cfg.max_centers = v;
    }
    if let Some(v) = a.objective {
        cfg.objective = v;
    }
    cfg.check()?;
    Ok(cfg)
}

fn run_learn(a: LearnArgs) -> std::result::Result<(), Failure> {
    let cfg = learn_config(&a).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    })?;
    let corpus = load_valid_corpus(&a.corpus)?;
    let result = learn(&corpus, &cfg)?;
    let report = result.report(cfg.epsilon_slack);
    if let Some(p) = &a.result {
        io::write_atomic(p, io::versioned_to_string(&report)?.as_bytes())?;
    }
    if result.solver_status != SolverStatus::Optimal {
        return Err(Failure {
            code: EXIT_SOLVER,
            message: format!(
                "solver finished with status {:?} (residual {:.3e}); no model written",
                result.solver_status, result.residuals
            ),
        });
    }
    let file = io::ModelFileV1::new(&result.model, corpus.dynamics, &cfg, &corpus)?;
    io::save_model(&a.out, &file)?;
    log::info!(
        "learned {} centers, total slack {:.6}, {} QP solves",
        result.model.len(),
        result.total_slack(),
        result.qp_solves
    );
    Ok(())
}

#[derive(Serialize)]
struct GridOutput<'a> {
    grid: &'a crate::evaluation::GridField,
    tau: f64,
    contour: Vec<crate::evaluation::Polyline>,
}

fn run_eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let file = io::load_model(&a.model)?;
    let model = file.model()?;
    let scenario = load_geometry(a.geometry.as_deref())?;
    let extra = match file.dynamics {
        DynamicsKind::Integrator2d => vec![],
        DynamicsKind::Unicycle => vec![a.theta],
    };
    let grid = grid_eval(&model, scenario.workspace, a.nx, a.ny, &extra)?;
    let out = GridOutput {
        grid: &grid,
        tau: a.tau,
        contour: level_set(&grid, a.tau),
    };
    io::write_atomic(&a.out, io::versioned_to_string(&out)?.as_bytes())?;
    if let Some(p) = &a.pgm {
        let span = grid.min().abs().max(grid.max().abs()).max(1e-12);
        io::write_atomic(p, &grid.to_pgm(-span, span))?;
    }
    if let Some(metrics_path) = &a.metrics {
        let corpus = load_valid_corpus(a.corpus.as_deref().expect("clap requires corpus"))?;
        let credit = match &a.result {
            Some(p) => read_json::<LearnReport>(p)?.credit,
            None => Vec::new(),
        };
        let opts = ScoreOptions {
            resolution: a.nx,
            ..ScoreOptions::default()
        };
        let sc = (!a.no_geometry).then_some(&scenario);
        let report = score_field(&grid, &credit, &corpus, sc, &opts);
        io::save_metrics(metrics_path, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SimOutput<'a> {
    tau: f64,
    dt: f64,
    min_h: f64,
    intervention_rate: f64,
    rollout: &'a FilteredRollout,
}

fn run_filter_sim(a: FilterSimArgs) -> std::result::Result<(), Failure> {
    let file = io::load_model(&a.model)?;
    let model = file.model()?;
    let dynamics = DynamicsModel::new(file.dynamics);
    if a.x0.len() != dynamics.state_dim() {
        return Err(Failure {
            code: EXIT_USAGE,
            message: format!("--x0 needs {} values for {}", dynamics.state_dim(), dynamics.name()),
        });
    }
    let tau = match (&a.tau, a.acceptable.is_empty()) {
        (Some(t), _) => *t,
        (None, false) => {
            let corpus = io::load_corpus(a.corpus.as_deref().expect("clap requires corpus"))?;
            tau_from_acceptable(&corpus, &a.acceptable)?
        }
        (None, true) => 0.0,
    };
    let cfg = FilterConfig {
        alpha_gain: a.alpha,
        tolerance_tau: tau,
        ..FilterConfig::default()
    };
    let goal = [a.goal[0], a.goal[1]];
    let rollout = filtered_rollout(&model, &dynamics, &cfg, &a.x0, a.dt, a.steps, |x| {
        goal_reference(&dynamics, x, goal, a.gain)
    })?;
    let out = SimOutput {
        tau,
        dt: a.dt,
        min_h: rollout.min_h,
        intervention_rate: rollout.intervention_rate(),
        rollout: &rollout,
    };
    io::write_atomic(&a.out, io::versioned_to_string(&out)?.as_bytes())?;
    eprintln!(
        "min h {:.4}, intervention rate {:.3}",
        rollout.min_h,
        rollout.intervention_rate()
    );
    Ok(())
}

fn run_serve(a: ServeArgs) -> std::result::Result<(), Failure> {
    let scenario = load_geometry(a.geometry.as_deref())?;
    let corpus = match &a.corpus {
        Some(p) => load_valid_corpus(p)?,
        None => DemoCorpus::new(DynamicsKind::Integrator2d, Vec::new()),
    };
    let state = Arc::new(AppState::new(
        ServiceConfig {
            scenario,
            ..ServiceConfig::default()
        },
        corpus,
    ));
    if let Some(p) = &a.model {
        state.install_model(io::load_model(p)?, 0)?;
    }
    let rt = tokio::runtime::Runtime::new().map_err(Error::from)?;
    rt.block_on(service::serve(state, SocketAddr::new(a.host, a.port)))?;
    Ok(())
}
