//! `qdiffuse` experiment harness.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! numerical failures. Errors are reported on stderr as one JSON object.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qdiffuse::ansatz::{parameter_count, BackwardPipeline, CircuitStep, WeightedEnsemble};
use qdiffuse::config::{ExperimentConfig, ScheduleName};
use qdiffuse::experiment::{self, BenchmarkTrace, DecayCurves};
use qdiffuse::forward::{closed_form_purity, NoiseSchedule};
use qdiffuse::metrics::{mx_histogram, MetricReport, DEFAULT_HISTOGRAM_BINS, ERROR_BAR_METHOD};
use qdiffuse::tasks::{states_of, Boundary, TaskSpec};
use qdiffuse::trainer::{GradientEngine, MeasurementKind, StepRecord};

use output::{canonical_config, config_hash, ensemble_table, num, OutDir, Table, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<qdiffuse::Error> for CliError {
    fn from(e: qdiffuse::Error) -> Self {
        use qdiffuse::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::DimensionMismatch { .. }
            | E::QubitCap { .. }
            | E::InvalidIndexSet(_)
            | E::TrainingOrder(_) => CliError::Config(e.to_string()),
            E::InvalidState(_) | E::InfeasibleMarginals(_) | E::DegenerateGroundSpace { .. } | E::NonFinite(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "qdiffuse", version, about = "Mixed-state quantum diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed. For `generate` it only selects
    /// the generation streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must be empty or absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    engine: Option<EngineArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Noise schedules with closed-form mean purity per step.
    ScheduleDump,
    /// Forward depolarizing trajectory of the training data.
    Forward,
    /// Train, generate and evaluate one configuration.
    Train,
    /// Run a trained checkpoint from maximally mixed inputs.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's n_test.
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Metrics of a generated ensemble against a data ensemble.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Many short steps against two long steps with a wide ancilla register.
    BenchmarkFig5 {
        /// Iterations per step for the six-step model.
        #[arg(long, default_value_t = 600)]
        iterations: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Enumerate,
    Stochastic,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Fd,
    Paramshift,
    Adjoint,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config_hash: String,
    config: ExperimentConfig,
    pipeline: BackwardPipeline,
}

#[derive(Serialize)]
struct StepSummary {
    t: usize,
    iterations: usize,
    first_loss: f64,
    final_loss: f64,
}

impl StepSummary {
    fn of(r: &StepRecord) -> Self {
        Self {
            t: r.t,
            iterations: r.trace.len(),
            first_loss: r.trace.first().map_or(f64::NAN, |i| i.loss),
            final_loss: r.final_loss,
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<ExperimentConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tfim_boundary: Option<Boundary>,
    wall_clock_secs: f64,
    steps: Vec<StepSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<serde_json::Value>,
    error_bars: &'static str,
    files: Vec<String>,
}

impl RunManifest {
    fn new(command: &'static str, config: Option<&ExperimentConfig>, seed: u64) -> Result<Self, CliError> {
        let boundary = config.and_then(|c| match c.task {
            TaskSpec::ManyBody { boundary, .. } => Some(boundary),
            _ => None,
        });
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command,
            config: config.cloned(),
            config_hash: config.map(config_hash).transpose()?,
            seed,
            tfim_boundary: boundary,
            wall_clock_secs: 0.0,
            steps: Vec::new(),
            metrics: None,
            error_bars: ERROR_BAR_METHOD,
            files: Vec::new(),
        })
    }

    fn finish(mut self, out: &mut OutDir, start: Instant) -> Result<(), CliError> {
        self.wall_clock_secs = start.elapsed().as_secs_f64();
        self.files = out.files().to_vec();
        out.manifest(&self)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&CliError::Config(e.to_string().trim_end().to_string())),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
    eprintln!("{body}");
    ExitCode::from(e.exit_code())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Config file plus command-line overrides.
fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = cli.mode {
        cfg.mode = Some(match m {
            ModeArg::Enumerate => MeasurementKind::Enumerate,
            ModeArg::Stochastic => MeasurementKind::Stochastic,
        });
    }
    if let Some(e) = cli.engine {
        cfg.engine = match (e, cfg.engine) {
            (EngineArg::Fd, GradientEngine::CentralFd { h }) => GradientEngine::CentralFd { h },
            (EngineArg::Fd, _) => GradientEngine::CentralFd { h: GradientEngine::DEFAULT_FD_STEP },
            (EngineArg::Paramshift, _) => GradientEngine::ParamShift,
            (EngineArg::Adjoint, _) => GradientEngine::Adjoint,
        };
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<OutDir, CliError> {
    let path = cli
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    OutDir::create(&path)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let start = Instant::now();
    match &cli.command {
        Command::ScheduleDump => {
            let cfg = effective_config(&cli)?;
            cfg.validate_forward()?;
            let mut out = out_dir(&cli, Some(&cfg))?;
            cmd_schedule_dump(&cfg, &mut out)?;
            RunManifest::new("schedule-dump", Some(&cfg), cfg.seed)?.finish(&mut out, start)
        }
        Command::Forward => {
            let cfg = effective_config(&cli)?;
            cfg.validate_forward()?;
            let mut out = out_dir(&cli, Some(&cfg))?;
            cmd_forward(&cfg, &mut out)?;
            RunManifest::new("forward", Some(&cfg), cfg.seed)?.finish(&mut out, start)
        }
        Command::Train => {
            let cfg = effective_config(&cli)?;
            cfg.validate()?;
            let mut out = out_dir(&cli, Some(&cfg))?;
            let mut manifest = RunManifest::new("train", Some(&cfg), cfg.seed)?;
            cmd_train(&cfg, &mut out, &mut manifest)?;
            manifest.finish(&mut out, start)
        }
        Command::Generate { checkpoint, n_test } => {
            let ck = load_checkpoint(checkpoint)?;
            if let Some(path) = &cli.config {
                // --seed picks the generation stream here, not the trained config
                let mut given = effective_config(&cli)?;
                given.seed = load_config(path)?.seed;
                let given = config_hash(&given)?;
                if given != ck.config_hash {
                    return Err(CliError::Config(format!(
                        "config hash {given} does not match checkpoint hash {}",
                        ck.config_hash
                    )));
                }
            }
            let seed = cli.seed.unwrap_or(ck.config.seed);
            let n = n_test.unwrap_or(ck.config.n_test());
            let mut out = out_dir(&cli, None)?;
            cmd_generate(&ck.pipeline, n, seed, &mut out)?;
            let mut manifest = RunManifest::new("generate", Some(&ck.config), seed)?;
            manifest.config_hash = Some(ck.config_hash);
            manifest.finish(&mut out, start)
        }
        Command::Eval { generated, data } => {
            let bins = match &cli.config {
                Some(p) => load_config(p)?.histogram_bins,
                None => DEFAULT_HISTOGRAM_BINS,
            };
            let g = load_ensemble(generated)?;
            let d = load_ensemble(data)?;
            let mut out = out_dir(&cli, None)?;
            let report = MetricReport::compute(&g, &d, bins)?;
            out.json("report.json", &report)?;
            let mut manifest = RunManifest::new("eval", None, 0)?;
            manifest.metrics = Some(serde_json::to_value(&report).map_err(|e| CliError::Numerical(e.to_string()))?);
            manifest.finish(&mut out, start)
        }
        Command::BenchmarkFig5 { iterations } => {
            if *iterations == 0 {
                return Err(CliError::Config("--iterations must be positive".into()));
            }
            let seed = cli.seed.unwrap_or(0);
            let mut out = out_dir(&cli, None)?;
            let summary = cmd_benchmark(*iterations, seed, &mut out)?;
            let mut manifest = RunManifest::new("benchmark-fig5", None, seed)?;
            manifest.metrics = Some(summary);
            manifest.finish(&mut out, start)
        }
    }
}

/// Initial purities of the task's data distribution. TFIM ground states are
/// pure, so large chains never materialize a state.
fn initial_purities(cfg: &ExperimentConfig) -> Result<Vec<f64>, CliError> {
    Ok(match cfg.task {
        TaskSpec::ManyBody { .. } => vec![1.0],
        _ => experiment::train_data(cfg)?.iter().map(|s| s.state.purity()).collect(),
    })
}

fn cmd_schedule_dump(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<(), CliError> {
    let p0 = initial_purities(cfg)?;
    let dim = 1usize << cfg.n;
    let mut schedules: Vec<NoiseSchedule> = ScheduleName::ALL
        .iter()
        .map(|s| NoiseSchedule::from_kind(s.kind(None, cfg.schedule_epsilon)?, cfg.steps))
        .collect::<qdiffuse::Result<_>>()?;
    if cfg.forward_schedule == ScheduleName::CosineExponent {
        schedules.push(cfg.schedule()?);
    }
    let mut t = Table::new(&["schedule", "t", "q_t", "a_t", "mean_purity"]);
    for s in &schedules {
        for step in 0..=s.steps() {
            let a = s.cumulative_mixing(step)?;
            let purity =
                p0.iter().map(|&p| closed_form_purity(p, a, dim)).sum::<qdiffuse::Result<f64>>()? / p0.len() as f64;
            let q = if step == 0 { 0.0 } else { s.q(step) };
            t.row(vec![s.kind().label(), step.to_string(), num(q), num(a), num(purity)]);
        }
    }
    out.csv("schedule.csv", t)
}

fn cmd_forward(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<(), CliError> {
    let train = experiment::train_data(cfg)?;
    let traj = experiment::forward(cfg, &train)?;
    let p0 = initial_purities(cfg)?;
    let dim = 1usize << cfg.n;
    let mut purity = Table::new(&["t", "q_t", "a_t", "mean_purity", "closed_form_purity"]);
    for (t, states) in traj.ensembles.iter().enumerate() {
        let e = WeightedEnsemble::uniform(states.clone())?;
        out.csv(&format!("forward_t{t}.csv"), ensemble_table(&e, Some(&train))?)?;
        let a = traj.schedule.cumulative_mixing(t)?;
        let closed =
            p0.iter().map(|&p| closed_form_purity(p, a, dim)).sum::<qdiffuse::Result<f64>>()? / p0.len() as f64;
        let q = if t == 0 { 0.0 } else { traj.schedule.q(t) };
        purity.row(vec![t.to_string(), num(q), num(a), num(traj.mean_purity(t)), num(closed)]);
    }
    out.csv("purity.csv", purity)
}

fn curves_table(c: &DecayCurves) -> Table {
    let mut t = Table::new(&["t", "forward_purity", "backward_purity", "forward_wasserstein", "backward_wasserstein"]);
    for k in 0..c.forward_purity.len() {
        t.row(vec![
            k.to_string(),
            num(c.forward_purity[k]),
            num(c.backward_purity[k]),
            num(c.forward_wasserstein[k]),
            num(c.backward_wasserstein[k]),
        ]);
    }
    t
}

fn cmd_train(cfg: &ExperimentConfig, out: &mut OutDir, manifest: &mut RunManifest) -> Result<(), CliError> {
    let run = experiment::run(cfg)?;
    out.write("config.toml", canonical_config(cfg)?.as_bytes())?;
    out.json(
        "checkpoint.json",
        &Checkpoint {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash(cfg)?,
            config: cfg.clone(),
            pipeline: run.pipeline.clone(),
        },
    )?;
    let mut loss = Table::new(&["step", "iteration", "loss", "mmd_to_data", "learning_rate"]);
    for s in &run.record.steps {
        for it in &s.trace {
            loss.row(vec![
                s.t.to_string(),
                it.iteration.to_string(),
                num(it.loss),
                num(it.mmd_to_data),
                num(it.learning_rate),
            ]);
        }
    }
    out.csv("loss.csv", loss)?;

    let data = WeightedEnsemble::uniform(states_of(&run.test))?;
    out.json("data_test.json", &data)?;
    out.csv("data_test.csv", ensemble_table(&data, Some(&run.test))?)?;
    out.json("generated.json", &run.generated[0])?;
    for (t, e) in run.generated.iter().enumerate() {
        out.csv(&format!("generated_t{t}.csv"), ensemble_table(e, None)?)?;
    }
    out.csv("curves.csv", curves_table(&run.curves))?;
    if let (Some(g), Some(d)) = (&run.report.mx_histogram, &run.report.data_mx_histogram) {
        let last = WeightedEnsemble::uniform(run.trajectory.ensembles[cfg.steps].clone())?;
        let f = mx_histogram(&last, cfg.histogram_bins)?;
        let mut h = Table::new(&["bin_lo", "bin_hi", "generated", "data", "forward_final"]);
        for k in 0..g.mass.len() {
            h.row(vec![num(g.edges[k]), num(g.edges[k + 1]), num(g.mass[k]), num(d.mass[k]), num(f.mass[k])]);
        }
        out.csv("mx_histogram.csv", h)?;
    }
    out.json("report.json", &run.report)?;
    manifest.steps = run.record.steps.iter().map(StepSummary::of).collect();
    manifest.metrics = Some(serde_json::to_value(&run.report).map_err(|e| CliError::Numerical(e.to_string()))?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if ck.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "checkpoint schema version {} is not {SCHEMA_VERSION}",
            ck.schema_version
        )));
    }
    let actual = config_hash(&ck.config)?;
    if actual != ck.config_hash {
        return Err(CliError::Config(format!(
            "checkpoint config hash {} does not match its config ({actual})",
            ck.config_hash
        )));
    }
    // rebuild through the validating constructors
    let steps = ck
        .pipeline
        .steps()
        .iter()
        .map(|s| CircuitStep::new(s.n_data(), s.n_anc(), s.layers(), s.theta().to_vec(), s.ancilla_kind()))
        .collect::<qdiffuse::Result<Vec<_>>>()?;
    Ok(Checkpoint { pipeline: BackwardPipeline::new(steps)?, ..ck })
}

fn load_ensemble(path: &Path) -> Result<WeightedEnsemble, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let raw: WeightedEnsemble =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let members = raw
        .members()
        .iter()
        .map(|(rho, w)| Ok((qdiffuse::state::DensityMatrix::new(rho.matrix().clone())?, *w)))
        .collect::<qdiffuse::Result<Vec<_>>>()?;
    Ok(WeightedEnsemble::new(members)?)
}

fn cmd_generate(pipeline: &BackwardPipeline, n: usize, seed: u64, out: &mut OutDir) -> Result<(), CliError> {
    let trace = experiment::generate_backward(pipeline, n, seed)?;
    let mut purity = Table::new(&["t", "mean_purity"]);
    for (t, e) in trace.iter().enumerate() {
        out.csv(&format!("generated_t{t}.csv"), ensemble_table(e, None)?)?;
        purity.row(vec![t.to_string(), num(e.mean_purity())]);
    }
    out.csv("backward_purity.csv", purity)?;
    out.json("generated.json", &trace[0])
}

#[derive(Serialize)]
struct BenchmarkSummary {
    label: String,
    total_params: usize,
    iterations_per_step: usize,
    final_mmd: f64,
}

fn cmd_benchmark(iterations: usize, seed: u64, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let configs = experiment::benchmark_configs(iterations, seed);
    let expected = [864, 840];
    for (c, want) in configs.iter().zip(expected) {
        let got = parameter_count(c.n, c.n_a, c.layers, c.steps);
        if got != want {
            return Err(CliError::Config(format!("benchmark model has {got} parameters, expected {want}")));
        }
    }
    let traces: Vec<BenchmarkTrace> = configs.iter().map(experiment::benchmark_run).collect::<qdiffuse::Result<_>>()?;
    let mut t = Table::new(&["model", "updates", "mmd"]);
    for tr in &traces {
        for (u, m) in tr.updates.iter().zip(&tr.mmd) {
            t.row(vec![tr.label.clone(), u.to_string(), num(*m)]);
        }
    }
    out.csv("fig5.csv", t)?;
    let summary: Vec<BenchmarkSummary> = traces
        .iter()
        .zip(&configs)
        .map(|(tr, c)| BenchmarkSummary {
            label: tr.label.clone(),
            total_params: tr.total_params,
            iterations_per_step: c.optimizer.iterations,
            final_mmd: tr.final_mmd(),
        })
        .collect();
    out.json("fig5_summary.json", &summary)?;
    serde_json::to_value(&summary).map_err(|e| CliError::Numerical(e.to_string()))
}
