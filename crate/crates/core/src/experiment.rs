//! End-to-end runs: data, forward trajectory, training, generation, metrics.

use serde::{Deserialize, Serialize};

use crate::ansatz::{generate_with_trace, BackwardPipeline, GenerationKeys, WeightedEnsemble};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::forward::{forward_trajectory, ForwardTrajectory};
use crate::losses::wasserstein;
use crate::metrics::{weighted_mean, MeanWithError, MetricReport};
use crate::rng::{Purpose, StreamKey};
use crate::tasks::{states_of, TaskSample, TaskSpec};
use crate::trainer::{train_pipeline, TrainRecord};

pub fn train_data(cfg: &ExperimentConfig) -> Result<Vec<TaskSample>> {
    cfg.task.generate(cfg.n, cfg.n_train, StreamKey::new(cfg.seed, Purpose::TrainData))
}

pub fn test_data(cfg: &ExperimentConfig) -> Result<Vec<TaskSample>> {
    cfg.task.generate(cfg.n, cfg.n_test(), StreamKey::new(cfg.seed, Purpose::TestData))
}

pub fn forward(cfg: &ExperimentConfig, train: &[TaskSample]) -> Result<ForwardTrajectory> {
    forward_trajectory(&states_of(train), &cfg.schedule()?)
}

pub fn generation_keys(seed: u64) -> GenerationKeys {
    GenerationKeys {
        ancilla: StreamKey::new(seed, Purpose::GenerateAncilla),
        measure: StreamKey::new(seed, Purpose::GenerateMeasure),
    }
}

/// Ensembles `{ρ̃_t}` indexed by `t`, from `n_samples` maximally mixed
/// inputs with one sampled outcome per hop.
pub fn generate_backward(pipeline: &BackwardPipeline, n_samples: usize, seed: u64) -> Result<Vec<WeightedEnsemble>> {
    let mut trace = generate_with_trace(pipeline, 0, n_samples, false, generation_keys(seed))?;
    trace.reverse();
    Ok(trace)
}

/// Mean purity and Wasserstein distance to held-out data at every `t`, for
/// the forward and the generated ensembles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCurves {
    pub forward_purity: Vec<f64>,
    pub backward_purity: Vec<f64>,
    pub forward_wasserstein: Vec<f64>,
    pub backward_wasserstein: Vec<f64>,
}

impl DecayCurves {
    pub fn compute(
        trajectory: &ForwardTrajectory,
        backward: &[WeightedEnsemble],
        data: &WeightedEnsemble,
    ) -> Result<Self> {
        let forward: Vec<WeightedEnsemble> =
            trajectory.ensembles.iter().map(|e| WeightedEnsemble::uniform(e.clone())).collect::<Result<_>>()?;
        let wass = |es: &[WeightedEnsemble]| es.iter().map(|e| wasserstein(e, data)).collect::<Result<Vec<_>>>();
        Ok(Self {
            forward_purity: trajectory.mean_purity_curve(),
            backward_purity: backward.iter().map(WeightedEnsemble::mean_purity).collect(),
            forward_wasserstein: wass(&forward)?,
            backward_wasserstein: wass(backward)?,
        })
    }
}

pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
    pub trajectory: ForwardTrajectory,
    pub pipeline: BackwardPipeline,
    pub record: TrainRecord,
    /// Generated ensembles indexed by `t`.
    pub generated: Vec<WeightedEnsemble>,
    pub report: MetricReport,
    pub curves: DecayCurves,
}

/// Trains on `n_train` samples and evaluates `n_test` generated samples
/// against a fresh `n_test` draw.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let train = train_data(cfg)?;
    let test = test_data(cfg)?;
    let trajectory = forward(cfg, &train)?;
    let (pipeline, record) = train_pipeline(&trajectory, &cfg.train_config())?;
    let generated = generate_backward(&pipeline, cfg.n_test(), cfg.seed)?;
    let data = WeightedEnsemble::uniform(states_of(&test))?;
    let report = MetricReport::compute(&generated[0], &data, cfg.histogram_bins)?;
    let curves = DecayCurves::compute(&trajectory, &generated, &data)?;
    Ok(RunOutcome { config: cfg.clone(), train, test, trajectory, pipeline, record, generated, report, curves })
}

/// Wasserstein distance between pairs of independent `n_samples` draws from
/// `task`, averaged over `pairs`.
pub fn sampling_baseline(
    task: &TaskSpec,
    n: usize,
    n_samples: usize,
    pairs: usize,
    seed: u64,
) -> Result<MeanWithError> {
    let key = StreamKey::new(seed, Purpose::Baseline);
    let values = (0..pairs)
        .map(|k| {
            let a = states_of(&task.generate(n, n_samples, key.with_step(2 * k))?);
            let b = states_of(&task.generate(n, n_samples, key.with_step(2 * k + 1))?);
            wasserstein(&WeightedEnsemble::uniform(a)?, &WeightedEnsemble::uniform(b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    weighted_mean(&values, &vec![1.0; values.len()])
}

/// Training-output MMD to the data against cumulative parameter updates
/// (iterations times parameters per step), concatenated over steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTrace {
    pub label: String,
    pub total_params: usize,
    pub updates: Vec<u64>,
    pub mmd: Vec<f64>,
}

impl BenchmarkTrace {
    pub fn final_mmd(&self) -> f64 {
        self.mmd.last().copied().unwrap_or(f64::NAN)
    }
}

/// The many-body model with many short steps and the one with two long
/// steps and a wide ancilla register. Iteration counts are scaled so both
/// see about the same number of parameter updates.
pub fn benchmark_configs(iterations: usize, seed: u64) -> [ExperimentConfig; 2] {
    let mut proposed = ExperimentConfig::many_body(crate::config::ScheduleName::CosineSquare);
    proposed.n_train = 50;
    proposed.optimizer.iterations = iterations;
    proposed.seed = seed;
    let mut wide = proposed.clone();
    wide.steps = 2;
    wide.layers = 21;
    wide.n_a = 6;
    let per_step = |c: &ExperimentConfig| c.layers * (c.n + c.n_a) * 2;
    let budget = iterations * proposed.steps * per_step(&proposed);
    wide.optimizer.iterations = (budget as f64 / (wide.steps * per_step(&wide)) as f64).round() as usize;
    [proposed, wide]
}

pub fn benchmark_run(cfg: &ExperimentConfig) -> Result<BenchmarkTrace> {
    cfg.validate()?;
    let train = train_data(cfg)?;
    let trajectory = forward(cfg, &train)?;
    let (pipeline, record) = train_pipeline(&trajectory, &cfg.train_config())?;
    let per_step = (cfg.layers * (cfg.n + cfg.n_a) * 2) as u64;
    let mut updates = Vec::new();
    let mut mmd = Vec::new();
    let mut done = 0u64;
    for step in &record.steps {
        for it in &step.trace {
            done += per_step;
            updates.push(done);
            mmd.push(it.mmd_to_data);
        }
    }
    Ok(BenchmarkTrace {
        label: format!("T={} L={} n_a={}", cfg.steps, cfg.layers, cfg.n_a),
        total_params: pipeline.total_params(),
        updates,
        mmd,
    })
}
