//! Stepwise training of the backward pipeline.
//!
//! Steps are trained in the order `t = T, T−1, …, 1`. While step `t` is being
//! optimized, its inputs are the outputs of the already frozen steps and its
//! targets are the forward ensemble at `t − 1`.

use std::sync::Mutex;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{
    apply_1q, apply_gate, backward_step, collect_branches, draw_ancillas, outcome_map, pauli, propagate_subspace,
    AncillaKind, BackwardPipeline, CircuitStep, Gate, MeasurementMode, StepPass, WeightedEnsemble,
};
use crate::error::{Error, Result};
use crate::forward::ForwardTrajectory;
use crate::losses::{distance, distance_with_gradient, hs_inner, mmd_raw, moments, DistanceKind, Moments};
use crate::rng::{Purpose, StreamKey};
use crate::state::{c, CMatrix, DensityMatrix, PureStateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every angle from `N(0, 1)`.
    Normal,
    /// Data wires from `N(0, 1/(n + n_a))`, ancilla wires from `N(0, 1)`.
    Xavier,
}

/// Initial angles in `[layer][qubit][axis]` order.
pub fn init_params<R: Rng + ?Sized>(
    scheme: InitScheme,
    n_data: usize,
    n_anc: usize,
    layers: usize,
    rng: &mut R,
) -> Vec<f64> {
    let nq = n_data + n_anc;
    let narrow = Normal::new(0.0, (1.0 / nq as f64).sqrt()).expect("positive variance");
    let mut out = Vec::with_capacity(layers * nq * 2);
    for _ in 0..layers {
        for q in 0..nq {
            for _ in 0..2 {
                let x: f64 = match scheme {
                    InitScheme::Xavier if q < n_data => narrow.sample(rng),
                    _ => StandardNormal.sample(rng),
                };
                out.push(x);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientEngine {
    /// Central finite differences with common random numbers.
    CentralFd { h: f64 },
    /// `±π/2` shifts of each angle; enumerate mode only.
    ParamShift,
    /// Reverse sweep through the gate list.
    Adjoint,
}

impl GradientEngine {
    pub const DEFAULT_FD_STEP: f64 = 1e-4;

    pub fn validate(&self, mode: MeasurementMode) -> Result<()> {
        match *self {
            GradientEngine::CentralFd { h } if !(h.is_finite() && h > 0.0) => {
                Err(Error::InvalidArgument(format!("finite-difference step {h}")))
            }
            GradientEngine::ParamShift if mode != MeasurementMode::Enumerate => {
                Err(Error::InvalidArgument("parameter-shift gradients need enumerate measurement mode".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Adam settings with learning rate `lr · decay^iteration`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub iterations: usize,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { iterations: 200, lr: 0.05, decay: 0.99, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    iteration: usize,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], iteration: 0 }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Rate used by the next update.
    pub fn learning_rate(&self) -> f64 {
        self.config.lr * self.config.decay.powi(self.iteration as i32)
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), found: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let lr = self.learning_rate();
        self.iteration += 1;
        let bc1 = 1.0 - beta1.powi(self.iteration as i32);
        let bc2 = 1.0 - beta2.powi(self.iteration as i32);
        for k in 0..theta.len() {
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * grad[k];
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * grad[k] * grad[k];
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            theta[k] -= lr * mhat / (vhat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// `(f(θ + h e_k) − f(θ − h e_k)) / 2h` for every `k`. `f` must be
/// deterministic in `θ`, which gives common random numbers for free.
pub fn central_fd<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    (0..theta.len())
        .into_par_iter()
        .map(|k| {
            let mut t = theta.to_vec();
            t[k] = theta[k] + h;
            let plus = f(&t)?;
            t[k] = theta[k] - h;
            let minus = f(&t)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Loss and gradient at one parameter vector, with the output ensemble.
#[derive(Clone, Debug)]
pub struct StepEvaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub outputs: WeightedEnsemble,
}

/// Everything that stays fixed while one step is optimized.
pub struct StepProblem<'a> {
    step: CircuitStep,
    inputs: Vec<CMatrix>,
    weights: Vec<f64>,
    ancillas: Vec<PureStateVector>,
    targets: &'a WeightedEnsemble,
    loss: DistanceKind,
    mode: MeasurementMode,
    /// Last optimal transport basis from an exact evaluation.
    warm: Mutex<Option<Vec<(usize, usize)>>>,
}

/// Loss sensitivity `M` of one output member with respect to its
/// unnormalized branch block.
struct Sensitivity {
    sample: usize,
    block: usize,
    m: CMatrix,
}

impl<'a> StepProblem<'a> {
    /// `step` supplies the circuit shape; its angles are ignored.
    pub fn new(
        step: &CircuitStep,
        inputs: &WeightedEnsemble,
        ancillas: Vec<PureStateVector>,
        targets: &'a WeightedEnsemble,
        loss: DistanceKind,
        mode: MeasurementMode,
    ) -> Result<Self> {
        let d = 1usize << step.n_data();
        if inputs.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: inputs.dim() });
        }
        if targets.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: targets.dim() });
        }
        if ancillas.len() != inputs.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), found: ancillas.len() });
        }
        Ok(Self {
            step: step.clone(),
            inputs: inputs.states().map(|s| s.matrix().clone()).collect(),
            weights: inputs.weights(),
            ancillas,
            targets,
            loss,
            mode,
            warm: Mutex::new(None),
        })
    }

    pub fn n_params(&self) -> usize {
        self.step.n_params()
    }

    fn pass(&self, theta: &[f64]) -> StepPass {
        StepPass::run(&self.step, theta, &self.inputs, &self.ancillas)
    }

    pub fn outputs(&self, theta: &[f64]) -> WeightedEnsemble {
        collect_branches(&self.pass(theta), &self.weights, self.mode).0
    }

    /// Distance between the step outputs at `theta` and the targets.
    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        let out = distance(self.loss, &self.outputs(theta), self.targets)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", self.loss.label())));
        }
        Ok(out)
    }

    pub fn evaluate(&self, engine: GradientEngine, theta: &[f64]) -> Result<StepEvaluation> {
        engine.validate(self.mode)?;
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), found: theta.len() });
        }
        match engine {
            GradientEngine::CentralFd { h } => {
                let outputs = self.outputs(theta);
                let loss = distance(self.loss, &outputs, self.targets)?;
                let grad = central_fd(|t| self.loss(t), theta, h)?;
                Ok(StepEvaluation { loss, grad, outputs })
            }
            GradientEngine::ParamShift => self.exact(theta, false),
            GradientEngine::Adjoint => self.exact(theta, true),
        }
    }

    pub fn gradient(&self, engine: GradientEngine, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(engine, theta)?.grad)
    }

    fn exact(&self, theta: &[f64], adjoint: bool) -> Result<StepEvaluation> {
        let pass = self.pass(theta);
        let (outputs, prov) = collect_branches(&pass, &self.weights, self.mode);
        let states: Vec<CMatrix> = outputs.states().map(|s| s.matrix().clone()).collect();
        let mut warm = self.warm.lock().unwrap_or_else(|e| e.into_inner());
        let lg = distance_with_gradient(self.loss, &states, &outputs.weights(), self.targets, warm.as_deref())?;
        *warm = lg.basis.clone();
        drop(warm);
        let d = states[0].nrows();
        let enumerate = self.mode == MeasurementMode::Enumerate;
        let sens: Vec<Sensitivity> = prov
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (_, _, _, prob) = &pass.samples[p.sample].blocks[p.block];
                let g = &lg.states[i];
                let shift = hs_inner(g, &states[i]);
                let mut m = g.clone();
                for k in 0..d {
                    m[(k, k)] -= c(shift, 0.0);
                }
                m /= c(*prob, 0.0);
                if enumerate {
                    let dw = self.weights[p.sample] * lg.weights[i];
                    for k in 0..d {
                        m[(k, k)] += c(dw, 0.0);
                    }
                }
                Sensitivity { sample: p.sample, block: p.block, m }
            })
            .collect();
        let grad = if adjoint { self.adjoint_sweep(&pass, theta, &sens) } else { self.shift_rule(&pass, theta, &sens) };
        Ok(StepEvaluation { loss: lg.value, grad, outputs })
    }

    /// Reverse-mode sweep: with `W = U E` and `dL = 2 Re Tr(Ỹ dW)`, each
    /// rotation contributes `Im⟨Ψ, P Φ⟩` where `Φ` is the state after the gate
    /// and `Ψ` the back-propagated `Ỹ†`.
    fn adjoint_sweep(&self, pass: &StepPass, theta: &[f64], sens: &[Sensitivity]) -> Vec<f64> {
        let d = 1usize << self.step.n_data();
        let r = pass.support.len();
        let da = 1usize << pass.n_anc;
        let contributions: Vec<(usize, usize, CMatrix)> = sens
            .par_iter()
            .map(|s| {
                let (b, v, _, _) = &pass.samples[s.sample].blocks[s.block];
                (s.sample, *b, &self.inputs[s.sample] * v.adjoint() * &s.m)
            })
            .collect();
        let mut ytilde = CMatrix::zeros(d * r, d * da);
        for (sample, b, y) in &contributions {
            let anc = &pass.samples[*sample].anc;
            for i in 0..d {
                for (cidx, a) in anc.iter().enumerate() {
                    for ip in 0..d {
                        ytilde[(i * r + cidx, ip * da + b)] += a * y[(i, ip)];
                    }
                }
            }
        }
        let nq = pass.n_qubits;
        let mut phi = pass.propagated.clone();
        let mut psi = ytilde.adjoint();
        let mut grad = vec![0.0; theta.len()];
        for gate in self.step.gates().iter().rev() {
            if let Gate::Rot { qubit, axis, param } = *gate {
                let mut p_phi = phi.clone();
                apply_1q(&mut p_phi, nq, qubit, &pauli(axis));
                let z: Complex64 = psi.iter().zip(p_phi.iter()).map(|(a, b)| a.conj() * b).sum();
                grad[param] += z.im;
            }
            apply_gate(&mut phi, gate, theta, nq, true);
            apply_gate(&mut psi, gate, theta, nq, true);
        }
        grad
    }

    /// `∂ρ̃/∂θ_k = (ρ̃(θ + π/2 e_k) − ρ̃(θ − π/2 e_k)) / 2`, contracted with `M`.
    fn shift_rule(&self, pass: &StepPass, theta: &[f64], sens: &[Sensitivity]) -> Vec<f64> {
        let d = 1usize << self.step.n_data();
        let half_pi = std::f64::consts::FRAC_PI_2;
        (0..theta.len())
            .into_par_iter()
            .map(|k| {
                let shifted = |delta: f64| {
                    let mut t = theta.to_vec();
                    t[k] += delta;
                    propagate_subspace(&self.step, &t, &pass.support)
                };
                let (wp, wm) = (shifted(half_pi), shifted(-half_pi));
                sens.iter()
                    .map(|s| {
                        let anc = &pass.samples[s.sample].anc;
                        let (b, _, _, _) = pass.samples[s.sample].blocks[s.block];
                        let rho = &self.inputs[s.sample];
                        let vp = outcome_map(&wp, pass.n_anc, d, anc, b);
                        let vm = outcome_map(&wm, pass.n_anc, d, anc, b);
                        let diff = &vp * rho * vp.adjoint() - &vm * rho * vm.adjoint();
                        0.5 * hs_inner(&s.m, &diff)
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Enumerate,
    Stochastic,
}

/// Everything the trainer needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_anc: usize,
    pub layers: usize,
    pub ancilla: AncillaKind,
    pub loss: DistanceKind,
    pub init: InitScheme,
    pub optimizer: AdamConfig,
    pub engine: GradientEngine,
    pub mode: MeasurementKind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    /// MMD between this iteration's outputs and the `t = 0` data.
    pub mmd_to_data: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub trace: Vec<IterationRecord>,
    pub final_loss: f64,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

impl TrainRecord {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &TrainRecord) -> bool {
        self.config == other.config && self.steps == other.steps
    }
}

/// Trains one step at a time, in order, keeping earlier-trained steps frozen.
pub struct PipelineTrainer<'a> {
    config: TrainConfig,
    trajectory: &'a ForwardTrajectory,
    targets: Vec<WeightedEnsemble>,
    data_moments: Moments,
    pipeline: BackwardPipeline,
    inputs: WeightedEnsemble,
    next: usize,
    records: Vec<StepRecord>,
}

impl<'a> PipelineTrainer<'a> {
    pub fn new(trajectory: &'a ForwardTrajectory, config: TrainConfig) -> Result<Self> {
        let depth = trajectory.schedule.steps();
        let n_data = trajectory.ensembles[0][0].n_qubits();
        let n_train = trajectory.ensembles[0].len();
        let mode = match config.mode {
            MeasurementKind::Enumerate => MeasurementMode::Enumerate,
            MeasurementKind::Stochastic => MeasurementMode::Stochastic(StreamKey::new(config.seed, Purpose::Loss)),
        };
        config.engine.validate(mode)?;
        if config.n_anc == 0 {
            return Err(Error::InvalidArgument("the backward circuit needs at least one ancilla".into()));
        }
        let steps = (0..depth)
            .map(|_| CircuitStep::zeros(n_data, config.n_anc, config.layers, config.ancilla))
            .collect::<Result<Vec<_>>>()?;
        let targets =
            trajectory.ensembles.iter().map(|e| WeightedEnsemble::uniform(e.clone())).collect::<Result<Vec<_>>>()?;
        let (ds, dw): (Vec<CMatrix>, Vec<f64>) =
            targets[0].members().iter().map(|(s, w)| (s.matrix().clone(), *w)).unzip();
        let start = DensityMatrix::maximally_mixed(n_data)?;
        Ok(Self {
            data_moments: moments(&ds, &dw),
            inputs: WeightedEnsemble::uniform(vec![start; n_train])?,
            pipeline: BackwardPipeline::new(steps)?,
            targets,
            trajectory,
            next: depth,
            records: Vec::new(),
            config,
        })
    }

    /// Next step awaiting training; 0 once every step is trained.
    pub fn next_step(&self) -> usize {
        self.next
    }

    pub fn pipeline(&self) -> &BackwardPipeline {
        &self.pipeline
    }

    /// Current inputs of step `next_step()`.
    pub fn inputs(&self) -> &WeightedEnsemble {
        &self.inputs
    }

    fn mode_for(&self, t: usize) -> MeasurementMode {
        match self.config.mode {
            MeasurementKind::Enumerate => MeasurementMode::Enumerate,
            MeasurementKind::Stochastic => {
                MeasurementMode::Stochastic(StreamKey::new(self.config.seed, Purpose::Loss).with_step(t))
            }
        }
    }

    /// Optimizes `Ũ_t`, freezes it, and pushes the inputs one step forward.
    pub fn train_step(&mut self, t: usize) -> Result<&StepRecord> {
        if t == 0 || t != self.next {
            return Err(Error::TrainingOrder(format!("step {t} requested, step {} is next", self.next)));
        }
        let cfg = &self.config;
        let seed = cfg.seed;
        let template = self.pipeline.step(t).clone();
        let n_data = template.n_data();
        let ancillas = draw_ancillas(
            cfg.ancilla,
            cfg.n_anc,
            self.inputs.len(),
            StreamKey::new(seed, Purpose::TrainAncilla).with_step(t),
        )?;
        let problem =
            StepProblem::new(&template, &self.inputs, ancillas, &self.targets[t - 1], cfg.loss, self.mode_for(t))?;
        let mut theta = init_params(
            cfg.init,
            n_data,
            cfg.n_anc,
            cfg.layers,
            &mut StreamKey::new(seed, Purpose::Init).with_step(t).sample(0),
        );
        let mut opt = OptimizerState::new(cfg.optimizer, theta.len());
        let mut trace = Vec::with_capacity(cfg.optimizer.iterations);
        for iteration in 0..cfg.optimizer.iterations {
            let eval = problem.evaluate(cfg.engine, &theta)?;
            trace.push(IterationRecord {
                iteration,
                loss: eval.loss,
                mmd_to_data: self.mmd_to_data(&eval.outputs),
                learning_rate: opt.learning_rate(),
            });
            opt.update(&mut theta, &eval.grad)?;
        }
        let final_loss = problem.loss(&theta)?;
        let trained = template.with_theta(theta.clone())?;
        *self.pipeline.step_mut(t) = trained;
        if t > 1 {
            self.inputs = backward_step(
                &self.inputs,
                self.pipeline.step(t),
                MeasurementMode::Stochastic(StreamKey::new(seed, Purpose::PropagateMeasure).with_step(t)),
                StreamKey::new(seed, Purpose::PropagateAncilla).with_step(t),
            )?;
        }
        self.next = t - 1;
        self.records.push(StepRecord { t, trace, final_loss, theta });
        Ok(self.records.last().unwrap())
    }

    fn mmd_to_data(&self, outputs: &WeightedEnsemble) -> f64 {
        let (s, w): (Vec<CMatrix>, Vec<f64>) = outputs.members().iter().map(|(s, w)| (s.matrix().clone(), *w)).unzip();
        mmd_raw(&moments(&s, &w), &self.data_moments)
    }

    pub fn trajectory(&self) -> &ForwardTrajectory {
        self.trajectory
    }

    pub fn finish(self) -> Result<(BackwardPipeline, Vec<StepRecord>)> {
        if self.next != 0 {
            return Err(Error::TrainingOrder(format!("step {} not trained yet", self.next)));
        }
        Ok((self.pipeline, self.records))
    }
}

/// Trains `Ũ_T, …, Ũ_1` against a forward trajectory.
pub fn train_pipeline(trajectory: &ForwardTrajectory, config: &TrainConfig) -> Result<(BackwardPipeline, TrainRecord)> {
    let start = Instant::now();
    let mut trainer = PipelineTrainer::new(trajectory, config.clone())?;
    for t in (1..=trajectory.schedule.steps()).rev() {
        trainer.train_step(t)?;
    }
    let (pipeline, steps) = trainer.finish()?;
    Ok((pipeline, TrainRecord { config: config.clone(), steps, wall_clock_secs: start.elapsed().as_secs_f64() }))
}
