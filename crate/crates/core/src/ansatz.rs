//! Hardware-efficient backward circuits, ancilla measurement and branching.
//!
//! A step acts on `n_data + n_anc` qubits: data qubits are the high bits of a
//! basis index, ancillas the low bits. Each layer applies `RX(θ)` then `RY(θ)`
//! to every qubit, followed by CZ on the open chain `(0,1), (1,2), …`. After
//! `L` layers every ancilla is measured in the Z basis.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::state::{c, haar_random_pure, trace_re, CMatrix, DensityMatrix, PureStateVector, QUBIT_CAP};

/// Branches lighter than this are dropped.
pub const BRANCH_PRUNE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AncillaKind {
    /// `|0⟩^{⊗n_anc}`
    #[serde(rename = "zero")]
    AllZero,
    /// `|φ_Haar⟩ ⊗ |0⟩^{⊗(n_anc−1)}`
    #[serde(rename = "haar")]
    HaarFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Rot { qubit: usize, axis: Axis, param: usize },
    Cz { a: usize, b: usize },
}

/// One trainable circuit `Ũ_t`. Parameters are stored flat in
/// `[layer][qubit][axis]` order with axis 0 = X, 1 = Y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitStep {
    n_data: usize,
    n_anc: usize,
    layers: usize,
    theta: Vec<f64>,
    ancilla_kind: AncillaKind,
}

impl CircuitStep {
    pub fn new(n_data: usize, n_anc: usize, layers: usize, theta: Vec<f64>, ancilla_kind: AncillaKind) -> Result<Self> {
        if n_data == 0 {
            return Err(Error::InvalidArgument("a step needs at least one data qubit".into()));
        }
        if n_data + n_anc > QUBIT_CAP {
            return Err(Error::QubitCap { requested: n_data + n_anc, cap: QUBIT_CAP });
        }
        if ancilla_kind == AncillaKind::HaarFirst && n_anc == 0 {
            return Err(Error::InvalidArgument("Haar ancilla needs at least one ancilla qubit".into()));
        }
        let expected = layers * (n_data + n_anc) * 2;
        if theta.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: theta.len() });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("circuit parameter".into()));
        }
        Ok(Self { n_data, n_anc, layers, theta, ancilla_kind })
    }

    pub fn zeros(n_data: usize, n_anc: usize, layers: usize, ancilla_kind: AncillaKind) -> Result<Self> {
        Self::new(n_data, n_anc, layers, vec![0.0; layers * (n_data + n_anc) * 2], ancilla_kind)
    }

    pub fn n_data(&self) -> usize {
        self.n_data
    }

    pub fn n_anc(&self) -> usize {
        self.n_anc
    }

    pub fn n_qubits(&self) -> usize {
        self.n_data + self.n_anc
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn ancilla_kind(&self) -> AncillaKind {
        self.ancilla_kind
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn param_index(&self, layer: usize, qubit: usize, axis: Axis) -> usize {
        (layer * self.n_qubits() + qubit) * 2 + matches!(axis, Axis::Y) as usize
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.n_data, self.n_anc, self.layers, theta, self.ancilla_kind)
    }

    pub fn is_ancilla_wire(&self, param: usize) -> bool {
        (param / 2) % self.n_qubits() >= self.n_data
    }

    /// Gates in application order.
    pub fn gates(&self) -> Vec<Gate> {
        let nq = self.n_qubits();
        let mut out = Vec::with_capacity(self.layers * (3 * nq));
        for layer in 0..self.layers {
            for q in 0..nq {
                out.push(Gate::Rot { qubit: q, axis: Axis::X, param: self.param_index(layer, q, Axis::X) });
                out.push(Gate::Rot { qubit: q, axis: Axis::Y, param: self.param_index(layer, q, Axis::Y) });
            }
            for q in 0..nq.saturating_sub(1) {
                out.push(Gate::Cz { a: q, b: q + 1 });
            }
        }
        out
    }

    /// Full `2^(n_data+n_anc)` unitary.
    pub fn unitary(&self) -> CMatrix {
        let d = 1 << self.n_qubits();
        let mut u = CMatrix::identity(d, d);
        apply_gates(&mut u, &self.gates(), &self.theta, self.n_qubits());
        u
    }
}

/// `exp(−iθP/2)` for `P ∈ {X, Y}` as a row-major 2×2.
pub(crate) fn rotation(axis: Axis, theta: f64) -> [Complex64; 4] {
    let (s, co) = (0.5 * theta).sin_cos();
    match axis {
        Axis::X => [c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)],
        Axis::Y => [c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0)],
    }
}

pub(crate) fn pauli(axis: Axis) -> [Complex64; 4] {
    match axis {
        Axis::X => [c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
        Axis::Y => [c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)],
    }
}

/// Left-multiplies every column of `m` by the single-qubit `g` on `qubit`.
pub(crate) fn apply_1q(m: &mut CMatrix, n_qubits: usize, qubit: usize, g: &[Complex64; 4]) {
    let d = m.nrows();
    let stride = 1usize << (n_qubits - 1 - qubit);
    for col in m.as_mut_slice().chunks_mut(d) {
        let mut base = 0;
        while base < d {
            for i in base..base + stride {
                let (a, b) = (col[i], col[i + stride]);
                col[i] = g[0] * a + g[1] * b;
                col[i + stride] = g[2] * a + g[3] * b;
            }
            base += 2 * stride;
        }
    }
}

pub(crate) fn apply_cz(m: &mut CMatrix, n_qubits: usize, a: usize, b: usize) {
    let d = m.nrows();
    let mask = (1usize << (n_qubits - 1 - a)) | (1usize << (n_qubits - 1 - b));
    for col in m.as_mut_slice().chunks_mut(d) {
        for (i, z) in col.iter_mut().enumerate() {
            if i & mask == mask {
                *z = -*z;
            }
        }
    }
}

pub(crate) fn apply_gate(m: &mut CMatrix, gate: &Gate, theta: &[f64], n_qubits: usize, inverse: bool) {
    match *gate {
        Gate::Rot { qubit, axis, param } => {
            let angle = if inverse { -theta[param] } else { theta[param] };
            apply_1q(m, n_qubits, qubit, &rotation(axis, angle));
        }
        Gate::Cz { a, b } => apply_cz(m, n_qubits, a, b),
    }
}

pub(crate) fn apply_gates(m: &mut CMatrix, gates: &[Gate], theta: &[f64], n_qubits: usize) {
    for g in gates {
        apply_gate(m, g, theta, n_qubits, false);
    }
}

/// `U ρ U†` for the step unitary, re-Hermitized.
pub fn apply_step_unitary(rho_full: &DensityMatrix, step: &CircuitStep) -> Result<DensityMatrix> {
    let d = 1usize << step.n_qubits();
    if rho_full.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: rho_full.dim() });
    }
    let u = step.unitary();
    Ok(DensityMatrix::from_trusted(&u * rho_full.matrix() * u.adjoint()))
}

/// Ancilla register for one `(sample, step)`.
pub fn prepare_ancilla<R: Rng + ?Sized>(kind: AncillaKind, n_anc: usize, rng: &mut R) -> Result<PureStateVector> {
    match kind {
        AncillaKind::AllZero => {
            if n_anc == 0 {
                return Err(Error::InvalidArgument("ancilla register must be nonempty".into()));
            }
            Ok(PureStateVector::zero(n_anc))
        }
        AncillaKind::HaarFirst => {
            if n_anc == 0 {
                return Err(Error::InvalidArgument("Haar ancilla needs at least one ancilla qubit".into()));
            }
            let haar = haar_random_pure(1, rng)?;
            Ok(if n_anc == 1 { haar } else { haar.kron(&PureStateVector::zero(n_anc - 1)) })
        }
    }
}

/// Ensemble of states with probability weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEnsemble {
    members: Vec<(DensityMatrix, f64)>,
}

impl WeightedEnsemble {
    pub fn new(members: Vec<(DensityMatrix, f64)>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::InvalidArgument("ensemble must be nonempty".into()))?;
        let dim = first.0.dim();
        let mut total = 0.0;
        for (rho, w) in &members {
            if rho.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: rho.dim() });
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidArgument(format!("ensemble weight {w}")));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("ensemble weights sum to {total}")));
        }
        Ok(Self { members })
    }

    /// Equal weights `1/len`.
    pub fn uniform(states: Vec<DensityMatrix>) -> Result<Self> {
        let w = 1.0 / states.len().max(1) as f64;
        Self::new(states.into_iter().map(|s| (s, w)).collect())
    }

    pub(crate) fn from_trusted(members: Vec<(DensityMatrix, f64)>) -> Self {
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].0.dim()
    }

    pub fn n_qubits(&self) -> usize {
        self.members[0].0.n_qubits()
    }

    pub fn members(&self) -> &[(DensityMatrix, f64)] {
        &self.members
    }

    pub fn states(&self) -> impl Iterator<Item = &DensityMatrix> {
        self.members.iter().map(|(s, _)| s)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|(_, w)| *w).collect()
    }

    /// `Σ w_i ρ_i`.
    pub fn mean_state(&self) -> CMatrix {
        let d = self.dim();
        let mut m = CMatrix::zeros(d, d);
        for (rho, w) in &self.members {
            m += rho.matrix() * c(*w, 0.0);
        }
        m
    }

    pub fn mean_purity(&self) -> f64 {
        self.members.iter().map(|(s, w)| w * s.purity()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (rho, _) in &self.members {
            rho.validate()?;
        }
        Self::new(self.members.clone()).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementMode {
    /// One outcome per member, drawn by inverse CDF from the keyed stream.
    Stochastic(StreamKey),
    /// Every outcome kept, weighted by its Born probability.
    Enumerate,
}

/// Picks an outcome index by inverse CDF of `probs` against a uniform draw.
pub(crate) fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = k;
        acc += p;
        if target < acc {
            return k;
        }
    }
    last
}

/// Unnormalized data block `⟨b|ρ|b⟩` for every ancilla outcome `b`.
fn outcome_blocks(rho_full: &CMatrix, n_anc: usize) -> Vec<CMatrix> {
    let da = 1usize << n_anc;
    let d = rho_full.nrows() / da;
    (0..da).map(|b| CMatrix::from_fn(d, d, |i, j| rho_full[(i * da + b, j * da + b)])).collect()
}

/// Z-basis measurement of the `n_anc` low qubits of `rho_full`.
/// `sample` selects the stream within a stochastic key.
pub fn measure_ancillas(
    rho_full: &DensityMatrix,
    n_anc: usize,
    mode: MeasurementMode,
    sample: usize,
) -> Result<WeightedEnsemble> {
    if n_anc == 0 || n_anc >= rho_full.n_qubits() {
        return Err(Error::InvalidArgument(format!(
            "cannot measure {n_anc} ancillas of a {}-qubit state",
            rho_full.n_qubits()
        )));
    }
    let blocks = outcome_blocks(rho_full.matrix(), n_anc);
    let probs: Vec<f64> = blocks.iter().map(trace_re).collect();
    Ok(branch(blocks, &probs, 1.0, mode, sample))
}

fn branch(blocks: Vec<CMatrix>, probs: &[f64], parent: f64, mode: MeasurementMode, sample: usize) -> WeightedEnsemble {
    match mode {
        MeasurementMode::Enumerate => {
            let kept: Vec<(DensityMatrix, f64)> = blocks
                .into_iter()
                .zip(probs)
                .filter(|(_, &p)| p >= BRANCH_PRUNE)
                .map(|(b, &p)| (DensityMatrix::from_trusted(b.unscale(p)), parent * p))
                .collect();
            let total: f64 = kept.iter().map(|(_, w)| w).sum();
            WeightedEnsemble::from_trusted(kept.into_iter().map(|(s, w)| (s, w * parent / total)).collect())
        }
        MeasurementMode::Stochastic(key) => {
            let u: f64 = key.sample(sample).random();
            let b = inverse_cdf(probs, u);
            let p = probs[b];
            let block = blocks.into_iter().nth(b).unwrap();
            WeightedEnsemble::from_trusted(vec![(DensityMatrix::from_trusted(block.unscale(p)), parent)])
        }
    }
}

/// Step unitary restricted to the input subspace `data ⊗ span{ancilla support}`,
/// and the per-sample branch blocks it produces.
pub(crate) struct StepPass {
    pub n_qubits: usize,
    pub n_anc: usize,
    /// Ancilla basis indices spanned by the prepared ancillas.
    pub support: Vec<usize>,
    /// `U E` with `E = I_data ⊗ [|s⟩ for s in support]`, shape `D × (d·r)`.
    pub propagated: CMatrix,
    pub samples: Vec<SampleBranches>,
}

pub(crate) struct SampleBranches {
    /// Ancilla amplitudes on `support`.
    pub anc: Vec<Complex64>,
    /// `(outcome, V_b, ρ̃_b, p_b)` with `ρ̃_b = V_b ρ V_b†`, `p_b = Tr ρ̃_b`.
    pub blocks: Vec<(usize, CMatrix, CMatrix, f64)>,
}

pub(crate) fn ancilla_support(kind: AncillaKind, n_anc: usize) -> Vec<usize> {
    match kind {
        AncillaKind::AllZero => vec![0],
        AncillaKind::HaarFirst => vec![0, 1 << (n_anc - 1)],
    }
}

/// `U E` for a parameter vector.
pub(crate) fn propagate_subspace(step: &CircuitStep, theta: &[f64], support: &[usize]) -> CMatrix {
    let nq = step.n_qubits();
    let da = 1usize << step.n_anc();
    let d = 1usize << step.n_data();
    let r = support.len();
    let mut e = CMatrix::zeros(d * da, d * r);
    for i in 0..d {
        for (k, &s) in support.iter().enumerate() {
            e[(i * da + s, i * r + k)] = c(1.0, 0.0);
        }
    }
    apply_gates(&mut e, &step.gates(), theta, nq);
    e
}

/// `V_b = W_b (I ⊗ a)`: data-to-data map for outcome `b` and ancilla amplitudes `a`.
pub(crate) fn outcome_map(propagated: &CMatrix, n_anc: usize, d: usize, anc: &[Complex64], b: usize) -> CMatrix {
    let da = 1usize << n_anc;
    let r = anc.len();
    CMatrix::from_fn(d, d, |row, col| {
        let mut z = c(0.0, 0.0);
        for (k, a) in anc.iter().enumerate() {
            z += propagated[(row * da + b, col * r + k)] * a;
        }
        z
    })
}

pub(crate) fn sample_blocks(
    propagated: &CMatrix,
    n_anc: usize,
    rho: &CMatrix,
    anc: &[Complex64],
) -> Vec<(usize, CMatrix, CMatrix, f64)> {
    let d = rho.nrows();
    (0..1usize << n_anc)
        .map(|b| {
            let v = outcome_map(propagated, n_anc, d, anc, b);
            let blk = &v * rho * v.adjoint();
            let p = trace_re(&blk);
            (b, v, blk, p)
        })
        .collect()
}

impl StepPass {
    pub fn run(step: &CircuitStep, theta: &[f64], inputs: &[CMatrix], ancillas: &[PureStateVector]) -> Self {
        let support = ancilla_support(step.ancilla_kind(), step.n_anc());
        let propagated = propagate_subspace(step, theta, &support);
        let samples = inputs
            .par_iter()
            .zip(ancillas.par_iter())
            .map(|(rho, anc)| {
                let a: Vec<Complex64> = support.iter().map(|&s| anc.amplitudes()[s]).collect();
                let blocks = sample_blocks(&propagated, step.n_anc(), rho, &a);
                SampleBranches { anc: a, blocks }
            })
            .collect();
        Self { n_qubits: step.n_qubits(), n_anc: step.n_anc(), support, propagated, samples }
    }
}

/// Where each output member came from.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Provenance {
    pub sample: usize,
    /// index into `SampleBranches::blocks`
    pub block: usize,
}

/// Assembles the output ensemble of a pass. In enumerate mode weights are
/// `w_s p_b`; in stochastic mode the parent weight is kept.
pub(crate) fn collect_branches(
    pass: &StepPass,
    weights: &[f64],
    mode: MeasurementMode,
) -> (WeightedEnsemble, Vec<Provenance>) {
    let mut members = Vec::new();
    let mut prov = Vec::new();
    for (s, sample) in pass.samples.iter().enumerate() {
        let probs: Vec<f64> = sample.blocks.iter().map(|b| b.3).collect();
        match mode {
            MeasurementMode::Enumerate => {
                for (k, (_, _, blk, p)) in sample.blocks.iter().enumerate() {
                    if *p >= BRANCH_PRUNE {
                        members.push((DensityMatrix::from_trusted(blk.unscale(*p)), weights[s] * p));
                        prov.push(Provenance { sample: s, block: k });
                    }
                }
            }
            MeasurementMode::Stochastic(key) => {
                let u: f64 = key.sample(s).random();
                let k = inverse_cdf(&probs, u);
                let (_, _, blk, p) = &sample.blocks[k];
                members.push((DensityMatrix::from_trusted(blk.unscale(*p)), weights[s]));
                prov.push(Provenance { sample: s, block: k });
            }
        }
    }
    let total: f64 = members.iter().map(|(_, w)| w).sum();
    for m in &mut members {
        m.1 /= total;
    }
    (WeightedEnsemble::from_trusted(members), prov)
}

/// Ancillas for every member of a step, keyed by `(key, member index)`.
pub fn draw_ancillas(kind: AncillaKind, n_anc: usize, count: usize, key: StreamKey) -> Result<Vec<PureStateVector>> {
    (0..count).map(|i| prepare_ancilla(kind, n_anc, &mut key.sample(i))).collect()
}

/// One denoising hop: attach ancillas, apply `Ũ`, measure.
pub fn backward_step(
    ensemble: &WeightedEnsemble,
    step: &CircuitStep,
    mode: MeasurementMode,
    ancilla_key: StreamKey,
) -> Result<WeightedEnsemble> {
    let d = 1usize << step.n_data();
    if ensemble.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: ensemble.dim() });
    }
    let ancillas = draw_ancillas(step.ancilla_kind(), step.n_anc(), ensemble.len(), ancilla_key)?;
    let inputs: Vec<CMatrix> = ensemble.states().map(|s| s.matrix().clone()).collect();
    Ok(backward_step_with(&inputs, &ensemble.weights(), step, step.theta(), &ancillas, mode))
}

pub(crate) fn backward_step_with(
    inputs: &[CMatrix],
    weights: &[f64],
    step: &CircuitStep,
    theta: &[f64],
    ancillas: &[PureStateVector],
    mode: MeasurementMode,
) -> WeightedEnsemble {
    let pass = StepPass::run(step, theta, inputs, ancillas);
    collect_branches(&pass, weights, mode).0
}

/// Trainable chain `Ũ_T, …, Ũ_1`; `steps[0]` is `Ũ_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardPipeline {
    steps: Vec<CircuitStep>,
}

impl BackwardPipeline {
    pub fn new(steps: Vec<CircuitStep>) -> Result<Self> {
        let first = steps.first().ok_or_else(|| Error::InvalidArgument("pipeline needs at least one step".into()))?;
        for s in &steps {
            if s.n_data() != first.n_data() || s.n_anc() != first.n_anc() {
                return Err(Error::InvalidArgument("steps disagree on register sizes".into()));
            }
        }
        Ok(Self { steps })
    }

    pub fn n_data(&self) -> usize {
        self.steps[0].n_data()
    }

    /// Number of diffusion steps `T`.
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// `Ũ_t` for `t` in `1..=T`.
    pub fn step(&self, t: usize) -> &CircuitStep {
        &self.steps[self.steps.len() - t]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut CircuitStep {
        let n = self.steps.len();
        &mut self.steps[n - t]
    }

    pub fn steps(&self) -> &[CircuitStep] {
        &self.steps
    }

    pub fn total_params(&self) -> usize {
        self.steps.iter().map(CircuitStep::n_params).sum()
    }
}

/// Keys for one generation run; step `t` uses `key.with_step(t)`.
#[derive(Clone, Copy, Debug)]
pub struct GenerationKeys {
    pub ancilla: StreamKey,
    pub measure: StreamKey,
}

/// `{ρ̃_m}` from `n_samples` maximally mixed inputs through `Ũ_T … Ũ_{m+1}`.
pub fn generate(
    pipeline: &BackwardPipeline,
    down_to: usize,
    n_samples: usize,
    enumerate: bool,
    keys: GenerationKeys,
) -> Result<WeightedEnsemble> {
    Ok(generate_with_trace(pipeline, down_to, n_samples, enumerate, keys)?.pop().unwrap())
}

/// Like [`generate`] but returns every intermediate ensemble `{ρ̃_T}, …, {ρ̃_m}`.
pub fn generate_with_trace(
    pipeline: &BackwardPipeline,
    down_to: usize,
    n_samples: usize,
    enumerate: bool,
    keys: GenerationKeys,
) -> Result<Vec<WeightedEnsemble>> {
    let t_max = pipeline.depth();
    if down_to >= t_max {
        return Err(Error::InvalidArgument(format!("target step {down_to} outside 0..{t_max}")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let start = DensityMatrix::maximally_mixed(pipeline.n_data())?;
    let mut current = WeightedEnsemble::uniform(vec![start; n_samples])?;
    let mut trace = vec![current.clone()];
    for t in (down_to + 1..=t_max).rev() {
        let mode =
            if enumerate { MeasurementMode::Enumerate } else { MeasurementMode::Stochastic(keys.measure.with_step(t)) };
        current = backward_step(&current, pipeline.step(t), mode, keys.ancilla.with_step(t))?;
        trace.push(current.clone());
    }
    Ok(trace)
}

/// `T · L · (n_data + n_anc) · 2`.
pub fn parameter_count(n_data: usize, n_anc: usize, layers: usize, steps: usize) -> usize {
    steps * layers * (n_data + n_anc) * 2
}

/// Ancilla amplitudes as a plain vector, for serialization.
pub fn amplitudes_of(psi: &PureStateVector) -> DVector<Complex64> {
    psi.amplitudes().clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::state::testutil::{random_mixed, random_pure};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn key(p: u64) -> StreamKey {
        StreamKey::new(5, Purpose::Other(p))
    }

    fn random_step(n_data: usize, n_anc: usize, layers: usize, kind: AncillaKind, seed: usize) -> CircuitStep {
        let mut r = key(99).sample(seed);
        let theta = (0..layers * (n_data + n_anc) * 2).map(|_| r.random_range(-PI..PI)).collect();
        CircuitStep::new(n_data, n_anc, layers, theta, kind).unwrap()
    }

    /// Gate-by-gate oracle: explicit Kronecker-product matrices multiplied in order.
    fn oracle_unitary(step: &CircuitStep) -> CMatrix {
        let nq = step.n_qubits();
        let id2 = CMatrix::identity(2, 2);
        let embed = |q: usize, g: &CMatrix| {
            let mut m = CMatrix::identity(1, 1);
            for k in 0..nq {
                m = m.kronecker(if k == q { g } else { &id2 });
            }
            m
        };
        let d = 1 << nq;
        let mut u = CMatrix::identity(d, d);
        for layer in 0..step.layers() {
            for q in 0..nq {
                for axis in [Axis::X, Axis::Y] {
                    let th = step.theta()[step.param_index(layer, q, axis)];
                    let (s, co) = (th / 2.0).sin_cos();
                    let g = match axis {
                        Axis::X => CMatrix::from_row_slice(2, 2, &[c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)]),
                        Axis::Y => CMatrix::from_row_slice(2, 2, &[c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0)]),
                    };
                    u = embed(q, &g) * u;
                }
            }
            for q in 0..nq - 1 {
                let cz = CMatrix::from_fn(d, d, |i, j| {
                    if i != j {
                        c(0.0, 0.0)
                    } else if (i >> (nq - 1 - q)) & 1 == 1 && (i >> (nq - 2 - q)) & 1 == 1 {
                        c(-1.0, 0.0)
                    } else {
                        c(1.0, 0.0)
                    }
                });
                u = cz * u;
            }
        }
        u
    }

    #[test]
    fn unitary_matches_gate_by_gate_oracle() {
        for (seed, (nd, na, l)) in [(1, 1, 1), (1, 2, 2), (2, 1, 3), (2, 2, 2)].into_iter().enumerate() {
            let step = random_step(nd, na, l, AncillaKind::AllZero, seed);
            let u = step.unitary();
            assert!((&u - oracle_unitary(&step)).camax() <= 1e-10);
            let d = u.nrows();
            assert!((&u * u.adjoint() - CMatrix::identity(d, d)).camax() <= 1e-12);
        }
    }

    #[test]
    fn zero_angles_leave_only_cz_chain() {
        let step = CircuitStep::zeros(2, 1, 2, AncillaKind::AllZero).unwrap();
        let u = step.unitary();
        // two layers of CZ cancel
        assert!((&u - CMatrix::identity(8, 8)).camax() < 1e-15);
        let step = CircuitStep::zeros(2, 1, 1, AncillaKind::AllZero).unwrap();
        assert!((&step.unitary() - oracle_unitary(&step)).camax() < 1e-15);
        // diagonal input is untouched by a CZ chain
        let rho = DensityMatrix::from_pure(&PureStateVector::zero(3));
        let out = apply_step_unitary(&rho, &step).unwrap();
        assert!((out.matrix() - rho.matrix()).camax() < 1e-15);
    }

    #[test]
    fn x_rotation_by_pi_flips() {
        let mut theta = vec![0.0; 2];
        theta[0] = PI;
        let step = CircuitStep::new(1, 0, 1, theta, AncillaKind::AllZero).unwrap();
        let zero = DensityMatrix::from_pure(&PureStateVector::zero(1));
        let out = apply_step_unitary(&zero, &step).unwrap();
        assert_abs_diff_eq!(out.matrix()[(1, 1)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.matrix()[(0, 0)].re, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unitary_preserves_purity() {
        let mut r = key(1).sample(0);
        for seed in 0..10 {
            let step = random_step(2, 1, 2, AncillaKind::AllZero, seed);
            let rho = random_mixed(3, 3, &mut r);
            let out = apply_step_unitary(&rho, &step).unwrap();
            out.validate().unwrap();
            assert!((out.purity() - rho.purity()).abs() <= 1e-10);
        }
        let step = random_step(2, 1, 2, AncillaKind::AllZero, 0);
        assert!(apply_step_unitary(&DensityMatrix::maximally_mixed(2).unwrap(), &step).is_err());
    }

    #[test]
    fn step_shape_errors() {
        assert!(CircuitStep::new(1, 1, 1, vec![0.0; 3], AncillaKind::AllZero).is_err());
        assert!(CircuitStep::new(1, 1, 1, vec![f64::NAN, 0.0, 0.0, 0.0], AncillaKind::AllZero).is_err());
        assert!(CircuitStep::zeros(1, 0, 1, AncillaKind::HaarFirst).is_err());
        assert!(CircuitStep::zeros(6, 5, 1, AncillaKind::AllZero).is_err());
    }

    #[test]
    fn ancilla_preparation() {
        let z = prepare_ancilla(AncillaKind::AllZero, 2, &mut key(2).sample(0)).unwrap();
        assert_eq!(z.amplitudes().as_slice(), &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let h = prepare_ancilla(AncillaKind::HaarFirst, 2, &mut key(2).sample(1)).unwrap();
        assert!((h.amplitudes().norm() - 1.0).abs() < 1e-12);
        assert_eq!(h.amplitudes()[1], c(0.0, 0.0));
        assert_eq!(h.amplitudes()[3], c(0.0, 0.0));
        assert!(prepare_ancilla(AncillaKind::HaarFirst, 0, &mut key(2).sample(0)).is_err());
    }

    #[test]
    fn haar_ancilla_is_maximally_mixed_on_average() {
        let n = 100_000;
        let mut mean = CMatrix::zeros(2, 2);
        for i in 0..n {
            let h = prepare_ancilla(AncillaKind::HaarFirst, 2, &mut key(3).sample(i)).unwrap();
            let red = DensityMatrix::from_pure(&h).partial_trace(&[0]).unwrap();
            mean += red.matrix();
        }
        mean /= c(n as f64, 0.0);
        let half = CMatrix::identity(2, 2) * c(0.5, 0.0);
        assert!((mean - half).camax() < 0.02);
    }

    #[test]
    fn measuring_product_state_keeps_data() {
        let mut r = key(4).sample(0);
        let data = random_mixed(1, 2, &mut r);
        let anc = DensityMatrix::from_pure(&PureStateVector::zero(2));
        let full = data.tensor(&anc).unwrap();
        let out = measure_ancillas(&full, 2, MeasurementMode::Enumerate, 0).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.members()[0].0.matrix() - data.matrix()).camax() < 1e-15);
        assert_abs_diff_eq!(out.members()[0].1, 1.0);
    }

    #[test]
    fn measuring_bell_pair_branches() {
        let s = 1.0 / 2f64.sqrt();
        let bell = DensityMatrix::from_pure(
            &PureStateVector::new(DVector::from_vec(vec![c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)])).unwrap(),
        );
        let out = measure_ancillas(&bell, 1, MeasurementMode::Enumerate, 0).unwrap();
        assert_eq!(out.len(), 2);
        for (k, (rho, w)) in out.members().iter().enumerate() {
            assert_abs_diff_eq!(*w, 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(rho.matrix()[(k, k)].re, 1.0, epsilon = 1e-15);
        }
        assert!(measure_ancillas(&bell, 0, MeasurementMode::Enumerate, 0).is_err());
        assert!(measure_ancillas(&bell, 2, MeasurementMode::Enumerate, 0).is_err());
    }

    /// `Σ_b p_b ρ_b` against dephasing the ancilla then tracing it out.
    fn check_dephased_aggregate(full: &DensityMatrix, n_data: usize, n_anc: usize) {
        let out = measure_ancillas(full, n_anc, MeasurementMode::Enumerate, 0).unwrap();
        let mut agg = CMatrix::zeros(1 << n_data, 1 << n_data);
        for (rho, w) in out.members() {
            agg += rho.matrix() * c(*w, 0.0);
        }
        let nq = n_data + n_anc;
        let mask = (1usize << n_anc) - 1;
        let m = full.matrix();
        let dephased =
            CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if i & mask == j & mask { m[(i, j)] } else { c(0.0, 0.0) });
        let keep: Vec<usize> = (0..n_data).collect();
        let oracle = DensityMatrix::from_trusted(dephased).partial_trace(&keep).unwrap();
        let _ = nq;
        assert!((agg - oracle.matrix()).camax() <= 1e-10);
    }

    #[test]
    fn enumerate_aggregate_matches_dephased_trace() {
        let mut r = key(5).sample(0);
        check_dephased_aggregate(&random_mixed(3, 8, &mut r), 2, 1);
        for seed in 0..20 {
            let step = random_step(2, 2, 1, AncillaKind::AllZero, seed);
            let data = random_mixed(2, 3, &mut r);
            let full = data.tensor(&DensityMatrix::from_pure(&PureStateVector::zero(2))).unwrap();
            let after = apply_step_unitary(&full, &step).unwrap();
            check_dephased_aggregate(&after, 2, 2);
        }
    }

    #[test]
    fn stochastic_frequencies_match_born_weights() {
        let step = random_step(1, 2, 2, AncillaKind::AllZero, 7);
        let data = DensityMatrix::maximally_mixed(1).unwrap();
        let full = data.tensor(&DensityMatrix::from_pure(&PureStateVector::zero(2))).unwrap();
        let after = apply_step_unitary(&full, &step).unwrap();
        let exact = outcome_blocks(after.matrix(), 2).iter().map(trace_re).collect::<Vec<_>>();
        let runs = 10_000;
        let mut counts = [0usize; 4];
        let k = key(6);
        for i in 0..runs {
            let u: f64 = k.sample(i).random();
            counts[inverse_cdf(&exact, u)] += 1;
        }
        for b in 0..4 {
            let p = exact[b];
            let sigma = (p * (1.0 - p) / runs as f64).sqrt();
            let freq = counts[b] as f64 / runs as f64;
            assert!((freq - p).abs() <= 5.0 * sigma + 1e-12, "outcome {b}: {freq} vs {p}");
        }
    }

    #[test]
    fn fast_pass_matches_density_route() {
        let mut r = key(7).sample(0);
        for (seed, kind) in [(0, AncillaKind::AllZero), (1, AncillaKind::HaarFirst)] {
            let step = random_step(2, 2, 2, kind, seed);
            let members: Vec<_> = (0..3).map(|_| random_mixed(2, 2, &mut r)).collect();
            let ens = WeightedEnsemble::new(members.iter().cloned().zip([0.2, 0.3, 0.5]).collect()).unwrap();
            let akey = key(8);
            let fast = backward_step(&ens, &step, MeasurementMode::Enumerate, akey).unwrap();
            fast.validate().unwrap();
            let mut slow = Vec::new();
            for (i, (rho, w)) in ens.members().iter().enumerate() {
                let anc = prepare_ancilla(kind, 2, &mut akey.sample(i)).unwrap();
                let full = rho.tensor(&DensityMatrix::from_pure(&anc)).unwrap();
                let out =
                    measure_ancillas(&apply_step_unitary(&full, &step).unwrap(), 2, MeasurementMode::Enumerate, 0)
                        .unwrap();
                for (s, p) in out.members() {
                    slow.push((s.clone(), w * p));
                }
            }
            assert_eq!(fast.len(), slow.len());
            for ((a, wa), (b, wb)) in fast.members().iter().zip(&slow) {
                assert!((a.matrix() - b.matrix()).camax() < 1e-12);
                assert_abs_diff_eq!(*wa, *wb, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_circuit_on_maximally_mixed_input() {
        // θ = 0, one layer: U is the CZ chain, which fixes I ⊗ |0⟩⟨0|, so every
        // branch but b = 0 is empty and the data block stays I/d.
        let step = CircuitStep::zeros(2, 1, 1, AncillaKind::AllZero).unwrap();
        let ens = WeightedEnsemble::uniform(vec![DensityMatrix::maximally_mixed(2).unwrap(); 3]).unwrap();
        let out = backward_step(&ens, &step, MeasurementMode::Enumerate, key(9)).unwrap();
        let u = oracle_unitary(&step);
        let full = DensityMatrix::maximally_mixed(2)
            .unwrap()
            .tensor(&DensityMatrix::from_pure(&PureStateVector::zero(1)))
            .unwrap();
        let conj = DensityMatrix::from_trusted(&u * full.matrix() * u.adjoint());
        let reduced = measure_ancillas(&conj, 1, MeasurementMode::Enumerate, 0).unwrap();
        assert_eq!(out.len(), 3 * reduced.len());
        for (rho, _) in out.members() {
            assert!((rho.matrix() - reduced.members()[0].0.matrix()).camax() < 1e-14);
        }
        assert_abs_diff_eq!(out.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stochastic_step_is_deterministic() {
        let step = random_step(1, 2, 2, AncillaKind::HaarFirst, 3);
        let ens = WeightedEnsemble::uniform(vec![DensityMatrix::maximally_mixed(1).unwrap(); 5]).unwrap();
        let mode = MeasurementMode::Stochastic(key(10));
        let a = backward_step(&ens, &step, mode, key(11)).unwrap();
        let b = backward_step(&ens, &step, mode, key(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn generation_branching_bound() {
        let steps = (0..3).map(|s| random_step(1, 2, 2, AncillaKind::AllZero, 20 + s)).collect();
        let pipe = BackwardPipeline::new(steps).unwrap();
        let keys = GenerationKeys { ancilla: key(12), measure: key(13) };
        let one = generate(&pipe, 2, 1, true, keys).unwrap();
        assert!(one.len() <= 4);
        let two = generate(&pipe, 1, 1, true, keys).unwrap();
        assert!(two.len() <= 16);
        assert_abs_diff_eq!(two.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        two.validate().unwrap();
        assert!(generate(&pipe, 3, 1, true, keys).is_err());
        let a = generate(&pipe, 0, 4, false, keys).unwrap();
        let b = generate(&pipe, 0, 4, false, keys).unwrap();
        assert_eq!(a, b);
        // base case: one hop equals backward_step on maximally mixed copies
        let start = WeightedEnsemble::uniform(vec![DensityMatrix::maximally_mixed(1).unwrap(); 2]).unwrap();
        let hop = backward_step(&start, pipe.step(3), MeasurementMode::Enumerate, keys.ancilla.with_step(3)).unwrap();
        assert_eq!(generate(&pipe, 2, 2, true, keys).unwrap(), hop);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(4, 2, 12, 6), 864);
        assert_eq!(parameter_count(4, 6, 21, 2), 840);
        assert_eq!(parameter_count(1, 2, 4, 6), 144);
    }

    #[test]
    fn pure_branch_weights_sum_to_one() {
        let mut r = key(14).sample(0);
        let step = random_step(2, 1, 2, AncillaKind::AllZero, 9);
        let ens = WeightedEnsemble::uniform(vec![random_pure(2, &mut r), random_pure(2, &mut r)]).unwrap();
        let out = backward_step(&ens, &step, MeasurementMode::Enumerate, key(15)).unwrap();
        out.validate().unwrap();
    }
}
