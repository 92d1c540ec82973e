//! Oracles that check the library from outside: brute-force assignment,
//! dual bounds for transport plans and direct random-state samplers.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use std::f64::consts::PI;

use qdiffuse::ansatz::{draw_ancillas, AncillaKind, CircuitStep, MeasurementMode, WeightedEnsemble};
use qdiffuse::losses::DistanceKind;
use qdiffuse::rng::{Purpose, StreamKey};
use qdiffuse::state::{haar_random_pure, CMatrix, DensityMatrix};
use qdiffuse::trainer::StepProblem;
use qdiffuse::transport::{CostMatrix, TransportPlan};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `A A† / Tr(A A†)` with a Gaussian `d × rank` matrix `A`.
pub fn random_mixed<R: Rng>(n: usize, rank: usize, rng: &mut R) -> DensityMatrix {
    let d = 1usize << n;
    let a = CMatrix::from_fn(d, rank, |_, _| {
        Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let m = &a * a.adjoint();
    let tr: f64 = (0..d).map(|i| m[(i, i)].re).sum();
    DensityMatrix::new(m.unscale(tr)).unwrap()
}

pub fn random_pure<R: Rng>(n: usize, rng: &mut R) -> DensityMatrix {
    DensityMatrix::from_pure(&haar_random_pure(n, rng).unwrap())
}

/// Members of mixed rank, random positive weights.
pub fn random_ensemble<R: Rng>(n: usize, size: usize, rng: &mut R) -> WeightedEnsemble {
    let d = 1usize << n;
    let members = (0..size)
        .map(|_| {
            let rank = rng.random_range(1..=d);
            (random_mixed(n, rank, rng), rng.random_range(0.1..1.0))
        })
        .collect::<Vec<_>>();
    let total: f64 = members.iter().map(|m| m.1).sum();
    WeightedEnsemble::new(members.into_iter().map(|(s, w)| (s, w / total)).collect()).unwrap()
}

pub fn random_cost<R: Rng>(v: usize, w: usize, rng: &mut R) -> CostMatrix {
    CostMatrix::from_fn(v, w, |_, _| rng.random::<f64>()).unwrap()
}

/// `min_π Σ_i C[i, π(i)] / v`; the uniform square transport optimum lies at
/// a permutation matrix.
pub fn brute_force_assignment(c: &CostMatrix) -> f64 {
    let v = c.rows();
    let mut perm: Vec<usize> = (0..v).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, c, &mut best);
    best / v as f64
}

fn permute(perm: &mut Vec<usize>, k: usize, c: &CostMatrix, best: &mut f64) {
    if k == perm.len() {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        *best = best.min(total);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, c, best);
        perm.swap(k, i);
    }
}

/// Lower bound from the best column duals for the returned row duals:
/// `v_j = min_i (C_ij − u_i)` is feasible whatever `u` is, so
/// `Σ r u + Σ s v` bounds the optimum from below.
pub fn dual_bound(c: &CostMatrix, r: &[f64], s: &[f64], u: &[f64]) -> f64 {
    let v: Vec<f64> =
        (0..c.cols()).map(|j| (0..c.rows()).map(|i| c.get(i, j) - u[i]).fold(f64::INFINITY, f64::min)).collect();
    r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
}

/// Plan feasibility: nonnegative with the requested marginals.
pub fn plan_is_feasible(p: &TransportPlan, r: &[f64], s: &[f64], tol: f64) -> bool {
    let nonneg = (0..p.rows()).all(|i| (0..p.cols()).all(|j| p.get(i, j) >= -tol));
    let rows = p.row_sums().iter().zip(r).all(|(a, b)| (a - b).abs() <= tol);
    let cols = p.col_sums().iter().zip(s).all(|(a, b)| (a - b).abs() <= tol);
    nonneg && rows && cols
}

pub fn primal_value(p: &TransportPlan, c: &CostMatrix) -> f64 {
    (0..p.rows()).flat_map(|i| (0..p.cols()).map(move |j| (i, j))).map(|(i, j)| p.get(i, j) * c.get(i, j)).sum()
}

pub fn simplex_weights<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let x: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let t: f64 = x.iter().sum();
    x.into_iter().map(|y| y / t).collect()
}

pub fn max_abs_diff(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub struct StepCase {
    pub step: CircuitStep,
    pub inputs: WeightedEnsemble,
    pub targets: WeightedEnsemble,
    pub theta: Vec<f64>,
    pub kind: AncillaKind,
    pub loss: DistanceKind,
}

/// Twenty shapes covering both losses, both ancilla kinds, one and two data
/// qubits, one to three ancillas and one to three layers.
pub fn gradient_cases() -> Vec<StepCase> {
    let mut r = rng(2024);
    (0..20)
        .map(|i| {
            let n = 1 + i % 2;
            let n_a = 1 + (i / 2) % 3;
            let layers = 1 + (i / 3) % 3;
            let kind = if i % 4 < 2 { AncillaKind::AllZero } else { AncillaKind::HaarFirst };
            let loss = if i % 5 < 3 { DistanceKind::Mmd } else { DistanceKind::Wasserstein };
            let step = CircuitStep::zeros(n, n_a, layers, kind).unwrap();
            let inputs = random_ensemble(n, 3, &mut r);
            let targets = random_ensemble(n, 4, &mut r);
            let theta = (0..step.n_params()).map(|_| r.random_range(-PI..PI)).collect();
            StepCase { step, inputs, targets, theta, kind, loss }
        })
        .collect()
}

impl StepCase {
    /// The single-step problem with ancillas keyed by `seed`.
    pub fn problem(&self, mode: MeasurementMode, seed: usize) -> StepProblem<'_> {
        let key = StreamKey::new(5, Purpose::TrainAncilla).with_step(seed);
        let anc = draw_ancillas(self.kind, self.step.n_anc(), self.inputs.len(), key).unwrap();
        StepProblem::new(&self.step, &self.inputs, anc, &self.targets, self.loss, mode).unwrap()
    }
}

/// Kendall rank correlation between position and value; `+1` for a
/// strictly increasing sequence, `−1` for a strictly decreasing one.
pub fn kendall_tau(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (values[j] - values[i]).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}
