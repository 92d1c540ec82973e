//! Depolarizing forward diffusion.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{c, trace_re, DensityMatrix};

/// Offset of the cosine schedule when none is configured.
pub const DEFAULT_EPSILON: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    CosineExponent { k: u32, epsilon: f64 },
}

impl ScheduleKind {
    pub fn label(&self) -> String {
        match self {
            ScheduleKind::Linear => "linear".into(),
            ScheduleKind::CosineExponent { k: 1, .. } => "cosine".into(),
            ScheduleKind::CosineExponent { k: 2, .. } => "cosine_square".into(),
            ScheduleKind::CosineExponent { k, .. } => format!("cosine_exponent_{k}"),
        }
    }
}

/// Per-step depolarizing strengths `q_1..q_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    q: Vec<f64>,
}

impl NoiseSchedule {
    /// `q_t = t / T`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let q = (1..=steps).map(|t| t as f64 / steps as f64).collect();
        Ok(Self { kind: ScheduleKind::Linear, q })
    }

    /// `q_t = (1 − ᾱ_t / ᾱ_{t−1})^k` with `ᾱ_t = f(t)/f(0)` and
    /// `f(t) = cos²(((t/T + ε)/(1 + ε)) · π/2)`.
    pub fn cosine_exponent(steps: usize, k: u32, epsilon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("cosine exponent k must be at least 1".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + epsilon) / (1.0 + epsilon)) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        let q = (1..=steps)
            .map(|t| {
                if t == steps {
                    // f(T) vanishes analytically; cos(π/2)² leaves ~1e-33 in floating point.
                    1.0
                } else {
                    (1.0 - alpha_bar[t] / alpha_bar[t - 1]).powi(k as i32)
                }
            })
            .collect();
        Ok(Self { kind: ScheduleKind::CosineExponent { k, epsilon }, q })
    }

    pub fn from_kind(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps),
            ScheduleKind::CosineExponent { k, epsilon } => Self::cosine_exponent(steps, k, epsilon),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.q.len()
    }

    /// `q_t` for `t` in `1..=T`.
    pub fn q(&self, t: usize) -> f64 {
        self.q[t - 1]
    }

    pub fn qs(&self) -> &[f64] {
        &self.q
    }

    /// `a_t = Π_{s ≤ t} (1 − q_s)`, the surviving weight of the initial state.
    pub fn cumulative_mixing(&self, t: usize) -> Result<f64> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 0..={}", self.steps())));
        }
        Ok(self.q[..t].iter().map(|q| 1.0 - q).product())
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("depolarizing parameter {q} outside (0, 1]")));
    }
    Ok(())
}

/// `(1 − q) ρ + q I/d`.
pub fn depolarize(rho: &DensityMatrix, q: f64) -> Result<DensityMatrix> {
    check_q(q)?;
    let d = rho.dim();
    let mut m = rho.matrix() * c(1.0 - q, 0.0);
    for i in 0..d {
        m[(i, i)] += c(q / d as f64, 0.0);
    }
    // keep the trace exact after rescaling
    let tr = trace_re(&m);
    let fix = (1.0 - tr) / d as f64;
    for i in 0..d {
        m[(i, i)].re += fix;
    }
    Ok(DensityMatrix::from_trusted(m))
}

/// One shot of the p-SWAP realization: with probability `q` the register is
/// swapped with a fresh maximally mixed register, otherwise left alone.
pub fn pswap_stochastic<R: Rng + ?Sized>(rho: &DensityMatrix, q: f64, rng: &mut R) -> Result<DensityMatrix> {
    check_q(q)?;
    let u: f64 = rng.random();
    if u < q {
        DensityMatrix::maximally_mixed(rho.n_qubits())
    } else {
        Ok(rho.clone())
    }
}

/// Ensembles `{ρ_0}, …, {ρ_T}` under the exact channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardTrajectory {
    pub ensembles: Vec<Vec<DensityMatrix>>,
    pub schedule: NoiseSchedule,
}

impl ForwardTrajectory {
    pub fn mean_purity(&self, t: usize) -> f64 {
        let e = &self.ensembles[t];
        e.iter().map(DensityMatrix::purity).sum::<f64>() / e.len() as f64
    }

    pub fn mean_purity_curve(&self) -> Vec<f64> {
        (0..self.ensembles.len()).map(|t| self.mean_purity(t)).collect()
    }
}

pub fn forward_trajectory(ensemble0: &[DensityMatrix], schedule: &NoiseSchedule) -> Result<ForwardTrajectory> {
    let first =
        ensemble0.first().ok_or_else(|| Error::InvalidArgument("forward process needs a nonempty ensemble".into()))?;
    for rho in ensemble0 {
        if rho.dim() != first.dim() {
            return Err(Error::DimensionMismatch { expected: first.dim(), found: rho.dim() });
        }
    }
    let mut ensembles = Vec::with_capacity(schedule.steps() + 1);
    ensembles.push(ensemble0.to_vec());
    for t in 1..=schedule.steps() {
        let q = schedule.q(t);
        let next = ensembles[t - 1].iter().map(|rho| depolarize(rho, q)).collect::<Result<Vec<_>>>()?;
        ensembles.push(next);
    }
    Ok(ForwardTrajectory { ensembles, schedule: schedule.clone() })
}

/// Purity of `a ρ_0 + (1 − a) I/d` when `Tr ρ_0² = initial_purity`.
pub fn closed_form_purity(initial_purity: f64, a: f64, dim: usize) -> Result<f64> {
    let d = dim as f64;
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(initial_purity >= 1.0 / d - 1e-12 && initial_purity <= 1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("initial purity {initial_purity} outside [1/{dim}, 1]")));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!("mixing weight {a} outside [0, 1]")));
    }
    Ok(a * a * initial_purity + 2.0 * a * (1.0 - a) / d + (1.0 - a) * (1.0 - a) / d)
}
