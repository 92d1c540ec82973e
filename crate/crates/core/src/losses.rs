//! Superfidelity-based distances between weighted ensembles.
//!
//! Superfidelity splits as `G(ρ, σ) = Tr(ρσ) + s(ρ) s(σ)` with
//! `s(ρ) = √(1 − Tr ρ²)`. Averaging over two ensembles then factorizes:
//! `Ḡ(A, B) = Tr(ρ̄_A ρ̄_B) + m_A m_B` where `ρ̄` is the weighted mean state and
//! `m = Σ w s(ρ)`. The squared MMD becomes `‖ρ̄_A − ρ̄_B‖²_HS + (m_A − m_B)²`,
//! which is why it is never negative and costs `O(n d²)` instead of `O(n² d²)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::WeightedEnsemble;
use crate::error::{Error, Result};
use crate::state::{c, hermitian_square_trace, mixedness_from_purity, CMatrix};
use crate::transport::{solve_transport, solve_transport_from, CostMatrix, TransportPlan};

/// Floor on `1 − Tr ρ²` when differentiating `s(ρ)`.
pub const MIXEDNESS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Mmd,
    Wasserstein,
}

impl DistanceKind {
    pub fn label(self) -> &'static str {
        match self {
            DistanceKind::Mmd => "mmd",
            DistanceKind::Wasserstein => "wasserstein",
        }
    }
}

/// How self-similarity terms treat coincident pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// All pairs, including `i = j`.
    #[default]
    Biased,
    /// Coincident pairs dropped and the rest renormalized by `1 − Σ w²`.
    Unbiased,
}

/// `Re Tr(ab)` for Hermitian `a`, `b`.
#[inline]
pub(crate) fn hs_inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// `s(ρ)`; the roundoff shift keeps its derivative equal to `−ρ / s`.
#[inline]
pub(crate) fn mixedness(rho: &CMatrix) -> f64 {
    mixedness_from_purity(hermitian_square_trace(rho))
}

/// Mean state and mean mixedness of an ensemble given as raw parts.
pub(crate) struct Moments {
    pub mean: CMatrix,
    pub mix: f64,
    pub mix_each: Vec<f64>,
    pub weight_sq: f64,
}

pub(crate) fn moments(states: &[CMatrix], weights: &[f64]) -> Moments {
    let d = states[0].nrows();
    let mut mean = CMatrix::zeros(d, d);
    let mut mix = 0.0;
    let mut mix_each = Vec::with_capacity(states.len());
    for (rho, &w) in states.iter().zip(weights) {
        mean += rho * c(w, 0.0);
        let s = mixedness(rho);
        mix += w * s;
        mix_each.push(s);
    }
    Moments { mean, mix, mix_each, weight_sq: weights.iter().map(|w| w * w).sum() }
}

fn parts(e: &WeightedEnsemble) -> (Vec<CMatrix>, Vec<f64>) {
    (e.states().map(|s| s.matrix().clone()).collect(), e.weights())
}

fn same_dim(a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(())
}

/// `Σ_i Σ_j w^A_i w^B_j G(ρ_i, σ_j)`.
pub fn mean_superfidelity(a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<f64> {
    same_dim(a, b)?;
    let (sa, wa) = parts(a);
    let (sb, wb) = parts(b);
    let (ma, mb) = (moments(&sa, &wa), moments(&sb, &wb));
    Ok(hs_inner(&ma.mean, &mb.mean) + ma.mix * mb.mix)
}

/// `Ḡ(A, A)` with coincident pairs excluded. Needs at least two members with
/// nonzero weight.
pub fn mean_superfidelity_unbiased(a: &WeightedEnsemble) -> Result<f64> {
    let (sa, wa) = parts(a);
    let m = moments(&sa, &wa);
    let rest = 1.0 - m.weight_sq;
    if rest <= 1e-12 {
        return Err(Error::InvalidArgument("unbiased estimate needs two or more weighted members".into()));
    }
    Ok((hermitian_square_trace(&m.mean) + m.mix * m.mix - m.weight_sq) / rest)
}

/// `Ḡ(A,A) + Ḡ(B,B) − 2Ḡ(A,B)`.
pub fn mmd_distance(a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<f64> {
    mmd_distance_with(a, b, Estimator::Biased)
}

pub fn mmd_distance_with(a: &WeightedEnsemble, b: &WeightedEnsemble, estimator: Estimator) -> Result<f64> {
    same_dim(a, b)?;
    match estimator {
        Estimator::Biased => {
            let (sa, wa) = parts(a);
            let (sb, wb) = parts(b);
            Ok(mmd_raw(&moments(&sa, &wa), &moments(&sb, &wb)))
        }
        Estimator::Unbiased => {
            Ok(mean_superfidelity_unbiased(a)? + mean_superfidelity_unbiased(b)? - 2.0 * mean_superfidelity(a, b)?)
        }
    }
}

pub(crate) fn mmd_raw(a: &Moments, b: &Moments) -> f64 {
    let diff = &a.mean - &b.mean;
    let dm = a.mix - b.mix;
    hermitian_square_trace(&diff) + dm * dm
}

/// `C[i][j] = 1 − G(ρ_i, σ_j)`, clamped to `[0, 1]`.
pub fn cost_matrix(a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<CostMatrix> {
    same_dim(a, b)?;
    let (sa, _) = parts(a);
    let (sb, _) = parts(b);
    Ok(cost_raw(&sa, &sb))
}

pub(crate) fn cost_raw(a: &[CMatrix], b: &[CMatrix]) -> CostMatrix {
    let mix_b: Vec<f64> = b.iter().map(mixedness).collect();
    let data: Vec<f64> = a
        .par_iter()
        .flat_map_iter(|rho| {
            let s = mixedness(rho);
            b.iter().zip(&mix_b).map(move |(sigma, t)| (1.0 - hs_inner(rho, sigma) - s * t).clamp(0.0, 1.0))
        })
        .collect();
    CostMatrix::new(a.len(), b.len(), data).expect("shape is consistent by construction")
}

/// Optimal transport plan between the ensembles under the superfidelity cost.
pub fn wasserstein_plan(a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<TransportPlan> {
    let cost = cost_matrix(a, b)?;
    solve_transport(&cost, &a.weights(), &b.weights())
}

/// Minimum transport cost between the ensembles.
pub fn wasserstein(a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<f64> {
    Ok(wasserstein_plan(a, b)?.value)
}

pub fn distance(kind: DistanceKind, a: &WeightedEnsemble, b: &WeightedEnsemble) -> Result<f64> {
    match kind {
        DistanceKind::Mmd => mmd_distance(a, b),
        DistanceKind::Wasserstein => wasserstein(a, b),
    }
}

/// Loss value and its derivatives with respect to the first ensemble:
/// `weights[i] = ∂L/∂w_i` and `states[i] = G_i` with `dL = Tr(G_i dρ_i)`.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub value: f64,
    pub weights: Vec<f64>,
    pub states: Vec<CMatrix>,
    /// Optimal transport basis, for warm-starting the next solve.
    pub basis: Option<Vec<(usize, usize)>>,
}

/// Distance between `(states, weights)` and a fixed target, with gradient.
/// Weights are treated as free: the caller projects onto whatever constraint
/// links them. `warm` seeds the transport solver with an earlier basis.
pub fn distance_with_gradient(
    kind: DistanceKind,
    states: &[CMatrix],
    weights: &[f64],
    target: &WeightedEnsemble,
    warm: Option<&[(usize, usize)]>,
) -> Result<LossGradient> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: states.len().max(1), found: weights.len() });
    }
    if states[0].nrows() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), found: states[0].nrows() });
    }
    let (tb, wb) = parts(target);
    let out = match kind {
        DistanceKind::Mmd => mmd_gradient(states, weights, &tb, &wb),
        DistanceKind::Wasserstein => wasserstein_gradient(states, weights, &tb, &wb, warm)?,
    };
    if !out.value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", kind.label())));
    }
    Ok(out)
}

fn mmd_gradient(sa: &[CMatrix], wa: &[f64], sb: &[CMatrix], wb: &[f64]) -> LossGradient {
    let (ma, mb) = (moments(sa, wa), moments(sb, wb));
    let diff = &ma.mean - &mb.mean;
    let delta = ma.mix - mb.mix;
    let value = hermitian_square_trace(&diff) + delta * delta;
    let (weights, states) = sa
        .par_iter()
        .zip(wa)
        .zip(&ma.mix_each)
        .map(|((rho, &w), &s)| {
            let dw = 2.0 * hs_inner(&diff, rho) + 2.0 * delta * s;
            let inv_s = 1.0 / s.max(MIXEDNESS_FLOOR.sqrt());
            let g = (&diff * c(2.0 * w, 0.0)) - rho * c(2.0 * w * delta * inv_s, 0.0);
            (dw, g)
        })
        .unzip();
    LossGradient { value, weights, states, basis: None }
}

fn wasserstein_gradient(
    sa: &[CMatrix],
    wa: &[f64],
    sb: &[CMatrix],
    wb: &[f64],
    warm: Option<&[(usize, usize)]>,
) -> Result<LossGradient> {
    let cost = cost_raw(sa, sb);
    let total: f64 = wa.iter().sum();
    // Weights arriving here sum to one up to rounding; the solver wants exact mass.
    let r: Vec<f64> = wa.iter().map(|w| w / total).collect();
    let plan = match warm {
        Some(basis) => solve_transport_from(&cost, &r, wb, basis)?,
        None => solve_transport(&cost, &r, wb)?,
    };
    let mix_b: Vec<f64> = sb.iter().map(mixedness).collect();
    let mut flows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sa.len()];
    for (i, j, f) in plan.flows() {
        flows[i].push((j, f));
    }
    let d = sa[0].nrows();
    let states = sa
        .par_iter()
        .zip(&flows)
        .map(|(rho, row)| {
            let s = mixedness(rho);
            let inv_s = 1.0 / s.max(MIXEDNESS_FLOOR.sqrt());
            let mut g = CMatrix::zeros(d, d);
            let mut coef = 0.0;
            for &(j, f) in row {
                g -= &sb[j] * c(f, 0.0);
                coef += f * mix_b[j];
            }
            g += rho * c(coef * inv_s, 0.0);
            g
        })
        .collect();
    Ok(LossGradient {
        value: plan.value,
        weights: plan.row_potentials.clone(),
        states,
        basis: Some(plan.basis().to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use crate::state::testutil::{random_mixed, random_pure};
    use crate::state::{DensityMatrix, PureStateVector};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rng(i: usize) -> rand_chacha::ChaCha8Rng {
        StreamKey::new(11, Purpose::Other(3)).sample(i)
    }

    fn random_ensemble(n: usize, qubits: usize, r: &mut impl Rng) -> WeightedEnsemble {
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let members = (0..n)
            .map(|k| {
                let rank = if qubits == 1 { 1 + k % 2 } else { 2 + k % ((1 << qubits) - 1) };
                (random_mixed(qubits, rank, r), raw[k] / total)
            })
            .collect();
        WeightedEnsemble::new(members).unwrap()
    }

    fn double_loop(a: &WeightedEnsemble, b: &WeightedEnsemble) -> f64 {
        let mut acc = 0.0;
        for (x, wx) in a.members() {
            for (y, wy) in b.members() {
                acc += wx * wy * x.superfidelity(y).unwrap();
            }
        }
        acc
    }

    fn zero() -> DensityMatrix {
        DensityMatrix::from_pure(&PureStateVector::zero(1))
    }

    fn one() -> DensityMatrix {
        let v = nalgebra::DVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)]);
        DensityMatrix::from_pure(&PureStateVector::new(v).unwrap())
    }

    fn single(rho: DensityMatrix) -> WeightedEnsemble {
        WeightedEnsemble::uniform(vec![rho]).unwrap()
    }

    #[test]
    fn mean_superfidelity_examples() {
        let a = single(random_mixed(2, 3, &mut rng(0)));
        assert_abs_diff_eq!(mean_superfidelity(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let h = single(DensityMatrix::maximally_mixed(1).unwrap());
        assert_abs_diff_eq!(mean_superfidelity(&single(zero()), &h).unwrap(), 0.5, epsilon = 1e-15);
        let mut r = rng(1);
        for q in [1, 2, 3] {
            let a = random_ensemble(3, q, &mut r);
            let b = random_ensemble(3, q, &mut r);
            assert_abs_diff_eq!(mean_superfidelity(&a, &b).unwrap(), double_loop(&a, &b), epsilon = 1e-12);
            assert_abs_diff_eq!(mean_superfidelity(&a, &a).unwrap(), double_loop(&a, &a), epsilon = 1e-12);
        }
        let b2 = single(DensityMatrix::maximally_mixed(2).unwrap());
        assert!(mean_superfidelity(&h, &b2).is_err());
    }

    #[test]
    fn unbiased_drops_diagonal() {
        let mut r = rng(2);
        let a = random_ensemble(4, 2, &mut r);
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (x, wx)) in a.members().iter().enumerate() {
            for (j, (y, wy)) in a.members().iter().enumerate() {
                if i != j {
                    num += wx * wy * x.superfidelity(y).unwrap();
                    den += wx * wy;
                }
            }
        }
        assert_abs_diff_eq!(mean_superfidelity_unbiased(&a).unwrap(), num / den, epsilon = 1e-12);
        assert!(mean_superfidelity_unbiased(&single(zero())).is_err());
        let b = random_ensemble(3, 2, &mut r);
        let u = mmd_distance_with(&a, &b, Estimator::Unbiased).unwrap();
        assert!(u.is_finite());
    }

    #[test]
    fn mmd_examples() {
        let mut r = rng(3);
        let a = random_ensemble(5, 2, &mut r);
        assert!(mmd_distance(&a, &a).unwrap().abs() <= 1e-10);
        assert_abs_diff_eq!(mmd_distance(&single(zero()), &single(one())).unwrap(), 2.0, epsilon = 1e-14);
        let b = random_ensemble(4, 2, &mut r);
        let oracle = double_loop(&a, &a) + double_loop(&b, &b) - 2.0 * double_loop(&a, &b);
        assert_abs_diff_eq!(mmd_distance(&a, &b).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn cost_matrix_examples() {
        let mut r = rng(4);
        let p = random_pure(1, &mut r);
        // self-cost is the roundoff allowance at most
        assert!(cost_matrix(&single(p.clone()), &single(p)).unwrap().get(0, 0) <= crate::state::PURITY_ROUNDOFF);
        let m = random_ensemble(1, 1, &mut r);
        assert!(cost_matrix(&m, &m).unwrap().get(0, 0) <= 2.0 * crate::state::PURITY_ROUNDOFF);
        let c = cost_matrix(&single(zero()), &single(one())).unwrap();
        assert_abs_diff_eq!(c.get(0, 0), 1.0, epsilon = 1e-15);
        let a = random_ensemble(2, 2, &mut r);
        let b = random_ensemble(3, 2, &mut r);
        let c = cost_matrix(&a, &b).unwrap();
        for (i, (x, _)) in a.members().iter().enumerate() {
            for (j, (y, _)) in b.members().iter().enumerate() {
                assert_abs_diff_eq!(c.get(i, j), 1.0 - x.superfidelity(y).unwrap(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn wasserstein_examples() {
        let mut r = rng(5);
        let a = random_ensemble(6, 2, &mut r);
        assert!(wasserstein(&a, &a).unwrap() <= 1e-9);
        let (x, y) = (random_mixed(2, 2, &mut r), random_mixed(2, 3, &mut r));
        let w = wasserstein(&single(x.clone()), &single(y.clone())).unwrap();
        assert_abs_diff_eq!(w, 1.0 - x.superfidelity(&y).unwrap(), epsilon = 1e-12);
        let b = random_ensemble(4, 2, &mut r);
        let ab = wasserstein(&a, &b).unwrap();
        let ba = wasserstein(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
    }

    fn hermitian_direction(d: usize, r: &mut impl Rng) -> CMatrix {
        let mut m = CMatrix::from_fn(d, d, |_, _| c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        m = &m + m.adjoint();
        m
    }

    fn raw_value(kind: DistanceKind, sa: &[CMatrix], wa: &[f64], target: &WeightedEnsemble) -> f64 {
        distance_with_gradient(kind, sa, wa, target, None).unwrap().value
    }

    fn check_gradient(kind: DistanceKind, seed: usize) {
        let mut r = rng(100 + seed);
        let a = random_ensemble(4, 2, &mut r);
        let t = random_ensemble(3, 2, &mut r);
        let (sa, wa) = parts(&a);
        let g = distance_with_gradient(kind, &sa, &wa, &t, None).unwrap();
        let h = 1e-6;
        for i in 0..sa.len() {
            let dir = hermitian_direction(4, &mut r);
            let mut plus = sa.clone();
            let mut minus = sa.clone();
            plus[i] += &dir * c(h, 0.0);
            minus[i] -= &dir * c(h, 0.0);
            let fd = (raw_value(kind, &plus, &wa, &t) - raw_value(kind, &minus, &wa, &t)) / (2.0 * h);
            assert_abs_diff_eq!(fd, hs_inner(&g.states[i], &dir), epsilon = 1e-6);
        }
        // weight direction that keeps total mass
        let dir: Vec<f64> = {
            let v: Vec<f64> = (0..wa.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| x - mean).collect()
        };
        let shift = |s: f64| wa.iter().zip(&dir).map(|(w, d)| w + s * d).collect::<Vec<_>>();
        let fd = (raw_value(kind, &sa, &shift(h), &t) - raw_value(kind, &sa, &shift(-h), &t)) / (2.0 * h);
        let an: f64 = g.weights.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(fd, an, epsilon = 1e-6);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        for seed in 0..5 {
            check_gradient(DistanceKind::Mmd, seed);
        }
    }

    #[test]
    fn wasserstein_gradient_matches_finite_differences() {
        for seed in 0..5 {
            check_gradient(DistanceKind::Wasserstein, seed);
        }
    }
}
