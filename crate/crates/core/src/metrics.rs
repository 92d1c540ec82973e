//! Evaluation metrics for generated ensembles.

use serde::{Deserialize, Serialize};

use crate::ansatz::WeightedEnsemble;
use crate::error::{Error, Result};
use crate::losses::wasserstein;
use crate::state::DensityMatrix;

pub const DEFAULT_HISTOGRAM_BINS: usize = 60;

/// How the reported error bars are computed.
pub const ERROR_BAR_METHOD: &str = "standard error of the weighted mean over ensemble members";

/// `Tr(ρ Σ_i X_i) / n`.
pub fn magnetization_x(rho: &DensityMatrix) -> Result<f64> {
    let n = rho.n_qubits();
    let m = rho.matrix();
    let mut acc = 0.0;
    for q in 0..n {
        let flip = 1usize << (n - 1 - q);
        for k in 0..rho.dim() {
            acc += m[(k ^ flip, k)].re;
        }
    }
    Ok(acc / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanWithError {
    pub mean: f64,
    pub std_error: f64,
}

/// Weighted mean with the standard error for effective sample size `1/Σw²`.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<MeanWithError> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: values.len().max(1), found: weights.len() });
    }
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let mean: f64 = values.iter().zip(&w).map(|(v, w)| v * w).sum();
    let n_eff = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    let spread: f64 = values.iter().zip(&w).map(|(v, w)| w * (v - mean) * (v - mean)).sum();
    let std_error = if n_eff > 1.0 + 1e-12 { (spread / (n_eff - 1.0)).sqrt() } else { 0.0 };
    Ok(MeanWithError { mean, std_error })
}

/// Weighted mean of `⟨0|ρ|0⟩` over single-qubit members.
pub fn mean_fidelity_to_zero(ensemble: &WeightedEnsemble) -> Result<MeanWithError> {
    if ensemble.n_qubits() != 1 {
        return Err(Error::InvalidArgument(format!(
            "fidelity to |0⟩ is defined for one qubit, ensemble has {}",
            ensemble.n_qubits()
        )));
    }
    let values: Vec<f64> = ensemble.states().map(|s| s.matrix()[(0, 0)].re).collect();
    weighted_mean(&values, &ensemble.weights())
}

pub fn mean_magnetization_x(ensemble: &WeightedEnsemble) -> Result<MeanWithError> {
    let values = ensemble.states().map(magnetization_x).collect::<Result<Vec<_>>>()?;
    weighted_mean(&values, &ensemble.weights())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    /// Weight per bin; sums to the total ensemble weight.
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; values outside are clamped into the end bins.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN bounds fail too
    pub fn new(values: &[f64], weights: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument(format!("{bins} bins over [{lo}, {hi}]")));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut mass = vec![0.0; bins];
        for (v, w) in values.iter().zip(weights) {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            mass[k] += w;
        }
        Ok(Self { edges, mass })
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let bins = self.mass.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        ((((x - lo) / (hi - lo)) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }

    /// Mass in bins whose lower edge is at least `x`.
    pub fn mass_above(&self, x: f64) -> f64 {
        self.mass.iter().zip(&self.edges).filter(|(_, e)| **e >= x - 1e-12).map(|(m, _)| m).sum()
    }
}

/// Weighted histogram of per-member `M_x` over `[−1, 1]`.
pub fn mx_histogram(ensemble: &WeightedEnsemble, bins: usize) -> Result<Histogram> {
    let values = ensemble.states().map(magnetization_x).collect::<Result<Vec<_>>>()?;
    Histogram::new(&values, &ensemble.weights(), bins, -1.0, 1.0)
}

/// Headline numbers for a generated ensemble against held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fidelity_to_zero: Option<MeanWithError>,
    pub data_fidelity_to_zero: Option<MeanWithError>,
    pub magnetization_x: Option<MeanWithError>,
    pub data_magnetization_x: Option<MeanWithError>,
    pub mean_purity: f64,
    pub data_mean_purity: f64,
    pub wasserstein_to_data: f64,
    pub mx_histogram: Option<Histogram>,
    pub data_mx_histogram: Option<Histogram>,
    pub error_bars: String,
}

impl MetricReport {
    /// Single-qubit ensembles get fidelity to `|0⟩`; all ensembles get `M_x`
    /// and its histogram.
    pub fn compute(generated: &WeightedEnsemble, data: &WeightedEnsemble, bins: usize) -> Result<Self> {
        if generated.dim() != data.dim() {
            return Err(Error::DimensionMismatch { expected: data.dim(), found: generated.dim() });
        }
        let single = generated.n_qubits() == 1;
        let fid = |e: &WeightedEnsemble| if single { mean_fidelity_to_zero(e).map(Some) } else { Ok(None) };
        let multi = !single;
        let mx = |e: &WeightedEnsemble| if multi { mean_magnetization_x(e).map(Some) } else { Ok(None) };
        let hist = |e: &WeightedEnsemble| if multi { mx_histogram(e, bins).map(Some) } else { Ok(None) };
        Ok(Self {
            fidelity_to_zero: fid(generated)?,
            data_fidelity_to_zero: fid(data)?,
            magnetization_x: mx(generated)?,
            data_magnetization_x: mx(data)?,
            mean_purity: generated.mean_purity(),
            data_mean_purity: data.mean_purity(),
            wasserstein_to_data: wasserstein(generated, data)?,
            mx_histogram: hist(generated)?,
            data_mx_histogram: hist(data)?,
            error_bars: ERROR_BAR_METHOD.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{c, PureStateVector};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn plus(n: usize) -> DensityMatrix {
        let d = 1 << n;
        let amp = 1.0 / (d as f64).sqrt();
        DensityMatrix::from_pure(&PureStateVector::new(DVector::from_element(d, c(amp, 0.0))).unwrap())
    }

    #[test]
    fn magnetization_examples() {
        for n in 1..=4 {
            assert_abs_diff_eq!(magnetization_x(&plus(n)).unwrap(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(magnetization_x(&DensityMatrix::maximally_mixed(n).unwrap()).unwrap(), 0.0);
            let zero = DensityMatrix::from_pure(&PureStateVector::zero(n));
            assert_abs_diff_eq!(magnetization_x(&zero).unwrap(), 0.0);
        }
        let b = plus(1).bloch_coordinates().unwrap();
        assert_abs_diff_eq!(magnetization_x(&plus(1)).unwrap(), b.x, epsilon = 1e-12);
    }

    #[test]
    fn fidelity_examples() {
        let zero = DensityMatrix::from_pure(&PureStateVector::zero(1));
        let e = WeightedEnsemble::uniform(vec![zero; 5]).unwrap();
        let f = mean_fidelity_to_zero(&e).unwrap();
        assert_eq!((f.mean, f.std_error), (1.0, 0.0));
        let h = WeightedEnsemble::uniform(vec![DensityMatrix::maximally_mixed(1).unwrap(); 3]).unwrap();
        assert_abs_diff_eq!(mean_fidelity_to_zero(&h).unwrap().mean, 0.5);
        let two = WeightedEnsemble::uniform(vec![DensityMatrix::maximally_mixed(2).unwrap()]).unwrap();
        assert!(mean_fidelity_to_zero(&two).is_err());
    }

    #[test]
    fn standard_error_uniform_weights() {
        let v = [1.0, 2.0, 4.0, 7.0];
        let m = weighted_mean(&v, &[0.25; 4]).unwrap();
        let mean = 3.5;
        let s2 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(m.mean, mean);
        assert_abs_diff_eq!(m.std_error, (s2 / 4.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn histogram_mass() {
        let mixed = WeightedEnsemble::uniform(vec![DensityMatrix::maximally_mixed(2).unwrap(); 4]).unwrap();
        let h = mx_histogram(&mixed, DEFAULT_HISTOGRAM_BINS).unwrap();
        assert_eq!(h.edges.len(), 61);
        assert_abs_diff_eq!(h.mass.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h.mass[h.bin_of(0.0)], 1.0, epsilon = 1e-12);
        let p = WeightedEnsemble::uniform(vec![plus(2)]).unwrap();
        let h = mx_histogram(&p, 60).unwrap();
        assert_abs_diff_eq!(h.mass[59], 1.0);
        assert_abs_diff_eq!(h.mass_above(0.8), 1.0);
    }
}
