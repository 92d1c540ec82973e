//! Dense density matrices and single-state metrics.
//!
//! Qubit 0 is the most significant bit of a basis index. When registers are
//! combined with [`DensityMatrix::tensor`] the left operand keeps the high
//! bits, so ancillas appended to a data register occupy the low bits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest register held as a dense density matrix.
pub const QUBIT_CAP: usize = 10;

/// Tolerance for the Hermitian, trace and positivity checks.
pub const STATE_TOL: f64 = 1e-9;

pub type CMatrix = DMatrix<Complex64>;

#[inline]
pub(crate) fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub(crate) fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::InvalidState(format!("dimension {dim} is not a power of two")));
    }
    Ok(dim.trailing_zeros() as usize)
}

fn check_cap(n: usize) -> Result<()> {
    if n > QUBIT_CAP {
        return Err(Error::QubitCap { requested: n, cap: QUBIT_CAP });
    }
    Ok(())
}

/// `(m + m†) / 2`, in place.
pub(crate) fn hermitize(m: &mut CMatrix) {
    let d = m.nrows();
    for i in 0..d {
        m[(i, i)].im = 0.0;
        for j in (i + 1)..d {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

pub(crate) fn trace_re(m: &CMatrix) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// `Tr(a b)` for square matrices of equal size, without forming the product.
pub(crate) fn trace_of_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let d = a.nrows();
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..d {
        for i in 0..d {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `Tr(a²)` for a Hermitian `a`.
pub(crate) fn hermitian_square_trace(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// A validated density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix {
    n_qubits: usize,
    matrix: CMatrix,
}

impl DensityMatrix {
    /// Validates `matrix` against all three density-matrix invariants.
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidState(format!("matrix is {}x{}, not square", matrix.nrows(), matrix.ncols())));
        }
        let n_qubits = qubits_for_dim(matrix.nrows())?;
        check_cap(n_qubits)?;
        let rho = Self { n_qubits, matrix };
        rho.validate()?;
        Ok(rho)
    }

    /// Skips validation; the caller guarantees the invariants up to rounding.
    /// The matrix is re-Hermitized.
    pub(crate) fn from_trusted(mut matrix: CMatrix) -> Self {
        let n_qubits = matrix.nrows().trailing_zeros() as usize;
        hermitize(&mut matrix);
        Self { n_qubits, matrix }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        let d = m.nrows();
        let mut herm = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                herm = herm.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if !herm.is_finite() || herm > STATE_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {herm:e})")));
        }
        let tr = trace_re(m);
        if (tr - 1.0).abs() > STATE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min_eig = self.eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < -STATE_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut m = self.matrix.clone();
        hermitize(&mut m);
        SymmetricEigen::new(m).eigenvalues.iter().cloned().collect()
    }

    /// `I / 2^n`.
    pub fn maximally_mixed(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 {
            return Err(Error::InvalidArgument("qubit count must be at least 1".into()));
        }
        check_cap(n_qubits)?;
        let d = 1usize << n_qubits;
        Ok(Self { n_qubits, matrix: CMatrix::identity(d, d) * c(1.0 / d as f64, 0.0) })
    }

    /// Rank-one projector `|ψ⟩⟨ψ|`.
    pub fn from_pure(psi: &PureStateVector) -> Self {
        let a = psi.amplitudes();
        Self::from_trusted(a * a.adjoint())
    }

    /// Kronecker product `self ⊗ other`; `self` occupies the high qubits.
    pub fn tensor(&self, other: &DensityMatrix) -> Result<Self> {
        check_cap(self.n_qubits + other.n_qubits)?;
        Ok(Self { n_qubits: self.n_qubits + other.n_qubits, matrix: self.matrix.kronecker(&other.matrix) })
    }

    /// Reduced state on the qubits in `keep`, listed in increasing order.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<Self> {
        let n = self.n_qubits;
        if keep.is_empty() {
            return Err(Error::InvalidIndexSet("keep set is empty".into()));
        }
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != keep.len() || *sorted.last().unwrap() >= n {
            return Err(Error::InvalidIndexSet(format!("{keep:?} for a {n}-qubit state")));
        }
        let traced: Vec<usize> = (0..n).filter(|q| !sorted.contains(q)).collect();
        let bit = |q: usize| 1usize << (n - 1 - q);
        let spread = |bits: usize, qubits: &[usize]| -> usize {
            qubits
                .iter()
                .enumerate()
                .filter(|(k, _)| bits >> (qubits.len() - 1 - k) & 1 == 1)
                .map(|(_, &q)| bit(q))
                .sum()
        };
        let dk = 1usize << sorted.len();
        let dt = 1usize << traced.len();
        let keep_idx: Vec<usize> = (0..dk).map(|b| spread(b, &sorted)).collect();
        let trace_idx: Vec<usize> = (0..dt).map(|b| spread(b, &traced)).collect();
        let mut out = CMatrix::zeros(dk, dk);
        for (i, &ki) in keep_idx.iter().enumerate() {
            for (j, &kj) in keep_idx.iter().enumerate() {
                out[(i, j)] = trace_idx.iter().map(|&t| self.matrix[(ki | t, kj | t)]).sum();
            }
        }
        Ok(Self::from_trusted(out))
    }

    /// `Tr ρ²`.
    pub fn purity(&self) -> f64 {
        hermitian_square_trace(&self.matrix)
    }

    /// `Tr(ρσ)`; the imaginary part is checked to vanish and discarded.
    pub fn trace_product(&self, other: &DensityMatrix) -> Result<f64> {
        self.same_dim(other)?;
        let z = trace_of_product(&self.matrix, &other.matrix);
        if z.im.abs() > 1e-10 {
            return Err(Error::InvalidState(format!("Tr(ρσ) has imaginary part {:e}", z.im)));
        }
        Ok(z.re)
    }

    /// Superfidelity `Tr(ρσ) + √((1 − Tr ρ²)(1 − Tr σ²))`.
    pub fn superfidelity(&self, other: &DensityMatrix) -> Result<f64> {
        let overlap = self.trace_product(other)?;
        Ok(superfidelity_parts(overlap, self.purity(), other.purity()))
    }

    /// Uhlmann fidelity `[Tr √(√ρ σ √ρ)]²`.
    pub fn uhlmann_fidelity(&self, other: &DensityMatrix) -> Result<f64> {
        self.same_dim(other)?;
        let prod = psd_sqrt(&self.matrix) * psd_sqrt(&other.matrix);
        let s: f64 = prod.singular_values().iter().sum();
        Ok((s * s).min(1.0))
    }

    /// `(Tr ρX, Tr ρY, Tr ρZ)` for a single qubit.
    pub fn bloch_coordinates(&self) -> Result<BlochVector> {
        if self.n_qubits != 1 {
            return Err(Error::InvalidArgument(format!(
                "Bloch coordinates need one qubit, state has {}",
                self.n_qubits
            )));
        }
        let m = &self.matrix;
        let off = m[(1, 0)];
        Ok(BlochVector { x: 2.0 * off.re, y: 2.0 * off.im, z: (m[(0, 0)] - m[(1, 1)]).re })
    }

    fn same_dim(&self, other: &DensityMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }
}

/// Roundoff allowance subtracted from `1 − Tr ρ²` before any square root.
/// A pure state computes to `1 − Tr ρ² ≈ 1e-16`, whose root would add
/// `1e-8` of noise to every superfidelity.
pub const PURITY_ROUNDOFF: f64 = 1e-13;

/// `√(1 − Tr ρ² − τ)` from the purity, zero below the allowance `τ`.
#[inline]
pub fn mixedness_from_purity(purity: f64) -> f64 {
    (1.0 - purity - PURITY_ROUNDOFF).max(0.0).sqrt()
}

/// Superfidelity from its scalar ingredients.
#[inline]
pub fn superfidelity_parts(overlap: f64, purity_a: f64, purity_b: f64) -> f64 {
    overlap + mixedness_from_purity(purity_a) * mixedness_from_purity(purity_b)
}

fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let mut h = m.clone();
    hermitize(&mut h);
    let eig = SymmetricEigen::new(h);
    let d = m.nrows();
    // eigenvalues at roundoff level would come back as ~1e-8 after the root
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = 64.0 * f64::EPSILON * top.max(f64::MIN_POSITIVE);
    let mut out = CMatrix::zeros(d, d);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= floor {
            continue;
        }
        let s = l.sqrt();
        let v = eig.eigenvectors.column(k);
        out += (v * v.adjoint()) * c(s, 0.0);
    }
    out
}

/// Normalized state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PureStateVector {
    n_qubits: usize,
    amplitudes: DVector<Complex64>,
}

impl PureStateVector {
    /// Requires unit norm within `1e-12`.
    pub fn new(amplitudes: DVector<Complex64>) -> Result<Self> {
        let n_qubits = qubits_for_dim(amplitudes.len())?;
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidState(format!("state vector norm {norm} is not 1")));
        }
        Ok(Self { n_qubits, amplitudes })
    }

    /// Rescales to unit norm.
    pub fn normalized(amplitudes: DVector<Complex64>) -> Result<Self> {
        let norm = amplitudes.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidState("cannot normalize a zero vector".into()));
        }
        Self::new(amplitudes.unscale(norm))
    }

    /// `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Self {
        let mut a = DVector::zeros(1 << n_qubits);
        a[0] = c(1.0, 0.0);
        Self { n_qubits, amplitudes: a }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &DVector<Complex64> {
        &self.amplitudes
    }

    pub fn kron(&self, other: &PureStateVector) -> Self {
        Self { n_qubits: self.n_qubits + other.n_qubits, amplitudes: self.amplitudes.kronecker(&other.amplitudes) }
    }

    /// `|⟨self|other⟩|²`.
    pub fn overlap_sq(&self, other: &PureStateVector) -> f64 {
        self.amplitudes.dotc(&other.amplitudes).norm_sqr()
    }
}

/// Haar-random pure state: a normalized vector of i.i.d. standard complex Gaussians.
pub fn haar_random_pure<R: Rng + ?Sized>(n_qubits: usize, rng: &mut R) -> Result<PureStateVector> {
    if n_qubits == 0 {
        return Err(Error::InvalidArgument("qubit count must be at least 1".into()));
    }
    let d = 1usize << n_qubits;
    let v = DVector::from_fn(d, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im)
    });
    PureStateVector::normalized(v)
}

/// Bloch-sphere coordinates of a single-qubit state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Inverse map `(I + xX + yY + zZ) / 2`.
    pub fn to_density(&self) -> Result<DensityMatrix> {
        if self.norm() > 1.0 + STATE_TOL {
            return Err(Error::InvalidState(format!("Bloch vector length {} > 1", self.norm())));
        }
        let m = CMatrix::from_row_slice(
            2,
            2,
            &[
                c(0.5 * (1.0 + self.z), 0.0),
                c(0.5 * self.x, -0.5 * self.y),
                c(0.5 * self.x, 0.5 * self.y),
                c(0.5 * (1.0 - self.z), 0.0),
            ],
        );
        DensityMatrix::new(m)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Random full-rank mixed state: `A A† / Tr(A A†)` with Gaussian `A`.
    pub fn random_mixed<R: Rng>(n: usize, rank: usize, rng: &mut R) -> DensityMatrix {
        let d = 1 << n;
        let a = CMatrix::from_fn(d, rank, |_, _| {
            c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        });
        let m = &a * a.adjoint();
        let tr = trace_re(&m);
        DensityMatrix::new(m.unscale(tr)).unwrap()
    }

    pub fn random_pure<R: Rng>(n: usize, rng: &mut R) -> DensityMatrix {
        DensityMatrix::from_pure(&haar_random_pure(n, rng).unwrap())
    }
}
