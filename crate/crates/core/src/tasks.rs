//! Benchmark datasets: clustered and circular single-qubit ensembles, and
//! transverse-field Ising ground states.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::depolarize;
use crate::rng::StreamKey;
use crate::state::{c, DensityMatrix, PureStateVector};

/// Largest TFIM chain accepted by the dense eigensolver.
pub const TFIM_MAX_QUBITS: usize = 12;

/// Ground spaces with a smaller gap are rejected.
pub const DEGENERACY_GAP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Clustered {
        #[serde(default = "defaults::clustered_q0")]
        q0_max: f64,
        #[serde(default = "defaults::epsilon0")]
        epsilon0: f64,
    },
    Circular {
        #[serde(default = "defaults::circular_q0")]
        q0_max: f64,
    },
    ManyBody {
        #[serde(default = "defaults::g_min")]
        g_min: f64,
        #[serde(default = "defaults::g_max")]
        g_max: f64,
        #[serde(default)]
        boundary: Boundary,
    },
}

mod defaults {
    pub fn clustered_q0() -> f64 {
        0.01
    }
    pub fn epsilon0() -> f64 {
        0.08
    }
    pub fn circular_q0() -> f64 {
        0.04
    }
    pub fn g_min() -> f64 {
        1.8
    }
    pub fn g_max() -> f64 {
        2.2
    }
}

impl TaskSpec {
    pub fn clustered() -> Self {
        TaskSpec::Clustered { q0_max: defaults::clustered_q0(), epsilon0: defaults::epsilon0() }
    }

    pub fn circular() -> Self {
        TaskSpec::Circular { q0_max: defaults::circular_q0() }
    }

    pub fn many_body() -> Self {
        TaskSpec::ManyBody { g_min: defaults::g_min(), g_max: defaults::g_max(), boundary: Boundary::Open }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TaskSpec::Clustered { .. } => "clustered",
            TaskSpec::Circular { .. } => "circular",
            TaskSpec::ManyBody { .. } => "many_body",
        }
    }

    /// Qubit count forced by the task, if any.
    pub fn fixed_qubits(&self) -> Option<usize> {
        match self {
            TaskSpec::ManyBody { .. } => None,
            _ => Some(1),
        }
    }

    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        if let Some(n) = self.fixed_qubits() {
            if n != n_qubits {
                return Err(Error::InvalidArgument(format!(
                    "{} task is defined on {n} qubit, not {n_qubits}",
                    self.label()
                )));
            }
        }
        let in_unit = |name: &str, q: f64| {
            if (0.0..=1.0).contains(&q) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {q} outside [0, 1]")))
            }
        };
        match *self {
            TaskSpec::Clustered { q0_max, epsilon0 } => {
                in_unit("q0_max", q0_max)?;
                if !epsilon0.is_finite() {
                    return Err(Error::InvalidArgument("epsilon0 must be finite".into()));
                }
            }
            TaskSpec::Circular { q0_max } => in_unit("q0_max", q0_max)?,
            TaskSpec::ManyBody { g_min, g_max, .. } => {
                if !(g_min > 1.0 && g_max >= g_min && g_max.is_finite()) {
                    return Err(Error::InvalidArgument(format!("field range [{g_min}, {g_max}) must lie above 1")));
                }
                if !(2..=TFIM_MAX_QUBITS).contains(&n_qubits) {
                    return Err(Error::InvalidArgument(format!("TFIM chain of {n_qubits} qubits")));
                }
            }
        }
        Ok(())
    }

    /// `n_samples` states, sample `i` drawn from `key.sample(i)`.
    pub fn generate(&self, n_qubits: usize, n_samples: usize, key: StreamKey) -> Result<Vec<TaskSample>> {
        self.validate(n_qubits)?;
        match *self {
            TaskSpec::Clustered { q0_max, epsilon0 } => gen_clustered_with(n_samples, q0_max, epsilon0, key),
            TaskSpec::Circular { q0_max } => gen_circular_with(n_samples, q0_max, key),
            TaskSpec::ManyBody { g_min, g_max, boundary } => {
                gen_manybody(n_samples, n_qubits, (g_min, g_max), boundary, key)
            }
        }
    }
}

/// Where a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Clustered { q0: f64, c0_re: f64, c0_im: f64 },
    Circular { q0: f64, theta0: f64 },
    ManyBody { g: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub state: DensityMatrix,
    pub provenance: Provenance,
}

pub fn states_of(samples: &[TaskSample]) -> Vec<DensityMatrix> {
    samples.iter().map(|s| s.state.clone()).collect()
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    Ok(())
}

/// `(1 − q0)|ψ⟩⟨ψ| + q0 I/2` with `|ψ⟩ ∝ |0⟩ + ε0 c0 |1⟩`.
pub fn clustered_state(q0: f64, c0_re: f64, c0_im: f64, epsilon0: f64) -> Result<DensityMatrix> {
    let amps = DVector::from_vec(vec![c(1.0, 0.0), c(epsilon0 * c0_re, epsilon0 * c0_im)]);
    let psi = PureStateVector::normalized(amps)?;
    depolarize(&DensityMatrix::from_pure(&psi), q0)
}

/// `(1 − q0) RY(θ0)|0⟩⟨0|RY(θ0)† + q0 I/2`.
pub fn circular_state(q0: f64, theta0: f64) -> Result<DensityMatrix> {
    let (s, co) = (0.5 * theta0).sin_cos();
    let psi = PureStateVector::new(DVector::from_vec(vec![c(co, 0.0), c(s, 0.0)]))?;
    depolarize(&DensityMatrix::from_pure(&psi), q0)
}

pub fn gen_clustered(n_samples: usize, key: StreamKey) -> Result<Vec<TaskSample>> {
    gen_clustered_with(n_samples, defaults::clustered_q0(), defaults::epsilon0(), key)
}

fn gen_clustered_with(n_samples: usize, q0_max: f64, epsilon0: f64, key: StreamKey) -> Result<Vec<TaskSample>> {
    check_count(n_samples)?;
    (0..n_samples)
        .map(|i| {
            let mut r = key.sample(i);
            let c0_re: f64 = StandardNormal.sample(&mut r);
            let c0_im: f64 = StandardNormal.sample(&mut r);
            let q0 = q0_max * r.random::<f64>();
            Ok(TaskSample {
                state: clustered_state(q0, c0_re, c0_im, epsilon0)?,
                provenance: Provenance::Clustered { q0, c0_re, c0_im },
            })
        })
        .collect()
}

pub fn gen_circular(n_samples: usize, key: StreamKey) -> Result<Vec<TaskSample>> {
    gen_circular_with(n_samples, defaults::circular_q0(), key)
}

fn gen_circular_with(n_samples: usize, q0_max: f64, key: StreamKey) -> Result<Vec<TaskSample>> {
    check_count(n_samples)?;
    (0..n_samples)
        .map(|i| {
            let mut r = key.sample(i);
            let theta0 = std::f64::consts::TAU * r.random::<f64>();
            let q0 = q0_max * r.random::<f64>();
            Ok(TaskSample { state: circular_state(q0, theta0)?, provenance: Provenance::Circular { q0, theta0 } })
        })
        .collect()
}

/// Dense `H = −(Σ Z_i Z_{i+1} + g Σ X_i)`; qubit 0 is the most significant bit.
pub fn tfim_hamiltonian(n: usize, g: f64, boundary: Boundary) -> DMatrix<f64> {
    let d = 1usize << n;
    let bond_count = match boundary {
        Boundary::Open => n.saturating_sub(1),
        Boundary::Periodic if n > 2 => n,
        Boundary::Periodic => n.saturating_sub(1),
    };
    let bit = |k: usize, q: usize| (k >> (n - 1 - q)) & 1;
    let mut h = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut zz = 0.0;
        for b in 0..bond_count {
            let (i, j) = (b, (b + 1) % n);
            zz += if bit(k, i) == bit(k, j) { 1.0 } else { -1.0 };
        }
        h[(k, k)] = -zz;
        for q in 0..n {
            h[(k ^ (1 << (n - 1 - q)), k)] -= g;
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct GroundState {
    pub state: PureStateVector,
    pub energy: f64,
    pub gap: f64,
}

/// Lowest eigenvector of the TFIM chain with its largest amplitude made real positive.
pub fn tfim_ground_state(n: usize, g: f64, boundary: Boundary) -> Result<GroundState> {
    if n == 0 || n > TFIM_MAX_QUBITS {
        return Err(Error::QubitCap { requested: n, cap: TFIM_MAX_QUBITS });
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("transverse field".into()));
    }
    let eig = SymmetricEigen::new(tfim_hamiltonian(n, g, boundary));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let e0 = eig.eigenvalues[order[0]];
    let gap = order.get(1).map_or(f64::INFINITY, |&k| eig.eigenvalues[k] - e0);
    if gap < DEGENERACY_GAP {
        return Err(Error::DegenerateGroundSpace { gap });
    }
    let v = eig.eigenvectors.column(order[0]);
    let mut lead = 0;
    for k in 1..v.len() {
        if v[k].abs() > v[lead].abs() + 1e-14 {
            lead = k;
        }
    }
    let sign = v[lead].signum();
    let amps = DVector::from_iterator(v.len(), v.iter().map(|x| c(sign * x, 0.0)));
    Ok(GroundState { state: PureStateVector::normalized(amps)?, energy: e0, gap })
}

pub fn gen_manybody(
    n_samples: usize,
    n: usize,
    g_range: (f64, f64),
    boundary: Boundary,
    key: StreamKey,
) -> Result<Vec<TaskSample>> {
    check_count(n_samples)?;
    let (lo, hi) = g_range;
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let g = lo + (hi - lo) * key.sample(i).random::<f64>();
            let gs = tfim_ground_state(n, g, boundary)?;
            Ok(TaskSample { state: DensityMatrix::from_pure(&gs.state), provenance: Provenance::ManyBody { g } })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::closed_form_purity;
    use crate::metrics::magnetization_x;
    use crate::rng::Purpose;
    use approx::assert_abs_diff_eq;

    fn key(p: u64) -> StreamKey {
        StreamKey::new(8, Purpose::Other(p))
    }

    #[test]
    fn clustered_samples() {
        let s = gen_clustered(500, key(1)).unwrap();
        for x in &s {
            x.state.validate().unwrap();
            let Provenance::Clustered { q0, .. } = x.provenance else { panic!() };
            assert!((0.0..0.01).contains(&q0));
            assert!(x.state.purity() >= 1.0 - 2.0 * 0.01 - 1e-9);
            assert_abs_diff_eq!(x.state.purity(), closed_form_purity(1.0, 1.0 - q0, 2).unwrap(), epsilon = 1e-10);
        }
        let forced = clustered_state(0.004, 0.0, 0.0, 0.08).unwrap();
        assert_abs_diff_eq!(forced.matrix()[(0, 0)].re, 1.0 - 0.002, epsilon = 1e-15);
        assert_abs_diff_eq!(forced.matrix()[(1, 1)].re, 0.002, epsilon = 1e-15);
        assert_eq!(s, gen_clustered(500, key(1)).unwrap());
        // prefix stability
        assert_eq!(s[..10], gen_clustered(10, key(1)).unwrap()[..]);
    }

    #[test]
    fn circular_samples() {
        for x in gen_circular(500, key(2)).unwrap() {
            x.state.validate().unwrap();
            let Provenance::Circular { q0, .. } = x.provenance else { panic!() };
            let b = x.state.bloch_coordinates().unwrap();
            assert!(b.y.abs() <= 1e-12);
            assert_abs_diff_eq!((b.x * b.x + b.z * b.z).sqrt(), 1.0 - q0, epsilon = 1e-10);
            assert_abs_diff_eq!(x.state.purity(), closed_form_purity(1.0, 1.0 - q0, 2).unwrap(), epsilon = 1e-10);
        }
    }

    /// Pauli strings from explicit Kronecker products.
    fn oracle_hamiltonian(n: usize, g: f64) -> DMatrix<f64> {
        let id = DMatrix::<f64>::identity(2, 2);
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let string = |ops: &[(usize, &DMatrix<f64>)]| {
            let mut m = DMatrix::<f64>::identity(1, 1);
            for q in 0..n {
                let f = ops.iter().find(|(k, _)| *k == q).map_or(&id, |(_, o)| *o);
                m = m.kronecker(f);
            }
            m
        };
        let d = 1 << n;
        let mut h = DMatrix::zeros(d, d);
        for i in 0..n - 1 {
            h -= string(&[(i, &z), (i + 1, &z)]);
        }
        for i in 0..n {
            h -= string(&[(i, &x)]) * g;
        }
        h
    }

    #[test]
    fn hamiltonian_matches_oracle() {
        for n in [2, 3, 4] {
            assert!((tfim_hamiltonian(n, 1.7, Boundary::Open) - oracle_hamiltonian(n, 1.7)).amax() < 1e-15);
        }
        let gs = tfim_ground_state(4, 2.0, Boundary::Open).unwrap();
        let oracle = SymmetricEigen::new(oracle_hamiltonian(4, 2.0)).eigenvalues.min();
        assert_abs_diff_eq!(gs.energy, oracle, epsilon = 1e-10);
    }

    #[test]
    fn ground_state_properties() {
        for (n, g, bc) in
            [(2, 1.5, Boundary::Open), (4, 2.0, Boundary::Open), (4, 1.9, Boundary::Periodic), (5, 2.1, Boundary::Open)]
        {
            let gs = tfim_ground_state(n, g, bc).unwrap();
            let h = tfim_hamiltonian(n, g, bc);
            let v = DVector::from_iterator(1 << n, gs.state.amplitudes().iter().map(|z| z.re));
            assert!((&h * &v - &v * gs.energy).norm() <= 1e-8);
            let lead = v.iamax();
            assert!(v[lead] > 0.0);
        }
        let big = tfim_ground_state(2, 100.0, Boundary::Open).unwrap();
        let plus = PureStateVector::new(DVector::from_element(4, c(0.5, 0.0))).unwrap();
        assert!(big.state.overlap_sq(&plus) >= 1.0 - 1e-3);
        assert!(tfim_ground_state(13, 2.0, Boundary::Open).is_err());
    }

    #[test]
    fn manybody_samples() {
        let s = gen_manybody(200, 4, (1.8, 2.2), Boundary::Open, key(3)).unwrap();
        for x in &s {
            assert_abs_diff_eq!(x.state.purity(), 1.0, epsilon = 1e-10);
            let m = magnetization_x(&x.state).unwrap();
            assert!(m > 0.9 && m < 1.0, "{m}");
        }
        assert_eq!(s, gen_manybody(200, 4, (1.8, 2.2), Boundary::Open, key(3)).unwrap());
    }

    #[test]
    fn magnetization_scan_stays_in_band() {
        for k in 0..=40 {
            let g = 1.8 + 0.01 * k as f64;
            let gs = tfim_ground_state(4, g, Boundary::Open).unwrap();
            let m = magnetization_x(&DensityMatrix::from_pure(&gs.state)).unwrap();
            assert!(m > 0.9 && m < 1.0);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::clustered().validate(2).is_err());
        assert!(TaskSpec::many_body().validate(1).is_err());
        assert!(TaskSpec::ManyBody { g_min: 0.5, g_max: 2.0, boundary: Boundary::Open }.validate(4).is_err());
        assert_eq!(TaskSpec::circular().generate(1, 3, key(4)).unwrap().len(), 3);
    }
}
