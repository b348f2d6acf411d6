//! Exact ground states of Pauli-sum Hamiltonians for validation.
//!
//! Below [`EdOptions::dense_below`] qubits the Hamiltonian is expanded into a
//! dense matrix and diagonalized directly; above it a matrix-free Lanczos
//! iteration is used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{self, KrylovError, KrylovOptions, C64, ZERO};
use crate::model::PauliSum;

#[derive(Debug, Error, PartialEq)]
pub enum EdError {
    #[error("{n} qubits exceeds the exact-diagonalization cap of {cap}")]
    TooManyQubits { n: usize, cap: usize },
    #[error("state has dimension {got}, Hamiltonian needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state is not normalized (norm {0})")]
    NotNormalized(f64),
    #[error(transparent)]
    Krylov(#[from] KrylovError),
}

/// Normalized state vector on `N` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    amplitudes: Vec<C64>,
}

impl DenseState {
    pub fn new(amplitudes: Vec<C64>) -> Result<Self, EdError> {
        let n = linalg::norm(&amplitudes);
        if (n - 1.0).abs() > 1e-12 || !amplitudes.len().is_power_of_two() {
            return Err(EdError::NotNormalized(n));
        }
        Ok(DenseState { amplitudes })
    }

    /// Computational basis state `|bits>` (bit `q` is qubit `q`).
    pub fn basis(num_qubits: usize, bits: usize) -> Self {
        let mut a = vec![ZERO; 1 << num_qubits];
        a[bits] = C64::from(1.0);
        DenseState { amplitudes: a }
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn num_qubits(&self) -> usize {
        self.amplitudes.len().trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdOptions {
    pub max_qubits: usize,
    /// Use the dense eigensolver for fewer qubits than this.
    pub dense_below: usize,
    pub krylov: KrylovOptions,
    pub seed: u64,
}

impl Default for EdOptions {
    fn default() -> Self {
        EdOptions {
            max_qubits: 16,
            dense_below: 11,
            krylov: KrylovOptions {
                max_basis: 150,
                max_restarts: 20,
                tol: 1e-9,
            },
            seed: 0x5eed,
        }
    }
}

pub fn ground_state(h: &PauliSum) -> Result<(f64, DenseState), EdError> {
    ground_state_with(h, &EdOptions::default())
}

pub fn ground_state_with(h: &PauliSum, opts: &EdOptions) -> Result<(f64, DenseState), EdError> {
    let n = h.num_qubits();
    if n > opts.max_qubits {
        return Err(EdError::TooManyQubits {
            n,
            cap: opts.max_qubits,
        });
    }
    if n < opts.dense_below {
        dense_ground_state(h)
    } else {
        lanczos_ground_state(h, opts)
    }
}

/// Full dense diagonalization.
pub fn dense_ground_state(h: &PauliSum) -> Result<(f64, DenseState), EdError> {
    let m = linalg::dense_matrix(h);
    let (e, v) = linalg::dense_lowest(&m);
    Ok((e, DenseState { amplitudes: v }))
}

/// Matrix-free Lanczos from a seeded random start vector.
pub fn lanczos_ground_state(h: &PauliSum, opts: &EdOptions) -> Result<(f64, DenseState), EdError> {
    let dim = 1usize << h.num_qubits();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = linalg::random_unit_vector(dim, &mut rng);
    let pair = linalg::lowest_eigenpair(dim, |x, y| linalg::apply_pauli_sum(h, x, y), &start, opts.krylov)?;
    // Lanczos residual estimates drift; confirm against an explicit one.
    let mut hv = vec![ZERO; dim];
    linalg::apply_pauli_sum(h, &pair.vector, &mut hv);
    let residual = hv
        .iter()
        .zip(&pair.vector)
        .map(|(a, b)| (a - b * pair.value).norm_sqr())
        .sum::<f64>()
        .sqrt();
    if residual > 1e-8 {
        return Err(KrylovError::NotConverged {
            residual,
            iterations: pair.iterations,
        }
        .into());
    }
    Ok((
        pair.value,
        DenseState {
            amplitudes: pair.vector,
        },
    ))
}

/// `<psi|H|psi>`.
pub fn expectation_exact(state: &DenseState, h: &PauliSum) -> Result<f64, EdError> {
    let dim = 1usize << h.num_qubits();
    if state.amplitudes.len() != dim {
        return Err(EdError::DimensionMismatch {
            expected: dim,
            got: state.amplitudes.len(),
        });
    }
    let total: C64 = h
        .terms()
        .iter()
        .map(|t| linalg::pauli_string_expectation(t, &state.amplitudes) * t.coefficient())
        .sum();
    debug_assert!(total.im.abs() < 1e-10 * (1.0 + h.one_norm()));
    Ok(total.re)
}
