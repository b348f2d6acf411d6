//! Small numerical helpers shared by the solvers: Pauli-sum application,
//! Kronecker expansion, a Lanczos lowest-eigenpair solver and Haar sampling.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{PauliString, PauliSum};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// `i^k`.
pub fn i_pow(k: u32) -> C64 {
    match k % 4 {
        0 => ONE,
        1 => I,
        2 => -ONE,
        _ => -I,
    }
}

pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `out += coeff * P |v>`.
pub fn apply_pauli_string_add(term: &PauliString, coeff: C64, v: &[C64], out: &mut [C64]) {
    let (x, z, ny) = term.masks();
    let phase = coeff * i_pow(ny);
    for (b, amp) in v.iter().enumerate() {
        if *amp == ZERO {
            continue;
        }
        let sign = if (b as u64 & z).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        out[(b as u64 ^ x) as usize] += phase * sign * amp;
    }
}

/// `out = H |v>`, matrix-free. Terms are accumulated in stored order.
pub fn apply_pauli_sum(h: &PauliSum, v: &[C64], out: &mut [C64]) {
    out.iter_mut().for_each(|o| *o = ZERO);
    for t in h.terms() {
        apply_pauli_string_add(t, C64::from(t.coefficient()), v, out);
    }
}

/// `<v|P|v>` for a single Pauli string.
pub fn pauli_string_expectation(term: &PauliString, v: &[C64]) -> C64 {
    let (x, z, ny) = term.masks();
    let mut acc = ZERO;
    for (b, amp) in v.iter().enumerate() {
        let sign = if (b as u64 & z).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        acc += v[(b as u64 ^ x) as usize].conj() * amp * sign;
    }
    acc * i_pow(ny)
}

/// Dense `2^N x 2^N` matrix of a Pauli sum.
pub fn dense_matrix(h: &PauliSum) -> Mat<C64> {
    let dim = 1usize << h.num_qubits();
    let mut m = Mat::<C64>::zeros(dim, dim);
    for t in h.terms() {
        let (x, z, ny) = t.masks();
        let phase = i_pow(ny) * t.coefficient();
        for b in 0..dim {
            let sign = if (b as u64 & z).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            m[((b as u64 ^ x) as usize, b)] += phase * sign;
        }
    }
    m
}

/// Kronecker product; `a` acts on the more significant index.
pub fn kron(a: &Mat<C64>, b: &Mat<C64>) -> Mat<C64> {
    let (br, bc) = (b.nrows(), b.ncols());
    Mat::from_fn(a.nrows() * br, a.ncols() * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// Haar-distributed unitary via QR of a complex Ginibre matrix with the
/// diagonal phase fix.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Mat<C64> {
    let g = Mat::from_fn(dim, dim, |_, _| {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let qr = g.qr();
    let mut q = qr.compute_thin_Q();
    let r = qr.thin_R();
    for j in 0..dim {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for i in 0..dim {
            q[(i, j)] *= ph;
        }
    }
    q
}

/// Frobenius norm of a dense complex matrix.
pub fn frobenius(m: &Mat<C64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            acc += m[(i, j)].norm_sqr();
        }
    }
    acc.sqrt()
}

/// Row-major `a (m x k) * b (k x n)`.
pub fn matmul_rm(a: &[C64], m: usize, k: usize, b: &[C64], n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * n];
    matmul(
        faer::MatMut::from_row_major_slice_mut(&mut out, m, n),
        Accum::Replace,
        MatRef::from_row_major_slice(a, m, k),
        MatRef::from_row_major_slice(b, k, n),
        ONE,
        Par::Seq,
    );
    out
}

/// Row-major `a^H b` where `a` is stored `k x m` and `b` is `k x n`.
pub fn matmul_rm_adj(a: &[C64], k: usize, m: usize, b: &[C64], n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * n];
    matmul(
        faer::MatMut::from_row_major_slice_mut(&mut out, m, n),
        Accum::Replace,
        MatRef::from_row_major_slice(a, k, m).adjoint(),
        MatRef::from_row_major_slice(b, k, n),
        ONE,
        Par::Seq,
    );
    out
}

/// Row-major `a b^H` where `a` is `m x k` and `b` is stored `n x k`.
pub fn matmul_rm_by_adj(a: &[C64], m: usize, k: usize, b: &[C64], n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * n];
    matmul(
        faer::MatMut::from_row_major_slice_mut(&mut out, m, n),
        Accum::Replace,
        MatRef::from_row_major_slice(a, m, k),
        MatRef::from_row_major_slice(b, n, k).adjoint(),
        ONE,
        Par::Seq,
    );
    out
}

/// Axis permutation of a row-major tensor: output axis `j` is input axis
/// `perm[j]`.
pub fn permute(data: &[C64], dims: &[usize], perm: &[usize]) -> Vec<C64> {
    let rank = dims.len();
    debug_assert_eq!(perm.len(), rank);
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * dims[d + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis as a tight loop
        let st = strides[last];
        for j in 0..out_dims[last] {
            out.push(data[offset + j * st]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_dims[d] {
                break;
            }
            offset -= strides[d] * out_dims[d];
            idx[d] = 0;
        }
    }
}

/// Random unit vector with independent complex Gaussian entries.
pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<C64> {
    let mut v: Vec<C64> = (0..dim)
        .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[derive(Debug, Error, PartialEq)]
pub enum KrylovError {
    #[error("Lanczos did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("non-finite value encountered in Lanczos iteration")]
    NonFinite,
    #[error("start vector has zero norm")]
    ZeroStart,
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovOptions {
    /// Krylov basis size before an explicit restart.
    pub max_basis: usize,
    /// Number of restarts from the current Ritz vector.
    pub max_restarts: usize,
    /// Target residual `||A x - theta x||`.
    pub tol: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            max_basis: 100,
            max_restarts: 0,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<C64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Lowest eigenpair of a Hermitian operator given as a matvec closure.
///
/// Lanczos with full reorthogonalization and explicit restarts from the
/// current Ritz vector. Returns the best Ritz pair even when the residual
/// target is missed; callers decide whether that is an error.
pub fn lowest_eigenpair<F>(
    dim: usize,
    mut matvec: F,
    start: &[C64],
    opts: KrylovOptions,
) -> Result<Eigenpair, KrylovError>
where
    F: FnMut(&[C64], &mut [C64]),
{
    let mut x = start.to_vec();
    let n0 = norm(&x);
    if n0 == 0.0 || !n0.is_finite() {
        return Err(KrylovError::ZeroStart);
    }
    x.iter_mut().for_each(|v| *v /= n0);

    let max_basis = opts.max_basis.min(dim).max(1);
    let mut total_iters = 0;
    let mut best: Option<Eigenpair> = None;

    for _restart in 0..=opts.max_restarts {
        let mut basis: Vec<Vec<C64>> = vec![x.clone()];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut w = vec![ZERO; dim];
        let mut ritz = (0.0, vec![ONE], f64::INFINITY);

        for k in 0..max_basis {
            total_iters += 1;
            matvec(&basis[k], &mut w);
            let alpha = inner(&basis[k], &w).re;
            if !alpha.is_finite() {
                return Err(KrylovError::NonFinite);
            }
            alphas.push(alpha);
            // two passes of classical Gram-Schmidt against the whole basis
            for _ in 0..2 {
                for q in &basis {
                    let c = inner(q, &w);
                    for (wi, qi) in w.iter_mut().zip(q) {
                        *wi -= c * qi;
                    }
                }
            }
            let beta = norm(&w);
            ritz = tridiagonal_lowest(&alphas, &betas);
            let residual = beta * ritz.1.last().map(|s| s.norm()).unwrap_or(0.0);
            ritz.2 = residual;
            let exhausted = beta < 1e-14 || basis.len() == dim;
            if residual < opts.tol || exhausted {
                break;
            }
            betas.push(beta);
            basis.push(w.iter().map(|v| v / beta).collect());
        }

        let mut vec = vec![ZERO; dim];
        for (q, s) in basis.iter().zip(&ritz.1) {
            for (vi, qi) in vec.iter_mut().zip(q) {
                *vi += s * qi;
            }
        }
        let nv = norm(&vec);
        vec.iter_mut().for_each(|v| *v /= nv);
        // the recurrence's residual estimate drifts; measure it directly
        matvec(&vec, &mut w);
        total_iters += 1;
        let value = inner(&vec, &w).re;
        let residual = w
            .iter()
            .zip(&vec)
            .map(|(a, b)| (a - b * value).norm_sqr())
            .sum::<f64>()
            .sqrt();
        if !residual.is_finite() {
            return Err(KrylovError::NonFinite);
        }
        let pair = Eigenpair {
            value,
            vector: vec,
            residual,
            iterations: total_iters,
            converged: residual < opts.tol,
        };
        let done = pair.converged;
        x = pair.vector.clone();
        best = Some(pair);
        if done {
            break;
        }
    }
    Ok(best.expect("at least one Lanczos pass runs"))
}

/// Lowest eigenpair of the symmetric tridiagonal matrix with diagonal
/// `alphas` and off-diagonal `betas` (`betas.len() == alphas.len() - 1`).
fn tridiagonal_lowest(alphas: &[f64], betas: &[f64]) -> (f64, Vec<C64>, f64) {
    let k = alphas.len();
    let t = Mat::<f64>::from_fn(k, k, |i, j| {
        if i == j {
            alphas[i]
        } else if i + 1 == j {
            betas[i]
        } else if j + 1 == i {
            betas[j]
        } else {
            0.0
        }
    });
    let eig = t
        .self_adjoint_eigen(Side::Lower)
        .expect("symmetric tridiagonal eigensolver");
    // eigenvalues come sorted ascending
    let s: Vec<C64> = (0..k).map(|i| C64::from(eig.U()[(i, 0)])).collect();
    (eig.S()[0], s, f64::INFINITY)
}

/// Lowest eigenpair of a dense Hermitian matrix.
pub fn dense_lowest(m: &Mat<C64>) -> (f64, Vec<C64>) {
    let eig = m.self_adjoint_eigen(Side::Lower).expect("Hermitian eigensolver");
    let v = (0..m.nrows()).map(|i| eig.U()[(i, 0)]).collect();
    (eig.S()[0].re, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_heisenberg, SpinGraph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matrix_free_application_matches_dense() {
        let g = SpinGraph::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let h = build_heisenberg(&g, 0.7).unwrap();
        let m = dense_matrix(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_unit_vector(8, &mut rng);
        let mut out = vec![ZERO; 8];
        apply_pauli_sum(&h, &v, &mut out);
        for (r, a) in out.iter().enumerate() {
            let b: C64 = (0..8).map(|c| m[(r, c)] * v[c]).sum();
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn y_phase_convention() {
        // Y|0> = i|1>
        let y = PauliString::from_word("Y", 1.0).unwrap();
        let mut out = vec![ZERO; 2];
        apply_pauli_string_add(&y, ONE, &[ONE, ZERO], &mut out);
        assert_eq!(out, vec![ZERO, I]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let dims = [2, 3, 4];
        let data: Vec<C64> = (0..24).map(|v| C64::from(v as f64)).collect();
        let out = permute(&data, &dims, &[2, 0, 1]);
        for c in 0..4 {
            for a in 0..2 {
                for b in 0..3 {
                    assert_eq!(out[(c * 2 + a) * 3 + b], data[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn row_major_products() {
        let a: Vec<C64> = (0..6).map(|v| C64::new(v as f64, 1.0)).collect();
        let b: Vec<C64> = (0..12).map(|v| C64::new(1.0, -(v as f64))).collect();
        let ab = matmul_rm(&a, 2, 3, &b, 4);
        for i in 0..2 {
            for j in 0..4 {
                let e: C64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((ab[i * 4 + j] - e).norm() < 1e-12);
            }
        }
        // a stored 3x2, a^H b with b 3x4
        let ahb = matmul_rm_adj(&a, 3, 2, &b, 4);
        for i in 0..2 {
            for j in 0..4 {
                let e: C64 = (0..3).map(|k| a[k * 2 + i].conj() * b[k * 4 + j]).sum();
                assert!((ahb[i * 4 + j] - e).norm() < 1e-12);
            }
        }
        // a (2x3) times b^H where b stored 4x3
        let abh = matmul_rm_by_adj(&a, 2, 3, &b, 4);
        for i in 0..2 {
            for j in 0..4 {
                let e: C64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k].conj()).sum();
                assert!((abh[i * 4 + j] - e).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn tridiagonal_keeps_tiny_couplings() {
        // closed-form 2x2 solvers lose the O(beta/gap) eigenvector component
        let (_, s, _) = tridiagonal_lowest(&[-13.962325334754164, -12.752911518155102], &[1.0737947216311826e-8]);
        let expected = 1.0737947216311826e-8 / (-13.962325334754164 + 12.752911518155102);
        assert!((s[1].re / s[0].re - expected).abs() < 1e-15);
    }

    #[test]
    fn haar_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = haar_unitary(4, &mut rng);
        let e = frobenius(&(u.adjoint() * &u - Mat::<C64>::identity(4, 4)));
        assert!(e < 1e-13);
    }

    #[test]
    fn lanczos_matches_dense_on_random_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Mat::from_fn(30, 30, |_, _| {
            C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let h = &a + a.adjoint();
        let (e_dense, _) = dense_lowest(&h);
        let start = random_unit_vector(30, &mut rng);
        let pair = lowest_eigenpair(
            30,
            |x, y| {
                for (r, yr) in y.iter_mut().enumerate() {
                    *yr = (0..30).map(|c| h[(r, c)] * x[c]).sum();
                }
            },
            &start,
            KrylovOptions::default(),
        )
        .unwrap();
        assert!(pair.converged);
        assert!((pair.value - e_dense).abs() < 1e-10);
    }
}
