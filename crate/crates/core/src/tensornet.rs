//! Matrix product states, matrix product operators and two-site DMRG.
//!
//! Site `i` of every chain is qubit `i`, so a dense amplitude index has
//! `s_i` as bit `i`. Site tensors are stored row-major with layout
//! `(left bond, physical, right bond)`; MPO tensors use
//! `(left bond, out, in, right bond)`.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use faer::MatRef;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{
    self, matmul_rm, matmul_rm_adj, matmul_rm_by_adj, permute, KrylovError, KrylovOptions, C64, ONE, ZERO,
};
use crate::model::{Pauli, PauliSum};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("state has zero norm")]
    ZeroNorm,
    #[error("length mismatch: {0} vs {1} sites")]
    LengthMismatch(usize, usize),
    #[error("bond mismatch at site {site}: {detail}")]
    BondMismatch { site: usize, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("local eigensolver failed: {0}")]
    Eigensolver(#[from] KrylovError),
    #[error("singular value decomposition failed")]
    Svd,
    #[error("malformed MPS file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Gauge of an MPS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalForm {
    None,
    Left,
    Right,
    Mixed(usize),
}

/// Rank-3 site tensor `T[a, s, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTensor {
    left: usize,
    phys: usize,
    right: usize,
    data: Vec<C64>,
}

impl SiteTensor {
    pub fn new(left: usize, phys: usize, right: usize, data: Vec<C64>) -> Result<Self, TensorError> {
        if left == 0 || phys == 0 || right == 0 || data.len() != left * phys * right {
            return Err(TensorError::InvalidArgument(format!(
                "tensor of shape ({left}, {phys}, {right}) cannot hold {} values",
                data.len()
            )));
        }
        Ok(SiteTensor {
            left,
            phys,
            right,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left, self.phys, self.right)
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn get(&self, a: usize, s: usize, b: usize) -> C64 {
        self.data[(a * self.phys + s) * self.right + b]
    }
}

/// Matrix product state on qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsState {
    tensors: Vec<SiteTensor>,
    canonical: CanonicalForm,
}

fn bond_cap(n: usize, bond: usize, chi: usize) -> usize {
    let lo = bond.min(n - bond);
    if lo >= usize::BITS as usize - 1 {
        chi
    } else {
        chi.min(1usize << lo)
    }
}

impl MpsState {
    /// Validates shapes: qubit physical legs, unit boundary bonds and
    /// matching adjacent bonds.
    pub fn from_tensors(tensors: Vec<SiteTensor>, canonical: CanonicalForm) -> Result<Self, TensorError> {
        if tensors.is_empty() {
            return Err(TensorError::InvalidArgument("empty MPS".into()));
        }
        let n = tensors.len();
        for (i, t) in tensors.iter().enumerate() {
            if t.phys != 2 {
                return Err(TensorError::BondMismatch {
                    site: i,
                    detail: format!("physical dimension {} is not 2", t.phys),
                });
            }
            if i == 0 && t.left != 1 {
                return Err(TensorError::BondMismatch {
                    site: 0,
                    detail: format!("left boundary bond is {}", t.left),
                });
            }
            if i + 1 == n && t.right != 1 {
                return Err(TensorError::BondMismatch {
                    site: i,
                    detail: format!("right boundary bond is {}", t.right),
                });
            }
            if i + 1 < n && t.right != tensors[i + 1].left {
                return Err(TensorError::BondMismatch {
                    site: i,
                    detail: format!("right bond {} vs next left bond {}", t.right, tensors[i + 1].left),
                });
            }
        }
        if let CanonicalForm::Mixed(c) = canonical {
            if c >= n {
                return Err(TensorError::InvalidArgument(format!("center {c} out of range")));
            }
        }
        Ok(MpsState { tensors, canonical })
    }

    /// Computational basis product state; `bits[i]` is qubit `i`.
    pub fn product_state(bits: &[u8]) -> Self {
        let tensors = bits
            .iter()
            .map(|&b| {
                let mut d = vec![ZERO; 2];
                d[usize::from(b != 0)] = ONE;
                SiteTensor::new(1, 2, 1, d).unwrap()
            })
            .collect();
        MpsState {
            tensors,
            canonical: CanonicalForm::Right,
        }
    }

    /// Random MPS with complex Gaussian entries and bonds
    /// `min(chi, 2^i, 2^(n-i))`. Not normalized or canonical.
    pub fn random(n: usize, chi: usize, seed: u64) -> Self {
        assert!(n >= 1 && chi >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = (0..n)
            .map(|i| {
                let (l, r) = (bond_cap(n, i, chi), bond_cap(n, i + 1, chi));
                let data = (0..l * 2 * r)
                    .map(|_| {
                        let re: f64 = StandardNormal.sample(&mut rng);
                        let im: f64 = StandardNormal.sample(&mut rng);
                        C64::new(re, im)
                    })
                    .collect();
                SiteTensor::new(l, 2, r, data).unwrap()
            })
            .collect();
        MpsState {
            tensors,
            canonical: CanonicalForm::None,
        }
    }

    /// Exact MPS of a dense state by successive SVDs, truncated to `chi_max`.
    pub fn from_dense(amplitudes: &[C64], chi_max: usize) -> Result<Self, TensorError> {
        let dim = amplitudes.len();
        if !dim.is_power_of_two() || dim < 2 {
            return Err(TensorError::InvalidArgument(format!("dimension {dim} is not 2^n")));
        }
        let n = dim.trailing_zeros() as usize;
        // reorder so that site 0 is the most significant row-major index
        let mut rest: Vec<C64> = (0..dim).map(|k| amplitudes[reverse_bits(k, n)]).collect();
        let mut left = 1usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n - 1 {
            let cols = rest.len() / (left * 2);
            let split = svd_truncate(&rest, left * 2, cols, chi_max, 0.0)?;
            let k = split.s.len();
            tensors.push(SiteTensor::new(left, 2, k, split.u)?);
            rest = scale_rows(&split.vh, &split.s, cols);
            left = k;
        }
        tensors.push(SiteTensor::new(left, 2, 1, rest)?);
        MpsState::from_tensors(tensors, CanonicalForm::Mixed(n - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[SiteTensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &SiteTensor {
        &self.tensors[i]
    }

    pub fn canonical_form(&self) -> CanonicalForm {
        self.canonical
    }

    /// `chi_0 ..= chi_N`.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut b = vec![1];
        b.extend(self.tensors.iter().map(|t| t.right));
        b
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn norm(&self) -> f64 {
        overlap(self, self).re.max(0.0).sqrt()
    }

    /// Dense amplitudes (2^N entries).
    pub fn to_dense(&self) -> Vec<C64> {
        let mut psi = vec![ONE];
        let mut bond = 1;
        let mut span = 1usize;
        for t in &self.tensors {
            let mut next = vec![ZERO; span * 2 * t.right];
            for idx in 0..span {
                for a in 0..bond {
                    let amp = psi[idx * bond + a];
                    if amp == ZERO {
                        continue;
                    }
                    for s in 0..2 {
                        let out = idx + s * span;
                        for b in 0..t.right {
                            next[out * t.right + b] += amp * t.get(a, s, b);
                        }
                    }
                }
            }
            psi = next;
            bond = t.right;
            span *= 2;
        }
        psi
    }

    /// Largest deviation of `sum_{s,b} T[a,s,b] conj(T[a',s,b])` from the
    /// identity over all sites.
    pub fn right_canonical_residual(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| {
                let cols = t.phys * t.right;
                let g = matmul_rm_by_adj(&t.data, t.left, cols, &t.data, t.left);
                identity_deviation(&g, t.left)
            })
            .fold(0.0, f64::max)
    }

    /// Largest deviation from the left-canonical condition.
    pub fn left_canonical_residual(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| {
                let rows = t.left * t.phys;
                let g = matmul_rm_adj(&t.data, rows, t.right, &t.data, t.right);
                identity_deviation(&g, t.right)
            })
            .fold(0.0, f64::max)
    }
}

fn reverse_bits(k: usize, n: usize) -> usize {
    let mut r = 0;
    for q in 0..n {
        if k >> q & 1 == 1 {
            r |= 1 << (n - 1 - q);
        }
    }
    r
}

fn identity_deviation(g: &[C64], d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { ONE } else { ZERO };
            worst = worst.max((g[i * d + j] - target).norm());
        }
    }
    worst
}

fn scale_rows(m: &[C64], s: &[f64], cols: usize) -> Vec<C64> {
    m.chunks(cols)
        .zip(s)
        .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
        .collect()
}

fn scale_cols(m: &[C64], s: &[f64]) -> Vec<C64> {
    let k = s.len();
    m.iter().enumerate().map(|(i, v)| v * s[i % k]).collect()
}

struct Split {
    u: Vec<C64>,
    s: Vec<f64>,
    vh: Vec<C64>,
    discarded: f64,
}

/// Thin SVD of a row-major `m x n` matrix keeping at most `chi_max` values
/// and dropping the smallest ones while their relative weight stays within
/// `cutoff`. At least one value is kept.
fn svd_truncate(a: &[C64], m: usize, n: usize, chi_max: usize, cutoff: f64) -> Result<Split, TensorError> {
    let svd = MatRef::from_row_major_slice(a, m, n)
        .thin_svd()
        .map_err(|_| TensorError::Svd)?;
    let (u, sv, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let k = sv.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| sv[y].re.total_cmp(&sv[x].re));
    let total: f64 = (0..k).map(|i| sv[i].re * sv[i].re).sum();
    let mut keep = k.min(chi_max).max(1);
    let mut dropped: f64 = order[keep..].iter().map(|&i| sv[i].re * sv[i].re).sum();
    while keep > 1 {
        let w = sv[order[keep - 1]].re.powi(2);
        if total > 0.0 && (dropped + w) / total <= cutoff {
            dropped += w;
            keep -= 1;
        } else {
            break;
        }
    }
    let cols = &order[..keep];
    let mut uo = Vec::with_capacity(m * keep);
    for i in 0..m {
        for &c in cols {
            uo.push(u[(i, c)]);
        }
    }
    let mut vho = Vec::with_capacity(keep * n);
    for &c in cols {
        for j in 0..n {
            vho.push(v[(j, c)].conj());
        }
    }
    Ok(Split {
        u: uo,
        s: cols.iter().map(|&c| sv[c].re).collect(),
        vh: vho,
        discarded: if total > 0.0 { dropped / total } else { 0.0 },
    })
}

/// `<a|b>` by transfer-matrix contraction.
fn overlap(a: &MpsState, b: &MpsState) -> C64 {
    // e[a', a] with a' from the bra
    let mut e = vec![ONE];
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        // f[a', (s b)] = e[a', a] B[a, (s b)]
        let f = matmul_rm(&e, ta.left, tb.left, &tb.data, tb.phys * tb.right);
        // g[b', b] = sum_{a', s} conj(A[a', s, b']) f[a', s, b]
        e = matmul_rm_adj(&ta.data, ta.left * ta.phys, ta.right, &f, tb.right);
    }
    e[0]
}

/// Right-canonical form of `mps` by a right-to-left LQ sweep. The result is
/// normalized; the global phase of the input is kept.
pub fn canonicalize_right(mps: &MpsState) -> Result<MpsState, TensorError> {
    let n = mps.len();
    let mut tensors = mps.tensors.clone();
    // carry[a, k]: factor to absorb into the right bond of the next site left
    let mut carry: Option<(Vec<C64>, usize, usize)> = None;
    for i in (0..n).rev() {
        let t = &tensors[i];
        let (l, p, r) = (t.left, t.phys, t.right);
        let m = match &carry {
            None => t.data.clone(),
            Some((c, cr, cc)) => {
                debug_assert_eq!(*cr, r);
                matmul_rm(&t.data, l * p, r, c, *cc)
            }
        };
        let r2 = carry.as_ref().map(|c| c.2).unwrap_or(r);
        let cols = p * r2;
        if i == 0 {
            let nrm = linalg::norm(&m);
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(TensorError::ZeroNorm);
            }
            tensors[0] = SiteTensor::new(1, p, r2, m.iter().map(|v| v / nrm).collect())?;
            break;
        }
        // M = L Q with Q rows orthonormal, via QR of M^H
        let mh = MatRef::from_row_major_slice(&m, l, cols).adjoint().to_owned();
        let qr = mh.qr();
        let q = qr.compute_thin_Q();
        let rr = qr.thin_R();
        let k = q.ncols();
        let mut qh = Vec::with_capacity(k * cols);
        for a in 0..k {
            for j in 0..cols {
                qh.push(q[(j, a)].conj());
            }
        }
        let mut lmat = Vec::with_capacity(l * k);
        for a in 0..l {
            for b in 0..k {
                lmat.push(rr[(b, a)].conj());
            }
        }
        if lmat.iter().all(|v| v.norm() == 0.0) {
            return Err(TensorError::ZeroNorm);
        }
        tensors[i] = SiteTensor::new(k, p, r2, qh)?;
        carry = Some((lmat, l, k));
    }
    MpsState::from_tensors(tensors, CanonicalForm::Right)
}

/// `|<a|b>|^2 / (<a|a><b|b>)`.
pub fn mps_fidelity(a: &MpsState, b: &MpsState) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::LengthMismatch(a.len(), b.len()));
    }
    let na = overlap(a, a).re;
    let nb = overlap(b, b).re;
    if na <= 0.0 || nb <= 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    Ok((overlap(a, b).norm_sqr() / (na * nb)).clamp(0.0, 1.0))
}

/// `<psi| O_0 (x) ... (x) O_{N-1} |psi> / <psi|psi>` for single-site 2x2
/// operators given row-major.
pub fn mps_product_expectation(mps: &MpsState, ops: &[[C64; 4]]) -> Result<C64, TensorError> {
    if ops.len() != mps.len() {
        return Err(TensorError::LengthMismatch(mps.len(), ops.len()));
    }
    let mut e = vec![ONE];
    for (t, op) in mps.tensors.iter().zip(ops) {
        // apply op on the ket: (O T)[a, t, b] = sum_s O[t, s] T[a, s, b]
        let mut ot = vec![ZERO; t.data.len()];
        for a in 0..t.left {
            for tt in 0..2 {
                for s in 0..2 {
                    let o = op[tt * 2 + s];
                    if o == ZERO {
                        continue;
                    }
                    for b in 0..t.right {
                        ot[(a * 2 + tt) * t.right + b] += o * t.get(a, s, b);
                    }
                }
            }
        }
        let f = matmul_rm(&e, t.left, t.left, &ot, 2 * t.right);
        e = matmul_rm_adj(&t.data, t.left * 2, t.right, &f, t.right);
    }
    let nrm = overlap(mps, mps).re;
    if nrm <= 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    Ok(e[0] / nrm)
}

/// Pauli-by-Pauli expectation of a Pauli sum on an MPS.
pub fn mps_pauli_sum_expectation(mps: &MpsState, h: &PauliSum) -> Result<f64, TensorError> {
    if h.num_qubits() != mps.len() {
        return Err(TensorError::LengthMismatch(mps.len(), h.num_qubits()));
    }
    let mut total = ZERO;
    for term in h.terms() {
        let ops: Vec<[C64; 4]> = term.letters().iter().map(|&p| pauli_matrix(p)).collect();
        total += mps_product_expectation(mps, &ops)? * term.coefficient();
    }
    Ok(total.re)
}

/// Row-major 2x2 Pauli matrix.
pub fn pauli_matrix(p: Pauli) -> [C64; 4] {
    let i = C64::new(0.0, 1.0);
    match p {
        Pauli::I => [ONE, ZERO, ZERO, ONE],
        Pauli::X => [ZERO, ONE, ONE, ZERO],
        Pauli::Y => [ZERO, -i, i, ZERO],
        Pauli::Z => [ONE, ZERO, ZERO, -ONE],
    }
}

/// Rank-4 MPO tensor `W[w, t, s, u]` (t = output, s = input).
#[derive(Debug, Clone, PartialEq)]
pub struct MpoTensor {
    left: usize,
    right: usize,
    data: Vec<C64>,
}

impl MpoTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.left, self.right)
    }

    pub fn get(&self, w: usize, t: usize, s: usize, u: usize) -> C64 {
        self.data[(w * 4 + t * 2 + s) * self.right + u]
    }
}

/// Matrix product operator on qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoOperator {
    tensors: Vec<MpoTensor>,
}

impl MpoOperator {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[MpoTensor] {
        &self.tensors
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        let mut b = vec![1];
        b.extend(self.tensors.iter().map(|t| t.right));
        b
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Dense `2^N x 2^N` matrix, row-major. Only sensible for small N.
    pub fn to_dense(&self) -> Vec<C64> {
        // acc[(row, col), w] over the processed sites
        let mut acc = vec![ONE];
        let mut span = 1usize;
        let mut bond = 1usize;
        for t in &self.tensors {
            let nspan = span * 2;
            let mut next = vec![ZERO; nspan * nspan * t.right];
            for row in 0..span {
                for col in 0..span {
                    for w in 0..bond {
                        let v = acc[(row * span + col) * bond + w];
                        if v == ZERO {
                            continue;
                        }
                        for tt in 0..2 {
                            for s in 0..2 {
                                let nr = row + tt * span;
                                let nc = col + s * span;
                                for u in 0..t.right {
                                    next[(nr * nspan + nc) * t.right + u] += v * t.get(w, tt, s, u);
                                }
                            }
                        }
                    }
                }
            }
            acc = next;
            span = nspan;
            bond = t.right;
        }
        acc
    }
}

/// MPO of a Pauli sum.
///
/// Built exactly by a finite automaton whose in-flight states are the
/// distinct term prefixes crossing each bond, so couplings of any range are
/// supported. With `compress_tol > 0` the result is then compressed by an
/// SVD sweep whose total discarded Frobenius norm is at most
/// `compress_tol * ||H||_F`.
pub fn mpo_from_pauli_sum(h: &PauliSum, compress_tol: f64) -> Result<MpoOperator, TensorError> {
    if !(compress_tol >= 0.0) {
        return Err(TensorError::InvalidArgument(format!("compress_tol {compress_tol} < 0")));
    }
    let mpo = automaton_mpo(h);
    if compress_tol > 0.0 && mpo.len() > 1 {
        compress_mpo(&mpo, compress_tol)
    } else {
        Ok(mpo)
    }
}

fn automaton_mpo(h: &PauliSum) -> MpoOperator {
    const READY: usize = 0;
    const DONE: usize = 1;
    let n = h.num_qubits();
    // node ids per bond: bond k sits left of site k
    let mut nodes: Vec<HashMap<(usize, Vec<Pauli>), usize>> = vec![HashMap::new(); n + 1];
    let mut bond_size = vec![2usize; n + 1];
    // transitions[k]: (in state, out state, letter, coefficient) at site k
    let mut transitions: Vec<Vec<(usize, usize, Pauli, f64)>> = vec![Vec::new(); n];
    let node_at = |nodes: &mut Vec<HashMap<(usize, Vec<Pauli>), usize>>,
                   bond_size: &mut Vec<usize>,
                   k: usize,
                   key: (usize, Vec<Pauli>)|
     -> (usize, bool) {
        let next = bond_size[k];
        match nodes[k].get(&key) {
            Some(&id) => (id, false),
            None => {
                nodes[k].insert(key, next);
                bond_size[k] += 1;
                (next, true)
            }
        }
    };
    for term in h.terms() {
        let support = term.support();
        let letters = term.letters();
        if support.is_empty() {
            // identity term: put the constant on site 0
            transitions[0].push((READY, DONE, Pauli::I, term.coefficient()));
            continue;
        }
        let (f, l) = (support[0], *support.last().unwrap());
        if f == l {
            transitions[f].push((READY, DONE, letters[f], term.coefficient()));
            continue;
        }
        let mut prev = READY;
        for k in f..=l {
            if k == l {
                transitions[k].push((prev, DONE, letters[k], term.coefficient()));
            } else {
                let key = (f, letters[f..=k].to_vec());
                let (id, fresh) = node_at(&mut nodes, &mut bond_size, k + 1, key);
                if fresh {
                    transitions[k].push((prev, id, letters[k], 1.0));
                }
                prev = id;
            }
        }
    }
    let mut tensors = Vec::with_capacity(n);
    for k in 0..n {
        let (wl, wr) = (bond_size[k], bond_size[k + 1]);
        let mut data = vec![ZERO; wl * 4 * wr];
        let mut add = |w: usize, u: usize, p: Pauli, c: f64| {
            let m = pauli_matrix(p);
            for ts in 0..4 {
                data[(w * 4 + ts) * wr + u] += m[ts] * c;
            }
        };
        add(READY, READY, Pauli::I, 1.0);
        add(DONE, DONE, Pauli::I, 1.0);
        for &(w, u, p, c) in &transitions[k] {
            add(w, u, p, c);
        }
        tensors.push(MpoTensor {
            left: wl,
            right: wr,
            data,
        });
    }
    // boundaries: keep READY on the left edge and DONE on the right edge
    let first = &tensors[0];
    let wr = first.right;
    let data0: Vec<C64> = first.data[READY * 4 * wr..(READY + 1) * 4 * wr].to_vec();
    tensors[0] = MpoTensor {
        left: 1,
        right: wr,
        data: data0,
    };
    let last = &tensors[n - 1];
    let (wl, wr) = (last.left, last.right);
    let mut datan = Vec::with_capacity(wl * 4);
    for w in 0..wl {
        for ts in 0..4 {
            datan.push(last.data[(w * 4 + ts) * wr + DONE]);
        }
    }
    tensors[n - 1] = MpoTensor {
        left: wl,
        right: 1,
        data: datan,
    };
    MpoOperator { tensors }
}

fn compress_mpo(mpo: &MpoOperator, tol: f64) -> Result<MpoOperator, TensorError> {
    let n = mpo.len();
    let mut t: Vec<MpoTensor> = mpo.tensors.clone();
    // left-orthonormalize sites 0..n-1 by QR, pushing R to the right
    for i in 0..n - 1 {
        let (l, r) = (t[i].left, t[i].right);
        let qr = MatRef::from_row_major_slice(&t[i].data, l * 4, r).qr();
        let q = qr.compute_thin_Q();
        let rr = qr.thin_R();
        let k = q.ncols();
        let mut qd = Vec::with_capacity(l * 4 * k);
        for row in 0..l * 4 {
            for c in 0..k {
                qd.push(q[(row, c)]);
            }
        }
        let mut rd = Vec::with_capacity(k * r);
        for a in 0..k {
            for b in 0..r {
                rd.push(rr[(a, b)]);
            }
        }
        t[i] = MpoTensor {
            left: l,
            right: k,
            data: qd,
        };
        let nx = &t[i + 1];
        let data = matmul_rm(&rd, k, r, &nx.data, 4 * nx.right);
        t[i + 1] = MpoTensor {
            left: k,
            right: nx.right,
            data,
        };
    }
    let total = linalg::norm(&t[n - 1].data);
    let budget = tol * total / (n - 1) as f64;
    // right-to-left truncated SVD sweep
    for i in (1..n).rev() {
        let (l, r) = (t[i].left, t[i].right);
        let cols = 4 * r;
        let split = svd_truncate(&t[i].data, l, cols, usize::MAX, 0.0)?;
        let s2: Vec<f64> = split.s.iter().map(|v| v * v).collect();
        let mut keep = s2.len();
        let mut dropped = 0.0;
        while keep > 1 && (dropped + s2[keep - 1]).sqrt() <= budget {
            dropped += s2[keep - 1];
            keep -= 1;
        }
        let vh: Vec<C64> = split.vh[..keep * cols].to_vec();
        let mut us = Vec::with_capacity(l * keep);
        for a in 0..l {
            for c in 0..keep {
                us.push(split.u[a * split.s.len() + c] * split.s[c]);
            }
        }
        t[i] = MpoTensor {
            left: keep,
            right: r,
            data: vh,
        };
        let pv = &t[i - 1];
        let data = matmul_rm(&pv.data, pv.left * 4, l, &us, keep);
        t[i - 1] = MpoTensor {
            left: pv.left,
            right: keep,
            data,
        };
    }
    Ok(MpoOperator { tensors: t })
}

// ---------------------------------------------------------------------------
// environments

/// Left environment `L[w, a', a]` (bra bond a', ket bond a).
#[derive(Debug, Clone)]
struct Env {
    w: usize,
    bra: usize,
    ket: usize,
    data: Vec<C64>,
}

impl Env {
    fn unit() -> Self {
        Env {
            w: 1,
            bra: 1,
            ket: 1,
            data: vec![ONE],
        }
    }
}

/// `W[w,t,s,u]` as `[(w s), (t u)]`.
fn w_left_major(w: &MpoTensor) -> Vec<C64> {
    permute(&w.data, &[w.left, 2, 2, w.right], &[0, 2, 1, 3])
}

/// `W[w,t,s,u]` as `[(s u), (w t)]`.
fn w_right_major(w: &MpoTensor) -> Vec<C64> {
    permute(&w.data, &[w.left, 2, 2, w.right], &[2, 3, 0, 1])
}

fn extend_left(env: &Env, a: &SiteTensor, w: &MpoTensor) -> Env {
    let (la, p, ra) = a.shape();
    debug_assert_eq!(env.ket, la);
    debug_assert_eq!(env.bra, la);
    // x1[w, a', s, b]
    let x1 = matmul_rm(&env.data, env.w * env.bra, la, &a.data, p * ra);
    let x1p = permute(&x1, &[env.w, la, p, ra], &[1, 3, 0, 2]);
    // x2[a', b, t, u]
    let x2 = matmul_rm(&x1p, la * ra, env.w * p, &w_left_major(w), p * w.right);
    let x2p = permute(&x2, &[la, ra, p, w.right], &[0, 2, 3, 1]);
    // out[b', (u b)]
    let out = matmul_rm_adj(&a.data, la * p, ra, &x2p, w.right * ra);
    Env {
        w: w.right,
        bra: ra,
        ket: ra,
        data: permute(&out, &[ra, w.right, ra], &[1, 0, 2]),
    }
}

/// Right environment `R[b, u, b']` (ket bond b, bra bond b').
fn extend_right(env: &Env, a: &SiteTensor, w: &MpoTensor) -> Env {
    let (la, p, ra) = a.shape();
    // y1[a, s, u, b']
    let y1 = matmul_rm(&a.data, la * p, ra, &env.data, env.w * env.bra);
    let y1p = permute(&y1, &[la, p, env.w, ra], &[0, 3, 1, 2]);
    // y2[a, b', w, t]
    let y2 = matmul_rm(&y1p, la * ra, p * env.w, &w_right_major(w), w.left * p);
    let y2p = permute(&y2, &[la, ra, w.left, p], &[0, 2, 3, 1]);
    let out = matmul_rm_by_adj(&y2p, la * w.left, p * ra, &a.data, la);
    Env {
        w: w.left,
        bra: la,
        ket: la,
        data: out,
    }
}

/// Two-site effective Hamiltonian.
struct TwoSiteHeff<'a> {
    left: &'a Env,
    right: &'a Env,
    /// `W12[(w s1 s2), (t1 t2 u)]`
    w12: Vec<C64>,
    wl: usize,
    wr: usize,
    la: usize,
    lb: usize,
}

impl<'a> TwoSiteHeff<'a> {
    fn new(left: &'a Env, right: &'a Env, w1: &MpoTensor, w2: &MpoTensor) -> Self {
        let (wl, wm, wr) = (w1.left, w1.right, w2.right);
        // w1 as [(w t1 s1), v] times w2 as [v, (t2 s2 u)]
        let prod = matmul_rm(&w1.data, wl * 4, wm, &w2.data, 4 * wr);
        // prod[w, t1, s1, t2, s2, u] -> [w, s1, s2, t1, t2, u]
        let w12 = permute(&prod, &[wl, 2, 2, 2, 2, wr], &[0, 2, 4, 1, 3, 5]);
        TwoSiteHeff {
            left,
            right,
            w12,
            wl,
            wr,
            la: left.ket,
            lb: right.ket,
        }
    }

    fn dim(&self) -> usize {
        self.la * 4 * self.lb
    }

    fn apply(&self, theta: &[C64], out: &mut [C64]) {
        let (la, lb, wl, wr) = (self.la, self.lb, self.wl, self.wr);
        let t1 = matmul_rm(&self.left.data, wl * la, la, theta, 4 * lb);
        // [w, a', s1, s2, b] -> [a', b, w, s1, s2]
        let t1p = permute(&t1, &[wl, la, 2, 2, lb], &[1, 4, 0, 2, 3]);
        let t2 = matmul_rm(&t1p, la * lb, wl * 4, &self.w12, 4 * wr);
        // [a', b, t1, t2, u] -> [a', t1, t2, b, u]
        let t2p = permute(&t2, &[la, lb, 2, 2, wr], &[0, 2, 3, 1, 4]);
        let y = matmul_rm(&t2p, la * 4, lb * wr, &self.right.data, lb);
        out.copy_from_slice(&y);
    }

    fn energy(&self, theta: &[C64]) -> f64 {
        let mut y = vec![ZERO; theta.len()];
        self.apply(theta, &mut y);
        linalg::inner(theta, &y).re / linalg::inner(theta, theta).re
    }
}

/// `<psi|H|psi> / <psi|psi>` by full contraction.
pub fn mps_expectation(mps: &MpsState, mpo: &MpoOperator) -> Result<f64, TensorError> {
    if mps.len() != mpo.len() {
        return Err(TensorError::LengthMismatch(mps.len(), mpo.len()));
    }
    let mut env = Env::unit();
    for (a, w) in mps.tensors.iter().zip(&mpo.tensors) {
        env = extend_left(&env, a, w);
    }
    let nrm = overlap(mps, mps).re;
    if nrm <= 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    Ok(env.data[0].re / nrm)
}

// ---------------------------------------------------------------------------
// DMRG

#[derive(Debug, Clone, Copy)]
pub struct DmrgOptions {
    pub chi_max: usize,
    pub max_sweeps: usize,
    pub energy_tol: f64,
    pub seed: u64,
    /// Discarded-weight threshold for each SVD truncation.
    pub cutoff: f64,
    pub krylov: KrylovOptions,
}

impl DmrgOptions {
    pub fn new(chi_max: usize, max_sweeps: usize, energy_tol: f64, seed: u64) -> Self {
        DmrgOptions {
            chi_max,
            max_sweeps,
            energy_tol,
            seed,
            cutoff: 1e-12,
            krylov: KrylovOptions {
                max_basis: 100,
                max_restarts: 0,
                tol: 1e-9,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DmrgResult {
    pub mps: MpsState,
    pub energy: f64,
    /// State energy after each full sweep.
    pub sweep_energies: Vec<f64>,
    pub converged: bool,
    /// Largest relative discarded weight of any accepted truncation.
    pub max_discarded: f64,
    /// Local steps whose Krylov residual missed the target.
    pub unconverged_local_steps: usize,
    /// Local updates rejected because truncation raised the energy.
    pub rejected_updates: usize,
    pub seed: u64,
}

/// Two-site DMRG ground state of `mpo` from a seeded random MPS.
///
/// Every sweep runs left to right and back. The per-sweep energy is the
/// energy of the truncated state, and a local update that truncation makes
/// worse than the state it replaces is discarded, so the sweep energies
/// never increase.
pub fn dmrg_ground(mpo: &MpoOperator, opts: &DmrgOptions) -> Result<DmrgResult, TensorError> {
    if opts.chi_max < 1 || opts.max_sweeps < 1 {
        return Err(TensorError::InvalidArgument(
            "chi_max and max_sweeps must be at least 1".into(),
        ));
    }
    let n = mpo.len();
    if n == 1 {
        return single_site_ground(mpo, opts.seed);
    }
    let mut mps = canonicalize_right(&MpsState::random(n, opts.chi_max, opts.seed))?;
    let mut lenv: Vec<Env> = vec![Env::unit(); n + 1];
    let mut renv: Vec<Env> = vec![Env::unit(); n + 1];
    for i in (2..n).rev() {
        renv[i] = extend_right(&renv[i + 1], &mps.tensors[i], &mpo.tensors[i]);
    }
    let mut result = DmrgResult {
        mps: mps.clone(),
        energy: f64::INFINITY,
        sweep_energies: Vec::new(),
        converged: false,
        max_discarded: 0.0,
        unconverged_local_steps: 0,
        rejected_updates: 0,
        seed: opts.seed,
    };
    let mut energy = f64::INFINITY;
    for _sweep in 0..opts.max_sweeps {
        for i in 0..n.saturating_sub(2) {
            energy = two_site_step(&mut mps, mpo, &mut lenv, &mut renv, i, true, opts, &mut result)?;
        }
        for i in (0..n - 1).rev() {
            energy = two_site_step(&mut mps, mpo, &mut lenv, &mut renv, i, false, opts, &mut result)?;
        }
        let prev = result.sweep_energies.last().copied();
        result.sweep_energies.push(energy);
        if let Some(p) = prev {
            if (p - energy).abs() < opts.energy_tol {
                result.converged = true;
                break;
            }
        }
    }
    let out = canonicalize_right(&mps)?;
    result.mps = out;
    result.energy = energy;
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn two_site_step(
    mps: &mut MpsState,
    mpo: &MpoOperator,
    lenv: &mut [Env],
    renv: &mut [Env],
    i: usize,
    rightward: bool,
    opts: &DmrgOptions,
    result: &mut DmrgResult,
) -> Result<f64, TensorError> {
    let (a, b) = (&mps.tensors[i], &mps.tensors[i + 1]);
    let (la, _, mid) = a.shape();
    let lb = b.right;
    let theta_old = matmul_rm(&a.data, la * 2, mid, &b.data, 2 * lb);
    let heff = TwoSiteHeff::new(&lenv[i], &renv[i + 2], &mpo.tensors[i], &mpo.tensors[i + 1]);
    let e_old = heff.energy(&theta_old);
    let pair = linalg::lowest_eigenpair(heff.dim(), |x, y| heff.apply(x, y), &theta_old, opts.krylov)?;
    if !pair.converged {
        result.unconverged_local_steps += 1;
    }
    let mut split = svd_truncate(&pair.vector, la * 2, 2 * lb, opts.chi_max, opts.cutoff)?;
    let mut e_new = truncated_energy(&heff, &split, la, lb);
    if e_new > e_old + 1e-12 {
        result.rejected_updates += 1;
        split = svd_truncate(&theta_old, la * 2, 2 * lb, opts.chi_max, opts.cutoff)?;
        e_new = truncated_energy(&heff, &split, la, lb);
    }
    result.max_discarded = result.max_discarded.max(split.discarded);
    let k = split.s.len();
    let nrm = split.s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s: Vec<f64> = split.s.iter().map(|v| v / nrm).collect();
    if rightward {
        mps.tensors[i] = SiteTensor::new(la, 2, k, split.u)?;
        mps.tensors[i + 1] = SiteTensor::new(k, 2, lb, scale_rows(&split.vh, &s, 2 * lb))?;
        lenv[i + 1] = extend_left(&lenv[i], &mps.tensors[i], &mpo.tensors[i]);
        mps.canonical = CanonicalForm::Mixed(i + 1);
    } else {
        mps.tensors[i] = SiteTensor::new(la, 2, k, scale_cols(&split.u, &s))?;
        mps.tensors[i + 1] = SiteTensor::new(k, 2, lb, split.vh)?;
        renv[i + 1] = extend_right(&renv[i + 2], &mps.tensors[i + 1], &mpo.tensors[i + 1]);
        mps.canonical = CanonicalForm::Mixed(i);
    }
    Ok(e_new)
}

fn truncated_energy(heff: &TwoSiteHeff<'_>, split: &Split, la: usize, lb: usize) -> f64 {
    let k = split.s.len();
    let us = scale_cols(&split.u, &split.s);
    let theta = matmul_rm(&us, la * 2, k, &split.vh, 2 * lb);
    heff.energy(&theta)
}

fn single_site_ground(mpo: &MpoOperator, seed: u64) -> Result<DmrgResult, TensorError> {
    let m = mpo.to_dense();
    let mat = faer::Mat::from_fn(2, 2, |r, c| m[r * 2 + c]);
    let (e, v) = linalg::dense_lowest(&mat);
    let mps = MpsState::from_tensors(vec![SiteTensor::new(1, 2, 1, v)?], CanonicalForm::Right)?;
    Ok(DmrgResult {
        mps,
        energy: e,
        sweep_energies: vec![e],
        converged: true,
        max_discarded: 0.0,
        unconverged_local_steps: 0,
        rejected_updates: 0,
        seed,
    })
}

// ---------------------------------------------------------------------------
// serialization

const MAGIC: &[u8; 4] = b"MPSF";
const FORMAT_VERSION: u32 = 1;

/// Writes the MPS container.
///
/// Layout, all integers little-endian `u32`:
/// `"MPSF"`, version, site count N, canonical tag (0 none, 1 left,
/// 2 right, 3 mixed), canonical center, then per site `left phys right`
/// followed by `left*phys*right` complex values as little-endian `f64`
/// pairs `(re, im)` in row-major `(left, phys, right)` order.
pub fn write_mps<W: Write>(mut w: W, mps: &MpsState) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(mps.len() as u32)?;
    let (tag, center) = match mps.canonical {
        CanonicalForm::None => (0, 0),
        CanonicalForm::Left => (1, 0),
        CanonicalForm::Right => (2, 0),
        CanonicalForm::Mixed(c) => (3, c as u32),
    };
    w.write_u32::<LittleEndian>(tag)?;
    w.write_u32::<LittleEndian>(center)?;
    for t in &mps.tensors {
        w.write_u32::<LittleEndian>(t.left as u32)?;
        w.write_u32::<LittleEndian>(t.phys as u32)?;
        w.write_u32::<LittleEndian>(t.right as u32)?;
        for v in &t.data {
            w.write_f64::<LittleEndian>(v.re)?;
            w.write_f64::<LittleEndian>(v.im)?;
        }
    }
    Ok(())
}

pub fn read_mps<R: Read>(mut r: R) -> Result<MpsState, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let tag = r.read_u32::<LittleEndian>()?;
    let center = r.read_u32::<LittleEndian>()? as usize;
    let canonical = match tag {
        0 => CanonicalForm::None,
        1 => CanonicalForm::Left,
        2 => CanonicalForm::Right,
        3 => CanonicalForm::Mixed(center),
        t => return Err(TensorError::Format(format!("unknown canonical tag {t}"))),
    };
    if n == 0 || n > 4096 {
        return Err(TensorError::Format(format!("implausible site count {n}")));
    }
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.read_u32::<LittleEndian>()? as usize;
        let p = r.read_u32::<LittleEndian>()? as usize;
        let rr = r.read_u32::<LittleEndian>()? as usize;
        let count = l
            .checked_mul(p)
            .and_then(|v| v.checked_mul(rr))
            .filter(|&c| c <= 1 << 28)
            .ok_or_else(|| TensorError::Format("tensor too large".into()))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let re = r.read_f64::<LittleEndian>()?;
            let im = r.read_f64::<LittleEndian>()?;
            data.push(C64::new(re, im));
        }
        tensors.push(SiteTensor::new(l, p, rr, data).map_err(|e| TensorError::Format(e.to_string()))?);
    }
    MpsState::from_tensors(tensors, canonical)
}
