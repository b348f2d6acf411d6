//! Circuit simulation: pure states, dense density matrices with
//! depolarizing noise, and a Pauli-transfer engine for noisy energies.
//!
//! Noise channels fire after the gate they belong to: the one-qubit channel
//! after every U3 on its qubit, the two-qubit channel after every CNOT on
//! its pair.
//!
//! [`PauliDensity`] stores `r_P = Tr(ρ P)` for every Pauli string `P` on the
//! qubits touched so far; untouched qubits are kept implicitly in `|0>`.
//! Consecutive gates on at most two qubits (with their noise) are fused
//! into one 16x16 real transfer matrix before being applied, which makes a
//! noisy 12-qubit staircase cost a few hundred million flops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use thiserror::Error;

use crate::compiler::{u3_matrix, Angle, Circuit, Gate};
use crate::linalg::{self, C64, I, ONE, ZERO};
use crate::model::{group_commuting_terms, Pauli, PauliSum};

pub const MAX_STATEVECTOR_QUBITS: usize = 20;
pub const MAX_DENSITY_QUBITS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{n} qubits exceeds the {engine} cap of {cap}")]
    TooManyQubits { n: usize, cap: usize, engine: &'static str },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("qubit indices must be distinct and below {0}")]
    BadQubits(usize),
    #[error("operator acts on {expected} qubits, state has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shots must be at least 1")]
    ZeroShots,
}

/// Per-gate-class depolarizing rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    p_1q: f64,
    p_2q: f64,
}

impl NoiseModel {
    pub fn new(p_1q: f64, p_2q: f64) -> Result<Self, SimError> {
        for p in [p_1q, p_2q] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::BadProbability(p));
            }
        }
        Ok(NoiseModel { p_1q, p_2q })
    }

    pub fn noiseless() -> Self {
        NoiseModel { p_1q: 0.0, p_2q: 0.0 }
    }

    /// Named presets: `a` (p_1q 0.025), `b` (p_1q 0.005),
    /// `c` (p_1q 0.001 and p_2q 0.01), `none`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "a" => Some(NoiseModel { p_1q: 0.025, p_2q: 0.0 }),
            "b" => Some(NoiseModel { p_1q: 0.005, p_2q: 0.0 }),
            "c" => Some(NoiseModel {
                p_1q: 0.001,
                p_2q: 0.01,
            }),
            "none" => Some(Self::noiseless()),
            _ => None,
        }
    }

    pub fn p_1q(&self) -> f64 {
        self.p_1q
    }

    pub fn p_2q(&self) -> f64 {
        self.p_2q
    }

    pub fn is_noiseless(&self) -> bool {
        self.p_1q == 0.0 && self.p_2q == 0.0
    }
}

// ---------------------------------------------------------------------------
// vector kernels

fn apply_1q(psi: &mut [C64], q: usize, m: &[C64; 4]) {
    let qm = 1usize << q;
    let mut base = 0;
    while base < psi.len() {
        for i in base..base + qm {
            let (x, y) = (psi[i], psi[i | qm]);
            psi[i] = m[0] * x + m[1] * y;
            psi[i | qm] = m[2] * x + m[3] * y;
        }
        base += 2 * qm;
    }
}

fn apply_cnot(psi: &mut [C64], control: usize, target: usize) {
    let (cm, tm) = (1usize << control, 1usize << target);
    for i in 0..psi.len() {
        if i & cm != 0 && i & tm == 0 {
            psi.swap(i, i | tm);
        }
    }
}

fn gate_matrix(c: &Circuit, angles: &[Angle; 3]) -> [C64; 4] {
    let (t, p, l) = c.resolve(angles);
    u3_matrix(t, p, l)
}

fn apply_gate(c: &Circuit, g: &Gate, psi: &mut [C64]) {
    match g {
        Gate::Cnot { control, target } => apply_cnot(psi, *control, *target),
        Gate::U3 { qubit, angles } => apply_1q(psi, *qubit, &gate_matrix(c, angles)),
    }
}

fn conj2(m: &[C64; 4]) -> [C64; 4] {
    m.map(|x| x.conj())
}

fn adjoint2(m: &[C64; 4]) -> [C64; 4] {
    [m[0].conj(), m[2].conj(), m[1].conj(), m[3].conj()]
}

/// Basis-change unitary that maps the eigenbasis of `p` to the
/// computational basis.
fn measurement_rotation(p: Pauli) -> Option<[C64; 4]> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match p {
        Pauli::X => Some([C64::from(h), C64::from(h), C64::from(h), C64::from(-h)]),
        // H S^dagger
        Pauli::Y => Some([C64::from(h), -I * h, C64::from(h), I * h]),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// pure states

/// Normalized pure state on N qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: Vec<C64>,
}

impl StateVector {
    pub fn zero(n: usize) -> Self {
        let mut a = vec![ZERO; 1 << n];
        a[0] = ONE;
        StateVector { amplitudes: a }
    }

    pub fn from_amplitudes(amplitudes: Vec<C64>) -> Option<Self> {
        let n = linalg::norm(&amplitudes);
        ((n - 1.0).abs() < 1e-10 && amplitudes.len().is_power_of_two()).then_some(StateVector { amplitudes })
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn num_qubits(&self) -> usize {
        self.amplitudes.len().trailing_zeros() as usize
    }
}

/// `U(θ)|0...0>`.
pub fn run_statevector(c: &Circuit) -> Result<StateVector, SimError> {
    let n = c.num_qubits();
    if n > MAX_STATEVECTOR_QUBITS {
        return Err(SimError::TooManyQubits {
            n,
            cap: MAX_STATEVECTOR_QUBITS,
            engine: "statevector",
        });
    }
    let mut s = StateVector::zero(n);
    for g in c.gates() {
        apply_gate(c, g, &mut s.amplitudes);
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// density matrices

/// Dense `2^N x 2^N` density matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n: usize,
    entries: Vec<C64>,
}

impl DensityMatrix {
    pub fn zero(n: usize) -> Self {
        let dim = 1 << n;
        let mut e = vec![ZERO; dim * dim];
        e[0] = ONE;
        DensityMatrix { n, entries: e }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        let dim = 1 << n;
        let mut e = vec![ZERO; dim * dim];
        for i in 0..dim {
            e[i * dim + i] = C64::from(1.0 / dim as f64);
        }
        DensityMatrix { n, entries: e }
    }

    pub fn from_statevector(s: &StateVector) -> Self {
        let a = s.amplitudes();
        let dim = a.len();
        let mut e = vec![ZERO; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                e[r * dim + c] = a[r] * a[c].conj();
            }
        }
        DensityMatrix {
            n: s.num_qubits(),
            entries: e,
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.entries[r * self.dim() + c]
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for r in 0..d {
            for c in r..d {
                worst = worst.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim();
        let m = faer::Mat::<C64>::from_fn(d, d, |r, c| 0.5 * (self.get(r, c) + self.get(c, r).conj()));
        linalg::dense_lowest(&m).0
    }

    pub fn frobenius_distance(&self, other: &DensityMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// `ρ -> U ρ U†` for a one-qubit unitary. Row-major `ρ` is treated as a
    /// 2N-qubit vector with the row index in the high bits.
    fn apply_1q(&mut self, q: usize, m: &[C64; 4]) {
        apply_1q(&mut self.entries, q + self.n, m);
        apply_1q(&mut self.entries, q, &conj2(m));
    }

    fn apply_cnot(&mut self, control: usize, target: usize) {
        apply_cnot(&mut self.entries, control + self.n, target + self.n);
        apply_cnot(&mut self.entries, control, target);
    }

    /// Single-qubit depolarizing channel
    /// `(1-p)ρ + p/3 (XρX + YρY + ZρZ)`.
    pub fn apply_depolarizing_1q(&mut self, q: usize, p: f64) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::BadProbability(p));
        }
        if q >= self.n {
            return Err(SimError::BadQubits(self.n));
        }
        if p == 0.0 {
            return Ok(());
        }
        // equivalently (1 - 4p/3) ρ + (4p/3) I/2 ⊗ Tr_q ρ
        let f = 1.0 - 4.0 * p / 3.0;
        let w = 2.0 * p / 3.0;
        let d = self.dim();
        let qm = 1usize << q;
        for r in 0..d {
            if r & qm != 0 {
                continue;
            }
            for c in 0..d {
                if c & qm != 0 {
                    continue;
                }
                let (r1, c1) = (r | qm, c | qm);
                let a = self.entries[r * d + c];
                let b = self.entries[r1 * d + c1];
                self.entries[r * d + c] = (1.0 - w) * a + w * b;
                self.entries[r1 * d + c1] = (1.0 - w) * b + w * a;
                self.entries[r * d + c1] *= f;
                self.entries[r1 * d + c] *= f;
            }
        }
        Ok(())
    }

    /// Two-qubit depolarizing channel
    /// `(1-p)ρ + p/15 Σ σ ρ σ` over the 15 non-identity Pauli pairs.
    pub fn apply_depolarizing_2q(&mut self, q1: usize, q2: usize, p: f64) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::BadProbability(p));
        }
        if q1 == q2 || q1 >= self.n || q2 >= self.n {
            return Err(SimError::BadQubits(self.n));
        }
        if p == 0.0 {
            return Ok(());
        }
        // (1 - 16p/15) ρ + (16p/15) I/4 ⊗ Tr_pair ρ
        let g = 1.0 - 16.0 * p / 15.0;
        let w = (16.0 * p / 15.0) / 4.0;
        let d = self.dim();
        let mask = (1usize << q1) | (1usize << q2);
        let subs = [0, 1usize << q1, 1usize << q2, mask];
        for r in 0..d {
            if r & mask != 0 {
                continue;
            }
            for c in 0..d {
                if c & mask != 0 {
                    continue;
                }
                let tr: C64 = subs.iter().map(|&s| self.entries[(r | s) * d + (c | s)]).sum();
                for &sr in &subs {
                    for &sc in &subs {
                        let e = &mut self.entries[(r | sr) * d + (c | sc)];
                        *e *= g;
                        if sr == sc {
                            *e += w * tr;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dense density-matrix evolution from `|0...0><0...0|`.
pub fn run_density(c: &Circuit, noise: &NoiseModel) -> Result<DensityMatrix, SimError> {
    let n = c.num_qubits();
    if n > MAX_DENSITY_QUBITS {
        return Err(SimError::TooManyQubits {
            n,
            cap: MAX_DENSITY_QUBITS,
            engine: "density-matrix",
        });
    }
    let mut rho = DensityMatrix::zero(n);
    for g in c.gates() {
        match g {
            Gate::Cnot { control, target } => {
                rho.apply_cnot(*control, *target);
                rho.apply_depolarizing_2q(*control, *target, noise.p_2q)?;
            }
            Gate::U3 { qubit, angles } => {
                rho.apply_1q(*qubit, &gate_matrix(c, angles));
                rho.apply_depolarizing_1q(*qubit, noise.p_1q)?;
            }
        }
    }
    Ok(rho)
}

// ---------------------------------------------------------------------------
// Pauli-transfer engine

/// Pauli 2x2 matrices indexed I, X, Y, Z.
fn paulis() -> [[C64; 4]; 4] {
    [
        [ONE, ZERO, ZERO, ONE],
        [ZERO, ONE, ONE, ZERO],
        [ZERO, -I, I, ZERO],
        [ONE, ZERO, ZERO, -ONE],
    ]
}

/// 16x16 transfer matrix `R[P, Q] = Tr(P U Q U†) / 4` of a two-qubit
/// unitary, Pauli index `4 * p_a + p_b` with `a` the first Kronecker factor.
fn ptm_2q(u: &[C64; 16]) -> [f64; 256] {
    let ps = paulis();
    let mut basis = [[ZERO; 16]; 16];
    for pa in 0..4 {
        for pb in 0..4 {
            let m = &mut basis[4 * pa + pb];
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            m[(2 * i + k) * 4 + 2 * j + l] = ps[pa][i * 2 + j] * ps[pb][k * 2 + l];
                        }
                    }
                }
            }
        }
    }
    let mut udag = [ZERO; 16];
    for i in 0..4 {
        for j in 0..4 {
            udag[j * 4 + i] = u[i * 4 + j].conj();
        }
    }
    let mul = |a: &[C64; 16], b: &[C64; 16]| {
        let mut o = [ZERO; 16];
        for i in 0..4 {
            for k in 0..4 {
                for j in 0..4 {
                    o[i * 4 + j] += a[i * 4 + k] * b[k * 4 + j];
                }
            }
        }
        o
    };
    let mut r = [0.0; 256];
    for q in 0..16 {
        let conj = mul(&mul(u, &basis[q]), &udag);
        for p in 0..16 {
            let mut tr = ZERO;
            for i in 0..4 {
                for k in 0..4 {
                    tr += basis[p][i * 4 + k] * conj[k * 4 + i];
                }
            }
            r[p * 16 + q] = tr.re / 4.0;
        }
    }
    r
}

fn mul16(a: &[f64; 256], b: &[f64; 256]) -> [f64; 256] {
    let mut o = [0.0; 256];
    for i in 0..16 {
        for k in 0..16 {
            let x = a[i * 16 + k];
            if x == 0.0 {
                continue;
            }
            for j in 0..16 {
                o[i * 16 + j] += x * b[k * 16 + j];
            }
        }
    }
    o
}

fn kron_1q_into_2q(m: &[C64; 4], on_a: bool) -> [C64; 16] {
    let id = [ONE, ZERO, ZERO, ONE];
    let (a, b) = if on_a { (m, &id) } else { (&id, m) };
    let mut out = [ZERO; 16];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[(2 * i + k) * 4 + 2 * j + l] = a[i * 2 + j] * b[k * 2 + l];
                }
            }
        }
    }
    out
}

/// Depolarizing noise as a diagonal transfer map on the pair.
fn noise_1q_ptm(p: f64, on_a: bool) -> [f64; 256] {
    let f = 1.0 - 4.0 * p / 3.0;
    let mut r = [0.0; 256];
    for k in 0..16 {
        let (pa, pb) = (k / 4, k % 4);
        let hit = if on_a { pa } else { pb };
        r[k * 17] = if hit == 0 { 1.0 } else { f };
    }
    r
}

fn noise_2q_ptm(p: f64) -> [f64; 256] {
    let g = 1.0 - 16.0 * p / 15.0;
    let mut r = [0.0; 256];
    r[0] = 1.0;
    for k in 1..16 {
        r[k * 17] = g;
    }
    r
}

/// One fused operation: a 16x16 transfer matrix on qubits `(a, b)`.
struct FusedBlock {
    a: usize,
    b: usize,
    ptm: [f64; 256],
}

/// Fuses consecutive gates acting within a qubit pair. Single-qubit runs are
/// paired with a neighbouring qubit so every block is two-qubit.
fn fuse(c: &Circuit, noise: &NoiseModel) -> Vec<FusedBlock> {
    let n = c.num_qubits();
    let mut out: Vec<FusedBlock> = Vec::new();
    let mut cur: Option<FusedBlock> = None;
    let identity = {
        let mut r = [0.0; 256];
        for k in 0..16 {
            r[k * 17] = 1.0;
        }
        r
    };
    for g in c.gates() {
        let qs = g.qubits();
        let fits = cur
            .as_ref()
            .map(|b| qs.iter().all(|q| *q == b.a || *q == b.b))
            .unwrap_or(false);
        if !fits {
            if let Some(b) = cur.take() {
                out.push(b);
            }
            let (a, b) = match g {
                Gate::Cnot { control, target } => (*control, *target),
                Gate::U3 { qubit, .. } => {
                    let partner = if *qubit + 1 < n { qubit + 1 } else { qubit - 1 };
                    (*qubit, partner)
                }
            };
            cur = Some(FusedBlock { a, b, ptm: identity });
        }
        let blk = cur.as_mut().unwrap();
        let step = match g {
            Gate::Cnot { control, .. } => {
                let mut u = [ZERO; 16];
                // basis index 2 * bit_a + bit_b
                for ba in 0..2 {
                    for bb in 0..2 {
                        let (bc, bt) = if *control == blk.a { (ba, bb) } else { (bb, ba) };
                        let nt = bt ^ bc;
                        let (na, nb) = if *control == blk.a { (bc, nt) } else { (nt, bc) };
                        u[(2 * na + nb) * 4 + 2 * ba + bb] = ONE;
                    }
                }
                let r = ptm_2q(&u);
                if noise.p_2q > 0.0 {
                    mul16(&noise_2q_ptm(noise.p_2q), &r)
                } else {
                    r
                }
            }
            Gate::U3 { qubit, angles } => {
                let on_a = *qubit == blk.a;
                let r = ptm_2q(&kron_1q_into_2q(&gate_matrix(c, angles), on_a));
                if noise.p_1q > 0.0 {
                    mul16(&noise_1q_ptm(noise.p_1q, on_a), &r)
                } else {
                    r
                }
            }
        };
        blk.ptm = mul16(&step, &blk.ptm);
    }
    if let Some(b) = cur {
        out.push(b);
    }
    out
}

/// Mixed state in the Pauli basis: `ρ = 2^{-N} Σ_P r_P P`.
///
/// Only qubits `0..active` are stored; higher qubits are in `|0>`.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliDensity {
    n: usize,
    active: usize,
    r: Vec<f64>,
}

impl PauliDensity {
    pub fn zero(n: usize) -> Self {
        PauliDensity {
            n,
            active: 0,
            r: vec![1.0],
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.n
    }

    /// `Tr(ρ P)` for a Pauli string given per qubit.
    pub fn pauli_value(&self, letters: &[Pauli]) -> f64 {
        let mut idx = 0usize;
        for (q, &p) in letters.iter().enumerate() {
            if q < self.active {
                idx += p.index() << (2 * q);
            } else if matches!(p, Pauli::X | Pauli::Y) {
                return 0.0;
            }
        }
        self.r[idx]
    }

    fn activate(&mut self, upto: usize) {
        while self.active <= upto {
            // |0><0| = (I + Z)/2 has r_I = r_Z = 1
            let len = self.r.len();
            let mut next = vec![0.0; len * 4];
            next[..len].copy_from_slice(&self.r);
            next[3 * len..].copy_from_slice(&self.r);
            self.r = next;
            self.active += 1;
        }
    }

    fn apply_block(&mut self, blk: &FusedBlock) {
        self.activate(blk.a.max(blk.b));
        // order so that lo < hi and permute the transfer matrix to match
        let (lo, hi, ptm) = if blk.a < blk.b {
            // Pauli index 4 * p_a + p_b with a = lo: need 4 * p_hi + p_lo
            let mut p = [0.0; 256];
            for i in 0..16 {
                for j in 0..16 {
                    let (si, sj) = ((i % 4) * 4 + i / 4, (j % 4) * 4 + j / 4);
                    p[si * 16 + sj] = blk.ptm[i * 16 + j];
                }
            }
            (blk.a, blk.b, p)
        } else {
            (blk.b, blk.a, blk.ptm)
        };
        let (sl, sh) = (1usize << (2 * lo), 1usize << (2 * hi));
        let len = self.r.len();
        let offsets: [usize; 16] = std::array::from_fn(|k| (k / 4) * sh + (k % 4) * sl);
        // rows and columns that are identically zero or unit can be skipped
        let mut buf = [0.0; 16];
        let mut outer = 0;
        while outer < len {
            let mut mid = outer;
            while mid < outer + sh {
                for base in mid..mid + sl {
                    for k in 0..16 {
                        buf[k] = self.r[base + offsets[k]];
                    }
                    for i in 0..16 {
                        let row = &ptm[i * 16..i * 16 + 16];
                        let mut acc = 0.0;
                        for k in 0..16 {
                            acc += row[k] * buf[k];
                        }
                        self.r[base + offsets[i]] = acc;
                    }
                }
                mid += 4 * sl;
            }
            outer += 4 * sh;
        }
    }

    /// Probabilities of computational-basis outcomes after rotating each
    /// qubit into the eigenbasis of `basis[q]` (I and Z leave it alone).
    pub fn probabilities(&self, basis: &[Pauli]) -> Vec<f64> {
        let n = self.n;
        let dim = 1usize << n;
        // v[S] = Tr(ρ P_S) where P_S carries the basis letter on S
        let mut v = vec![0.0; dim];
        for (s, vs) in v.iter_mut().enumerate() {
            let letters: Vec<Pauli> = (0..n)
                .map(|q| {
                    if s >> q & 1 == 1 {
                        match basis[q] {
                            Pauli::I => Pauli::Z,
                            p => p,
                        }
                    } else {
                        Pauli::I
                    }
                })
                .collect();
            *vs = self.pauli_value(&letters);
        }
        walsh_hadamard(&mut v);
        v.iter_mut().for_each(|x| *x /= dim as f64);
        v
    }
}

fn walsh_hadamard(v: &mut [f64]) {
    let mut h = 1;
    while h < v.len() {
        for i in (0..v.len()).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Noisy evolution in the Pauli-transfer representation.
pub fn run_pauli_density(c: &Circuit, noise: &NoiseModel) -> Result<PauliDensity, SimError> {
    let n = c.num_qubits();
    if n > MAX_DENSITY_QUBITS {
        return Err(SimError::TooManyQubits {
            n,
            cap: MAX_DENSITY_QUBITS,
            engine: "Pauli-transfer",
        });
    }
    let mut s = PauliDensity::zero(n);
    if n == 1 {
        // no partner qubit to fuse with: evolve densely and convert
        let rho = run_density(c, noise)?;
        s.activate(0);
        let ps = paulis();
        for (k, p) in ps.iter().enumerate() {
            let mut tr = ZERO;
            for i in 0..2 {
                for j in 0..2 {
                    tr += rho.get(i, j) * p[j * 2 + i];
                }
            }
            s.r[k] = tr.re;
        }
        return Ok(s);
    }
    for blk in fuse(c, noise) {
        s.apply_block(&blk);
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// expectations

/// States that can report Pauli expectations and measurement statistics.
pub trait QuantumState {
    fn num_qubits(&self) -> usize;
    /// `Tr(ρ H)` or `<ψ|H|ψ>`.
    fn expectation(&self, h: &PauliSum) -> Result<f64, SimError>;
    /// Outcome distribution after rotating into `basis`.
    fn probabilities(&self, basis: &[Pauli]) -> Vec<f64>;
}

fn check_dims(h: &PauliSum, n: usize) -> Result<(), SimError> {
    if h.num_qubits() != n {
        return Err(SimError::DimensionMismatch {
            expected: h.num_qubits(),
            got: n,
        });
    }
    Ok(())
}

impl QuantumState for StateVector {
    fn num_qubits(&self) -> usize {
        StateVector::num_qubits(self)
    }

    fn expectation(&self, h: &PauliSum) -> Result<f64, SimError> {
        check_dims(h, StateVector::num_qubits(self))?;
        let total: C64 = h
            .terms()
            .iter()
            .map(|t| linalg::pauli_string_expectation(t, &self.amplitudes) * t.coefficient())
            .sum();
        Ok(total.re)
    }

    fn probabilities(&self, basis: &[Pauli]) -> Vec<f64> {
        let mut a = self.amplitudes.clone();
        for (q, &p) in basis.iter().enumerate() {
            if let Some(m) = measurement_rotation(p) {
                apply_1q(&mut a, q, &m);
            }
        }
        a.iter().map(|x| x.norm_sqr()).collect()
    }
}

impl QuantumState for DensityMatrix {
    fn num_qubits(&self) -> usize {
        self.n
    }

    fn expectation(&self, h: &PauliSum) -> Result<f64, SimError> {
        check_dims(h, self.n)?;
        let d = self.dim();
        let mut total = ZERO;
        for t in h.terms() {
            let (x, z, ny) = t.masks();
            let phase = linalg::i_pow(ny);
            // Tr(ρ P) = Σ_b <b|ρ P|b> and P|b> = phase (-1)^{|b&z|} |b^x>
            let mut acc = ZERO;
            for b in 0..d {
                let sign = if (b as u64 & z).count_ones() % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                acc += self.entries[b * d + (b ^ x as usize)] * sign;
            }
            total += acc * phase * t.coefficient();
        }
        Ok(total.re)
    }

    fn probabilities(&self, basis: &[Pauli]) -> Vec<f64> {
        let mut rho = self.clone();
        for (q, &p) in basis.iter().enumerate() {
            if let Some(m) = measurement_rotation(p) {
                rho.apply_1q(q, &m);
            }
        }
        (0..rho.dim()).map(|i| rho.get(i, i).re.max(0.0)).collect()
    }
}

impl QuantumState for PauliDensity {
    fn num_qubits(&self) -> usize {
        self.n
    }

    fn expectation(&self, h: &PauliSum) -> Result<f64, SimError> {
        check_dims(h, self.n)?;
        Ok(h.terms()
            .iter()
            .map(|t| t.coefficient() * self.pauli_value(t.letters()))
            .sum())
    }

    fn probabilities(&self, basis: &[Pauli]) -> Vec<f64> {
        PauliDensity::probabilities(self, basis)
    }
}

pub fn expectation<S: QuantumState + ?Sized>(state: &S, h: &PauliSum) -> Result<f64, SimError> {
    state.expectation(h)
}

/// Shot-based estimate of `<H>`.
///
/// Terms are split into qubit-wise commuting groups, `shots` are divided
/// equally among them (at least one each), and outcomes are drawn from the
/// exact distribution in each group's basis. Returns the estimate and its
/// standard error. A group with a single shot gets the worst-case variance
/// `(Σ|c|)^2` since no sample variance exists.
pub fn sample_expectation<S: QuantumState + ?Sized>(
    state: &S,
    h: &PauliSum,
    shots: usize,
    seed: u64,
) -> Result<(f64, f64), SimError> {
    if shots == 0 {
        return Err(SimError::ZeroShots);
    }
    check_dims(h, state.num_qubits())?;
    let groups = group_commuting_terms(h);
    let per_group = (shots / groups.len().max(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut est, mut var) = (0.0, 0.0);
    for g in &groups {
        let probs = state.probabilities(&g.basis);
        let terms: Vec<(u64, f64)> = g
            .indices
            .iter()
            .map(|&k| {
                let t = &h.terms()[k];
                let mask = t.support().iter().fold(0u64, |m, &q| m | (1u64 << q));
                (mask, t.coefficient())
            })
            .collect();
        let value = |b: usize| -> f64 {
            terms
                .iter()
                .map(|&(m, c)| if (b as u64 & m).count_ones() % 2 == 0 { c } else { -c })
                .sum()
        };
        let dist = WeightedIndex::new(probs.iter().map(|p| p.max(0.0))).expect("probabilities sum to one");
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..per_group {
            let v = value(dist.sample(&mut rng));
            s1 += v;
            s2 += v * v;
        }
        let n = per_group as f64;
        let mean = s1 / n;
        est += mean;
        if per_group > 1 {
            let sample_var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
            var += sample_var / n;
        } else {
            let bound: f64 = terms.iter().map(|t| t.1.abs()).sum();
            var += bound * bound;
        }
    }
    Ok((est, var.sqrt()))
}

// ---------------------------------------------------------------------------
// gradients

fn u3_derivatives(theta: f64, phi: f64, lambda: f64) -> [[C64; 4]; 3] {
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let e = |a: f64| C64::from_polar(1.0, a);
    [
        [
            C64::from(-s / 2.0),
            -e(lambda) * (c / 2.0),
            e(phi) * (c / 2.0),
            -e(phi + lambda) * (s / 2.0),
        ],
        [ZERO, ZERO, I * e(phi) * s, I * e(phi + lambda) * c],
        [ZERO, -I * e(lambda) * s, ZERO, I * e(phi + lambda) * c],
    ]
}

/// Noiseless energy and its gradient with respect to the free parameters
/// (in table order), by the adjoint method.
pub fn adjoint_gradient(c: &Circuit, h: &PauliSum) -> Result<(f64, Vec<f64>), SimError> {
    let psi = run_statevector(c)?;
    check_dims(h, c.num_qubits())?;
    let mut phi = psi.amplitudes.clone();
    let mut lam = vec![ZERO; phi.len()];
    linalg::apply_pauli_sum(h, &phi, &mut lam);
    let energy = linalg::inner(&phi, &lam).re;
    let mut grad_table = vec![0.0; c.params().len()];
    let mut tmp = vec![ZERO; phi.len()];
    for g in c.gates().iter().rev() {
        match g {
            Gate::Cnot { control, target } => {
                apply_cnot(&mut phi, *control, *target);
                apply_cnot(&mut lam, *control, *target);
            }
            Gate::U3 { qubit, angles } => {
                let (t, p, l) = c.resolve(angles);
                let m = u3_matrix(t, p, l);
                apply_1q(&mut phi, *qubit, &adjoint2(&m));
                let derivs = u3_derivatives(t, p, l);
                for (k, a) in angles.iter().enumerate() {
                    if let Angle::Slot(slot) = a {
                        if c.params()[*slot].frozen {
                            continue;
                        }
                        tmp.copy_from_slice(&phi);
                        apply_1q(&mut tmp, *qubit, &derivs[k]);
                        grad_table[*slot] += 2.0 * linalg::inner(&lam, &tmp).re;
                    }
                }
                apply_1q(&mut lam, *qubit, &adjoint2(&m));
            }
        }
    }
    let grad = c.free_indices().into_iter().map(|k| grad_table[k]).collect();
    Ok((energy, grad))
}

/// Structured one-line record of an energy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationRecord {
    pub circuit_hash: String,
    pub noise_preset: String,
    pub shots: Option<usize>,
    pub value: f64,
    pub stderr: f64,
}

impl ExpectationRecord {
    pub fn to_line(&self) -> String {
        format!(
            "circuit={} noise={} shots={} value={} stderr={}",
            self.circuit_hash,
            self.noise_preset,
            self.shots.map(|s| s.to_string()).unwrap_or_else(|| "exact".into()),
            self.value,
            self.stderr
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{build_ansatz, Gate};
    use crate::model::{build_heisenberg, build_kagome_star, Labeling, PauliString, SpinGraph};
    use rand::Rng;

    fn random_circuit(n: usize, gates: usize, seed: u64) -> Circuit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Circuit::new(n);
        for _ in 0..gates {
            if rng.gen_bool(0.4) {
                let a = rng.gen_range(0..n);
                let mut b = rng.gen_range(0..n);
                while b == a {
                    b = rng.gen_range(0..n);
                }
                c.push(Gate::Cnot { control: a, target: b }).unwrap();
            } else {
                let q = rng.gen_range(0..n);
                c.push(Gate::u3_fixed(
                    q,
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ))
                .unwrap();
            }
        }
        c
    }

    fn rand_sum(n: usize, seed: u64) -> PauliSum {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let letters = ['I', 'X', 'Y', 'Z'];
        let terms = (0..12)
            .map(|_| {
                let w: String = (0..n).map(|_| letters[rng.gen_range(0..4)]).collect();
                PauliString::from_word(&w, rng.gen_range(-1.0..1.0)).unwrap()
            })
            .collect();
        PauliSum::new(n, terms).unwrap()
    }

    #[test]
    fn x_gate_convention() {
        let mut c = Circuit::new(1);
        c.push(Gate::u3_fixed(0, std::f64::consts::PI, 0.0, std::f64::consts::PI))
            .unwrap();
        let s = run_statevector(&c).unwrap();
        assert!((s.amplitudes()[1] - ONE).norm() < 1e-15);
        assert_eq!(run_statevector(&Circuit::new(3)).unwrap(), StateVector::zero(3));
    }

    #[test]
    fn single_qubit_channel_values() {
        let mut rho = DensityMatrix::zero(1);
        rho.apply_depolarizing_1q(0, 0.025).unwrap();
        assert!((rho.get(0, 0).re - (1.0 - 2.0 * 0.025 / 3.0)).abs() < 1e-15);
        assert!((rho.get(1, 1).re - 2.0 * 0.025 / 3.0).abs() < 1e-15);
        let mut c = Circuit::new(1);
        c.push(Gate::u3_fixed(0, 1.1, 0.3, -0.7)).unwrap();
        let mut rho = run_density(&c, &NoiseModel::noiseless()).unwrap();
        rho.apply_depolarizing_1q(0, 0.75).unwrap();
        assert!(rho.frobenius_distance(&DensityMatrix::maximally_mixed(1)) < 1e-12);
        assert_eq!(rho.apply_depolarizing_1q(0, 1.5), Err(SimError::BadProbability(1.5)));
    }

    #[test]
    fn two_qubit_channel_values() {
        let mut rho = DensityMatrix::zero(2);
        rho.apply_depolarizing_2q(0, 1, 0.01).unwrap();
        assert!((1.0 - rho.get(0, 0).re - 0.01 * 12.0 / 15.0).abs() < 1e-15);
        let c = random_circuit(2, 8, 1);
        let mut rho = run_density(&c, &NoiseModel::noiseless()).unwrap();
        rho.apply_depolarizing_2q(1, 0, 15.0 / 16.0).unwrap();
        assert!(rho.frobenius_distance(&DensityMatrix::maximally_mixed(2)) < 1e-12);
        assert_eq!(rho.apply_depolarizing_2q(1, 1, 0.1), Err(SimError::BadQubits(2)));
    }

    #[test]
    fn two_qubit_channel_by_pauli_enumeration() {
        // explicit (1-p)ρ + p/15 Σ σρσ on a random 3-qubit state, pair (2, 0)
        let c = random_circuit(3, 15, 4);
        let base = run_density(&c, &NoiseModel::noiseless()).unwrap();
        let p = 0.3;
        let mut fast = base.clone();
        fast.apply_depolarizing_2q(2, 0, p).unwrap();
        let ps = paulis();
        let mut slow = vec![ZERO; 64];
        for k in 0..16 {
            let mut r = base.clone();
            r.apply_1q(2, &ps[k / 4]);
            r.apply_1q(0, &ps[k % 4]);
            let w = if k == 0 { 1.0 - p } else { p / 15.0 };
            for (s, e) in slow.iter_mut().zip(r.entries()) {
                *s += e * w;
            }
        }
        for (a, b) in fast.entries().iter().zip(&slow) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn density_matches_statevector_without_noise() {
        let c = random_circuit(4, 30, 2);
        let psi = run_statevector(&c).unwrap();
        let rho = run_density(&c, &NoiseModel::noiseless()).unwrap();
        assert!(rho.frobenius_distance(&DensityMatrix::from_statevector(&psi)) < 1e-10);
    }

    #[test]
    fn density_invariants_under_noise() {
        let noise = NoiseModel::new(0.05, 0.1).unwrap();
        for seed in 0..3 {
            let rho = run_density(&random_circuit(4, 40, seed), &noise).unwrap();
            assert!((rho.trace() - ONE).norm() < 1e-12);
            assert!(rho.hermiticity_error() < 1e-12);
            assert!(rho.min_eigenvalue() > -1e-8);
        }
    }

    #[test]
    fn pauli_engine_matches_dense_engine() {
        let noise = NoiseModel::new(0.03, 0.07).unwrap();
        for seed in 0..4 {
            let n = 3 + seed as usize % 3;
            let c = random_circuit(n, 40, seed);
            let h = rand_sum(n, seed + 10);
            let dense = run_density(&c, &noise).unwrap().expectation(&h).unwrap();
            let pauli = run_pauli_density(&c, &noise).unwrap().expectation(&h).unwrap();
            assert!((dense - pauli).abs() < 1e-12, "{dense} vs {pauli}");
            let pr_d = run_density(&c, &noise)
                .unwrap()
                .probabilities(&[Pauli::X, Pauli::Z, Pauli::Y, Pauli::I, Pauli::X][..n]);
            let pr_p = run_pauli_density(&c, &noise)
                .unwrap()
                .probabilities(&[Pauli::X, Pauli::Z, Pauli::Y, Pauli::I, Pauli::X][..n]);
            for (a, b) in pr_d.iter().zip(&pr_p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut one = Circuit::new(1);
        one.push(Gate::u3_fixed(0, 0.4, 0.1, 0.2)).unwrap();
        let h = PauliSum::new(1, vec![PauliString::from_word("X", 1.0).unwrap()]).unwrap();
        let a = run_density(&one, &noise).unwrap().expectation(&h).unwrap();
        let b = run_pauli_density(&one, &noise).unwrap().expectation(&h).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn kagome_energies() {
        let h = build_heisenberg(&build_kagome_star(&Labeling::zigzag()).unwrap(), 1.0).unwrap();
        let zero = run_statevector(&Circuit::new(12)).unwrap();
        assert!((zero.expectation(&h).unwrap() - 18.0).abs() < 1e-12);
        let pd = run_pauli_density(&Circuit::new(12), &NoiseModel::noiseless()).unwrap();
        assert!((pd.expectation(&h).unwrap() - 18.0).abs() < 1e-12);
        let mixed = DensityMatrix::maximally_mixed(3);
        let h3 = build_heisenberg(&SpinGraph::open_chain(3).unwrap(), 1.0).unwrap();
        assert!(mixed.expectation(&h3).unwrap().abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_binomial_sampling() {
        let zz = PauliSum::new(2, vec![PauliString::from_word("ZZ", 1.0).unwrap()]).unwrap();
        let s = StateVector::zero(2);
        assert_eq!(sample_expectation(&s, &zz, 100, 1).unwrap(), (1.0, 0.0));
        let xx = PauliSum::new(2, vec![PauliString::from_word("XX", 1.0).unwrap()]).unwrap();
        let mut inside = 0;
        for seed in 0..100 {
            let (e, se) = sample_expectation(&s, &xx, 10_000, seed).unwrap();
            assert!((se - 0.01).abs() < 1e-3);
            if e.abs() < 5.0 * se {
                inside += 1;
            }
        }
        assert!(inside >= 99);
        assert_eq!(sample_expectation(&s, &xx, 0, 1), Err(SimError::ZeroShots));
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let h = build_heisenberg(&SpinGraph::new(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap(), 1.0).unwrap();
        let ansatz = build_ansatz(4, 2, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..ansatz.num_free_params())
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let c = ansatz.bind_parameters(&x).unwrap();
        let (e, g) = adjoint_gradient(&c, &h).unwrap();
        assert!((e - run_statevector(&c).unwrap().expectation(&h).unwrap()).abs() < 1e-12);
        let eps = 1e-5;
        for k in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            let ep = run_statevector(&ansatz.bind_parameters(&xp).unwrap())
                .unwrap()
                .expectation(&h)
                .unwrap();
            let em = run_statevector(&ansatz.bind_parameters(&xm).unwrap())
                .unwrap()
                .expectation(&h)
                .unwrap();
            assert!(((ep - em) / (2.0 * eps) - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn presets() {
        assert_eq!(NoiseModel::preset("a").unwrap().p_1q(), 0.025);
        assert_eq!(NoiseModel::preset("c").unwrap().p_2q(), 0.01);
        assert!(NoiseModel::preset("z").is_none());
        assert!(NoiseModel::new(-0.1, 0.0).is_err());
        let rec = ExpectationRecord {
            circuit_hash: "ab".into(),
            noise_preset: "b".into(),
            shots: None,
            value: -1.5,
            stderr: 0.0,
        };
        assert_eq!(rec.to_line(), "circuit=ab noise=b shots=exact value=-1.5 stderr=0");
    }
}
