//! From right-canonical bond-2 MPS to parameterized staircase circuits.
//!
//! Two-qubit blocks are written as 4x4 matrices indexed by
//! `2 * bit_a + bit_b`, so qubit `a` is the first Kronecker factor. A
//! staircase block `i` acts on `a = i + 1` (the bond carrier) and `b = i`
//! (the site), which makes the block index agree with the little-endian
//! amplitude index of qubits `i + 1` and `i`.
//!
//! Every block is synthesized with the template
//!
//! ```text
//! a: ─U3(C)─X─Rz(t1)─●──────────X─U3(A)─
//!           │        │          │
//! b: ─U3(D)─●─Ry(t2)─X─Ry(t3)───●─U3(B)─
//! ```
//!
//! whose 15 angles cover SU(4) up to a global phase.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};
use std::fmt::Write as _;

use faer::{Mat, Side};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{C64, I, ONE, ZERO};
use crate::tensornet::{CanonicalForm, MpsState, SiteTensor};

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("matrix is not unitary (deviation {0:.3e})")]
    NotUnitary(f64),
    #[error("tensor is not a right isometry (residual {0:.3e})")]
    NotIsometric(f64),
    #[error("bond dimension {0} exceeds 2")]
    BondTooLarge(usize),
    #[error("MPS is not in right-canonical form")]
    NotCanonical,
    #[error("invalid ansatz shape: {0}")]
    InvalidShape(String),
    #[error("expected {expected} parameter values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("parameter {0} is frozen")]
    FrozenParameter(usize),
    #[error("parameter index {0} out of range")]
    UnknownParameter(usize),
    #[error("invalid gate: {0}")]
    InvalidGate(String),
    #[error("circuit text line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("two-qubit decomposition failed: {0}")]
    Decomposition(String),
}

/// A gate angle: a literal or a reference into the parameter table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Angle {
    Fixed(f64),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Cnot { control: usize, target: usize },
    U3 { qubit: usize, angles: [Angle; 3] },
}

impl Gate {
    pub fn qubits(&self) -> Vec<usize> {
        match self {
            Gate::Cnot { control, target } => vec![*control, *target],
            Gate::U3 { qubit, .. } => vec![*qubit],
        }
    }

    pub fn u3_fixed(qubit: usize, theta: f64, phi: f64, lambda: f64) -> Gate {
        Gate::U3 {
            qubit,
            angles: [Angle::Fixed(theta), Angle::Fixed(phi), Angle::Fixed(lambda)],
        }
    }

    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let angles: &[Angle] = match self {
            Gate::U3 { angles, .. } => angles,
            Gate::Cnot { .. } => &[],
        };
        angles.iter().filter_map(|a| match a {
            Angle::Slot(k) => Some(*k),
            Angle::Fixed(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: f64,
    pub frozen: bool,
}

/// Ordered gate list with a table of named angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    num_qubits: usize,
    gates: Vec<Gate>,
    params: Vec<Parameter>,
}

/// `u3(θ, φ, λ)` as a row-major 2x2 matrix.
pub fn u3_matrix(theta: f64, phi: f64, lambda: f64) -> [C64; 4] {
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    [
        C64::from(c),
        -C64::from_polar(s, lambda),
        C64::from_polar(s, phi),
        C64::from_polar(c, phi + lambda),
    ]
}

/// Euler angles `(θ, φ, λ)` with `v = e^{iγ} u3(θ, φ, λ)` for a 2x2 unitary.
pub fn u3_angles(v: &[C64; 4]) -> (f64, f64, f64) {
    let theta = 2.0 * v[2].norm().atan2(v[0].norm());
    let eps = 1e-12;
    if v[2].norm() < eps {
        (theta, 0.0, v[3].arg() - v[0].arg())
    } else if v[0].norm() < eps {
        let gamma = (-v[1]).arg();
        (theta, v[2].arg() - gamma, 0.0)
    } else {
        let gamma = v[0].arg();
        (theta, v[2].arg() - gamma, (-v[1]).arg() - gamma)
    }
}

impl Circuit {
    pub fn new(num_qubits: usize) -> Self {
        Circuit {
            num_qubits,
            gates: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Checked constructor for externally supplied gate lists.
    pub fn from_parts(num_qubits: usize, gates: Vec<Gate>, params: Vec<Parameter>) -> Result<Self, CompileError> {
        let c = Circuit {
            num_qubits,
            gates,
            params,
        };
        for g in &c.gates {
            c.check_gate(g)?;
        }
        for p in &c.params {
            if !p.value.is_finite() {
                return Err(CompileError::InvalidGate(format!("parameter {} is not finite", p.name)));
            }
        }
        Ok(c)
    }

    fn check_gate(&self, g: &Gate) -> Result<(), CompileError> {
        match g {
            Gate::Cnot { control, target } => {
                if control == target || *control >= self.num_qubits || *target >= self.num_qubits {
                    return Err(CompileError::InvalidGate(format!("CNOT {control} {target}")));
                }
            }
            Gate::U3 { qubit, angles } => {
                if *qubit >= self.num_qubits {
                    return Err(CompileError::InvalidGate(format!("U3 on qubit {qubit}")));
                }
                for a in angles {
                    match a {
                        Angle::Fixed(v) if !v.is_finite() => {
                            return Err(CompileError::InvalidGate("non-finite angle".into()))
                        }
                        Angle::Slot(k) if *k >= self.params.len() => return Err(CompileError::UnknownParameter(*k)),
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn push(&mut self, g: Gate) -> Result<(), CompileError> {
        self.check_gate(&g)?;
        self.gates.push(g);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: f64, frozen: bool) -> usize {
        self.params.push(Parameter {
            name: name.into(),
            value,
            frozen,
        });
        self.params.len() - 1
    }

    pub fn cnot_count(&self) -> usize {
        self.gates.iter().filter(|g| matches!(g, Gate::Cnot { .. })).count()
    }

    pub fn num_free_params(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).count()
    }

    /// Table indices of the free parameters, in table order.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&k| !self.params[k].frozen).collect()
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value).collect()
    }

    /// Length of the frozen prefix: the gates before the first one that
    /// uses a free parameter.
    pub fn frozen_gate_count(&self) -> usize {
        self.gates
            .iter()
            .position(|g| g.slots().any(|k| !self.params[k].frozen))
            .unwrap_or(self.gates.len())
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn angle(&self, a: Angle) -> f64 {
        match a {
            Angle::Fixed(v) => v,
            Angle::Slot(k) => self.params[k].value,
        }
    }

    /// Resolved `(θ, φ, λ)` of a U3 gate.
    pub fn resolve(&self, angles: &[Angle; 3]) -> (f64, f64, f64) {
        (self.angle(angles[0]), self.angle(angles[1]), self.angle(angles[2]))
    }

    /// New circuit with the free parameters replaced by `values` in table
    /// order; frozen entries keep their values.
    pub fn bind_parameters(&self, values: &[f64]) -> Result<Circuit, CompileError> {
        let free = self.free_indices();
        if values.len() != free.len() {
            return Err(CompileError::LengthMismatch {
                expected: free.len(),
                got: values.len(),
            });
        }
        let mut out = self.clone();
        for (&k, &v) in free.iter().zip(values) {
            if !v.is_finite() {
                return Err(CompileError::InvalidGate(format!(
                    "value for {} is not finite",
                    self.params[k].name
                )));
            }
            out.params[k].value = v;
        }
        Ok(out)
    }

    /// Sets one table entry; frozen entries are refused.
    pub fn set_parameter(&mut self, index: usize, value: f64) -> Result<(), CompileError> {
        let p = self
            .params
            .get_mut(index)
            .ok_or(CompileError::UnknownParameter(index))?;
        if p.frozen {
            return Err(CompileError::FrozenParameter(index));
        }
        p.value = value;
        Ok(())
    }

    /// Appends `other`, remapping its parameter slots. With `freeze` every
    /// imported parameter is frozen.
    pub fn append(&mut self, other: &Circuit, freeze: bool, prefix: &str) -> Result<(), CompileError> {
        if other.num_qubits != self.num_qubits {
            return Err(CompileError::InvalidShape(format!(
                "cannot append a {}-qubit circuit to a {}-qubit one",
                other.num_qubits, self.num_qubits
            )));
        }
        let offset = self.params.len();
        for p in &other.params {
            self.params.push(Parameter {
                name: format!("{prefix}{}", p.name),
                value: p.value,
                frozen: p.frozen || freeze,
            });
        }
        for g in &other.gates {
            let g = match g {
                Gate::U3 { qubit, angles } => Gate::U3 {
                    qubit: *qubit,
                    angles: angles.map(|a| match a {
                        Angle::Slot(k) => Angle::Slot(k + offset),
                        f => f,
                    }),
                },
                c => c.clone(),
            };
            self.gates.push(g);
        }
        Ok(())
    }

    /// Dense unitary (row-major, `2^N x 2^N`). Intended for small N.
    pub fn unitary(&self) -> Vec<C64> {
        let dim = 1usize << self.num_qubits;
        let mut u = vec![ZERO; dim * dim];
        for c in 0..dim {
            let mut col = vec![ZERO; dim];
            col[c] = ONE;
            for g in &self.gates {
                self.apply_to_vector(g, &mut col);
            }
            for r in 0..dim {
                u[r * dim + c] = col[r];
            }
        }
        u
    }

    /// Applies one gate to a state vector in place.
    pub fn apply_to_vector(&self, g: &Gate, psi: &mut [C64]) {
        match g {
            Gate::Cnot { control, target } => {
                let (cm, tm) = (1usize << control, 1usize << target);
                for i in 0..psi.len() {
                    if i & cm != 0 && i & tm == 0 {
                        psi.swap(i, i | tm);
                    }
                }
            }
            Gate::U3 { qubit, angles } => {
                let (t, p, l) = self.resolve(angles);
                let m = u3_matrix(t, p, l);
                let qm = 1usize << qubit;
                for i in 0..psi.len() {
                    if i & qm == 0 {
                        let (x, y) = (psi[i], psi[i | qm]);
                        psi[i] = m[0] * x + m[1] * y;
                        psi[i | qm] = m[2] * x + m[3] * y;
                    }
                }
            }
        }
    }

    /// Output state from `|0...0>`.
    pub fn statevector(&self) -> Vec<C64> {
        let mut psi = vec![ZERO; 1 << self.num_qubits];
        psi[0] = ONE;
        for g in &self.gates {
            self.apply_to_vector(g, &mut psi);
        }
        psi
    }

    /// Line-oriented text form, version 1.
    ///
    /// ```text
    /// MPSVQE-CIRCUIT 1
    /// QUBITS <n>
    /// PARAM <index> <name> <value> [frozen]
    /// CNOT <control> <target>
    /// U3 <qubit> <θ> <φ> <λ>
    /// ```
    ///
    /// Each U3 angle is a literal or `p<index>` naming a PARAM line.
    /// Blank lines and `#` comments are ignored.
    pub fn to_text(&self) -> String {
        let mut s = String::from("MPSVQE-CIRCUIT 1\n");
        let _ = writeln!(s, "QUBITS {}", self.num_qubits);
        for (k, p) in self.params.iter().enumerate() {
            let _ = writeln!(
                s,
                "PARAM {k} {} {}{}",
                p.name,
                p.value,
                if p.frozen { " frozen" } else { "" }
            );
        }
        let fmt = |a: &Angle| match a {
            Angle::Fixed(v) => format!("{v}"),
            Angle::Slot(k) => format!("p{k}"),
        };
        for g in &self.gates {
            match g {
                Gate::Cnot { control, target } => {
                    let _ = writeln!(s, "CNOT {control} {target}");
                }
                Gate::U3 { qubit, angles } => {
                    let _ = writeln!(
                        s,
                        "U3 {qubit} {} {} {}",
                        fmt(&angles[0]),
                        fmt(&angles[1]),
                        fmt(&angles[2])
                    );
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Circuit, CompileError> {
        let err = |line: usize, msg: &str| CompileError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, "MPSVQE-CIRCUIT 1")) => {}
            Some((n, _)) => return Err(err(n, "expected header `MPSVQE-CIRCUIT 1`")),
            None => return Err(err(0, "empty circuit text")),
        }
        let (n, qline) = lines.next().ok_or_else(|| err(0, "missing QUBITS line"))?;
        let num_qubits = match qline.split_whitespace().collect::<Vec<_>>()[..] {
            ["QUBITS", v] => v.parse::<usize>().map_err(|_| err(n, "bad qubit count"))?,
            _ => return Err(err(n, "expected `QUBITS <n>`")),
        };
        let mut params = Vec::new();
        let mut gates = Vec::new();
        let num = |n: usize, s: &str| s.parse::<usize>().map_err(|_| err(n, &format!("bad integer `{s}`")));
        let float = |n: usize, s: &str| s.parse::<f64>().map_err(|_| err(n, &format!("bad number `{s}`")));
        for (n, line) in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok[0] {
                "PARAM" => {
                    if !(tok.len() == 4 || (tok.len() == 5 && tok[4] == "frozen")) {
                        return Err(err(n, "expected `PARAM <index> <name> <value> [frozen]`"));
                    }
                    if num(n, tok[1])? != params.len() {
                        return Err(err(n, "PARAM indices must be consecutive from 0"));
                    }
                    params.push(Parameter {
                        name: tok[2].to_string(),
                        value: float(n, tok[3])?,
                        frozen: tok.len() == 5,
                    });
                }
                "CNOT" if tok.len() == 3 => gates.push(Gate::Cnot {
                    control: num(n, tok[1])?,
                    target: num(n, tok[2])?,
                }),
                "U3" if tok.len() == 5 => {
                    let mut angles = [Angle::Fixed(0.0); 3];
                    for (a, t) in angles.iter_mut().zip(&tok[2..]) {
                        *a = match t.strip_prefix('p') {
                            Some(k) => Angle::Slot(num(n, k)?),
                            None => Angle::Fixed(float(n, t)?),
                        };
                    }
                    gates.push(Gate::U3 {
                        qubit: num(n, tok[1])?,
                        angles,
                    });
                }
                other => return Err(err(n, &format!("unrecognized line starting with `{other}`"))),
            }
        }
        Circuit::from_parts(num_qubits, gates, params)
    }

    /// SHA-256 of the text form, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// two-qubit blocks

/// Unitary 4x4 matrix, row-major, index `2 * bit_a + bit_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitBlock {
    m: [C64; 16],
}

fn mul4(a: &[C64; 16], b: &[C64; 16]) -> [C64; 16] {
    let mut out = [ZERO; 16];
    for i in 0..4 {
        for k in 0..4 {
            let x = a[i * 4 + k];
            if x == ZERO {
                continue;
            }
            for j in 0..4 {
                out[i * 4 + j] += x * b[k * 4 + j];
            }
        }
    }
    out
}

fn adj4(a: &[C64; 16]) -> [C64; 16] {
    let mut out = [ZERO; 16];
    for i in 0..4 {
        for j in 0..4 {
            out[j * 4 + i] = a[i * 4 + j].conj();
        }
    }
    out
}

fn kron2(a: &[C64; 4], b: &[C64; 4]) -> [C64; 16] {
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

fn unitarity_deviation(m: &[C64; 16]) -> f64 {
    let p = mul4(&adj4(m), m);
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let t = if i == j { ONE } else { ZERO };
            worst = worst.max((p[i * 4 + j] - t).norm());
        }
    }
    worst
}

const CX_AB: [C64; 16] = {
    let (o, z) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0));
    [o, z, z, z, z, o, z, z, z, z, z, o, z, z, o, z]
};
const CX_BA: [C64; 16] = {
    let (o, z) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0));
    [o, z, z, z, z, z, z, o, z, z, o, z, z, o, z, z]
};

impl TwoQubitBlock {
    /// Accepts matrices unitary within 1e-8.
    pub fn new(m: [C64; 16]) -> Result<Self, CompileError> {
        let dev = unitarity_deviation(&m);
        if !(dev <= 1e-8) {
            return Err(CompileError::NotUnitary(dev));
        }
        Ok(TwoQubitBlock { m })
    }

    pub fn identity() -> Self {
        let mut m = [ZERO; 16];
        for i in 0..4 {
            m[i * 5] = ONE;
        }
        TwoQubitBlock { m }
    }

    /// CNOT with control `a` and target `b`.
    pub fn cnot_ab() -> Self {
        TwoQubitBlock { m: CX_AB }
    }

    pub fn matrix(&self) -> &[C64; 16] {
        &self.m
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.m[r * 4 + c]
    }

    pub fn unitarity_deviation(&self) -> f64 {
        unitarity_deviation(&self.m)
    }
}

/// Which end of the chain a tensor sits at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    First,
    Bulk,
    Last,
}

fn isometry_residual(t: &SiteTensor) -> f64 {
    let (l, p, r) = t.shape();
    let mut worst: f64 = 0.0;
    for a in 0..l {
        for a2 in 0..l {
            let mut acc = ZERO;
            for s in 0..p {
                for b in 0..r {
                    acc += t.get(a, s, b) * t.get(a2, s, b).conj();
                }
            }
            let target = if a == a2 { ONE } else { ZERO };
            worst = worst.max((acc - target).norm());
        }
    }
    worst
}

/// Completes the given orthonormal columns of a `dim x dim` matrix
/// (column-major list) by Gram-Schmidt against `e_0, e_1, ...` in order.
fn complete_columns(mut cols: Vec<Vec<C64>>, dim: usize) -> Vec<Vec<C64>> {
    let mut e = 0;
    while cols.len() < dim {
        let mut v = vec![ZERO; dim];
        v[e] = ONE;
        e += 1;
        for _ in 0..2 {
            for c in &cols {
                let ov: C64 = c.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= ov * ci;
                }
            }
        }
        let n = crate::linalg::norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    cols
}

/// Embeds a right isometry `T[α', σ, α]` into a unitary with
/// `<α, σ|U|0, α'> = T^σ_{α',α}`; that is `U[2α + σ, α'] = T^σ_{α',α}`.
///
/// At `Position::Last` the right bond is trivial and the result is
/// `I ⊗ u` with `u[σ, α'] = T^σ_{α',0}` acting on the site qubit `b`.
pub fn embed_isometry(t: &SiteTensor, position: Position) -> Result<TwoQubitBlock, CompileError> {
    let (l, p, r) = t.shape();
    if l > 2 || r > 2 {
        return Err(CompileError::BondTooLarge(l.max(r)));
    }
    if p != 2 {
        return Err(CompileError::InvalidShape(format!("physical dimension {p}")));
    }
    let res = isometry_residual(t);
    if !(res < 1e-8) {
        return Err(CompileError::NotIsometric(res));
    }
    match position {
        Position::First if l != 1 => {
            return Err(CompileError::InvalidShape("first tensor needs a unit left bond".into()))
        }
        Position::Last if r != 1 => {
            return Err(CompileError::InvalidShape("last tensor needs a unit right bond".into()))
        }
        _ => {}
    }
    if position == Position::Last {
        let cols: Vec<Vec<C64>> = (0..l).map(|a| vec![t.get(a, 0, 0), t.get(a, 1, 0)]).collect();
        let cols = complete_columns(cols, 2);
        let u = [cols[0][0], cols[1][0], cols[0][1], cols[1][1]];
        let id = [ONE, ZERO, ZERO, ONE];
        return Ok(TwoQubitBlock { m: kron2(&id, &u) });
    }
    let cols: Vec<Vec<C64>> = (0..l)
        .map(|a2| {
            let mut c = vec![ZERO; 4];
            for s in 0..2 {
                for a in 0..r {
                    c[2 * a + s] = t.get(a2, s, a);
                }
            }
            c
        })
        .collect();
    let cols = complete_columns(cols, 4);
    let mut m = [ZERO; 16];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..4 {
            m[i * 4 + j] = c[i];
        }
    }
    TwoQubitBlock::new(m)
}

/// Angles of the 15-parameter template (see the module docs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KakAngles {
    pub c: [f64; 3],
    pub d: [f64; 3],
    pub t: [f64; 3],
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl KakAngles {
    /// Flat order used by circuits: C, D, t1..t3, A, B.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(15);
        v.extend_from_slice(&self.c);
        v.extend_from_slice(&self.d);
        v.extend_from_slice(&self.t);
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.b);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), 15);
        let g = |i: usize| [v[i], v[i + 1], v[i + 2]];
        KakAngles {
            c: g(0),
            d: g(3),
            t: [v[6], v[7], v[8]],
            a: g(9),
            b: g(12),
        }
    }

    /// Template gates on qubits `a` and `b` with literal angles.
    pub fn gates(&self, qa: usize, qb: usize) -> Vec<Gate> {
        let v: Vec<Angle> = self.to_vec().into_iter().map(Angle::Fixed).collect();
        template_gates(qa, qb, &v)
    }

    /// 4x4 unitary of the template.
    pub fn matrix(&self) -> [C64; 16] {
        let u = |x: &[f64; 3]| u3_matrix(x[0], x[1], x[2]);
        let id = [ONE, ZERO, ZERO, ONE];
        let mut m = kron2(&u(&self.c), &u(&self.d));
        m = mul4(&CX_BA, &m);
        m = mul4(
            &kron2(&u3_matrix(0.0, 0.0, self.t[0]), &u3_matrix(self.t[1], 0.0, 0.0)),
            &m,
        );
        m = mul4(&CX_AB, &m);
        m = mul4(&kron2(&id, &u3_matrix(self.t[2], 0.0, 0.0)), &m);
        m = mul4(&CX_BA, &m);
        mul4(&kron2(&u(&self.a), &u(&self.b)), &m)
    }
}

/// Template gate list; `v` holds the 15 angles in [`KakAngles::to_vec`]
/// order.
fn template_gates(qa: usize, qb: usize, v: &[Angle]) -> Vec<Gate> {
    let z = Angle::Fixed(0.0);
    vec![
        Gate::U3 {
            qubit: qa,
            angles: [v[0], v[1], v[2]],
        },
        Gate::U3 {
            qubit: qb,
            angles: [v[3], v[4], v[5]],
        },
        Gate::Cnot {
            control: qb,
            target: qa,
        },
        Gate::U3 {
            qubit: qa,
            angles: [z, z, v[6]],
        },
        Gate::U3 {
            qubit: qb,
            angles: [v[7], z, z],
        },
        Gate::Cnot {
            control: qa,
            target: qb,
        },
        Gate::U3 {
            qubit: qb,
            angles: [v[8], z, z],
        },
        Gate::Cnot {
            control: qb,
            target: qa,
        },
        Gate::U3 {
            qubit: qa,
            angles: [v[9], v[10], v[11]],
        },
        Gate::U3 {
            qubit: qb,
            angles: [v[12], v[13], v[14]],
        },
    ]
}

fn magic() -> [C64; 16] {
    let h = C64::from(FRAC_1_SQRT_2);
    let (o, z, i) = (h, ZERO, I * h);
    [o, z, z, i, z, i, o, z, z, i, -o, z, o, z, z, -i]
}

/// `U = K1 · diag(e^{iθ}) · K2ᵀ` in the magic basis with real `K1, K2 ∈ SO(4)`.
struct MagicSplit {
    k1: Mat<f64>,
    phases: [f64; 4],
    k2: Mat<f64>,
}

fn magic_split(u: &[C64; 16]) -> Result<MagicSplit, CompileError> {
    let mg = magic();
    let up = mul4(&adj4(&mg), &mul4(u, &mg));
    // M2 = Upᵀ Up is symmetric unitary; its real and imaginary parts commute
    let mut m2 = [ZERO; 16];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                m2[i * 4 + j] += up[k * 4 + i] * up[k * 4 + j];
            }
        }
    }
    let re = Mat::<f64>::from_fn(4, 4, |i, j| 0.5 * (m2[i * 4 + j].re + m2[j * 4 + i].re));
    let im = Mat::<f64>::from_fn(4, 4, |i, j| 0.5 * (m2[i * 4 + j].im + m2[j * 4 + i].im));
    // generic mixing weights: a degenerate eigenspace of `re` is split unless
    // `im` happens to share the degeneracy at this particular weight
    use std::f64::consts::{FRAC_1_PI, SQRT_2};
    for &c in &[0.6180339887, SQRT_2, -0.7320508075, 2.2360679775, FRAC_1_PI] {
        let s = &re + &im * faer::Scale(c);
        let eig = s
            .self_adjoint_eigen(Side::Lower)
            .map_err(|_| CompileError::Decomposition("eigensolver failed".into()))?;
        let mut k2 = eig.U().to_owned();
        // check that K2 also diagonalizes the imaginary part
        let dre = k2.transpose() * &re * &k2;
        let dim = k2.transpose() * &im * &k2;
        let mut off: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    off = off.max(dre[(i, j)].abs()).max(dim[(i, j)].abs());
                }
            }
        }
        if off > 1e-9 {
            continue;
        }
        if k2.determinant() < 0.0 {
            for i in 0..4 {
                k2[(i, 0)] = -k2[(i, 0)];
            }
        }
        let mut phases = [0.0; 4];
        for j in 0..4 {
            phases[j] = 0.5 * C64::new(dre[(j, j)], dim[(j, j)]).arg();
        }
        // K1 = Up K2 D^{-1}
        let k1c = |phases: &[f64; 4]| {
            Mat::<C64>::from_fn(4, 4, |i, j| {
                let mut acc = ZERO;
                for k in 0..4 {
                    acc += up[i * 4 + k] * k2[(k, j)];
                }
                acc * C64::from_polar(1.0, -phases[j])
            })
        };
        let mut k1z = k1c(&phases);
        let mut k1 = Mat::<f64>::from_fn(4, 4, |i, j| k1z[(i, j)].re);
        if k1.determinant() < 0.0 {
            phases[0] += std::f64::consts::PI;
            k1z = k1c(&phases);
            k1 = Mat::<f64>::from_fn(4, 4, |i, j| k1z[(i, j)].re);
        }
        let imag: f64 = (0..16).map(|x| k1z[(x / 4, x % 4)].im.abs()).fold(0.0, f64::max);
        if imag > 1e-7 {
            return Err(CompileError::Decomposition(format!("K1 not real ({imag:.2e})")));
        }
        return Ok(MagicSplit { k1, phases, k2 });
    }
    Err(CompileError::Decomposition(
        "could not diagonalize the magic-basis square".into(),
    ))
}

fn to_su4(u: &[C64; 16]) -> [C64; 16] {
    let m = Mat::<C64>::from_fn(4, 4, |i, j| u[i * 4 + j]);
    let det = m.determinant();
    let scale = C64::from_polar(1.0, -det.arg() / 4.0);
    let mut out = *u;
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

/// Splits a 4x4 product `A ⊗ B` into its factors (up to phase).
fn split_kron(m: &[C64; 16]) -> ([C64; 4], [C64; 4]) {
    let block = |i: usize, j: usize| -> [C64; 4] {
        [
            m[(2 * i) * 4 + 2 * j],
            m[(2 * i) * 4 + 2 * j + 1],
            m[(2 * i + 1) * 4 + 2 * j],
            m[(2 * i + 1) * 4 + 2 * j + 1],
        ]
    };
    let fro = |b: &[C64; 4]| b.iter().map(|x| x.norm_sqr()).sum::<f64>();
    let (bi, bj) = (0..4)
        .map(|k| (k / 2, k % 2))
        .max_by(|x, y| fro(&block(x.0, x.1)).total_cmp(&fro(&block(y.0, y.1))))
        .unwrap();
    let bb = block(bi, bj);
    let n = (fro(&bb) / 2.0).sqrt();
    let b: [C64; 4] = bb.map(|x| x / n);
    let mut a = [ZERO; 4];
    for i in 0..2 {
        for j in 0..2 {
            let blk = block(i, j);
            // tr(B^† blk) / 2
            let mut acc = ZERO;
            for r in 0..2 {
                for c in 0..2 {
                    acc += b[r * 2 + c].conj() * blk[r * 2 + c];
                }
            }
            a[i * 2 + j] = acc / 2.0;
        }
    }
    (a, b)
}

fn real_to_c(m: &Mat<f64>) -> [C64; 16] {
    let mut out = [ZERO; 16];
    for i in 0..4 {
        for j in 0..4 {
            out[i * 4 + j] = C64::from(m[(i, j)]);
        }
    }
    out
}

/// Angles of the 3-CNOT template reproducing `u` up to a global phase.
pub fn kak_angles(u: &TwoQubitBlock) -> Result<KakAngles, CompileError> {
    let dev = u.unitarity_deviation();
    if !(dev <= 1e-8) {
        return Err(CompileError::NotUnitary(dev));
    }
    let target = to_su4(&u.m);
    let su = magic_split(&target)?;
    let mut th = su.phases;
    let total: f64 = th.iter().sum();
    th[3] -= total;
    let (a, b, c) = (0.5 * (th[0] + th[1]), -0.5 * (th[0] + th[2]), -0.5 * (th[1] + th[2]));
    let t = [FRAC_PI_2 - 2.0 * a, FRAC_PI_2 - 2.0 * b, FRAC_PI_2 + 2.0 * c];
    let core_angles = KakAngles {
        c: [0.0; 3],
        d: [0.0; 3],
        t,
        a: [0.0; 3],
        b: [0.0; 3],
    };
    let core = to_su4(&core_angles.matrix());
    let cs = magic_split(&core)?;
    // Match the core spectrum to the target's. Each half-phase is only
    // fixed up to sign, so allow a global 4th root of unity, a permutation
    // and an even number of sign flips (which keeps both sides in SO(4)).
    let mut best: Option<(f64, [usize; 4], [f64; 4])> = None;
    for w in 0..4 {
        let omega = C64::from_polar(1.0, FRAC_PI_2 * w as f64);
        for perm in permutations4() {
            let mut signs = [1.0; 4];
            let mut worst: f64 = 0.0;
            for j in 0..4 {
                let tv = C64::from_polar(1.0, su.phases[j]);
                let cv = omega * C64::from_polar(1.0, cs.phases[perm[j]]);
                signs[j] = if (tv * cv.conj()).re >= 0.0 { 1.0 } else { -1.0 };
                worst = worst.max((tv - cv * signs[j]).norm());
            }
            if signs.iter().product::<f64>() < 0.0 {
                continue;
            }
            if best.as_ref().map(|b| worst < b.0).unwrap_or(true) {
                best = Some((worst, perm, signs));
            }
        }
    }
    let (err, perm, signs) = best.ok_or_else(|| CompileError::Decomposition("no spectrum match".into()))?;
    if err > 1e-6 {
        return Err(CompileError::Decomposition(format!("spectra do not match ({err:.2e})")));
    }
    // D_target = S Pᵀ D_core P up to the global factor, with P[k, j] = 1
    // when target slot j takes core slot k
    let mut p = Mat::<f64>::zeros(4, 4);
    for (j, &k) in perm.iter().enumerate() {
        p[(k, j)] = 1.0;
    }
    if p.determinant() < 0.0 {
        // flipping a column leaves Pᵀ D P unchanged
        p[(perm[0], 0)] = -1.0;
    }
    let sm = Mat::<f64>::from_fn(4, 4, |i, j| if i == j { signs[i] } else { 0.0 });
    let l1 = &su.k1 * &sm * p.transpose() * cs.k1.transpose();
    let l2 = &cs.k2 * &p * su.k2.transpose();
    let mg = magic();
    let mga = adj4(&mg);
    let left = mul4(&mg, &mul4(&real_to_c(&l1), &mga));
    let right = mul4(&mg, &mul4(&real_to_c(&l2), &mga));
    let (a1, b1) = split_kron(&left);
    let (a2, b2) = split_kron(&right);
    let ang = |v: [C64; 4]| {
        let (x, y, z) = u3_angles(&v);
        [x, y, z]
    };
    let out = KakAngles {
        c: ang(a2),
        d: ang(b2),
        t,
        a: ang(a1),
        b: ang(b1),
    };
    let recon = reconstruction_error(&u.m, &out.matrix());
    if recon > 1e-8 {
        return Err(CompileError::Decomposition(format!("reconstruction error {recon:.2e}")));
    }
    Ok(out)
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                if a == b || a == c || b == c {
                    continue;
                }
                out.push([a, b, c, 6 - a - b - c]);
            }
        }
    }
    out
}

/// Template gates for `u` on qubits `a = 1`, `b = 0`.
pub fn kak_decompose(u: &TwoQubitBlock) -> Result<Vec<Gate>, CompileError> {
    Ok(kak_angles(u)?.gates(1, 0))
}

/// Operator-norm distance between `u` and `v` after removing the best
/// global phase.
pub fn reconstruction_error(u: &[C64; 16], v: &[C64; 16]) -> f64 {
    let tr: C64 = (0..16).map(|k| u[k].conj() * v[k]).sum();
    let phase = if tr.norm() > 0.0 { tr / tr.norm() } else { ONE };
    let diff = Mat::<C64>::from_fn(4, 4, |i, j| u[i * 4 + j] * phase - v[i * 4 + j]);
    match diff.singular_values() {
        Ok(s) => s.into_iter().fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    }
}

/// Angles of the template equivalent to the identity.
pub fn identity_angles() -> KakAngles {
    kak_angles(&TwoQubitBlock::identity()).expect("identity decomposes")
}

// ---------------------------------------------------------------------------
// staircases and ansatz

fn block_param_name(layer: usize, block: usize, k: usize) -> String {
    format!("l{layer}.b{block}.{k}")
}

fn tail_param_name(k: usize) -> String {
    format!("tail.{k}")
}

fn push_block(c: &mut Circuit, layer: usize, block: usize, values: &[f64]) {
    let slots: Vec<Angle> = (0..15)
        .map(|k| Angle::Slot(c.add_param(block_param_name(layer, block, k), values[k], false)))
        .collect();
    for g in template_gates(block + 1, block, &slots) {
        c.gates.push(g);
    }
}

fn push_tail(c: &mut Circuit, values: [f64; 3]) {
    let q = c.num_qubits - 1;
    let s: Vec<Angle> = (0..3)
        .map(|k| Angle::Slot(c.add_param(tail_param_name(k), values[k], false)))
        .collect();
    c.gates.push(Gate::U3 {
        qubit: q,
        angles: [s[0], s[1], s[2]],
    });
}

/// Unitary blocks of a right-canonical bond-2 MPS: `N - 1` two-qubit
/// blocks followed by the last-site single-qubit unitary (as `I ⊗ u`).
pub fn staircase_blocks(mps: &MpsState) -> Result<Vec<TwoQubitBlock>, CompileError> {
    let n = mps.len();
    if n < 2 {
        return Err(CompileError::InvalidShape("staircase needs at least 2 qubits".into()));
    }
    if mps.max_bond() > 2 {
        return Err(CompileError::BondTooLarge(mps.max_bond()));
    }
    if mps.canonical_form() != CanonicalForm::Right || mps.right_canonical_residual() > 1e-8 {
        return Err(CompileError::NotCanonical);
    }
    (0..n)
        .map(|i| {
            let pos = if i == 0 {
                Position::First
            } else if i + 1 == n {
                Position::Last
            } else {
                Position::Bulk
            };
            embed_isometry(mps.tensor(i), pos)
        })
        .collect()
}

/// Parameterized staircase preparing `mps` from `|0...0>` up to a global
/// phase. Its layout equals a one-layer ansatz.
pub fn staircase_from_mps(mps: &MpsState) -> Result<Circuit, CompileError> {
    let blocks = staircase_blocks(mps)?;
    let n = mps.len();
    let mut c = Circuit::new(n);
    for (i, b) in blocks[..n - 1].iter().enumerate() {
        push_block(&mut c, 1, i, &kak_angles(b)?.to_vec());
    }
    let last = &blocks[n - 1];
    let u = [last.get(0, 0), last.get(0, 1), last.get(1, 0), last.get(1, 1)];
    let (t, p, l) = u3_angles(&u);
    push_tail(&mut c, [t, p, l]);
    Ok(c)
}

/// `D` staircase layers of 15-parameter blocks and one trailing U3 on the
/// last qubit. A `prefix`, if given, is prepended with all parameters
/// frozen. Blocks start identity-equivalent and the trailing rotation at
/// zero.
pub fn build_ansatz(n: usize, depth: usize, prefix: Option<&Circuit>) -> Result<Circuit, CompileError> {
    if n < 2 || depth < 1 {
        return Err(CompileError::InvalidShape(format!("N = {n}, D = {depth}")));
    }
    let mut c = Circuit::new(n);
    if let Some(p) = prefix {
        c.append(p, true, "prefix.")?;
    }
    let id = identity_angles().to_vec();
    for layer in 1..=depth {
        for block in 0..n - 1 {
            push_block(&mut c, layer, block, &id);
        }
    }
    push_tail(&mut c, [0.0; 3]);
    Ok(c)
}

/// Free-parameter vector that makes `ansatz` prepare `mps`.
///
/// Without a frozen prefix, layer 1 and the trailing rotation come from the
/// staircase of `mps`. With a prefix the state is already prepared by it,
/// so every layer is set to the identity.
pub fn init_params_from_mps(mps: &MpsState, ansatz: &Circuit) -> Result<Vec<f64>, CompileError> {
    if mps.len() != ansatz.num_qubits() {
        return Err(CompileError::InvalidShape(format!(
            "MPS has {} sites, ansatz {} qubits",
            mps.len(),
            ansatz.num_qubits()
        )));
    }
    let has_prefix = ansatz.params().iter().any(|p| p.frozen);
    let id = identity_angles().to_vec();
    let mut values: Vec<f64> = Vec::with_capacity(ansatz.num_free_params());
    let stair = if has_prefix {
        None
    } else {
        Some(staircase_from_mps(mps)?)
    };
    for p in ansatz.params().iter().filter(|p| !p.frozen) {
        let from_stair = stair
            .as_ref()
            .filter(|_| p.name.starts_with("l1.") || p.name.starts_with("tail."))
            .and_then(|s| s.param_index(&p.name).map(|k| s.params()[k].value));
        let v = match from_stair {
            Some(v) => v,
            None if p.name.starts_with("tail.") => 0.0,
            None => {
                let k: usize = p
                    .name
                    .rsplit('.')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .filter(|&k: &usize| k < 15)
                    .ok_or_else(|| CompileError::InvalidShape(format!("unexpected parameter {}", p.name)))?;
                id[k]
            }
        };
        values.push(v);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::haar_unitary;
    use crate::tensornet::canonicalize_right;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_from(m: &faer::Mat<C64>) -> TwoQubitBlock {
        let mut a = [ZERO; 16];
        for i in 0..4 {
            for j in 0..4 {
                a[i * 4 + j] = m[(i, j)];
            }
        }
        TwoQubitBlock::new(a).unwrap()
    }

    fn fidelity(a: &[C64], b: &[C64]) -> f64 {
        crate::linalg::inner(a, b).norm_sqr() / (crate::linalg::inner(a, a).re * crate::linalg::inner(b, b).re)
    }

    #[test]
    fn u3_angles_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = haar_unitary(2, &mut rng);
            let v = [h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]];
            let (t, p, l) = u3_angles(&v);
            let w = u3_matrix(t, p, l);
            let ph = v[0] * w[0].conj() + v[1] * w[1].conj() + v[2] * w[2].conj() + v[3] * w[3].conj();
            let ph = ph / ph.norm();
            for k in 0..4 {
                assert!((w[k] * ph - v[k]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn kak_reconstructs_special_gates() {
        for u in [
            TwoQubitBlock::identity(),
            TwoQubitBlock::cnot_ab(),
            TwoQubitBlock { m: CX_BA },
        ] {
            let k = kak_angles(&u).unwrap();
            assert!(reconstruction_error(u.matrix(), &k.matrix()) < 1e-10);
        }
        // SWAP sits on a corner of the Weyl chamber
        let mut swap = [ZERO; 16];
        for (r, c) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
            swap[r * 4 + c] = ONE;
        }
        let k = kak_angles(&TwoQubitBlock::new(swap).unwrap()).unwrap();
        assert!(reconstruction_error(&swap, &k.matrix()) < 1e-10);
    }

    #[test]
    fn kak_on_local_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (a, b) = (haar_unitary(2, &mut rng), haar_unitary(2, &mut rng));
            let m = kron2(
                &[a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]],
                &[b[(0, 0)], b[(0, 1)], b[(1, 0)], b[(1, 1)]],
            );
            let k = kak_angles(&TwoQubitBlock::new(m).unwrap()).unwrap();
            assert!(reconstruction_error(&m, &k.matrix()) < 1e-9);
        }
    }

    #[test]
    fn kak_on_haar_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let u = block_from(&haar_unitary(4, &mut rng));
            let k = kak_angles(&u).unwrap();
            assert!(reconstruction_error(u.matrix(), &k.matrix()) < 1e-8);
        }
    }

    #[test]
    fn gate_list_matches_template_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = block_from(&haar_unitary(4, &mut rng));
        let gates = kak_decompose(&u).unwrap();
        assert_eq!(gates.len(), 10);
        assert_eq!(gates.iter().filter(|g| matches!(g, Gate::Cnot { .. })).count(), 3);
        let c = Circuit::from_parts(2, gates, vec![]).unwrap();
        let full = c.unitary();
        let mut m = [ZERO; 16];
        m.copy_from_slice(&full);
        assert!(reconstruction_error(u.matrix(), &m) < 1e-8);
    }

    #[test]
    fn non_unitary_is_rejected() {
        let mut m = *TwoQubitBlock::identity().matrix();
        m[0] = C64::from(1.1);
        assert!(matches!(TwoQubitBlock::new(m), Err(CompileError::NotUnitary(_))));
    }

    #[test]
    fn embed_product_tensor() {
        let t = SiteTensor::new(1, 2, 1, vec![ONE, ZERO]).unwrap();
        let u = embed_isometry(&t, Position::First).unwrap();
        assert_eq!(u.get(0, 0), ONE);
        assert!(u.unitarity_deviation() < 1e-14);
        let last = embed_isometry(&t, Position::Last).unwrap();
        assert_eq!(last, TwoQubitBlock::identity());
    }

    #[test]
    fn embed_random_tensor() {
        let mps = canonicalize_right(&MpsState::random(4, 2, 17)).unwrap();
        let t = mps.tensor(1);
        let u = embed_isometry(t, Position::Bulk).unwrap();
        assert!(u.unitarity_deviation() < 1e-12);
        for a2 in 0..2 {
            for s in 0..2 {
                for a in 0..2 {
                    assert!((u.get(2 * a + s, a2) - t.get(a2, s, a)).norm() < 1e-12);
                }
            }
        }
        let bad = SiteTensor::new(2, 2, 2, vec![ONE; 8]).unwrap();
        assert!(matches!(
            embed_isometry(&bad, Position::Bulk),
            Err(CompileError::NotIsometric(_))
        ));
        let wide = canonicalize_right(&MpsState::random(6, 4, 1)).unwrap();
        assert!(matches!(
            embed_isometry(wide.tensor(3), Position::Bulk),
            Err(CompileError::BondTooLarge(4))
        ));
    }

    fn ghz(n: usize) -> MpsState {
        let mut psi = vec![ZERO; 1 << n];
        psi[0] = C64::from(FRAC_1_SQRT_2);
        psi[(1 << n) - 1] = C64::from(FRAC_1_SQRT_2);
        canonicalize_right(&MpsState::from_dense(&psi, 2).unwrap()).unwrap()
    }

    #[test]
    fn staircase_prepares_states() {
        let zero = MpsState::product_state(&[0; 5]);
        let c = staircase_from_mps(&zero).unwrap();
        assert!((fidelity(&c.statevector(), &zero.to_dense()) - 1.0).abs() < 1e-12);
        let g = ghz(6);
        let c = staircase_from_mps(&g).unwrap();
        let psi = c.statevector();
        assert!((psi[0].norm_sqr() - 0.5).abs() < 1e-10);
        assert!((psi[63].norm_sqr() - 0.5).abs() < 1e-10);
        for seed in 0..4 {
            let m = canonicalize_right(&MpsState::random(7, 2, seed)).unwrap();
            let c = staircase_from_mps(&m).unwrap();
            assert_eq!(c.num_free_params(), 15 * 6 + 3);
            assert!(fidelity(&c.statevector(), &m.to_dense()) > 1.0 - 1e-10);
        }
    }

    #[test]
    fn staircase_rejects_wrong_inputs() {
        let m = MpsState::random(5, 2, 1);
        assert_eq!(staircase_from_mps(&m).unwrap_err(), CompileError::NotCanonical);
        let wide = canonicalize_right(&MpsState::random(6, 3, 1)).unwrap();
        assert!(matches!(staircase_from_mps(&wide), Err(CompileError::BondTooLarge(3))));
    }

    #[test]
    fn ansatz_counts() {
        assert_eq!(build_ansatz(12, 1, None).unwrap().num_free_params(), 168);
        assert_eq!(build_ansatz(2, 1, None).unwrap().num_free_params(), 18);
        for n in 2..=16 {
            for d in 1..=6 {
                let c = build_ansatz(n, d, None).unwrap();
                assert_eq!(c.num_free_params(), d * 15 * (n - 1) + 3);
                assert_eq!(c.cnot_count(), 3 * d * (n - 1));
            }
        }
        assert!(build_ansatz(1, 1, None).is_err());
        assert!(build_ansatz(3, 0, None).is_err());
    }

    #[test]
    fn ansatz_with_frozen_prefix() {
        let mps = canonicalize_right(&MpsState::random(12, 2, 4)).unwrap();
        let prefix = staircase_from_mps(&mps).unwrap();
        let c = build_ansatz(12, 3, Some(&prefix)).unwrap();
        assert_eq!(c.num_free_params(), 498);
        assert_eq!(c.frozen_gate_count(), prefix.gates().len());
        let k = c.params().iter().position(|p| p.frozen).unwrap();
        let mut c2 = c.clone();
        assert_eq!(c2.set_parameter(k, 1.0).unwrap_err(), CompileError::FrozenParameter(k));
        let init = init_params_from_mps(&mps, &c).unwrap();
        let bound = c.bind_parameters(&init).unwrap();
        assert!(fidelity(&bound.statevector(), &mps.to_dense()) > 1.0 - 1e-10);
    }

    #[test]
    fn init_from_mps_without_prefix() {
        let mps = canonicalize_right(&MpsState::random(6, 2, 5)).unwrap();
        for d in [1, 3] {
            let c = build_ansatz(6, d, None).unwrap();
            let v = init_params_from_mps(&mps, &c).unwrap();
            let bound = c.bind_parameters(&v).unwrap();
            assert!(fidelity(&bound.statevector(), &mps.to_dense()) > 1.0 - 1e-10);
        }
        let c = build_ansatz(5, 1, None).unwrap();
        assert!(init_params_from_mps(&mps, &c).is_err());
    }

    #[test]
    fn binding_rules() {
        let c = build_ansatz(3, 1, None).unwrap();
        assert_eq!(
            c.bind_parameters(&[0.0; 4]).unwrap_err(),
            CompileError::LengthMismatch { expected: 33, got: 4 }
        );
        let zero = c.bind_parameters(&vec![0.0; 33]).unwrap();
        assert!(zero.params().iter().all(|p| p.value == 0.0));
        assert_eq!(zero.cnot_count(), 6);
    }

    #[test]
    fn text_roundtrip() {
        let mps = canonicalize_right(&MpsState::random(4, 2, 6)).unwrap();
        let prefix = staircase_from_mps(&mps).unwrap();
        let mut c = build_ansatz(4, 2, Some(&prefix)).unwrap();
        c.push(Gate::u3_fixed(2, 0.25, -1.5, 3.0)).unwrap();
        let text = c.to_text();
        let back = Circuit::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
        assert!(Circuit::from_text("QUBITS 2\n").is_err());
        assert!(Circuit::from_text("MPSVQE-CIRCUIT 1\nQUBITS 2\nCNOT 0 0\n").is_err());
        assert!(Circuit::from_text("MPSVQE-CIRCUIT 1\nQUBITS 2\nU3 0 p3 0 0\n").is_err());
    }
}
