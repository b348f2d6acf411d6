//! Spin graphs, qubit labelings and Heisenberg Hamiltonians as Pauli sums.
//!
//! Qubit `q` of an `N`-qubit register corresponds to bit `q` of a
//! computational-basis index (little-endian). Every dense vector or matrix in
//! this crate follows that convention.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

const KAGOME_STAR_EDGES: &str = include_str!("../data/kagome_star_edges.txt");
const ZIGZAG_LABELING: &str = include_str!("../data/labeling_zigzag.txt");
const SPIRAL_LABELING: &str = include_str!("../data/labeling_spiral.txt");

/// Number of sites in the Kagome star patch.
pub const KAGOME_STAR_SITES: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("graph must have at least one site")]
    NoSites,
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("edge ({0}, {1}) appears more than once")]
    DuplicateEdge(usize, usize),
    #[error("edge ({i}, {j}) references a site outside 0..{n}")]
    SiteOutOfRange { i: usize, j: usize, n: usize },
    #[error("unknown labeling name `{0}` (expected zigzag, spiral or custom)")]
    UnknownLabeling(String),
    #[error("labeling has {got} entries but the lattice has {expected} sites")]
    LabelingSize { expected: usize, got: usize },
    #[error("labeling is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("coupling must be finite, got {0}")]
    NonFiniteCoupling(f64),
    #[error("Pauli string has length {got}, expected {expected}")]
    StringLength { expected: usize, got: usize },
    #[error("invalid Pauli letter `{0}`")]
    BadLetter(char),
    #[error("coefficient must be finite")]
    NonFiniteCoefficient,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A single-qubit Pauli operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

    /// Index in the (I, X, Y, Z) ordering.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Pauli {
        Pauli::ALL[i & 3]
    }

    pub fn as_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Result<Pauli, ModelError> {
        match c {
            'I' => Ok(Pauli::I),
            'X' => Ok(Pauli::X),
            'Y' => Ok(Pauli::Y),
            'Z' => Ok(Pauli::Z),
            other => Err(ModelError::BadLetter(other)),
        }
    }
}

/// Undirected simple graph on `num_sites` spins. Edges are stored as `(i, j)`
/// with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinGraph {
    num_sites: usize,
    edges: Vec<(usize, usize)>,
}

impl SpinGraph {
    pub fn new(num_sites: usize, edges: &[(usize, usize)]) -> Result<Self, ModelError> {
        if num_sites == 0 {
            return Err(ModelError::NoSites);
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i == j {
                return Err(ModelError::SelfLoop(i, j));
            }
            if i >= num_sites || j >= num_sites {
                return Err(ModelError::SiteOutOfRange { i, j, n: num_sites });
            }
            if !set.insert((i.min(j), i.max(j))) {
                return Err(ModelError::DuplicateEdge(i, j));
            }
        }
        Ok(SpinGraph {
            num_sites,
            edges: set.into_iter().collect(),
        })
    }

    /// Open chain `0 - 1 - ... - (n-1)`.
    pub fn open_chain(n: usize) -> Result<Self, ModelError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        SpinGraph::new(n, &edges)
    }

    /// Parses the edge-list format: one `i j` pair per line, `#` comments.
    /// The site count is one more than the largest index unless given.
    pub fn parse_edges(text: &str, num_sites: Option<usize>) -> Result<Self, ModelError> {
        let mut edges = Vec::new();
        for (lineno, line) in data_lines(text) {
            let mut it = line.split_whitespace();
            let mut next = || -> Result<usize, ModelError> {
                it.next()
                    .ok_or_else(|| parse_err(lineno, "expected two site indices"))?
                    .parse()
                    .map_err(|_| parse_err(lineno, "site index is not an integer"))
            };
            let i = next()?;
            let j = next()?;
            if it.next().is_some() {
                return Err(parse_err(lineno, "trailing tokens after edge"));
            }
            edges.push((i, j));
        }
        let n = num_sites.unwrap_or_else(|| edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0));
        SpinGraph::new(n, &edges)
    }

    pub fn to_edge_text(&self) -> String {
        let mut s = String::new();
        for &(i, j) in &self.edges {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Maps every site `s` to `labeling.qubit(s)`.
    pub fn relabel(&self, labeling: &Labeling) -> Result<SpinGraph, ModelError> {
        if labeling.len() != self.num_sites {
            return Err(ModelError::LabelingSize {
                expected: self.num_sites,
                got: labeling.len(),
            });
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(i, j)| (labeling.qubit(i), labeling.qubit(j)))
            .collect();
        SpinGraph::new(self.num_sites, &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelingKind {
    Zigzag,
    Spiral,
    Custom,
}

impl fmt::Display for LabelingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelingKind::Zigzag => "zigzag",
            LabelingKind::Spiral => "spiral",
            LabelingKind::Custom => "custom",
        })
    }
}

impl FromStr for LabelingKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zigzag" => Ok(LabelingKind::Zigzag),
            "spiral" => Ok(LabelingKind::Spiral),
            "custom" => Ok(LabelingKind::Custom),
            other => Err(ModelError::UnknownLabeling(other.to_string())),
        }
    }
}

/// Bijection from lattice-site identity to qubit index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    kind: LabelingKind,
    permutation: Vec<usize>,
}

impl Labeling {
    pub fn new(kind: LabelingKind, permutation: Vec<usize>) -> Result<Self, ModelError> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &q in &permutation {
            if q >= n || seen[q] {
                return Err(ModelError::NotAPermutation(n));
            }
            seen[q] = true;
        }
        Ok(Labeling { kind, permutation })
    }

    /// Shipped zig-zag labeling of the Kagome star ("zigzag-v1").
    pub fn zigzag() -> Self {
        Self::parse(LabelingKind::Zigzag, ZIGZAG_LABELING).expect("shipped labeling is valid")
    }

    /// Shipped spiral (nonlocal) labeling of the Kagome star ("spiral-v1").
    pub fn spiral() -> Self {
        Self::parse(LabelingKind::Spiral, SPIRAL_LABELING).expect("shipped labeling is valid")
    }

    pub fn identity(n: usize) -> Self {
        Labeling {
            kind: LabelingKind::Custom,
            permutation: (0..n).collect(),
        }
    }

    /// Resolves a named labeling for the Kagome star. `custom` requires a
    /// permutation.
    pub fn from_name(name: &str, custom: Option<Vec<usize>>) -> Result<Self, ModelError> {
        match name.parse::<LabelingKind>()? {
            LabelingKind::Zigzag => Ok(Self::zigzag()),
            LabelingKind::Spiral => Ok(Self::spiral()),
            LabelingKind::Custom => {
                let perm = custom.unwrap_or_else(|| (0..KAGOME_STAR_SITES).collect());
                Self::new(LabelingKind::Custom, perm)
            }
        }
    }

    /// Parses the labeling file format: a single line of space-separated qubit
    /// indices (comment lines allowed).
    pub fn parse(kind: LabelingKind, text: &str) -> Result<Self, ModelError> {
        let mut lines = data_lines(text);
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, "labeling file has no permutation line"))?;
        if let Some((extra, _)) = lines.next() {
            return Err(parse_err(extra, "labeling file must contain a single line"));
        }
        let perm = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| parse_err(lineno, "labeling entry is not an integer"))?;
        Self::new(kind, perm)
    }

    pub fn to_text(&self) -> String {
        let body: Vec<String> = self.permutation.iter().map(|q| q.to_string()).collect();
        format!("{}\n", body.join(" "))
    }

    pub fn kind(&self) -> LabelingKind {
        self.kind
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn qubit(&self, site: usize) -> usize {
        self.permutation[site]
    }
}

/// The canonical (unlabeled) 12-site Kagome star from the shipped edge file.
pub fn kagome_star_canonical() -> SpinGraph {
    SpinGraph::parse_edges(KAGOME_STAR_EDGES, Some(KAGOME_STAR_SITES)).expect("shipped edge file is valid")
}

/// Kagome star with site identities mapped to qubits by `labeling`.
pub fn build_kagome_star(labeling: &Labeling) -> Result<SpinGraph, ModelError> {
    if labeling.len() != KAGOME_STAR_SITES {
        return Err(ModelError::LabelingSize {
            expected: KAGOME_STAR_SITES,
            got: labeling.len(),
        });
    }
    kagome_star_canonical().relabel(labeling)
}

/// A weighted tensor product of Pauli operators.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliString {
    letters: Vec<Pauli>,
    coefficient: f64,
}

impl PauliString {
    pub fn new(letters: Vec<Pauli>, coefficient: f64) -> Result<Self, ModelError> {
        if !coefficient.is_finite() {
            return Err(ModelError::NonFiniteCoefficient);
        }
        Ok(PauliString { letters, coefficient })
    }

    /// Parses a word such as `"XXIZ"`; character `q` acts on qubit `q`.
    pub fn from_word(word: &str, coefficient: f64) -> Result<Self, ModelError> {
        let letters = word.chars().map(Pauli::from_char).collect::<Result<Vec<_>, _>>()?;
        Self::new(letters, coefficient)
    }

    /// `coefficient * P_i P_j` on `n` qubits, identity elsewhere.
    pub fn two_body(n: usize, i: usize, j: usize, letter: Pauli, coefficient: f64) -> Self {
        let mut letters = vec![Pauli::I; n];
        letters[i] = letter;
        letters[j] = letter;
        PauliString { letters, coefficient }
    }

    pub fn letters(&self) -> &[Pauli] {
        &self.letters
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn num_qubits(&self) -> usize {
        self.letters.len()
    }

    pub fn word(&self) -> String {
        self.letters.iter().map(|p| p.as_char()).collect()
    }

    /// Bit masks `(x, z)` and the number of `Y` letters, so that
    /// `P = i^{n_y} X^x Z^z` acting as `P|b> = i^{n_y} (-1)^{|b & z|} |b ^ x>`.
    pub fn masks(&self) -> (u64, u64, u32) {
        let mut x = 0u64;
        let mut z = 0u64;
        let mut ny = 0;
        for (q, p) in self.letters.iter().enumerate() {
            match p {
                Pauli::I => {}
                Pauli::X => x |= 1 << q,
                Pauli::Z => z |= 1 << q,
                Pauli::Y => {
                    x |= 1 << q;
                    z |= 1 << q;
                    ny += 1;
                }
            }
        }
        (x, z, ny)
    }

    /// Qubits on which the string acts nontrivially.
    pub fn support(&self) -> Vec<usize> {
        self.letters
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != Pauli::I)
            .map(|(q, _)| q)
            .collect()
    }

    /// Two strings commute qubit-wise if on every qubit their letters are
    /// equal or one of them is the identity.
    pub fn qubitwise_commutes(&self, other: &PauliString) -> bool {
        self.letters
            .iter()
            .zip(&other.letters)
            .all(|(a, b)| *a == Pauli::I || *b == Pauli::I || a == b)
    }
}

/// Real-weighted sum of Pauli strings on a fixed number of qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliSum {
    terms: Vec<PauliString>,
    num_qubits: usize,
    coupling: f64,
}

impl PauliSum {
    pub fn new(num_qubits: usize, terms: Vec<PauliString>) -> Result<Self, ModelError> {
        for t in &terms {
            if t.num_qubits() != num_qubits {
                return Err(ModelError::StringLength {
                    expected: num_qubits,
                    got: t.num_qubits(),
                });
            }
        }
        Ok(PauliSum {
            terms,
            num_qubits,
            coupling: 1.0,
        })
    }

    pub fn terms(&self) -> &[PauliString] {
        &self.terms
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    /// Coupling `J` the sum was built with (1 for hand-assembled sums).
    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Sum of `|c|` over terms; bounds the operator norm.
    pub fn one_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.coefficient.abs()).sum()
    }
}

/// `J * sum_{<i,j>} (X_i X_j + Y_i Y_j + Z_i Z_j)` with terms ordered by
/// `(i, j, letter)`.
pub fn build_heisenberg(graph: &SpinGraph, coupling: f64) -> Result<PauliSum, ModelError> {
    if !coupling.is_finite() {
        return Err(ModelError::NonFiniteCoupling(coupling));
    }
    if graph.edges.is_empty() {
        return Err(ModelError::EmptyGraph);
    }
    let n = graph.num_sites;
    let terms = graph
        .edges
        .iter()
        .flat_map(|&(i, j)| {
            [Pauli::X, Pauli::Y, Pauli::Z]
                .into_iter()
                .map(move |p| PauliString::two_body(n, i, j, p, coupling))
        })
        .collect();
    Ok(PauliSum {
        terms,
        num_qubits: n,
        coupling,
    })
}

/// A set of qubit-wise commuting terms measurable in one product basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGroup {
    /// Indices into [`PauliSum::terms`].
    pub indices: Vec<usize>,
    /// Measurement letter per qubit (`I` where no term acts).
    pub basis: Vec<Pauli>,
}

/// Greedy first-fit partition of the terms into qubit-wise commuting groups,
/// visiting terms in their stored order.
pub fn group_commuting_terms(h: &PauliSum) -> Vec<TermGroup> {
    let mut groups: Vec<TermGroup> = Vec::new();
    'terms: for (idx, term) in h.terms.iter().enumerate() {
        for g in groups.iter_mut() {
            let fits = term
                .letters
                .iter()
                .zip(&g.basis)
                .all(|(a, b)| *a == Pauli::I || *b == Pauli::I || a == b);
            if fits {
                for (b, a) in g.basis.iter_mut().zip(&term.letters) {
                    if *a != Pauli::I {
                        *b = *a;
                    }
                }
                g.indices.push(idx);
                continue 'terms;
            }
        }
        groups.push(TermGroup {
            indices: vec![idx],
            basis: term.letters.clone(),
        });
    }
    groups
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(line: usize, msg: &str) -> ModelError {
    ModelError::Parse {
        line,
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kagome_star_has_twelve_sites_and_eighteen_edges() {
        let g = build_kagome_star(&Labeling::zigzag()).unwrap();
        assert_eq!(g.num_sites(), 12);
        assert_eq!(g.edges().len(), 18);
        let mut degree = [0; 12];
        for &(i, j) in g.edges() {
            degree[i] += 1;
            degree[j] += 1;
        }
        // six hexagon sites of degree 4, six tips of degree 2
        assert_eq!(degree.iter().filter(|&&d| d == 4).count(), 6);
        assert_eq!(degree.iter().filter(|&&d| d == 2).count(), 6);
    }

    #[test]
    fn identity_labeling_reproduces_edge_file() {
        let g = build_kagome_star(&Labeling::from_name("custom", None).unwrap()).unwrap();
        let expected = SpinGraph::parse_edges(KAGOME_STAR_EDGES, Some(12)).unwrap();
        assert_eq!(g, expected);
    }

    #[test]
    fn spiral_is_relabeling_of_zigzag() {
        let zz = Labeling::zigzag();
        let sp = Labeling::spiral();
        let gz = build_kagome_star(&zz).unwrap();
        let gs = build_kagome_star(&sp).unwrap();
        // map zigzag qubits back to sites, then forward with spiral
        let mut inv = vec![0; 12];
        for s in 0..12 {
            inv[zz.qubit(s)] = s;
        }
        let perm: Vec<usize> = (0..12).map(|q| sp.qubit(inv[q])).collect();
        let mapped = gz.relabel(&Labeling::new(LabelingKind::Custom, perm).unwrap()).unwrap();
        assert_eq!(mapped, gs);
    }

    #[test]
    fn zigzag_keeps_most_bonds_short() {
        let span = |g: &SpinGraph| g.edges().iter().map(|&(i, j)| j - i).sum::<usize>();
        let gz = build_kagome_star(&Labeling::zigzag()).unwrap();
        let gs = build_kagome_star(&Labeling::spiral()).unwrap();
        assert!(span(&gz) < span(&gs));
    }

    #[test]
    fn labeling_errors() {
        assert_eq!(
            Labeling::from_name("snake", None).unwrap_err(),
            ModelError::UnknownLabeling("snake".into())
        );
        let small = Labeling::identity(5);
        assert!(matches!(
            build_kagome_star(&small),
            Err(ModelError::LabelingSize { expected: 12, got: 5 })
        ));
        assert!(Labeling::new(LabelingKind::Custom, vec![0, 0, 1]).is_err());
        assert!(Labeling::parse(LabelingKind::Custom, "0 1\n2 3\n").is_err());
    }

    #[test]
    fn graph_validation() {
        assert_eq!(SpinGraph::new(3, &[(1, 1)]), Err(ModelError::SelfLoop(1, 1)));
        assert_eq!(
            SpinGraph::new(3, &[(0, 1), (1, 0)]),
            Err(ModelError::DuplicateEdge(1, 0))
        );
        assert!(SpinGraph::new(2, &[(0, 2)]).is_err());
        assert!(SpinGraph::parse_edges("0 1 2\n", None).is_err());
    }

    #[test]
    fn heisenberg_single_edge() {
        let g = SpinGraph::new(2, &[(0, 1)]).unwrap();
        let h = build_heisenberg(&g, 1.0).unwrap();
        let words: Vec<_> = h.terms().iter().map(|t| (t.word(), t.coefficient())).collect();
        assert_eq!(words, vec![("XX".into(), 1.0), ("YY".into(), 1.0), ("ZZ".into(), 1.0)]);
        let h0 = build_heisenberg(&g, 0.0).unwrap();
        assert_eq!(h0.len(), 3);
        assert!(h0.terms().iter().all(|t| t.coefficient() == 0.0));
    }

    #[test]
    fn heisenberg_kagome_term_count_and_order() {
        let g = build_kagome_star(&Labeling::zigzag()).unwrap();
        let h = build_heisenberg(&g, 1.0).unwrap();
        assert_eq!(h.len(), 54);
        let keys: Vec<_> = h
            .terms()
            .iter()
            .map(|t| {
                let s = t.support();
                (s[0], s[1], t.letters()[s[0]])
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn heisenberg_errors() {
        let g = SpinGraph::new(3, &[]).unwrap();
        assert_eq!(build_heisenberg(&g, 1.0), Err(ModelError::EmptyGraph));
        let g = SpinGraph::open_chain(3).unwrap();
        assert!(build_heisenberg(&g, f64::NAN).is_err());
    }

    fn assert_valid_partition(h: &PauliSum, groups: &[TermGroup]) {
        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.indices.clone()).collect();
        all.sort();
        assert_eq!(all, (0..h.len()).collect::<Vec<_>>());
        for g in groups {
            for &a in &g.indices {
                for &b in &g.indices {
                    assert!(h.terms()[a].qubitwise_commutes(&h.terms()[b]));
                }
                for (q, p) in h.terms()[a].letters().iter().enumerate() {
                    assert!(*p == Pauli::I || *p == g.basis[q]);
                }
            }
        }
    }

    #[test]
    fn grouping_examples() {
        let g = SpinGraph::new(2, &[(0, 1)]).unwrap();
        let h = build_heisenberg(&g, 1.0).unwrap();
        let groups = group_commuting_terms(&h);
        assert_eq!(groups.len(), 3);
        assert_valid_partition(&h, &groups);

        let h = PauliSum::new(
            3,
            vec![
                PauliString::from_word("ZZI", 1.0).unwrap(),
                PauliString::from_word("IZZ", 1.0).unwrap(),
            ],
        )
        .unwrap();
        let groups = group_commuting_terms(&h);
        assert_eq!(groups.len(), 1);
        assert_valid_partition(&h, &groups);

        let h = build_heisenberg(&build_kagome_star(&Labeling::zigzag()).unwrap(), 1.0).unwrap();
        let groups = group_commuting_terms(&h);
        assert_valid_partition(&h, &groups);
        assert_eq!(groups.iter().map(|g| g.indices.len()).sum::<usize>(), 54);
    }

    #[test]
    fn masks_encode_letters() {
        let p = PauliString::from_word("XYZI", 2.0).unwrap();
        assert_eq!(p.masks(), (0b0011, 0b0110, 1));
        assert!(PauliString::from_word("XQ", 1.0).is_err());
        assert!(PauliString::from_word("X", f64::INFINITY).is_err());
    }
}
