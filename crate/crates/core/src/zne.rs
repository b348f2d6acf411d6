//! Zero-noise extrapolation.
//!
//! Noise is amplified by unitary folding: inserting `G† G` after a gate
//! leaves the ideal operation unchanged but doubles that gate's noise. With
//! `d` gates and `k` inserted pairs the effective scale is `1 + 2k/d`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compiler::{Angle, Circuit, Gate};
use crate::model::PauliSum;
use crate::simulator::{self, NoiseModel, QuantumState, SimError};

#[derive(Debug, Error, PartialEq)]
pub enum ZneError {
    #[error("scale factor {0} is below 1")]
    ScaleBelowOne(f64),
    #[error("cannot fold an empty circuit")]
    EmptyCircuit,
    #[error("scales must start at 1 and be strictly ascending: {0:?}")]
    BadScales(Vec<f64>),
    #[error("duplicate scale {0}")]
    DuplicateScale(f64),
    #[error("extrapolation needs {expected} points, got {got}")]
    Mismatch { expected: usize, got: usize },
    #[error("Richardson weights fail their defining conditions (residual {0:e})")]
    IllConditioned(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldStrategy {
    /// `U (U† U)^m` followed by a partial fold of the trailing gates.
    Global,
    /// Fold a seeded random subset of individual gates.
    RandomLocal { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldPlan {
    pub strategy: FoldStrategy,
    scale: f64,
}

impl FoldPlan {
    pub fn new(strategy: FoldStrategy, scale: f64) -> Result<Self, ZneError> {
        if !(scale >= 1.0) || !scale.is_finite() {
            return Err(ZneError::ScaleBelowOne(scale));
        }
        Ok(FoldPlan { strategy, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Number of inserted gate pairs, `round((α − 1) d / 2)`.
pub fn fold_pair_count(depth: usize, scale: f64) -> usize {
    ((scale - 1.0) * depth as f64 / 2.0).round() as usize
}

/// Scale actually realized by `pairs` folds on `depth` gates.
pub fn effective_scale(depth: usize, pairs: usize) -> f64 {
    1.0 + 2.0 * pairs as f64 / depth as f64
}

fn resolved(c: &Circuit) -> Vec<Gate> {
    c.gates()
        .iter()
        .map(|g| match g {
            Gate::U3 { qubit, angles } => {
                let (t, p, l) = c.resolve(angles);
                Gate::u3_fixed(*qubit, t, p, l)
            }
            cx => cx.clone(),
        })
        .collect()
}

fn inverse(g: &Gate) -> Gate {
    match g {
        Gate::U3 {
            qubit,
            angles: [Angle::Fixed(t), Angle::Fixed(p), Angle::Fixed(l)],
        } => Gate::u3_fixed(*qubit, -t, -l, -p),
        Gate::U3 { .. } => unreachable!("folding works on resolved gates"),
        cx => cx.clone(),
    }
}

/// Folded copy of `c` with all angles resolved to literals.
pub fn fold_circuit(c: &Circuit, plan: &FoldPlan) -> Result<Circuit, ZneError> {
    let gates = resolved(c);
    let d = gates.len();
    if d == 0 {
        return Err(ZneError::EmptyCircuit);
    }
    let k = fold_pair_count(d, plan.scale);
    let (whole, rest) = (k / d, k % d);
    let mut out: Vec<Gate> = Vec::with_capacity(d + 2 * k);
    match plan.strategy {
        FoldStrategy::Global => {
            out.extend(gates.iter().cloned());
            for _ in 0..whole {
                out.extend(gates.iter().rev().map(inverse));
                out.extend(gates.iter().cloned());
            }
            let tail = &gates[d - rest..];
            out.extend(tail.iter().rev().map(inverse));
            out.extend(tail.iter().cloned());
        }
        FoldStrategy::RandomLocal { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut rng);
            let mut folds = vec![whole; d];
            for &i in &idx[..rest] {
                folds[i] += 1;
            }
            for (g, &m) in gates.iter().zip(&folds) {
                out.push(g.clone());
                for _ in 0..m {
                    out.push(inverse(g));
                    out.push(g.clone());
                }
            }
        }
    }
    Ok(Circuit::from_parts(c.num_qubits(), out, Vec::new()).expect("folded gates are valid"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtrapolationKind {
    LinearLeastSquares,
    Richardson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationSpec {
    pub kind: ExtrapolationKind,
    scales: Vec<f64>,
}

impl ExtrapolationSpec {
    pub fn new(kind: ExtrapolationKind, scales: Vec<f64>) -> Result<Self, ZneError> {
        let ascending = scales.windows(2).all(|w| w[0] < w[1]);
        if scales.first() != Some(&1.0) || !ascending || scales.iter().any(|s| !s.is_finite()) {
            return Err(ZneError::BadScales(scales));
        }
        Ok(ExtrapolationSpec { kind, scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

/// `β_k = Π_{i≠k} a_i / (a_i − a_k)`: the solution of `Σβ = 1` and
/// `Σ β a^m = 0` for `m = 1..n−1`.
///
/// The conditions are re-checked on the result and an ill-conditioned
/// scale set is rejected.
pub fn richardson_coefficients(scales: &[f64]) -> Result<Vec<f64>, ZneError> {
    for (i, a) in scales.iter().enumerate() {
        if scales[..i].contains(a) {
            return Err(ZneError::DuplicateScale(*a));
        }
    }
    let betas: Vec<f64> = (0..scales.len())
        .map(|k| {
            scales
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, ai)| ai / (ai - scales[k]))
                .product()
        })
        .collect();
    let residual = richardson_residual(scales, &betas);
    let size: f64 = betas.iter().map(|b| b.abs()).sum();
    if residual
        > 1e-12
            * size.max(1.0)
            * scales
                .iter()
                .fold(1.0f64, |m, a| m.max(a.abs()))
                .powi(scales.len() as i32)
    {
        return Err(ZneError::IllConditioned(residual));
    }
    Ok(betas)
}

/// Largest violation of the defining conditions.
pub fn richardson_residual(scales: &[f64], betas: &[f64]) -> f64 {
    (0..scales.len())
        .map(|m| {
            let s: f64 = scales.iter().zip(betas).map(|(a, b)| b * a.powi(m as i32)).sum();
            if m == 0 {
                (s - 1.0).abs()
            } else {
                s.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Intercept weights `l` with `intercept = Σ l_k v_k` of a weighted
/// least-squares line.
fn linear_weights(xs: &[f64], w: &[f64]) -> Vec<f64> {
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(xs).map(|(w, x)| w * x).sum();
    let swxx: f64 = w.iter().zip(xs).map(|(w, x)| w * x * x).sum();
    let det = sw * swxx - swx * swx;
    xs.iter().zip(w).map(|(x, w)| w * (swxx - swx * x) / det).collect()
}

/// Zero-noise value and its standard error from `(α, value, stderr)`
/// points.
///
/// Both methods are linear in the values, so the error is propagated
/// through the weights. The least-squares fit is weighted by `1/σ²` when
/// every point has a positive error and unweighted otherwise; a single
/// point is returned unchanged.
pub fn extrapolate(spec: &ExtrapolationSpec, per_scale: &[(f64, f64, f64)]) -> Result<(f64, f64), ZneError> {
    if per_scale.len() != spec.scales.len() {
        return Err(ZneError::Mismatch {
            expected: spec.scales.len(),
            got: per_scale.len(),
        });
    }
    let xs: Vec<f64> = per_scale.iter().map(|p| p.0).collect();
    let weights = if per_scale.len() == 1 {
        vec![1.0]
    } else {
        match spec.kind {
            ExtrapolationKind::Richardson => richardson_coefficients(&xs)?,
            ExtrapolationKind::LinearLeastSquares => {
                let w: Vec<f64> = if per_scale.iter().all(|p| p.2 > 0.0) {
                    per_scale.iter().map(|p| 1.0 / (p.2 * p.2)).collect()
                } else {
                    vec![1.0; xs.len()]
                };
                linear_weights(&xs, &w)
            }
        }
    };
    let value = weights.iter().zip(per_scale).map(|(b, p)| b * p.1).sum();
    let var: f64 = weights.iter().zip(per_scale).map(|(b, p)| (b * p.2).powi(2)).sum();
    Ok((value, var.sqrt()))
}

/// All per-scale data together with the extrapolated point.
#[derive(Debug, Clone, PartialEq)]
pub struct MitigatedEstimate {
    /// `(effective α, value, stderr)` in scale order.
    pub per_scale: Vec<(f64, f64, f64)>,
    pub mitigated_value: f64,
    pub mitigated_stderr: f64,
}

impl MitigatedEstimate {
    /// The unfolded (α = 1) value.
    pub fn unmitigated(&self) -> f64 {
        self.per_scale[0].1
    }

    /// CSV with one row per scale and a final `0` row for the extrapolation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,value,stderr\n");
        for (a, v, e) in &self.per_scale {
            s.push_str(&format!("{a},{v},{e}\n"));
        }
        s.push_str(&format!("0,{},{}\n", self.mitigated_value, self.mitigated_stderr));
        s
    }
}

/// Energy of `c` under `noise`, exact or from `shots` samples.
pub fn noisy_energy(
    c: &Circuit,
    h: &PauliSum,
    noise: &NoiseModel,
    shots: Option<usize>,
    seed: u64,
) -> Result<(f64, f64), SimError> {
    let state: Box<dyn QuantumState> = if noise.is_noiseless() {
        Box::new(simulator::run_statevector(c)?)
    } else {
        Box::new(simulator::run_pauli_density(c, noise)?)
    };
    match shots {
        None => Ok((state.expectation(h)?, 0.0)),
        Some(s) => simulator::sample_expectation(state.as_ref(), h, s, seed),
    }
}

/// Folds `c` at every scale of `spec`, evaluates each and extrapolates.
///
/// The fit uses the realized scales `1 + 2k/d`, which differ slightly from
/// the requested ones when `(α − 1) d / 2` is not an integer.
///
/// With random local folding the energy at a scale depends on which gates
/// were folded (a folded CNOT adds far more noise than a folded U3), so
/// each scale is averaged over `realizations` independent fold draws and
/// the spread of the draws becomes that scale's standard error. Global
/// folding and the unfolded point are deterministic and evaluated once.
#[allow(clippy::too_many_arguments)]
pub fn zne_estimate(
    c: &Circuit,
    h: &PauliSum,
    noise: &NoiseModel,
    spec: &ExtrapolationSpec,
    strategy: FoldStrategy,
    shots: Option<usize>,
    seed: u64,
    realizations: usize,
) -> Result<MitigatedEstimate, ZneError> {
    let d = c.gates().len();
    let mut per_scale = Vec::with_capacity(spec.scales.len());
    for (i, &alpha) in spec.scales.iter().enumerate() {
        let pairs = fold_pair_count(d, alpha);
        let draws = match strategy {
            FoldStrategy::RandomLocal { .. } if pairs > 0 => realizations.max(1),
            _ => 1,
        };
        let mut values = Vec::with_capacity(draws);
        let mut shot_err = 0.0;
        for r in 0..draws {
            let tag = (i * draws + r) as u64;
            let strat = match strategy {
                FoldStrategy::RandomLocal { seed: s } => FoldStrategy::RandomLocal {
                    seed: s.wrapping_add(tag),
                },
                g => g,
            };
            let folded = fold_circuit(c, &FoldPlan::new(strat, alpha)?)?;
            let (v, e) = noisy_energy(&folded, h, noise, shots, seed.wrapping_add(tag))?;
            values.push(v);
            shot_err = e;
        }
        let n = draws as f64;
        let mean = values.iter().sum::<f64>() / n;
        let err = if draws > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            shot_err
        };
        per_scale.push((effective_scale(d, pairs), mean, err));
    }
    let fit_spec = ExtrapolationSpec {
        kind: spec.kind,
        scales: per_scale.iter().map(|p| p.0).collect(),
    };
    let (mitigated_value, mitigated_stderr) = extrapolate(&fit_spec, &per_scale)?;
    Ok(MitigatedEstimate {
        per_scale,
        mitigated_value,
        mitigated_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::build_ansatz;
    use crate::model::{build_heisenberg, SpinGraph};
    use rand::Rng;

    fn random_bound(n: usize, depth: usize, seed: u64) -> Circuit {
        let a = build_ansatz(n, depth, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..a.num_free_params()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        a.bind_parameters(&x).unwrap()
    }

    #[test]
    fn richardson_examples() {
        assert_eq!(richardson_coefficients(&[1.0]).unwrap(), vec![1.0]);
        let b = richardson_coefficients(&[1.0, 2.0]).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-14 && (b[1] + 1.0).abs() < 1e-14);
        let s = [1.0, 1.5, 2.0, 2.5];
        let b = richardson_coefficients(&s).unwrap();
        for (x, y) in b.iter().zip([10.0, -20.0, 15.0, -4.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(richardson_residual(&s, &b) < 1e-10);
        assert_eq!(
            richardson_coefficients(&[1.0, 2.0, 2.0]),
            Err(ZneError::DuplicateScale(2.0))
        );
    }

    #[test]
    fn extrapolation_examples() {
        let lin = ExtrapolationSpec::new(ExtrapolationKind::LinearLeastSquares, vec![1.0, 2.0]).unwrap();
        let pts: Vec<_> = [1.0, 2.0].iter().map(|&a| (a, 3.0 - 0.5 * a, 0.0)).collect();
        assert!((extrapolate(&lin, &pts).unwrap().0 - 3.0).abs() < 1e-14);
        let rich = ExtrapolationSpec::new(ExtrapolationKind::Richardson, vec![1.0, 1.5, 2.0, 2.5]).unwrap();
        let cubic = |a: f64| 0.7 - 1.3 * a + 0.4 * a * a - 0.05 * a * a * a;
        let pts: Vec<_> = rich.scales().iter().map(|&a| (a, cubic(a), 0.01)).collect();
        let (v, e) = extrapolate(&rich, &pts).unwrap();
        assert!((v - 0.7).abs() < 1e-10);
        assert!((e - 0.01 * (100.0f64 + 400.0 + 225.0 + 16.0).sqrt()).abs() < 1e-12);
        let flat: Vec<_> = rich.scales().iter().map(|&a| (a, -4.2, 0.0)).collect();
        for spec in [
            &rich,
            &ExtrapolationSpec::new(ExtrapolationKind::LinearLeastSquares, vec![1.0, 1.5, 2.0, 2.5]).unwrap(),
        ] {
            let (v, e) = extrapolate(spec, &flat).unwrap();
            assert!((v + 4.2).abs() < 1e-12);
            assert_eq!(e, 0.0);
        }
        assert!(matches!(extrapolate(&lin, &flat), Err(ZneError::Mismatch { .. })));
        assert!(ExtrapolationSpec::new(ExtrapolationKind::Richardson, vec![1.5, 2.0]).is_err());
        assert!(ExtrapolationSpec::new(ExtrapolationKind::Richardson, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn weighted_fit_matches_textbook_intercept_error() {
        let xs = [1.0, 1.5, 2.0, 2.5];
        let sig = [0.1, 0.2, 0.1, 0.3];
        let spec = ExtrapolationSpec::new(ExtrapolationKind::LinearLeastSquares, xs.to_vec()).unwrap();
        let pts: Vec<_> = (0..4)
            .map(|i| (xs[i], 1.0 + 0.1 * i as f64 * i as f64, sig[i]))
            .collect();
        let (_, e) = extrapolate(&spec, &pts).unwrap();
        let w: Vec<f64> = sig.iter().map(|s| 1.0 / (s * s)).collect();
        let sw: f64 = w.iter().sum();
        let swx: f64 = w.iter().zip(&xs).map(|(w, x)| w * x).sum();
        let swxx: f64 = w.iter().zip(&xs).map(|(w, x)| w * x * x).sum();
        let textbook = (swxx / (sw * swxx - swx * swx)).sqrt();
        assert!((e - textbook).abs() < 1e-12);
    }

    #[test]
    fn folding_counts_and_neutrality() {
        let c = random_bound(4, 1, 3);
        let d = c.gates().len();
        let psi = c.statevector();
        assert_eq!(
            fold_circuit(&c, &FoldPlan::new(FoldStrategy::Global, 1.0).unwrap())
                .unwrap()
                .gates()
                .len(),
            d
        );
        let three = fold_circuit(&c, &FoldPlan::new(FoldStrategy::Global, 3.0).unwrap()).unwrap();
        assert_eq!(three.gates().len(), 3 * d);
        for alpha in [1.5, 2.0, 2.5, 3.7] {
            for strat in [FoldStrategy::Global, FoldStrategy::RandomLocal { seed: 5 }] {
                let f = fold_circuit(&c, &FoldPlan::new(strat, alpha).unwrap()).unwrap();
                assert_eq!(f.gates().len(), d + 2 * fold_pair_count(d, alpha));
                let ov = crate::linalg::inner(&psi, &f.statevector()).norm();
                assert!((ov - 1.0).abs() < 1e-12);
            }
        }
        assert!(FoldPlan::new(FoldStrategy::Global, 0.9).is_err());
        assert_eq!(
            fold_circuit(&Circuit::new(2), &FoldPlan::new(FoldStrategy::Global, 2.0).unwrap()),
            Err(ZneError::EmptyCircuit)
        );
    }

    #[test]
    fn pair_count_on_kagome_sized_circuit() {
        assert_eq!(fold_pair_count(168, 1.5), 42);
        assert_eq!(effective_scale(168, 42), 1.5);
    }

    #[test]
    fn noiseless_zne_is_identity() {
        let h = build_heisenberg(&SpinGraph::open_chain(4).unwrap(), 1.0).unwrap();
        let c = random_bound(4, 1, 8);
        let spec = ExtrapolationSpec::new(ExtrapolationKind::LinearLeastSquares, vec![1.0, 1.5, 2.0, 2.5]).unwrap();
        let m = zne_estimate(
            &c,
            &h,
            &NoiseModel::noiseless(),
            &spec,
            FoldStrategy::RandomLocal { seed: 1 },
            None,
            0,
            4,
        )
        .unwrap();
        for p in &m.per_scale {
            assert!((p.1 - m.unmitigated()).abs() < 1e-10);
        }
        assert!((m.mitigated_value - m.unmitigated()).abs() < 1e-10);
        assert_eq!(m.to_csv().lines().count(), 6);
    }

    #[test]
    fn noisy_energies_shrink_with_scale() {
        let h = build_heisenberg(&SpinGraph::open_chain(4).unwrap(), 1.0).unwrap();
        let c = random_bound(4, 1, 2);
        let spec = ExtrapolationSpec::new(ExtrapolationKind::LinearLeastSquares, vec![1.0, 1.5, 2.0, 2.5]).unwrap();
        let noise = NoiseModel::new(0.01, 0.02).unwrap();
        let m = zne_estimate(&c, &h, &noise, &spec, FoldStrategy::Global, None, 0, 1).unwrap();
        let ideal = simulator::run_statevector(&c).unwrap().expectation(&h).unwrap();
        for w in m.per_scale.windows(2) {
            assert!(w[1].1.abs() < w[0].1.abs());
        }
        assert!((m.mitigated_value - ideal).abs() < (m.unmitigated() - ideal).abs());
    }
}
