//! Variational energy minimization over the free parameters of a circuit.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compiler::{Angle, Circuit, CompileError, Gate};
use crate::model::PauliSum;
use crate::simulator::{self, NoiseModel, QuantumState, SimError};
use crate::zne::{self, ExtrapolationSpec, FoldStrategy, ZneError};

#[derive(Debug, Error)]
pub enum VqeError {
    #[error("objective returned {value} at step {step} (parameter hash {hash})")]
    NonFinite { value: f64, step: usize, hash: String },
    #[error("shots must be positive")]
    ZeroShots,
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Zne(#[from] ZneError),
}

/// Mitigation applied inside the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ZneSettings {
    pub spec: ExtrapolationSpec,
    pub strategy: FoldStrategy,
    pub realizations: usize,
}

#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub hamiltonian: PauliSum,
    pub noise: NoiseModel,
    /// `None` means exact expectation values.
    pub shots: Option<usize>,
    pub mitigation: Option<ZneSettings>,
    pub seed: u64,
}

impl ObjectiveConfig {
    pub fn exact(hamiltonian: PauliSum) -> Self {
        ObjectiveConfig {
            hamiltonian,
            noise: NoiseModel::noiseless(),
            shots: None,
            mitigation: None,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), VqeError> {
        if self.shots == Some(0) {
            return Err(VqeError::ZeroShots);
        }
        Ok(())
    }

    fn is_exact_noiseless(&self) -> bool {
        self.noise.is_noiseless() && self.shots.is_none() && self.mitigation.is_none()
    }
}

fn evaluate(c: &Circuit, cfg: &ObjectiveConfig, seed: u64) -> Result<(f64, f64), VqeError> {
    if let Some(m) = &cfg.mitigation {
        let est = zne::zne_estimate(
            c,
            &cfg.hamiltonian,
            &cfg.noise,
            &m.spec,
            m.strategy,
            cfg.shots,
            seed,
            m.realizations,
        )?;
        return Ok((est.mitigated_value, est.mitigated_stderr));
    }
    if cfg.noise.is_noiseless() {
        let psi = simulator::run_statevector(c)?;
        return Ok(match cfg.shots {
            None => (psi.expectation(&cfg.hamiltonian)?, 0.0),
            Some(s) => simulator::sample_expectation(&psi, &cfg.hamiltonian, s, seed)?,
        });
    }
    Ok(zne::noisy_energy(c, &cfg.hamiltonian, &cfg.noise, cfg.shots, seed)?)
}

/// Energy and standard error at `params`.
pub fn energy_objective(params: &[f64], ansatz: &Circuit, cfg: &ObjectiveConfig) -> Result<(f64, f64), VqeError> {
    cfg.validate()?;
    evaluate(&ansatz.bind_parameters(params)?, cfg, cfg.seed)
}

/// Gradient by the ±π/2 shift rule applied to every occurrence of every
/// free angle.
///
/// Each U3 angle enters as a single-qubit rotation `exp(−i a P / 2)` up to
/// a global phase, so the rule is exact, with or without noise.
pub fn parameter_shift_gradient(params: &[f64], ansatz: &Circuit, cfg: &ObjectiveConfig) -> Result<Vec<f64>, VqeError> {
    cfg.validate()?;
    let bound = ansatz.bind_parameters(params)?;
    let free = bound.free_indices();
    let mut slot_to_free = vec![None; bound.params().len()];
    for (j, &k) in free.iter().enumerate() {
        slot_to_free[k] = Some(j);
    }
    let mut grad = vec![0.0; free.len()];
    let shift = std::f64::consts::FRAC_PI_2;
    for (gi, g) in bound.gates().iter().enumerate() {
        let Gate::U3 { qubit, angles } = g else { continue };
        for (ai, a) in angles.iter().enumerate() {
            let Angle::Slot(slot) = a else { continue };
            let Some(j) = slot_to_free[*slot] else { continue };
            let mut pm = [0.0; 2];
            for (s, sign) in [1.0, -1.0].iter().enumerate() {
                let mut gates = bound.gates().to_vec();
                let mut new_angles = *angles;
                new_angles[ai] = Angle::Fixed(bound.angle(*a) + sign * shift);
                gates[gi] = Gate::U3 {
                    qubit: *qubit,
                    angles: new_angles,
                };
                let shifted = Circuit::from_parts(bound.num_qubits(), gates, bound.params().to_vec())?;
                pm[s] = evaluate(&shifted, cfg, cfg.seed)?.0;
            }
            grad[j] += (pm[0] - pm[1]) / 2.0;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { lr: f64 },
    Spsa { a: f64, c: f64 },
    NelderMead,
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam { lr: 0.01 }
    }

    pub fn spsa_default() -> Self {
        Optimizer::Spsa { a: 0.05, c: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub optimizer: Optimizer,
    pub max_iters: usize,
    /// Stop when the step energies of the last 10 steps span less than this.
    pub ftol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub params_hash: String,
    pub energy: f64,
    pub stderr: f64,
    pub elapsed_s: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// One entry per objective evaluation.
    pub iterations: Vec<TraceStep>,
    pub seed: u64,
    pub converged: bool,
    pub best_energy: f64,
    pub best_stderr: f64,
}

impl RunTrace {
    /// `step,energy,stderr`. Deterministic for a fixed seed; wall-clock
    /// times live in [`RunTrace::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,energy,stderr\n");
        for t in &self.iterations {
            s.push_str(&format!("{},{},{}\n", t.step, t.energy, t.stderr));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,elapsed\n");
        for t in &self.iterations {
            s.push_str(&format!("{},{:.6}\n", t.step, t.elapsed_s));
        }
        s
    }

    /// `step,p0,p1,...` with every evaluated parameter vector.
    pub fn params_csv(&self) -> String {
        let width = self.iterations.first().map_or(0, |t| t.params.len());
        let mut s = String::from("step");
        for k in 0..width {
            s.push_str(&format!(",p{k}"));
        }
        s.push('\n');
        for t in &self.iterations {
            s.push_str(&t.step.to_string());
            for p in &t.params {
                s.push_str(&format!(",{p}"));
            }
            s.push('\n');
        }
        s
    }

    /// Best energy seen up to each evaluation.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.iterations
            .iter()
            .map(|t| {
                best = best.min(t.energy);
                best
            })
            .collect()
    }
}

pub fn params_hash(p: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in p {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Records evaluations and tracks the best point.
struct Recorder<'a> {
    ansatz: &'a Circuit,
    cfg: &'a ObjectiveConfig,
    trace: Vec<TraceStep>,
    best: (f64, f64, Vec<f64>),
    start: Instant,
    eval_seed: u64,
}

impl<'a> Recorder<'a> {
    fn eval(&mut self, x: &[f64]) -> Result<f64, VqeError> {
        let step = self.trace.len();
        let seed = self.eval_seed.wrapping_add(step as u64);
        let (e, se) = evaluate(&self.ansatz.bind_parameters(x)?, self.cfg, seed)?;
        self.push(x, e, se)?;
        Ok(e)
    }

    fn push(&mut self, x: &[f64], e: f64, se: f64) -> Result<(), VqeError> {
        let step = self.trace.len();
        if !e.is_finite() {
            return Err(VqeError::NonFinite {
                value: e,
                step,
                hash: params_hash(x),
            });
        }
        self.trace.push(TraceStep {
            step,
            params_hash: params_hash(x),
            energy: e,
            stderr: se,
            elapsed_s: self.start.elapsed().as_secs_f64(),
            params: x.to_vec(),
        });
        if e < self.best.0 {
            self.best = (e, se, x.to_vec());
        }
        Ok(())
    }
}

fn window_converged(history: &[f64], ftol: f64) -> bool {
    if history.len() < 10 {
        return false;
    }
    let w = &history[history.len() - 10..];
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &e| (l.min(e), h.max(e)));
    hi - lo < ftol
}

/// Minimizes the objective from `initial` and returns the best point seen
/// with its trace.
///
/// Adam uses adjoint gradients in the noiseless exact setting (equal to the
/// shift-rule values) and parameter-shift gradients otherwise. Frozen
/// parameters never enter the search vector.
pub fn optimize(
    initial: &[f64],
    ansatz: &Circuit,
    cfg: &ObjectiveConfig,
    opts: &OptimizeOptions,
) -> Result<(Vec<f64>, RunTrace), VqeError> {
    cfg.validate()?;
    let mut rec = Recorder {
        ansatz,
        cfg,
        trace: Vec::new(),
        best: (f64::INFINITY, 0.0, initial.to_vec()),
        start: Instant::now(),
        eval_seed: opts.seed ^ cfg.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut step_energies: Vec<f64> = Vec::new();
    let mut converged = false;
    match opts.optimizer {
        Optimizer::Adam { lr } => {
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let mut x = initial.to_vec();
            let mut m = vec![0.0; x.len()];
            let mut v = vec![0.0; x.len()];
            for it in 0..opts.max_iters {
                let (e, g) = if cfg.is_exact_noiseless() {
                    let (e, g) = simulator::adjoint_gradient(&ansatz.bind_parameters(&x)?, &cfg.hamiltonian)?;
                    rec.push(&x, e, 0.0)?;
                    (e, g)
                } else {
                    let e = rec.eval(&x)?;
                    (e, parameter_shift_gradient(&x, ansatz, cfg)?)
                };
                step_energies.push(e);
                if window_converged(&step_energies, opts.ftol) {
                    converged = true;
                    break;
                }
                let t = (it + 1) as i32;
                for k in 0..x.len() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    let mh = m[k] / (1.0 - b1.powi(t));
                    let vh = v[k] / (1.0 - b2.powi(t));
                    x[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Optimizer::Spsa { a, c } => {
            let big_a = 0.1 * opts.max_iters as f64;
            let mut x = initial.to_vec();
            rec.eval(&x)?;
            for it in 0..opts.max_iters {
                let k = it as f64 + 1.0;
                let ak = a * (1.0 + big_a).powf(0.602) / (k + big_a).powf(0.602);
                let ck = c / k.powf(0.101);
                let delta: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                    .collect();
                let xp: Vec<f64> = x.iter().zip(&delta).map(|(x, d)| x + ck * d).collect();
                let xm: Vec<f64> = x.iter().zip(&delta).map(|(x, d)| x - ck * d).collect();
                let ep = rec.eval(&xp)?;
                let em = rec.eval(&xm)?;
                step_energies.push(0.5 * (ep + em));
                if window_converged(&step_energies, opts.ftol) {
                    converged = true;
                    break;
                }
                let gscale = (ep - em) / (2.0 * ck);
                for (xi, d) in x.iter_mut().zip(&delta) {
                    *xi -= ak * gscale * d;
                }
            }
            rec.eval(&x)?;
        }
        Optimizer::NelderMead => {
            converged = nelder_mead(&mut rec, initial, opts, &mut step_energies)?;
        }
    }
    let (best_energy, best_stderr, best) = rec.best;
    Ok((
        best,
        RunTrace {
            iterations: rec.trace,
            seed: opts.seed,
            converged,
            best_energy,
            best_stderr,
        },
    ))
}

fn nelder_mead(
    rec: &mut Recorder,
    initial: &[f64],
    opts: &OptimizeOptions,
    step_energies: &mut Vec<f64>,
) -> Result<bool, VqeError> {
    let n = initial.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let e0 = rec.eval(initial)?;
    simplex.push((initial.to_vec(), e0));
    for k in 0..n {
        let mut x = initial.to_vec();
        x[k] += 0.1;
        let e = rec.eval(&x)?;
        simplex.push((x, e));
    }
    for _ in 0..opts.max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        step_energies.push(simplex[0].1);
        if window_converged(step_energies, opts.ftol) {
            return Ok(true);
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|p| p.0[k]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let toward = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = toward(-1.0);
        let er = rec.eval(&xr)?;
        if er < simplex[0].1 {
            let xe = toward(-2.0);
            let ee = rec.eval(&xe)?;
            simplex[n] = if ee < er { (xe, ee) } else { (xr, er) };
        } else if er < simplex[n - 1].1 {
            simplex[n] = (xr, er);
        } else {
            let (xc, ec) = if er < worst.1 {
                let x = toward(-0.5);
                let e = rec.eval(&x)?;
                (x, e)
            } else {
                let x = toward(0.5);
                let e = rec.eval(&x)?;
                (x, e)
            };
            if ec < worst.1.min(er) {
                simplex[n] = (xc, ec);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&p.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let e = rec.eval(&x)?;
                    *p = (x, e);
                }
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::build_ansatz;
    use crate::model::{build_heisenberg, PauliString, SpinGraph};

    fn edge() -> PauliSum {
        build_heisenberg(&SpinGraph::new(2, &[(0, 1)]).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn shift_rule_on_single_angle() {
        let z = PauliSum::new(1, vec![PauliString::from_word("Z", 1.0).unwrap()]).unwrap();
        let mut c = Circuit::new(1);
        let t = c.add_param("t", 0.0, false);
        c.push(Gate::U3 {
            qubit: 0,
            angles: [Angle::Slot(t), Angle::Fixed(0.0), Angle::Fixed(0.0)],
        })
        .unwrap();
        let cfg = ObjectiveConfig::exact(z);
        assert!(parameter_shift_gradient(&[0.0], &c, &cfg).unwrap()[0].abs() < 1e-15);
        let g = parameter_shift_gradient(&[std::f64::consts::FRAC_PI_2], &c, &cfg).unwrap()[0];
        assert!((g + 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_hamiltonian_gives_zero() {
        let h = build_heisenberg(&SpinGraph::new(2, &[(0, 1)]).unwrap(), 0.0).unwrap();
        let a = build_ansatz(2, 1, None).unwrap();
        let x = vec![0.3; a.num_free_params()];
        assert_eq!(energy_objective(&x, &a, &ObjectiveConfig::exact(h)).unwrap().0, 0.0);
    }

    #[test]
    fn shift_rule_matches_adjoint_under_noise_free_and_noisy() {
        let h = build_heisenberg(&SpinGraph::open_chain(3).unwrap(), 1.0).unwrap();
        let a = build_ansatz(3, 1, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..a.num_free_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cfg = ObjectiveConfig::exact(h.clone());
        let ps = parameter_shift_gradient(&x, &a, &cfg).unwrap();
        let (_, adj) = simulator::adjoint_gradient(&a.bind_parameters(&x).unwrap(), &h).unwrap();
        for (p, q) in ps.iter().zip(&adj) {
            assert!((p - q).abs() < 1e-10);
        }
        let noisy = ObjectiveConfig {
            noise: NoiseModel::new(0.02, 0.03).unwrap(),
            ..cfg
        };
        let ps = parameter_shift_gradient(&x, &a, &noisy).unwrap();
        let eps = 1e-5;
        for k in [0, 7, 20, 31] {
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            let fd = (energy_objective(&xp, &a, &noisy).unwrap().0 - energy_objective(&xm, &a, &noisy).unwrap().0)
                / (2.0 * eps);
            assert!((fd - ps[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn singlet_from_random_start() {
        let a = build_ansatz(2, 1, None).unwrap();
        let cfg = ObjectiveConfig::exact(edge());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..a.num_free_params()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let opts = OptimizeOptions {
            optimizer: Optimizer::Adam { lr: 0.05 },
            max_iters: 3000,
            ftol: 1e-12,
            seed: 1,
        };
        let (best, trace) = optimize(&x0, &a, &cfg, &opts).unwrap();
        assert!((trace.best_energy + 3.0).abs() < 1e-4, "{}", trace.best_energy);
        assert!((energy_objective(&best, &a, &cfg).unwrap().0 - trace.best_energy).abs() < 1e-12);
        let b = trace.best_so_far();
        assert!(b.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace.iterations.windows(2).all(|w| w[1].step > w[0].step));
    }

    #[test]
    fn gradient_free_optimizers_improve() {
        let a = build_ansatz(2, 1, None).unwrap();
        let x0 = vec![0.4; a.num_free_params()];
        let noisy = ObjectiveConfig {
            noise: NoiseModel::new(0.01, 0.01).unwrap(),
            shots: Some(2000),
            ..ObjectiveConfig::exact(edge())
        };
        let e0 = energy_objective(&x0, &a, &ObjectiveConfig::exact(edge())).unwrap().0;
        for (opt, cfg) in [
            (Optimizer::spsa_default(), noisy.clone()),
            (Optimizer::NelderMead, ObjectiveConfig::exact(edge())),
        ] {
            let opts = OptimizeOptions {
                optimizer: opt,
                max_iters: 400,
                ftol: 0.0,
                seed: 3,
            };
            let (best, trace) = optimize(&x0, &a, &cfg, &opts).unwrap();
            let e = energy_objective(&best, &a, &ObjectiveConfig::exact(edge())).unwrap().0;
            assert!(e < e0 - 0.5, "{opt:?}: {e0} -> {e}");
            assert!(trace.to_csv().lines().count() == trace.iterations.len() + 1);
        }
    }

    #[test]
    fn frozen_prefix_is_untouched() {
        let mut prefix = Circuit::new(2);
        let p = prefix.add_param("x", 0.7, false);
        prefix
            .push(Gate::U3 {
                qubit: 0,
                angles: [Angle::Slot(p), Angle::Fixed(0.0), Angle::Fixed(0.0)],
            })
            .unwrap();
        let a = build_ansatz(2, 1, Some(&prefix)).unwrap();
        let x0 = vec![0.1; a.num_free_params()];
        let opts = OptimizeOptions {
            optimizer: Optimizer::adam_default(),
            max_iters: 50,
            ftol: 0.0,
            seed: 0,
        };
        let (best, _) = optimize(&x0, &a, &ObjectiveConfig::exact(edge()), &opts).unwrap();
        let bound = a.bind_parameters(&best).unwrap();
        assert_eq!(bound.params()[0].value.to_bits(), 0.7f64.to_bits());
        assert!(bound.params()[0].frozen);
    }
}
