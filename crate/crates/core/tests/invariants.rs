use mpsvqe::compiler::{
    build_ansatz, kak_decompose, reconstruction_error, staircase_from_mps, Circuit, Gate, TwoQubitBlock,
};
use mpsvqe::linalg::{self, haar_unitary};
use mpsvqe::model::{build_heisenberg, SpinGraph};
use mpsvqe::simulator::{self, DensityMatrix, NoiseModel, QuantumState, StateVector};
use mpsvqe::tensornet::{canonicalize_right, MpsState};
use mpsvqe::zne::{self, fold_circuit, FoldPlan, FoldStrategy};
use mpsvqe::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_density(n: usize, seed: u64) -> DensityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = StateVector::from_amplitudes(linalg::random_unit_vector(1 << n, &mut rng)).unwrap();
    DensityMatrix::from_statevector(&psi)
}

fn random_circuit(n: usize, gates: usize, seed: u64) -> Circuit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Circuit::new(n);
    for _ in 0..gates {
        if n > 1 && rng.gen_bool(0.4) {
            let a = rng.gen_range(0..n);
            let b = (a + rng.gen_range(1..n)) % n;
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

fn chain(n: usize) -> mpsvqe::model::PauliSum {
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    build_heisenberg(&SpinGraph::new(n, &edges).unwrap(), 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn depolarizing_keeps_states_physical(seed in any::<u64>(), p in 0.0f64..=1.0, two in any::<bool>()) {
        let mut rho = random_density(3, seed);
        if two {
            rho.apply_depolarizing_2q(0, 2, p).unwrap();
        } else {
            rho.apply_depolarizing_1q(1, p).unwrap();
        }
        prop_assert!((rho.trace() - C64::from(1.0)).norm() < 1e-12);
        prop_assert!(rho.hermiticity_error() < 1e-12);
        prop_assert!(rho.min_eigenvalue() > -1e-10);
    }

    #[test]
    fn folding_never_changes_the_ideal_energy(seed in any::<u64>(), alpha in 1.0f64..4.0, global in any::<bool>()) {
        let c = random_circuit(4, 20, seed);
        let h = chain(4);
        let strategy = if global { FoldStrategy::Global } else { FoldStrategy::RandomLocal { seed } };
        let folded = fold_circuit(&c, &FoldPlan::new(strategy, alpha).unwrap()).unwrap();
        let pairs = zne::fold_pair_count(c.gates().len(), alpha);
        prop_assert_eq!(folded.gates().len(), c.gates().len() + 2 * pairs);
        let e0 = simulator::run_statevector(&c).unwrap().expectation(&h).unwrap();
        let e1 = simulator::run_statevector(&folded).unwrap().expectation(&h).unwrap();
        prop_assert!((e0 - e1).abs() < 1e-10);
    }

    #[test]
    fn richardson_weights_satisfy_their_conditions(steps in proptest::collection::vec(0.2f64..1.0, 1..5)) {
        let mut scales = vec![1.0];
        for s in steps {
            scales.push(scales.last().unwrap() + s);
        }
        let b = zne::richardson_coefficients(&scales).unwrap();
        prop_assert!(zne::richardson_residual(&scales, &b) < 1e-8);
    }

    #[test]
    fn kak_reconstructs_haar_unitaries(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = haar_unitary(4, &mut rng);
        let m: [C64; 16] = std::array::from_fn(|k| u[(k / 4, k % 4)]);
        let gates = kak_decompose(&TwoQubitBlock::new(m).unwrap()).unwrap();
        let cnots = gates.iter().filter(|g| matches!(g, Gate::Cnot { .. })).count();
        prop_assert!(cnots <= 3);
        let mut c = Circuit::new(2);
        for g in gates {
            c.push(g).unwrap();
        }
        let v = c.unitary();
        let got: [C64; 16] = std::array::from_fn(|k| v[k]);
        prop_assert!(reconstruction_error(&m, &got) < 1e-8);
    }

    #[test]
    fn ansatz_parameter_count(n in 2usize..=16, d in 1usize..=6) {
        prop_assert_eq!(build_ansatz(n, d, None).unwrap().num_free_params(), 15 * (n - 1) * d + 3);
    }

    #[test]
    fn staircase_prepares_bond_two_states(n in 2usize..=7, seed in any::<u64>()) {
        let mps = canonicalize_right(&MpsState::random(n, 2, seed)).unwrap();
        let target = mps.to_dense();
        let c = staircase_from_mps(&mps).unwrap();
        let f = linalg::inner(&target, &c.statevector()).norm_sqr() / linalg::inner(&target, &target).re;
        prop_assert!(f > 1.0 - 1e-10, "fidelity {f}");
    }

    #[test]
    fn pauli_engine_matches_dense_density(seed in any::<u64>(), p1 in 0.0f64..0.05, p2 in 0.0f64..0.1) {
        let c = random_circuit(3, 12, seed);
        let h = chain(3);
        let noise = NoiseModel::new(p1, p2).unwrap();
        let dense = simulator::run_density(&c, &noise).unwrap().expectation(&h).unwrap();
        let pauli = simulator::run_pauli_density(&c, &noise).unwrap().expectation(&h).unwrap();
        prop_assert!((dense - pauli).abs() < 1e-10);
    }
}
