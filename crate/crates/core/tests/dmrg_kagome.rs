use mpsvqe::exactdiag;
use mpsvqe::model::{build_heisenberg, build_kagome_star, Labeling, PauliSum};
use mpsvqe::tensornet::{
    dmrg_ground, mpo_from_pauli_sum, mps_expectation, mps_pauli_sum_expectation, read_mps, write_mps, DmrgOptions,
    DmrgResult,
};

fn kagome(labeling: Labeling) -> PauliSum {
    build_heisenberg(&build_kagome_star(&labeling).unwrap(), 1.0).unwrap()
}

fn run(h: &PauliSum, chi: usize, seed: u64) -> DmrgResult {
    let mpo = mpo_from_pauli_sum(h, 1e-12).unwrap();
    dmrg_ground(&mpo, &DmrgOptions::new(chi, 20, 1e-10, seed)).unwrap()
}

fn assert_monotone(r: &DmrgResult) {
    for w in r.sweep_energies.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "sweep energies rose: {:?}", r.sweep_energies);
    }
}

#[test]
fn zigzag_reaches_exact_energy_at_chi_64() {
    let h = kagome(Labeling::zigzag());
    let r = run(&h, 64, 7);
    assert!((r.energy + 18.0).abs() < 1e-6, "E = {}", r.energy);
    assert!(r.mps.max_bond() <= 64);
    assert!(r.mps.right_canonical_residual() < 1e-10);
    assert_monotone(&r);
    let mpo = mpo_from_pauli_sum(&h, 1e-12).unwrap();
    assert!((mps_expectation(&r.mps, &mpo).unwrap() - r.energy).abs() < 1e-10);
}

#[test]
fn labeling_changes_chi_2_quality() {
    let (e0, _) = exactdiag::ground_state(&kagome(Labeling::zigzag())).unwrap();
    let zig = run(&kagome(Labeling::zigzag()), 2, 1);
    let spi = run(&kagome(Labeling::spiral()), 2, 1);
    assert_monotone(&zig);
    assert_monotone(&spi);
    // zigzag pairs every hexagon site with its own tip, so a product of
    // neighbouring singlets is an exact bond-2 ground state
    assert!(zig.energy >= e0 - 1e-9);
    assert!((zig.energy + 18.0).abs() < 1e-8, "zigzag E = {}", zig.energy);
    assert!(spi.energy > -18.0 + 1.0, "spiral E = {}", spi.energy);
    assert!(spi.energy > zig.energy);
    assert!(spi.mps.max_bond() <= 2 && zig.mps.max_bond() <= 2);
}

#[test]
fn energies_agree_between_contractions() {
    let h = kagome(Labeling::spiral());
    let r = run(&h, 4, 3);
    let via_terms = mps_pauli_sum_expectation(&r.mps, &h).unwrap();
    assert!((via_terms - r.energy).abs() < 1e-10);
}

#[test]
fn file_roundtrip_of_dmrg_state() {
    let r = run(&kagome(Labeling::zigzag()), 2, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.mps");
    write_mps(std::fs::File::create(&path).unwrap(), &r.mps).unwrap();
    let back = read_mps(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, r.mps);
}
