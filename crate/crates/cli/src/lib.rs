//! Experiment orchestration for the `mpsvqe` command-line tool.
//!
//! Every subcommand writes into its own run directory named after a hash of
//! the command, the effective configuration and the input files, so two
//! different experiments can never overwrite each other. Each directory
//! holds `config.toml` (enough to reproduce the run), the artifacts and a
//! `manifest.toml` listing artifact hashes and result summaries.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use mpsvqe::compiler::{build_ansatz, init_params_from_mps, staircase_from_mps, Circuit, CompileError};
use mpsvqe::exactdiag;
use mpsvqe::linalg;
use mpsvqe::model::PauliSum;
use mpsvqe::simulator::{self, NoiseModel, QuantumState};
use mpsvqe::tensornet::{self, DmrgOptions, DmrgResult, MpsState};
use mpsvqe::vqe::{self, ObjectiveConfig, OptimizeOptions};
use mpsvqe::zne;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ed,
    Dmrg,
    Compile,
    Vqe,
    Zne,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ed => "ed",
            Command::Dmrg => "dmrg",
            Command::Compile => "compile",
            Command::Vqe => "vqe",
            Command::Zne => "zne",
        }
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    /// MPS file for `compile`, circuit file for `zne`.
    pub input: Option<PathBuf>,
    /// A `vqe` run directory whose trace `zne` should mitigate step by step.
    pub replay: Option<PathBuf>,
    pub force: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.preset {
            cfg.noise = config::NoiseSection {
                preset: Some(p.clone()),
                ..Default::default()
            };
        }
        cfg.validate()
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    started_unix: u64,
    finished_unix: u64,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    results: toml::Table,
    config: ExperimentConfig,
}

/// A run directory being populated.
pub struct RunDir {
    path: PathBuf,
    command: Command,
    config: ExperimentConfig,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    results: toml::Table,
    started: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunDir {
    fn create(command: Command, config: &ExperimentConfig, inputs: &[&Path], force: bool) -> Result<Self> {
        let mut hasher = Sha256::new();
        hasher.update(command.name());
        hasher.update(config.to_toml());
        let mut input_hashes = BTreeMap::new();
        for p in inputs {
            let file = if p.is_dir() {
                p.join("params.csv")
            } else {
                p.to_path_buf()
            };
            let bytes = fs::read(&file).with_context(|| format!("reading input {}", file.display()))?;
            let h = sha256_hex(&bytes);
            hasher.update(&h);
            input_hashes.insert(p.display().to_string(), h);
        }
        let id = hex::encode(&hasher.finalize()[..6]);
        let path = config.output.join(format!("{}-{id}", command.name()));
        if path.exists() && !force {
            bail!(
                "run directory {} already exists for this exact configuration; pass --force to overwrite it",
                path.display()
            );
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut run = RunDir {
            path,
            command,
            config: config.clone(),
            inputs: input_hashes,
            artifacts: BTreeMap::new(),
            results: toml::Table::new(),
            started: unix_now(),
        };
        run.write("config.toml", config.to_toml().as_bytes())?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn result(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.results.insert(key.to_string(), value.into());
    }

    fn finish(self) -> Result<RunOutcome> {
        let manifest = Manifest {
            command: self.command.name().into(),
            started_unix: self.started,
            finished_unix: unix_now(),
            inputs: self.inputs,
            artifacts: self.artifacts,
            results: self.results.clone(),
            config: self.config,
        };
        let text = toml::to_string(&manifest).context("serializing manifest")?;
        fs::write(self.path.join("manifest.toml"), text)?;
        Ok(RunOutcome {
            dir: self.path,
            results: self.results,
        })
    }
}

/// Where a run wrote its files and its headline numbers.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub results: toml::Table,
}

impl RunOutcome {
    pub fn float(&self, key: &str) -> Option<f64> {
        self.results.get(key).and_then(|v| v.as_float())
    }
}

pub fn run(command: Command, cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg)?;
    match command {
        Command::Ed => cmd_ed(&cfg, ov),
        Command::Dmrg => cmd_dmrg(&cfg, ov),
        Command::Compile => cmd_compile(&cfg, ov),
        Command::Vqe => cmd_vqe(&cfg, ov),
        Command::Zne => cmd_zne(&cfg, ov),
    }
}

fn cmd_ed(cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    let h = cfg.hamiltonian()?;
    let (energy, _) = exactdiag::ground_state(&h).context("exact diagonalization failed")?;
    let mut run = RunDir::create(Command::Ed, cfg, &[], ov.force)?;
    let record = format!("num_qubits = {}\nenergy = {energy:?}\n", h.num_qubits());
    run.write("energy.toml", record.as_bytes())?;
    run.result("energy", energy);
    run.finish()
}

fn dmrg(cfg: &ExperimentConfig, h: &PauliSum) -> Result<DmrgResult> {
    let mpo = tensornet::mpo_from_pauli_sum(h, 1e-12)?;
    let opts = DmrgOptions::new(cfg.dmrg.chi_max, cfg.dmrg.sweeps, cfg.dmrg.tol, cfg.dmrg_seed());
    Ok(tensornet::dmrg_ground(&mpo, &opts)?)
}

fn mps_bytes(mps: &MpsState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    tensornet::write_mps(&mut buf, mps)?;
    Ok(buf)
}

fn sweeps_csv(r: &DmrgResult) -> String {
    let mut s = String::from("sweep,energy\n");
    for (i, e) in r.sweep_energies.iter().enumerate() {
        s.push_str(&format!("{},{e}\n", i + 1));
    }
    s
}

fn cmd_dmrg(cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    let h = cfg.hamiltonian()?;
    let r = dmrg(cfg, &h)?;
    let mut run = RunDir::create(Command::Dmrg, cfg, &[], ov.force)?;
    run.write("state.mps", &mps_bytes(&r.mps)?)?;
    run.write("sweeps.csv", sweeps_csv(&r).as_bytes())?;
    run.result("energy", r.energy);
    run.result("converged", r.converged);
    run.result("max_bond", r.mps.max_bond() as i64);
    run.result("max_discarded", r.max_discarded);
    run.finish()
}

fn staircase(mps: &MpsState) -> Result<Circuit> {
    staircase_from_mps(mps).map_err(|e| match e {
        CompileError::BondTooLarge(chi) => anyhow::anyhow!(
            "MPS bond dimension {chi} exceeds 2, so it has no exact two-qubit staircase; \
             use the layered-ansatz workflow instead (`mpsvqe vqe` with ansatz.depth > 1)"
        ),
        other => other.into(),
    })
}

fn cmd_compile(cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    let input = ov
        .input
        .as_deref()
        .context("compile needs --input pointing at an MPS file (for example state.mps from `mpsvqe dmrg`)")?;
    let raw = tensornet::read_mps(fs::File::open(input).with_context(|| format!("opening {}", input.display()))?)?;
    // the staircase needs a normalized right-canonical state
    let mps = tensornet::canonicalize_right(&raw)?;
    let circuit = staircase(&mps)?;
    let text = circuit.to_text();
    let roundtrip = Circuit::from_text(&text)? == circuit;
    let psi = circuit.statevector();
    let target = mps.to_dense();
    let fidelity = linalg::inner(&target, &psi).norm_sqr() / linalg::inner(&target, &target).re;
    let mut run = RunDir::create(Command::Compile, cfg, &[input], ov.force)?;
    run.write("circuit.txt", text.as_bytes())?;
    let mut report = format!(
        "fidelity = {fidelity:?}\ngates = {}\ncnots = {}\ncircuit_hash = \"{}\"\nroundtrip = {roundtrip}\n",
        circuit.gates().len(),
        circuit.cnot_count(),
        circuit.content_hash()
    );
    run.result("fidelity", fidelity);
    run.result("roundtrip", roundtrip);
    let h = cfg.hamiltonian()?;
    if h.num_qubits() == mps.len() {
        let e_circ = simulator::run_statevector(&circuit)?.expectation(&h)?;
        let e_mps = tensornet::mps_pauli_sum_expectation(&mps, &h)?;
        report.push_str(&format!("circuit_energy = {e_circ:?}\nmps_energy = {e_mps:?}\n"));
        run.result("circuit_energy", e_circ);
        run.result("mps_energy", e_mps);
    }
    run.write("fidelity.toml", report.as_bytes())?;
    run.finish()
}

fn objective(cfg: &ExperimentConfig, h: PauliSum) -> Result<ObjectiveConfig> {
    Ok(ObjectiveConfig {
        hamiltonian: h,
        noise: cfg.noise_model()?,
        shots: cfg.vqe.shots,
        mitigation: None,
        seed: cfg.seed,
    })
}

fn cmd_vqe(cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    if cfg.dmrg.chi_max > 2 {
        bail!("vqe initializes from a χ ≤ 2 MPS; set dmrg.chi_max to 1 or 2");
    }
    let h = cfg.hamiltonian()?;
    let d = dmrg(cfg, &h)?;
    let n = h.num_qubits();
    let prefix = if cfg.ansatz.use_frozen_prefix {
        Some(staircase(&d.mps)?)
    } else {
        None
    };
    let obj = objective(cfg, h)?;
    let opts = OptimizeOptions {
        optimizer: cfg.optimizer(),
        max_iters: cfg.vqe.iters,
        ftol: cfg.vqe.ftol,
        seed: cfg.seed,
    };
    let mut run = RunDir::create(Command::Vqe, cfg, &[], ov.force)?;
    run.write("state.mps", &mps_bytes(&d.mps)?)?;
    run.result("dmrg_energy", d.energy);
    run.result("noise", cfg.noise_label());

    if let Some(max_depth) = cfg.ansatz.depth_sweep {
        let mut table = String::from("depth,parameters,initial_energy,best_energy,evaluations\n");
        for depth in 1..=max_depth {
            let ansatz = build_ansatz(n, depth, prefix.as_ref())?;
            let x0 = init_params_from_mps(&d.mps, &ansatz)?;
            let (_, trace) = vqe::optimize(&x0, &ansatz, &obj, &opts)?;
            table.push_str(&format!(
                "{depth},{},{},{},{}\n",
                ansatz.num_free_params(),
                trace.iterations[0].energy,
                trace.best_energy,
                trace.iterations.len()
            ));
            run.write(&format!("trace_d{depth}.csv"), trace.to_csv().as_bytes())?;
            run.result(&format!("best_energy_d{depth}"), trace.best_energy);
        }
        run.write("depth_sweep.csv", table.as_bytes())?;
        return run.finish();
    }

    let ansatz = build_ansatz(n, cfg.ansatz.depth, prefix.as_ref())?;
    let x0 = init_params_from_mps(&d.mps, &ansatz)?;
    let (best, trace) = vqe::optimize(&x0, &ansatz, &obj, &opts)?;
    run.write("ansatz.circuit", ansatz.bind_parameters(&x0)?.to_text().as_bytes())?;
    run.write("best.circuit", ansatz.bind_parameters(&best)?.to_text().as_bytes())?;
    run.write("trace.csv", trace.to_csv().as_bytes())?;
    run.write("params.csv", trace.params_csv().as_bytes())?;
    // wall-clock data is kept out of the artifact hashes on purpose
    fs::write(run.path().join("timing.csv"), trace.timing_csv())?;
    run.result("initial_energy", trace.iterations[0].energy);
    run.result("best_energy", trace.best_energy);
    run.result("best_stderr", trace.best_stderr);
    run.result("evaluations", trace.iterations.len() as i64);
    run.result("converged", trace.converged);
    run.result(
        "final_params",
        toml::Value::Array(best.iter().map(|&x| toml::Value::Float(x)).collect()),
    );
    run.finish()
}

fn read_params_csv(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut cells = line.split(',');
            let step = cells.next().context("empty row")?.parse()?;
            let params = cells.map(|c| c.parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
            Ok((step, params))
        })
        .collect()
}

fn load_circuit(path: &Path) -> Result<Circuit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Circuit::from_text(&text)?)
}

fn cmd_zne(cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    let h = cfg.hamiltonian()?;
    let noise: NoiseModel = cfg.noise_model()?;
    let spec = cfg.zne_spec()?;
    let strategy = cfg.fold_strategy();
    if let Some(dir) = &ov.replay {
        let ansatz = load_circuit(&dir.join("ansatz.circuit"))?;
        let rows = read_params_csv(&dir.join("params.csv"))?;
        let mut run = RunDir::create(Command::Zne, cfg, &[dir], ov.force)?;
        let mut summary = String::from("step,unmitigated,mitigated,stderr\n");
        let mut per_scale = String::from("step,alpha,value,stderr\n");
        for (step, x) in &rows {
            let c = ansatz.bind_parameters(x)?;
            let m = zne::zne_estimate(
                &c,
                &h,
                &noise,
                &spec,
                strategy,
                cfg.zne.shots,
                cfg.seed.wrapping_add(*step as u64),
                cfg.zne.realizations,
            )?;
            summary.push_str(&format!(
                "{step},{},{},{}\n",
                m.unmitigated(),
                m.mitigated_value,
                m.mitigated_stderr
            ));
            for (a, v, e) in &m.per_scale {
                per_scale.push_str(&format!("{step},{a},{v},{e}\n"));
            }
        }
        run.write("zne_iterations.csv", summary.as_bytes())?;
        run.write("zne_per_scale.csv", per_scale.as_bytes())?;
        run.result("records", rows.len() as i64);
        return run.finish();
    }
    let input = ov
        .input
        .as_deref()
        .context("zne needs --input pointing at a circuit file, or --replay with a vqe run directory")?;
    let c = load_circuit(input)?;
    if c.num_qubits() != h.num_qubits() {
        bail!(
            "circuit has {} qubits but the model has {}",
            c.num_qubits(),
            h.num_qubits()
        );
    }
    let m = zne::zne_estimate(
        &c,
        &h,
        &noise,
        &spec,
        strategy,
        cfg.zne.shots,
        cfg.seed,
        cfg.zne.realizations,
    )?;
    let mut run = RunDir::create(Command::Zne, cfg, &[input], ov.force)?;
    run.write("zne.csv", m.to_csv().as_bytes())?;
    run.result("unmitigated", m.unmitigated());
    run.result("mitigated", m.mitigated_value);
    run.result("mitigated_stderr", m.mitigated_stderr);
    run.result("noise", cfg.noise_label());
    run.finish()
}
