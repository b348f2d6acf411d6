use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mpsvqe_cli::{run, Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "mpsvqe",
    version,
    about = "MPS-initialized VQE with noise simulation and zero-noise extrapolation"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Noise preset, overriding the configuration.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overwrite an existing run directory with the same configuration.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact ground-state energy.
    Ed,
    /// DMRG ground state; writes the MPS and per-sweep energies.
    Dmrg,
    /// Compile an MPS file into a staircase circuit.
    Compile {
        #[arg(long)]
        input: PathBuf,
    },
    /// Variational optimization initialized from DMRG.
    Vqe,
    /// Zero-noise extrapolation of a circuit or of every step of a VQE trace.
    Zne {
        #[arg(long, conflicts_with = "replay", required_unless_present = "replay")]
        input: Option<PathBuf>,
        /// A vqe run directory to replay.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    A,
    B,
    C,
    None,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::A => "a",
            Preset::B => "b",
            Preset::C => "c",
            Preset::None => "none",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut ov = Overrides {
        out: cli.out,
        seed: cli.seed,
        preset: cli.preset.map(|p| p.name().to_string()),
        force: cli.force,
        ..Default::default()
    };
    let command = match cli.command {
        Cmd::Ed => Command::Ed,
        Cmd::Dmrg => Command::Dmrg,
        Cmd::Compile { input } => {
            ov.input = Some(input);
            Command::Compile
        }
        Cmd::Vqe => Command::Vqe,
        Cmd::Zne { input, replay } => {
            ov.input = input;
            ov.replay = replay;
            Command::Zne
        }
    };
    let Some(config_path) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let outcome = ExperimentConfig::load(&config_path).and_then(|cfg| run(command, &cfg, &ov));
    match outcome {
        Ok(o) => {
            println!("run directory: {}", o.dir.display());
            for (k, v) in &o.results {
                if !v.is_array() {
                    println!("{k} = {v}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
