//! Experiment configuration file.
//!
//! A single TOML document with one table per pipeline stage. Unknown keys
//! anywhere are rejected so that a misspelt option never silently falls
//! back to its default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mpsvqe::model::{build_heisenberg, build_kagome_star, Labeling, PauliSum, SpinGraph};
use mpsvqe::simulator::NoiseModel;
use mpsvqe::vqe::Optimizer;
use mpsvqe::zne::{ExtrapolationKind, ExtrapolationSpec, FoldStrategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub dmrg: DmrgSection,
    #[serde(default)]
    pub ansatz: AnsatzSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub vqe: VqeSection,
    #[serde(default)]
    pub zne: ZneSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lattice {
    KagomeStar,
    OpenChain,
    EdgeList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub lattice: Lattice,
    /// Site count for `open_chain` and `edge_list`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    /// `zigzag`, `spiral` or `identity`. Only the Kagome star supports the
    /// first two; defaults to `zigzag` there and `identity` elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeling: Option<String>,
    #[serde(default = "one")]
    pub coupling: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmrgSection {
    pub chi_max: usize,
    pub sweeps: usize,
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DmrgSection {
    fn default() -> Self {
        DmrgSection {
            chi_max: 2,
            sweeps: 10,
            tol: 1e-10,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzSection {
    pub depth: usize,
    pub use_frozen_prefix: bool,
    /// When set, `vqe` runs every depth from 1 to this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_sweep: Option<usize>,
}

impl Default for AnsatzSection {
    fn default() -> Self {
        AnsatzSection {
            depth: 1,
            use_frozen_prefix: false,
            depth_sweep: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_1q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_2q: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Spsa,
    NelderMead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqeSection {
    pub optimizer: OptimizerKind,
    pub iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    pub lr: f64,
    pub spsa_a: f64,
    pub spsa_c: f64,
    pub ftol: f64,
}

impl Default for VqeSection {
    fn default() -> Self {
        VqeSection {
            optimizer: OptimizerKind::Adam,
            iters: 200,
            shots: None,
            lr: 0.01,
            spsa_a: 0.05,
            spsa_c: 0.05,
            ftol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Global,
    RandomLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    Linear,
    Richardson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZneSection {
    pub scales: Vec<f64>,
    pub strategy: StrategyKind,
    pub extrapolation: Extrapolation,
    /// Fold draws averaged per scale under random local folding.
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
}

fn default_realizations() -> usize {
    16
}

impl Default for ZneSection {
    fn default() -> Self {
        ZneSection {
            scales: vec![1.0, 1.5, 2.0, 2.5],
            strategy: StrategyKind::RandomLocal,
            extrapolation: Extrapolation::Linear,
            realizations: default_realizations(),
            shots: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.noise_model()?;
        self.zne_spec()?;
        self.labeling()?;
        if self.dmrg.chi_max == 0 || self.dmrg.sweeps == 0 {
            bail!("dmrg.chi_max and dmrg.sweeps must be positive");
        }
        if self.ansatz.depth == 0 || self.ansatz.depth_sweep == Some(0) {
            bail!("ansatz depth must be positive");
        }
        if self.zne.realizations == 0 {
            bail!("zne.realizations must be positive");
        }
        if self.vqe.shots == Some(0) || self.zne.shots == Some(0) {
            bail!("shots must be positive when given");
        }
        Ok(())
    }

    /// Preset name, or `custom` for explicit rates.
    pub fn noise_label(&self) -> String {
        self.noise.preset.clone().unwrap_or_else(|| {
            if self.noise.p_1q.is_some() || self.noise.p_2q.is_some() {
                "custom".into()
            } else {
                "none".into()
            }
        })
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        match (&self.noise.preset, self.noise.p_1q, self.noise.p_2q) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                bail!("noise: give either a preset or explicit p_1q/p_2q, not both")
            }
            (Some(name), None, None) => NoiseModel::preset(name)
                .with_context(|| format!("unknown noise preset {name:?} (expected a, b, c or none)")),
            (None, p1, p2) => Ok(NoiseModel::new(p1.unwrap_or(0.0), p2.unwrap_or(0.0))?),
        }
    }

    pub fn zne_spec(&self) -> Result<ExtrapolationSpec> {
        let kind = match self.zne.extrapolation {
            Extrapolation::Linear => ExtrapolationKind::LinearLeastSquares,
            Extrapolation::Richardson => ExtrapolationKind::Richardson,
        };
        Ok(ExtrapolationSpec::new(kind, self.zne.scales.clone())?)
    }

    pub fn fold_strategy(&self) -> FoldStrategy {
        match self.zne.strategy {
            StrategyKind::Global => FoldStrategy::Global,
            StrategyKind::RandomLocal => FoldStrategy::RandomLocal { seed: self.seed },
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.vqe.optimizer {
            OptimizerKind::Adam => Optimizer::Adam { lr: self.vqe.lr },
            OptimizerKind::Spsa => Optimizer::Spsa {
                a: self.vqe.spsa_a,
                c: self.vqe.spsa_c,
            },
            OptimizerKind::NelderMead => Optimizer::NelderMead,
        }
    }

    pub fn dmrg_seed(&self) -> u64 {
        self.dmrg.seed.unwrap_or(self.seed)
    }

    fn labeling(&self) -> Result<Option<Labeling>> {
        let name = self.model.labeling.as_deref();
        match (self.model.lattice, name) {
            (Lattice::KagomeStar, n) => Ok(Some(Labeling::from_name(n.unwrap_or("zigzag"), None)?)),
            (_, None | Some("identity")) => Ok(None),
            (_, Some(other)) => bail!("labeling {other:?} is only defined for the kagome_star lattice"),
        }
    }

    pub fn graph(&self) -> Result<SpinGraph> {
        let m = &self.model;
        Ok(match m.lattice {
            Lattice::KagomeStar => build_kagome_star(&self.labeling()?.expect("kagome has a labeling"))?,
            Lattice::OpenChain => SpinGraph::open_chain(m.sites.context("open_chain needs model.sites")?)?,
            Lattice::EdgeList => {
                let edges: Vec<(usize, usize)> = m
                    .edges
                    .as_ref()
                    .context("edge_list needs model.edges")?
                    .iter()
                    .map(|e| (e[0], e[1]))
                    .collect();
                let n = m
                    .sites
                    .unwrap_or_else(|| edges.iter().map(|e| e.0.max(e.1) + 1).max().unwrap_or(0));
                SpinGraph::new(n, &edges)?
            }
        })
    }

    pub fn hamiltonian(&self) -> Result<PauliSum> {
        Ok(build_heisenberg(&self.graph()?, self.model.coupling)?)
    }
}
