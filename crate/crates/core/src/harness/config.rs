use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Allocation, MuSpec};
use crate::designer::AbsorbingUncertainty;
use crate::generators::{gridworld, random_mdp, random_reward, GridworldSpec, RandomMdpSpec};
use crate::mdp::{RewardTable, TabularMdp};
use crate::pipeline::RunConfig;
use crate::sparsify::PhiRule;
use crate::{Error, Result};

/// Where the true MDP comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum InstanceSpec {
    Random(RandomMdpSpec),
    Gridworld(GridworldSpec),
    /// An MDP JSON file, resolved relative to the working directory.
    File { path: String },
}

impl InstanceSpec {
    pub fn build(&self) -> Result<TabularMdp<f64>> {
        let mdp = match self {
            InstanceSpec::Random(spec) => random_mdp(spec),
            InstanceSpec::Gridworld(spec) => gridworld(spec),
            InstanceSpec::File { path } => TabularMdp::from_json(&read(path)?)?,
        };
        let report = mdp.validate();
        if !report.is_ok() {
            return Err(Error::InvalidMdp(format!("{:?}", report.violations)));
        }
        Ok(mdp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpec {
    Random { name: String, seed: u64 },
    Table { name: String, r: Vec<Vec<f64>> },
    File { name: String, path: String },
}

impl RewardSpec {
    pub fn name(&self) -> &str {
        match self {
            RewardSpec::Random { name, .. } | RewardSpec::Table { name, .. } | RewardSpec::File { name, .. } => name,
        }
    }

    pub fn build(&self, num_states: usize, num_actions: usize) -> Result<RewardTable<f64>> {
        let r = match self {
            RewardSpec::Random { seed, .. } => random_reward(num_states, num_actions, *seed),
            RewardSpec::Table { r, .. } => RewardTable::from_rows(r.clone())?,
            RewardSpec::File { path, .. } => RewardTable::from_json(&read(path)?)?,
        };
        if r.num_states() != num_states || r.num_actions() != num_actions {
            return Err(Error::dims(format!("reward '{}' does not match the instance", self.name())));
        }
        Ok(r)
    }
}

/// `size` random rewards seeded from `seed`; sweeps report the largest gap over the family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardFamily {
    pub size: usize,
    pub seed: u64,
}

impl RewardFamily {
    pub const NAME: &'static str = "family-max";

    pub fn build(&self, num_states: usize, num_actions: usize) -> Vec<RewardTable<f64>> {
        (0..self.size as u64).map(|i| random_reward(num_states, num_actions, self.seed.wrapping_add(i))).collect()
    }
}

fn default_delta() -> f64 {
    0.1
}

fn default_replicates() -> usize {
    1
}

/// A Cartesian sweep over offline sizes, design budgets and replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub instance: InstanceSpec,
    #[serde(default = "uniform_mu")]
    pub mu: MuSpec,
    #[serde(default)]
    pub allocation: Allocation,
    pub n_offline: Vec<usize>,
    pub k: Vec<usize>,
    #[serde(default)]
    pub phi: PhiRule,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub absorbing: AbsorbingUncertainty,
    #[serde(default)]
    pub rewards: Vec<RewardSpec>,
    #[serde(default)]
    pub reward_family: Option<RewardFamily>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Also write a full run directory per cell.
    #[serde(default)]
    pub persist_runs: bool,
}

fn uniform_mu() -> MuSpec {
    MuSpec::Uniform
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_offline.is_empty() || self.k.is_empty() {
            return Err(Error::Config("offline-size and K grids must be nonempty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.rewards.is_empty() && self.reward_family.is_none() {
            return Err(Error::Config("at least one reward or a reward family is required".into()));
        }
        if let Some(k) = self.k.iter().find(|&&k| k == 0) {
            return Err(Error::Config(format!("K must be at least 1, got {k}")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::DeltaOutOfRange(self.delta));
        }
        let mut names: Vec<&str> = self.rewards.iter().map(RewardSpec::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.contains(&RewardFamily::NAME) {
            return Err(Error::Config("reward names must be distinct and not reserved".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.n_offline.len() * self.k.len() * self.replicates
    }

    /// Cells are ordered offline size first, then K, then replicate.
    pub fn cell(&self, index: usize) -> Cell {
        let per_n = self.k.len() * self.replicates;
        Cell {
            index,
            n_offline: self.n_offline[index / per_n],
            k: self.k[(index % per_n) / self.replicates],
            replicate: index % self.replicates,
        }
    }

    pub fn run_config(&self, cell: &Cell, seed: u64) -> RunConfig {
        RunConfig {
            delta: self.delta,
            phi: self.phi,
            absorbing: self.absorbing,
            allocation: self.allocation,
            replicate: cell.replicate as u64,
            ..RunConfig::new(cell.k, seed)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub index: usize,
    pub n_offline: usize,
    pub k: usize,
    pub replicate: usize,
}

/// A single persisted end-to-end run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub instance: InstanceSpec,
    #[serde(default = "uniform_mu")]
    pub mu: MuSpec,
    pub n_offline: usize,
    pub run: RunConfig,
    #[serde(default)]
    pub rewards: Vec<RewardSpec>,
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.run.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn read(path: &str) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{path}: {e}"))))
}
