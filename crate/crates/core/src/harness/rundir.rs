use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{CountTable, OfflineDataset};
use crate::designer::trace_to_csv;
use crate::hash::sha256_hex;
use crate::mdp::{policy_to_json, DeterministicPolicy, MixturePolicy};
use crate::pipeline::{evaluate_against, learn, EvalReport, LearnedRun, PlanOutcome, RunArtifacts};
use crate::sparsify::{sparsify_population, SparsifiedModel};
use crate::{Error, Result};

use super::config::RunSpec;

pub const MANIFEST: &str = "manifest.json";

/// Stage digests and run metadata. `created_unix` is the only field that differs between
/// otherwise identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_unix: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_state: usize,
    pub phi: u64,
    pub known_edges: usize,
    pub k_ucb: usize,
    pub online_episodes: usize,
    pub online_transitions: usize,
    /// File name to sha256 of its contents.
    pub stages: BTreeMap<String, String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn put(dir: &Path, stages: &mut BTreeMap<String, String>, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    stages.insert(name.to_string(), sha256_hex(contents.as_bytes()));
    Ok(())
}

/// Writes every learner stage of `learned` into `dir`, creating it if needed.
pub fn write_learned(dir: &Path, config_json: &str, learned: &LearnedRun<f64>) -> Result<RunManifest> {
    fs::create_dir_all(dir)?;
    let mut stages = BTreeMap::new();
    put(dir, &mut stages, "config.json", config_json)?;
    put(dir, &mut stages, "offline.triples", &learned.offline.to_triples_text())?;
    put(dir, &mut stages, "offline.meta.json", &learned.offline.header_json()?)?;
    put(dir, &mut stages, "counts_offline.json", &learned.offline_counts.to_json()?)?;
    put(dir, &mut stages, "model_empirical.json", &learned.empirical.to_json()?)?;
    put(dir, &mut stages, "pi_ex.json", &learned.pi_ex.to_json()?)?;
    put(dir, &mut stages, "design_trace.csv", &trace_to_csv(&learned.trace))?;
    put(dir, &mut stages, "online.triples", &crate::data::triples_to_text(&learned.online.triples))?;
    put(dir, &mut stages, "counts_online.json", &learned.online.counts.to_json()?)?;
    put(dir, &mut stages, "model_fine.json", &learned.fine.to_json()?)?;
    let manifest = RunManifest {
        created_unix: now_unix(),
        num_states: learned.offline_counts.num_states(),
        num_actions: learned.offline_counts.num_actions(),
        horizon: learned.horizon,
        initial_state: learned.initial_state,
        phi: learned.phi,
        known_edges: learned.fine.known_edges().len(),
        k_ucb: learned.config.k_ucb,
        online_episodes: learned.online.episodes(),
        online_transitions: learned.online.transitions(),
        stages,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?)
}

/// Reads a stage file and checks it against the manifest digest.
pub fn read_stage(dir: &Path, name: &str) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let text = fs::read_to_string(dir.join(name))?;
    match manifest.stages.get(name) {
        Some(h) if *h == sha256_hex(text.as_bytes()) => Ok(text),
        Some(_) => Err(Error::HashMismatch(name.to_string())),
        None => Err(Error::Config(format!("{name} is not a recorded stage of {}", dir.display()))),
    }
}

pub fn load_fine_model(dir: &Path) -> Result<SparsifiedModel<f64>> {
    SparsifiedModel::from_json(&read_stage(dir, "model_fine.json")?)
}

pub fn load_counts(dir: &Path, name: &str) -> Result<CountTable> {
    CountTable::from_json(&read_stage(dir, name)?)
}

pub fn load_mixture(dir: &Path) -> Result<MixturePolicy> {
    MixturePolicy::from_json(&read_stage(dir, "pi_ex.json")?)
}

pub fn load_offline(dir: &Path) -> Result<OfflineDataset> {
    let triples = crate::data::parse_triples(&read_stage(dir, "offline.triples")?, "offline.triples")?;
    let provenance = serde_json::from_str(&read_stage(dir, "offline.meta.json")?)?;
    Ok(OfflineDataset { triples, provenance })
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Config(format!("reward name '{name}' must be nonempty and use only [A-Za-z0-9_-]")));
    }
    Ok(())
}

/// Writes `pi_final.<name>.json` and registers it in the manifest.
pub fn write_plan(dir: &Path, name: &str, policy: &DeterministicPolicy) -> Result<()> {
    check_name(name)?;
    let mut manifest = read_manifest(dir)?;
    put(dir, &mut manifest.stages, &format!("pi_final.{name}.json"), &policy_to_json(policy)?)?;
    write_manifest(dir, &manifest)
}

/// Writes `eval.<name>.csv` and registers it in the manifest.
pub fn write_eval(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    check_name(name)?;
    let mut manifest = read_manifest(dir)?;
    let csv = format!("reward,{}\n{name},{}\n", EvalReport::CSV_HEADER, report.csv_fields());
    put(dir, &mut manifest.stages, &format!("eval.{name}.csv"), &csv)?;
    write_manifest(dir, &manifest)
}

/// Runs `spec` end to end and persists every stage, plan and evaluation into `dir`.
pub fn persist_run(dir: &Path, spec: &RunSpec) -> Result<RunArtifacts<f64>> {
    let mdp = spec.instance.build()?;
    let mu = spec.mu.resolve(&mdp)?;
    let learned = learn(&mdp, &mu, spec.n_offline, &spec.run)?;
    write_learned(dir, &spec.to_json()?, &learned)?;
    let population = sparsify_population(&mdp, learned.fine.known_edges())?;
    let mut plans = Vec::with_capacity(spec.rewards.len());
    for reward_spec in &spec.rewards {
        let name = reward_spec.name();
        let reward = reward_spec.build(mdp.num_states(), mdp.num_actions())?;
        let policy = learned.plan(&reward)?;
        write_plan(dir, name, &policy)?;
        let report = evaluate_against(&mdp, &population, &reward, &policy)?;
        write_eval(dir, name, &report)?;
        plans.push(PlanOutcome { name: name.to_string(), policy, report });
    }
    Ok(RunArtifacts { learned, plans })
}

/// Every file in `dir` with its contents; the manifest's timestamp is blanked.
pub fn snapshot_without_timestamps(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = if name == MANIFEST {
            let mut m = read_manifest(dir)?;
            m.created_unix = 0;
            serde_json::to_vec_pretty(&m)?
        } else {
            fs::read(entry.path())?
        };
        out.insert(name, bytes);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::RandomMdpSpec;
    use crate::harness::config::{InstanceSpec, RewardSpec};
    use crate::pipeline::RunConfig;
    use crate::sparsify::PhiRule;

    fn spec() -> RunSpec {
        RunSpec {
            instance: InstanceSpec::Random(RandomMdpSpec::new(3, 2, 3, 5)),
            mu: crate::data::MuSpec::Uniform,
            n_offline: 1500,
            run: RunConfig { phi: PhiRule::Fixed(30), ..RunConfig::new(32, 9) },
            rewards: vec![
                RewardSpec::Random { name: "a".into(), seed: 1 },
                RewardSpec::Random { name: "b".into(), seed: 2 },
            ],
        }
    }

    #[test]
    fn layout_and_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        persist_run(tmp.path(), &spec()).unwrap();
        let m = read_manifest(tmp.path()).unwrap();
        for f in ["config.json", "offline.triples", "pi_ex.json", "online.triples", "model_fine.json", "pi_final.a.json", "eval.b.csv"] {
            assert!(m.stages.contains_key(f), "{f}");
            assert!(tmp.path().join(f).exists());
        }
        assert_eq!(m.online_transitions, 32 * 3);
        load_fine_model(tmp.path()).unwrap();
        assert_eq!(load_offline(tmp.path()).unwrap().len(), 1500);
        fs::write(tmp.path().join("model_fine.json"), "{}").unwrap();
        assert!(matches!(load_fine_model(tmp.path()), Err(Error::HashMismatch(_))));
    }

    #[test]
    fn identical_runs_match_except_timestamp() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        persist_run(a.path(), &spec()).unwrap();
        persist_run(b.path(), &spec()).unwrap();
        assert_eq!(snapshot_without_timestamps(a.path()).unwrap(), snapshot_without_timestamps(b.path()).unwrap());
    }

    #[test]
    fn bad_reward_names_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        persist_run(tmp.path(), &RunSpec { rewards: vec![], ..spec() }).unwrap();
        let pi = DeterministicPolicy::constant(3, 3, 0);
        assert!(write_plan(tmp.path(), "../x", &pi).is_err());
        assert!(write_plan(tmp.path(), "ok_name-1", &pi).is_ok());
    }
}
