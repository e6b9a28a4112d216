use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mdp::{RewardTable, TabularMdp};
use crate::pipeline::{evaluate_against, learn, EvalReport};
use crate::rng::mix_seed;
use crate::sparsify::sparsify_population;
use crate::{Error, Result};

use super::config::{Cell, ExperimentSpec, RewardFamily, RunSpec};
use super::rundir::{write_eval, write_learned, write_plan};

pub const RESULTS_HEADER: &str = "cell,n_offline,k,replicate,seed,phi,known_edges,episodes,transitions,reward,\
gap,true_gap,v_dagger_opt,v_dagger_final,v_true_opt,v_true_final";
pub const JOBS_ENV: &str = "NPD_LAB_JOBS";
const CELL_MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepOptions {
    pub jobs: Option<usize>,
    pub resume: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub cells: usize,
    pub completed: usize,
    pub skipped: usize,
    pub failed: Vec<(usize, String)>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    cell: usize,
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// One parsed line of `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub cell: usize,
    pub n_offline: usize,
    pub k: usize,
    pub replicate: usize,
    pub seed: u64,
    pub phi: u64,
    pub known_edges: usize,
    pub episodes: usize,
    pub transitions: usize,
    pub reward: String,
    pub report: EvalReport,
}

impl ResultRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.cell,
            self.n_offline,
            self.k,
            self.replicate,
            self.seed,
            self.phi,
            self.known_edges,
            self.episodes,
            self.transitions,
            self.reward,
            self.report.gap,
            self.report.true_gap,
            self.report.v_dagger_opt,
            self.report.v_dagger_final,
            self.report.v_true_opt,
            self.report.v_true_final
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse { path: "results.csv".into(), line: 0, msg: format!("malformed row '{line}'") };
        if f.len() != 16 {
            return Err(bad());
        }
        let u = |i: usize| f[i].parse::<u64>().map_err(|_| bad());
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            cell: u(0)? as usize,
            n_offline: u(1)? as usize,
            k: u(2)? as usize,
            replicate: u(3)? as usize,
            seed: u(4)?,
            phi: u(5)?,
            known_edges: u(6)? as usize,
            episodes: u(7)? as usize,
            transitions: u(8)? as usize,
            reward: f[9].to_string(),
            report: EvalReport {
                v_dagger_opt: x(12)?,
                v_dagger_final: x(13)?,
                gap: x(10)?,
                v_true_opt: x(14)?,
                v_true_final: x(15)?,
                true_gap: x(11)?,
            },
        })
    }
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Parse { path: "results.csv".into(), line: 1, msg: "unexpected header".into() });
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::parse).collect()
}

struct Prepared {
    mdp: TabularMdp<f64>,
    mu: crate::data::LoggingDistribution<f64>,
    rewards: Vec<(String, RewardTable<f64>)>,
    family: Vec<RewardTable<f64>>,
}

fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    let mdp = spec.instance.build()?;
    let mu = spec.mu.resolve(&mdp)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let rewards = spec.rewards.iter().map(|r| Ok((r.name().to_string(), r.build(ns, na)?))).collect::<Result<_>>()?;
    let family = spec.reward_family.map(|f| f.build(ns, na)).unwrap_or_default();
    Ok(Prepared { mdp, mu, rewards, family })
}

/// Runs one cell and returns its CSV rows (one per named reward, plus the family maximum).
pub fn run_cell(spec: &ExperimentSpec, cell: &Cell, out: Option<&Path>) -> Result<String> {
    run_prepared(spec, &prepare(spec)?, cell, out)
}

fn run_prepared(spec: &ExperimentSpec, prep: &Prepared, cell: &Cell, out: Option<&Path>) -> Result<String> {
    let seed = mix_seed(spec.master_seed, cell.index as u64);
    let cfg = spec.run_config(cell, seed);
    let learned = learn(&prep.mdp, &prep.mu, cell.n_offline, &cfg)?;
    let population = sparsify_population(&prep.mdp, learned.fine.known_edges())?;
    let run_dir = out.filter(|_| spec.persist_runs).map(|o| o.join("runs").join(format!("cell-{:06}", cell.index)));
    if let Some(dir) = &run_dir {
        let run_spec = RunSpec {
            instance: spec.instance.clone(),
            mu: spec.mu.clone(),
            n_offline: cell.n_offline,
            run: cfg.clone(),
            rewards: spec.rewards.clone(),
        };
        write_learned(dir, &run_spec.to_json()?, &learned)?;
    }
    let row = |reward: &str, report: EvalReport| ResultRow {
        cell: cell.index,
        n_offline: cell.n_offline,
        k: cell.k,
        replicate: cell.replicate,
        seed,
        phi: learned.phi,
        known_edges: learned.fine.known_edges().len(),
        episodes: learned.online.episodes(),
        transitions: learned.online.transitions(),
        reward: reward.to_string(),
        report,
    };
    let mut csv = String::new();
    for (name, reward) in &prep.rewards {
        let policy = learned.plan(reward)?;
        let report = evaluate_against(&prep.mdp, &population, reward, &policy)?;
        if let Some(dir) = &run_dir {
            write_plan(dir, name, &policy)?;
            write_eval(dir, name, &report)?;
        }
        csv.push_str(&row(name, report).to_csv());
    }
    if !prep.family.is_empty() {
        // Value columns come from the member with the largest sparsified gap.
        let mut worst: Option<EvalReport> = None;
        let mut true_gap = f64::NEG_INFINITY;
        for reward in &prep.family {
            let report = evaluate_against(&prep.mdp, &population, reward, &learned.plan(reward)?)?;
            true_gap = true_gap.max(report.true_gap);
            if worst.is_none_or(|w| report.gap > w.gap) {
                worst = Some(report);
            }
        }
        let report = EvalReport { true_gap, ..worst.expect("nonempty family") };
        csv.push_str(&row(RewardFamily::NAME, report).to_csv());
    }
    Ok(csv)
}

fn cell_file(out: &Path, index: usize) -> std::path::PathBuf {
    out.join("cells").join(format!("cell-{index:06}.csv"))
}

fn completed_cells(out: &Path) -> Result<BTreeSet<usize>> {
    let path = out.join(CELL_MANIFEST);
    let mut done = BTreeSet::new();
    if !path.exists() {
        return Ok(done);
    }
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        // A torn final line from an interrupted run is ignored.
        if let Ok(entry) = serde_json::from_str::<ManifestLine>(line) {
            if entry.status == "ok" && cell_file(out, entry.cell).exists() {
                done.insert(entry.cell);
            }
        }
    }
    Ok(done)
}

pub fn resolve_jobs(jobs: Option<usize>) -> Result<usize> {
    if let Some(j) = jobs {
        return Ok(j);
    }
    match std::env::var(JOBS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{JOBS_ENV} must be an integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

/// Runs every cell of `spec` into `out` and assembles `results.csv` in cell order.
///
/// Each finished cell writes `cells/cell-NNNNNN.csv` and appends a line to `manifest.jsonl`;
/// with `resume`, cells recorded as finished are skipped. Failed cells are recorded and the
/// sweep continues.
pub fn run_sweep(spec: &ExperimentSpec, out: &Path, opts: SweepOptions) -> Result<SweepSummary> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let spec_json = serde_json::to_string_pretty(spec)?;
    let spec_path = out.join("spec.json");
    if opts.resume && spec_path.exists() {
        let previous: ExperimentSpec = serde_json::from_str(&fs::read_to_string(&spec_path)?)?;
        if previous != *spec {
            return Err(Error::Config("cannot resume: the output directory holds a different spec".into()));
        }
    } else {
        for stale in [CELL_MANIFEST, "results.csv"] {
            if out.join(stale).exists() {
                fs::remove_file(out.join(stale))?;
            }
        }
        for stale in ["cells", "runs"] {
            if out.join(stale).exists() {
                fs::remove_dir_all(out.join(stale))?;
            }
        }
    }
    fs::write(&spec_path, &spec_json)?;
    fs::create_dir_all(out.join("cells"))?;

    let done = if opts.resume { completed_cells(out)? } else { BTreeSet::new() };
    let prep = prepare(spec)?;
    let pending: Vec<Cell> = (0..spec.num_cells()).filter(|i| !done.contains(i)).map(|i| spec.cell(i)).collect();
    let manifest = Mutex::new(OpenOptions::new().create(true).append(true).open(out.join(CELL_MANIFEST))?);
    let failures = Mutex::new(Vec::new());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_jobs(opts.jobs)?)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().try_for_each(|cell| -> Result<()> {
            let line = match run_prepared(spec, &prep, cell, Some(out)) {
                Ok(rows) => {
                    let tmp = out.join("cells").join(format!(".cell-{:06}.tmp", cell.index));
                    fs::write(&tmp, rows)?;
                    fs::rename(&tmp, cell_file(out, cell.index))?;
                    ManifestLine { cell: cell.index, status: "ok".into(), error: None }
                }
                Err(e) => {
                    failures.lock().expect("failure list").push((cell.index, e.to_string()));
                    ManifestLine { cell: cell.index, status: "failed".into(), error: Some(e.to_string()) }
                }
            };
            let mut f = manifest.lock().expect("manifest writer");
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
            Ok(())
        })
    })?;

    let mut failed = failures.into_inner().expect("failure list");
    failed.sort();
    let mut results = String::from(RESULTS_HEADER);
    results.push('\n');
    for i in 0..spec.num_cells() {
        let path = cell_file(out, i);
        if path.exists() {
            results.push_str(&fs::read_to_string(path)?);
        }
    }
    fs::write(out.join("results.csv"), results)?;
    Ok(SweepSummary {
        cells: spec.num_cells(),
        completed: pending.len() - failed.len(),
        skipped: done.len(),
        failed,
    })
}
