use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use npd_core::data::{count_triples, generate_offline_dataset_with, Allocation, CountTable, MuSpec};
use npd_core::designer::{rf_ucb, trace_to_csv, AbsorbingUncertainty, BonusParams, DesignConfig};
use npd_core::diagnostics::{
    check_event_kl, check_event_p, check_multiplicative_accuracy, check_visitation_ratio, diagnostics_csv,
    DiagnosticRow,
};
use npd_core::generators::random_policy;
use npd_core::harness::rundir::{load_counts, load_fine_model, read_stage, write_eval, write_plan};
use npd_core::harness::{persist_run, run_sweep, ExperimentSpec, InstanceSpec, RunSpec, SweepOptions};
use npd_core::mdp::{policy_from_json, policy_to_json, DeterministicPolicy, MixturePolicy};
use npd_core::pipeline::{deploy_online, evaluate_against, plan_final};
use npd_core::rng::{mix_seed, Phase, RngSeed};
use npd_core::sparsify::{
    compute_phi_with, known_edge_set, sparsify_empirical, sparsify_fine_estimated, sparsify_population, PhiRule,
    SparsifiedModel,
};
use npd_core::{Mdp, Reward};

/// Reward-free exploration experiments: stage-by-stage tools and sweeps.
#[derive(Parser)]
#[command(name = "npd-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an MDP JSON from an instance spec.
    GenMdp(GenMdp),
    /// Log an offline dataset from an MDP.
    GenOffline(GenOffline),
    /// Build a sparsified model from a count table.
    Sparsify(Sparsify),
    /// Run the exploration designer on an empirical sparsified model.
    Design(Design),
    /// Deploy a mixture policy on the true MDP.
    Deploy(Deploy),
    /// Plan for one reward, either in a run directory or on a model file.
    Plan(Plan),
    /// Evaluate a planned policy of a run directory against the true MDP.
    Evaluate(Evaluate),
    /// Check the concentration events of a run directory.
    Diagnose(Diagnose),
    /// Run one configuration end to end into a run directory.
    Run(Run),
    /// Run a sweep over offline sizes, budgets and replicates.
    Experiment(Experiment),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> anyhow::Result<&Path> {
        self.config.as_deref().ok_or_else(|| invalid("--config is required"))
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| invalid("--out is required"))
    }
}

#[derive(Args)]
struct GenMdp {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenOffline {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mdp: PathBuf,
    /// Number of transitions.
    #[arg(long)]
    n: usize,
    /// Logging distribution as JSON, e.g. `"uniform"` or `{"table": [[...]]}`; a file path or inline.
    #[arg(long, default_value = "\"uniform\"")]
    mu: String,
    /// `iid` or `deterministic`.
    #[arg(long, default_value = "iid")]
    allocation: String,
}

#[derive(Args)]
struct Sparsify {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    counts: PathBuf,
    /// `empirical` thresholds the counts; `fine` reuses the edges of `--edges` with these counts.
    #[arg(long, default_value = "empirical")]
    kind: String,
    /// Model whose known edges a fine model keeps.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Fixed threshold; otherwise computed from the horizon and delta.
    #[arg(long)]
    phi: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
}

#[derive(Args)]
struct Design {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Number of design episodes.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    initial_state: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// `zero` or `literal`.
    #[arg(long, default_value = "zero")]
    absorbing: String,
}

#[derive(Args)]
struct Deploy {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long)]
    episodes: usize,
}

#[derive(Args)]
struct Plan {
    #[command(flatten)]
    common: Common,
    /// Run directory; the plan is written there as `pi_final.<name>.json`.
    #[arg(long, conflicts_with = "model")]
    run: Option<PathBuf>,
    /// Fine-estimated model file, used with `--horizon` and `--out`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    reward: PathBuf,
    #[arg(long, default_value = "reward")]
    name: String,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    reward: PathBuf,
    #[arg(long, default_value = "reward")]
    name: String,
}

#[derive(Args)]
struct Diagnose {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    run: PathBuf,
    /// Random policies checked by the visitation-ratio diagnostic.
    #[arg(long, default_value_t = 20)]
    policies: usize,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Experiment {
    #[command(flatten)]
    common: Common,
    /// Worker threads; falls back to NPD_LAB_JOBS, then to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip cells already recorded in the output directory.
    #[arg(long)]
    resume: bool,
}

/// Marks bad input that is not an `npd_core::Error`.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<npd_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenMdp(c) => gen_mdp(c),
        Command::GenOffline(c) => gen_offline(c),
        Command::Sparsify(c) => sparsify(c),
        Command::Design(c) => design(c),
        Command::Deploy(c) => deploy(c),
        Command::Plan(c) => plan(c),
        Command::Evaluate(c) => evaluate(c),
        Command::Diagnose(c) => diagnose(c),
        Command::Run(c) => run(c),
        Command::Experiment(c) => experiment(c),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Parses a kebab-case enum name through its serde representation.
fn named<T: DeserializeOwned>(flag: &str, value: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| invalid(format!("unknown value '{value}' for --{flag}")))
}

fn load_mdp(path: &Path) -> anyhow::Result<Mdp> {
    Mdp::from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_reward(path: &Path) -> anyhow::Result<Reward> {
    Reward::from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<SparsifiedModel<f64>> {
    SparsifiedModel::from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_count_file(path: &Path) -> anyhow::Result<CountTable> {
    CountTable::from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

/// Stage seeds match those of an end-to-end run with the same seed and replicate 0.
fn stage_seed(seed: Option<u64>, phase: Phase) -> RngSeed {
    RngSeed::derive(seed.unwrap_or(0), phase, 0)
}

fn gen_mdp(c: GenMdp) -> anyhow::Result<()> {
    let mut spec: InstanceSpec = load_json(c.common.config()?)?;
    if let Some(seed) = c.common.seed {
        match &mut spec {
            InstanceSpec::Random(s) => s.seed = seed,
            InstanceSpec::Gridworld(s) => s.seed = seed,
            InstanceSpec::File { .. } => bail!(invalid("--seed has no effect on a file instance")),
        }
    }
    write(c.common.out()?, &spec.build()?.to_json()?)
}

fn gen_offline(c: GenOffline) -> anyhow::Result<()> {
    let mdp = load_mdp(&c.mdp)?;
    let mu_text = if Path::new(&c.mu).is_file() { read(Path::new(&c.mu))? } else { c.mu.clone() };
    let mu_spec: MuSpec = serde_json::from_str(&mu_text).context("parsing --mu")?;
    let mu = mu_spec.resolve(&mdp)?;
    let allocation: Allocation = named("allocation", &c.allocation)?;
    let data = generate_offline_dataset_with(&mdp, &mu, c.n, stage_seed(c.common.seed, Phase::Offline), allocation)?;
    let counts = count_triples(&data.triples, mdp.num_states(), mdp.num_actions())?;
    let out = c.common.out()?;
    write(&out.join("offline.triples"), &data.to_triples_text())?;
    write(&out.join("offline.meta.json"), &data.header_json()?)?;
    write(&out.join("counts_offline.json"), &counts.to_json()?)
}

fn sparsify(c: Sparsify) -> anyhow::Result<()> {
    let counts = load_count_file(&c.counts)?;
    let model = match c.kind.as_str() {
        "empirical" => {
            let (ns, na) = (counts.num_states(), counts.num_actions());
            let phi = match (c.phi, c.horizon) {
                (Some(phi), _) => compute_phi_with(PhiRule::Fixed(phi), 1, ns, na, c.delta)?,
                (None, Some(h)) => compute_phi_with(PhiRule::Standard, h, ns, na, c.delta)?,
                (None, None) => bail!(invalid("an empirical model needs --phi or --horizon")),
            };
            sparsify_empirical::<f64>(&counts, &known_edge_set(&counts, phi))?
        }
        "fine" => {
            let edges_from = c.edges.as_deref().ok_or_else(|| invalid("a fine model needs --edges"))?;
            sparsify_fine_estimated(&counts, load_model(edges_from)?.known_edges())?
        }
        other => bail!(invalid(format!("unknown model kind '{other}'"))),
    };
    write(c.common.out()?, &model.to_json()?)
}

fn design(c: Design) -> anyhow::Result<()> {
    let model = load_model(&c.model)?;
    let cfg = DesignConfig {
        episodes: c.k,
        initial_state: c.initial_state,
        params: BonusParams::new(c.horizon, model.num_real_states(), model.num_actions(), c.delta)?,
        absorbing: named::<AbsorbingUncertainty>("absorbing", &c.absorbing)?,
    };
    let outcome = rf_ucb(&model, &cfg, stage_seed(c.common.seed, Phase::Design))?;
    let out = c.common.out()?;
    write(&out.join("pi_ex.json"), &outcome.mixture.to_json()?)?;
    write(&out.join("design_trace.csv"), &trace_to_csv(&outcome.trace))
}

fn deploy(c: Deploy) -> anyhow::Result<()> {
    let mdp = load_mdp(&c.mdp)?;
    let mixture = MixturePolicy::from_json(&read(&c.mixture)?)?;
    let online = deploy_online(&mdp, &mixture, c.episodes, stage_seed(c.common.seed, Phase::Online))?;
    let out = c.common.out()?;
    write(&out.join("online.triples"), &npd_core::data::triples_to_text(&online.triples))?;
    write(&out.join("counts_online.json"), &online.counts.to_json()?)
}

/// Instance and run settings recorded in a run directory.
fn run_spec(dir: &Path) -> anyhow::Result<RunSpec> {
    Ok(RunSpec::from_json(&read_stage(dir, "config.json")?)?)
}

fn plan(c: Plan) -> anyhow::Result<()> {
    let reward = load_reward(&c.reward)?;
    if let Some(dir) = &c.run {
        let model = load_fine_model(dir)?;
        let horizon = run_spec(dir)?.instance.build()?.horizon;
        let policy = plan_final(&model, &reward, horizon)?;
        write_plan(dir, &c.name, &policy)?;
        return Ok(());
    }
    let model = load_model(c.model.as_deref().ok_or_else(|| invalid("plan needs --run or --model"))?)?;
    let horizon = c.horizon.ok_or_else(|| invalid("--model needs --horizon"))?;
    write(c.common.out()?, &policy_to_json(&plan_final(&model, &reward, horizon)?)?)
}

fn evaluate(c: Evaluate) -> anyhow::Result<()> {
    let mdp = run_spec(&c.run)?.instance.build()?;
    let reward = load_reward(&c.reward)?;
    let policy = policy_from_json(&read_stage(&c.run, &format!("pi_final.{}.json", c.name))?)?;
    let population = sparsify_population(&mdp, load_fine_model(&c.run)?.known_edges())?;
    let report = evaluate_against(&mdp, &population, &reward, &policy)?;
    write_eval(&c.run, &c.name, &report)?;
    println!("gap {} true_gap {}", report.gap, report.true_gap);
    Ok(())
}

fn diagnose(c: Diagnose) -> anyhow::Result<()> {
    let spec = run_spec(&c.run)?;
    let mdp = spec.instance.build()?;
    let (ns, na, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon);
    let delta = spec.run.delta;
    let replicate = spec.run.replicate as usize;
    let offline = load_counts(&c.run, "counts_offline.json")?;
    let online = load_counts(&c.run, "counts_online.json")?;
    let empirical = SparsifiedModel::<f64>::from_json(&read_stage(&c.run, "model_empirical.json")?)?;
    let fine = load_fine_model(&c.run)?;
    let population = sparsify_population(&mdp, empirical.known_edges())?;

    let seed = c.common.seed.unwrap_or(spec.run.seed);
    let mut policies: Vec<DeterministicPolicy> = (0..na).map(|a| DeterministicPolicy::constant(h, ns, a)).collect();
    policies.extend((0..c.policies as u64).map(|i| random_policy(h, ns, na, mix_seed(seed, i))));

    let sandwich = check_multiplicative_accuracy(&population, &empirical, h)?;
    let visits = check_visitation_ratio(&population, &empirical, mdp.initial_state, &policies)?;
    let kl = check_event_kl(&fine, &population, &online, delta)?;
    let event_p = check_event_p(&mdp, &offline, delta)?;
    let flag = |b: bool| f64::from(u8::from(b));
    let checks = [
        ("multiplicative-accuracy", DiagnosticRow { replicate, statistic: flag(sandwich), bound: 1.0, pass: sandwich }),
        (
            "visitation-ratio",
            DiagnosticRow { replicate, statistic: visits.violations as f64, bound: 0.0, pass: visits.holds() },
        ),
        ("kl-event", DiagnosticRow { replicate, statistic: kl.worst_ratio, bound: 1.0, pass: kl.holds }),
        ("offline-event", DiagnosticRow { replicate, statistic: flag(event_p), bound: 1.0, pass: event_p }),
    ];
    let out = c.common.out.clone().unwrap_or_else(|| c.run.clone());
    for (name, row) in &checks {
        write(&out.join(format!("diagnostics.{name}.csv")), &diagnostics_csv(std::slice::from_ref(row)))?;
        println!("{name}: {}", if row.pass { "pass" } else { "fail" });
    }
    Ok(())
}

fn run(c: Run) -> anyhow::Result<()> {
    let mut spec = RunSpec::from_json(&read(c.common.config()?)?)?;
    if let Some(seed) = c.common.seed {
        spec.run.seed = seed;
    }
    let artifacts = persist_run(c.common.out()?, &spec)?;
    for p in &artifacts.plans {
        println!("{}: gap {} true_gap {}", p.name, p.report.gap, p.report.true_gap);
    }
    Ok(())
}

fn experiment(c: Experiment) -> anyhow::Result<()> {
    let mut spec = ExperimentSpec::load(c.common.config()?)?;
    if let Some(seed) = c.common.seed {
        spec.master_seed = seed;
    }
    let summary = run_sweep(&spec, c.common.out()?, SweepOptions { jobs: c.jobs, resume: c.resume })?;
    println!(
        "{} cells: {} completed, {} skipped, {} failed",
        summary.cells,
        summary.completed,
        summary.skipped,
        summary.failed.len()
    );
    for (cell, msg) in &summary.failed {
        eprintln!("cell {cell}: {msg}");
    }
    if !summary.failed.is_empty() {
        return Err(anyhow!("{} of {} cells failed", summary.failed.len(), summary.cells));
    }
    Ok(())
}
