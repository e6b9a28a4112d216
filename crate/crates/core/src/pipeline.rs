//! The end-to-end run: offline data, sparsification, design, one online deployment and
//! pessimistic planning for as many rewards as needed.

use serde::{Deserialize, Serialize};

use crate::data::{
    count_triples, generate_offline_dataset_with, triples_to_text, Allocation, CountTable, LoggingDistribution,
    OfflineDataset, TransitionTriple,
};
use crate::designer::{rf_ucb, AbsorbingUncertainty, BonusParams, DesignConfig, TraceRow};
use crate::dp::{policy_evaluation, value_iteration_optimal};
use crate::hash::sha256_hex;
use crate::mdp::{rollout, DeterministicPolicy, MixturePolicy, RewardTable, TabularMdp};
use crate::rng::{Phase, RngSeed};
use crate::sparsify::{
    compute_phi_with, known_edge_set, sparsify_empirical, sparsify_fine_estimated, sparsify_population, sparsify_reward,
    ModelKind, PhiRule, SparsifiedModel,
};
use crate::{Error, Result, Scalar};

fn default_delta() -> f64 {
    0.1
}

fn default_epsilon() -> f64 {
    0.1
}

/// Settings of one run. `k_de` defaults to `k_ucb` when omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub k_ucb: usize,
    #[serde(default)]
    pub k_de: Option<usize>,
    #[serde(default)]
    pub phi: PhiRule,
    #[serde(default)]
    pub absorbing: AbsorbingUncertainty,
    #[serde(default)]
    pub allocation: Allocation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replicate: u64,
}

impl RunConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            epsilon: default_epsilon(),
            delta: default_delta(),
            k_ucb: k,
            k_de: None,
            phi: PhiRule::Standard,
            absorbing: AbsorbingUncertainty::Zero,
            allocation: Allocation::Iid,
            seed,
            replicate: 0,
        }
    }

    pub fn deploy_episodes(&self) -> usize {
        self.k_de.unwrap_or(self.k_ucb)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::DeltaOutOfRange(self.delta));
        }
        if self.k_ucb == 0 || self.deploy_episodes() == 0 {
            return Err(Error::Config("K_ucb and K_de must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, phase: Phase) -> RngSeed {
        RngSeed::derive(self.seed, phase, self.replicate)
    }
}

/// Transitions gathered by deploying the mixture, plus the member drawn in each episode.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineData {
    pub triples: Vec<TransitionTriple>,
    pub members_drawn: Vec<usize>,
    pub counts: CountTable,
}

impl OnlineData {
    pub fn episodes(&self) -> usize {
        self.members_drawn.len()
    }

    pub fn transitions(&self) -> usize {
        self.triples.len()
    }
}

/// Runs `episodes` episodes on the true MDP, drawing one mixture member per episode.
pub fn deploy_online<T: Scalar>(
    mdp: &TabularMdp<T>,
    mixture: &MixturePolicy,
    episodes: usize,
    seed: RngSeed,
) -> Result<OnlineData> {
    if episodes == 0 {
        return Err(Error::Config("the online phase needs at least one episode".into()));
    }
    if mixture.num_states() != mdp.num_states() || mixture.horizon() < mdp.horizon {
        return Err(Error::dims(format!(
            "mixture covers {} states over {} stages, MDP has {} states and horizon {}",
            mixture.num_states(),
            mixture.horizon(),
            mdp.num_states(),
            mdp.horizon
        )));
    }
    for member in mixture.members() {
        if member.max_action().is_some_and(|a| a >= mdp.num_actions()) {
            return Err(Error::IndexOutOfRange("mixture action exceeds the MDP's action count".into()));
        }
    }
    let mut rng = seed.rng();
    let mut triples = Vec::with_capacity(episodes * mdp.horizon);
    let mut members_drawn = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let idx = mixture.draw(&mut rng);
        members_drawn.push(idx);
        let steps = rollout(&mdp.kernel, mdp.initial_state, mdp.horizon, &mixture.members()[idx], &mut rng);
        triples.extend(steps.into_iter().map(TransitionTriple::from));
    }
    let counts = count_triples(&triples, mdp.num_states(), mdp.num_actions())?;
    Ok(OnlineData { triples, members_drawn, counts })
}

/// Optimal policy of the fine-estimated model under the sparsified reward, restricted to the
/// real states.
pub fn plan_final<T: Scalar>(
    model: &SparsifiedModel<T>,
    reward: &RewardTable<T>,
    horizon: usize,
) -> Result<DeterministicPolicy> {
    model.expect_kind(ModelKind::FineEstimated)?;
    if reward.num_states() != model.num_real_states() || reward.num_actions() != model.num_actions() {
        return Err(Error::dims("reward does not match the model's real states"));
    }
    let (policy, _) = value_iteration_optimal(model.kernel(), &sparsify_reward(reward), horizon)?;
    Ok(policy.restrict(model.num_real_states()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub v_dagger_opt: f64,
    pub v_dagger_final: f64,
    /// Suboptimality on the population sparsified MDP.
    pub gap: f64,
    pub v_true_opt: f64,
    pub v_true_final: f64,
    /// Suboptimality on the true MDP.
    pub true_gap: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "v_dagger_opt,v_dagger_final,gap,v_true_opt,v_true_final,true_gap";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.v_dagger_opt, self.v_dagger_final, self.gap, self.v_true_opt, self.v_true_final, self.true_gap
        )
    }
}

/// Oracle-side evaluation of `pi_final`: compares it with the optimum of the population
/// sparsified MDP built from the same offline counts, and with the optimum of the true MDP.
pub fn evaluate_suboptimality<T: Scalar>(
    mdp: &TabularMdp<T>,
    offline: &CountTable,
    phi: u64,
    reward: &RewardTable<T>,
    pi_final: &DeterministicPolicy,
) -> Result<EvalReport> {
    let population = sparsify_population(mdp, &known_edge_set(offline, phi))?;
    evaluate_against(mdp, &population, reward, pi_final)
}

/// As [`evaluate_suboptimality`], with the population model already built.
pub fn evaluate_against<T: Scalar>(
    mdp: &TabularMdp<T>,
    population: &SparsifiedModel<T>,
    reward: &RewardTable<T>,
    pi_final: &DeterministicPolicy,
) -> Result<EvalReport> {
    population.expect_kind(ModelKind::Population)?;
    let (h, s1) = (mdp.horizon, mdp.initial_state);
    let r_dag = sparsify_reward(reward);
    let (_, opt_dag) = value_iteration_optimal(population.kernel(), &r_dag, h)?;
    let final_dag = policy_evaluation(population.kernel(), &r_dag, pi_final)?;
    let (_, opt_true) = value_iteration_optimal(&mdp.kernel, reward, h)?;
    let final_true = policy_evaluation(&mdp.kernel, reward, pi_final)?;
    let v_dagger_opt = opt_dag.v(0, s1).as_f64();
    let v_dagger_final = final_dag.v(0, s1).as_f64();
    let v_true_opt = opt_true.v(0, s1).as_f64();
    let v_true_final = final_true.v(0, s1).as_f64();
    Ok(EvalReport {
        v_dagger_opt,
        v_dagger_final,
        gap: v_dagger_opt - v_dagger_final,
        v_true_opt,
        v_true_final,
        true_gap: v_true_opt - v_true_final,
    })
}

/// sha256 digests linking the persisted stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub offline: String,
    pub pi_ex: String,
    pub online: String,
    pub model_fine: String,
}

/// Everything the learner produced before any reward is revealed.
#[derive(Clone, Debug)]
pub struct LearnedRun<T> {
    pub config: RunConfig,
    pub horizon: usize,
    pub initial_state: usize,
    pub offline: OfflineDataset,
    pub offline_counts: CountTable,
    pub phi: u64,
    pub empirical: SparsifiedModel<T>,
    pub pi_ex: MixturePolicy,
    pub trace: Vec<TraceRow>,
    pub online: OnlineData,
    pub fine: SparsifiedModel<T>,
    pub hashes: StageHashes,
}

impl<T: Scalar> LearnedRun<T> {
    /// Plans for `reward` after checking that the planning model still matches its hash.
    pub fn plan(&self, reward: &RewardTable<T>) -> Result<DeterministicPolicy> {
        if sha256_hex(self.fine.to_json()?.as_bytes()) != self.hashes.model_fine {
            return Err(Error::HashMismatch("model_fine".into()));
        }
        plan_final(&self.fine, reward, self.horizon)
    }

    /// Re-hashes every persisted stage.
    pub fn verify(&self) -> Result<()> {
        let fresh = stage_hashes(&self.offline, &self.pi_ex, &self.online, &self.fine)?;
        for (name, a, b) in [
            ("offline", &fresh.offline, &self.hashes.offline),
            ("pi_ex", &fresh.pi_ex, &self.hashes.pi_ex),
            ("online", &fresh.online, &self.hashes.online),
            ("model_fine", &fresh.model_fine, &self.hashes.model_fine),
        ] {
            if a != b {
                return Err(Error::HashMismatch(name.into()));
            }
        }
        Ok(())
    }
}

pub fn stage_hashes<T: Scalar>(
    offline: &OfflineDataset,
    pi_ex: &MixturePolicy,
    online: &OnlineData,
    fine: &SparsifiedModel<T>,
) -> Result<StageHashes> {
    Ok(StageHashes {
        offline: sha256_hex(offline.to_triples_text().as_bytes()),
        pi_ex: sha256_hex(pi_ex.to_json()?.as_bytes()),
        online: sha256_hex(triples_to_text(&online.triples).as_bytes()),
        model_fine: sha256_hex(fine.to_json()?.as_bytes()),
    })
}

/// Offline generation through the fine-estimated model. The true MDP is only used to simulate
/// the offline logger and the online deployment.
pub fn learn<T: Scalar>(
    mdp: &TabularMdp<T>,
    mu: &LoggingDistribution<T>,
    n_offline: usize,
    cfg: &RunConfig,
) -> Result<LearnedRun<T>> {
    cfg.validate()?;
    let offline = generate_offline_dataset_with(mdp, mu, n_offline, cfg.stage_seed(Phase::Offline), cfg.allocation)?;
    learn_from_offline(mdp, offline, cfg)
}

/// As [`learn`], starting from an existing offline dataset.
pub fn learn_from_offline<T: Scalar>(
    mdp: &TabularMdp<T>,
    offline: OfflineDataset,
    cfg: &RunConfig,
) -> Result<LearnedRun<T>> {
    cfg.validate()?;
    let (ns, na, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon);
    let offline_counts = count_triples(&offline.triples, ns, na)?;
    let phi = compute_phi_with(cfg.phi, h, ns, na, cfg.delta)?;
    let edges = known_edge_set(&offline_counts, phi);
    let empirical = sparsify_empirical(&offline_counts, &edges)?;
    let design = DesignConfig {
        episodes: cfg.k_ucb,
        initial_state: mdp.initial_state,
        params: BonusParams::new(h, ns, na, T::lit(cfg.delta))?,
        absorbing: cfg.absorbing,
    };
    let outcome = rf_ucb(&empirical, &design, cfg.stage_seed(Phase::Design))?;
    let pi_ex = outcome.mixture;
    let online = deploy_online(mdp, &pi_ex, cfg.deploy_episodes(), cfg.stage_seed(Phase::Online))?;
    let fine = sparsify_fine_estimated(&online.counts, &edges)?;
    let hashes = stage_hashes(&offline, &pi_ex, &online, &fine)?;
    Ok(LearnedRun {
        config: cfg.clone(),
        horizon: h,
        initial_state: mdp.initial_state,
        offline,
        offline_counts,
        phi,
        empirical,
        pi_ex,
        trace: outcome.trace,
        online,
        fine,
        hashes,
    })
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub name: String,
    pub policy: DeterministicPolicy,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts<T> {
    pub learned: LearnedRun<T>,
    pub plans: Vec<PlanOutcome>,
}

/// The whole pipeline: one learning pass, then planning and oracle evaluation per named reward.
pub fn rf_npd_end_to_end<T: Scalar>(
    mdp: &TabularMdp<T>,
    mu: &LoggingDistribution<T>,
    n_offline: usize,
    cfg: &RunConfig,
    rewards: &[(String, RewardTable<T>)],
) -> Result<RunArtifacts<T>> {
    let learned = learn(mdp, mu, n_offline, cfg)?;
    let population = sparsify_population(mdp, learned.fine.known_edges())?;
    let mut plans = Vec::with_capacity(rewards.len());
    for (name, reward) in rewards {
        let policy = learned.plan(reward)?;
        let report = evaluate_against(mdp, &population, reward, &policy)?;
        plans.push(PlanOutcome { name: name.clone(), policy, report });
    }
    Ok(RunArtifacts { learned, plans })
}
