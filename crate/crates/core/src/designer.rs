//! Offline experiment design by optimistic exploration on the empirical sparsified model.
//!
//! Virtual episodes are simulated on the empirical model only; the bonus replaces the reward and
//! the uncertainty table `U` is rebuilt from scratch each episode. The greedy policies of all
//! episodes form the uniform exploration mixture that is later deployed unchanged.

use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::mdp::{rollout, DeterministicPolicy, MixturePolicy};
use crate::rng::RngSeed;
use crate::scalar::{argmax, max_of};
use crate::sparsify::{ModelKind, SparsifiedModel};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonusParams<T> {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub delta: T,
}

impl<T: Scalar> BonusParams<T> {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, delta: T) -> Result<Self> {
        if !(delta > T::zero() && delta < T::one()) {
            return Err(Error::DeltaOutOfRange(delta.as_f64()));
        }
        Ok(Self { horizon, num_states, num_actions, delta })
    }

    fn h(&self) -> T {
        T::from_usize(self.horizon).unwrap()
    }
}

/// `phi(x) = (H/x) [ln(6 H |S| |A| / delta) + |S| ln(e (1 + x/|S|))]` for `x > 0`.
pub fn bonus_phi<T: Scalar>(x: T, p: &BonusParams<T>) -> Result<T> {
    if !(x > T::zero()) {
        return Err(Error::NonPositiveBonusArgument(x.as_f64()));
    }
    let h = p.h();
    let s = T::from_usize(p.num_states).unwrap();
    let a = T::from_usize(p.num_actions).unwrap();
    let confidence = (T::lit(6.0) * h * s * a / p.delta).ln();
    let entropy = s * (T::one() + (T::one() + x / s).ln());
    Ok(h / x * (confidence + entropy))
}

/// `min{1, phi(n)}`, equal to 1 at `n = 0`.
pub fn clipped_bonus<T: Scalar>(n: u64, p: &BonusParams<T>) -> T {
    if n == 0 {
        return T::one();
    }
    bonus_phi(T::from_count(n), p).map_or(T::one(), |v| v.min(T::one()))
}

/// `min{1, H phi(n)}`, equal to 1 at `n = 0`.
pub fn bonus_bar<T: Scalar>(n: u64, p: &BonusParams<T>) -> T {
    if n == 0 {
        return T::one();
    }
    bonus_phi(T::from_count(n), p).map_or(T::one(), |v| (p.h() * v).min(T::one()))
}

/// Treatment of the absorbing state inside the uncertainty recursion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsorbingUncertainty {
    /// `U(s_dagger, .) = 0`: reaching the absorbing state carries no exploration value.
    #[default]
    Zero,
    /// Apply the bonus recursion to the absorbing state's own counters as well.
    Literal,
}

/// `U_h(s,a)` for zero-based `h` over the augmented state space.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyTable<T> {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<T>,
}

impl<T: Scalar> UncertaintyTable<T> {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self { horizon, num_states, num_actions, values: vec![T::zero(); horizon * num_states * num_actions] }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> T {
        self.values[(h * self.num_states + s) * self.num_actions + a]
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[T] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.values[start..start + self.num_actions]
    }

    #[inline]
    pub(crate) fn set(&mut self, h: usize, s: usize, a: usize, value: T) {
        self.values[(h * self.num_states + s) * self.num_actions + a] = value;
    }

    pub fn max_over_actions(&self, h: usize, s: usize) -> T {
        max_of(self.row(h, s))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Counters, the latest uncertainty table and greedy policy after `k` virtual episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignerState<T> {
    pub k: usize,
    pub counts: CountTable,
    pub uncertainty: UncertaintyTable<T>,
    pub policy: DeterministicPolicy,
}

/// Rebuilds `U` backward from the virtual counters on the empirical sparsified model.
pub fn backward_uncertainty_update<T: Scalar>(
    counts: &CountTable,
    model: &SparsifiedModel<T>,
    p: &BonusParams<T>,
    absorbing: AbsorbingUncertainty,
) -> Result<UncertaintyTable<T>> {
    model.expect_kind(ModelKind::Empirical)?;
    let kernel = model.kernel();
    let (ns, na) = (kernel.num_states(), kernel.num_actions());
    if counts.num_states() != ns || counts.num_actions() != na {
        return Err(Error::dims(format!(
            "virtual counters are {}x{}, model is {ns}x{na}",
            counts.num_states(),
            counts.num_actions()
        )));
    }
    let horizon = p.horizon;
    let dagger = model.absorbing();
    let scale = p.h();
    let bonus: Vec<T> = (0..ns)
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .map(|(s, a)| scale * clipped_bonus(counts.n_sa(s, a), p))
        .collect();

    let mut u = UncertaintyTable::zeros(horizon, ns, na);
    let mut next_max = vec![T::zero(); ns];
    for h in (0..horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                let value = if s == dagger && absorbing == AbsorbingUncertainty::Zero {
                    T::zero()
                } else {
                    bonus[s * na + a] + kernel.expect(s, a, &next_max)
                };
                u.set(h, s, a, value);
            }
        }
        for (s, m) in next_max.iter_mut().enumerate() {
            *m = u.max_over_actions(h, s);
        }
    }
    Ok(u)
}

/// Greedy policy over every state of `u`; ties go to the smallest action, `absorbing` plays 0.
pub fn greedy_policy_from_u<T: Scalar>(u: &UncertaintyTable<T>, absorbing: Option<usize>) -> DeterministicPolicy {
    let mut policy = DeterministicPolicy::constant(u.horizon, u.num_states, 0);
    for h in 0..u.horizon {
        for s in 0..u.num_states {
            if Some(s) != absorbing {
                policy.set(h, s, argmax(u.row(h, s)));
            }
        }
    }
    policy
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// One-based virtual episode index.
    pub k: usize,
    #[serde(rename = "max_U1")]
    pub max_u1: f64,
    /// Virtual episodes up to and including `k` that reached the absorbing state.
    pub episodes_to_s_dagger: usize,
}

#[derive(Clone, Debug)]
pub struct DesignOutcome<T> {
    pub mixture: MixturePolicy,
    pub trace: Vec<TraceRow>,
    pub state: DesignerState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig<T> {
    pub episodes: usize,
    pub initial_state: usize,
    pub params: BonusParams<T>,
    #[serde(default)]
    pub absorbing: AbsorbingUncertainty,
}

/// Runs `episodes` virtual episodes on the empirical sparsified model and returns the uniform
/// mixture of the greedy policies (restricted to the real states).
pub fn rf_ucb<T: Scalar>(model: &SparsifiedModel<T>, cfg: &DesignConfig<T>, seed: RngSeed) -> Result<DesignOutcome<T>> {
    model.expect_kind(ModelKind::Empirical)?;
    if cfg.episodes == 0 {
        return Err(Error::Config("the design phase needs at least one virtual episode".into()));
    }
    let ns_real = model.num_real_states();
    if cfg.initial_state >= ns_real {
        return Err(Error::IndexOutOfRange(format!("initial state {}", cfg.initial_state)));
    }
    if cfg.params.num_states != ns_real || cfg.params.num_actions != model.num_actions() {
        return Err(Error::dims("bonus parameters disagree with the model size"));
    }
    let kernel = model.kernel();
    let dagger = model.absorbing();
    let mut rng = seed.rng();
    let mut counts = CountTable::zeros(ns_real + 1, model.num_actions());
    let mut members = Vec::with_capacity(cfg.episodes);
    let mut trace = Vec::with_capacity(cfg.episodes);
    let mut absorbed = 0;
    let mut last = None;

    for k in 0..cfg.episodes {
        let u = backward_uncertainty_update(&counts, model, &cfg.params, cfg.absorbing)?;
        let policy = greedy_policy_from_u(&u, Some(dagger));
        let steps = rollout(kernel, cfg.initial_state, cfg.params.horizon, &policy, &mut rng);
        if steps.iter().any(|st| st.next_state == dagger) {
            absorbed += 1;
        }
        for st in &steps {
            counts.record(st.state, st.action, st.next_state)?;
        }
        trace.push(TraceRow {
            k: k + 1,
            max_u1: u.max_over_actions(0, cfg.initial_state).as_f64(),
            episodes_to_s_dagger: absorbed,
        });
        members.push(policy.restrict(ns_real));
        last = Some((u, policy));
    }
    let (uncertainty, policy) = last.expect("at least one episode");
    Ok(DesignOutcome {
        mixture: MixturePolicy::new(members)?,
        trace,
        state: DesignerState { k: cfg.episodes, counts, uncertainty, policy },
    })
}

/// `(1/k) sum_{i<=k} max_a U_1^i(s_1, a)` for every prefix.
pub fn running_average(trace: &[TraceRow]) -> Vec<f64> {
    let mut acc = 0.0;
    trace
        .iter()
        .enumerate()
        .map(|(i, row)| {
            acc += row.max_u1;
            acc / (i + 1) as f64
        })
        .collect()
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("k,max_U1,episodes_to_s_dagger\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.k, row.max_u1, row.episodes_to_s_dagger));
    }
    out
}
