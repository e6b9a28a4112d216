//! Ground-truth episodic MDPs, rewards and policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{sample_index, RngSeed};
use crate::{Error, Result, Scalar};

/// Time-homogeneous transition kernel stored row-major as `[s][a][s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    num_states: usize,
    num_actions: usize,
    probs: Vec<T>,
}

impl<T: Scalar> Kernel<T> {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, probs: vec![T::zero(); num_states * num_actions * num_states] }
    }

    pub fn from_nested(rows: Vec<Vec<Vec<T>>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(num_states * num_actions * num_states);
        for (s, per_action) in rows.into_iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(Error::dims(format!("state {s} has {} actions, expected {num_actions}", per_action.len())));
            }
            for (a, row) in per_action.into_iter().enumerate() {
                if row.len() != num_states {
                    return Err(Error::dims(format!("row ({s},{a}) has length {}, expected {num_states}", row.len())));
                }
                probs.extend(row);
            }
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<T>>> {
        (0..self.num_states)
            .map(|s| (0..self.num_actions).map(|a| self.row(s, a).to_vec()).collect())
            .collect()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[T] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.probs[start..start + self.num_states]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [T] {
        let start = (s * self.num_actions + a) * self.num_states;
        &mut self.probs[start..start + self.num_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> T {
        self.row(s, a)[next]
    }

    /// Expected value of `f` under the row `P(.|s,a)`.
    #[inline]
    pub fn expect(&self, s: usize, a: usize, f: &[T]) -> T {
        self.row(s, a).iter().zip(f).fold(T::zero(), |acc, (p, v)| acc + *p * *v)
    }

    /// Row-sum and sign violations, at most one entry per offending row.
    pub fn row_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.row(s, a);
                if let Some(next) = row.iter().position(|p| !(*p >= T::zero())) {
                    out.push(Violation::NegativeProbability { state: s, action: a, next });
                    continue;
                }
                let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
                if (sum - 1.0).abs() > T::ROW_TOL {
                    out.push(Violation::RowSum { state: s, action: a, sum });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    RowSum { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize, next: usize },
    Horizon { horizon: usize },
    EmptySpace { num_states: usize, num_actions: usize },
    InitialState { initial_state: usize, num_states: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A finite-horizon MDP with a fixed initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T> {
    pub kernel: Kernel<T>,
    pub horizon: usize,
    pub initial_state: usize,
}

impl<T: Scalar> TabularMdp<T> {
    /// Builds a validated MDP.
    pub fn new(kernel: Kernel<T>, horizon: usize, initial_state: usize) -> Result<Self> {
        let mdp = Self { kernel, horizon, initial_state };
        let report = mdp.validate();
        if !report.is_ok() {
            return Err(Error::InvalidMdp(format!("{:?}", report.violations)));
        }
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.kernel.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.kernel.num_actions()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.num_states() == 0 || self.num_actions() == 0 {
            violations.push(Violation::EmptySpace { num_states: self.num_states(), num_actions: self.num_actions() });
        }
        if self.horizon == 0 {
            violations.push(Violation::Horizon { horizon: self.horizon });
        }
        if self.initial_state >= self.num_states() {
            violations.push(Violation::InitialState { initial_state: self.initial_state, num_states: self.num_states() });
        }
        violations.extend(self.kernel.row_violations());
        ValidationReport { violations }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MdpFile {
            num_states: self.num_states(),
            num_actions: self.num_actions(),
            horizon: self.horizon,
            initial_state: self.initial_state,
            kernel: self.kernel.to_nested(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses the MDP JSON schema without validating stochasticity.
    pub fn from_json_unchecked(text: &str) -> Result<Self> {
        let file: MdpFile<T> = serde_json::from_str(text)?;
        let kernel = Kernel::from_nested(file.kernel)?;
        if kernel.num_states() != file.num_states || kernel.num_actions() != file.num_actions {
            return Err(Error::dims(format!(
                "declared {}x{} but kernel is {}x{}",
                file.num_states,
                file.num_actions,
                kernel.num_states(),
                kernel.num_actions()
            )));
        }
        Ok(Self { kernel, horizon: file.horizon, initial_state: file.initial_state })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp = Self::from_json_unchecked(text)?;
        Self::new(mdp.kernel, mdp.horizon, mdp.initial_state)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpFile<T> {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    kernel: Vec<Vec<Vec<T>>>,
}

/// Deterministic reward `r(s,a)` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable<T> {
    num_states: usize,
    num_actions: usize,
    values: Vec<T>,
}

impl<T: Scalar> RewardTable<T> {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, values: vec![T::zero(); num_states * num_actions] }
    }

    pub fn constant(num_states: usize, num_actions: usize, value: T) -> Self {
        Self { num_states, num_actions, values: vec![value; num_states * num_actions] }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(num_states * num_actions);
        for (s, row) in rows.into_iter().enumerate() {
            if row.len() != num_actions {
                return Err(Error::dims(format!("reward row {s} has {} entries, expected {num_actions}", row.len())));
            }
            for (a, r) in row.iter().enumerate() {
                if !(*r >= T::zero() && *r <= T::one()) {
                    return Err(Error::Config(format!("reward r({s},{a}) = {r} outside [0,1]")));
                }
            }
            values.extend(row);
        }
        Ok(Self { num_states, num_actions, values })
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.values.chunks(self.num_actions.max(1)).map(<[T]>::to_vec).collect()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> T {
        self.values[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: T) {
        self.values[s * self.num_actions + a] = value;
    }

    /// Reward at `(s,a)`, zero for states past the table (the absorbing state of an augmented kernel).
    #[inline]
    pub(crate) fn get_or_zero(&self, s: usize, a: usize) -> T {
        if s < self.num_states {
            self.get(s, a)
        } else {
            T::zero()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RewardFile { r: self.rows() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RewardFile<T> = serde_json::from_str(text)?;
        Self::from_rows(file.r)
    }
}

#[derive(Serialize, Deserialize)]
struct RewardFile<T> {
    r: Vec<Vec<T>>,
}

/// Nonstationary deterministic policy `a = pi_h(s)`; `h` is zero-based here.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DeterministicPolicy {
    horizon: usize,
    num_states: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn constant(horizon: usize, num_states: usize, action: usize) -> Self {
        Self { horizon, num_states, actions: vec![action; horizon * num_states] }
    }

    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let horizon = rows.len();
        let num_states = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_states) {
            return Err(Error::dims("policy rows have unequal lengths"));
        }
        Ok(Self { horizon, num_states, actions: rows.into_iter().flatten().collect() })
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.actions.chunks(self.num_states.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Action at zero-based step `h` in state `s`. States past the table (an absorbing state) play 0.
    #[inline]
    pub fn action(&self, h: usize, s: usize) -> usize {
        if s < self.num_states {
            self.actions[h * self.num_states + s]
        } else {
            0
        }
    }

    pub fn set(&mut self, h: usize, s: usize, action: usize) {
        self.actions[h * self.num_states + s] = action;
    }

    pub fn max_action(&self) -> Option<usize> {
        self.actions.iter().copied().max()
    }

    /// Drops states at index `num_states` and above.
    pub fn restrict(&self, num_states: usize) -> Self {
        if num_states >= self.num_states {
            return self.clone();
        }
        let rows = self.rows().into_iter().map(|r| r[..num_states].to_vec()).collect();
        Self::from_rows(rows).expect("rows of equal length")
    }

    pub(crate) fn check_against<T: Scalar>(&self, kernel: &Kernel<T>) -> Result<()> {
        let n = kernel.num_states();
        if self.num_states != n && self.num_states + 1 != n {
            return Err(Error::dims(format!("policy covers {} states, kernel has {n}", self.num_states)));
        }
        if let Some(a) = self.max_action() {
            if a >= kernel.num_actions() {
                return Err(Error::IndexOutOfRange(format!("policy action {a} with {} actions", kernel.num_actions())));
            }
        }
        Ok(())
    }
}

/// Uniform mixture over deterministic members; one member is drawn per episode.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MixturePolicy {
    members: Vec<DeterministicPolicy>,
}

impl MixturePolicy {
    pub fn new(members: Vec<DeterministicPolicy>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("mixture needs at least one member".into()))?;
        let (h, s) = (first.horizon(), first.num_states());
        if members.iter().any(|m| m.horizon() != h || m.num_states() != s) {
            return Err(Error::dims("mixture members disagree on horizon or state count"));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DeterministicPolicy] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.members[0].horizon()
    }

    pub fn num_states(&self) -> usize {
        self.members[0].num_states()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.members.len())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MixtureFile { k: self.members.len(), policies: self.members.iter().map(|m| m.rows()).collect() };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MixtureFile = serde_json::from_str(text)?;
        if file.k != file.policies.len() {
            return Err(Error::Config(format!("mixture declares K={} but lists {}", file.k, file.policies.len())));
        }
        let members = file.policies.into_iter().map(DeterministicPolicy::from_rows).collect::<Result<_>>()?;
        Self::new(members)
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureFile {
    #[serde(rename = "K")]
    k: usize,
    policies: Vec<Vec<Vec<usize>>>,
}

pub fn policy_to_json(policy: &DeterministicPolicy) -> Result<String> {
    Ok(serde_json::to_string(&policy.rows())?)
}

pub fn policy_from_json(text: &str) -> Result<DeterministicPolicy> {
    DeterministicPolicy::from_rows(serde_json::from_str(text)?)
}

/// One step of an episode; `h` is zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Step {
    pub h: usize,
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

/// Rolls out `policy` for `horizon` steps from `start`.
pub fn rollout<T: Scalar, R: Rng + ?Sized>(
    kernel: &Kernel<T>,
    start: usize,
    horizon: usize,
    policy: &DeterministicPolicy,
    rng: &mut R,
) -> Vec<Step> {
    let mut steps = Vec::with_capacity(horizon);
    let mut s = start;
    for h in 0..horizon {
        let a = policy.action(h, s);
        let next = sample_index(kernel.row(s, a), rng);
        steps.push(Step { h, state: s, action: a, next_state: next });
        s = next;
    }
    steps
}

pub fn sample_episode<T: Scalar>(mdp: &TabularMdp<T>, policy: &DeterministicPolicy, seed: RngSeed) -> Result<Vec<Step>> {
    policy.check_against(&mdp.kernel)?;
    if policy.horizon() < mdp.horizon {
        return Err(Error::dims(format!("policy horizon {} < MDP horizon {}", policy.horizon(), mdp.horizon)));
    }
    let mut rng = seed.rng();
    Ok(rollout(&mdp.kernel, mdp.initial_state, mdp.horizon, policy, &mut rng))
}
