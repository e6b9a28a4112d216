//! Exact backward and forward dynamic programming on a transition kernel.
//!
//! Kernels may carry one extra trailing state (an absorbing state appended by sparsification).
//! Rewards and policies sized for the real states are then extended with zero reward and
//! action 0 at that state.

use crate::mdp::{DeterministicPolicy, Kernel, RewardTable};
use crate::scalar::argmax;
use crate::{Error, Result, Scalar};

/// `V_h(s)` for `h` in `0..=H` (with `V_H = 0`) and `Q_h(s,a)` for `h` in `0..H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable<T> {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    v: Vec<T>,
    q: Vec<T>,
}

impl<T: Scalar> ValueTable<T> {
    fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            v: vec![T::zero(); (horizon + 1) * num_states],
            q: vec![T::zero(); horizon * num_states * num_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    pub fn v(&self, h: usize, s: usize) -> T {
        self.v[h * self.num_states + s]
    }

    #[inline]
    pub fn q(&self, h: usize, s: usize, a: usize) -> T {
        self.q[(h * self.num_states + s) * self.num_actions + a]
    }

    /// The stage-`h` value vector over all kernel states.
    pub fn v_row(&self, h: usize) -> &[T] {
        &self.v[h * self.num_states..(h + 1) * self.num_states]
    }

    fn q_row_mut(&mut self, h: usize, s: usize) -> &mut [T] {
        let start = (h * self.num_states + s) * self.num_actions;
        &mut self.q[start..start + self.num_actions]
    }
}

/// `d_h(s,a)`: probability of visiting `(s,a)` at zero-based stage `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable<T> {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    d: Vec<T>,
}

impl<T: Scalar> OccupancyTable<T> {
    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> T {
        self.d[(h * self.num_states + s) * self.num_actions + a]
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

    pub fn stage_sum(&self, h: usize) -> T {
        let n = self.num_states * self.num_actions;
        self.d[h * n..(h + 1) * n].iter().copied().sum()
    }

    /// `sum_h d_h(s,a)` as an `[s][a]` table.
    pub fn summed_over_stages(&self) -> Vec<T> {
        let n = self.num_states * self.num_actions;
        let mut out = vec![T::zero(); n];
        for h in 0..self.horizon {
            for (o, d) in out.iter_mut().zip(&self.d[h * n..(h + 1) * n]) {
                *o += *d;
            }
        }
        out
    }

    /// `(1/H) sum_h d_h(s,a)`, the average visiting probability.
    pub fn averaged_over_stages(&self) -> Vec<T> {
        let h = T::from_usize(self.horizon).unwrap();
        self.summed_over_stages().into_iter().map(|x| x / h).collect()
    }
}

fn check_reward<T: Scalar>(kernel: &Kernel<T>, reward: &RewardTable<T>) -> Result<()> {
    let n = kernel.num_states();
    if reward.num_actions() != kernel.num_actions() {
        return Err(Error::dims(format!("reward has {} actions, kernel {}", reward.num_actions(), kernel.num_actions())));
    }
    if reward.num_states() != n && reward.num_states() + 1 != n {
        return Err(Error::dims(format!("reward covers {} states, kernel has {n}", reward.num_states())));
    }
    Ok(())
}

/// Exact backward evaluation of a deterministic policy over `policy.horizon()` steps.
pub fn policy_evaluation<T: Scalar>(
    kernel: &Kernel<T>,
    reward: &RewardTable<T>,
    policy: &DeterministicPolicy,
) -> Result<ValueTable<T>> {
    check_reward(kernel, reward)?;
    policy.check_against(kernel)?;
    let (horizon, ns, na) = (policy.horizon(), kernel.num_states(), kernel.num_actions());
    let mut table = ValueTable::zeros(horizon, ns, na);
    let mut next_v = vec![T::zero(); ns];
    for h in (0..horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                table.q_row_mut(h, s)[a] = reward.get_or_zero(s, a) + kernel.expect(s, a, &next_v);
            }
            let v = table.q(h, s, policy.action(h, s));
            table.v[h * ns + s] = v;
        }
        next_v.copy_from_slice(table.v_row(h));
    }
    Ok(table)
}

/// Bellman optimality recursion. Ties go to the smallest action; a trailing absorbing state
/// (kernel one state larger than the reward) stores action 0.
pub fn value_iteration_optimal<T: Scalar>(
    kernel: &Kernel<T>,
    reward: &RewardTable<T>,
    horizon: usize,
) -> Result<(DeterministicPolicy, ValueTable<T>)> {
    check_reward(kernel, reward)?;
    let (ns, na) = (kernel.num_states(), kernel.num_actions());
    let absorbing = (reward.num_states() + 1 == ns).then_some(ns - 1);
    let mut table = ValueTable::zeros(horizon, ns, na);
    let mut policy = DeterministicPolicy::constant(horizon, ns, 0);
    let mut next_v = vec![T::zero(); ns];
    for h in (0..horizon).rev() {
        for s in 0..ns {
            let q = table.q_row_mut(h, s);
            for (a, q_sa) in q.iter_mut().enumerate() {
                *q_sa = reward.get_or_zero(s, a) + kernel.expect(s, a, &next_v);
            }
            let best = if Some(s) == absorbing { 0 } else { argmax(q) };
            let v = q[best];
            policy.set(h, s, best);
            table.v[h * ns + s] = v;
        }
        next_v.copy_from_slice(table.v_row(h));
    }
    Ok((policy, table))
}

/// Forward recursion for the stage-wise state-action occupancy of `policy` started at `initial_state`.
pub fn occupancy_measures<T: Scalar>(
    kernel: &Kernel<T>,
    initial_state: usize,
    policy: &DeterministicPolicy,
) -> Result<OccupancyTable<T>> {
    policy.check_against(kernel)?;
    let (horizon, ns, na) = (policy.horizon(), kernel.num_states(), kernel.num_actions());
    if initial_state >= ns {
        return Err(Error::IndexOutOfRange(format!("initial state {initial_state} with {ns} states")));
    }
    let mut d = vec![T::zero(); horizon * ns * na];
    let idx = |h: usize, s: usize, a: usize| (h * ns + s) * na + a;
    if horizon > 0 {
        d[idx(0, initial_state, policy.action(0, initial_state))] = T::one();
    }
    let mut state_mass = vec![T::zero(); ns];
    for h in 0..horizon.saturating_sub(1) {
        state_mass.iter_mut().for_each(|m| *m = T::zero());
        for s in 0..ns {
            for a in 0..na {
                let w = d[idx(h, s, a)];
                if w > T::zero() {
                    for (m, p) in state_mass.iter_mut().zip(kernel.row(s, a)) {
                        *m += w * *p;
                    }
                }
            }
        }
        for (s, m) in state_mass.iter().enumerate() {
            d[idx(h + 1, s, policy.action(h + 1, s))] = *m;
        }
    }
    Ok(OccupancyTable { horizon, num_states: ns, num_actions: na, d })
}
