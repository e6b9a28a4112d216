//! Exhaustive search over deterministic nonstationary policies.

use crate::dp::policy_evaluation;
use crate::mdp::{DeterministicPolicy, Kernel, RewardTable};
use crate::{Error, Result, Scalar};

pub const ENUMERATION_LIMIT: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    pub policy: DeterministicPolicy,
    pub policies_checked: u64,
}

/// Evaluates every policy over the reward's states (an absorbing trailing kernel state plays 0)
/// and keeps the first one attaining the maximum `V_1(initial_state)`.
pub fn enumerate_policies_oracle<T: Scalar>(
    kernel: &Kernel<T>,
    reward: &RewardTable<T>,
    horizon: usize,
    initial_state: usize,
) -> Result<OracleResult<T>> {
    let states = reward.num_states();
    let actions = kernel.num_actions();
    let slots = horizon * states;
    let count = (actions as f64).powi(slots as i32);
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::InstanceTooLarge { policies: count, limit: ENUMERATION_LIMIT });
    }
    if initial_state >= kernel.num_states() {
        return Err(Error::IndexOutOfRange(format!("initial state {initial_state}")));
    }

    let mut digits = vec![0usize; slots];
    let mut best: Option<(T, Vec<usize>)> = None;
    let mut checked = 0u64;
    loop {
        let rows = digits.chunks(states.max(1)).map(<[usize]>::to_vec).collect();
        let policy = DeterministicPolicy::from_rows(rows)?;
        let value = policy_evaluation(kernel, reward, &policy)?.v(0, initial_state);
        checked += 1;
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, digits.clone()));
        }
        // odometer increment
        let mut i = 0;
        while i < slots {
            digits[i] += 1;
            if digits[i] < actions {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
        if i == slots {
            break;
        }
    }
    let (value, digits) = best.expect("at least one policy");
    let policy = DeterministicPolicy::from_rows(digits.chunks(states.max(1)).map(<[usize]>::to_vec).collect())?;
    Ok(OracleResult { value, policy, policies_checked: checked })
}
