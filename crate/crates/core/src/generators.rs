//! Seeded instance generators used as fixtures and experiment inputs.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{DeterministicPolicy, Kernel, RewardTable, TabularMdp};
use crate::rng::{Phase, RngSeed};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Number of successor states with positive mass per row; `None` means all.
    #[serde(default)]
    pub support: Option<usize>,
    /// Added to every raw draw before normalizing; larger values flatten the rows.
    #[serde(default)]
    pub floor: f64,
    #[serde(default)]
    pub initial_state: usize,
}

impl RandomMdpSpec {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, seed: u64) -> Self {
        Self { num_states, num_actions, horizon, seed, support: None, floor: 0.0, initial_state: 0 }
    }
}

/// Rows are normalized strictly positive uniform draws over a random support.
pub fn random_mdp<T: Scalar>(spec: &RandomMdpSpec) -> TabularMdp<T> {
    let (ns, na) = (spec.num_states.max(1), spec.num_actions.max(1));
    let support = spec.support.unwrap_or(ns).clamp(1, ns);
    let mut rng = RngSeed::derive(spec.seed, Phase::Generator, 0).rng();
    let mut kernel = Kernel::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let chosen: Vec<usize> = if support == ns { (0..ns).collect() } else { sample(&mut rng, ns, support).into_vec() };
            let draws: Vec<f64> = chosen.iter().map(|_| 1.0 - rng.gen::<f64>() + spec.floor).collect();
            let total: f64 = draws.iter().sum();
            let row = kernel.row_mut(s, a);
            for (&j, d) in chosen.iter().zip(&draws) {
                row[j] = T::lit(d / total);
            }
        }
    }
    TabularMdp { kernel, horizon: spec.horizon.max(1), initial_state: spec.initial_state.min(ns - 1) }
}

/// Uniform `[0,1]` rewards.
pub fn random_reward<T: Scalar>(num_states: usize, num_actions: usize, seed: u64) -> RewardTable<T> {
    let mut rng = RngSeed::derive(seed, Phase::Reward, 0).rng();
    let mut r = RewardTable::zeros(num_states, num_actions);
    for s in 0..num_states {
        for a in 0..num_actions {
            r.set(s, a, T::lit(rng.gen::<f64>()));
        }
    }
    r
}

/// Uniformly random deterministic policy.
pub fn random_policy(horizon: usize, num_states: usize, num_actions: usize, seed: u64) -> DeterministicPolicy {
    let mut rng = RngSeed::derive(seed, Phase::Generator, 1).rng();
    let mut policy = DeterministicPolicy::constant(horizon, num_states, 0);
    for h in 0..horizon {
        for s in 0..num_states {
            policy.set(h, s, rng.gen_range(0..num_actions.max(1)));
        }
    }
    policy
}

pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub slip: f64,
    pub horizon: usize,
    pub seed: u64,
    /// Start cell; drawn from the seed when absent.
    #[serde(default)]
    pub initial_state: Option<usize>,
}

/// Four-action gridworld, state `y * width + x`. The intended move succeeds with probability
/// `1 - slip`; the slip mass is split evenly over the other three moves. Moves into a wall stay put.
pub fn gridworld<T: Scalar>(spec: &GridworldSpec) -> TabularMdp<T> {
    let (w, ht) = (spec.width.max(1), spec.height.max(1));
    let ns = w * ht;
    let slip = spec.slip.clamp(0.0, 1.0);
    let target = |s: usize, dir: usize| -> usize {
        let (x, y) = (s % w, s / w);
        let (nx, ny) = match dir {
            0 => (x, y.saturating_sub(1)),
            1 => (x, (y + 1).min(ht - 1)),
            2 => (x.saturating_sub(1), y),
            _ => ((x + 1).min(w - 1), y),
        };
        ny * w + nx
    };
    let mut kernel = Kernel::zeros(ns, 4);
    for s in 0..ns {
        for a in 0..4 {
            let mut row = vec![0.0f64; ns];
            for dir in 0..4 {
                row[target(s, dir)] += if dir == a { 1.0 - slip } else { slip / 3.0 };
            }
            for (dst, p) in kernel.row_mut(s, a).iter_mut().zip(row) {
                *dst = T::lit(p);
            }
        }
    }
    let initial_state = match spec.initial_state {
        Some(s) => s.min(ns - 1),
        None => RngSeed::derive(spec.seed, Phase::Generator, 0).rng().gen_range(0..ns),
    };
    TabularMdp { kernel, horizon: spec.horizon.max(1), initial_state }
}
