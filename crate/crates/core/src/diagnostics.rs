//! Analysis-side uncertainty recursions and statistical checks of the high-probability events.
//!
//! Everything here may look at the true kernel (through the population sparsified model); none of
//! it is reachable from the learner's code path.

use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::designer::{bonus_bar, bonus_phi, BonusParams, TraceRow, UncertaintyTable};
use crate::dp::{occupancy_measures, policy_evaluation};
use crate::mdp::{DeterministicPolicy, Kernel, MixturePolicy, RewardTable, TabularMdp};
use crate::sparsify::{sparsify_reward, ModelKind, SparsifiedModel};
use crate::{Error, Result, Scalar};

/// Reference constant for the square-root term in the value-difference bound.
pub const VALUE_GAP_REFERENCE_CONSTANT: f64 = 2.0 * std::f64::consts::SQRT_2 * std::f64::consts::E;

/// `phi(m)`, with `m = 0` mapped to infinity so that the stage clip takes over.
fn phi_or_inf<T: Scalar>(m: u64, p: &BonusParams<T>) -> T {
    if m == 0 {
        T::infinity()
    } else {
        bonus_phi(T::from_count(m), p).unwrap_or(T::infinity())
    }
}

fn check_online_counts<T: Scalar>(model: &SparsifiedModel<T>, counts: &CountTable) -> Result<()> {
    let real = model.num_real_states();
    if !(counts.num_states() == real || counts.num_states() == real + 1) || counts.num_actions() != model.num_actions() {
        return Err(Error::dims(format!(
            "online counters are {}x{}, model has {real} real states and {} actions",
            counts.num_states(),
            counts.num_actions(),
            model.num_actions()
        )));
    }
    Ok(())
}

/// `X_h(s,a) = min{H-h+1, 9H phi(m) + (1+1/H) P~^T max_a' X_{h+1}}` with `X(s_dagger) = 0`.
pub fn population_uncertainty_x<T: Scalar>(
    model: &SparsifiedModel<T>,
    online: &CountTable,
    p: &BonusParams<T>,
) -> Result<UncertaintyTable<T>> {
    model.expect_kind(ModelKind::FineEstimated)?;
    check_online_counts(model, online)?;
    let kernel = model.kernel();
    let (ns, na, horizon) = (kernel.num_states(), kernel.num_actions(), p.horizon);
    let hf = T::from_usize(horizon).unwrap();
    let growth = T::one() + T::one() / hf;
    let nine_h = T::lit(9.0) * hf;
    let mut x = UncertaintyTable::zeros(horizon, ns, na);
    let mut next_max = vec![T::zero(); ns];
    for h in (0..horizon).rev() {
        let cap = T::from_usize(horizon - h).unwrap();
        for s in 0..model.num_real_states() {
            for a in 0..na {
                let raw = nine_h * phi_or_inf(online.n_sa(s, a), p) + growth * kernel.expect(s, a, &next_max);
                x.set(h, s, a, raw.min(cap));
            }
        }
        for (s, m) in next_max.iter_mut().enumerate() {
            *m = x.max_over_actions(h, s);
        }
    }
    Ok(x)
}

/// The policy- and reward-dependent tables `W`, `X^pi`, `Y^pi`.
#[derive(Clone, Debug)]
pub struct IntermediateTables<T> {
    pub w: UncertaintyTable<T>,
    pub x_pi: UncertaintyTable<T>,
    pub y_pi: UncertaintyTable<T>,
}

/// Builds `W`, `X^pi` and `Y^pi` on the fine-estimated model. The variance term uses the exact
/// value of `pi` under `(P~, r_dagger)`.
pub fn intermediate_uncertainties<T: Scalar>(
    model: &SparsifiedModel<T>,
    online: &CountTable,
    policy: &DeterministicPolicy,
    reward: &RewardTable<T>,
    p: &BonusParams<T>,
) -> Result<IntermediateTables<T>> {
    model.expect_kind(ModelKind::FineEstimated)?;
    check_online_counts(model, online)?;
    if reward.num_states() != model.num_real_states() || reward.num_actions() != model.num_actions() {
        return Err(Error::dims("reward does not match the model's real states"));
    }
    let kernel = model.kernel();
    let (ns, na, horizon) = (kernel.num_states(), kernel.num_actions(), p.horizon);
    if policy.horizon() < horizon {
        return Err(Error::dims("policy is shorter than the horizon"));
    }
    let values = policy_evaluation(kernel, &sparsify_reward(reward), policy)?;
    let hf = T::from_usize(horizon).unwrap();
    let growth = T::one() + T::one() / hf;
    let nine_h = T::lit(9.0) * hf;
    let var_scale = T::lit(8.0) / (hf * hf);

    let mut w = UncertaintyTable::zeros(horizon, ns, na);
    let mut x_pi = UncertaintyTable::zeros(horizon, ns, na);
    let mut y_pi = UncertaintyTable::zeros(horizon, ns, na);
    let mut w_next = vec![T::zero(); ns];
    let mut x_next = vec![T::zero(); ns];
    let mut y_next = vec![T::zero(); ns];
    let mut sq = vec![T::zero(); ns];
    for h in (0..horizon).rev() {
        let cap = T::from_usize(horizon - h).unwrap();
        let v_next = values.v_row(h + 1);
        for (q, v) in sq.iter_mut().zip(v_next) {
            *q = *v * *v;
        }
        for s in 0..model.num_real_states() {
            for a in 0..na {
                let m = online.n_sa(s, a);
                let mean = kernel.expect(s, a, v_next);
                let var = (kernel.expect(s, a, &sq) - mean * mean).max(T::zero());
                let spread = (var_scale * bonus_bar(m, p) * var).sqrt();
                let bonus = nine_h * phi_or_inf(m, p);
                w.set(h, s, a, (spread + bonus + growth * kernel.expect(s, a, &w_next)).min(cap));
                x_pi.set(h, s, a, (bonus + growth * kernel.expect(s, a, &x_next)).min(cap));
                y_pi.set(h, s, a, spread + growth * kernel.expect(s, a, &y_next));
            }
        }
        if h > 0 {
            for s in 0..ns {
                let a = policy.action(h, s);
                w_next[s] = w.get(h, s, a);
                x_next[s] = x_pi.get(h, s, a);
                y_next[s] = y_pi.get(h, s, a);
            }
        }
    }
    Ok(IntermediateTables { w, x_pi, y_pi })
}

/// Largest violation of `W <= X^pi + Y^pi` and of `X^pi <= X` (zero or negative means both hold).
pub fn intermediate_inequality_excess<T: Scalar>(tables: &IntermediateTables<T>, x: &UncertaintyTable<T>) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for (((w, xp), yp), xx) in tables.w.values().iter().zip(tables.x_pi.values()).zip(tables.y_pi.values()).zip(x.values()) {
        first = first.max((*w - (*xp + *yp)).as_f64());
        second = second.max((*xp - *xx).as_f64());
    }
    (first, second)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGapRow {
    pub lhs: f64,
    pub x_term: f64,
    /// `(lhs - x_term) / sqrt(x_term)`, zero when the linear term already dominates.
    pub excess_constant: f64,
    /// `lhs / sqrt(x_term)`.
    pub ratio: f64,
    pub within_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGapReport {
    pub rows: Vec<ValueGapRow>,
    pub reference_constant: f64,
    pub fitted_constant: f64,
    pub max_ratio: f64,
    pub violations: usize,
}

/// Compares `|V(s1; P~, r, pi) - V(s1; P_dagger, r, pi)|` with `max_a X_1(s1,a)` for every pair.
pub fn check_value_gap_bound<T: Scalar>(
    fine: &SparsifiedModel<T>,
    population: &SparsifiedModel<T>,
    online: &CountTable,
    p: &BonusParams<T>,
    initial_state: usize,
    pairs: &[(DeterministicPolicy, RewardTable<T>)],
) -> Result<ValueGapReport> {
    population.expect_kind(ModelKind::Population)?;
    fine.check_same_edges(population)?;
    let x = population_uncertainty_x(fine, online, p)?;
    let x_term = x.max_over_actions(0, initial_state).as_f64();
    let root = x_term.sqrt();
    let mut rows = Vec::with_capacity(pairs.len());
    for (policy, reward) in pairs {
        let r = sparsify_reward(reward);
        let v_fine = policy_evaluation(fine.kernel(), &r, policy)?.v(0, initial_state);
        let v_pop = policy_evaluation(population.kernel(), &r, policy)?.v(0, initial_state);
        let lhs = (v_fine - v_pop).abs().as_f64();
        let (excess_constant, ratio) =
            if root > 0.0 { (((lhs - x_term) / root).max(0.0), lhs / root) } else { (0.0, 0.0) };
        let within_reference = lhs <= x_term + VALUE_GAP_REFERENCE_CONSTANT * root + 1e-12;
        rows.push(ValueGapRow { lhs, x_term, excess_constant, ratio, within_reference });
    }
    Ok(ValueGapReport {
        fitted_constant: rows.iter().map(|r| r.excess_constant).fold(0.0, f64::max),
        max_ratio: rows.iter().map(|r| r.ratio).fold(0.0, f64::max),
        violations: rows.iter().filter(|r| !r.within_reference).count(),
        reference_constant: VALUE_GAP_REFERENCE_CONSTANT,
        rows,
    })
}

/// `max_a X_1(s1,a) * K / sum_k max_a U_1^k(s1,a)`: the constant that would make the
/// design-phase bound on `X` tight for this run.
pub fn fitted_design_constant(x_term: f64, trace: &[TraceRow]) -> Option<f64> {
    let total: f64 = trace.iter().map(|r| r.max_u1).sum();
    (total > 0.0).then(|| x_term * trace.len() as f64 / total)
}

/// `(1-1/H) P^ <= P_dagger <= (1+1/H) P^` on every retained edge.
pub fn check_multiplicative_accuracy<T: Scalar>(
    population: &SparsifiedModel<T>,
    empirical: &SparsifiedModel<T>,
    horizon: usize,
) -> Result<bool> {
    population.expect_kind(ModelKind::Population)?;
    empirical.expect_kind(ModelKind::Empirical)?;
    population.check_same_edges(empirical)?;
    let inv = T::one() / T::from_usize(horizon).unwrap();
    Ok(population.known_edges().iter().all(|[s, a, n]| {
        let truth = population.kernel().prob(s, a, n);
        let est = empirical.kernel().prob(s, a, n);
        (T::one() - inv) * est <= truth && truth <= (T::one() + inv) * est
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitationReport {
    pub cells_checked: usize,
    pub violations: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl VisitationReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `d_dagger / 4 <= d^ <= 3 d_dagger` on real states for every policy; cells where both
/// occupancies vanish are skipped.
pub fn check_visitation_ratio<T: Scalar>(
    population: &SparsifiedModel<T>,
    empirical: &SparsifiedModel<T>,
    initial_state: usize,
    policies: &[DeterministicPolicy],
) -> Result<VisitationReport> {
    population.check_same_edges(empirical)?;
    let real = population.num_real_states();
    let na = population.num_actions();
    let mut report = VisitationReport { cells_checked: 0, violations: 0, min_ratio: f64::INFINITY, max_ratio: 0.0 };
    for policy in policies {
        let truth = occupancy_measures(population.kernel(), initial_state, policy)?;
        let est = occupancy_measures(empirical.kernel(), initial_state, policy)?;
        for h in 0..policy.horizon() {
            for s in 0..real {
                for a in 0..na {
                    let (d, e) = (truth.get(h, s, a).as_f64(), est.get(h, s, a).as_f64());
                    if d == 0.0 && e == 0.0 {
                        continue;
                    }
                    report.cells_checked += 1;
                    let ratio = if d > 0.0 { e / d } else { f64::INFINITY };
                    report.min_ratio = report.min_ratio.min(ratio);
                    report.max_ratio = report.max_ratio.max(ratio);
                    if !(0.25 * d <= e && e <= 3.0 * d) {
                        report.violations += 1;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// `KL(p || q)` with `0 log 0 = 0`; infinite when `p > 0 = q`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    let mut total = T::zero();
    for (pi, qi) in p.iter().zip(q) {
        if *pi > T::zero() {
            if *qi <= T::zero() {
                return T::infinity();
            }
            total += *pi * (*pi / *qi).ln();
        }
    }
    total.max(T::zero())
}

/// `(1/m) [ln(6|S||A|/delta) + |S| ln(e (1 + m/|S|))]`.
pub fn kl_event_bound<T: Scalar>(m: u64, num_states: usize, num_actions: usize, delta: T) -> T {
    let mf = T::from_count(m);
    let s = T::from_usize(num_states).unwrap();
    let a = T::from_usize(num_actions).unwrap();
    ((T::lit(6.0) * s * a / delta).ln() + s * (T::one() + (T::one() + mf / s).ln())) / mf
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub holds: bool,
    pub pairs_checked: usize,
    /// Largest `KL / bound` over the checked pairs.
    pub worst_ratio: f64,
}

/// The KL event between the fine-estimated and population rows, over pairs with `m(s,a) >= 1`.
pub fn check_event_kl<T: Scalar>(
    fine: &SparsifiedModel<T>,
    population: &SparsifiedModel<T>,
    online: &CountTable,
    delta: T,
) -> Result<KlReport> {
    fine.expect_kind(ModelKind::FineEstimated)?;
    population.expect_kind(ModelKind::Population)?;
    fine.check_same_edges(population)?;
    check_online_counts(fine, online)?;
    let (real, na) = (fine.num_real_states(), fine.num_actions());
    let mut report = KlReport { holds: true, pairs_checked: 0, worst_ratio: 0.0 };
    for s in 0..real {
        for a in 0..na {
            let m = online.n_sa(s, a);
            if m == 0 {
                continue;
            }
            let kl = kl_divergence(fine.kernel().row(s, a), population.kernel().row(s, a));
            let bound = kl_event_bound(m, real, na, delta);
            report.pairs_checked += 1;
            report.worst_ratio = report.worst_ratio.max((kl / bound).as_f64());
            if !(kl <= bound) {
                report.holds = false;
            }
        }
    }
    Ok(report)
}

/// Bernstein-type event on the plain empirical kernel:
/// `|P^ - P| <= sqrt(2 P^ L / N) + 14 L / (3 N)` with `L = ln(12 |S|^2 |A| / delta)`.
pub fn check_event_p<T: Scalar>(mdp: &TabularMdp<T>, offline: &CountTable, delta: T) -> Result<bool> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    if offline.num_states() != ns || offline.num_actions() != na {
        return Err(Error::dims("offline counts do not match the MDP"));
    }
    let sf = T::from_usize(ns).unwrap();
    let log_term = (T::lit(12.0) * sf * sf * T::from_usize(na).unwrap() / delta).ln();
    for s in 0..ns {
        for a in 0..na {
            let n = offline.n_sa(s, a);
            if n == 0 {
                continue;
            }
            let nf = T::from_count(n);
            for next in 0..ns {
                let est = T::from_count(offline.n_sas(s, a, next)) / nf;
                let bound = (T::lit(2.0) * est * log_term / nf).sqrt() + T::lit(14.0) * log_term / (T::lit(3.0) * nf);
                if (est - mdp.kernel.prob(s, a, next)).abs() > bound {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// `(1/K) sum_k sum_h d_{pi^k,h}(s,a)` on `kernel`, flattened as `s * |A| + a`.
pub fn mixture_occupancy<T: Scalar>(kernel: &Kernel<T>, initial_state: usize, mixture: &MixturePolicy) -> Result<Vec<T>> {
    let mut total = vec![T::zero(); kernel.num_states() * kernel.num_actions()];
    for member in mixture.members() {
        let d = occupancy_measures(kernel, initial_state, member)?.summed_over_stages();
        for (t, v) in total.iter_mut().zip(d) {
            *t += v;
        }
    }
    let k = T::from_usize(mixture.len()).unwrap();
    total.iter_mut().for_each(|t| *t /= k);
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub replicate: usize,
    pub statistic: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from("replicate,statistic,bound,pass\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.replicate, r.statistic, r.bound, r.pass));
    }
    out
}
