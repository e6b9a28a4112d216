//! Sparsified transition models.
//!
//! Every edge `(s,a,s')` whose offline count reaches the threshold is *known*; transition mass on
//! unknown edges is rerouted to an extra absorbing state with zero reward, stored at index `|S|`.
//! The three models differ only in where the known-edge probabilities come from: the true kernel
//! (population), the offline counts (empirical) or the online counts (fine-estimated).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::mdp::{Kernel, RewardTable, TabularMdp};
use crate::{Error, Result, Scalar};

/// Rule for the known-edge threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiRule {
    /// `ceil(6 H^2 ln(12 H |S|^2 |A| / delta))`.
    #[default]
    Standard,
    /// `ceil(6 H^2 ln(12 |S|^2 |A| / delta))`, without the horizon inside the logarithm.
    NoHorizonInLog,
    Fixed(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifierConfig {
    pub phi: u64,
    pub delta: f64,
    pub horizon: usize,
}

impl SparsifierConfig {
    pub fn new(rule: PhiRule, horizon: usize, num_states: usize, num_actions: usize, delta: f64) -> Result<Self> {
        let phi = compute_phi_with(rule, horizon, num_states, num_actions, delta)?;
        Ok(Self { phi, delta, horizon })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::DeltaOutOfRange(delta))
    }
}

/// Known-edge threshold `ceil(6 H^2 ln(12 H |S|^2 |A| / delta))`, at least 1.
pub fn compute_phi(horizon: usize, num_states: usize, num_actions: usize, delta: f64) -> Result<u64> {
    compute_phi_with(PhiRule::Standard, horizon, num_states, num_actions, delta)
}

pub fn compute_phi_with(rule: PhiRule, horizon: usize, num_states: usize, num_actions: usize, delta: f64) -> Result<u64> {
    let (h, s, a) = (horizon as f64, num_states as f64, num_actions as f64);
    let log_arg = match rule {
        PhiRule::Fixed(phi) => return Ok(phi.max(1)),
        PhiRule::Standard => 12.0 * h * s * s * a,
        PhiRule::NoHorizonInLog => 12.0 * s * s * a,
    };
    check_delta(delta)?;
    let raw = 6.0 * h * h * (log_arg / delta).ln();
    Ok((raw.ceil() as u64).max(1))
}

/// Edges `(s,a,s')` over the real states with `N(s,a,s') >= phi`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KnownEdges {
    num_states: usize,
    num_actions: usize,
    phi: u64,
    mask: Vec<bool>,
}

impl KnownEdges {
    pub fn empty(num_states: usize, num_actions: usize, phi: u64) -> Self {
        Self { num_states, num_actions, phi, mask: vec![false; num_states * num_actions * num_states] }
    }

    pub fn full(num_states: usize, num_actions: usize, phi: u64) -> Self {
        Self { num_states, num_actions, phi, mask: vec![true; num_states * num_actions * num_states] }
    }

    pub fn from_list(num_states: usize, num_actions: usize, phi: u64, edges: &[[usize; 3]]) -> Result<Self> {
        let mut out = Self::empty(num_states, num_actions, phi);
        for &[s, a, n] in edges {
            if s >= num_states || a >= num_actions || n >= num_states {
                return Err(Error::IndexOutOfRange(format!("edge ({s},{a},{n})")));
            }
            out.mask[(s * num_actions + a) * num_states + n] = true;
        }
        Ok(out)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn phi(&self) -> u64 {
        self.phi
    }

    #[inline]
    pub fn contains(&self, s: usize, a: usize, next: usize) -> bool {
        self.mask[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let (ns, na) = (self.num_states, self.num_actions);
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(move |(i, _)| [i / (na * ns), (i / ns) % na, i % ns])
    }

    pub fn is_subset_of(&self, other: &KnownEdges) -> bool {
        self.mask.len() == other.mask.len() && self.mask.iter().zip(&other.mask).all(|(a, b)| !*a || *b)
    }

    fn same_edges(&self, other: &KnownEdges) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions && self.mask == other.mask
    }
}

pub fn known_edge_set(counts: &CountTable, phi: u64) -> KnownEdges {
    let (ns, na) = (counts.num_states(), counts.num_actions());
    let mut edges = KnownEdges::empty(ns, na, phi);
    for s in 0..ns {
        for a in 0..na {
            for (n, c) in counts.n_sas_row(s, a).iter().enumerate() {
                edges.mask[(s * na + a) * ns + n] = *c >= phi;
            }
        }
    }
    edges
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Population,
    Empirical,
    FineEstimated,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Population => "population",
            ModelKind::Empirical => "empirical",
            ModelKind::FineEstimated => "fine-estimated",
        })
    }
}

/// Kernel over `|S| + 1` states whose last state absorbs.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsifiedModel<T> {
    kind: ModelKind,
    kernel: Kernel<T>,
    edges: KnownEdges,
}

impl<T: Scalar> SparsifiedModel<T> {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn kernel(&self) -> &Kernel<T> {
        &self.kernel
    }

    pub fn known_edges(&self) -> &KnownEdges {
        &self.edges
    }

    #[cfg(test)]
    pub(crate) fn kernel_mut_for_tests(&mut self) -> &mut Kernel<T> {
        &mut self.kernel
    }

    pub fn phi(&self) -> u64 {
        self.edges.phi
    }

    pub fn num_real_states(&self) -> usize {
        self.edges.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.edges.num_actions
    }

    /// Index of the absorbing state.
    pub fn absorbing(&self) -> usize {
        self.edges.num_states
    }

    pub fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(Error::WrongModelKind { expected, found: self.kind })
        }
    }

    pub fn check_same_edges(&self, other: &SparsifiedModel<T>) -> Result<()> {
        if self.edges.same_edges(&other.edges) {
            Ok(())
        } else {
            Err(Error::EdgeSetMismatch)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            kind: self.kind,
            phi: self.phi(),
            kernel: self.kernel.to_nested(),
            known_edges: self.edges.iter().collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile<T> = serde_json::from_str(text)?;
        let kernel = Kernel::from_nested(file.kernel)?;
        if kernel.num_states() < 2 {
            return Err(Error::dims("sparsified kernel needs at least one real state plus the absorbing state"));
        }
        let ns = kernel.num_states() - 1;
        let edges = KnownEdges::from_list(ns, kernel.num_actions(), file.phi, &file.known_edges)?;
        let model = Self { kind: file.kind, kernel, edges };
        model.check_invariants()?;
        Ok(model)
    }

    /// Row sums, support inside the known edges and the absorbing row.
    pub fn check_invariants(&self) -> Result<()> {
        let violations = self.kernel.row_violations();
        if !violations.is_empty() {
            return Err(Error::InvalidMdp(format!("{violations:?}")));
        }
        let ns = self.num_real_states();
        for s in 0..ns {
            for a in 0..self.num_actions() {
                for n in 0..ns {
                    if self.kernel.prob(s, a, n) > T::zero() && !self.edges.contains(s, a, n) {
                        return Err(Error::InvalidMdp(format!("mass on unknown edge ({s},{a},{n})")));
                    }
                }
            }
        }
        for a in 0..self.num_actions() {
            if self.kernel.prob(ns, a, ns) != T::one() {
                return Err(Error::InvalidMdp("absorbing row is not a point mass".into()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile<T> {
    kind: ModelKind,
    phi: u64,
    kernel: Vec<Vec<Vec<T>>>,
    known_edges: Vec<[usize; 3]>,
}

/// Builds a model whose known-edge probabilities come from `known(s, a, s')`; if the known
/// probabilities of a row are all unavailable (`None`), the row is a point mass on the absorbing state.
fn build<T: Scalar>(
    kind: ModelKind,
    edges: &KnownEdges,
    mut known: impl FnMut(usize, usize) -> Option<Vec<T>>,
) -> SparsifiedModel<T> {
    let (ns, na) = (edges.num_states, edges.num_actions);
    let mut kernel = Kernel::zeros(ns + 1, na);
    for s in 0..ns {
        for a in 0..na {
            let row = kernel.row_mut(s, a);
            match known(s, a) {
                Some(probs) => {
                    // Summing the dropped mass (rather than taking 1 - kept) leaves the absorbing
                    // entry exactly zero when every successor is known.
                    let mut dropped = T::zero();
                    for (n, p) in probs.into_iter().enumerate() {
                        if edges.contains(s, a, n) {
                            row[n] = p;
                        } else {
                            dropped += p;
                        }
                    }
                    row[ns] = dropped;
                }
                None => row[ns] = T::one(),
            }
        }
    }
    for a in 0..na {
        kernel.row_mut(ns, a)[ns] = T::one();
    }
    SparsifiedModel { kind, kernel, edges: edges.clone() }
}

/// Sparsifies the true kernel.
pub fn sparsify_population<T: Scalar>(mdp: &TabularMdp<T>, edges: &KnownEdges) -> Result<SparsifiedModel<T>> {
    if edges.num_states != mdp.num_states() || edges.num_actions != mdp.num_actions() {
        return Err(Error::dims("edge set does not match the MDP"));
    }
    Ok(build(ModelKind::Population, edges, |s, a| Some(mdp.kernel.row(s, a).to_vec())))
}

fn frequencies<T: Scalar>(counts: &CountTable, s: usize, a: usize) -> Option<Vec<T>> {
    let total = counts.n_sa(s, a);
    (total > 0).then(|| {
        let t = T::from_count(total);
        counts.n_sas_row(s, a).iter().map(|c| T::from_count(*c) / t).collect()
    })
}

/// Known-edge probabilities `N(s,a,s')/N(s,a)` from the offline counts.
pub fn sparsify_empirical<T: Scalar>(counts: &CountTable, edges: &KnownEdges) -> Result<SparsifiedModel<T>> {
    if edges.num_states != counts.num_states() || edges.num_actions != counts.num_actions() {
        return Err(Error::dims("edge set does not match the count table"));
    }
    Ok(build(ModelKind::Empirical, edges, |s, a| frequencies(counts, s, a)))
}

/// Known-edge probabilities `m(s,a,s')/m(s,a)` from online counts, on edges decided offline.
pub fn sparsify_fine_estimated<T: Scalar>(
    online_counts: &CountTable,
    offline_edges: &KnownEdges,
) -> Result<SparsifiedModel<T>> {
    if offline_edges.num_states != online_counts.num_states() || offline_edges.num_actions != online_counts.num_actions() {
        return Err(Error::dims("edge set does not match the online count table"));
    }
    Ok(build(ModelKind::FineEstimated, offline_edges, |s, a| frequencies(online_counts, s, a)))
}

/// Appends a zero row for the absorbing state.
pub fn sparsify_reward<T: Scalar>(reward: &RewardTable<T>) -> RewardTable<T> {
    let mut rows = reward.rows();
    rows.push(vec![T::zero(); reward.num_actions()]);
    RewardTable::from_rows(rows).expect("rows copied from a valid reward")
}

/// Drops the absorbing-state row.
pub fn strip_absorbing<T: Scalar>(reward: &RewardTable<T>) -> RewardTable<T> {
    let mut rows = reward.rows();
    rows.pop();
    RewardTable::from_rows(rows).expect("rows copied from a valid reward")
}
