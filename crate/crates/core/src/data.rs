//! Offline datasets of i.i.d. transitions, count tables and coverage coefficients.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::occupancy_measures;
use crate::hash::sha256_hex;
use crate::mdp::{DeterministicPolicy, Step, TabularMdp};
use crate::rng::{sample_index, RngSeed};
use crate::{Error, Result, Scalar};

/// Sampling distribution `mu(s,a)` over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggingDistribution<T> {
    num_states: usize,
    num_actions: usize,
    mu: Vec<T>,
}

impl<T: Scalar> LoggingDistribution<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) || num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidDistribution("logging table must be a nonempty rectangle".into()));
        }
        let mu: Vec<T> = rows.into_iter().flatten().collect();
        if mu.iter().any(|p| !(*p >= T::zero())) {
            return Err(Error::InvalidDistribution("negative or NaN mass".into()));
        }
        let total: f64 = mu.iter().map(|p| p.as_f64()).sum();
        if (total - 1.0).abs() > T::ROW_TOL {
            return Err(Error::InvalidDistribution(format!("mass sums to {total}")));
        }
        Ok(Self { num_states, num_actions, mu })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = T::one() / T::from_usize(num_states * num_actions).unwrap();
        Self { num_states, num_actions, mu: vec![p; num_states * num_actions] }
    }

    /// Uniform over pairs whose state is reachable from the initial state within the horizon.
    pub fn uniform_over_reachable(mdp: &TabularMdp<T>) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mut reached = vec![false; ns];
        reached[mdp.initial_state] = true;
        let mut frontier = vec![mdp.initial_state];
        for _ in 1..mdp.horizon {
            let mut next = Vec::new();
            for &s in &frontier {
                for a in 0..na {
                    for (j, p) in mdp.kernel.row(s, a).iter().enumerate() {
                        if *p > T::zero() && !reached[j] {
                            reached[j] = true;
                            next.push(j);
                        }
                    }
                }
            }
            frontier = next;
        }
        let count = reached.iter().filter(|r| **r).count() * na;
        let p = T::one() / T::from_usize(count).unwrap();
        let mu = (0..ns).flat_map(|s| vec![if reached[s] { p } else { T::zero() }; na]).collect();
        Self { num_states: ns, num_actions: na, mu }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> T {
        self.mu[s * self.num_actions + a]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.mu
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.mu.chunks(self.num_actions).map(<[T]>::to_vec).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.rows()).unwrap_or_default().as_bytes())
    }
}

/// How logging distributions are specified in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuSpec {
    Uniform,
    UniformOverReachable,
    Table(Vec<Vec<f64>>),
}

impl MuSpec {
    pub fn resolve<T: Scalar>(&self, mdp: &TabularMdp<T>) -> Result<LoggingDistribution<T>> {
        let mu = match self {
            MuSpec::Uniform => LoggingDistribution::uniform(mdp.num_states(), mdp.num_actions()),
            MuSpec::UniformOverReachable => LoggingDistribution::uniform_over_reachable(mdp),
            MuSpec::Table(rows) => LoggingDistribution::from_rows(
                rows.iter().map(|r| r.iter().map(|x| T::lit(*x)).collect()).collect(),
            )?,
        };
        if mu.num_states() != mdp.num_states() || mu.num_actions() != mdp.num_actions() {
            return Err(Error::dims("logging distribution does not match the MDP"));
        }
        Ok(mu)
    }
}

/// Whether `(s,a)` pairs are drawn i.i.d. from `mu` or allocated as `round(N mu(s,a))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Allocation {
    #[default]
    Iid,
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionTriple {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

impl From<Step> for TransitionTriple {
    fn from(st: Step) -> Self {
        Self { s: st.state, a: st.action, s_next: st.next_state }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub mdp_hash: String,
    pub policy_hash: String,
    pub seed: RngSeed,
    pub n: usize,
    pub allocation: Allocation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OfflineDataset {
    pub triples: Vec<TransitionTriple>,
    pub provenance: Provenance,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Line-delimited `s a s_next` records.
    pub fn to_triples_text(&self) -> String {
        triples_to_text(&self.triples)
    }

    pub fn header_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.provenance)?)
    }
}

pub fn triples_to_text(triples: &[TransitionTriple]) -> String {
    use fmt::Write;
    let mut out = String::with_capacity(triples.len() * 8);
    for t in triples {
        let _ = writeln!(out, "{} {} {}", t.s, t.a, t.s_next);
    }
    out
}

pub fn parse_triples(text: &str, path: &str) -> Result<Vec<TransitionTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let parse = |f: &str| {
            f.parse::<usize>().map_err(|e| Error::Parse { path: path.into(), line: i + 1, msg: e.to_string() })
        };
        if fields.len() != 3 {
            return Err(Error::Parse { path: path.into(), line: i + 1, msg: format!("expected 3 fields, got {}", fields.len()) });
        }
        out.push(TransitionTriple { s: parse(fields[0])?, a: parse(fields[1])?, s_next: parse(fields[2])? });
    }
    Ok(out)
}

/// Draws `n` transitions: `(s,a)` from `mu`, then `s' ~ P(.|s,a)`.
pub fn generate_offline_dataset<T: Scalar>(
    mdp: &TabularMdp<T>,
    mu: &LoggingDistribution<T>,
    n: usize,
    seed: RngSeed,
) -> Result<OfflineDataset> {
    generate_offline_dataset_with(mdp, mu, n, seed, Allocation::Iid)
}

pub fn generate_offline_dataset_with<T: Scalar>(
    mdp: &TabularMdp<T>,
    mu: &LoggingDistribution<T>,
    n: usize,
    seed: RngSeed,
    allocation: Allocation,
) -> Result<OfflineDataset> {
    if mu.num_states() != mdp.num_states() || mu.num_actions() != mdp.num_actions() {
        return Err(Error::InvalidDistribution("logging distribution does not match the MDP".into()));
    }
    let na = mdp.num_actions();
    let mut rng = seed.rng();
    let pairs: Vec<usize> = match allocation {
        Allocation::Iid => (0..n).map(|_| sample_index(mu.as_slice(), &mut rng)).collect(),
        Allocation::Deterministic => allocate(mu.as_slice(), n),
    };
    let triples = pairs
        .into_iter()
        .map(|idx| {
            let (s, a) = (idx / na, idx % na);
            TransitionTriple { s, a, s_next: sample_index(mdp.kernel.row(s, a), &mut rng) }
        })
        .collect();
    let provenance = Provenance {
        source: "offline".into(),
        mdp_hash: sha256_hex(mdp.to_json()?.as_bytes()),
        policy_hash: mu.hash(),
        seed,
        n,
        allocation,
    };
    Ok(OfflineDataset { triples, provenance })
}

/// Largest-remainder rounding of `n * mu`, emitted pair by pair.
fn allocate<T: Scalar>(mu: &[T], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = mu.iter().map(|p| p.as_f64() * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..mu.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.partial_cmp(&ri).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if mu[i] > T::zero() {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect()
}

/// `N(s,a)` and `N(s,a,s')`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CountTable {
    num_states: usize,
    num_actions: usize,
    n_sa: Vec<u64>,
    n_sas: Vec<u64>,
}

impl CountTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            n_sa: vec![0; num_states * num_actions],
            n_sas: vec![0; num_states * num_actions * num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn n_sa(&self, s: usize, a: usize) -> u64 {
        self.n_sa[s * self.num_actions + a]
    }

    #[inline]
    pub fn n_sas(&self, s: usize, a: usize, next: usize) -> u64 {
        self.n_sas[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn n_sas_row(&self, s: usize, a: usize) -> &[u64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.n_sas[start..start + self.num_states]
    }

    pub fn total(&self) -> u64 {
        self.n_sa.iter().sum()
    }

    pub fn record(&mut self, s: usize, a: usize, next: usize) -> Result<()> {
        if s >= self.num_states || next >= self.num_states || a >= self.num_actions {
            return Err(Error::IndexOutOfRange(format!(
                "triple ({s},{a},{next}) outside {}x{}",
                self.num_states, self.num_actions
            )));
        }
        self.n_sa[s * self.num_actions + a] += 1;
        self.n_sas[(s * self.num_actions + a) * self.num_states + next] += 1;
        Ok(())
    }

    pub fn is_consistent(&self) -> bool {
        (0..self.num_states).all(|s| {
            (0..self.num_actions).all(|a| self.n_sas_row(s, a).iter().sum::<u64>() == self.n_sa(s, a))
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CountFile {
            n_sa: self.n_sa.chunks(self.num_actions).map(<[u64]>::to_vec).collect(),
            n_sas: (0..self.num_states)
                .map(|s| (0..self.num_actions).map(|a| self.n_sas_row(s, a).to_vec()).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CountFile = serde_json::from_str(text)?;
        let ns = file.n_sas.len();
        let na = file.n_sas.first().map_or(0, Vec::len);
        let mut table = Self::zeros(ns, na);
        for (s, per_a) in file.n_sas.iter().enumerate() {
            for (a, row) in per_a.iter().enumerate() {
                if row.len() != ns || per_a.len() != na {
                    return Err(Error::dims("ragged n_sas table"));
                }
                for (j, c) in row.iter().enumerate() {
                    table.n_sas[(s * na + a) * ns + j] = *c;
                }
                table.n_sa[s * na + a] = row.iter().sum();
            }
        }
        let declared: Vec<u64> = file.n_sa.into_iter().flatten().collect();
        if declared != table.n_sa {
            return Err(Error::Config("n_sa disagrees with the row sums of n_sas".into()));
        }
        Ok(table)
    }
}

#[derive(Serialize, Deserialize)]
struct CountFile {
    n_sa: Vec<Vec<u64>>,
    n_sas: Vec<Vec<Vec<u64>>>,
}

pub fn count_triples(triples: &[TransitionTriple], num_states: usize, num_actions: usize) -> Result<CountTable> {
    let mut table = CountTable::zeros(num_states, num_actions);
    for t in triples {
        table.record(t.s, t.a, t.s_next)?;
    }
    Ok(table)
}

pub fn merge_counts(a: &CountTable, b: &CountTable) -> Result<CountTable> {
    if a.num_states != b.num_states || a.num_actions != b.num_actions {
        return Err(Error::dims(format!(
            "cannot merge {}x{} with {}x{}",
            a.num_states, a.num_actions, b.num_states, b.num_actions
        )));
    }
    Ok(CountTable {
        num_states: a.num_states,
        num_actions: a.num_actions,
        n_sa: a.n_sa.iter().zip(&b.n_sa).map(|(x, y)| x + y).collect(),
        n_sas: a.n_sas.iter().zip(&b.n_sas).map(|(x, y)| x + y).collect(),
    })
}

/// A coverage coefficient that may be unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coefficient<T> {
    Finite(T),
    Infinite,
}

impl<T: Scalar> Coefficient<T> {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Coefficient::Infinite)
    }

    pub fn finite(&self) -> Option<T> {
        match self {
            Coefficient::Finite(x) => Some(*x),
            Coefficient::Infinite => None,
        }
    }
}

impl<T: Scalar> fmt::Display for Coefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Finite(x) => write!(f, "{x}"),
            Coefficient::Infinite => f.write_str("inf"),
        }
    }
}

impl<T: Scalar> Serialize for Coefficient<T> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Coefficient::Finite(x) => x.serialize(serializer),
            Coefficient::Infinite => serializer.serialize_str("inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Concentrability<T: Scalar> {
    pub c_star: Coefficient<T>,
    pub c_dagger: Coefficient<T>,
}

/// `C* = max d_pi/mu` and `C_dagger = sum d_pi/mu` over pairs visited by `pi`, where `d_pi` is
/// the stage-averaged occupancy on the true kernel.
pub fn concentrability<T: Scalar>(
    mdp: &TabularMdp<T>,
    mu: &LoggingDistribution<T>,
    policy: &DeterministicPolicy,
) -> Result<Concentrability<T>> {
    let d = occupancy_measures(&mdp.kernel, mdp.initial_state, policy)?.averaged_over_stages();
    let mut c_star = T::zero();
    let mut c_dagger = T::zero();
    for (dp, m) in d.iter().zip(mu.as_slice()) {
        if *dp > T::zero() {
            if *m <= T::zero() {
                return Ok(Concentrability { c_star: Coefficient::Infinite, c_dagger: Coefficient::Infinite });
            }
            let ratio = *dp / *m;
            c_star = c_star.max(ratio);
            c_dagger += ratio;
        }
    }
    Ok(Concentrability { c_star: Coefficient::Finite(c_star), c_dagger: Coefficient::Finite(c_dagger) })
}

/// Draws `(s, a)` pairs from a caller-held generator; used by replicate loops that share one stream.
pub fn draw_pair<T: Scalar, R: Rng + ?Sized>(mu: &LoggingDistribution<T>, rng: &mut R) -> (usize, usize) {
    let idx = sample_index(mu.as_slice(), rng);
    (idx / mu.num_actions, idx % mu.num_actions)
}
