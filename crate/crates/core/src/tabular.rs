//! Exact tabular robust Bellman operators over a finite group family.
//!
//! With rewards `R_g[s][a]` and transitions `P[s][a][s']` (shared) or
//! `P_g[s][a][s']` (per group):
//!
//! ```text
//! T(Q)(s,a) = min_g R_g(s,a) + gamma * min_g sum_s' P_g(s'|s,a) max_a' Q(s',a')
//! U(Q)(s,a) = min_g { R_g(s,a) + gamma * sum_s' P_g(s'|s,a) max_a' Q(s',a') }
//! ```
//!
//! For shared transitions the two coincide and the continuation minimum is
//! trivial.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::induction::SIMPLEX_TOL;

/// `[s][a][s']`.
pub type TransitionTable = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transitions {
    Shared(TransitionTable),
    PerGroup(Vec<TransitionTable>),
}

/// JSON form: `{"gamma": .., "rewards": [g][s][a], "transitions": {"shared": [s][a][s']}}`
/// or `{"per_group": [g][s][a][s']}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDoc", into = "MdpDoc")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rewards: Vec<Vec<Vec<f64>>>,
    transitions: Transitions,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDoc {
    gamma: f64,
    rewards: Vec<Vec<Vec<f64>>>,
    transitions: Transitions,
}

impl TryFrom<MdpDoc> for TabularMdp {
    type Error = Error;

    fn try_from(d: MdpDoc) -> Result<Self> {
        TabularMdp::new(d.gamma, d.rewards, d.transitions)
    }
}

impl From<TabularMdp> for MdpDoc {
    fn from(m: TabularMdp) -> Self {
        MdpDoc { gamma: m.gamma, rewards: m.rewards, transitions: m.transitions }
    }
}

fn check_table(p: &TransitionTable, n_states: usize, n_actions: usize) -> Result<()> {
    if p.len() != n_states {
        return Err(Error::DimensionMismatch { expected: n_states, got: p.len() });
    }
    for (s, row) in p.iter().enumerate() {
        if row.len() != n_actions {
            return Err(Error::DimensionMismatch { expected: n_actions, got: row.len() });
        }
        for (a, dist) in row.iter().enumerate() {
            if dist.len() != n_states {
                return Err(Error::DimensionMismatch { expected: n_states, got: dist.len() });
            }
            let total: f64 = dist.iter().sum();
            if dist.iter().any(|&x| x.is_nan() || x < 0.0) || (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::NotOnSimplex(format!("P[{s}][{a}] sums to {total}")));
            }
        }
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(gamma: f64, rewards: Vec<Vec<Vec<f64>>>, transitions: Transitions) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        let m = rewards.len();
        if m == 0 {
            return Err(Error::InvalidConfig("at least one reward group is required".into()));
        }
        let n_states = rewards[0].len();
        let n_actions = rewards[0].first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidConfig("need at least one state and one action".into()));
        }
        for r in &rewards {
            if r.len() != n_states || r.iter().any(|row| row.len() != n_actions) {
                return Err(Error::InvalidConfig("reward tables have inconsistent shapes".into()));
            }
            if r.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("rewards must be finite".into()));
            }
        }
        match &transitions {
            Transitions::Shared(p) => check_table(p, n_states, n_actions)?,
            Transitions::PerGroup(ps) => {
                if ps.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: ps.len() });
                }
                for p in ps {
                    check_table(p, n_states, n_actions)?;
                }
            }
        }
        Ok(Self { n_states, n_actions, gamma, rewards, transitions })
    }

    /// Random instance: rewards uniform in `[-1, 1]`, transition rows from a
    /// flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        n_groups: usize,
        per_group: bool,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let rewards = (0..n_groups)
            .map(|_| (0..n_states).map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect())
            .collect();
        let table = |rng: &mut R| -> TransitionTable {
            (0..n_states).map(|_| (0..n_actions).map(|_| random_simplex_point(n_states, rng)).collect()).collect()
        };
        let transitions = if per_group {
            Transitions::PerGroup((0..n_groups).map(|_| table(rng)).collect())
        } else {
            Transitions::Shared(table(rng))
        };
        Self::new(gamma, rewards, transitions)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_groups(&self) -> usize {
        self.rewards.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, g: usize, s: usize, a: usize) -> f64 {
        self.rewards[g][s][a]
    }

    pub fn transitions(&self) -> &Transitions {
        &self.transitions
    }

    pub fn has_per_group_transitions(&self) -> bool {
        matches!(self.transitions, Transitions::PerGroup(_))
    }

    fn transition(&self, g: usize, s: usize, a: usize) -> &[f64] {
        match &self.transitions {
            Transitions::Shared(p) => &p[s][a],
            Transitions::PerGroup(ps) => &ps[g][s][a],
        }
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().flatten().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn group_rewards(&self, s: usize, a: usize) -> Vec<f64> {
        self.rewards.iter().map(|r| r[s][a]).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::InvalidConfig(format!("tabular MDP at {}: {}", e.path(), e.inner())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn random_simplex_point<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    // push rounding error into the largest entry so the row sums to one
    let drift = 1.0 - w.iter().sum::<f64>();
    let big = (0..k).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap_or(0);
    w[big] += drift;
    w
}

/// `values[s][a]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = (0..n_states).flat_map(|s| (0..n_actions).map(move |a| (s, a))).map(|(s, a)| f(s, a)).collect();
        Self { n_states, n_actions, values }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn state_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest maximizing action.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `min_g R_g` at one state-action pair.
pub fn worst_case_reward(group_rewards: &[f64]) -> Result<f64> {
    if group_rewards.is_empty() {
        return Err(Error::InvalidConfig("need at least one group".into()));
    }
    Ok(group_rewards.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Minimum of `sum_g q_g R_g` over the grid `{q : q_g = k_g / resolution}`
/// of the simplex plus `draws` flat-Dirichlet points.
pub fn simplex_min_oracle<R: Rng + ?Sized>(group_rewards: &[f64], resolution: usize, draws: usize, rng: &mut R) -> Result<f64> {
    let m = group_rewards.len();
    if m == 0 || m > 5 {
        return Err(Error::InvalidConfig(format!("simplex oracle supports 1..=5 groups, got {m}")));
    }
    if resolution == 0 {
        return Err(Error::InvalidConfig("grid resolution must be positive".into()));
    }
    let mut best = f64::INFINITY;
    let mut counts = vec![0usize; m];
    grid_walk(&mut counts, 0, resolution, &mut |c| {
        let v = c.iter().zip(group_rewards).map(|(&k, r)| k as f64 / resolution as f64 * r).sum::<f64>();
        best = best.min(v);
    });
    for _ in 0..draws {
        let q = random_simplex_point(m, rng);
        best = best.min(q.iter().zip(group_rewards).map(|(q, r)| q * r).sum());
    }
    Ok(best)
}

fn grid_walk(counts: &mut [usize], i: usize, left: usize, visit: &mut dyn FnMut(&[usize])) {
    if i + 1 == counts.len() {
        counts[i] = left;
        visit(counts);
        return;
    }
    for k in 0..=left {
        counts[i] = k;
        grid_walk(counts, i + 1, left - k, visit);
    }
}

fn continuation(mdp: &TabularMdp, v: &[f64], g: usize, s: usize, a: usize) -> f64 {
    mdp.transition(g, s, a).iter().zip(v).map(|(p, x)| p * x).sum()
}

fn state_values(q: &QTable) -> Vec<f64> {
    (0..q.n_states).map(|s| q.state_value(s)).collect()
}

fn check_q(mdp: &TabularMdp, q: &QTable) -> Result<()> {
    if q.n_states != mdp.n_states || q.n_actions != mdp.n_actions || q.values.len() != mdp.n_states * mdp.n_actions {
        return Err(Error::DimensionMismatch { expected: mdp.n_states * mdp.n_actions, got: q.values.len() });
    }
    Ok(())
}

/// The robust operator for reward-only distribution shift.
pub fn dr_bellman_apply(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    if mdp.has_per_group_transitions() {
        return Err(Error::PerGroupTransitions);
    }
    split_min_apply(mdp, q)
}

/// Reward minimum plus continuation minimum, taken independently.
pub fn split_min_apply(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    check_q(mdp, q)?;
    let v = state_values(q);
    let groups = if mdp.has_per_group_transitions() { mdp.n_groups() } else { 1 };
    Ok(QTable::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        let r = (0..mdp.n_groups()).map(|g| mdp.rewards[g][s][a]).fold(f64::INFINITY, f64::min);
        let c = (0..groups).map(|g| continuation(mdp, &v, g, s, a)).fold(f64::INFINITY, f64::min);
        r + mdp.gamma * c
    }))
}

/// Joint minimum over groups of reward plus continuation.
pub fn approx_bellman_apply(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    check_q(mdp, q)?;
    let v = state_values(q);
    Ok(QTable::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        (0..mdp.n_groups())
            .map(|g| mdp.rewards[g][s][a] + mdp.gamma * continuation(mdp, &v, g, s, a))
            .fold(f64::INFINITY, f64::min)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub q: QTable,
    pub iterations: usize,
    /// `||Q_{k+1} - Q_k||_inf` for every iteration.
    pub residuals: Vec<f64>,
}

impl FixedPoint {
    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Iterations sufficient for `tolerance` from a zero start, plus a margin.
pub fn default_max_iters(gamma: f64, tolerance: f64, max_abs_reward: f64) -> usize {
    if max_abs_reward == 0.0 {
        return 16;
    }
    let k = (tolerance * (1.0 - gamma) / max_abs_reward).ln() / gamma.ln();
    k.max(0.0).ceil() as usize + 16
}

/// Value iteration with the robust operator from `Q = 0`.
pub fn dr_value_iteration(mdp: &TabularMdp, tolerance: f64, max_iters: Option<usize>) -> Result<FixedPoint> {
    value_iteration_with(mdp, tolerance, max_iters, dr_bellman_apply)
}

pub fn value_iteration_with(
    mdp: &TabularMdp,
    tolerance: f64,
    max_iters: Option<usize>,
    op: fn(&TabularMdp, &QTable) -> Result<QTable>,
) -> Result<FixedPoint> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::InvalidConfig("tolerance must be positive".into()));
    }
    let limit = max_iters.unwrap_or_else(|| default_max_iters(mdp.gamma, tolerance, mdp.max_abs_reward()));
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut residuals = Vec::new();
    for it in 1..=limit {
        let next = op(mdp, &q)?;
        let res = next.sup_distance(&q);
        residuals.push(res);
        q = next;
        if res < tolerance {
            return Ok(FixedPoint { q, iterations: it, residuals });
        }
    }
    Err(Error::NotConverged { iterations: limit, residual: residuals.last().copied().unwrap_or(f64::NAN) })
}

/// Greedy policy, smallest action on ties.
pub fn greedy_policy(q: &QTable) -> Vec<usize> {
    (0..q.n_states).map(|s| q.greedy_action(s)).collect()
}

/// Q-values of `policy` under the robust reward with shared transitions,
/// reached by iterating the policy-evaluation backup.
pub fn evaluate_policy_values(mdp: &TabularMdp, policy: &[usize], tolerance: f64) -> Result<QTable> {
    if mdp.has_per_group_transitions() {
        return Err(Error::PerGroupTransitions);
    }
    let limit = default_max_iters(mdp.gamma, tolerance, mdp.max_abs_reward());
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    for _ in 0..limit {
        let v: Vec<f64> = (0..mdp.n_states).map(|s| q.get(s, policy[s])).collect();
        let next = QTable::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
            let r = (0..mdp.n_groups()).map(|g| mdp.rewards[g][s][a]).fold(f64::INFINITY, f64::min);
            r + mdp.gamma * continuation(mdp, &v, 0, s, a)
        });
        let res = next.sup_distance(&q);
        q = next;
        if res < tolerance {
            return Ok(q);
        }
    }
    Err(Error::NotConverged { iterations: limit, residual: f64::NAN })
}
