//! Simplified robotic sortation floor.
//!
//! Each step the joint action is the full chute assignment for that step.
//! A destination holding at least one chute sorts every package that arrives
//! for it (chutes have unbounded capacity); every other arrival goes to the
//! recirculation buffer and, with carry-over on, re-arrives next step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::induction::{sample_induction, InductionSample, MultinomialSpec};

/// Length of the per-agent observation vector.
pub const OBS_DIM: usize = 5;

/// Per-agent observation, every feature in `[0, 1]`:
/// agent index, free chutes, own chutes, elapsed time, own backlog (squashed).
pub type Observation = [f64; OBS_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_destinations: usize,
    /// Chute budget M.
    pub n_chutes: u32,
    pub episode_steps: usize,
    pub step_volume: u64,
    pub action_max: u32,
    pub action_penalty: f64,
    pub recirc_carryover: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl EnvConfig {
    /// 20 destinations, 10 chutes, 10 half-hour steps, 1200 packages per step,
    /// binary actions, recirculation-only reward.
    pub fn standard() -> Self {
        Self {
            n_destinations: 20,
            n_chutes: 10,
            episode_steps: 10,
            step_volume: 1200,
            action_max: 1,
            action_penalty: 0.0,
            recirc_carryover: true,
        }
    }

    /// Same floor with up to 10 chutes per destination and the -2 per chute
    /// allocation penalty.
    pub fn multi_chute() -> Self {
        Self { action_max: 10, action_penalty: 2.0, ..Self::standard() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "multi-chute" => Ok(Self::multi_chute()),
            other => Err(Error::InvalidConfig(format!("unknown environment preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_destinations == 0 {
            return Err(Error::InvalidConfig("n_destinations must be positive".into()));
        }
        if self.episode_steps == 0 {
            return Err(Error::InvalidConfig("episode_steps must be at least 1".into()));
        }
        if self.action_max == 0 {
            return Err(Error::InvalidConfig("action_max must be positive".into()));
        }
        if !(self.action_penalty >= 0.0 && self.action_penalty.is_finite()) {
            return Err(Error::InvalidConfig("action_penalty must be a nonnegative real".into()));
        }
        Ok(())
    }

    /// Number of action levels per agent, `A_max + 1`.
    pub fn action_levels(&self) -> usize {
        self.action_max as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarehouseState {
    pub t: usize,
    pub chutes_assigned: Vec<u32>,
    pub recirc_backlog: Vec<u64>,
    pub cum_recirc: u64,
    pub cum_sorted: u64,
}

impl WarehouseState {
    pub fn is_terminal(&self, config: &EnvConfig) -> bool {
        self.t >= config.episode_steps
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction {
    pub requests: Vec<u32>,
}

impl JointAction {
    pub fn new(requests: Vec<u32>) -> Self {
        Self { requests }
    }

    pub fn zeros(n: usize) -> Self {
        Self { requests: vec![0; n] }
    }

    pub fn total(&self) -> u64 {
        self.requests.iter().map(|&a| a as u64).sum()
    }

    pub fn check(&self, config: &EnvConfig) -> Result<()> {
        if self.requests.len() != config.n_destinations {
            return Err(Error::InfeasibleAction(format!(
                "{} requests for {} destinations",
                self.requests.len(),
                config.n_destinations
            )));
        }
        if let Some((i, a)) = self.requests.iter().enumerate().find(|(_, a)| **a > config.action_max) {
            return Err(Error::InfeasibleAction(format!(
                "agent {} requests {a} > A_max = {}",
                i + 1,
                config.action_max
            )));
        }
        if self.total() > config.n_chutes as u64 {
            return Err(Error::InfeasibleAction(format!(
                "{} chutes requested, budget is {}",
                self.total(),
                config.n_chutes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub action: JointAction,
    pub induction: InductionSample,
    pub arrivals: Vec<u64>,
    pub sorted: Vec<u64>,
    pub recirculated: Vec<u64>,
    pub rewards: Vec<f64>,
    pub next_state: WarehouseState,
}

impl StepOutcome {
    pub fn joint_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn trace_record(&self) -> TraceRecord {
        TraceRecord {
            t: self.next_state.t - 1,
            action: self.action.requests.clone(),
            induction: self.induction.counts.clone(),
            sorted: self.sorted.clone(),
            recirculated: self.recirculated.clone(),
            rewards: self.rewards.clone(),
        }
    }
}

/// One line of the JSON-lines trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub action: Vec<u32>,
    pub induction: Vec<u64>,
    pub sorted: Vec<u64>,
    pub recirculated: Vec<u64>,
    pub rewards: Vec<f64>,
}

/// Initial state: no chutes, empty buffers. The initial distribution is a
/// point mass, so no randomness is consumed.
pub fn reset(config: &EnvConfig) -> WarehouseState {
    WarehouseState {
        t: 0,
        chutes_assigned: vec![0; config.n_destinations],
        recirc_backlog: vec![0; config.n_destinations],
        cum_recirc: 0,
        cum_sorted: 0,
    }
}

pub fn step(
    state: &WarehouseState,
    action: &JointAction,
    induction: &InductionSample,
    config: &EnvConfig,
) -> Result<StepOutcome> {
    action.check(config)?;
    let n = config.n_destinations;
    if induction.counts.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: induction.counts.len() });
    }
    if state.is_terminal(config) {
        return Err(Error::EpisodeFinished(state.t));
    }

    let mut arrivals = Vec::with_capacity(n);
    let mut sorted = Vec::with_capacity(n);
    let mut recirculated = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let carried = if config.recirc_carryover { state.recirc_backlog[i] } else { 0 };
        let arrived = induction.counts[i] + carried;
        let (s, r) = if action.requests[i] > 0 { (arrived, 0) } else { (0, arrived) };
        arrivals.push(arrived);
        sorted.push(s);
        recirculated.push(r);
        rewards.push(agent_reward(r, action.requests[i], config.action_penalty));
    }

    let next_state = WarehouseState {
        t: state.t + 1,
        chutes_assigned: action.requests.clone(),
        recirc_backlog: if config.recirc_carryover { recirculated.clone() } else { vec![0; n] },
        cum_recirc: state.cum_recirc + recirculated.iter().sum::<u64>(),
        cum_sorted: state.cum_sorted + sorted.iter().sum::<u64>(),
    };
    Ok(StepOutcome {
        action: action.clone(),
        induction: induction.clone(),
        arrivals,
        sorted,
        recirculated,
        rewards,
        next_state,
    })
}

/// Per-agent reward: recirculated packages plus the allocation penalty.
pub fn agent_reward(recirculated: u64, request: u32, penalty: f64) -> f64 {
    -(recirculated as f64) - penalty * request as f64
}

/// Samples an induction from `law` and steps once.
pub fn sample_step<R: Rng + ?Sized>(
    state: &WarehouseState,
    action: &JointAction,
    law: &MultinomialSpec,
    config: &EnvConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let induction = sample_induction(law, rng);
    step(state, action, &induction, config)
}

/// Local observation of agent `agent` (1-based).
pub fn observe(state: &WarehouseState, agent: usize, config: &EnvConfig) -> Observation {
    assert!((1..=config.n_destinations).contains(&agent), "agent index {agent} out of range");
    let i = agent - 1;
    let n = config.n_destinations;
    let index = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let used: u64 = state.chutes_assigned.iter().map(|&c| c as u64).sum();
    let available = if config.n_chutes == 0 {
        0.0
    } else {
        (config.n_chutes as u64).saturating_sub(used) as f64 / config.n_chutes as f64
    };
    let own = (state.chutes_assigned[i] as f64 / config.action_max as f64).min(1.0);
    let time = state.t as f64 / config.episode_steps as f64;
    let scale = (config.step_volume as f64 / n as f64).max(1.0);
    let b = state.recirc_backlog[i] as f64;
    [index, available, own, time, b / (b + scale)]
}

pub fn observe_all(state: &WarehouseState, config: &EnvConfig) -> Vec<Observation> {
    (1..=config.n_destinations).map(|i| observe(state, i, config)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub recirc_rate: f64,
    pub throughput: u64,
    pub recirc_amount: u64,
}

/// Fraction of package passes that went to recirculation.
pub fn recirculation_rate(throughput: f64, recirc_amount: f64) -> f64 {
    let passes = throughput + recirc_amount;
    if passes > 0.0 {
        recirc_amount / passes
    } else {
        0.0
    }
}

pub fn episode_metrics(outcomes: &[StepOutcome]) -> Result<EpisodeMetrics> {
    if outcomes.is_empty() {
        return Err(Error::InvalidConfig("episode metrics need at least one step".into()));
    }
    let throughput: u64 = outcomes.iter().flat_map(|o| &o.sorted).sum();
    let recirc_amount: u64 = outcomes.iter().flat_map(|o| &o.recirculated).sum();
    Ok(EpisodeMetrics {
        recirc_rate: recirculation_rate(throughput as f64, recirc_amount as f64),
        throughput,
        recirc_amount,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EnvConfig {
        EnvConfig { n_destinations: 3, n_chutes: 2, episode_steps: 4, step_volume: 16, ..EnvConfig::standard() }
    }

    #[test]
    fn reset_is_empty() {
        let cfg = EnvConfig::default();
        let s = reset(&cfg);
        assert_eq!(s.t, 0);
        assert_eq!(s.chutes_assigned.iter().sum::<u32>(), 0);
        assert_eq!(s.cum_recirc, 0);
        assert_eq!(s, reset(&cfg));
    }

    #[test]
    fn hand_traced_step() {
        let cfg = tiny();
        let out = step(
            &reset(&cfg),
            &JointAction::new(vec![1, 0, 1]),
            &InductionSample::new(vec![5, 4, 7]),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.sorted, vec![5, 0, 7]);
        assert_eq!(out.recirculated, vec![0, 4, 0]);
        assert_eq!(out.rewards, vec![0.0, -4.0, 0.0]);
        assert_eq!(out.next_state.recirc_backlog, vec![0, 4, 0]);

        // the backlog re-arrives and is cleared once chuted
        let out2 = step(
            &out.next_state,
            &JointAction::new(vec![0, 1, 0]),
            &InductionSample::new(vec![1, 1, 1]),
            &cfg,
        )
        .unwrap();
        assert_eq!(out2.arrivals, vec![1, 5, 1]);
        assert_eq!(out2.sorted, vec![0, 5, 0]);
        assert_eq!(out2.next_state.recirc_backlog, vec![1, 0, 1]);
        assert_eq!(out2.next_state.cum_recirc, 4 + 2);
        assert_eq!(out2.next_state.cum_sorted, 12 + 5);
    }

    #[test]
    fn zero_everything_gives_zero_reward() {
        let cfg = tiny();
        let out = step(&reset(&cfg), &JointAction::zeros(3), &InductionSample::new(vec![0; 3]), &cfg).unwrap();
        assert!(out.rewards.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn allocation_penalty() {
        assert_eq!(agent_reward(3, 1, 2.0), -5.0);
        let cfg = EnvConfig { action_penalty: 2.0, ..tiny() };
        let s = WarehouseState { recirc_backlog: vec![3, 0, 0], ..reset(&cfg) };
        let out = step(&s, &JointAction::new(vec![0, 1, 0]), &InductionSample::new(vec![0; 3]), &cfg).unwrap();
        assert_eq!(out.rewards, vec![-3.0, -2.0, 0.0]);
    }

    #[test]
    fn budget_and_shape_errors() {
        let cfg = tiny();
        let s = reset(&cfg);
        let ind = InductionSample::new(vec![1, 1, 1]);
        let err = step(&s, &JointAction::new(vec![1, 1, 1]), &ind, &cfg).unwrap_err();
        assert!(err.to_string().starts_with("infeasible joint action"));
        assert!(step(&s, &JointAction::new(vec![2, 0, 0]), &ind, &cfg).is_err());
        assert!(step(&s, &JointAction::new(vec![1, 0]), &ind, &cfg).is_err());
        assert!(step(&s, &JointAction::zeros(3), &InductionSample::new(vec![1]), &cfg).is_err());
        let done = WarehouseState { t: cfg.episode_steps, ..s };
        assert!(matches!(step(&done, &JointAction::zeros(3), &ind, &cfg), Err(Error::EpisodeFinished(4))));
    }

    #[test]
    fn observation_features() {
        let cfg = EnvConfig::standard();
        let s = reset(&cfg);
        let o = observe_all(&s, &cfg);
        assert_eq!(o.len(), 20);
        assert_eq!(o[0][1], 1.0);
        assert_eq!(o[0][0], 0.0);
        assert_eq!(o[19][0], 1.0);
        for k in 1..OBS_DIM {
            assert_eq!(o[3][k], o[4][k]);
        }
        assert!(o.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        let mut busy = s.clone();
        busy.chutes_assigned[2] = 1;
        busy.recirc_backlog[5] = 60;
        busy.t = 5;
        let ob = observe_all(&busy, &cfg);
        assert_eq!(ob[2][2], 1.0);
        assert_eq!(ob[0][1], 0.9);
        assert_eq!(ob[5][4], 0.5);
        assert_eq!(ob[9][3], 0.5);
    }

    #[test]
    fn metrics_totals() {
        let cfg = tiny();
        let mut st = reset(&cfg);
        let mut outs = Vec::new();
        for _ in 0..cfg.episode_steps {
            let o = step(&st, &JointAction::zeros(3), &InductionSample::new(vec![2, 1, 1]), &cfg).unwrap();
            st = o.next_state.clone();
            outs.push(o);
        }
        let m = episode_metrics(&outs).unwrap();
        assert_eq!(m.recirc_rate, 1.0);
        assert_eq!(m.throughput, 0);

        let all_sorted = EnvConfig { n_chutes: 3, ..cfg.clone() };
        let o = step(&reset(&all_sorted), &JointAction::new(vec![1, 1, 1]), &InductionSample::new(vec![2, 1, 1]), &all_sorted)
            .unwrap();
        let m = episode_metrics(&[o]).unwrap();
        assert_eq!((m.recirc_rate, m.throughput, m.recirc_amount), (0.0, 4, 0));
        assert!(episode_metrics(&[]).is_err());

        let rate = recirculation_rate(11932.21, 67.79);
        assert!((rate - 0.0056).abs() < 5e-5, "{rate}");
    }
}
