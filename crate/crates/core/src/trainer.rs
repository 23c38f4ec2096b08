//! Robust and baseline multi-agent DQN training, and greedy evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{argmin_group, CbNet};
use crate::budget::{random_feasible_action, solve_budget_argmax};
use crate::env::{recirculation_rate, JointAction, Observation, TraceRecord};
use crate::error::{Error, Result};
use crate::induction::GroupId;
use crate::schedule::EpsilonSchedule;
use crate::seed::{streams, Seeder};
use crate::sim::Simulator;
use crate::valuenet::{
    target_sync, td_target, vdn_loss_gradient, Checkpoint, Optimizer, QNet, ReplayBuffer, Transition,
};

pub const CHECKPOINT_KIND: &str = "q";

/// How the training group `g'` is chosen at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorstCaseMode {
    /// Argmin of the frozen bandit predictor.
    Cb,
    /// Argmin of probe-estimated expected rewards over all groups.
    Exhaustive,
    /// Uniform over groups.
    Random,
    /// Always the given group (plain training on one distribution).
    Fixed(GroupId),
}

impl fmt::Display for WorstCaseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cb => f.write_str("cb"),
            Self::Exhaustive => f.write_str("exhaustive"),
            Self::Random => f.write_str("random"),
            Self::Fixed(g) => write!(f, "fixed-{g}"),
        }
    }
}

impl FromStr for WorstCaseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cb" => Ok(Self::Cb),
            "exhaustive" => Ok(Self::Exhaustive),
            "random" => Ok(Self::Random),
            other => {
                let num = other
                    .strip_prefix("fixed-")
                    .or_else(|| other.strip_prefix("fixed:"))
                    .and_then(|n| n.parse::<usize>().ok())
                    .and_then(GroupId::from_number);
                num.map(Self::Fixed).ok_or_else(|| {
                    Error::InvalidConfig(format!("unknown mode `{other}` (cb, exhaustive, random, fixed-<g>)"))
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon: EpsilonSchedule,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Gradient steps between target-network copies.
    pub target_sync_every: u64,
    pub hidden: Vec<usize>,
    pub mode: WorstCaseMode,
    /// Single-step simulations per group in exhaustive mode.
    pub n_probe: usize,
    /// Multiplies rewards before regression; `None` uses one over the step volume.
    pub reward_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            learning_rate: 1e-3,
            gamma: 0.95,
            epsilon: EpsilonSchedule::default(),
            batch_size: 64,
            replay_capacity: 50_000,
            target_sync_every: 100,
            hidden: vec![64, 64],
            mode: WorstCaseMode::Random,
            n_probe: 8,
            reward_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_groups: usize) -> Result<()> {
        self.epsilon.validate()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_every == 0 {
            return Err(Error::InvalidConfig("batch_size, replay_capacity and target_sync_every must be positive".into()));
        }
        if matches!(self.reward_scale, Some(s) if !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("reward_scale must be positive".into()));
        }
        match self.mode {
            WorstCaseMode::Fixed(g) if g.index() >= n_groups => {
                Err(Error::InvalidConfig(format!("fixed group {g} outside 1..={n_groups}")))
            }
            WorstCaseMode::Exhaustive if self.n_probe == 0 => Err(Error::InvalidConfig("n_probe must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// One row of the per-episode training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub mode: String,
    /// Undiscounted episode return per agent.
    pub mean_return: f64,
    pub recirc_rate: f64,
    pub epsilon: f64,
    pub wall_clock_s: f64,
    pub cpu_s: f64,
}

/// Per-step callback payload.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub episode: usize,
    pub t: usize,
    pub group: GroupId,
    pub epsilon: f64,
    pub joint_reward: f64,
    pub record: Option<&'a TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: QNet,
    pub trace: Vec<TraceRow>,
    pub gradient_steps: u64,
    pub group_counts: Vec<u64>,
    pub reward_scale: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        q_checkpoint(&self.net, self.reward_scale)
    }
}

pub fn q_checkpoint(net: &QNet, reward_scale: f64) -> Checkpoint {
    Checkpoint::new(CHECKPOINT_KIND, net.mlp(), net.levels(), reward_scale)
}

pub fn q_from_checkpoint(ck: &Checkpoint) -> Result<QNet> {
    ck.expect_kind(CHECKPOINT_KIND)?;
    QNet::from_mlp(ck.network()?)
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Chooses the group under which the step is executed.
#[allow(clippy::too_many_arguments)]
pub fn select_worst_group<S: Simulator, R: Rng + ?Sized>(
    mode: WorstCaseMode,
    cb: Option<&CbNet>,
    sim: &S,
    state: &S::State,
    obs: &[Observation],
    action: &JointAction,
    n_probe: usize,
    probe_rng: &mut R,
    group_rng: &mut R,
) -> Result<GroupId> {
    let m = sim.n_groups();
    if m == 0 {
        return Err(Error::InvalidConfig("group set is empty".into()));
    }
    match mode {
        WorstCaseMode::Fixed(g) => Ok(g),
        WorstCaseMode::Random => Ok(GroupId::from_index(group_rng.random_range(0..m))),
        WorstCaseMode::Cb => cb.ok_or(Error::MissingPredictor)?.worst_group(obs, action),
        WorstCaseMode::Exhaustive => {
            if !sim.supports_snapshot() {
                return Err(Error::NotClonable);
            }
            let estimates = (0..m)
                .map(|g| {
                    let g = GroupId::from_index(g);
                    let mut total = 0.0;
                    for _ in 0..n_probe {
                        total += sim.step(&state.clone(), action, g, probe_rng)?.joint_reward();
                    }
                    Ok(total / n_probe as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(argmin_group(&estimates))
        }
    }
}

/// The robust target: reward observed under the worst-case group plus the
/// discounted budgeted max of the target network.
pub fn dr_td_target(
    target: &QNet,
    worst_case_reward: f64,
    next_obs: &[Observation],
    terminal: bool,
    gamma: f64,
    budget: u32,
) -> f64 {
    td_target(target, worst_case_reward, next_obs, terminal, gamma, budget)
}

fn batch_targets(
    target: &QNet,
    batch: &[&Transition],
    reward_scale: f64,
    gamma: f64,
    budget: u32,
) -> Vec<f64> {
    let live: Vec<&[Observation]> = batch.iter().filter(|t| !t.terminal).map(|t| t.next_obs.as_slice()).collect();
    let tables = target.action_values_many(&live);
    let mut boot = tables.iter().map(|tab| solve_budget_argmax(tab, budget).value);
    batch
        .iter()
        .map(|t| {
            let r = t.joint_reward() * reward_scale;
            if t.terminal {
                r
            } else {
                r + gamma * boot.next().expect("one table per live transition")
            }
        })
        .collect()
}

/// DRMARL training for every worst-case mode. Streams:
/// `policy-init`, `env`, `exploration`, `replay-sampling`, `group-draws`, `probe`.
pub fn train_drmarl<S: Simulator>(
    sim: &S,
    cfg: &TrainConfig,
    cb: Option<&CbNet>,
    seeder: &Seeder,
    mut on_step: Option<&mut dyn FnMut(StepEvent<'_>)>,
) -> Result<TrainOutcome> {
    let m = sim.n_groups();
    cfg.validate(m)?;
    if m == 0 {
        return Err(Error::InvalidConfig("group set is empty".into()));
    }
    if cfg.mode == WorstCaseMode::Cb {
        let net = cb.ok_or(Error::MissingPredictor)?;
        if net.n_groups() != m || net.n_agents() != sim.n_agents() {
            return Err(Error::InvalidConfig(format!(
                "predictor covers {} groups and {} agents, environment has {m} and {}",
                net.n_groups(),
                net.n_agents(),
                sim.n_agents()
            )));
        }
    }
    if cfg.mode == WorstCaseMode::Exhaustive && !sim.supports_snapshot() {
        return Err(Error::NotClonable);
    }
    let reward_scale = cfg.reward_scale.unwrap_or(1.0 / sim.reward_unit());
    let budget = sim.budget();
    let mut init_rng = seeder.stream(streams::POLICY_INIT);
    let mut env_rng = seeder.stream(streams::ENV);
    let mut explore_rng = seeder.stream(streams::EXPLORE);
    let mut replay_rng = seeder.stream(streams::REPLAY);
    let mut group_rng = seeder.stream(streams::GROUPS);
    let mut probe_rng = seeder.stream(streams::PROBE);

    let mut net = QNet::new(sim.action_levels(), &cfg.hidden, &mut init_rng)?;
    let mut target = target_sync(&net);
    let mut opt = Optimizer::adam(cfg.learning_rate, net.mlp());
    let mut buffer: ReplayBuffer<Transition> = ReplayBuffer::new(cfg.replay_capacity)?;
    let total_steps = (cfg.episodes * sim.horizon()) as u64;
    let mut env_steps = 0u64;
    let mut gradient_steps = 0u64;
    let mut group_counts = vec![0u64; m];
    let mut trace = Vec::with_capacity(cfg.episodes);
    let wall0 = Instant::now();
    let cpu0 = thread_cpu_seconds();
    let mode_name = cfg.mode.to_string();

    for episode in 0..cfg.episodes {
        let mut state = sim.reset();
        let mut ret = 0.0;
        let (mut sorted, mut recirc) = (0u64, 0u64);
        let mut eps = cfg.epsilon.value(env_steps, total_steps);
        while !sim.is_terminal(&state) {
            let obs = sim.observe(&state);
            eps = cfg.epsilon.value(env_steps, total_steps);
            let action = if explore_rng.random::<f64>() < eps {
                random_feasible_action(sim.n_agents(), sim.action_max(), budget, &mut explore_rng)
            } else {
                net.greedy(&obs, budget).action
            };
            if action.total() > budget as u64 || action.requests.iter().any(|&a| a > sim.action_max()) {
                return Err(Error::InfeasibleAction(format!("{:?}", action.requests)));
            }
            let g = select_worst_group(
                cfg.mode,
                cb,
                sim,
                &state,
                &obs,
                &action,
                cfg.n_probe,
                &mut probe_rng,
                &mut group_rng,
            )?;
            group_counts[g.index()] += 1;
            let t = sim.time(&state);
            let out = sim.step(&state, &action, g, &mut env_rng)?;
            let joint = out.joint_reward();
            if let Some(cb) = on_step.as_mut() {
                cb(StepEvent { episode, t, group: g, epsilon: eps, joint_reward: joint, record: out.trace.as_ref() });
            }
            ret += joint;
            sorted += out.sorted;
            recirc += out.recirculated;
            let terminal = sim.is_terminal(&out.next_state);
            let next_obs = sim.observe(&out.next_state);
            buffer.push(Transition {
                obs,
                action,
                group: g,
                rewards: out.rewards,
                next_obs,
                terminal,
            });

            let batch = buffer.sample(cfg.batch_size, &mut replay_rng)?;
            let ys = batch_targets(&target, &batch, reward_scale, cfg.gamma, budget);
            let rows: Vec<_> = batch.iter().zip(&ys).map(|(t, &y)| (t.obs.as_slice(), &t.action, y)).collect();
            let mut grads = net.mlp().zero_gradients();
            vdn_loss_gradient(&net, &rows, &mut grads)?;
            opt.step(net.mlp_mut(), &grads);
            gradient_steps += 1;
            if gradient_steps.is_multiple_of(cfg.target_sync_every) {
                target = target_sync(&net);
            }
            state = out.next_state;
            env_steps += 1;
        }
        trace.push(TraceRow {
            episode,
            mode: mode_name.clone(),
            mean_return: ret / sim.n_agents() as f64,
            recirc_rate: recirculation_rate(sorted as f64, recirc as f64),
            epsilon: eps,
            wall_clock_s: wall0.elapsed().as_secs_f64(),
            cpu_s: thread_cpu_seconds() - cpu0,
        });
    }
    Ok(TrainOutcome { net, trace, gradient_steps, group_counts, reward_scale })
}

/// Baseline training on a single group.
pub fn train_marl<S: Simulator>(
    sim: &S,
    cfg: &TrainConfig,
    seeder: &Seeder,
    on_step: Option<&mut dyn FnMut(StepEvent<'_>)>,
) -> Result<TrainOutcome> {
    if !matches!(cfg.mode, WorstCaseMode::Fixed(_)) {
        return Err(Error::InvalidConfig("plain training needs mode fixed-<g>".into()));
    }
    train_drmarl(sim, cfg, None, seeder, on_step)
}

/// A deterministic joint-action rule.
pub trait Policy {
    fn act(&self, obs: &[Observation], budget: u32) -> JointAction;
}

impl Policy for QNet {
    fn act(&self, obs: &[Observation], budget: u32) -> JointAction {
        self.greedy(obs, budget).action
    }
}

/// Never assigns a chute.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&self, obs: &[Observation], _budget: u32) -> JointAction {
        JointAction::zeros(obs.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEvaluation {
    pub group: GroupId,
    pub trials: usize,
    pub recirc_rate: MeanStd,
    pub throughput: MeanStd,
    pub recirc_amount: MeanStd,
    pub episode_recirc_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy: String,
    pub groups: Vec<GroupEvaluation>,
    /// Mean over groups of the per-group means, with the spread across groups.
    pub recirc_rate: MeanStd,
    pub throughput: MeanStd,
    pub recirc_amount: MeanStd,
    pub wall_clock_s: f64,
}

impl EvaluationReport {
    pub fn all_episode_rates(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.episode_recirc_rates.iter().copied()).collect()
    }
}

/// Rolls out `policy` for `trials` episodes per group with the group held
/// fixed for the whole episode. Episode `k` of group `g` draws inductions
/// from `evaluation/g/k`, so every policy sees the same arrivals.
pub fn evaluate_policy<S: Simulator, P: Policy + ?Sized>(
    name: &str,
    policy: &P,
    sim: &S,
    trials: usize,
    seeder: &Seeder,
) -> Result<EvaluationReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one trial".into()));
    }
    let wall0 = Instant::now();
    let eval = seeder.child(streams::EVAL);
    let mut groups = Vec::with_capacity(sim.n_groups());
    for gi in 0..sim.n_groups() {
        let g = GroupId::from_index(gi);
        let (mut rates, mut thr, mut amt) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..trials {
            let mut rng = eval.child_index(gi as u64).child_index(k as u64).rng();
            let mut state = sim.reset();
            let (mut sorted, mut recirc) = (0u64, 0u64);
            while !sim.is_terminal(&state) {
                let action = policy.act(&sim.observe(&state), sim.budget());
                let out = sim.step(&state, &action, g, &mut rng)?;
                sorted += out.sorted;
                recirc += out.recirculated;
                state = out.next_state;
            }
            rates.push(recirculation_rate(sorted as f64, recirc as f64));
            thr.push(sorted as f64);
            amt.push(recirc as f64);
        }
        groups.push(GroupEvaluation {
            group: g,
            trials,
            recirc_rate: MeanStd::of(&rates),
            throughput: MeanStd::of(&thr),
            recirc_amount: MeanStd::of(&amt),
            episode_recirc_rates: rates,
        });
    }
    let across = |f: fn(&GroupEvaluation) -> f64| MeanStd::of(&groups.iter().map(f).collect::<Vec<_>>());
    Ok(EvaluationReport {
        policy: name.to_owned(),
        recirc_rate: across(|g| g.recirc_rate.mean),
        throughput: across(|g| g.throughput.mean),
        recirc_amount: across(|g| g.recirc_amount.mean),
        groups,
        wall_clock_s: wall0.elapsed().as_secs_f64(),
    })
}
