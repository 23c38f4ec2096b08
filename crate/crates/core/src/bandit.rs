//! Contextual-bandit predictor of the worst-case group.
//!
//! The context is the joint `(state, action)` pair, the arms are the groups,
//! and one network with a head per group regresses the immediate joint
//! reward observed under that group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::random_feasible_action;
use crate::env::{JointAction, Observation, OBS_DIM};
use crate::error::{Error, Result};
use crate::induction::GroupId;
use crate::schedule::EpsilonSchedule;
use crate::seed::{streams, Seeder};
use crate::sim::Simulator;
use crate::valuenet::{BatchActivations, Checkpoint, Mlp, Optimizer, QNet, ReplayBuffer};

pub const CHECKPOINT_KIND: &str = "cb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbConfig {
    pub learning_rate: f64,
    pub episodes: usize,
    pub epsilon: EpsilonSchedule,
    pub batch_size: usize,
    pub capacity: usize,
    pub hidden: Vec<usize>,
    /// Multiplies rewards before regression; `None` uses one over the step volume.
    pub reward_scale: Option<f64>,
}

impl Default for CbConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            episodes: 100,
            epsilon: EpsilonSchedule::default(),
            batch_size: 64,
            capacity: 50_000,
            hidden: vec![64, 64],
            reward_scale: None,
        }
    }
}

impl CbConfig {
    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("cb learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.capacity == 0 {
            return Err(Error::InvalidConfig("cb batch_size and capacity must be positive".into()));
        }
        if matches!(self.reward_scale, Some(s) if !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("reward_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbTransition {
    pub obs: Vec<Observation>,
    pub action: JointAction,
    pub group: GroupId,
    pub reward: f64,
}

/// `Q_CB(s, a, .)`: one output per group, in scaled reward units.
#[derive(Debug, Clone, PartialEq)]
pub struct CbNet {
    mlp: Mlp,
    n_agents: usize,
    levels: usize,
    reward_scale: f64,
}

/// Index of the smallest prediction; the first one wins ties.
pub fn argmin_group(predictions: &[f64]) -> GroupId {
    let mut best = 0;
    for (g, &p) in predictions.iter().enumerate() {
        if p < predictions[best] {
            best = g;
        }
    }
    GroupId::from_index(best)
}

impl CbNet {
    pub fn new<R: Rng + ?Sized>(
        n_agents: usize,
        levels: usize,
        n_groups: usize,
        hidden: &[usize],
        reward_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![n_agents * (OBS_DIM + levels)];
        dims.extend_from_slice(hidden);
        dims.push(n_groups);
        Self::from_mlp(Mlp::new(&dims, rng)?, levels, reward_scale)
    }

    pub fn from_mlp(mlp: Mlp, levels: usize, reward_scale: f64) -> Result<Self> {
        let width = OBS_DIM + levels;
        if levels == 0 || !mlp.input_dim().is_multiple_of(width) {
            return Err(Error::DimensionMismatch { expected: width, got: mlp.input_dim() });
        }
        if !(reward_scale > 0.0 && reward_scale.is_finite()) {
            return Err(Error::InvalidConfig("reward_scale must be positive".into()));
        }
        Ok(Self { n_agents: mlp.input_dim() / width, mlp, levels, reward_scale })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn n_groups(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn reward_scale(&self) -> f64 {
        self.reward_scale
    }

    pub fn encode(&self, obs: &[Observation], action: &JointAction, buf: &mut Vec<f64>) -> Result<()> {
        if obs.len() != self.n_agents || action.requests.len() != self.n_agents {
            return Err(Error::DimensionMismatch { expected: self.n_agents, got: obs.len().min(action.requests.len()) });
        }
        for (o, &a) in obs.iter().zip(&action.requests) {
            if a as usize >= self.levels {
                return Err(Error::InfeasibleAction(format!("level {a} exceeds the predictor's range")));
            }
            buf.extend_from_slice(o);
            buf.extend((0..self.levels).map(|l| if l == a as usize { 1.0 } else { 0.0 }));
        }
        Ok(())
    }

    /// Raw network outputs (scaled units).
    pub fn predict_scaled(&self, obs: &[Observation], action: &JointAction) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.mlp.input_dim());
        self.encode(obs, action, &mut x)?;
        let mut acts = BatchActivations::default();
        self.mlp.forward_batch(&x, 1, &mut acts)?;
        Ok(acts.output().to_vec())
    }

    /// Predicted expected joint reward per group, in environment units.
    pub fn predict(&self, obs: &[Observation], action: &JointAction) -> Result<Vec<f64>> {
        Ok(self.predict_scaled(obs, action)?.into_iter().map(|v| v / self.reward_scale).collect())
    }

    pub fn worst_group(&self, obs: &[Observation], action: &JointAction) -> Result<GroupId> {
        Ok(argmin_group(&self.predict_scaled(obs, action)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, &self.mlp, self.levels, self.reward_scale)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        Self::from_mlp(ck.network()?, ck.action_levels, ck.reward_scale)
    }
}

/// One optimizer step on the mean squared error, where each transition only
/// drives the head of its own group. Returns the batch loss in scaled units.
pub fn cb_update(net: &mut CbNet, optimizer: &mut Optimizer, batch: &[&CbTransition]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let m = net.n_groups();
    let mut x = Vec::with_capacity(batch.len() * net.mlp.input_dim());
    for tr in batch {
        if tr.group.index() >= m {
            return Err(Error::InvalidConfig(format!("group {} outside the predictor's {m} heads", tr.group)));
        }
        net.encode(&tr.obs, &tr.action, &mut x)?;
    }
    let mut acts = BatchActivations::default();
    net.mlp.forward_batch(&x, batch.len(), &mut acts)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad_out = vec![0.0; batch.len() * m];
    let mut loss = 0.0;
    for (r, tr) in batch.iter().enumerate() {
        let g = tr.group.index();
        let err = acts.output()[r * m + g] - tr.reward * net.reward_scale;
        loss += err * err * scale;
        grad_out[r * m + g] = 2.0 * err * scale;
    }
    let mut grads = net.mlp.zero_gradients();
    net.mlp.backward_batch(&acts, &grad_out, &mut grads)?;
    optimizer.step(&mut net.mlp, &grads);
    Ok(loss)
}

/// Predictor-training group choice: uniform with probability `epsilon`,
/// otherwise the predicted worst case.
pub fn choose_group<R: Rng + ?Sized>(
    net: &CbNet,
    obs: &[Observation],
    action: &JointAction,
    epsilon: f64,
    rng: &mut R,
) -> Result<GroupId> {
    if rng.random::<f64>() < epsilon {
        Ok(GroupId::from_index(rng.random_range(0..net.n_groups())))
    } else {
        net.worst_group(obs, action)
    }
}

/// Behaviour policy used to visit contexts while the predictor trains.
#[derive(Debug, Clone)]
pub enum Exploration {
    /// Budgeted argmax of a fresh uniform value table each step.
    Random,
    /// Greedy budgeted argmax of a trained Q-network.
    Greedy(QNet),
}

impl Exploration {
    pub fn act<R: Rng + ?Sized>(&self, obs: &[Observation], action_max: u32, budget: u32, rng: &mut R) -> JointAction {
        match self {
            Self::Random => random_feasible_action(obs.len(), action_max, budget, rng),
            Self::Greedy(q) => q.greedy(obs, budget).action,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CbTraining {
    pub net: CbNet,
    /// Mean minibatch loss per episode (scaled units).
    pub losses: Vec<f64>,
    /// Times each group was chosen.
    pub group_counts: Vec<u64>,
    pub final_epsilon: f64,
}

/// Trains the worst-group predictor. Streams: `policy-init` for the initial
/// weights, `env` for inductions, `exploration` for actions and group
/// choices, `replay-sampling` for minibatches.
pub fn train_cb<S: Simulator>(sim: &S, explore: &Exploration, cfg: &CbConfig, seeder: &Seeder) -> Result<CbTraining> {
    cfg.validate()?;
    let m = sim.n_groups();
    if m == 0 {
        return Err(Error::InvalidConfig("group set is empty".into()));
    }
    if let Exploration::Greedy(q) = explore {
        if q.levels() != sim.action_levels() {
            return Err(Error::DimensionMismatch { expected: sim.action_levels(), got: q.levels() });
        }
    }
    let reward_scale = cfg.reward_scale.unwrap_or(1.0 / sim.reward_unit());
    let mut init_rng = seeder.stream(streams::POLICY_INIT);
    let mut env_rng = seeder.stream(streams::ENV);
    let mut explore_rng = seeder.stream(streams::EXPLORE);
    let mut replay_rng = seeder.stream(streams::REPLAY);

    let mut net = CbNet::new(sim.n_agents(), sim.action_levels(), m, &cfg.hidden, reward_scale, &mut init_rng)?;
    let mut opt = Optimizer::adam(cfg.learning_rate, &net.mlp);
    let mut buffer = ReplayBuffer::new(cfg.capacity)?;
    let total_steps = (cfg.episodes * sim.horizon()) as u64;
    let mut step_count = 0u64;
    let mut losses = Vec::with_capacity(cfg.episodes);
    let mut group_counts = vec![0u64; m];

    for _ in 0..cfg.episodes {
        let mut state = sim.reset();
        let mut episode_loss = 0.0;
        let mut updates = 0usize;
        while !sim.is_terminal(&state) {
            let obs = sim.observe(&state);
            let action = explore.act(&obs, sim.action_max(), sim.budget(), &mut explore_rng);
            let eps = cfg.epsilon.value(step_count, total_steps);
            let g = choose_group(&net, &obs, &action, eps, &mut explore_rng)?;
            group_counts[g.index()] += 1;
            let out = sim.step(&state, &action, g, &mut env_rng)?;
            buffer.push(CbTransition { obs, action, group: g, reward: out.joint_reward() });
            let batch = buffer.sample(cfg.batch_size, &mut replay_rng)?;
            episode_loss += cb_update(&mut net, &mut opt, &batch)?;
            updates += 1;
            state = out.next_state;
            step_count += 1;
        }
        losses.push(if updates > 0 { episode_loss / updates as f64 } else { 0.0 });
    }
    Ok(CbTraining { net, losses, group_counts, final_epsilon: cfg.epsilon.value(step_count, total_steps) })
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SyntheticGroupSim;
    use crate::valuenet::{Layer, Mlp};

    fn obs(n: usize) -> Vec<Observation> {
        vec![[0.5; OBS_DIM]; n]
    }

    #[test]
    fn argmin_contract() {
        assert_eq!(argmin_group(&[-1.0, -5.0, -3.0]).number(), 2);
        assert_eq!(argmin_group(&[2.0, 2.0, 2.0]).number(), 1);
        assert_eq!(argmin_group(&[7.0]).number(), 1);
        let shifted: Vec<f64> = [-1.0, -5.0, -3.0].iter().map(|v| v + 100.0).collect();
        assert_eq!(argmin_group(&shifted).number(), 2);
    }

    #[test]
    fn zero_net_predicts_zero() {
        let net = CbNet::from_mlp(Mlp::zeros(&[2 * (OBS_DIM + 2), 8, 3]).unwrap(), 2, 1.0).unwrap();
        assert_eq!(net.predict(&obs(2), &JointAction::zeros(2)).unwrap(), vec![0.0; 3]);
        assert_eq!(net.worst_group(&obs(2), &JointAction::zeros(2)).unwrap().number(), 1);
    }

    #[test]
    fn zero_error_leaves_sgd_params() {
        let mut rng = Seeder::new(1).rng();
        let mut net = CbNet::new(2, 2, 3, &[8], 1.0, &mut rng).unwrap();
        let a = JointAction::new(vec![1, 0]);
        let pred = net.predict(&obs(2), &a).unwrap();
        let tr = CbTransition { obs: obs(2), action: a, group: GroupId::from_index(1), reward: pred[1] };
        let before = net.mlp().clone();
        cb_update(&mut net, &mut Optimizer::sgd(0.1), &[&tr]).unwrap();
        assert_eq!(net.mlp(), &before);
    }

    #[test]
    fn other_heads_untouched() {
        let mut rng = Seeder::new(2).rng();
        let mut net = CbNet::new(2, 2, 4, &[8, 8], 1.0, &mut rng).unwrap();
        let tr = CbTransition { obs: obs(2), action: JointAction::new(vec![0, 1]), group: GroupId::from_index(2), reward: -3.0 };
        let before = net.mlp().layers().last().unwrap().clone();
        cb_update(&mut net, &mut Optimizer::sgd(0.05), &[&tr]).unwrap();
        let after = net.mlp().layers().last().unwrap();
        for g in [0, 1, 3] {
            assert_eq!(after.row(g), before.row(g));
            assert_eq!(after.biases[g], before.biases[g]);
        }
        assert_ne!(after.row(2), before.row(2));
    }

    #[test]
    fn linear_least_squares_step() {
        // single linear layer, one head: pred = w . x, loss = (pred - r)^2
        let width = OBS_DIM + 1;
        let mut l = Layer::zeros(width, 1);
        l.weights[0] = 0.5;
        let mut net = CbNet::from_mlp(Mlp::from_layers(vec![l]).unwrap(), 1, 1.0).unwrap();
        let o = vec![[2.0, 0.0, 0.0, 0.0, 0.0]];
        let tr = CbTransition { obs: o, action: JointAction::zeros(1), group: GroupId::from_index(0), reward: 3.0 };
        // pred = 1.0 ; dL/dw0 = 2 (1 - 3) 2 = -8 ; dL/dw_onehot = 2 (1 - 3) = -4
        let loss = cb_update(&mut net, &mut Optimizer::sgd(0.01), &[&tr]).unwrap();
        assert_eq!(loss, 4.0);
        let w = &net.mlp().layers()[0];
        assert!((w.weights[0] - 0.58).abs() < 1e-15);
        assert!((w.weights[OBS_DIM] - 0.04).abs() < 1e-15);
        assert!((w.biases[0] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn cb_loss_gradient_check() {
        let mut rng = Seeder::new(3).rng();
        let net = CbNet::new(3, 2, 3, &[6, 5], 0.5, &mut rng).unwrap();
        let trs: Vec<CbTransition> = (0..4)
            .map(|k| CbTransition {
                obs: (0..3).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect(),
                action: JointAction::new(vec![(k % 2) as u32, 1, 0]),
                group: GroupId::from_index(k % 3),
                reward: rng.random_range(-2.0..0.0),
            })
            .collect();
        let refs: Vec<&CbTransition> = trs.iter().collect();
        // SGD with lr h recovers the gradient as (before - after) / h
        let lr = 1.0;
        let mut probe = net.clone();
        cb_update(&mut probe, &mut Optimizer::sgd(lr), &refs).unwrap();
        let analytic: Vec<f64> =
            net.mlp().flat_params().iter().zip(probe.mlp().flat_params()).map(|(a, b)| (a - b) / lr).collect();
        let loss = |n: &CbNet| {
            refs.iter()
                .map(|t| {
                    let p = n.predict_scaled(&t.obs, &t.action).unwrap()[t.group.index()];
                    (p - t.reward * n.reward_scale()).powi(2)
                })
                .sum::<f64>()
                / refs.len() as f64
        };
        let base = net.mlp().flat_params();
        let h = 1e-5;
        for j in 0..base.len() {
            let mut up = net.clone();
            let mut p = base.clone();
            p[j] += h;
            up.mlp_mut().set_flat_params(&p).unwrap();
            let mut down = net.clone();
            p[j] -= 2.0 * h;
            down.mlp_mut().set_flat_params(&p).unwrap();
            let num = (loss(&up) - loss(&down)) / (2.0 * h);
            let rel = (analytic[j] - num).abs() / analytic[j].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {j}: {} vs {num}", analytic[j]);
        }
    }

    #[test]
    fn epsilon_one_is_uniform_and_zero_is_argmin() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = Seeder::new(4).rng();
        let net = CbNet::new(2, 2, 4, &[8], 1.0, &mut rng).unwrap();
        let a = JointAction::new(vec![1, 0]);
        let mut counts = [0f64; 4];
        for _ in 0..10_000 {
            counts[choose_group(&net, &obs(2), &a, 1.0, &mut rng).unwrap().index()] += 1.0;
        }
        let stat: f64 = counts.iter().map(|c| (c - 2500.0).powi(2) / 2500.0).sum();
        assert!(1.0 - ChiSquared::new(3.0).unwrap().cdf(stat) > 0.01, "{counts:?}");
        let worst = net.worst_group(&obs(2), &a).unwrap();
        for _ in 0..100 {
            assert_eq!(choose_group(&net, &obs(2), &a, 0.0, &mut rng).unwrap(), worst);
        }
    }

    #[test]
    fn zero_episodes_returns_initial_params() {
        let sim = SyntheticGroupSim::new(2, 3);
        let cfg = CbConfig { episodes: 0, hidden: vec![8], ..CbConfig::default() };
        let seeder = Seeder::new(5);
        let out = train_cb(&sim, &Exploration::Random, &cfg, &seeder).unwrap();
        let init = CbNet::new(2, 2, 3, &[8], 1.0, &mut seeder.stream(streams::POLICY_INIT)).unwrap();
        assert_eq!(out.net, init);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn learns_synthetic_group_means() {
        let sim = SyntheticGroupSim::new(2, 3);
        let cfg = CbConfig { episodes: 300, hidden: vec![16], learning_rate: 1e-2, ..CbConfig::default() };
        let out = train_cb(&sim, &Exploration::Random, &cfg, &Seeder::new(6)).unwrap();
        let mut rng = Seeder::new(7).rng();
        let mut hits = 0;
        for t in 0..sim.horizon {
            let o = sim.observe(&t);
            for _ in 0..20 {
                let a = random_feasible_action(2, 1, 1, &mut rng);
                let p = out.net.predict(&o, &a).unwrap();
                for (g, v) in p.iter().enumerate() {
                    assert!((v + (g + 1) as f64).abs() < 0.2, "t={t} g={g}: {v}");
                }
                hits += usize::from(out.net.worst_group(&o, &a).unwrap().number() == 3);
            }
        }
        assert!(hits as f64 >= 0.95 * (sim.horizon * 20) as f64);
    }

    #[test]
    fn empty_group_set_rejected() {
        let sim = SyntheticGroupSim::new(2, 0);
        assert!(train_cb(&sim, &Exploration::Random, &CbConfig::default(), &Seeder::new(0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = Seeder::new(8).rng();
        let net = CbNet::new(3, 2, 4, &[8], 0.25, &mut rng).unwrap();
        let back = CbNet::from_checkpoint(&Checkpoint::from_json(&net.to_checkpoint().to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
