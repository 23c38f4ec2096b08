//! Shared local Q-network and its value-decomposed joint value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{BatchActivations, Gradients, Mlp};
use crate::budget::{solve_budget_argmax, ActionValueTable, BudgetSolution};
use crate::env::{JointAction, Observation, OBS_DIM};
use crate::error::{Error, Result};
use crate::induction::GroupId;

/// Q'(i, o_i, a): one network evaluated on `[o_i || one_hot(a)]` for every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNet {
    mlp: Mlp,
    levels: usize,
}

impl QNet {
    pub fn new<R: Rng + ?Sized>(levels: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![OBS_DIM + levels];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self::from_mlp(Mlp::new(&dims, rng)?)
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: mlp.output_dim() });
        }
        if mlp.input_dim() <= OBS_DIM {
            return Err(Error::InvalidConfig(format!("Q-network input {} leaves no room for actions", mlp.input_dim())));
        }
        let levels = mlp.input_dim() - OBS_DIM;
        Ok(Self { mlp, levels })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn encode(&self, obs: &Observation, action: u32, buf: &mut Vec<f64>) {
        assert!((action as usize) < self.levels, "action level {action} out of range");
        buf.clear();
        buf.extend_from_slice(obs);
        buf.extend((0..self.levels).map(|a| if a == action as usize { 1.0 } else { 0.0 }));
    }

    pub fn local_q(&self, obs: &Observation, action: u32) -> f64 {
        let mut x = Vec::with_capacity(OBS_DIM + self.levels);
        self.encode(obs, action, &mut x);
        self.evaluate(&x, 1)[0]
    }

    fn evaluate(&self, inputs: &[f64], rows: usize) -> Vec<f64> {
        let mut acts = BatchActivations::default();
        self.mlp.forward_batch(inputs, rows, &mut acts).expect("encoded input matches the network");
        acts.output().to_vec()
    }

    fn encode_all(&self, obs: &[Observation], buf: &mut Vec<f64>) {
        let mut row = Vec::with_capacity(OBS_DIM + self.levels);
        for o in obs {
            for a in 0..self.levels as u32 {
                self.encode(o, a, &mut row);
                buf.extend_from_slice(&row);
            }
        }
    }

    pub fn action_values(&self, obs: &[Observation]) -> ActionValueTable {
        let mut x = Vec::with_capacity(obs.len() * self.levels * (OBS_DIM + self.levels));
        self.encode_all(obs, &mut x);
        let values = self.evaluate(&x, obs.len() * self.levels);
        ActionValueTable::new(obs.len(), self.levels, values).expect("shape is consistent")
    }

    /// Action-value tables for many states in one batched pass.
    pub fn action_values_many(&self, states: &[&[Observation]]) -> Vec<ActionValueTable> {
        let mut x = Vec::new();
        for obs in states {
            self.encode_all(obs, &mut x);
        }
        let rows = x.len() / (OBS_DIM + self.levels);
        let values = self.evaluate(&x, rows);
        let mut offset = 0;
        states
            .iter()
            .map(|obs| {
                let len = obs.len() * self.levels;
                let t = ActionValueTable::new(obs.len(), self.levels, values[offset..offset + len].to_vec());
                offset += len;
                t.expect("shape is consistent")
            })
            .collect()
    }

    /// Sum of local values, left to right by agent.
    pub fn vdn_joint_q(&self, obs: &[Observation], action: &JointAction) -> f64 {
        obs.iter().zip(&action.requests).fold(0.0, |acc, (o, &a)| acc + self.local_q(o, a))
    }

    pub fn greedy(&self, obs: &[Observation], budget: u32) -> BudgetSolution {
        solve_budget_argmax(&self.action_values(obs), budget)
    }
}

/// `reward + gamma * max_{feasible a'} Q(s', a')`; the bootstrap is dropped
/// for terminal transitions.
pub fn td_target(target: &QNet, reward: f64, next_obs: &[Observation], terminal: bool, gamma: f64, budget: u32) -> f64 {
    if terminal || gamma == 0.0 {
        return reward;
    }
    reward + gamma * target.greedy(next_obs, budget).value
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Observation>,
    pub action: JointAction,
    pub group: GroupId,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Observation>,
    pub terminal: bool,
}

impl Transition {
    pub fn joint_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |acc, r| acc + r)
    }
}

/// Accumulates the gradient of `mean_b (Q(s_b, a_b) - y_b)^2` and returns the loss.
pub fn vdn_loss_gradient(
    net: &QNet,
    batch: &[(&[Observation], &JointAction, f64)],
    grads: &mut Gradients,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let scale = 1.0 / batch.len() as f64;
    let width = OBS_DIM + net.levels;
    let mut x = Vec::new();
    let mut row = Vec::with_capacity(width);
    for &(obs, action, _) in batch {
        if obs.len() != action.requests.len() {
            return Err(Error::DimensionMismatch { expected: obs.len(), got: action.requests.len() });
        }
        for (o, &a) in obs.iter().zip(&action.requests) {
            net.encode(o, a, &mut row);
            x.extend_from_slice(&row);
        }
    }
    let rows = x.len() / width;
    let mut acts = BatchActivations::default();
    net.mlp.forward_batch(&x, rows, &mut acts)?;
    let out = acts.output();
    let mut grad_out = vec![0.0; rows];
    let mut loss = 0.0;
    let mut r = 0;
    for &(obs, _, y) in batch {
        let q = out[r..r + obs.len()].iter().fold(0.0, |acc, v| acc + v);
        let err = q - y;
        loss += err * err * scale;
        grad_out[r..r + obs.len()].fill(2.0 * err * scale);
        r += obs.len();
    }
    net.mlp.backward_batch(&acts, &grad_out, grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::brute_force_argmax;
    use crate::seed::Seeder;

    fn random_obs<R: Rng>(n: usize, rng: &mut R) -> Vec<Observation> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()
    }

    #[test]
    fn shared_weights_identical_agents() {
        let mut rng = Seeder::new(1).rng();
        let net = QNet::new(3, &[16, 16], &mut rng).unwrap();
        let o = random_obs(1, &mut rng)[0];
        assert_eq!(net.local_q(&o, 2), net.local_q(&o, 2));
        assert!(net.local_q(&o, 0).is_finite());
        let obs = vec![o, o];
        let a = JointAction::new(vec![1, 2]);
        let b = JointAction::new(vec![2, 1]);
        assert_eq!(net.vdn_joint_q(&obs, &a), net.vdn_joint_q(&obs, &b));
    }

    #[test]
    fn joint_q_is_sum_of_locals() {
        let mut rng = Seeder::new(2).rng();
        let net = QNet::new(2, &[8], &mut rng).unwrap();
        let obs = random_obs(3, &mut rng);
        let a = JointAction::new(vec![1, 0, 1]);
        let mut want = 0.0;
        for i in 0..3 {
            want += net.local_q(&obs[i], a.requests[i]);
        }
        assert_eq!(net.vdn_joint_q(&obs, &a), want);
        assert_eq!(net.vdn_joint_q(&obs[..1], &JointAction::new(vec![1])), net.local_q(&obs[0], 1));
    }

    #[test]
    fn table_entries_equal_local_values() {
        let mut rng = Seeder::new(12).rng();
        let net = QNet::new(3, &[64, 64], &mut rng).unwrap();
        let obs = random_obs(20, &mut rng);
        let t = net.action_values(&obs);
        let many = net.action_values_many(&[&obs, &obs[..3]]);
        for i in 0..20 {
            for a in 0..3u32 {
                assert_eq!(t.row(i)[a as usize], net.local_q(&obs[i], a));
                assert_eq!(many[0].row(i)[a as usize], t.row(i)[a as usize]);
            }
        }
        assert_eq!(many[1].row(2), t.row(2));
    }

    #[test]
    fn targets() {
        let mut rng = Seeder::new(3).rng();
        let net = QNet::new(2, &[8], &mut rng).unwrap();
        let obs = random_obs(4, &mut rng);
        assert_eq!(td_target(&net, -4.0, &obs, true, 0.9, 2), -4.0);
        assert_eq!(td_target(&net, 1.5, &obs, false, 0.0, 2), 1.5);
    }

    #[test]
    fn target_bootstrap_matches_enumeration() {
        let mut rng = Seeder::new(4).rng();
        for n in 1..=4 {
            let net = QNet::new(3, &[8, 8], &mut rng).unwrap();
            let obs = random_obs(n, &mut rng);
            let best = brute_force_argmax(&net.action_values(&obs), 3).unwrap().value;
            let y = td_target(&net, 1.0, &obs, false, 0.9, 3);
            assert_eq!(y, 1.0 + 0.9 * best);
        }
    }

    #[test]
    fn bootstrap_of_ten() {
        // single linear layer: Q' = 10 * [a = 1], one agent, budget 1
        let mut mlp = Mlp::zeros(&[OBS_DIM + 2, 1]).unwrap();
        mlp.layers_mut()[0].weights[OBS_DIM + 1] = 10.0;
        let net = QNet::from_mlp(mlp).unwrap();
        let obs = vec![[0.0; OBS_DIM]];
        assert_eq!(td_target(&net, 1.0, &obs, false, 0.9, 1), 10.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = Seeder::new(6).rng();
        let net = QNet::new(2, &[6, 6], &mut rng).unwrap();
        let obs: Vec<Vec<Observation>> = (0..3).map(|_| random_obs(4, &mut rng)).collect();
        let acts = [JointAction::new(vec![1, 0, 0, 1]), JointAction::new(vec![0, 0, 1, 1]), JointAction::zeros(4)];
        let ys = [0.3, -1.0, 0.7];
        let batch: Vec<_> = (0..3).map(|b| (obs[b].as_slice(), &acts[b], ys[b])).collect();
        let mut g = net.mlp.zero_gradients();
        vdn_loss_gradient(&net, &batch, &mut g).unwrap();
        let analytic = g.flat();
        let loss = |n: &QNet| {
            let mut z = n.mlp.zero_gradients();
            vdn_loss_gradient(n, &batch, &mut z).unwrap()
        };
        let base = net.mlp.flat_params();
        let h = 1e-5;
        for j in 0..base.len() {
            let mut p = base.clone();
            let mut probe = net.clone();
            p[j] += h;
            probe.mlp.set_flat_params(&p).unwrap();
            let up = loss(&probe);
            p[j] -= 2.0 * h;
            probe.mlp.set_flat_params(&p).unwrap();
            let down = loss(&probe);
            let num = (up - down) / (2.0 * h);
            let rel = (analytic[j] - num).abs() / analytic[j].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {j}: {} vs {num}", analytic[j]);
        }
    }
}
