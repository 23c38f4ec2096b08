//! Exact solver for the budgeted joint-action program
//!
//! ```text
//! maximize  sum_i values[i][a_i]   s.t.  sum_i a_i <= M,  a_i in 0..=A_max
//! ```
//!
//! The objective is separable with a single knapsack row, so a dynamic
//! program over (agent, budget used) solves it exactly in O(N * M * A_max).
//!
//! Tie-breaking contract: among optimal actions the solver returns the one
//! that is smallest when compared from the last agent to the first. Equal
//! values therefore resolve toward smaller requests, and when two agents
//! compete for a chute the smaller agent index receives it.
//!
//! Objective values are always accumulated left to right by agent index,
//! starting from `0.0`, so solver and oracle values are comparable exactly.

use rand::Rng;

use crate::env::JointAction;
use crate::error::{Error, Result};

/// Largest instance the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// `values[i][a] = Q'(i, s^i, a)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionValueTable {
    n_agents: usize,
    levels: usize,
    values: Vec<f64>,
}

impl ActionValueTable {
    pub fn new(n_agents: usize, levels: usize, values: Vec<f64>) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidConfig("action table needs at least one level".into()));
        }
        if values.len() != n_agents * levels {
            return Err(Error::DimensionMismatch { expected: n_agents * levels, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("action values must be finite".into()));
        }
        Ok(Self { n_agents, levels, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let levels = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != levels) {
            return Err(Error::InvalidConfig("ragged action-value rows".into()));
        }
        Self::new(rows.len(), levels, rows.concat())
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn action_max(&self) -> u32 {
        (self.levels - 1) as u32
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        &self.values[agent * self.levels..(agent + 1) * self.levels]
    }

    pub fn row_mut(&mut self, agent: usize) -> &mut [f64] {
        &mut self.values[agent * self.levels..(agent + 1) * self.levels]
    }

    /// Objective of `action`, summed left to right by agent.
    pub fn objective(&self, action: &JointAction) -> f64 {
        action
            .requests
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, &a)| acc + self.row(i)[a as usize])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSolution {
    pub action: JointAction,
    pub value: f64,
}

/// Exact budgeted argmax by dynamic programming.
pub fn solve_budget_argmax(table: &ActionValueTable, budget: u32) -> BudgetSolution {
    let n = table.n_agents;
    let a_max = table.levels - 1;
    let cap = (budget as usize).min(n * a_max);
    let width = cap + 1;

    // best[i][b]: best prefix value over agents 0..i using at most b units
    let mut best = vec![0.0f64; (n + 1) * width];
    for i in 0..n {
        let row = table.row(i);
        for b in 0..width {
            let prev = &best[i * width..(i + 1) * width];
            let mut v = prev[b] + row[0];
            for (a, &q) in row.iter().enumerate().take(a_max.min(b) + 1).skip(1) {
                let cand = prev[b - a] + q;
                if cand > v {
                    v = cand;
                }
            }
            best[(i + 1) * width + b] = v;
        }
    }

    let mut requests = vec![0u32; n];
    let mut b = cap;
    for i in (0..n).rev() {
        let target = best[(i + 1) * width + b];
        let row = table.row(i);
        let a = (0..=a_max.min(b))
            .find(|&a| best[i * width + b - a] + row[a] == target)
            .expect("the optimum is attained by some level");
        requests[i] = a as u32;
        b -= a;
    }
    let action = JointAction::new(requests);
    let value = table.objective(&action);
    debug_assert_eq!(value, best[n * width + cap]);
    BudgetSolution { action, value }
}

/// Exhaustive enumeration with the same tie-breaking contract.
pub fn brute_force_argmax(table: &ActionValueTable, budget: u32) -> Result<BudgetSolution> {
    let n = table.n_agents;
    let levels = table.levels;
    let count = (levels as f64).powi(n as i32);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(count));
    }
    // agent 0 is the fastest-moving digit, so enumeration runs in the
    // last-agent-major order of the tie-break; strict improvement keeps the first
    let mut digits = vec![0u32; n];
    let mut best: Option<BudgetSolution> = None;
    loop {
        let used: u64 = digits.iter().map(|&d| d as u64).sum();
        if used <= budget as u64 {
            let action = JointAction::new(digits.clone());
            let value = table.objective(&action);
            if best.as_ref().is_none_or(|b| value > b.value) {
                best = Some(BudgetSolution { action, value });
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return Ok(best.expect("all-zero action is always feasible"));
            }
            digits[i] += 1;
            if (digits[i] as usize) < levels {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// A random feasible joint action: the budgeted argmax of a table of
/// independent uniform draws.
pub fn random_feasible_action<R: Rng + ?Sized>(
    n_agents: usize,
    action_max: u32,
    budget: u32,
    rng: &mut R,
) -> JointAction {
    let levels = action_max as usize + 1;
    let values = (0..n_agents * levels).map(|_| rng.random::<f64>()).collect();
    let table = ActionValueTable::new(n_agents, levels, values).expect("shape is consistent");
    solve_budget_argmax(&table, budget).action
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seeder;
    use proptest::prelude::*;

    fn table(rows: &[&[f64]]) -> ActionValueTable {
        ActionValueTable::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_budget_forces_zero() {
        let t = table(&[&[0.0, 5.0], &[1.0, 9.0]]);
        assert_eq!(solve_budget_argmax(&t, 0).action.requests, vec![0, 0]);
    }

    #[test]
    fn slack_budget_is_rowwise_argmax() {
        let t = table(&[&[0.0, 5.0, 1.0], &[3.0, 2.0, 1.0], &[0.0, 1.0, 7.0]]);
        let s = solve_budget_argmax(&t, 6);
        assert_eq!(s.action.requests, vec![1, 0, 2]);
        assert_eq!(s.value, 15.0);
    }

    #[test]
    fn single_agent_row_argmax_under_cap() {
        let t = table(&[&[0.0, 1.0, 4.0, 2.0]]);
        assert_eq!(brute_force_argmax(&t, 1).unwrap().action.requests, vec![1]);
        assert_eq!(brute_force_argmax(&t, 5).unwrap().action.requests, vec![2]);
        assert_eq!(solve_budget_argmax(&t, 1).action.requests, vec![1]);
    }

    #[test]
    fn equal_table_gives_zero_action() {
        let t = table(&[&[1.0, 1.0, 1.0] as &[f64]; 4]);
        assert_eq!(solve_budget_argmax(&t, 3).action, JointAction::zeros(4));
        assert_eq!(brute_force_argmax(&t, 3).unwrap().action, JointAction::zeros(4));
    }

    #[test]
    fn tied_agents_smaller_index_wins() {
        let t = table(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(solve_budget_argmax(&t, 1).action.requests, vec![1, 0, 0]);
        assert_eq!(brute_force_argmax(&t, 2).unwrap().action.requests, vec![1, 1, 0]);
    }

    #[test]
    fn binary_top_two_by_marginal_gain() {
        // gains: 0.5, 3.0, -1.0, 2.0, 0.2
        let t = table(&[&[1.0, 1.5], &[0.0, 3.0], &[2.0, 1.0], &[-1.0, 1.0], &[0.3, 0.5]]);
        let expected = vec![0, 1, 0, 1, 0];
        assert_eq!(brute_force_argmax(&t, 2).unwrap().action.requests, expected);
        assert_eq!(solve_budget_argmax(&t, 2).action.requests, expected);
    }

    #[test]
    fn too_large_for_enumeration() {
        let t = ActionValueTable::new(12, 5, vec![0.0; 60]).unwrap();
        assert!(matches!(brute_force_argmax(&t, 3), Err(Error::InstanceTooLarge(_))));
    }

    #[test]
    fn random_actions_are_feasible() {
        let mut rng = Seeder::new(3).rng();
        for _ in 0..200 {
            let a = random_feasible_action(20, 2, 10, &mut rng);
            assert!(a.total() <= 10);
            assert!(a.requests.iter().all(|&x| x <= 2));
        }
    }

    fn instance() -> impl Strategy<Value = (ActionValueTable, u32)> {
        (1usize..=6, 1usize..=4, 0u32..=8).prop_flat_map(|(n, a, m)| {
            // sixteenths keep every partial sum exact, so ties really occur
            prop::collection::vec(-32i32..32, n * (a + 1)).prop_map(move |v| {
                let vals = v.into_iter().map(|x| x as f64 / 16.0).collect();
                (ActionValueTable::new(n, a + 1, vals).unwrap(), m)
            })
        })
    }

    proptest! {
        #[test]
        fn dp_matches_enumeration((t, m) in instance()) {
            let dp = solve_budget_argmax(&t, m);
            let bf = brute_force_argmax(&t, m).unwrap();
            prop_assert_eq!(dp.value, bf.value);
            prop_assert_eq!(&dp.action, &bf.action);
            prop_assert!(dp.action.total() <= m as u64);
        }

        #[test]
        fn value_is_monotone_in_budget((t, m) in instance()) {
            let lo = solve_budget_argmax(&t, m).value;
            let hi = solve_budget_argmax(&t, m + 1).value;
            prop_assert!(hi >= lo);
        }

        #[test]
        fn row_shift_moves_value_not_argmax((t, m) in instance(), agent in 0usize..6, c in -4i32..4) {
            let agent = agent % t.n_agents();
            let base = solve_budget_argmax(&t, m);
            let mut shifted = t.clone();
            for v in shifted.row_mut(agent) {
                *v += c as f64;
            }
            let moved = solve_budget_argmax(&shifted, m);
            prop_assert_eq!(moved.value, base.value + c as f64);
            prop_assert_eq!(moved.action, base.action);
        }
    }
}
