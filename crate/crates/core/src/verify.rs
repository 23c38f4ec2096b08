//! Randomised property suites behind the `verify` subcommand.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::CbNet;
use crate::budget::{brute_force_argmax, random_feasible_action, solve_budget_argmax, ActionValueTable};
use crate::env::{self, EnvConfig, JointAction, Observation, OBS_DIM};
use crate::error::Result;
use crate::induction::{
    multinomial_pmf, truncated_normal_probs, InductionSample, MultinomialSpec, TruncatedNormalSpec, STANDARD_MEANS,
    STANDARD_SIGMA,
};
use crate::seed::{Seeder, StreamRng};
use crate::tabular::{
    approx_bellman_apply, dr_bellman_apply, simplex_min_oracle, split_min_apply, worst_case_reward, QTable, TabularMdp,
};
use crate::valuenet::{gradient_check, vdn_loss_gradient, Mlp, QNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed slack or error, suite-specific.
    pub worst: f64,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteOutcome {
    fn new(name: &str, cases: usize, worst: f64, failure: Option<String>) -> Self {
        Self {
            name: name.to_owned(),
            passed: failure.is_none(),
            cases,
            worst,
            detail: failure.unwrap_or_else(|| "ok".into()),
            seconds: 0.0,
        }
    }
}

pub const SIMPLEX_DRAWS: usize = 10_000;
pub const SIMPLEX_RESOLUTION: usize = 12;

/// Group minimum against the grid and Dirichlet minimum over the simplex.
pub fn suite_group_minimum(cases: usize, rng: &mut StreamRng) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let m = rng.random_range(1..=5);
        let rewards: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let vertex = worst_case_reward(&rewards)?;
        let oracle = simplex_min_oracle(&rewards, SIMPLEX_RESOLUTION, SIMPLEX_DRAWS, rng)?;
        let spread = rewards.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        let gap = oracle - vertex;
        worst = worst.max(gap.abs());
        if gap < -1e-9 || gap > spread / SIMPLEX_RESOLUTION as f64 + 1e-9 {
            let msg = format!("case {case}: vertex {vertex} vs simplex {oracle}");
            return Ok(SuiteOutcome::new("group-minimum", case + 1, worst, Some(msg)));
        }
    }
    Ok(SuiteOutcome::new("group-minimum", cases, worst, None))
}

fn random_q<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> QTable {
    let scale = rng.random_range(0.1..20.0);
    QTable::from_fn(n, k, |_, _| rng.random_range(-scale..scale))
}

fn random_mdp<R: Rng + ?Sized>(per_group: bool, rng: &mut R) -> Result<TabularMdp> {
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=4);
    let m = rng.random_range(1..=5);
    let gamma = rng.random_range(0.01..0.999);
    TabularMdp::random(n, k, m, per_group, gamma, rng)
}

/// `||T Q1 - T Q2|| <= gamma ||Q1 - Q2||` over random pairs; `worst` is the
/// largest observed ratio.
pub fn suite_contraction(pairs: usize, rng: &mut StreamRng) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    let per_mdp = 10;
    let mut done = 0;
    while done < pairs {
        let mdp = random_mdp(false, rng)?;
        for _ in 0..per_mdp.min(pairs - done) {
            let q1 = random_q(mdp.n_states(), mdp.n_actions(), rng);
            let q2 = random_q(mdp.n_states(), mdp.n_actions(), rng);
            let lhs = dr_bellman_apply(&mdp, &q1)?.sup_distance(&dr_bellman_apply(&mdp, &q2)?);
            let rhs = q1.sup_distance(&q2);
            if rhs > 0.0 {
                worst = worst.max(lhs / rhs);
            }
            done += 1;
            if lhs > mdp.gamma() * rhs + 1e-12 {
                let msg = format!("pair {done}: {lhs} > {} * {rhs}", mdp.gamma());
                return Ok(SuiteOutcome::new("contraction", done, worst, Some(msg)));
            }
        }
    }
    Ok(SuiteOutcome::new("contraction", pairs, worst, None))
}

/// Joint-minimum operator dominates the split minimum elementwise.
pub fn suite_dominance(instances: usize, rng: &mut StreamRng) -> Result<SuiteOutcome> {
    let mut worst = f64::INFINITY;
    for case in 0..instances {
        let mdp = random_mdp(true, rng)?;
        let q = random_q(mdp.n_states(), mdp.n_actions(), rng);
        let u = approx_bellman_apply(&mdp, &q)?;
        let t = split_min_apply(&mdp, &q)?;
        for (a, b) in u.values.iter().zip(&t.values) {
            worst = worst.min(a - b);
            if a < b {
                let msg = format!("case {case}: {a} < {b}");
                return Ok(SuiteOutcome::new("dominance", case + 1, worst, Some(msg)));
            }
        }
    }
    Ok(SuiteOutcome::new("dominance", instances, worst, None))
}

/// Dynamic program against exhaustive enumeration.
pub fn suite_budget(instances: usize, rng: &mut StreamRng) -> Result<SuiteOutcome> {
    for case in 0..instances {
        let n = rng.random_range(1..=6);
        let a_max = rng.random_range(1..=4u32);
        let budget = rng.random_range(0..=8u32);
        let levels = a_max as usize + 1;
        // coarse values make exact ties common
        let coarse = rng.random_bool(0.5);
        let values = (0..n * levels)
            .map(|_| if coarse { rng.random_range(-3..=3) as f64 } else { rng.random_range(-10.0..10.0) })
            .collect();
        let table = ActionValueTable::new(n, levels, values)?;
        let dp = solve_budget_argmax(&table, budget);
        let brute = brute_force_argmax(&table, budget)?;
        if dp.value != brute.value || dp.action != brute.action || dp.action.total() > budget as u64 {
            let msg = format!(
                "case {case}: dp {:?} ({}) vs brute {:?} ({})",
                dp.action.requests, dp.value, brute.action.requests, brute.value
            );
            return Ok(SuiteOutcome::new("budget-optimality", case + 1, 0.0, Some(msg)));
        }
    }
    Ok(SuiteOutcome::new("budget-optimality", instances, 0.0, None))
}

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

fn random_obs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Observation> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()
}

/// Central differences of the temporal-difference loss against its
/// analytic gradient.
fn vdn_loss_check<R: Rng + ?Sized>(net: &QNet, rng: &mut R) -> Result<f64> {
    let n_agents = 3;
    let max = (net.levels() - 1) as u32;
    let samples: Vec<(Vec<Observation>, JointAction, f64)> = (0..4)
        .map(|_| {
            let obs = random_obs(n_agents, rng);
            let act = JointAction::new((0..n_agents).map(|_| rng.random_range(0..=max)).collect());
            (obs, act, rng.random_range(-2.0..2.0))
        })
        .collect();
    let batch: Vec<(&[Observation], &JointAction, f64)> = samples.iter().map(|(o, a, y)| (o.as_slice(), a, *y)).collect();
    let mut grads = net.mlp().zero_gradients();
    vdn_loss_gradient(net, &batch, &mut grads)?;
    let analytic = grads.flat();
    let base = net.mlp().flat_params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = base.clone();
            p[j] += delta;
            probe.mlp_mut().set_flat_params(&p)?;
            let mut scratch = probe.mlp().zero_gradients();
            vdn_loss_gradient(&probe, &batch, &mut scratch)
        };
        let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Network gradients against central finite differences.
pub fn suite_gradients(rng: &mut StreamRng) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let shapes: [&[usize]; 4] = [&[3, 1], &[7, 5, 2], &[OBS_DIM + 2, 16, 16, 1], &[4, 8, 6, 3]];
    for dims in shapes {
        for _ in 0..3 {
            let net = Mlp::new(dims, rng)?;
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..dims[dims.len() - 1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            worst = worst.max(gradient_check(&net, &x, &c, FD_STEP)?);
            cases += 1;
        }
    }
    for levels in [2, 4] {
        let q = QNet::new(levels, &[12, 12], rng)?;
        worst = worst.max(vdn_loss_check(&q, rng)?);
        cases += 1;
    }
    let cb = CbNet::new(3, 2, 4, &[12, 12], 1.0, rng)?;
    let obs = random_obs(3, rng);
    let mut x = Vec::new();
    cb.encode(&obs, &JointAction::new(vec![1, 0, 1]), &mut x)?;
    let c: Vec<f64> = (0..cb.n_groups()).map(|_| rng.random_range(-1.0..1.0)).collect();
    worst = worst.max(gradient_check(cb.mlp(), &x, &c, FD_STEP)?);
    cases += 1;
    let failure = (worst >= GRAD_TOL).then(|| format!("relative error {worst:e}"));
    Ok(SuiteOutcome::new("gradients", cases, worst, failure))
}

fn random_env_config<R: Rng + ?Sized>(rng: &mut R) -> EnvConfig {
    if rng.random_bool(0.3) {
        return EnvConfig::standard();
    }
    let n = rng.random_range(1..=8);
    EnvConfig {
        n_destinations: n,
        n_chutes: rng.random_range(0..=2 * n as u32),
        episode_steps: rng.random_range(1..=6),
        step_volume: rng.random_range(0..=200),
        action_max: rng.random_range(1..=4),
        action_penalty: rng.random_range(0.0..3.0),
        recirc_carryover: rng.random_bool(0.7),
    }
}

/// Per-destination conservation and budget feasibility over random steps.
pub fn suite_conservation(steps: usize, rng: &mut StreamRng) -> Result<SuiteOutcome> {
    let mut done = 0;
    while done < steps {
        let cfg = random_env_config(rng);
        let mut probs: Vec<f64> = (0..cfg.n_destinations).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let drift = 1.0 - probs.iter().sum::<f64>();
        probs[0] += drift;
        let law = MultinomialSpec::new(cfg.step_volume, probs)?;
        let mut state = env::reset(&cfg);
        while !state.is_terminal(&cfg) && done < steps {
            let action = random_feasible_action(cfg.n_destinations, cfg.action_max, cfg.n_chutes, rng);
            let out = env::sample_step(&state, &action, &law, &cfg, rng)?;
            done += 1;
            let mut problem = None;
            if action.total() > cfg.n_chutes as u64 || action.requests.iter().any(|&a| a > cfg.action_max) {
                problem = Some(format!("step {done}: infeasible action {:?}", action.requests));
            }
            for i in 0..cfg.n_destinations {
                let carried = if cfg.recirc_carryover { state.recirc_backlog[i] } else { 0 };
                if out.sorted[i] + out.recirculated[i] != out.arrivals[i]
                    || out.arrivals[i] != out.induction.counts[i] + carried
                {
                    problem = Some(format!("step {done}: destination {} does not balance", i + 1));
                }
            }
            if out.induction.total() != cfg.step_volume {
                problem = Some(format!("step {done}: induction volume {}", out.induction.total()));
            }
            if let Some(msg) = problem {
                return Ok(SuiteOutcome::new("conservation", done, 0.0, Some(msg)));
            }
            state = out.next_state;
        }
    }
    Ok(SuiteOutcome::new("conservation", steps, 0.0, None))
}

/// Standard normal upper tail. Below 3 it uses the Taylor series
/// `1/2 - phi(x) sum_n x^(2n+1) / (2n+1)!!`; above, the Laplace continued
/// fraction `phi(x) / (x + 1/(x + 2/(x + 3/(x + ...))))`.
pub fn oracle_upper_tail(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - oracle_upper_tail(-x);
    }
    let density = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    if x < 3.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term > 1e-18 * sum {
            n += 1.0;
            term *= x * x / (2.0 * n + 1.0);
            sum += term;
        }
        return 0.5 - density * sum;
    }
    let mut tail = x;
    for k in (1..=400).rev() {
        tail = x + k as f64 / tail;
    }
    density / tail
}

/// Normal mass on `[a, b]` from the upper tail of whichever side avoids
/// cancellation.
fn oracle_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        oracle_upper_tail(a) - oracle_upper_tail(b)
    } else if b <= 0.0 {
        oracle_upper_tail(-b) - oracle_upper_tail(-a)
    } else {
        1.0 - oracle_upper_tail(b) - oracle_upper_tail(-a)
    }
}

fn oracle_probs(mu: f64, sigma: f64, n: usize) -> Vec<f64> {
    let z = |x: f64| (x - mu) / sigma;
    let denom = oracle_mass(z(0.0), z(n as f64));
    (1..=n).map(|i| oracle_mass(z(i as f64 - 1.0), z(i as f64)) / denom).collect()
}

fn compositions(volume: u64, k: usize, prefix: &mut Vec<u64>, visit: &mut dyn FnMut(&[u64])) {
    if prefix.len() + 1 == k {
        let used: u64 = prefix.iter().sum();
        prefix.push(volume - used);
        visit(prefix);
        prefix.pop();
        return;
    }
    let used: u64 = prefix.iter().sum();
    for c in 0..=volume - used {
        prefix.push(c);
        compositions(volume, k, prefix, visit);
        prefix.pop();
    }
}

/// Truncated-normal probabilities against the series oracle, and
/// multinomial mass over full small supports.
pub fn suite_induction(rng: &mut StreamRng) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut specs: Vec<(f64, f64, usize)> = STANDARD_MEANS.iter().map(|&mu| (mu, STANDARD_SIGMA, 20)).collect();
    for _ in 0..200 {
        let n = rng.random_range(1..=30);
        specs.push((rng.random_range(-3.0..n as f64 + 3.0), rng.random_range(0.3..6.0), n));
    }
    for (mu, sigma, n) in specs {
        let got = truncated_normal_probs(&TruncatedNormalSpec::new(mu, sigma, n)?)?;
        for (a, b) in got.iter().zip(oracle_probs(mu, sigma, n)) {
            worst = worst.max((a - b).abs());
        }
        cases += 1;
    }
    if worst > 1e-6 {
        return Ok(SuiteOutcome::new("induction", cases, worst, Some(format!("probability error {worst:e}"))));
    }
    for _ in 0..40 {
        let k = rng.random_range(1..=4);
        let volume = rng.random_range(0..=8u64);
        let mut probs: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        probs[0] += 1.0 - probs.iter().sum::<f64>();
        let spec = MultinomialSpec::new(volume, probs)?;
        let mut mass = 0.0;
        let mut err = None;
        compositions(volume, k, &mut Vec::new(), &mut |c| match multinomial_pmf(&spec, &InductionSample::new(c.to_vec())) {
            Ok(p) => mass += p,
            Err(e) => err = Some(e),
        });
        if let Some(e) = err {
            return Err(e);
        }
        cases += 1;
        if (mass - 1.0).abs() > 1e-10 {
            let msg = format!("pmf over k={k}, V={volume} sums to {mass}");
            return Ok(SuiteOutcome::new("induction", cases, worst, Some(msg)));
        }
    }
    Ok(SuiteOutcome::new("induction", cases, worst, None))
}

/// All seven suites at their standard sizes, each on its own stream.
pub fn run_all(seed: u64) -> Result<Vec<SuiteOutcome>> {
    let seeder = Seeder::new(seed).child("verify");
    type Suite = Box<dyn Fn(&mut StreamRng) -> Result<SuiteOutcome>>;
    let suites: Vec<(&str, Suite)> = vec![
        ("group-minimum", Box::new(|r| suite_group_minimum(100, r))),
        ("contraction", Box::new(|r| suite_contraction(1000, r))),
        ("dominance", Box::new(|r| suite_dominance(200, r))),
        ("budget-optimality", Box::new(|r| suite_budget(500, r))),
        ("gradients", Box::new(suite_gradients)),
        ("conservation", Box::new(|r| suite_conservation(10_000, r))),
        ("induction", Box::new(suite_induction)),
    ];
    let mut out = Vec::new();
    for (name, suite) in suites {
        let start = Instant::now();
        let mut rng = seeder.stream(name);
        let mut res = suite(&mut rng)?;
        res.seconds = start.elapsed().as_secs_f64();
        out.push(res);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_tail_values() {
        // reference values of the standard normal upper tail
        let cases = [
            (0.0, 0.5),
            (1.0, 0.158_655_253_931_457_05),
            (1.96, 0.024_997_895_148_220_435),
            (3.0, 1.349_898_031_630_094_6e-3),
            (5.0, 2.866_515_718_791_939e-7),
            (10.0, 7.619_853_024_160_527e-24),
        ];
        for (x, q) in cases {
            let got = oracle_upper_tail(x);
            assert!(((got - q) / q).abs() < 1e-12, "Q({x}) = {got}, want {q}");
        }
        assert!((oracle_upper_tail(-1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn small_suites_pass() {
        let mut rng = Seeder::new(3).rng();
        assert!(suite_group_minimum(5, &mut rng).unwrap().passed);
        assert!(suite_contraction(30, &mut rng).unwrap().passed);
        assert!(suite_dominance(10, &mut rng).unwrap().passed);
        assert!(suite_budget(30, &mut rng).unwrap().passed);
        assert!(suite_conservation(300, &mut rng).unwrap().passed);
    }
}
