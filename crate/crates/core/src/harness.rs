//! Experiment orchestration: configuration, the policy matrix, evaluation
//! and file outputs.
//!
//! An experiment directory holds `metrics.csv` (one row per policy),
//! `trace_<run>.csv` per training run, `report.json` and `checkpoints/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bandit::{smooth, train_cb, CbConfig, CbNet, Exploration};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::induction::{GroupId, GroupSet, GroupSetDoc};
use crate::seed::Seeder;
use crate::sim::WarehouseSim;
use crate::trainer::{
    evaluate_policy, thread_cpu_seconds, train_drmarl, EvaluationReport, MeanStd, TraceRow, TrainConfig, WorstCaseMode,
};
use crate::valuenet::{config_hash, QNet};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// What a run entry trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Single(WorstCaseMode),
    /// One fixed-group run per group.
    GroupSpecific,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Single(m) => m.fmt(f),
            Self::GroupSpecific => f.write_str("group-specific"),
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "group-specific" {
            Ok(Self::GroupSpecific)
        } else {
            s.parse().map(Self::Single)
        }
    }
}

impl Serialize for RunMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RunMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Row label in `metrics.csv`; derived from the mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    pub seeds: Vec<u64>,
}

fn default_preset() -> String {
    "standard".into()
}

fn default_groups() -> GroupSetDoc {
    GroupSetDoc { kind: "standard".into(), groups: Vec::new() }
}

fn default_trials() -> usize {
    20
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Environment preset, `standard` or `main`.
    #[serde(default = "default_preset")]
    pub env: String,
    /// Replaces the preset entirely when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_config: Option<EnvConfig>,
    #[serde(default = "default_groups")]
    pub groups: GroupSetDoc,
    /// Shared training settings; each run overrides mode and episodes.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cb: CbConfig,
    /// Policy whose greedy actions drive predictor training, taken from the
    /// run of that name with the same seed; uniform random actions when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cb_exploration: Option<String>,
    #[serde(default)]
    pub runs: Vec<RunSpec>,
    #[serde(default = "default_trials")]
    pub eval_trials: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// The full comparison on the 20-destination floor: a centre-group MARL
    /// baseline and the three DRMARL variants on three seeds, plus one
    /// specialist per group.
    pub fn standard_matrix() -> Self {
        let seeds = vec![1, 2, 3];
        let run = |name: &str, mode: RunMode, seeds: &[u64]| RunSpec {
            name: Some(name.into()),
            mode,
            episodes: None,
            seeds: seeds.to_vec(),
        };
        Self {
            name: "standard".into(),
            env: default_preset(),
            env_config: None,
            groups: default_groups(),
            train: TrainConfig::default(),
            cb: CbConfig::default(),
            cb_exploration: Some("MARL".into()),
            runs: vec![
                run("MARL", RunMode::Single(WorstCaseMode::Fixed(GroupId::from_index(4))), &seeds),
                run("DRMARL (cb)", RunMode::Single(WorstCaseMode::Cb), &seeds),
                run("DRMARL (exhaustive)", RunMode::Single(WorstCaseMode::Exhaustive), &seeds),
                run("DRMARL (random)", RunMode::Single(WorstCaseMode::Random), &seeds),
                run("Group-specific MARL", RunMode::GroupSpecific, &[1]),
            ],
            eval_trials: 20,
            out_dir: default_out(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::InvalidConfig(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        match &self.env_config {
            Some(c) => Ok(c.clone()),
            None => EnvConfig::preset(&self.env),
        }
    }

    pub fn group_set(&self) -> Result<GroupSet> {
        GroupSet::from_doc(&self.groups)
    }

    pub fn simulator(&self) -> Result<WarehouseSim> {
        WarehouseSim::new(self.env_config()?, self.group_set()?)
    }

    pub fn validate(&self) -> Result<()> {
        let sim = self.simulator()?;
        self.cb.validate()?;
        if self.eval_trials == 0 {
            return Err(Error::InvalidConfig("eval_trials must be positive".into()));
        }
        let m = sim.groups.len();
        let mut labels = std::collections::BTreeSet::new();
        for (i, run) in self.expand_runs(m).iter().enumerate() {
            let cfg = TrainConfig { mode: run.mode, episodes: run.episodes, ..self.train.clone() };
            cfg.validate(m).map_err(|e| Error::InvalidConfig(format!("runs[{i}]: {e}")))?;
            if !labels.insert(run.label.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate run `{}`", run.label)));
            }
        }
        if let Some(name) = &self.cb_exploration {
            let plan = self.expand_runs(m);
            let first_cb = plan.iter().position(|r| r.mode == WorstCaseMode::Cb);
            let source = plan.iter().position(|r| &r.policy == name);
            match (first_cb, source) {
                (_, None) => return Err(Error::InvalidConfig(format!("cb_exploration names unknown run `{name}`"))),
                (Some(c), Some(s)) if s > c => {
                    return Err(Error::InvalidConfig(format!("run `{name}` must come before the first cb run")))
                }
                _ => {}
            }
        }
        if self.runs.iter().any(|r| r.seeds.is_empty()) {
            return Err(Error::InvalidConfig("every run needs at least one seed".into()));
        }
        Ok(())
    }

    /// One entry per (run, group, seed) in execution order.
    pub fn expand_runs(&self, n_groups: usize) -> Vec<PlannedRun> {
        let mut out = Vec::new();
        for spec in &self.runs {
            let episodes = spec.episodes.unwrap_or(self.train.episodes);
            let mut push = |policy: String, mode: WorstCaseMode| {
                for &seed in &spec.seeds {
                    out.push(PlannedRun { label: format!("{}_s{seed}", slug(&policy)), policy: policy.clone(), mode, episodes, seed });
                }
            };
            match spec.mode {
                RunMode::Single(mode) => push(spec.name.clone().unwrap_or_else(|| default_name(mode)), mode),
                RunMode::GroupSpecific => {
                    let base = spec.name.clone().unwrap_or_else(|| "Group-specific MARL".into());
                    for gi in 0..n_groups {
                        let g = GroupId::from_index(gi);
                        push(format!("{base} (group {g})"), WorstCaseMode::Fixed(g));
                    }
                }
            }
        }
        out
    }
}

fn default_name(mode: WorstCaseMode) -> String {
    match mode {
        WorstCaseMode::Fixed(g) => format!("MARL (group {g})"),
        other => format!("DRMARL ({other})"),
    }
}

fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('-') && !s.is_empty() {
            s.push('-');
        }
    }
    s.trim_end_matches('-').to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub label: String,
    pub policy: String,
    pub mode: WorstCaseMode,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub run: PlannedRun,
    pub error: Option<String>,
    pub train_wall_s: f64,
    pub train_cpu_s: f64,
    pub gradient_steps: u64,
    pub group_counts: Vec<u64>,
    pub evaluation: Option<EvaluationReport>,
    pub trace_file: Option<String>,
    pub checkpoint_file: Option<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbRecord {
    pub seed: u64,
    pub error: Option<String>,
    pub train_wall_s: f64,
    pub losses: Vec<f64>,
    pub group_counts: Vec<u64>,
    pub checkpoint_file: Option<String>,
}

impl CbRecord {
    /// Last over first value of the trailing moving average.
    pub fn smoothed_loss_ratio(&self, window: usize) -> Option<f64> {
        let s = smooth(&self.losses, window);
        Some(s.last()? / s.first()?)
    }
}

/// One `metrics.csv` row: per-group means averaged over seeds, then the mean
/// and spread across groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "Policy")]
    pub policy: String,
    #[serde(rename = "Runs")]
    pub runs: usize,
    #[serde(rename = "Recirculation Rate")]
    pub recirc_rate: f64,
    #[serde(rename = "Recirculation Rate Std")]
    pub recirc_rate_std: f64,
    #[serde(rename = "Throughput")]
    pub throughput: f64,
    #[serde(rename = "Throughput Std")]
    pub throughput_std: f64,
    #[serde(rename = "Recirculation Amount")]
    pub recirc_amount: f64,
    #[serde(rename = "Recirculation Amount Std")]
    pub recirc_amount_std: f64,
}

pub const METRICS_HEADERS: [&str; 8] = [
    "Policy",
    "Runs",
    "Recirculation Rate",
    "Recirculation Rate Std",
    "Throughput",
    "Throughput Std",
    "Recirculation Amount",
    "Recirculation Amount Std",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub n_groups: usize,
    pub cb: Vec<CbRecord>,
    pub runs: Vec<RunRecord>,
    pub metrics: Vec<MetricsRow>,
}

impl ExperimentReport {
    pub fn records<'a>(&'a self, policy: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.run.policy == policy && r.ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| !r.ok())
    }
}

/// Rows in first-appearance order of their policy label.
pub fn aggregate_metrics(runs: &[RunRecord]) -> Vec<MetricsRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_policy: BTreeMap<&str, Vec<&EvaluationReport>> = BTreeMap::new();
    for r in runs {
        if let Some(ev) = r.evaluation.as_ref().filter(|_| r.ok()) {
            if !by_policy.contains_key(r.run.policy.as_str()) {
                order.push(&r.run.policy);
            }
            by_policy.entry(&r.run.policy).or_default().push(ev);
        }
    }
    order
        .into_iter()
        .map(|policy| {
            let evs = &by_policy[policy];
            let n_groups = evs[0].groups.len();
            let across = |f: fn(&crate::trainer::GroupEvaluation) -> f64| {
                let per_group: Vec<f64> = (0..n_groups)
                    .map(|g| evs.iter().map(|e| f(&e.groups[g])).sum::<f64>() / evs.len() as f64)
                    .collect();
                MeanStd::of(&per_group)
            };
            let rate = across(|g| g.recirc_rate.mean);
            let thr = across(|g| g.throughput.mean);
            let amt = across(|g| g.recirc_amount.mean);
            MetricsRow {
                policy: policy.to_owned(),
                runs: evs.len(),
                recirc_rate: rate.mean,
                recirc_rate_std: rate.std,
                throughput: thr.mean,
                throughput_std: thr.std,
                recirc_amount: amt.mean,
                recirc_amount_std: amt.std,
            }
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADERS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Wall-clock seconds at the first episode whose trailing mean return
/// reaches `target`.
pub fn time_to_reach(trace: &[TraceRow], target: f64, window: usize) -> Option<f64> {
    let returns: Vec<f64> = trace.iter().map(|r| r.mean_return).collect();
    smooth(&returns, window).iter().zip(trace).find(|(v, _)| **v >= target).map(|(_, r)| r.wall_clock_s)
}

/// Runs `cfg` writing into `out`, with progress lines sent to `log`.
pub fn run_experiment_with(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sim = cfg.simulator()?;
    let m = sim.groups.len();
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let hash = config_hash(cfg)?;
    let plan = cfg.expand_runs(m);

    let mut predictors: BTreeMap<u64, std::result::Result<CbNet, String>> = BTreeMap::new();
    let mut policies: BTreeMap<(String, u64), QNet> = BTreeMap::new();
    let mut cb_records = Vec::new();
    let mut records = Vec::with_capacity(plan.len());
    for run in plan {
        if run.mode == WorstCaseMode::Cb && !predictors.contains_key(&run.seed) {
            let explorer = cfg.cb_exploration.as_ref().map(|p| policies.get(&(p.clone(), run.seed)).ok_or(p));
            let (net, rec) = train_predictor(cfg, &sim, run.seed, explorer, out);
            match &net {
                Ok(_) => log(&format!("cb predictor seed {} trained in {:.1}s", run.seed, rec.train_wall_s)),
                Err(e) => log(&format!("cb predictor seed {} failed: {e}", run.seed)),
            }
            predictors.insert(run.seed, net);
            cb_records.push(rec);
        }
        let mut rec = RunRecord {
            run: run.clone(),
            error: None,
            train_wall_s: 0.0,
            train_cpu_s: 0.0,
            gradient_steps: 0,
            group_counts: Vec::new(),
            evaluation: None,
            trace_file: None,
            checkpoint_file: None,
            trace: Vec::new(),
        };
        let result = (|| -> Result<()> {
            let train = TrainConfig { mode: run.mode, episodes: run.episodes, ..cfg.train.clone() };
            let cb = match (run.mode, predictors.get(&run.seed)) {
                (WorstCaseMode::Cb, Some(Err(e))) => return Err(Error::InvalidConfig(format!("predictor unavailable: {e}"))),
                (WorstCaseMode::Cb, Some(Ok(net))) => Some(net),
                _ => None,
            };
            let wall = Instant::now();
            let cpu = thread_cpu_seconds();
            let seeder = Seeder::new(run.seed).child("train").child(&run.mode.to_string());
            let outcome = train_drmarl(&sim, &train, cb, &seeder, None)?;
            rec.train_wall_s = wall.elapsed().as_secs_f64();
            rec.train_cpu_s = thread_cpu_seconds() - cpu;
            rec.gradient_steps = outcome.gradient_steps;
            rec.group_counts = outcome.group_counts.clone();
            let trace_file = format!("trace_{}.csv", run.label);
            write_trace(&out.join(&trace_file), &outcome.trace)?;
            rec.trace_file = Some(trace_file);
            let ck_file = format!("{CHECKPOINT_DIR}/{}.json", run.label);
            outcome.checkpoint().with_config_hash(config_hash(&train)?).save(&out.join(&ck_file))?;
            rec.checkpoint_file = Some(ck_file);
            rec.trace = outcome.trace;
            rec.evaluation = Some(evaluate_policy(&run.policy, &outcome.net, &sim, cfg.eval_trials, &Seeder::new(run.seed))?);
            if cfg.cb_exploration.as_deref() == Some(run.policy.as_str()) {
                policies.insert((run.policy.clone(), run.seed), outcome.net);
            }
            Ok(())
        })();
        match result {
            Ok(()) => {
                let rate = rec.evaluation.as_ref().map_or(f64::NAN, |e| e.recirc_rate.mean);
                log(&format!("{}: trained in {:.1}s, mean recirculation rate {:.4}", run.label, rec.train_wall_s, rate));
            }
            Err(e) => {
                log(&format!("{}: failed: {e}", run.label));
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }

    let metrics = aggregate_metrics(&records);
    write_metrics(&out.join(METRICS_FILE), &metrics)?;
    let report = ExperimentReport { name: cfg.name.clone(), config_hash: hash, n_groups: m, cb: cb_records, runs: records, metrics };
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Trains the predictor for one seed, exploring with `explorer` when an
/// exploration policy is configured (`Err` names a policy with no usable run).
fn train_predictor(
    cfg: &ExperimentConfig,
    sim: &WarehouseSim,
    seed: u64,
    explorer: Option<std::result::Result<&QNet, &String>>,
    out: &Path,
) -> (std::result::Result<CbNet, String>, CbRecord) {
    let wall = Instant::now();
    let mut rec = CbRecord {
        seed,
        error: None,
        train_wall_s: 0.0,
        losses: Vec::new(),
        group_counts: Vec::new(),
        checkpoint_file: None,
    };
    let net = (|| -> Result<CbNet> {
        let explore = match explorer {
            None => Exploration::Random,
            Some(Ok(q)) => Exploration::Greedy(q.clone()),
            Some(Err(name)) => {
                return Err(Error::InvalidConfig(format!("exploration policy `{name}` has no successful run for seed {seed}")))
            }
        };
        let t = train_cb(sim, &explore, &cfg.cb, &Seeder::new(seed).child("cb-train"))?;
        let file = format!("{CHECKPOINT_DIR}/cb_s{seed}.json");
        t.net.to_checkpoint().with_config_hash(config_hash(&cfg.cb)?).save(&out.join(&file))?;
        rec.losses = t.losses;
        rec.group_counts = t.group_counts;
        rec.checkpoint_file = Some(file);
        Ok(t.net)
    })()
    .map_err(|e| e.to_string());
    rec.train_wall_s = wall.elapsed().as_secs_f64();
    rec.error = net.as_ref().err().cloned();
    (net, rec)
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    run_experiment_with(cfg, out, &mut |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub run: String,
    pub policy: String,
    pub seed: u64,
    pub episode: usize,
    pub mean_return: f64,
    pub smoothed_return: f64,
    pub recirc_rate: f64,
    pub wall_clock_s: f64,
}

/// Rebuilds `metrics.csv` from `report.json` and writes the per-episode
/// learning curves of every run to `convergence.csv`.
pub fn write_report(dir: &Path, window: usize) -> Result<(PathBuf, PathBuf)> {
    let text = fs::read_to_string(dir.join(REPORT_FILE))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    let metrics_path = dir.join(METRICS_FILE);
    write_metrics(&metrics_path, &aggregate_metrics(&report.runs))?;
    let curve_path = dir.join(CONVERGENCE_FILE);
    let mut w = csv::Writer::from_path(&curve_path)?;
    for rec in report.runs.iter().filter(|r| r.ok()) {
        let Some(file) = &rec.trace_file else { continue };
        let trace = read_trace(&dir.join(file))?;
        let returns: Vec<f64> = trace.iter().map(|r| r.mean_return).collect();
        for (row, s) in trace.iter().zip(smooth(&returns, window)) {
            w.serialize(ConvergenceRow {
                run: rec.run.label.clone(),
                policy: rec.run.policy.clone(),
                seed: rec.run.seed,
                episode: row.episode,
                mean_return: row.mean_return,
                smoothed_return: s,
                recirc_rate: row.recirc_rate,
                wall_clock_s: row.wall_clock_s,
            })?;
        }
    }
    w.flush()?;
    Ok((metrics_path, curve_path))
}
