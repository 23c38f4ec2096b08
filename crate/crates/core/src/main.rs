use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use drmarl::bandit::{train_cb, CbNet, Exploration};
use drmarl::env::TraceRecord;
use drmarl::harness::{self, ExperimentConfig};
use drmarl::induction::GroupId;
use drmarl::seed::Seeder;
use drmarl::trainer::{evaluate_policy, q_from_checkpoint, train_drmarl, StepEvent, TrainConfig, WorstCaseMode};
use drmarl::valuenet::{config_hash, Checkpoint};
use drmarl::{verify, Error};

#[derive(Parser)]
#[command(name = "drmarl", version, about = "Robust multi-agent chute allocation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment configuration (JSON); the standard defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy.
    Train {
        #[command(flatten)]
        common: Common,
        /// cb, exhaustive, random or fixed-<g>.
        #[arg(long, default_value = "random")]
        mode: String,
        #[arg(long)]
        episodes: Option<usize>,
        /// Worst-case predictor checkpoint, required by `--mode cb`.
        #[arg(long)]
        cb_checkpoint: Option<PathBuf>,
        /// Write every environment step as a JSON line to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint on every group.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the randomised property suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the worst-case group predictor.
    CbTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Rebuild metrics.csv and write convergence.csv for a finished experiment.
    Report {
        /// Experiment directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Run every policy in an experiment configuration.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configuration's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::Json(_)
            | Error::UnknownGroupKind(_)
            | Error::InvalidDistribution(_)
            | Error::DegenerateTruncation
            | Error::NotOnSimplex(_)
            | Error::Checkpoint(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::standard_matrix()),
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    episode: usize,
    group: GroupId,
    epsilon: f64,
    joint_reward: f64,
    #[serde(flatten)]
    record: Option<&'a TraceRecord>,
}

fn train(common: Common, mode: String, episodes: Option<usize>, cb_checkpoint: Option<PathBuf>, trace: Option<PathBuf>) -> CliResult {
    let mode: WorstCaseMode = mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    if mode == WorstCaseMode::Cb && cb_checkpoint.is_none() {
        return Err(Failure::Usage("--mode cb needs a trained predictor: pass --cb-checkpoint <path> (see `drmarl cb-train`)".into()));
    }
    let cfg = load_config(common.config.as_deref())?;
    let sim = cfg.simulator()?;
    let train = TrainConfig { mode, episodes: episodes.unwrap_or(cfg.train.episodes), ..cfg.train.clone() };
    let cb = match &cb_checkpoint {
        Some(p) => Some(CbNet::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    fs::create_dir_all(&common.out)?;
    let mut writer = trace.map(File::create).transpose()?.map(BufWriter::new);
    let mut io_error = None;
    let mut on_step = |ev: StepEvent<'_>| {
        if let Some(w) = writer.as_mut() {
            let line = StepLine { episode: ev.episode, group: ev.group, epsilon: ev.epsilon, joint_reward: ev.joint_reward, record: ev.record };
            let res = serde_json::to_writer(&mut *w, &line).map_err(std::io::Error::from).and_then(|_| w.write_all(b"\n"));
            if let Err(e) = res {
                io_error.get_or_insert(e);
            }
        }
    };
    let seeder = Seeder::new(common.seed).child("train").child(&mode.to_string());
    let outcome = train_drmarl(&sim, &train, cb.as_ref(), &seeder, Some(&mut on_step))?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let ck = outcome.checkpoint().with_config_hash(config_hash(&train)?);
    ck.save(&common.out.join("policy.json"))?;
    harness::write_trace(&common.out.join(format!("trace_{}.csv", slug_mode(mode))), &outcome.trace)?;
    let last = outcome.trace.last();
    println!(
        "trained {mode} for {} episodes ({} gradient steps); final mean return {:.2}; checkpoint {}",
        train.episodes,
        outcome.gradient_steps,
        last.map_or(f64::NAN, |r| r.mean_return),
        common.out.join("policy.json").display()
    );
    Ok(())
}

fn slug_mode(mode: WorstCaseMode) -> String {
    mode.to_string().replace(':', "-")
}

fn eval(common: Common, checkpoint: PathBuf, trials: Option<usize>) -> CliResult {
    let cfg = load_config(common.config.as_deref())?;
    let sim = cfg.simulator()?;
    let net = q_from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
    let name = checkpoint.file_stem().map_or("policy".into(), |s| s.to_string_lossy().into_owned());
    let report = evaluate_policy(&name, &net, &sim, trials.unwrap_or(cfg.eval_trials), &Seeder::new(common.seed))?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join(format!("eval_{name}.json")), serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    for g in &report.groups {
        println!(
            "group {}: recirculation rate {:.4} ± {:.4}, throughput {:.0}, recirculation amount {:.0}",
            g.group, g.recirc_rate.mean, g.recirc_rate.std, g.throughput.mean, g.recirc_amount.mean
        );
    }
    println!("mean over groups: {:.4} ± {:.4}", report.recirc_rate.mean, report.recirc_rate.std);
    Ok(())
}

fn run_verify(seed: u64) -> CliResult {
    let results = verify::run_all(seed)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<18} cases={:<6} worst={:<12.3e} {:.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.worst,
            r.seconds,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} suite(s) failed")));
    }
    Ok(())
}

fn cb_train(common: Common, episodes: Option<usize>) -> CliResult {
    let cfg = load_config(common.config.as_deref())?;
    let sim = cfg.simulator()?;
    let mut cb_cfg = cfg.cb.clone();
    if let Some(e) = episodes {
        cb_cfg.episodes = e;
    }
    let out = train_cb(&sim, &Exploration::Random, &cb_cfg, &Seeder::new(common.seed).child("cb-train"))?;
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("cb.json");
    out.net.to_checkpoint().with_config_hash(config_hash(&cb_cfg)?).save(&path)?;
    let mut w = csv::Writer::from_path(common.out.join("cb_losses.csv")).map_err(Error::from)?;
    w.write_record(["episode", "loss", "smoothed_loss"]).map_err(Error::from)?;
    for (i, (l, s)) in out.losses.iter().zip(drmarl::bandit::smooth(&out.losses, 10)).enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string(), s.to_string()]).map_err(Error::from)?;
    }
    w.flush()?;
    println!("predictor trained for {} episodes; group counts {:?}; checkpoint {}", cb_cfg.episodes, out.group_counts, path.display());
    Ok(())
}

fn report(out: PathBuf, window: usize) -> CliResult {
    if !out.join(harness::REPORT_FILE).exists() {
        return Err(Failure::Config(format!("{} has no {}", out.display(), harness::REPORT_FILE)));
    }
    let (metrics, curves) = harness::write_report(&out, window)?;
    println!("wrote {} and {}", metrics.display(), curves.display());
    Ok(())
}

fn experiment(config: Option<PathBuf>, out: Option<PathBuf>) -> CliResult {
    let cfg = load_config(config.as_deref())?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let report = harness::run_experiment_with(&cfg, &dir, &mut |line| eprintln!("{line}"))?;
    for row in &report.metrics {
        println!("{:<40} {:.4} ± {:.4}", row.policy, row.recirc_rate, row.recirc_rate_std);
    }
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} run(s) failed; see {}", dir.join(harness::REPORT_FILE).display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { common, mode, episodes, cb_checkpoint, trace } => train(common, mode, episodes, cb_checkpoint, trace),
        Command::Eval { common, checkpoint, trials } => eval(common, checkpoint, trials),
        Command::Verify { seed } => run_verify(seed),
        Command::CbTrain { common, episodes } => cb_train(common, episodes),
        Command::Report { out, window } => report(out, window),
        Command::Experiment { config, out } => experiment(config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
