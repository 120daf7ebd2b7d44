//! `rmab`: generate synthetic RMAB datasets, train predictors (two-stage or
//! decision-focused), evaluate checkpoints and run the scaling benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 numeric abort, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use rmab_core::bench::{run_bench, BenchConfig};
use rmab_core::datagen::{dataset_hash, generate_dataset, read_dataset, write_dataset, DatasetSpec, Observability};
use rmab_core::predictor::PredictorModel;
use rmab_core::training::{
    evaluate_baseline, evaluate_instance, init_model, split_instances, train, Baseline, EvalConfig, EvalSignal,
    KernelSource, Method, Split, TrainConfig,
};

#[derive(Parser)]
#[command(name = "rmab", version, about = "Decision-focused learning for restless multi-armed bandits")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its SHA-256 hash.
    Generate(GenerateArgs),
    /// Train a predictor.
    ///
    /// Writes checkpoint.json (final weights), best_checkpoint.json (best
    /// validation epoch), summary.json and train_log.csv with columns
    /// epoch,split,nll,is_eval,sim_eval,ms_per_step,soft_is_eval.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the true kernels) on one split and print
    /// metrics JSON, including the no-action and random baselines.
    Evaluate(EvaluateArgs),
    /// Time one decision-focused gradient step across arm and state counts.
    ///
    /// CSV columns: sweep,arms,states,mean_ms,std_ms,repetitions,reference_ms,
    /// followed by comment lines with the fitted log-log slopes.
    Bench(BenchArgs),
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unrecognized value `{s}`"))
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    num_instances: usize,
    #[arg(long, default_value_t = 100)]
    arms: usize,
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    trajectories: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// full | collapsing
    #[arg(long, default_value = "full", value_parser = parse_kebab::<Observability>)]
    observability: Observability,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// two-stage | df-whittle
    #[arg(long, value_parser = parse_kebab::<Method>)]
    method: Method,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    /// Soft top-k entropic temperature.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Discount (default: the dataset's).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// cwpdis | single-trajectory
    #[arg(long, default_value = "cwpdis", value_parser = parse_kebab::<EvalSignal>)]
    eval_signal: EvalSignal,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 100)]
    sim_episodes: usize,
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "truth_oracle", conflicts_with = "truth_oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate policies built from the true kernels instead of a checkpoint.
    #[arg(long)]
    truth_oracle: bool,
    /// train | validation | test
    #[arg(long, default_value = "test", value_parser = parse_kebab::<Split>)]
    split: Split,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// cwpdis | single-trajectory
    #[arg(long, default_value = "cwpdis", value_parser = parse_kebab::<EvalSignal>)]
    eval_signal: EvalSignal,
    #[arg(long, default_value_t = 100)]
    sim_episodes: usize,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Arm counts of the sweep over arms.
    #[arg(long, default_value = "10,20,40,80", value_delimiter = ',')]
    arms: Vec<usize>,
    /// State counts of the sweep over states.
    #[arg(long, default_value = "2,3,4,5", value_delimiter = ',')]
    states: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    arms_for_states: usize,
    #[arg(long, default_value_t = 2)]
    states_for_arms: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value_t = 10)]
    trajectories: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(UsageError(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let spec = DatasetSpec {
        num_instances: a.num_instances,
        arms: a.arms,
        states: a.states,
        budget: a.budget,
        horizon: a.horizon,
        gamma: a.gamma,
        trajectories: a.trajectories,
        feature_dim: a.feature_dim,
        seed: a.seed,
        observability: a.observability,
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    prepare_out_dir(&a.out, a.force)?;
    let data = generate_dataset(&spec)?;
    write_dataset(&a.out, &data)?;
    println!("{}", dataset_hash(&a.out)?);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig {
        method: a.method,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        gamma: a.gamma,
        seed: a.seed,
        eval_signal: a.eval_signal,
        hidden_dim: a.hidden_dim,
        dropout: a.dropout,
        sim_episodes: a.sim_episodes,
        log_every: a.log_every,
        ..Default::default()
    };
    cfg.soft_topk.epsilon = a.epsilon;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let data = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    prepare_out_dir(&a.out, a.force)?;
    let model = init_model(&data, &cfg);
    let outcome = train(&data, model, &cfg)?;
    write_text(&a.out.join("checkpoint.json"), &outcome.model.to_checkpoint_json()?)?;
    write_text(&a.out.join("best_checkpoint.json"), &outcome.best_model.to_checkpoint_json()?)?;
    write_text(&a.out.join("train_log.csv"), &outcome.log.to_csv())?;
    write_text(&a.out.join("summary.json"), &outcome.summary_json(&cfg)?)?;
    eprintln!("best validation epoch {}", outcome.best_epoch);
    Ok(())
}

fn mean_se(xs: &[f64]) -> Value {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return json!({ "mean": null, "std_error": null });
    }
    let mean = xs.iter().sum::<f64>() / n;
    let se = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    json!({ "mean": mean, "std_error": se })
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let data = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let model = match &a.checkpoint {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let m = PredictorModel::from_checkpoint_json(&text)?;
            if m.input_dim != data.spec.feature_dim || m.num_states != data.spec.states {
                bail!(UsageError(format!(
                    "checkpoint expects {} features and {} states, dataset has {} and {}",
                    m.input_dim, m.num_states, data.spec.feature_dim, data.spec.states
                )));
            }
            Some(m)
        }
        None => None,
    };
    let source = match &model {
        Some(m) => KernelSource::Model(m),
        None => KernelSource::Truth,
    };
    let mut train_cfg = TrainConfig {
        seed: a.seed,
        gamma: a.gamma,
        eval_signal: a.eval_signal,
        sim_episodes: a.sim_episodes,
        ..Default::default()
    };
    train_cfg.soft_topk.epsilon = a.epsilon;
    train_cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let cfg = EvalConfig::from_train(&train_cfg);
    let splits = split_instances(data.instances.len(), a.seed);

    let mut rows = Vec::new();
    let mut cols: [Vec<f64>; 5] = Default::default();
    let mut base: [[Vec<f64>; 2]; 2] = Default::default();
    for &j in splits.get(a.split) {
        let inst = &data.instances[j];
        let m = evaluate_instance(source, inst, &data.spec, &cfg, j)?;
        let no_action = evaluate_baseline(Baseline::NoAction, inst, &data.spec, &cfg, j)?;
        let random = evaluate_baseline(Baseline::Random, inst, &data.spec, &cfg, j)?;
        for (c, v) in cols.iter_mut().zip([m.nll, m.is_eval, m.soft_is_eval, m.sim_eval, m.sim_std_error]) {
            c.push(v);
        }
        for (b, r) in base.iter_mut().zip([&no_action, &random]) {
            b[0].push(r.is_eval);
            b[1].push(r.sim_eval);
        }
        rows.push(json!({
            "instance": j,
            "metrics": m,
            "no_action": no_action,
            "random": random,
        }));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let report = json!({
        "split": a.split.name(),
        "source": if model.is_some() { "checkpoint" } else { "truth-oracle" },
        "instances": rows,
        "aggregate": {
            "nll": mean_se(&cols[0]),
            "is_eval": mean_se(&cols[1]),
            "soft_is_eval": mean_se(&cols[2]),
            "sim_eval": mean_se(&cols[3]),
        },
        "baselines": {
            "no_action": { "is_eval": mean_se(&base[0][0]), "sim_eval": mean_se(&base[0][1]) },
            "random": { "is_eval": mean_se(&base[1][0]), "sim_eval": mean_se(&base[1][1]) },
        },
        "improvement_over_no_action": {
            "is_eval": mean_se(&diff(&cols[1], &base[0][0])),
            "sim_eval": mean_se(&diff(&cols[3], &base[0][1])),
        },
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(path) => write_text(path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        arms: a.arms,
        states: a.states,
        arms_for_states: a.arms_for_states,
        states_for_arms: a.states_for_arms,
        repetitions: a.repetitions,
        horizon: a.horizon,
        trajectories: a.trajectories,
        gamma: a.gamma,
        seed: a.seed,
    };
    let report = run_bench(&cfg)?;
    let csv = report.to_csv();
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<rmab_core::Error>() {
        if e.is_numeric() {
            return 2;
        }
        if e.is_io() {
            return 3;
        }
        return 1;
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return 3;
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
