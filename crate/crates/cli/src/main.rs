mod overrides;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rlrtc::evalharness::{episode_seed, run_episode, Evaluation};
use rlrtc::neural::{load_checkpoint, save_checkpoint};
use rlrtc::ppo::{initial_policy, train, LogRow};
use rlrtc::{
    compare, evaluate, sample_trace, EnvConfig, Estimator, NetworkTrace, OracleEstimator, PolicyEstimator,
    PolicyParams, TraceSet, UkfEstimator,
};

use overrides::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<rlrtc::Error> for CliError {
    fn from(e: rlrtc::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "rlrtc", version, about = "Bandwidth estimation for simulated real-time calls")]
struct Cli {
    /// Seed for trace generation, training and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Configuration override, repeatable (e.g. `--set ppo.lr=1e-4`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorKind {
    Ukf,
    Policy,
    Oracle,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic network traces as `trace_<seed>_<idx>.txt`.
    GenTraces {
        #[arg(long)]
        out: PathBuf,
        /// Number of traces (overrides `gen.count`).
        #[arg(long, short = 'n')]
        count: Option<usize>,
    },
    /// Train the policy with PPO on a trace directory.
    Train {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the best checkpoint (default `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out traces for best-checkpoint selection.
        #[arg(long)]
        eval_traces: Option<PathBuf>,
    },
    /// Evaluate one estimator and write its summary row.
    Eval {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `policy` with a checkpoint and `ukf` without.
        #[arg(long, value_enum)]
        estimator: Option<EstimatorKind>,
        #[arg(long)]
        emit_series: bool,
    },
    /// Paired comparison of a baseline and a candidate estimator.
    Compare {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ukf")]
        baseline: EstimatorKind,
        #[arg(long, value_enum, default_value = "policy")]
        candidate: EstimatorKind,
        #[arg(long)]
        emit_series: bool,
    },
    /// Replay one trace and write its per-step series and simulator event log.
    Replay {
        /// A single trace file.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorKind>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::from_pairs(&cli.overrides)?;
    match cli.command {
        Command::GenTraces { out, count } => gen_traces(&settings, cli.seed, &out, count.unwrap_or(settings.count)),
        Command::Train {
            traces,
            out,
            checkpoint,
            eval_traces,
        } => cmd_train(&settings, cli.seed, &traces, &out, checkpoint, eval_traces),
        Command::Eval {
            traces,
            out,
            checkpoint,
            estimator,
            emit_series,
        } => {
            let kind = estimator.unwrap_or(if checkpoint.is_some() {
                EstimatorKind::Policy
            } else {
                EstimatorKind::Ukf
            });
            let suite = load_traces(&traces)?;
            let env = settings.env_config(suite.traces()[0].clone());
            let policy = load_policy_if(kind, checkpoint.as_deref())?;
            let ev = run_eval(kind, policy, &suite, &env, cli.seed)?;
            create_dir(&out)?;
            let mut csv = String::from(rlrtc::MetricsSummary::CSV_HEADER);
            csv.push('\n');
            csv.push_str(&ev.summary.to_csv());
            csv.push('\n');
            write_file(&out.join("summary.csv"), &csv)?;
            if emit_series {
                write_series(&out.join("series").join(&ev.summary.estimator), &ev)?;
            }
            println!("{}", csv.trim_end());
            Ok(())
        }
        Command::Compare {
            traces,
            out,
            checkpoint,
            baseline,
            candidate,
            emit_series,
        } => {
            let suite = load_traces(&traces)?;
            let env = settings.env_config(suite.traces()[0].clone());
            let mut runs = Vec::new();
            for kind in [baseline, candidate] {
                let policy = load_policy_if(kind, checkpoint.as_deref())?;
                runs.push(run_eval(kind, policy, &suite, &env, cli.seed)?);
            }
            // Same estimator on both sides still needs distinct row labels.
            if baseline == candidate {
                runs[0].summary.estimator.push_str("_a");
                runs[1].summary.estimator.push_str("_b");
            }
            let cmp = compare(&runs[0].summary, &runs[1].summary)?;
            create_dir(&out)?;
            write_file(&out.join("summary.csv"), &cmp.summary_csv())?;
            write_file(&out.join("deltas.csv"), &cmp.deltas_csv())?;
            if emit_series {
                for ev in &runs {
                    write_series(&out.join("series").join(&ev.summary.estimator), ev)?;
                }
            }
            print!("{}", cmp.summary_csv());
            Ok(())
        }
        Command::Replay {
            trace,
            out,
            checkpoint,
            estimator,
        } => {
            let kind = estimator.unwrap_or(if checkpoint.is_some() {
                EstimatorKind::Policy
            } else {
                EstimatorKind::Ukf
            });
            let t = Arc::new(read_trace(&trace)?);
            let policy = load_policy_if(kind, checkpoint.as_deref())?;
            let mut env = settings.env_config(t.clone());
            env.call.sim.record_log = true;
            let mut est = make_estimator(kind, policy.as_ref(), &t, &env);
            let id = trace_id(&trace);
            let ep = run_episode(est.as_mut(), &env, &id, t.clone(), episode_seed(cli.seed, 0))?;
            create_dir(&out)?;
            write_file(&out.join("series.csv"), &ep.series_csv())?;
            // Re-run with logging to capture the simulator event stream.
            let log = event_log(&env, kind, policy.as_ref(), &t, cli.seed)?;
            write_file(&out.join("events.csv"), &log)?;
            println!("{} steps written to {}", ep.steps.len(), out.display());
            Ok(())
        }
    }
}

fn gen_traces(settings: &Settings, seed: u64, out: &Path, count: usize) -> Result<(), CliError> {
    create_dir(out)?;
    for idx in 0..count {
        let cfg = rlrtc::TraceGenConfig {
            seed: episode_seed(seed, idx),
            ..settings.gen.clone()
        };
        let trace = sample_trace(&cfg)?;
        let path = out.join(format!("trace_{seed}_{idx}.txt"));
        write_file(&path, &trace.serialize())?;
    }
    println!("wrote {count} traces to {}", out.display());
    Ok(())
}

fn cmd_train(
    settings: &Settings,
    seed: u64,
    traces: &Path,
    out: &Path,
    checkpoint: Option<PathBuf>,
    eval_traces: Option<PathBuf>,
) -> Result<(), CliError> {
    let corpus = load_traces(traces)?;
    let env = settings.env_config(corpus.traces()[0].clone());
    let mut cfg = settings.train_config(env);
    if let Some(dir) = eval_traces {
        cfg.eval_traces = load_traces(&dir)?;
    }
    create_dir(out)?;
    let ckpt = checkpoint.unwrap_or_else(|| out.join("checkpoint.bin"));
    let log_path = out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    writeln!(log, "{}", LogRow::CSV_HEADER).map_err(|e| io_err(&log_path, e))?;
    log.flush().map_err(|e| io_err(&log_path, e))?;

    // Written before any training so an aborted run still leaves a
    // loadable checkpoint next to its partial log.
    save_checkpoint(initial_policy(&cfg, seed).store(), &ckpt)?;

    let outcome = train(&cfg, &corpus, seed, &mut |row: &LogRow, best: Option<&PolicyParams>| {
        writeln!(log, "{}", row.to_csv())?;
        log.flush()?;
        if let Some(p) = best {
            save_checkpoint(p.store(), &ckpt)?;
        }
        eprintln!(
            "iter {:>4}  steps {:>8}  reward {:>8.4}  value_loss {:.4}",
            row.iteration, row.steps, row.mean_reward, row.value_loss
        );
        Ok(())
    })?;
    save_checkpoint(outcome.best.store(), &ckpt)?;
    save_checkpoint(outcome.last.store(), &out.join("last.bin"))?;
    println!(
        "trained {} iterations; best eval reward {:.4}; checkpoint {}",
        outcome.log.len(),
        outcome.best_eval_reward,
        ckpt.display()
    );
    Ok(())
}

fn load_policy_if(kind: EstimatorKind, checkpoint: Option<&Path>) -> Result<Option<Arc<PolicyParams>>, CliError> {
    if kind != EstimatorKind::Policy {
        return Ok(None);
    }
    let path = checkpoint.ok_or_else(|| CliError::Usage("the policy estimator needs --checkpoint".into()))?;
    if !path.exists() {
        return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    let store = load_checkpoint(path).map_err(|e| match e {
        rlrtc::Error::Io(io) => io_err(path, io),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })?;
    let params = PolicyParams::from_store(store)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(Some(Arc::new(params)))
}

fn make_estimator(
    kind: EstimatorKind,
    policy: Option<&Arc<PolicyParams>>,
    trace: &Arc<NetworkTrace>,
    env: &EnvConfig,
) -> Box<dyn Estimator> {
    match kind {
        EstimatorKind::Ukf => Box::new(UkfEstimator::default()),
        EstimatorKind::Oracle => Box::new(OracleEstimator::new(trace.clone(), env.step_ms)),
        EstimatorKind::Policy => Box::new(PolicyEstimator::new(
            policy.expect("policy loaded").clone(),
            env.scaling,
            env.action_map,
        )),
    }
}

fn kind_name(kind: EstimatorKind) -> &'static str {
    match kind {
        EstimatorKind::Ukf => "ukf",
        EstimatorKind::Policy => "policy",
        EstimatorKind::Oracle => "oracle",
    }
}

fn run_eval(
    kind: EstimatorKind,
    policy: Option<Arc<PolicyParams>>,
    suite: &TraceSet,
    env: &EnvConfig,
    seed: u64,
) -> Result<Evaluation, CliError> {
    Ok(evaluate(
        kind_name(kind),
        |t| make_estimator(kind, policy.as_ref(), t, env),
        suite,
        env,
        seed,
    )?)
}

fn event_log(
    env: &EnvConfig,
    kind: EstimatorKind,
    policy: Option<&Arc<PolicyParams>>,
    trace: &Arc<NetworkTrace>,
    seed: u64,
) -> Result<String, CliError> {
    let mut e = rlrtc::BweEnv::new(env.clone())?;
    e.set_episode(trace.clone(), episode_seed(seed, 0));
    let mut est = make_estimator(kind, policy, trace, env);
    est.reset();
    let mut step = e.reset_full()?;
    while !step.done {
        let estimate = est.observe(&step.info.window);
        step = e.step_bandwidth(estimate)?;
    }
    Ok(e.call()
        .and_then(|c| c.simulator().event_log_csv())
        .unwrap_or_default()
        .to_string())
}

fn trace_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_trace(path: &Path) -> Result<NetworkTrace, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    NetworkTrace::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// All `*.txt` traces in `dir`, sorted by file name.
fn load_traces(dir: &Path) -> Result<TraceSet, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("trace directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!("no .txt traces in {}", dir.display())));
    }
    let mut set = TraceSet::new();
    for p in paths {
        let trace = read_trace(&p)?;
        set.push(trace_id(&p), Arc::new(trace));
    }
    Ok(set)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_series(dir: &Path, ev: &Evaluation) -> Result<(), CliError> {
    create_dir(dir)?;
    for ep in &ev.episodes {
        write_file(&dir.join(format!("{}.csv", ep.trace_id)), &ep.series_csv())?;
    }
    Ok(())
}
