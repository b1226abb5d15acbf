//! `rpolab` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or bad input data, 2 usage, 3 divergence,
//! 4 integrity (checkpoint version or prompt-space digest mismatch).

mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::Parser;
use rayon::prelude::*;
use rpolab_core::checkpoint::{load_checkpoint, load_policy, save_checkpoint, save_policy};
use rpolab_core::eval::{
    append_csv, compare_runs, comparison_csv, emit_comparison_csv, emit_csv, emit_plot_data,
    format_float, metrics_csv, EvalContext, StepContext,
};
use rpolab_core::trainer::{evaluate_result, DroUpdate, Objective};
use rpolab_core::{
    coverage_report, generate_synthetic, policy_metrics, train, Error, KtoConfig, Method,
    MetricsRow, PartitionMode, PolicyClass, PolicyKind, PromptSpace, ReferencePolicy, RewardLaw,
    SyntheticConfig, TrainConfig, TrainResult, TripletDataset, ValueTable,
};

use args::{
    Cli, Command, CompareArgs, EvalArgs, GenDataArgs, RefSpec, RewardLawArg, RunArgs, SweepArgs,
    TrainArgs,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} runs failed")]
    Sweep { failed: usize, total: usize, code: u8 },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Sweep { code, .. } => *code,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        e if e.is_integrity() => 4,
        Error::InvalidConfig(_)
        | Error::InvalidTemperature(_)
        | Error::StepOutOfRange { .. }
        | Error::ClassMismatch { .. }
        | Error::MissingFeatures
        | Error::NoQualifyingRecords { .. } => 2,
        _ => 1,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Compare(a) => compare(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if !(a.coverage > 0.0 && a.coverage <= 1.0) {
        return Err(CliError::Usage(format!(
            "--coverage must be in (0, 1], got {}",
            a.coverage
        )));
    }
    for (flag, value) in [
        ("--prompts", a.prompts),
        ("--responses", a.responses),
        ("--duplication", a.duplication),
    ] {
        if value == 0 {
            return Err(CliError::Usage(format!("{flag} must be at least 1")));
        }
    }
    let reward_law = match a.reward_law {
        RewardLawArg::Normal => RewardLaw::StandardNormal,
        RewardLawArg::Linear => {
            if a.feature_dim == 0 {
                return Err(CliError::Usage(
                    "--reward-law linear needs --feature-dim >= 1".into(),
                ));
            }
            if !(a.noise.is_finite() && a.noise >= 0.0) {
                return Err(CliError::Usage(format!(
                    "--noise must be finite and nonnegative, got {}",
                    a.noise
                )));
            }
            RewardLaw::FeatureLinear { noise: a.noise }
        }
    };
    let cfg = SyntheticConfig {
        prompts: a.prompts,
        responses: a.responses,
        reward_law,
        feature_dim: a.feature_dim,
        coverage: a.coverage,
        duplication: a.duplication,
    };
    let env = generate_synthetic(&cfg, a.seed)?;
    create_dir(&a.out)?;
    env.space.save(a.out.join("space.json"))?;
    env.dataset.save(a.out.join("data.jsonl"))?;
    let stats = coverage_report(&env.dataset, &env.space)?;
    println!(
        "wrote {} records over {} prompts and {} candidates to {} (fraction of prompts fully covered {}, duplicate records {})",
        env.dataset.len(),
        env.space.len(),
        env.space.total_candidates(),
        a.out.display(),
        stats.full_coverage_fraction,
        stats.total_duplicates()
    );
    Ok(())
}

fn load_inputs(space: &Path, data: &Path) -> CliResult<(Arc<PromptSpace>, TripletDataset)> {
    let space = Arc::new(PromptSpace::load(space)?);
    let ds = TripletDataset::load(data, &space)?.standardize_rewards()?;
    Ok((space, ds))
}

fn policy_kind(class: PolicyClass, hidden: usize) -> PolicyKind {
    match class {
        PolicyClass::Tabular => PolicyKind::Tabular,
        PolicyClass::Featurized => PolicyKind::Featurized { hidden },
    }
}

fn build_reference(
    spec: &RefSpec,
    space: &Arc<PromptSpace>,
    kind: PolicyKind,
) -> CliResult<ReferencePolicy> {
    Ok(match spec {
        RefSpec::Uniform => ReferencePolicy::uniform(space.clone(), kind)?,
        RefSpec::Random(seed) => ReferencePolicy::seeded_random(space.clone(), kind, *seed)?,
        RefSpec::Checkpoint(path) => ReferencePolicy::new(load_policy(path, space)?)?,
    })
}

fn train_config(method: Method, seed: u64, run: &RunArgs) -> TrainConfig {
    let mut cfg = TrainConfig::new(method);
    cfg.tau = run.tau;
    cfg.lr = run.lr;
    cfg.warmup = run.warmup;
    if run.paper_lr {
        cfg.lr = 1e-4;
        cfg.warmup = 150;
    }
    cfg.total_steps = run.steps;
    cfg.batch_size = run.batch;
    cfg.full_batch = run.full_batch;
    cfg.seed = seed;
    cfg.policy_class = run.policy;
    cfg.hidden = run.hidden;
    cfg.init = run.init;
    cfg.kto = KtoConfig {
        beta: run.beta,
        lambda_d: run.lambda_d,
        lambda_u: run.lambda_u,
        threshold: run.kto_threshold,
    };
    cfg.sft_threshold = run.sft_threshold;
    cfg.eval_interval = run.eval_interval;
    cfg.weight_decay = run.weight_decay;
    cfg.partition_mode = if run.dedup_partition {
        PartitionMode::Dedup
    } else {
        PartitionMode::Literal
    };
    cfg.recompute_partition = run.recompute_partition;
    cfg.dro_update = if run.dro_alternating {
        DroUpdate::Alternating
    } else {
        DroUpdate::Joint
    };
    cfg.record_wall_time = run.wall_clock;
    cfg.reference = run.reference.to_string();
    cfg
}

/// Plain decimal for ordinary temperatures, exponent form for extreme ones.
fn tau_label(tau: f64) -> String {
    let plain = tau.to_string();
    if plain.len() <= 12 {
        plain
    } else {
        format!("{tau:e}")
    }
}

fn summary(row: &MetricsRow) -> String {
    format!(
        "{} tau={} seed={} step={} loss={} kl_opt={} kl_opt_max={} objective_J={}",
        row.method,
        tau_label(row.tau),
        row.seed,
        row.step,
        format_float(row.loss),
        format_float(row.kl_opt),
        format_float(row.kl_opt_max),
        format_float(row.objective_j)
    )
}

fn write_run(result: &TrainResult, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    emit_csv(&result.rows, dir.join("metrics.csv"))?;
    save_checkpoint(result, dir.join("checkpoint.json"))?;
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let (space, ds) = load_inputs(&a.run.space, &a.run.data)?;
    let reference = build_reference(
        &a.run.reference,
        &space,
        policy_kind(a.run.policy, a.run.hidden),
    )?;
    let cfg = train_config(a.method, a.seed, &a.run);
    let result = train(&cfg, &ds, &space, &reference)?;
    write_run(&result, &a.out)?;
    save_policy(reference.policy(), a.out.join("reference.json"))?;
    println!("{}", summary(result.final_row()));
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let (space, ds) = load_inputs(&a.space, &a.data)?;
    let full = match load_checkpoint(&a.checkpoint, &space) {
        Ok(result) => Some(result),
        Err(Error::MalformedDocument(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let policy = match &full {
        Some(result) => result.policy.clone(),
        None => load_policy(&a.checkpoint, &space)?,
    };
    let spec = match &a.reference {
        Some(spec) => spec.clone(),
        None => {
            let beside = a
                .checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("reference.json");
            if !beside.exists() {
                return Err(CliError::Usage(format!(
                    "no reference policy: {} does not exist, pass --ref",
                    beside.display()
                )));
            }
            RefSpec::Checkpoint(beside)
        }
    };
    let kind = match policy.kind() {
        PolicyKind::Featurized { .. } => policy_kind(PolicyClass::Featurized, a.hidden),
        PolicyKind::Tabular => PolicyKind::Tabular,
    };
    let reference = build_reference(&spec, &space, kind)?;

    let row = match &full {
        Some(result) => {
            let ctx = EvalContext::from_dataset(&ds, &space, &reference, result.config.tau)?;
            evaluate_result(result, &ds, &reference, &ctx)?
        }
        None => {
            let mut cfg = TrainConfig::new(a.method);
            cfg.tau = a.tau;
            cfg.policy_class = policy.class();
            let ctx = EvalContext::from_dataset(&ds, &space, &reference, cfg.tau)?;
            let values = a
                .method
                .has_value_table()
                .then(|| ValueTable::zeros(space.len()));
            let loss = Objective::new(&cfg, &ds, &reference)?.full_loss(&policy, values.as_ref())?;
            policy_metrics(
                &policy,
                &reference,
                &ctx,
                &StepContext {
                    step: 0,
                    method: a.method,
                    seed: 0,
                    loss,
                    lr: 0.0,
                    wall_ms: 0,
                },
            )?
        }
    };

    let csv = metrics_csv(std::slice::from_ref(&row));
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    let values = lines.next().unwrap_or_default();
    let pairs: Vec<String> = header
        .split(',')
        .zip(values.split(','))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!("{}", pairs.join(" "));
    if let Some(path) = &a.append {
        append_csv(&[row], path)?;
    }
    Ok(())
}

fn run_dir(out: &Path, method: Method, tau: f64, seed: u64) -> PathBuf {
    out.join("runs")
        .join(format!("{}_tau{}_seed{seed}", method.token(), tau_label(tau)))
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    if a.methods.is_empty() || a.tau_grid.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Usage(
            "--methods, --tau-grid and --seeds must be non-empty".into(),
        ));
    }
    let (space, ds) = load_inputs(&a.run.space, &a.run.data)?;
    let reference = build_reference(
        &a.run.reference,
        &space,
        policy_kind(a.run.policy, a.run.hidden),
    )?;
    create_dir(&a.out)?;
    save_policy(reference.policy(), a.out.join("reference.json"))?;

    let mut jobs = Vec::new();
    for &method in &a.methods {
        for &tau in &a.tau_grid {
            for &seed in &a.seeds {
                jobs.push(train_config(method, seed, &RunArgs { tau, ..a.run.clone() }));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    let outcomes: Vec<CliResult<TrainResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let result = train(cfg, &ds, &space, &reference)?;
                write_run(&result, &run_dir(&a.out, cfg.method, cfg.tau, cfg.seed))?;
                Ok(result)
            })
            .collect()
    });

    let mut results = Vec::new();
    let mut failures = String::from("method,tau,seed,exit_code,error\n");
    let mut first_code = None;
    for (cfg, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(result) => {
                println!("{}", summary(result.final_row()));
                results.push(result);
            }
            Err(e) => {
                let code = e.exit_code();
                first_code.get_or_insert(code);
                eprintln!(
                    "run {} tau={} seed={} failed: {e}",
                    cfg.method,
                    tau_label(cfg.tau),
                    cfg.seed
                );
                failures.push_str(&format!(
                    "{},{},{},{code},\"{}\"\n",
                    cfg.method,
                    format_float(cfg.tau),
                    cfg.seed,
                    e.to_string().replace('"', "'")
                ));
            }
        }
    }
    if !results.is_empty() {
        let rows = compare_runs(&results)?;
        emit_comparison_csv(&rows, a.out.join("comparison.csv"))?;
        emit_plot_data(&results, a.out.join("plots"))?;
    }
    match first_code {
        None => {
            println!(
                "{} runs finished; comparison written to {}",
                results.len(),
                a.out.join("comparison.csv").display()
            );
            Ok(())
        }
        Some(code) => {
            let path = a.out.join("failures.csv");
            fs::write(&path, failures).map_err(|e| Error::Io { path, source: e })?;
            Err(CliError::Sweep {
                failed: jobs.len() - results.len(),
                total: jobs.len(),
                code,
            })
        }
    }
}

fn find_checkpoints(path: &Path, found: &mut Vec<PathBuf>) -> CliResult<()> {
    if path.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io)?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io)?;
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            find_checkpoints(&entry, found)?;
        } else if entry.file_name().is_some_and(|n| n == "checkpoint.json") {
            found.push(entry);
        }
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> CliResult<()> {
    let space = Arc::new(PromptSpace::load(&a.space)?);
    let mut paths = Vec::new();
    for path in &a.runs {
        find_checkpoints(path, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(CliError::Usage("no checkpoints found".into()));
    }
    let results = paths
        .iter()
        .map(|p| load_checkpoint(p, &space))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = compare_runs(&results)?;
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            emit_comparison_csv(&rows, dir.join("comparison.csv"))?;
            emit_plot_data(&results, dir.join("plots"))?;
            println!(
                "compared {} runs into {} rows",
                results.len(),
                rows.len()
            );
        }
        None => print!("{}", comparison_csv(&rows)),
    }
    Ok(())
}
