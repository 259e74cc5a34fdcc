//! `nco`: seeded TSP experiments from the command line.
//!
//! Five subcommands cover the full workflow: `solve` runs one named method
//! on a generated instance, `bound` prints Lagrangian lower bounds, `train`
//! produces an immutable run directory (config, per-epoch log and
//! checkpoints, completion marker), `eval` exports a gap table CSV for a
//! checkpoint, and `matrix` crosses tagged checkpoints with test sizes.
//!
//! Everything is deterministic: the master seed comes from a flag where the
//! command has one, else the `NCO_SEED` environment variable, else 2024.
//! Exit status is 0 on success, 2 for usage or contract errors, 1 for
//! internal errors; failures print a one-line JSON object on stderr.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use nco_core::curriculum::{StrategyContext, StrategyRegistry};
use nco_core::eval::{aggregate_runs, build_performance_matrix, evaluate_policy, RefMode, MATRIX_CAP};
use nco_core::oracles::{lower_bound, AscentConfig};
use nco_core::policy::{init_params, load_checkpoint, save_checkpoint, PolicyHyper};
use nco_core::seeds::derive_seed;
use nco_core::solvers::SolverRegistry;
use nco_core::trainer::{train_run_from, TrainConfig};
use nco_core::tsp::{build_distance_matrix, generate_instance, instance_from_json, Instance};
use nco_core::{Error, Result};

/// Master seed when neither a flag nor `NCO_SEED` supplies one.
const DEFAULT_SEED: u64 = 2024;
const SEED_ENV: &str = "NCO_SEED";
/// Instances per (checkpoint, size) cell in the matrix command, which has no
/// instance-count flag.
const MATRIX_INSTANCES: usize = 64;

#[derive(Parser)]
#[command(name = "nco", version, about = "Seeded TSP experiments: solve, bound, train, eval, matrix")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one generated instance with a named method.
    Solve {
        /// Problem size (cities).
        #[arg(long)]
        n: usize,
        /// Instance seed; falls back to NCO_SEED, then 2024.
        #[arg(long)]
        seed: Option<u64>,
        /// One of: exhaustive, dp, nn, 2opt.
        #[arg(long)]
        method: String,
    },
    /// Lower bounds for a generated instance or a JSON-lines instance file.
    Bound {
        /// Problem size of a generated instance.
        #[arg(long)]
        n: Option<usize>,
        /// Seed for the generated instance; only valid with --n.
        #[arg(long)]
        seed: Option<u64>,
        /// File with one instance JSON object per line.
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Train a policy under a sampling strategy into a fresh run directory.
    Train {
        /// Full spec like `staircase:4..20,alpha=0.05`, or a bare kind
        /// (fixed|uniform|classic|staircase) composed with --sizes/--alpha.
        #[arg(long)]
        strategy: String,
        /// Size range `A..B` (or single size for `fixed`); only with a bare
        /// --strategy kind.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        /// Batches per epoch.
        #[arg(long, default_value_t = TrainConfig::default().batches_per_epoch)]
        batches: usize,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
        /// Staircase advancement threshold; only with a bare --strategy kind.
        #[arg(long)]
        alpha: Option<f64>,
        /// Master seed; falls back to NCO_SEED, then 2024.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory to create; refused if it already holds a completed run.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from instead of a fresh initialization.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's greedy optimality gaps into a CSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sizes to evaluate: `A..B`, single values, or comma-separated mix.
        #[arg(long)]
        sizes: String,
        /// Instances per size.
        #[arg(long, default_value_t = 64)]
        n_instances: usize,
        /// Reference routing: paper_faithful or exact_preferred.
        #[arg(long, default_value = "paper_faithful")]
        mode: String,
        /// Repeat the evaluation this many times and aggregate.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gap grid of train-size-tagged checkpoints against test sizes.
    Matrix {
        /// Directory of checkpoints named like `<stem>-n<size>.ckpt`.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Sizes to evaluate: `A..B`, single values, or comma-separated mix.
        #[arg(long)]
        test_sizes: String,
        /// Export ceiling for the capped grid.
        #[arg(long, default_value_t = MATRIX_CAP)]
        cap: f64,
        /// Directory for matrix_capped.csv and matrix_raw.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                err.exit();
            }
            fail(2, &err.render().to_string());
        }
    };
    if let Err(err) = run(cli) {
        fail(exit_code(&err), &err.to_string());
    }
}

/// Prints `{"error": …}` on stderr and exits with the given status.
fn fail(code: i32, message: &str) -> ! {
    eprintln!("{}", serde_json::json!({ "error": message }));
    std::process::exit(code);
}

/// 2 for anything the invoker can fix (arguments, files, configuration),
/// 1 for violated internal invariants.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::SizeBelowMinimum { .. }
        | Error::SizeAboveCap { .. }
        | Error::MalformedInstance { .. }
        | Error::UnknownMethod { .. }
        | Error::StrategyParse { .. }
        | Error::Config(_)
        | Error::Checkpoint { .. }
        | Error::Io(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Solve { n, seed, method } => cmd_solve(n, seed, &method),
        Cmd::Bound { n, seed, instances } => cmd_bound(n, seed, instances.as_deref()),
        Cmd::Train {
            strategy,
            sizes,
            epochs,
            batches,
            batch_size,
            alpha,
            seed,
            out,
            init_from,
        } => cmd_train(TrainArgs {
            strategy,
            sizes,
            epochs,
            batches,
            batch_size,
            alpha,
            seed,
            out,
            init_from,
        }),
        Cmd::Eval {
            checkpoint,
            sizes,
            n_instances,
            mode,
            runs,
            out,
        } => cmd_eval(&checkpoint, &sizes, n_instances, &mode, runs, &out),
        Cmd::Matrix {
            checkpoints,
            test_sizes,
            cap,
            out,
        } => cmd_matrix(&checkpoints, &test_sizes, cap, &out),
    }
}

/// Flag seed, else `NCO_SEED`, else the default.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text.trim().parse().map_err(|_| {
            Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{text}'"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_SEED),
        Err(err) => Err(Error::Config(format!("{SEED_ENV}: {err}"))),
    }
}

#[derive(Serialize)]
struct SolveOut<'a> {
    length: f64,
    tour: Vec<usize>,
    method: &'a str,
}

fn cmd_solve(n: usize, seed: Option<u64>, method: &str) -> Result<()> {
    let seed = resolve_seed(seed)?;
    let registry = SolverRegistry::with_builtins();
    let solver = registry.get(method)?;
    let inst = generate_instance(n, seed)?;
    let dm = build_distance_matrix(&inst);
    let sol = solver.solve(&dm)?;
    let line = serde_json::to_string(&SolveOut {
        length: sol.length,
        tour: sol.tour.to_external(),
        method: sol.method,
    })?;
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct BoundOut {
    bound: f64,
    iterations: usize,
}

fn cmd_bound(n: Option<usize>, seed: Option<u64>, instances: Option<&Path>) -> Result<()> {
    let insts = match (n, instances) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "pass either --n or --instances, not both".into(),
            ))
        }
        (None, None) => return Err(Error::Config("pass --n or --instances".into())),
        (Some(n), None) => vec![generate_instance(n, resolve_seed(seed)?)?],
        (None, Some(path)) => {
            if seed.is_some() {
                return Err(Error::Config(
                    "--seed only applies to generated instances; drop it with --instances".into(),
                ));
            }
            read_instances(path)?
        }
    };
    let cfg = AscentConfig::default();
    for inst in &insts {
        let dm = build_distance_matrix(inst);
        let result = lower_bound(&dm, &cfg)?;
        let line = serde_json::to_string(&BoundOut {
            bound: result.bound,
            iterations: result.iterations,
        })?;
        println!("{line}");
    }
    Ok(())
}

/// Parses a JSON-lines instance file; blank lines are allowed, zero
/// instances are not.
fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path)?;
    let mut insts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        insts.push(instance_from_json(line).map_err(|err| Error::MalformedInstance {
            reason: format!("{}:{}: {err}", path.display(), idx + 1),
        })?);
    }
    if insts.is_empty() {
        return Err(Error::MalformedInstance {
            reason: format!("{} holds no instances", path.display()),
        });
    }
    Ok(insts)
}

struct TrainArgs {
    strategy: String,
    sizes: Option<String>,
    epochs: usize,
    batches: usize,
    batch_size: usize,
    alpha: Option<f64>,
    seed: Option<u64>,
    out: PathBuf,
    init_from: Option<PathBuf>,
}

/// Everything a run needs to be reproduced, written as `config.json`.
#[derive(Serialize)]
struct ExperimentConfig<'a> {
    config_version: u32,
    strategy: &'a str,
    train: &'a TrainConfig,
    hyper: &'a PolicyHyper,
    policy_seed: u64,
    init_from: Option<String>,
    out: String,
}

/// A full spec string passes through; a bare kind is composed with --sizes
/// and --alpha. Mixing both forms is refused rather than second-guessed.
fn compose_strategy(strategy: &str, sizes: Option<&str>, alpha: Option<f64>) -> Result<String> {
    if strategy.contains(':') {
        if sizes.is_some() || alpha.is_some() {
            return Err(Error::Config(
                "--sizes/--alpha conflict with a full --strategy spec; \
                 pass either the spec or the parts"
                    .into(),
            ));
        }
        return Ok(strategy.to_string());
    }
    let sizes = sizes.ok_or_else(|| {
        Error::Config(format!(
            "--strategy {strategy} needs --sizes (a range like 4..20, or one size for fixed)"
        ))
    })?;
    let mut spec = format!("{strategy}:{sizes}");
    if let Some(alpha) = alpha {
        spec.push_str(&format!(",alpha={alpha}"));
    }
    Ok(spec)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let spec = compose_strategy(&args.strategy, args.sizes.as_deref(), args.alpha)?;
    let config = TrainConfig {
        batch_size: args.batch_size,
        batches_per_epoch: args.batches,
        epochs: args.epochs,
        seed,
        ..TrainConfig::default()
    };
    let ctx = StrategyContext {
        master_seed: seed,
        batches_per_epoch: args.batches,
        epochs: args.epochs,
    };
    let mut strategy = StrategyRegistry::with_builtins().parse(&spec, &ctx)?;

    let out = args.out;
    if out.join("DONE").exists() {
        return Err(Error::Config(format!(
            "run directory {} already holds a completed run; pick a fresh --out",
            out.display()
        )));
    }
    fs::create_dir_all(&out)?;

    let initial = match &args.init_from {
        Some(path) => load_checkpoint(path)?,
        None => init_params(&PolicyHyper::default(), derive_seed(seed, "policy-init", &[]))?,
    };
    let doc = ExperimentConfig {
        config_version: 1,
        strategy: &spec,
        train: &config,
        hyper: initial.hyper(),
        policy_seed: initial.seed(),
        init_from: args.init_from.as_ref().map(|p| p.display().to_string()),
        out: out.display().to_string(),
    };
    let mut config_json = serde_json::to_string_pretty(&doc)?;
    config_json.push('\n');
    fs::write(out.join("config.json"), config_json)?;

    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    train_run_from(&config, strategy.as_mut(), initial, |report, params| {
        let mut line = serde_json::to_string(report)?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        save_checkpoint(params, &out.join(format!("epoch_{}.ckpt", report.epoch)))?;
        Ok(())
    })?;
    log.flush()?;
    fs::write(out.join("DONE"), b"")?;
    Ok(())
}

/// `A..B` (inclusive), single values, and comma-separated mixes of the two;
/// the result is sorted and deduplicated.
fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let mut sizes = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(Error::Config(format!("empty size entry in '{text}'")));
        }
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: usize = lo
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad size range '{part}'")))?;
            let hi: usize = hi
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad size range '{part}'")))?;
            if lo > hi {
                return Err(Error::Config(format!("size range '{part}' runs backwards")));
            }
            sizes.extend(lo..=hi);
        } else {
            sizes.push(
                part.parse()
                    .map_err(|_| Error::Config(format!("bad size '{part}'")))?,
            );
        }
    }
    sizes.sort_unstable();
    sizes.dedup();
    Ok(sizes)
}

fn parse_mode(text: &str) -> Result<RefMode> {
    match text {
        "paper_faithful" => Ok(RefMode::PaperFaithful),
        "exact_preferred" => Ok(RefMode::ExactPreferred),
        other => Err(Error::Config(format!(
            "unknown mode '{other}'; expected paper_faithful or exact_preferred"
        ))),
    }
}

fn cmd_eval(
    checkpoint: &Path,
    sizes: &str,
    n_instances: usize,
    mode: &str,
    runs: usize,
    out: &Path,
) -> Result<()> {
    if runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let seed = resolve_seed(None)?;
    let params = load_checkpoint(checkpoint)?;
    let sizes = parse_sizes(sizes)?;
    let mode = parse_mode(mode)?;
    let run_id = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint")
        .to_string();
    let table = if runs == 1 {
        evaluate_policy(&params, &sizes, n_instances, seed, mode, &run_id)?
    } else {
        let tables = (0..runs)
            .map(|_| evaluate_policy(&params, &sizes, n_instances, seed, mode, &run_id))
            .collect::<Result<Vec<_>>>()?;
        aggregate_runs(&tables)?
    };
    fs::write(out, table.to_csv())?;
    Ok(())
}

/// Train size from a checkpoint named `<stem>-n<size>.ckpt`.
fn parse_train_tag(path: &Path) -> Result<usize> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("unreadable checkpoint name {}", path.display())))?;
    let tag = stem
        .rfind("-n")
        .map(|pos| &stem[pos + 2..])
        .filter(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .ok_or_else(|| {
            Error::Config(format!(
                "checkpoint '{}' lacks a train-size tag; name it like 'run-n7.ckpt'",
                path.display()
            ))
        })?;
    tag.parse()
        .map_err(|_| Error::Config(format!("train-size tag in '{stem}' is out of range")))
}

fn cmd_matrix(dir: &Path, test_sizes: &str, cap: f64, out: &Path) -> Result<()> {
    let seed = resolve_seed(None)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .ckpt files in {}",
            dir.display()
        )));
    }
    let mut checkpoints = Vec::with_capacity(paths.len());
    for path in &paths {
        let size = parse_train_tag(path)?;
        checkpoints.push((size, load_checkpoint(path)?));
    }
    let sizes = parse_sizes(test_sizes)?;
    let matrix = build_performance_matrix(
        &checkpoints,
        &sizes,
        MATRIX_INSTANCES,
        seed,
        RefMode::PaperFaithful,
        cap,
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join("matrix_capped.csv"), matrix.to_csv_capped())?;
    fs::write(out.join("matrix_raw.csv"), matrix.to_csv_raw())?;
    Ok(())
}
