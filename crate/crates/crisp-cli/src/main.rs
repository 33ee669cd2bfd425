//! `crisp` — dataset preparation, index construction, batch search and
//! benchmarking for the subspace-collision index.
//!
//! Subcommands: `groundtruth`, `build`, `search`, `sweep`, `theory`.
//! JSON status lines go to stdout, logs to stderr, CSV outputs carry a
//! header row. Exit codes: 0 success, 1 argument error, 2 i/o or format
//! error.

mod bench;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use bench::{bench_config, mode_name, pareto_filter, run_batch, BenchReport, CSV_HEADER};
use crisp::{
    brute_force_knn, build_index, exact_binomial_failure, hoeffding_recall_bound, load_fvecs,
    load_index, load_ivecs, recall_at_k, save_index, save_ivecs, simulate_collision_retrieval,
    BoundInput, BuildParams, CrispError, GroundTruth, Mode, Result, SearchConfig,
};

#[derive(Parser)]
#[command(name = "crisp", version, about = "Subspace-collision ANN index benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact k-nearest-neighbor ground truth via brute force
    Groundtruth(GroundtruthArgs),
    /// Build an index from an fvecs dataset
    Build(BuildArgs),
    /// Batch search an index and report recall/QPS
    Search(SearchArgs),
    /// Evaluate a configuration grid and emit Pareto-filtered CSVs
    Sweep(SweepArgs),
    /// Recall lower bound vs. exact and simulated binomial tails
    Theory(TheoryArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Guaranteed,
    Optimized,
}

impl From<ModeArg> for Mode {
    fn from(value: ModeArg) -> Mode {
        match value {
            ModeArg::Guaranteed => Mode::Guaranteed,
            ModeArg::Optimized => Mode::Optimized,
        }
    }
}

impl std::fmt::Display for ModeArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModeArg::Guaranteed => "guaranteed",
            ModeArg::Optimized => "optimized",
        })
    }
}

#[derive(Args)]
struct GroundtruthArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Number of subspaces M (no universal default; dataset dependent)
    #[arg(long)]
    subspaces: usize,
    /// Centroids per subspace half
    #[arg(long, default_value_t = crisp::index::DEFAULT_CENTROIDS)]
    centroids: usize,
    /// Spectral threshold gating the adaptive rotation
    #[arg(long, default_value_t = crisp::preprocess::DEFAULT_TAU_CEV)]
    tau_cev: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Optional ground truth; enables the recall column
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Optional JSON config file; explicit flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    budget_ratio: Option<f64>,
    #[arg(long)]
    min_collision_ratio: Option<f64>,
    #[arg(long)]
    patience_factor: Option<f64>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    ad_stride: Option<usize>,
    /// One query per worker instead of the serial timing loop
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Prebuilt index (alternative: --dataset with --subspaces)
    #[arg(long)]
    index: Option<PathBuf>,
    /// Dataset to rebuild per subspace count
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Subspace counts to rebuild with (requires --dataset)
    #[arg(long, value_delimiter = ',')]
    subspaces: Vec<usize>,
    #[arg(long, default_value_t = crisp::index::DEFAULT_CENTROIDS)]
    centroids: usize,
    #[arg(long, default_value_t = crisp::preprocess::DEFAULT_TAU_CEV)]
    tau_cev: f64,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_delimiter = ',')]
    budget_ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    min_collision_ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [ModeArg::Guaranteed, ModeArg::Optimized])]
    modes: Vec<ModeArg>,
    #[arg(long)]
    patience_factor: Option<f64>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    ad_stride: Option<usize>,
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of every evaluated configuration
    #[arg(long)]
    out: PathBuf,
    /// CSV of the (recall, qps) non-dominated subset
    #[arg(long)]
    pareto_out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    /// Subspace counts M
    #[arg(long, value_delimiter = ',')]
    subspaces: Vec<usize>,
    /// Single-subspace collision probabilities p*
    #[arg(long, value_delimiter = ',')]
    p_star: Vec<f64>,
    /// Integer collision thresholds tau
    #[arg(long, value_delimiter = ',')]
    tau: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Search knobs accepted from a JSON config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<String>,
    k: Option<usize>,
    budget_ratio: Option<f64>,
    min_collision_ratio: Option<f64>,
    patience_factor: Option<f64>,
    eps0: Option<f64>,
    ad_stride: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Groundtruth(args) => cmd_groundtruth(args),
        Command::Build(args) => cmd_build(args),
        Command::Search(args) => cmd_search(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Theory(args) => cmd_theory(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_groundtruth(args: GroundtruthArgs) -> Result<()> {
    let data = load_fvecs(&args.dataset)?;
    let queries = load_fvecs(&args.queries)?;
    let start = Instant::now();
    let gt = brute_force_knn(&data, &queries, args.k)?;
    let seconds = start.elapsed().as_secs_f64();
    save_ivecs(&gt, &args.out)?;
    println!(
        "{}",
        json!({
            "command": "groundtruth",
            "n": data.n(),
            "d": data.d(),
            "queries": queries.n(),
            "k": args.k,
            "seconds": seconds,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<()> {
    let data = load_fvecs(&args.dataset)?;
    let mut params = BuildParams::new(args.subspaces);
    params.centroids = args.centroids;
    params.tau_cev = args.tau_cev;
    params.seed = args.seed;
    let start = Instant::now();
    let index = build_index(data, &params)?;
    let build_seconds = start.elapsed().as_secs_f64();
    save_index(&index, &args.out)?;
    println!(
        "{}",
        json!({
            "command": "build",
            "cev": index.rotation().cev(),
            "rotated": index.rotation().applied(),
            "build_seconds": build_seconds,
            "logical_bytes": index.logical_bytes(),
            "n": index.n(),
            "d": index.d(),
            "padded_d": index.padded_d(),
            "subspaces": index.m(),
            "centroids": index.k(),
            "tau_cev": args.tau_cev,
            "seed": args.seed,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn merged_search_config(args: &SearchArgs) -> Result<SearchConfig> {
    let file: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CrispError::Format(format!("config file: {e}")))?
        }
    };
    let mode = match args.mode {
        Some(m) => Mode::from(m),
        None => match file.mode.as_deref() {
            Some("guaranteed") => Mode::Guaranteed,
            Some("optimized") => Mode::Optimized,
            Some(other) => {
                return Err(CrispError::InvalidArgument(format!(
                    "config file mode '{other}' must be guaranteed or optimized"
                )))
            }
            None => return Err(CrispError::InvalidArgument("--mode is required".into())),
        },
    };
    let require = |flag: Option<f64>, file_v: Option<f64>, name: &str| -> Result<f64> {
        flag.or(file_v)
            .ok_or_else(|| CrispError::InvalidArgument(format!("--{name} is required")))
    };
    let k = args
        .k
        .or(file.k)
        .ok_or_else(|| CrispError::InvalidArgument("--k is required".into()))?;
    let mut config = SearchConfig::new(
        mode,
        k,
        require(args.budget_ratio, file.budget_ratio, "budget-ratio")?,
        require(
            args.min_collision_ratio,
            file.min_collision_ratio,
            "min-collision-ratio",
        )?,
    );
    if let Some(p) = args.patience_factor.or(file.patience_factor) {
        config.patience_factor = p;
    }
    if let Some(e) = args.eps0.or(file.eps0) {
        config.eps0 = e;
    }
    if let Some(s) = args.ad_stride.or(file.ad_stride) {
        config.ad_stride = s;
    }
    config.validate()?;
    Ok(config)
}

fn write_result_ivecs(results: &[Vec<i32>], k: usize, path: &Path) -> Result<()> {
    let mut ids = Vec::with_capacity(results.len() * k);
    for row in results {
        ids.extend_from_slice(row);
    }
    let gt = GroundTruth::new(if results.is_empty() { 0 } else { k }, ids)?;
    save_ivecs(&gt, path)
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let config = merged_search_config(&args)?;
    let index = load_index(&args.index)?;
    let queries = load_fvecs(&args.queries)?;
    let gt = args.gt.as_ref().map(load_ivecs).transpose()?;

    let outcome = run_batch(&index, &queries, &config, args.parallel)?;
    write_result_ivecs(&outcome.results, config.k, &args.out)?;
    let recall = gt
        .as_ref()
        .map(|gt| recall_at_k(&outcome.results, gt, config.k))
        .transpose()?;
    println!(
        "{}",
        json!({
            "command": "search",
            "mode": mode_name(config.mode),
            "k": config.k,
            "budget_ratio": config.budget_ratio,
            "min_collision_ratio": config.min_collision_ratio,
            "patience_factor": config.patience_factor,
            "eps0": config.eps0,
            "ad_stride": config.ad_stride,
            "queries": queries.n(),
            "query_mode": if args.parallel { "parallel" } else { "serial" },
            "qps": outcome.qps,
            "mean_latency_ms": outcome.mean_latency_ms,
            "median_latency_ms": outcome.median_latency_ms,
            "mean_candidates": outcome.mean_candidates,
            "mean_verified": outcome.mean_verified,
            "recall": recall,
            "seed": args.seed,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.budget_ratios.is_empty() || args.min_collision_ratios.is_empty() || args.modes.is_empty()
    {
        return Err(CrispError::InvalidArgument(
            "sweep grid must not be empty".into(),
        ));
    }
    let queries = load_fvecs(&args.queries)?;
    let gt = load_ivecs(&args.gt)?;

    // either a prebuilt index or one rebuild per subspace count
    let indexed: Vec<(crisp::CrispIndex, f64)> = match (&args.index, &args.dataset) {
        (Some(path), None) => {
            if !args.subspaces.is_empty() {
                return Err(CrispError::InvalidArgument(
                    "--subspaces requires --dataset (rebuild mode)".into(),
                ));
            }
            vec![(load_index(path)?, 0.0)]
        }
        (None, Some(dataset)) => {
            if args.subspaces.is_empty() {
                return Err(CrispError::InvalidArgument(
                    "rebuild mode needs --subspaces".into(),
                ));
            }
            let data = load_fvecs(dataset)?;
            let mut built = Vec::new();
            for &m in &args.subspaces {
                let mut params = BuildParams::new(m);
                params.centroids = args.centroids;
                params.tau_cev = args.tau_cev;
                params.seed = args.seed;
                let start = Instant::now();
                let index = build_index(data.clone(), &params)?;
                built.push((index, start.elapsed().as_secs_f64()));
            }
            built
        }
        _ => {
            return Err(CrispError::InvalidArgument(
                "pass exactly one of --index or --dataset".into(),
            ));
        }
    };

    let mut rows: Vec<BenchReport> = Vec::new();
    for (index, build_seconds) in &indexed {
        for &mode in &args.modes {
            for &budget in &args.budget_ratios {
                for &ratio in &args.min_collision_ratios {
                    let mut config = SearchConfig::new(Mode::from(mode), args.k, budget, ratio);
                    if let Some(p) = args.patience_factor {
                        config.patience_factor = p;
                    }
                    if let Some(e) = args.eps0 {
                        config.eps0 = e;
                    }
                    if let Some(s) = args.ad_stride {
                        config.ad_stride = s;
                    }
                    config.validate()?;
                    eprintln!(
                        "sweep: mode={} m={} budget={} min_collision={}",
                        mode_name(config.mode),
                        index.m(),
                        budget,
                        ratio
                    );
                    rows.push(bench_config(
                        index,
                        &queries,
                        &gt,
                        &config,
                        args.parallel,
                        args.seed,
                        *build_seconds,
                    )?);
                }
            }
        }
    }

    write_csv(&args.out, &rows)?;
    let pareto = pareto_filter(&rows);
    if let Some(path) = &args.pareto_out {
        write_csv(path, &pareto)?;
    }
    println!(
        "{}",
        json!({
            "command": "sweep",
            "configurations": rows.len(),
            "pareto_points": pareto.len(),
            "seed": args.seed,
            "out": args.out.display().to_string(),
            "pareto_out": args.pareto_out.as_ref().map(|p| p.display().to_string()),
        })
    );
    Ok(())
}

fn write_csv(path: &Path, rows: &[BenchReport]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_theory(args: TheoryArgs) -> Result<()> {
    if args.subspaces.is_empty() || args.p_star.is_empty() || args.tau.is_empty() {
        return Err(CrispError::InvalidArgument(
            "theory grid must not be empty".into(),
        ));
    }
    let mut lines = vec!["m,p_star,tau,exact_failure,hoeffding_bound,simulated_failure".to_string()];
    for &m in &args.subspaces {
        for &p in &args.p_star {
            if !(0.0..=1.0).contains(&p) {
                return Err(CrispError::InvalidArgument(format!(
                    "p_star {p} must lie in [0, 1]"
                )));
            }
            for &tau in &args.tau {
                let exact = exact_binomial_failure(m, p, tau);
                let bound = hoeffding_recall_bound(&BoundInput {
                    m,
                    p_star: p,
                    tau,
                });
                let simulated = simulate_collision_retrieval(m, p, tau, args.trials, args.seed)?;
                let bound_str = bound.map(|b| b.to_string()).unwrap_or_default();
                lines.push(format!("{m},{p},{tau},{exact},{bound_str},{simulated}"));
            }
        }
    }
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            for line in &lines {
                writeln!(w, "{line}")?;
            }
            w.flush()?;
            println!(
                "{}",
                json!({
                    "command": "theory",
                    "rows": lines.len() - 1,
                    "trials": args.trials,
                    "seed": args.seed,
                    "out": path.display().to_string(),
                })
            );
        }
        None => {
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}
