use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use dfs_core::analysis::{
    budget_csv_header, budget_csv_row, budget_grid, budgeted_eval_scores, inference_cost_profile, reduction,
    verify_counts, ExitScores,
};
use dfs_core::checkpoint::{load_checkpoint_with_manifest, save_checkpoint_with};
use dfs_core::experiment::{checkpoint_meta, data_from_meta, run, RunConfig};
use dfs_core::gradcheck::{run_gradcheck, Fault, GradcheckConfig, FD_TOLERANCE};
use dfs_core::train::metrics_csv;
use dfs_core::{Error, Mode};

mod sweep;

#[derive(Parser, Debug)]
#[command(name = "dfs", version, about = "Multi-exit training with partitioned gradient routing")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics.csv, summary.json and model.ckpt.
    Train,
    /// Closed-form and tape-counted training operations.
    Flops {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
    },
    /// Routing probes and finite-difference checks on random small nets.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value = "dfs")]
        mode: Mode,
        /// Flip one detach flag, e.g. `specific:1` or `head:2` (1-based layer).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Accuracy under average-cost budgets for a trained checkpoint.
    Budget {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-sample operation budgets; defaults to 10 points from c_1 to c_L.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<f64>,
    },
    /// Train every (beta, seed) cell of a grid.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::Contract(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DFS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Flops { layers, width, beta } => cmd_flops(*layers, *width, *beta),
        Command::Gradcheck {
            cases,
            mode,
            inject_fault,
        } => cmd_gradcheck(cli, *cases, *mode, inject_fault.as_deref()),
        Command::Budget { checkpoint, budgets } => cmd_budget(cli, checkpoint, budgets),
        Command::Sweep { beta, seeds } => sweep::cmd_sweep(&load_config(cli)?, &out_dir(cli, None), beta, *seeds, cli.jobs),
    }
}

pub(crate) fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| match e {
        Error::Json(j) => CliError::Usage(format!("{}: {j}", path.display())),
        other => CliError::from(other),
    })?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, configured: Option<&Path>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."))
}

pub(crate) fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_train(cli: &Cli) -> CliResult {
    let cfg = load_config(cli)?;
    cfg.model_config(2, 2).validate()?;
    let out = out_dir(cli, cfg.out_dir.as_deref());
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    info!("training {} steps, mode {}, seed {}", cfg.train.total_steps, cfg.model.mode.name(), cfg.seed);
    let result = run(&cfg)?;
    write(&out.join("metrics.csv"), &metrics_csv(&result.history))?;
    let summary = serde_json::to_string_pretty(&result.summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&out.join("summary.json"), &(summary + "\n"))?;
    let meta = checkpoint_meta(&cfg, &result.splits)?;
    save_checkpoint_with(&result.model, Some(meta), &out.join("model.ckpt"))?;
    for (i, s) in result.test.exits.iter().enumerate() {
        println!("exit {} test top1 {:.4} loss {:.4}", i + 1, s.top1, s.loss);
    }
    println!("ensemble test top1 {:.4}", result.test.ensemble.top1);
    Ok(())
}

fn cmd_flops(layers: usize, width: usize, beta: f64) -> CliResult {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CliError::Usage(format!("--beta {beta} must lie in (0, 1)")));
    }
    let scaled = beta * width as f64;
    if (scaled - scaled.round()).abs() > 1e-9 {
        return Err(CliError::Usage(format!("beta·width = {scaled} is not an integer")));
    }
    let report = match verify_counts(layers, width, beta) {
        Ok(r) => r,
        Err(Error::Accounting(m)) => return Err(CliError::Runtime(format!("count mismatch: {m}"))),
        Err(e) => return Err(e.into()),
    };
    println!("L={layers} N={width} beta={beta}");
    println!("{:<8} {:>6} {:>16} {:>16} {:>16} {:>16}", "mode", "beta", "fwd(closed)", "fwd(tape)", "bwd(closed)", "bwd(tape)");
    for r in &report.rows {
        println!(
            "{:<8} {:>6} {:>16} {:>16} {:>16} {:>16}",
            r.mode.name(),
            r.beta,
            r.expected.forward,
            r.empirical.forward,
            r.expected.backward,
            r.empirical.backward
        );
    }
    println!("reduction {:.2}%", 100.0 * reduction(layers));
    println!("empirical reduction {:.2}%", 100.0 * report.empirical_reduction);
    println!("counts exact: {}", report.all_exact());
    Ok(())
}

fn parse_fault(s: &str) -> CliResult<Fault> {
    let bad = || CliError::Usage(format!("--inject-fault expects specific:<layer> or head:<layer>, got {s:?}"));
    let (kind, layer) = s.split_once(':').ok_or_else(bad)?;
    let layer: usize = layer.parse().map_err(|_| bad())?;
    if layer == 0 {
        return Err(bad());
    }
    match kind {
        "specific" => Ok(Fault::SpecificForward(layer - 1)),
        "head" => Ok(Fault::SharedToHead(layer - 1)),
        _ => Err(bad()),
    }
}

fn cmd_gradcheck(cli: &Cli, cases: usize, mode: Mode, fault: Option<&str>) -> CliResult {
    let mut cfg = GradcheckConfig::new(mode, cases, cli.seed.unwrap_or(0));
    cfg.fault = fault.map(parse_fault).transpose()?;
    let report = run_gradcheck(&cfg)?;
    for c in &report.cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "case {:>3} L={} widths={:?} beta={:.3} probes={} fd_max_rel={:.2e} ({}) {status}",
            c.case, c.layers, c.widths, c.beta, c.routing_probes, c.fd_max_rel, c.fd_worst_param
        );
        if let Some((layer, clause)) = &c.routing_failure {
            println!("  routing violation at layer {layer}: {clause}");
        }
    }
    println!("worst fd relative error {:.2e} (tolerance {FD_TOLERANCE:e})", report.worst_fd());
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        let first = report.cases.iter().find(|c| !c.passed()).expect("a failing case");
        Err(CliError::Runtime(match &first.routing_failure {
            Some((layer, clause)) => format!("case {} routing violation at layer {layer}: {clause}", first.case),
            None => format!("case {} fd error {:.2e} in {}", first.case, first.fd_max_rel, first.fd_worst_param),
        }))
    }
}

fn cmd_budget(cli: &Cli, checkpoint: &Path, budgets: &[f64]) -> CliResult {
    let (model, manifest) = load_checkpoint_with_manifest(checkpoint).map_err(|e| CliError::Usage(e.to_string()))?;
    let meta = manifest
        .meta
        .as_ref()
        .ok_or_else(|| CliError::Usage("checkpoint carries no data description".into()))?;
    let splits = data_from_meta(meta)?.load()?;
    let costs = inference_cost_profile(&model.config);
    let budgets = if budgets.is_empty() {
        budget_grid(&costs, 10)
    } else {
        budgets.to_vec()
    };
    let calib = ExitScores::collect(&model, splits.calibration())?;
    let test = ExitScores::collect(&model, &splits.test)?;
    let exits = model.config.layers;
    let mut csv = budget_csv_header(exits);
    csv.push('\n');
    for &b in &budgets {
        let row = match budgeted_eval_scores(&costs.per_exit, &calib, &test, b) {
            Ok(r) => budget_csv_row(b, Some(&r), exits),
            Err(Error::InfeasibleBudget { budget, min }) => {
                warn!("budget {budget} below the cheapest exit ({min})");
                budget_csv_row(b, None, exits)
            }
            Err(e) => return Err(e.into()),
        };
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    let out = out_dir(cli, None);
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write(&out.join("budget.csv"), &csv)
}
