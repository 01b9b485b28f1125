use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use dfs_core::experiment::{run, RunConfig};
use dfs_core::train::{Evaluation, ExitId};

use crate::{write, CliError, CliResult};

pub const SWEEP_HEADER: &str = "beta,seed,exit_id,top1,loss";
pub const AGGREGATE_HEADER: &str = "beta,exit_id,mean_top1,std_top1,cells";

struct Cell {
    beta: f64,
    seed: u64,
    dir: PathBuf,
}

fn cell_rows(eval: &Evaluation) -> Vec<(ExitId, f64, f64)> {
    let mut rows: Vec<(ExitId, f64, f64)> = eval
        .exits
        .iter()
        .enumerate()
        .map(|(i, s)| (ExitId::Exit(i + 1), s.top1, s.loss))
        .collect();
    rows.push((ExitId::Ensemble, eval.ensemble.top1, eval.ensemble.loss));
    rows
}

fn run_cell(base: &RunConfig, cell: &Cell) -> CliResult<Evaluation> {
    let mut cfg = base.clone();
    cfg.model.beta = cell.beta;
    cfg.seed = cell.seed;
    let result = run(&cfg)?;
    fs::create_dir_all(&cell.dir).map_err(|e| CliError::Runtime(format!("{}: {e}", cell.dir.display())))?;
    write(&cell.dir.join("metrics.csv"), &dfs_core::train::metrics_csv(&result.history))?;
    let summary = serde_json::to_string_pretty(&result.summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&cell.dir.join("summary.json"), &(summary + "\n"))?;
    Ok(result.test)
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one cell).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_sweep(base: &RunConfig, out: &Path, betas: &[f64], seeds: u64, jobs: usize) -> CliResult {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    for &b in betas {
        let mut probe = base.clone();
        probe.model.beta = b;
        probe.model_config(2, 2).validate()?;
    }
    let cells: Vec<Cell> = betas
        .iter()
        .flat_map(|&beta| {
            (0..seeds).map(move |k| {
                let seed = base.seed + k;
                Cell {
                    beta,
                    seed,
                    dir: out.join("cells").join(format!("beta{beta}_seed{seed}")),
                }
            })
        })
        .collect();
    info!("sweep: {} cells on {} thread(s)", cells.len(), jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<CliResult<Evaluation>> = pool.install(|| cells.par_iter().map(|c| run_cell(base, c)).collect());

    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut failures = 0;
    let mut per_beta: Vec<Vec<Vec<(ExitId, f64, f64)>>> = vec![Vec::new(); betas.len()];
    for (i, (cell, res)) in cells.iter().zip(&results).enumerate() {
        match res {
            Ok(eval) => {
                let rows = cell_rows(eval);
                for (id, top1, loss) in &rows {
                    csv.push_str(&format!("{},{},{},{},{}\n", cell.beta, cell.seed, id, top1, loss));
                }
                per_beta[i / seeds as usize].push(rows);
            }
            Err(e) => {
                failures += 1;
                warn!("cell beta={} seed={} failed: {e}", cell.beta, cell.seed);
                println!("cell beta={} seed={} failed: {e}", cell.beta, cell.seed);
            }
        }
    }
    if failures == cells.len() {
        return Err(CliError::Runtime("every sweep cell failed".into()));
    }

    let mut agg = format!("{AGGREGATE_HEADER}\n");
    println!("{:>6} {:>9} {:>10} {:>10} {:>6}", "beta", "exit", "mean_top1", "std_top1", "cells");
    for (b, cells) in betas.iter().zip(&per_beta) {
        let Some(first) = cells.first() else { continue };
        for (j, (id, _, _)) in first.iter().enumerate() {
            let xs: Vec<f64> = cells.iter().map(|r| r[j].1).collect();
            let (m, s) = mean_std(&xs);
            agg.push_str(&format!("{b},{id},{m},{s},{}\n", xs.len()));
            println!("{b:>6} {:>9} {m:>10.4} {s:>10.4} {:>6}", id.to_string(), xs.len());
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write(&out.join("sweep.csv"), &csv)?;
    write(&out.join("sweep_aggregate.csv"), &agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_by_hand() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(mean_std(&[0.25]), (0.25, 0.0));
    }
}
