//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns JSON strings so the page needs no generated types.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dfs_core::analysis::{
    budget_grid, budgeted_eval_scores, closed_form, inference_cost_profile, measure_counts, reduction,
    AccountingModel, ExitScores,
};
use dfs_core::data::{batches, Dataset};
use dfs_core::experiment::{DataSpec, RunConfig, Splits};
use dfs_core::net::{Mode, Model};
use dfs_core::rng::RngStream;
use dfs_core::tensor::Tensor;
use dfs_core::train::{evaluate, lr_at, train_step, EnsembleRule, OptimizerState, TrainConfig};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct CountLine {
    mode: &'static str,
    forward_closed: u64,
    forward_tape: u64,
    backward_closed: u64,
    backward_tape: u64,
}

#[derive(Serialize)]
struct FlopsReport {
    layers: usize,
    width: usize,
    beta: f64,
    rows: Vec<CountLine>,
    reduction: f64,
    curve: Vec<(usize, f64)>,
}

/// Closed-form and tape-counted training operations for the square network.
#[wasm_bindgen]
pub fn flops(layers: usize, width: usize, beta: f64) -> Result<String, JsError> {
    if layers == 0 || layers > 32 || !(2..=32).contains(&width) {
        return Err(JsError::new("layers must be 1..=32 and width 2..=32"));
    }
    let mut rows = Vec::new();
    for mode in [Mode::Joint, Mode::Dfs] {
        let closed = closed_form(&AccountingModel {
            layers,
            width,
            beta,
            mode,
        })
        .map_err(js_err)?;
        let (tape, _) = measure_counts(layers, width, beta, mode, 0).map_err(js_err)?;
        rows.push(CountLine {
            mode: mode.name(),
            forward_closed: closed.forward,
            forward_tape: tape.forward,
            backward_closed: closed.backward,
            backward_tape: tape.backward,
        });
    }
    to_json(&FlopsReport {
        layers,
        width,
        beta,
        rows,
        reduction: reduction(layers),
        curve: (1..=32).map(|l| (l, reduction(l))).collect(),
    })
}

#[derive(Serialize)]
struct Progress {
    step: usize,
    loss: f64,
    train: Vec<f64>,
    test: Vec<f64>,
    ensemble: f64,
}

/// A small multi-exit network trained step by step on 2-D spirals.
#[wasm_bindgen]
pub struct SpiralDemo {
    model: Model,
    splits: Splits,
    cfg: TrainConfig,
    state: OptimizerState,
    order: Vec<Vec<usize>>,
    cursor: usize,
    epoch: u64,
    step: usize,
    last_loss: f64,
}

#[wasm_bindgen]
impl SpiralDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, beta: f64, noise: f64, steps: usize, seed: u64) -> Result<SpiralDemo, JsError> {
        let mode: Mode = mode.parse().map_err(js_err)?;
        let mut run = RunConfig::spiral_benchmark(mode, beta, seed);
        if let DataSpec::Spirals { noise: n, .. } = &mut run.data {
            *n = noise;
        }
        run.train.total_steps = steps.max(1);
        let splits = run.data.load().map_err(js_err)?;
        let mc = run.model_config(2, 3);
        let model = Model::build(mc, &mut RngStream::derive(seed, 0x4d4f_4445_4c)).map_err(js_err)?;
        let cfg = run.train;
        cfg.validate().map_err(js_err)?;
        let order = batches(splits.train.len(), cfg.batch_size, seed, 0).map_err(js_err)?;
        Ok(SpiralDemo {
            model,
            splits,
            cfg,
            state: OptimizerState::default(),
            order,
            cursor: 0,
            epoch: 0,
            step: 0,
            last_loss: f64::NAN,
        })
    }

    /// Runs up to `n` more steps of the schedule; returns progress JSON.
    pub fn train(&mut self, n: usize) -> Result<String, JsError> {
        for _ in 0..n {
            if self.step >= self.cfg.total_steps {
                break;
            }
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.order = batches(self.splits.train.len(), self.cfg.batch_size, self.cfg.seed, self.epoch)
                    .map_err(js_err)?;
                self.cursor = 0;
            }
            let (x, y) = self.splits.train.gather(&self.order[self.cursor]);
            self.cursor += 1;
            let lr = lr_at(self.step, &self.cfg);
            self.last_loss = train_step(&mut self.model, &mut self.state, &x, &y, lr, &self.cfg).map_err(js_err)?;
            if !self.last_loss.is_finite() {
                return Err(JsError::new(&format!("training diverged at step {}", self.step)));
            }
            self.step += 1;
        }
        self.progress()
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn progress(&self) -> Result<String, JsError> {
        let train = evaluate(&self.model, &self.splits.train, EnsembleRule::MeanLogits).map_err(js_err)?;
        let test = evaluate(&self.model, &self.splits.test, EnsembleRule::MeanLogits).map_err(js_err)?;
        to_json(&Progress {
            step: self.step,
            loss: self.last_loss,
            train: train.exits.iter().map(|s| s.top1).collect(),
            test: test.exits.iter().map(|s| s.top1).collect(),
            ensemble: test.ensemble.top1,
        })
    }

    /// Predicted class of exit `exit` (0-based) on a `res × res` grid over
    /// raw coordinates in [-1.5, 1.5]², row-major from the top.
    pub fn regions(&self, exit: usize, res: usize) -> Result<Vec<u8>, JsError> {
        if exit >= self.model.config.layers || res == 0 {
            return Err(JsError::new("exit or resolution out of range"));
        }
        let norm = &self.splits.normalizer;
        let mut pts = Vec::with_capacity(2 * res * res);
        for r in 0..res {
            for c in 0..res {
                let x = -1.5 + 3.0 * (c as f64 + 0.5) / res as f64;
                let y = 1.5 - 3.0 * (r as f64 + 0.5) / res as f64;
                pts.push((x - norm.mean[0]) / norm.std[0]);
                pts.push((y - norm.mean[1]) / norm.std[1]);
            }
        }
        let grid = Tensor::new(vec![res * res, 2], pts).map_err(js_err)?;
        let logits = self.model.predict(&grid).map_err(js_err)?;
        Ok(logits[exit].argmax_rows().into_iter().map(|k| k as u8).collect())
    }

    /// Raw test points as `[x, y, label, ...]`.
    pub fn test_points(&self) -> Vec<f64> {
        raw_points(&self.splits.test, &self.splits)
    }

    /// Budget curve JSON over a 10-point grid from the cheapest to the full
    /// exit cost.
    pub fn budget_curve(&self) -> Result<String, JsError> {
        let costs = inference_cost_profile(&self.model.config);
        let calib = ExitScores::collect(&self.model, self.splits.calibration()).map_err(js_err)?;
        let test = ExitScores::collect(&self.model, &self.splits.test).map_err(js_err)?;
        let rows = budget_grid(&costs, 10)
            .into_iter()
            .map(|b| budgeted_eval_scores(&costs.per_exit, &calib, &test, b).map_err(js_err))
            .collect::<Result<Vec<_>, _>>()?;
        to_json(&rows)
    }
}

fn raw_points(ds: &Dataset, splits: &Splits) -> Vec<f64> {
    let n = &splits.normalizer;
    (0..ds.len())
        .flat_map(|i| {
            let row = ds.x.row_slice(i);
            [row[0] * n.std[0] + n.mean[0], row[1] * n.std[1] + n.mean[1], ds.y[i] as f64]
        })
        .collect()
}
