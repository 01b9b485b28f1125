//! Losses, SGD with momentum, the step learning-rate schedule, the training
//! loop and per-exit / ensemble evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradMap, Tape, Var};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::net::{exit_losses, forward, Model, ParamKey};
use crate::tensor::Tensor;

/// How exits are combined into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    #[default]
    MeanLogits,
    MeanProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_lr0")]
    pub lr0: f64,
    #[serde(default = "TrainConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "TrainConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "TrainConfig::default_drop_points")]
    pub drop_points: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub ensemble: EnsembleRule,
}

impl TrainConfig {
    fn default_lr0() -> f64 {
        0.1
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_weight_decay() -> f64 {
        5e-4
    }
    fn default_drop_points() -> [f64; 3] {
        [250.0 / 300.0, 280.0 / 300.0, 295.0 / 300.0]
    }
    fn default_eval_every() -> usize {
        500
    }

    pub fn new(total_steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            total_steps,
            batch_size,
            lr0: Self::default_lr0(),
            momentum: Self::default_momentum(),
            weight_decay: Self::default_weight_decay(),
            drop_points: Self::default_drop_points(),
            seed,
            eval_every: Self::default_eval_every(),
            ensemble: EnsembleRule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        let d = self.drop_points;
        if !(0.0 < d[0] && d[0] < d[1] && d[1] < d[2] && d[2] < 1.0) {
            return Err(Error::Config(format!(
                "drop_points {d:?} must be strictly increasing inside (0, 1)"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `lr0`, divided by ten at each drop point.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let pos = step as f64;
    let total = cfg.total_steps as f64;
    let drops = cfg.drop_points.iter().filter(|&&f| pos >= f * total).count();
    cfg.lr0 * 0.1f64.powi(drops as i32)
}

/// Mean cross-entropy node for one exit.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_ce(logits, labels)
}

/// The losses that seed backward, each at unit weight.
pub fn total_loss(model: &Model, exit_losses: &[Var]) -> Vec<Var> {
    model
        .config
        .trained_exits()
        .into_iter()
        .map(|i| exit_losses[i])
        .collect()
}

/// Velocity buffers, one per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    velocity: std::collections::BTreeMap<usize, Tensor>,
}

impl OptimizerState {
    pub fn velocity(&self, key: ParamKey) -> Option<&Tensor> {
        self.velocity.get(&key.index())
    }
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`. Biases skip the decay term.
pub fn sgd_step(
    model: &mut Model,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for key in model.param_keys() {
        let Some(g) = grads.get(key.index()) else {
            continue;
        };
        let w = model.param_mut(key).expect("key from model");
        if g.shape() != w.shape() {
            return Err(Error::Contract(format!(
                "{}: gradient {:?} vs parameter {:?}",
                key.name(),
                g.shape(),
                w.shape()
            )));
        }
        let decay = if key.is_bias() { 0.0 } else { weight_decay };
        let v = state
            .velocity
            .entry(key.index())
            .or_insert_with(|| Tensor::new(w.shape().to_vec(), vec![0.0; w.len()]).expect("shape"));
        for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
            *vi = momentum * *vi + (gi + decay * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitId {
    Exit(usize),
    Ensemble,
}

impl fmt::Display for ExitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitId::Exit(i) => write!(f, "{i}"),
            ExitId::Ensemble => f.write_str("ensemble"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    /// 1-based exit or the ensemble.
    pub exit_id: ExitId,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitScore {
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub exits: Vec<ExitScore>,
    pub ensemble: ExitScore,
}

impl Evaluation {
    pub fn rows(&self, step: usize, split: &str) -> Vec<MetricsRow> {
        let mut rows: Vec<MetricsRow> = self
            .exits
            .iter()
            .enumerate()
            .map(|(i, s)| MetricsRow {
                step,
                split: split.to_string(),
                exit_id: ExitId::Exit(i + 1),
                loss: s.loss,
                top1: s.top1,
            })
            .collect();
        rows.push(MetricsRow {
            step,
            split: split.to_string(),
            exit_id: ExitId::Ensemble,
            loss: self.ensemble.loss,
            top1: self.ensemble.top1,
        });
        rows
    }
}

/// Combined logits of all exits under `rule`.
pub fn ensemble_logits(logits: &[Tensor], rule: EnsembleRule) -> Tensor {
    let mut acc = Tensor::zeros(logits[0].rows(), logits[0].cols());
    for z in logits {
        let term = match rule {
            EnsembleRule::MeanLogits => z.clone(),
            EnsembleRule::MeanProbs => z.softmax_rows(),
        };
        acc.add_assign(&term).expect("exits share a shape");
    }
    let mean = acc.scale(1.0 / logits.len() as f64);
    match rule {
        EnsembleRule::MeanLogits => mean,
        // log of the averaged distribution, so CE and argmax stay meaningful
        EnsembleRule::MeanProbs => mean.map(|p| p.max(f64::MIN_POSITIVE).ln()),
    }
}

fn top1(logits: &Tensor, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

const EVAL_CHUNK: usize = 1024;

/// Per-exit and ensemble loss/top-1 over the whole dataset.
pub fn evaluate(model: &Model, ds: &Dataset, rule: EnsembleRule) -> Result<Evaluation> {
    let n = ds.x.rows();
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let l = model.config.layers;
    let mut loss = vec![0.0; l + 1];
    let mut hits = vec![0usize; l + 1];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let logits = model.predict(&x)?;
        let ens = ensemble_logits(&logits, rule);
        for (i, z) in logits.iter().chain(std::iter::once(&ens)).enumerate() {
            loss[i] += crate::autograd::cross_entropy_value(z, &y)? * chunk.len() as f64;
            hits[i] += top1(z, &y);
        }
    }
    let score = |i: usize| ExitScore {
        loss: loss[i] / n as f64,
        top1: hits[i] as f64 / n as f64,
    };
    Ok(Evaluation {
        exits: (0..l).map(score).collect(),
        ensemble: score(l),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricsRow>,
    /// Summed trained-exit loss on the first batch.
    pub initial_loss: Option<f64>,
}

/// One optimization step on a batch; returns the summed seeded loss.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimizerState,
    x: &Tensor,
    y: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = forward(model, x, &mut tape)?;
    let losses = exit_losses(&mut tape, &out, y)?;
    let seeded = total_loss(model, &losses);
    let value: f64 = seeded.iter().map(|l| tape.value(*l).data()[0]).sum();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(&seeded, &model.param_indices())?;
    sgd_step(model, &grads, state, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(value)
}

/// Trains for `cfg.total_steps` minibatch steps, evaluating every
/// `eval_every` steps (and at the end) on each split in `eval`.
pub fn train_loop(mut model: Model, train: &Dataset, eval: &[&Dataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut state = OptimizerState::default();
    let mut history = Vec::new();
    let mut initial_loss = None;
    let record = |model: &Model, step: usize, history: &mut Vec<MetricsRow>| -> Result<()> {
        for ds in eval {
            let e = evaluate(model, ds, cfg.ensemble)?;
            history.extend(e.rows(step, ds.split.name()));
        }
        Ok(())
    };
    record(&model, 0, &mut history)?;

    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.total_steps {
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch)? {
            if step >= cfg.total_steps {
                break;
            }
            let (x, y) = train.gather(&idx);
            let loss = train_step(&mut model, &mut state, &x, &y, lr_at(step, cfg), cfg)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            initial_loss.get_or_insert(loss);
            step += 1;
            if step % cfg.eval_every == 0 || step == cfg.total_steps {
                record(&model, step, &mut history)?;
            }
        }
        epoch += 1;
    }
    Ok(TrainOutcome {
        model,
        history,
        initial_loss,
    })
}

pub const METRICS_HEADER: &str = "step,split,exit_id,loss,top1";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.split, r.exit_id, r.loss, r.top1));
    }
    s
}

/// Final scores per split plus the best validation ensemble top-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_step: usize,
    pub final_top1: std::collections::BTreeMap<String, Vec<f64>>,
    pub final_ensemble_top1: std::collections::BTreeMap<String, f64>,
    pub best_val: Option<f64>,
}

pub fn summarize(history: &[MetricsRow]) -> Summary {
    let final_step = history.iter().map(|r| r.step).max().unwrap_or(0);
    let mut final_top1: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut final_ensemble_top1 = std::collections::BTreeMap::new();
    for r in history.iter().filter(|r| r.step == final_step) {
        match r.exit_id {
            ExitId::Exit(_) => final_top1.entry(r.split.clone()).or_default().push(r.top1),
            ExitId::Ensemble => {
                final_ensemble_top1.insert(r.split.clone(), r.top1);
            }
        }
    }
    let best_val = history
        .iter()
        .filter(|r| r.split == "val" && r.exit_id == ExitId::Ensemble)
        .map(|r| r.top1)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    Summary {
        final_step,
        final_top1,
        final_ensemble_top1,
        best_val,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SyntheticSpec};
    use crate::net::{Mode, ModelConfig};
    use crate::rng::RngStream;

    fn model(mode: Mode, seed: u64) -> Model {
        let mut cfg = ModelConfig::uniform(3, 16, 2, 3, 0.5, mode);
        cfg.bias = true;
        Model::build(cfg, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(2, 4));
        let l = cross_entropy(&mut tape, z, &[0, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        let z = tape.constant(Tensor::zeros(1, 100));
        let l = cross_entropy(&mut tape, z, &[7]).unwrap();
        assert!((tape.value(l).data()[0] - 100f64.ln()).abs() < 1e-12);
        let z = tape.constant(Tensor::row(vec![800.0, 0.0]));
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-300);
        let z = tape.constant(Tensor::zeros(1, 3));
        assert!(matches!(cross_entropy(&mut tape, z, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn total_loss_respects_mode() {
        let m = model(Mode::Joint, 0);
        let vars: Vec<Var> = (0..3).map(Var::live).collect();
        assert_eq!(total_loss(&m, &vars), vars);
        let f = model(Mode::FinalOnly, 0);
        assert_eq!(total_loss(&f, &vars), vec![vars[2]]);
        let mut one = ModelConfig::uniform(1, 4, 2, 3, 0.5, Mode::Dfs);
        one.bias = false;
        let single = Model::build(one, &mut RngStream::new(0)).unwrap();
        assert_eq!(total_loss(&single, &vars[..1]), vec![vars[0]]);
    }

    fn single_param_model(w: Tensor) -> (Model, GradMap) {
        let mut cfg = ModelConfig::uniform(1, w.cols(), w.rows(), 2, 0.5, Mode::Joint);
        cfg.bias = false;
        let mut m = Model::build(cfg, &mut RngStream::new(0)).unwrap();
        m.layers[0].w = w;
        let g = GradMap::default();
        (m, g)
    }

    #[test]
    fn sgd_plain_step() {
        let w = Tensor::row(vec![1.0, -2.0]);
        let (mut m, mut g) = single_param_model(w);
        g.insert(ParamKey::LayerW(0).index(), Tensor::row(vec![0.5, 0.25]));
        let mut st = OptimizerState::default();
        sgd_step(&mut m, &g, &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(m.layers[0].w.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (mut m, mut g) = single_param_model(Tensor::row(vec![0.0, 0.0]));
        g.insert(ParamKey::LayerW(0).index(), Tensor::row(vec![1.0, -2.0]));
        let mut st = OptimizerState::default();
        sgd_step(&mut m, &g, &mut st, 1.0, 0.9, 0.0).unwrap();
        sgd_step(&mut m, &g, &mut st, 1.0, 0.9, 0.0).unwrap();
        let w = m.layers[0].w.data();
        assert!((w[0] + 2.9).abs() < 1e-12);
        assert!((w[1] - 5.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_pure_decay_and_shape_check() {
        let (mut m, mut g) = single_param_model(Tensor::row(vec![2.0, -4.0]));
        g.insert(ParamKey::LayerW(0).index(), Tensor::row(vec![0.0, 0.0]));
        let mut st = OptimizerState::default();
        sgd_step(&mut m, &g, &mut st, 0.5, 0.9, 0.1).unwrap();
        assert_eq!(m.layers[0].w.data(), &[2.0 - 0.5 * 0.1 * 2.0, -4.0 + 0.5 * 0.1 * 4.0]);
        g.insert(ParamKey::LayerW(0).index(), Tensor::zeros(2, 2));
        assert!(matches!(sgd_step(&mut m, &g, &mut st, 0.5, 0.9, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig::new(300, 8, 0);
        assert_eq!(lr_at(0, &cfg), 0.1);
        assert!((lr_at(252, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(285, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_at(297, &cfg) - 1e-4).abs() < 1e-15);
        let cfg = TrainConfig::new(1000, 8, 0);
        assert!((lr_at(840, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(990, &cfg) - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(10, 4, 0);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c.momentum = 0.9;
        c.drop_points = [0.5, 0.4, 0.9];
        assert!(c.validate().is_err());
        c.drop_points = [0.5, 0.6, 0.9];
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ensemble_mean_then_argmax() {
        let a = Tensor::row(vec![2.0, 0.0]);
        let b = Tensor::row(vec![0.0, 1.0]);
        let e = ensemble_logits(&[a.clone(), b], EnsembleRule::MeanLogits);
        assert_eq!(e.data(), &[1.0, 0.5]);
        assert_eq!(e.argmax_rows(), vec![0]);
        let same = ensemble_logits(&[a.clone(), a.clone()], EnsembleRule::MeanLogits);
        assert_eq!(same.argmax_rows(), a.argmax_rows());
    }

    #[test]
    fn evaluate_rejects_empty() {
        let m = model(Mode::Dfs, 0);
        let ds = Dataset {
            x: Tensor::zeros(0, 2),
            y: vec![],
            classes: 3,
            split: Split::Test,
        };
        assert!(matches!(evaluate(&m, &ds, EnsembleRule::MeanLogits), Err(Error::Data(_))));
    }

    fn spirals() -> Dataset {
        SyntheticSpec::spirals(3, 40, 0.1, 1).generate(Split::Train).unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let m = model(Mode::Dfs, 3);
        let ds = spirals();
        let out = train_loop(m.clone(), &ds, &[&ds], &TrainConfig::new(0, 16, 0)).unwrap();
        assert_eq!(out.model, m);
        assert!(out.history.iter().all(|r| r.step == 0));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = spirals();
        let mut cfg = TrainConfig::new(60, 16, 5);
        cfg.eval_every = 20;
        let a = train_loop(model(Mode::Dfs, 4), &ds, &[&ds], &cfg).unwrap();
        let b = train_loop(model(Mode::Dfs, 4), &ds, &[&ds], &cfg).unwrap();
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 4 * 4);
    }

    #[test]
    fn initial_loss_near_ln_k() {
        let (ds, _) = crate::data::normalize(&spirals()).unwrap();
        for seed in 0..10 {
            let mut cfg = ModelConfig::uniform(1, 32, 2, 3, 0.5, Mode::Joint);
            cfg.bias = true;
            let m = Model::build(cfg, &mut RngStream::new(seed)).unwrap();
            let out = train_loop(m, &ds, &[], &TrainConfig::new(1, 64, seed)).unwrap();
            let l0 = out.initial_loss.unwrap();
            assert!((l0 - 3f64.ln()).abs() < 0.3, "seed {seed}: {l0}");
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let ds = spirals();
        let mut m = model(Mode::Joint, 0);
        m.heads[0].w.data_mut()[0] = f64::NAN;
        let err = train_loop(m, &ds, &[], &TrainConfig::new(5, 16, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0 }));
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let ds = spirals();
        let idx: Vec<usize> = (0..ds.len()).step_by(3).collect();
        let (x, y) = ds.gather(&idx);
        let cfg = TrainConfig::new(1, 16, 0);
        let batch_loss = |m: &Model| -> f64 {
            let mut tape = Tape::new();
            let out = forward(m, &x, &mut tape).unwrap();
            let ls = exit_losses(&mut tape, &out, &y).unwrap();
            total_loss(m, &ls).iter().map(|l| tape.value(*l).data()[0]).sum()
        };
        let mut decreased = 0;
        for seed in 0..20 {
            for mode in [Mode::Joint, Mode::Dfs] {
                let mut m = model(mode, seed);
                let before = batch_loss(&m);
                let mut st = OptimizerState::default();
                train_step(&mut m, &mut st, &x, &y, 1e-3, &cfg).unwrap();
                if mode == Mode::Dfs && batch_loss(&m) < before {
                    decreased += 1;
                }
                if mode == Mode::Joint {
                    assert!(batch_loss(&m) < before, "joint seed {seed}");
                }
            }
        }
        assert!(decreased >= 19, "{decreased}/20");
    }

    #[test]
    fn ensemble_invariant_to_positive_scaling() {
        let ds = spirals();
        let m = model(Mode::Dfs, 6);
        let mut scaled = m.clone();
        for h in &mut scaled.heads {
            h.w = h.w.scale(3.5);
            h.bias = h.bias.as_ref().map(|b| b.scale(3.5));
        }
        let a = evaluate(&m, &ds, EnsembleRule::MeanLogits).unwrap();
        let b = evaluate(&scaled, &ds, EnsembleRule::MeanLogits).unwrap();
        assert_eq!(a.ensemble.top1, b.ensemble.top1);
    }

    #[test]
    fn summary_picks_final_rows() {
        let ds = spirals();
        let val = ds.clone().with_split(Split::Val);
        let mut cfg = TrainConfig::new(20, 16, 1);
        cfg.eval_every = 10;
        let out = train_loop(model(Mode::Dfs, 1), &ds, &[&ds, &val], &cfg).unwrap();
        let s = summarize(&out.history);
        assert_eq!(s.final_step, 20);
        assert_eq!(s.final_top1["train"].len(), 3);
        assert!(s.best_val.is_some());
        let csv = metrics_csv(&out.history);
        assert!(csv.starts_with("step,split,exit_id,loss,top1\n0,train,1,"));
        assert!(csv.contains(",ensemble,"));
    }
}
