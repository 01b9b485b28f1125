//! Operation accounting, gradient-conflict diagnostics and budgeted
//! early-exit evaluation.
//!
//! Counts use the product convention of [`crate::autograd`]: an `m × k` by
//! `k × n` product is `2·m·k·n` operations. The closed forms describe the
//! square network where features, batch, layer weights and head weights are
//! all `N × N`.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{exit_losses, forward, Mode, Model, ModelConfig, ParamKey};
use crate::rng::RngStream;
use crate::tensor::{he_init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccountingModel {
    pub layers: usize,
    pub width: usize,
    pub beta: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub forward: u64,
    pub backward: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

/// Joint: `(4LN³, (8L−2)N³)`. Dfs: `(4LN³, 6LN³)` for any split.
pub fn closed_form(m: &AccountingModel) -> Result<OpCounts> {
    let l = m.layers as u64;
    let n3 = (m.width as u64).pow(3);
    let backward = match m.mode {
        Mode::Joint => (8 * l - 2) * n3,
        Mode::Dfs => 6 * l * n3,
        other => {
            return Err(Error::Config(format!(
                "no closed form for {} wiring",
                other.name()
            )))
        }
    };
    Ok(OpCounts {
        forward: 4 * l * n3,
        backward,
    })
}

/// Fraction of training operations saved per step: `1 − 10L / (12L − 2)`.
pub fn reduction(layers: usize) -> f64 {
    let l = layers as f64;
    1.0 - 10.0 * l / (12.0 * l - 2.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct CountRow {
    pub mode: Mode,
    pub beta: f64,
    pub empirical: OpCounts,
    pub expected: OpCounts,
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountReport {
    pub layers: usize,
    pub width: usize,
    pub beta: f64,
    pub rows: Vec<CountRow>,
    pub reduction: f64,
    pub empirical_reduction: f64,
}

impl CountReport {
    pub fn all_exact(&self) -> bool {
        self.rows.iter().all(|r| r.exact)
    }
}

fn beta_split_exact(width: usize, beta: f64) -> bool {
    let s = beta * width as f64;
    (s - s.round()).abs() < 1e-9 && s.round() >= 1.0 && s.round() <= (width - 1) as f64
}

/// Square accounting network for `mode`: every matrix `N × N`, no bias.
pub fn square_config(layers: usize, width: usize, beta: f64, mode: Mode) -> ModelConfig {
    ModelConfig::uniform(layers, width, width, width, beta, mode)
}

/// Runs one forward and backward pass of the square network and returns the
/// tape counts together with a per-node backward dump.
pub fn measure_counts(layers: usize, width: usize, beta: f64, mode: Mode, seed: u64) -> Result<(OpCounts, String)> {
    let mut rng = RngStream::new(seed);
    let model = Model::build(square_config(layers, width, beta, mode), &mut rng)?;
    let x = he_init(width, width, &mut rng);
    let y: Vec<usize> = (0..width).map(|_| rng.below(width)).collect();
    let mut tape = Tape::new();
    let out = forward(&model, &x, &mut tape)?;
    let losses = exit_losses(&mut tape, &out, &y)?;
    let seeded = crate::train::total_loss(&model, &losses);
    tape.backward(&seeded, &model.param_indices())?;
    let (forward, backward) = tape.macs();
    let mut dump = String::new();
    for (node, cost) in tape.nodes().iter().zip(tape.backward_macs_by_node()) {
        if *cost > 0 {
            dump.push_str(&format!("  node {} {}: {}\n", node.id, node.kind.name(), cost));
        }
    }
    Ok((OpCounts { forward, backward }, dump))
}

/// Checks tape counts against [`closed_form`] for joint and dfs wiring,
/// with dfs repeated at every β in {1/4, 1/2, 3/4} that splits `width`
/// exactly. Any mismatch is an error carrying the per-node dump.
pub fn verify_counts(layers: usize, width: usize, beta: f64) -> Result<CountReport> {
    if layers == 0 || width < 2 {
        return Err(Error::Config("need at least 1 layer and width ≥ 2".into()));
    }
    if !beta_split_exact(width, beta) {
        return Err(Error::Config(format!(
            "beta·width = {} is not an integer in [1, {}]",
            beta * width as f64,
            width - 1
        )));
    }
    let mut runs = vec![(Mode::Joint, beta), (Mode::Dfs, beta)];
    for b in [0.25, 0.5, 0.75] {
        if b != beta && beta_split_exact(width, b) {
            runs.push((Mode::Dfs, b));
        }
    }
    let mut rows = Vec::new();
    for (mode, b) in runs {
        let (empirical, dump) = measure_counts(layers, width, b, mode, 0)?;
        let expected = closed_form(&AccountingModel {
            layers,
            width,
            beta: b,
            mode,
        })?;
        if empirical != expected {
            return Err(Error::Accounting(format!(
                "{} L={layers} N={width} β={b}: tape {empirical:?} vs closed form {expected:?}\n{dump}",
                mode.name()
            )));
        }
        rows.push(CountRow {
            mode,
            beta: b,
            empirical,
            expected,
            exact: true,
        });
    }
    let dfs_totals: Vec<u64> = rows.iter().filter(|r| r.mode == Mode::Dfs).map(|r| r.empirical.total()).collect();
    if dfs_totals.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Accounting(format!("dfs totals depend on beta: {dfs_totals:?}")));
    }
    let empirical_reduction = 1.0 - rows[1].empirical.total() as f64 / rows[0].empirical.total() as f64;
    Ok(CountReport {
        layers,
        width,
        beta,
        rows,
        reduction: reduction(layers),
        empirical_reduction,
    })
}

/// Cosine of two flattened gradients; `None` when either is zero.
pub fn cosine(a: &Tensor, b: &Tensor) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct PairCosine {
    /// 1-based exits.
    pub exits: (usize, usize),
    /// `None` marks an undefined pair (a zero gradient).
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamConflict {
    pub name: String,
    /// 1-based exits whose loss produces a nonzero gradient here.
    pub sources: Vec<usize>,
    pub pairs: Vec<PairCosine>,
    pub negative_pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConflictReport {
    pub mode: Mode,
    pub params: Vec<ParamConflict>,
}

impl ConflictReport {
    pub fn negative_pairs(&self) -> usize {
        self.params.iter().map(|p| p.negative_pairs).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamConflict> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Per-loss gradients for every parameter, with partitioned layer weights
/// reported as separate `+` (shared) and `-` (specific) blocks.
pub fn gradient_conflict_report(model: &Model, x: &Tensor, labels: &[usize]) -> Result<ConflictReport> {
    let cfg = &model.config;
    let exits = cfg.trained_exits();
    let keys = model.param_indices();
    let mut tape = Tape::new();
    let out = forward(model, x, &mut tape)?;
    let losses = exit_losses(&mut tape, &out, labels)?;
    let mut per_loss = Vec::with_capacity(exits.len());
    for &k in &exits {
        let seed: [Var; 1] = [losses[k]];
        per_loss.push(tape.backward(&seed, &keys)?);
    }

    let mut blocks: Vec<(String, ParamKey, Option<(usize, usize)>)> = Vec::new();
    for key in model.param_keys() {
        match key {
            ParamKey::LayerW(i) if cfg.mode.is_partitioned() && i + 1 < cfg.layers => {
                let l = &model.layers[i];
                blocks.push((format!("{}+", key.name()), key, Some((0, l.split))));
                blocks.push((format!("{}-", key.name()), key, Some((l.split, l.out_dim()))));
            }
            _ => blocks.push((key.name(), key, None)),
        }
    }

    let mut params = Vec::new();
    for (name, key, cols) in blocks {
        let grads: Vec<Tensor> = per_loss
            .iter()
            .map(|g| {
                let t = g.get(key.index()).expect("requested key");
                match cols {
                    Some((lo, hi)) => t.slice_cols(lo, hi).expect("block in range"),
                    None => t.clone(),
                }
            })
            .collect();
        let sources: Vec<usize> = grads
            .iter()
            .zip(&exits)
            .filter(|(g, _)| !g.all_zero())
            .map(|(_, &k)| k + 1)
            .collect();
        let mut pairs = Vec::new();
        for a in 0..grads.len() {
            for b in a + 1..grads.len() {
                pairs.push(PairCosine {
                    exits: (exits[a] + 1, exits[b] + 1),
                    cosine: cosine(&grads[a], &grads[b]),
                });
            }
        }
        let negative_pairs = pairs.iter().filter(|p| p.cosine.is_some_and(|c| c < 0.0)).count();
        params.push(ParamConflict {
            name,
            sources,
            pairs,
            negative_pairs,
        });
    }
    let report = ConflictReport { mode: cfg.mode, params };

    if cfg.mode == Mode::Dfs {
        for i in 0..cfg.layers {
            let mut single = vec![format!("{}", ParamKey::HeadW(i).name())];
            if i + 1 < cfg.layers {
                single.push(format!("{}-", ParamKey::LayerW(i).name()));
            }
            for name in single {
                let p = report.get(&name).expect("block listed");
                if p.sources != [i + 1] {
                    return Err(Error::Routing {
                        layer: i + 1,
                        clause: format!("{name} has gradient sources {:?}, expected only exit {}", p.sources, i + 1),
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Cumulative per-exit inference cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostProfile {
    pub per_exit: Vec<u64>,
}

/// Operations to reach exit `i` for a batch of `batch` samples: layers
/// `1..=i` plus head `i`.
pub fn inference_cost_profile_batch(cfg: &ModelConfig, batch: usize) -> CostProfile {
    let b = batch as u64;
    let mut acc = 0u64;
    let mut per_exit = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        acc += 2 * b * (cfg.layer_in(i) * cfg.widths[i]) as u64;
        per_exit.push(acc + 2 * b * (cfg.head_in(i) * cfg.classes) as u64);
    }
    CostProfile { per_exit }
}

/// Per-sample cost profile.
pub fn inference_cost_profile(cfg: &ModelConfig) -> CostProfile {
    inference_cost_profile_batch(cfg, 1)
}

/// Max-softmax confidence and correctness of every exit on every sample,
/// indexed `[exit][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitScores {
    pub confidence: Vec<Vec<f64>>,
    pub correct: Vec<Vec<bool>>,
}

impl ExitScores {
    pub fn samples(&self) -> usize {
        self.confidence.first().map_or(0, Vec::len)
    }

    pub fn collect(model: &Model, ds: &Dataset) -> Result<Self> {
        let logits = model.predict(&ds.x)?;
        let mut confidence = Vec::with_capacity(logits.len());
        let mut correct = Vec::with_capacity(logits.len());
        for z in &logits {
            let p = z.softmax_rows();
            confidence.push((0..p.rows()).map(|i| p.row_slice(i).iter().copied().fold(0.0, f64::max)).collect());
            correct.push(z.argmax_rows().iter().zip(&ds.y).map(|(a, b)| a == b).collect());
        }
        Ok(Self { confidence, correct })
    }
}

/// Exit taken by each sample: the first whose confidence reaches `t`, else
/// the last.
pub fn exit_choices(confidence: &[Vec<f64>], t: f64) -> Vec<usize> {
    let last = confidence.len() - 1;
    (0..confidence[0].len())
        .map(|s| (0..last).find(|&e| confidence[e][s] >= t).unwrap_or(last))
        .collect()
}

pub fn average_cost(costs: &[u64], confidence: &[Vec<f64>], t: f64) -> f64 {
    let choices = exit_choices(confidence, t);
    choices.iter().map(|&e| costs[e] as f64).sum::<f64>() / choices.len() as f64
}

const SEARCH_STEPS: usize = 64;

/// Largest threshold in `[0, 1]` whose average cost stays within `budget`,
/// by bisection. Average cost is non-decreasing in the threshold.
pub fn calibrate_threshold(costs: &[u64], confidence: &[Vec<f64>], budget: f64) -> Result<f64> {
    if budget < costs[0] as f64 {
        return Err(Error::InfeasibleBudget { budget, min: costs[0] });
    }
    if average_cost(costs, confidence, 1.0) <= budget {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..SEARCH_STEPS {
        let mid = 0.5 * (lo + hi);
        if average_cost(costs, confidence, mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetResult {
    pub budget: f64,
    pub threshold: f64,
    pub avg_cost: f64,
    pub top1: f64,
    pub histogram: Vec<usize>,
}

/// Applies threshold `t` and scores the routed predictions.
pub fn route(costs: &[u64], scores: &ExitScores, t: f64, budget: f64) -> BudgetResult {
    let choices = exit_choices(&scores.confidence, t);
    let mut histogram = vec![0; costs.len()];
    let mut hits = 0;
    for (s, &e) in choices.iter().enumerate() {
        histogram[e] += 1;
        hits += scores.correct[e][s] as usize;
    }
    let n = choices.len() as f64;
    BudgetResult {
        budget,
        threshold: t,
        avg_cost: choices.iter().map(|&e| costs[e] as f64).sum::<f64>() / n,
        top1: hits as f64 / n,
        histogram,
    }
}

/// Budgeted classification from precomputed exit scores. The threshold is
/// calibrated on `calib`, then capped so the `test` routing also fits the
/// budget (that cap reads only test confidences, never labels).
pub fn budgeted_eval_scores(costs: &[u64], calib: &ExitScores, test: &ExitScores, budget: f64) -> Result<BudgetResult> {
    let t_cal = calibrate_threshold(costs, &calib.confidence, budget)?;
    let t_cap = calibrate_threshold(costs, &test.confidence, budget)?;
    Ok(route(costs, test, t_cal.min(t_cap), budget))
}

/// Budgeted batch classification with per-sample exit costs from
/// [`inference_cost_profile`].
pub fn budgeted_eval(model: &Model, calib: &Dataset, test: &Dataset, budget: f64) -> Result<BudgetResult> {
    let costs = inference_cost_profile(&model.config).per_exit;
    let c = ExitScores::collect(model, calib)?;
    let t = ExitScores::collect(model, test)?;
    budgeted_eval_scores(&costs, &c, &t, budget)
}

/// `n` budgets evenly spaced from `c_1` to `c_L` inclusive.
pub fn budget_grid(profile: &CostProfile, n: usize) -> Vec<f64> {
    let lo = profile.per_exit[0] as f64;
    let hi = *profile.per_exit.last().expect("at least one exit") as f64;
    if n <= 1 {
        return vec![hi];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn budget_csv_header(exits: usize) -> String {
    let mut h = String::from("budget,threshold,avg_cost,top1");
    for i in 1..=exits {
        h.push_str(&format!(",hist_{i}"));
    }
    h
}

/// One CSV line; infeasible budgets are flagged in the threshold column.
pub fn budget_csv_row(budget: f64, result: Option<&BudgetResult>, exits: usize) -> String {
    match result {
        Some(r) => {
            let mut s = format!("{},{},{},{}", r.budget, r.threshold, r.avg_cost, r.top1);
            for h in &r.histogram {
                s.push_str(&format!(",{h}"));
            }
            s
        }
        None => format!("{budget},infeasible,,{}", ",".repeat(exits)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        let j = closed_form(&AccountingModel { layers: 3, width: 4, beta: 0.5, mode: Mode::Joint }).unwrap();
        assert_eq!((j.forward, j.backward), (768, 1408));
        let d = closed_form(&AccountingModel { layers: 3, width: 4, beta: 0.5, mode: Mode::Dfs }).unwrap();
        assert_eq!((d.forward, d.backward), (768, 1152));
        let one = closed_form(&AccountingModel { layers: 1, width: 3, beta: 0.5, mode: Mode::Joint }).unwrap();
        assert_eq!(one.backward, 6 * 27);
        assert!(closed_form(&AccountingModel { layers: 1, width: 3, beta: 0.5, mode: Mode::FinalOnly }).is_err());
    }

    #[test]
    fn reduction_examples() {
        assert!((reduction(6) - 1.0 / 7.0).abs() < 1e-15);
        assert!((reduction(13) - 24.0 / 154.0).abs() < 1e-15);
        assert_eq!(reduction(1), 0.0);
    }

    #[test]
    fn verify_count_examples() {
        let r = verify_counts(6, 8, 0.5).unwrap();
        let dfs = r.rows.iter().find(|r| r.mode == Mode::Dfs).unwrap();
        assert_eq!(dfs.empirical.backward, 18432);
        assert_eq!(r.rows.len(), 4);
        let r = verify_counts(2, 2, 0.5).unwrap();
        assert_eq!(r.rows[0].empirical.backward, 112);
        let a = measure_counts(4, 8, 0.25, Mode::Dfs, 1).unwrap().0;
        let b = measure_counts(4, 8, 0.75, Mode::Dfs, 2).unwrap().0;
        assert_eq!(a, b);
        assert!(matches!(verify_counts(3, 6, 0.25), Err(Error::Config(_))));
    }

    #[test]
    fn single_layer_counts() {
        let r = verify_counts(1, 4, 0.5).unwrap();
        assert!(r.all_exact());
        assert_eq!(r.empirical_reduction, 0.0);
    }

    #[test]
    fn cosine_cases() {
        let g = Tensor::row(vec![1.0, -2.0, 0.5]);
        assert_eq!(cosine(&g, &g.scale(-1.0)), Some(-1.0));
        let a = Tensor::row(vec![1.0, 0.0]);
        let b = Tensor::row(vec![0.0, 3.0]);
        assert!(cosine(&a, &b).unwrap().abs() < 1e-12);
        assert_eq!(cosine(&a, &Tensor::zeros(1, 2)), None);
    }

    #[test]
    fn square_profile() {
        let n = 4u64;
        let cfg = square_config(3, 4, 0.5, Mode::Dfs);
        let p = inference_cost_profile_batch(&cfg, 4);
        for (i, c) in p.per_exit.iter().enumerate() {
            assert_eq!(*c, (2 * (i as u64 + 1) + 2) * n.pow(3));
        }
        let one = inference_cost_profile(&square_config(1, 4, 0.5, Mode::Joint));
        assert_eq!(one.per_exit, vec![2 * 16 + 2 * 16]);
    }

    /// Every distinct achievable routing, found by trying each confidence
    /// value (and 0, 1, and just above each) as the threshold.
    fn brute_force(costs: &[u64], conf: &[Vec<f64>], budget: f64) -> (f64, Vec<usize>) {
        let mut cands = vec![0.0, 1.0];
        for row in conf {
            for &c in row {
                cands.push(c);
                cands.push(f64::min(1.0, c + 1e-9));
            }
        }
        let mut best: Option<(f64, f64)> = None;
        for t in cands {
            let cost = average_cost(costs, conf, t);
            if cost <= budget && best.is_none_or(|(bt, _)| t > bt) {
                best = Some((t, cost));
            }
        }
        let (t, cost) = best.unwrap();
        let mut hist = vec![0; costs.len()];
        for e in exit_choices(conf, t) {
            hist[e] += 1;
        }
        (cost, hist)
    }

    fn toy() -> (Vec<u64>, ExitScores) {
        let conf = vec![vec![0.95, 0.95, 0.5, 0.5], vec![0.9; 4]];
        let correct = vec![vec![true, false, true, false], vec![true; 4]];
        (vec![1, 2], ExitScores { confidence: conf, correct })
    }

    #[test]
    fn toy_budget_matches_brute_force() {
        let (costs, s) = toy();
        let r = budgeted_eval_scores(&costs, &s, &s, 1.5).unwrap();
        assert!(r.threshold > 0.5 && r.threshold <= 0.95, "{}", r.threshold);
        assert_eq!(r.avg_cost, 1.5);
        assert_eq!(r.histogram, vec![2, 2]);
        let (cost, hist) = brute_force(&costs, &s.confidence, 1.5);
        assert_eq!((cost, hist), (r.avg_cost, r.histogram.clone()));
        assert_eq!(r.top1, 0.75);
    }

    #[test]
    fn toy_budget_extremes() {
        let (costs, s) = toy();
        let tight = budgeted_eval_scores(&costs, &s, &s, 1.0).unwrap();
        assert_eq!(tight.histogram, vec![4, 0]);
        assert!(tight.threshold <= 0.5);
        let loose = budgeted_eval_scores(&costs, &s, &s, 2.0).unwrap();
        assert_eq!(loose.threshold, 1.0);
        assert_eq!(loose.histogram, vec![0, 4]);
        assert_eq!(loose.top1, 1.0);
        assert!(matches!(
            budgeted_eval_scores(&costs, &s, &s, 0.9),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn csv_rows() {
        let (costs, s) = toy();
        let r = budgeted_eval_scores(&costs, &s, &s, 2.0).unwrap();
        assert_eq!(budget_csv_header(2), "budget,threshold,avg_cost,top1,hist_1,hist_2");
        assert_eq!(budget_csv_row(2.0, Some(&r), 2), "2,1,2,1,0,4");
        assert_eq!(budget_csv_row(0.5, None, 2), "0.5,infeasible,,,,");
    }

    fn random_scores(seed: u64, exits: usize, n: usize) -> ExitScores {
        let mut rng = RngStream::new(seed);
        ExitScores {
            confidence: (0..exits).map(|_| (0..n).map(|_| rng.uniform()).collect()).collect(),
            correct: (0..exits).map(|_| (0..n).map(|_| rng.uniform() < 0.7).collect()).collect(),
        }
    }

    proptest! {
        #[test]
        fn budget_contract(seed in any::<u64>(), n in 1usize..60, frac in 0.0f64..1.0, frac2 in 0.0f64..1.0) {
            let costs = vec![10, 25, 40, 70];
            let cal = random_scores(seed, 4, n);
            let test = random_scores(seed ^ 1, 4, n + 3);
            let b1 = 10.0 + 60.0 * frac.min(frac2);
            let b2 = 10.0 + 60.0 * frac.max(frac2);
            let r1 = budgeted_eval_scores(&costs, &cal, &test, b1).unwrap();
            let r2 = budgeted_eval_scores(&costs, &cal, &test, b2).unwrap();
            prop_assert!(r1.avg_cost <= b1);
            prop_assert!(r2.avg_cost <= b2);
            prop_assert_eq!(r1.histogram.iter().sum::<usize>(), n + 3);
            // the admissible set only grows with the budget
            prop_assert!(calibrate_threshold(&costs, &cal.confidence, b2).unwrap()
                >= calibrate_threshold(&costs, &cal.confidence, b1).unwrap());
        }

        #[test]
        fn reduction_increases_below_one_sixth(l in 1usize..10_000) {
            prop_assert!(reduction(l + 1) > reduction(l));
            prop_assert!(reduction(l) < 1.0 / 6.0);
        }
    }
}
