//! Multi-exit dense networks.
//!
//! Each backbone layer is `relu(f · w + b)` and each exit head is an affine
//! map to class logits. In the partitioned modes the output columns of every
//! layer but the last are split into a shared block (`w⁺`, `f⁺`, columns
//! `[0, split)`) and an exit-specific block (`w⁻`, `f⁻`, the rest).
//!
//! Gradient routing in [`Mode::Dfs`]:
//!
//! | edge                  | backward |
//! |-----------------------|----------|
//! | `f_i⁺ → f_{i+1}⁺, f_{i+1}⁻` | live |
//! | `f_i⁻ → head_i`       | live     |
//! | `f_L → head_L`        | live     |
//! | `f_{L−1}⁺ → f_L`      | live     |
//! | `f_i⁻ → next layer`   | detached |
//! | `f_i⁺ → head_i`, i<L  | detached |
//!
//! so `w_i⁻` only hears loss `i` and `w_i⁺` only hears losses `k > i`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{he_init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every exit loss reaches every upstream weight.
    Joint,
    /// Partitioned features, full referencing, pruned backward routing.
    Dfs,
    /// Partitioned features; heads see only `f⁻`, layers only `f⁺`.
    PartitionOnly,
    /// Joint wiring trained on the last exit alone.
    FinalOnly,
}

impl Mode {
    pub fn is_partitioned(self) -> bool {
        matches!(self, Mode::Dfs | Mode::PartitionOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Dfs => "dfs",
            Mode::PartitionOnly => "partition_only",
            Mode::FinalOnly => "final_only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" | "dsn" => Ok(Mode::Joint),
            "dfs" => Ok(Mode::Dfs),
            "partition_only" => Ok(Mode::PartitionOnly),
            "final_only" => Ok(Mode::FinalOnly),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub widths: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub beta: f64,
    pub mode: Mode,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub seed: u64,
    /// Let exit `i` train `w_i⁺` through its own head (dfs only).
    #[serde(default)]
    pub head_shared_grad: bool,
}

impl ModelConfig {
    /// `layers` layers of equal `width`.
    pub fn uniform(layers: usize, width: usize, input_dim: usize, classes: usize, beta: f64, mode: Mode) -> Self {
        Self {
            layers,
            widths: vec![width; layers],
            input_dim,
            classes,
            beta,
            mode,
            bias: false,
            seed: 0,
            head_shared_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.widths.len() != self.layers {
            return Err(Error::Config(format!(
                "widths has {} entries for {} layers",
                self.widths.len(),
                self.layers
            )));
        }
        if self.input_dim == 0 || self.classes == 0 || self.widths.contains(&0) {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.beta)));
        }
        if self.mode.is_partitioned() {
            for (i, &w) in self.widths[..self.layers - 1].iter().enumerate() {
                if w < 2 {
                    return Err(Error::Config(format!(
                        "layer {} width {w} cannot be split into shared and specific parts",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Column split of layer `i` (0-based): `w⁺` is `[0, split)`.
    pub fn split(&self, i: usize) -> usize {
        let w = self.widths[i];
        if self.mode.is_partitioned() && i + 1 < self.layers {
            partition_channels(w, self.beta).map(|(p, _)| p).unwrap_or(w)
        } else {
            w
        }
    }

    /// Input width of layer `i` (0-based).
    pub fn layer_in(&self, i: usize) -> usize {
        match (i, self.mode) {
            (0, _) => self.input_dim,
            (_, Mode::PartitionOnly) => self.split(i - 1),
            _ => self.widths[i - 1],
        }
    }

    /// Feature width consumed by head `i` (0-based).
    pub fn head_in(&self, i: usize) -> usize {
        if self.mode == Mode::PartitionOnly && i + 1 < self.layers {
            self.widths[i] - self.split(i)
        } else {
            self.widths[i]
        }
    }

    /// 0-based exits whose losses drive training.
    pub fn trained_exits(&self) -> Vec<usize> {
        match self.mode {
            Mode::FinalOnly => vec![self.layers - 1],
            _ => (0..self.layers).collect(),
        }
    }
}

/// Splits `c` channels into `(shared, specific)` by ratio `beta`, rounding
/// half away from zero and keeping at least one channel on each side.
pub fn partition_channels(c: usize, beta: f64) -> Result<(usize, usize)> {
    if c < 2 {
        return Err(Error::Config(format!("cannot partition {c} channel(s)")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!("beta {beta} outside (0, 1)")));
    }
    let raw = (beta * c as f64).round() as usize;
    let plus = raw.clamp(1, c - 1);
    Ok((plus, c - plus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Tensor,
    pub split: usize,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    /// Copy of `w⁺`.
    pub fn shared(&self) -> Tensor {
        self.w.slice_cols(0, self.split).expect("split within width")
    }

    /// Copy of `w⁻`; empty for unpartitioned layers.
    pub fn specific(&self) -> Tensor {
        self.w
            .slice_cols(self.split, self.out_dim())
            .expect("split within width")
    }

    pub fn shared_mut(&mut self) -> ColumnsMut<'_> {
        ColumnsMut {
            lo: 0,
            hi: self.split,
            t: &mut self.w,
        }
    }

    pub fn specific_mut(&mut self) -> ColumnsMut<'_> {
        ColumnsMut {
            lo: self.split,
            hi: self.w.cols(),
            t: &mut self.w,
        }
    }
}

/// Mutable view of a column range; writes land in the parent tensor.
pub struct ColumnsMut<'a> {
    t: &'a mut Tensor,
    lo: usize,
    hi: usize,
}

impl ColumnsMut<'_> {
    pub fn cols(&self) -> usize {
        self.hi - self.lo
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.t.get(r, self.lo + c)
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(c < self.cols(), "column {c} outside view");
        self.t.set(r, self.lo + c, v);
    }
}

/// Multiplier on the He-normal draw for exit-head weights.
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitHead {
    pub w: Tensor,
    pub bias: Option<Tensor>,
}

/// Identifies one trainable tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    LayerW(usize),
    LayerB(usize),
    HeadW(usize),
    HeadB(usize),
}

impl ParamKey {
    pub fn index(self) -> usize {
        match self {
            ParamKey::LayerW(i) => 4 * i,
            ParamKey::LayerB(i) => 4 * i + 1,
            ParamKey::HeadW(i) => 4 * i + 2,
            ParamKey::HeadB(i) => 4 * i + 3,
        }
    }

    pub fn from_index(k: usize) -> Self {
        let i = k / 4;
        match k % 4 {
            0 => ParamKey::LayerW(i),
            1 => ParamKey::LayerB(i),
            2 => ParamKey::HeadW(i),
            _ => ParamKey::HeadB(i),
        }
    }

    /// Name used in checkpoints and reports (1-based layer numbers).
    pub fn name(self) -> String {
        match self {
            ParamKey::LayerW(i) => format!("layer{}.w", i + 1),
            ParamKey::LayerB(i) => format!("layer{}.b", i + 1),
            ParamKey::HeadW(i) => format!("head{}.w", i + 1),
            ParamKey::HeadB(i) => format!("head{}.b", i + 1),
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(self, ParamKey::LayerB(_) | ParamKey::HeadB(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    pub heads: Vec<ExitHead>,
}

/// Per-layer detach flags used by [`forward_routed`]. Entry `i` covers the
/// edges leaving layer `i`'s specific block and shared block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    /// `f_i⁻ → layer i+1` carries no gradient.
    pub cut_specific_forward: Vec<bool>,
    /// `f_i⁺ → head_i` carries no gradient.
    pub cut_shared_to_head: Vec<bool>,
}

impl Routing {
    /// The routing prescribed by the model's mode.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let n = cfg.layers.saturating_sub(1);
        let dfs = cfg.mode == Mode::Dfs;
        Self {
            cut_specific_forward: vec![dfs; n],
            cut_shared_to_head: vec![dfs && !cfg.head_shared_grad; n],
        }
    }

    /// No detached edges at all.
    pub fn none(layers: usize) -> Self {
        let n = layers.saturating_sub(1);
        Self {
            cut_specific_forward: vec![false; n],
            cut_shared_to_head: vec![false; n],
        }
    }
}

/// Per-exit logits, ordered by depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitOutputs {
    pub logits: Vec<Var>,
}

impl Model {
    pub fn build(config: ModelConfig, rng: &mut RngStream) -> Result<Model> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut heads = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let fan_in = config.layer_in(i);
            let out = config.widths[i];
            layers.push(LayerParams {
                w: he_init(fan_in, out, rng),
                split: config.split(i),
                bias: config.bias.then(|| Tensor::zeros(1, out)),
            });
        }
        for i in 0..config.layers {
            // heads start small so initial predictions are near uniform
            heads.push(ExitHead {
                w: he_init(config.head_in(i), config.classes, rng).scale(HEAD_INIT_SCALE),
                bias: config.bias.then(|| Tensor::zeros(1, config.classes)),
            });
        }
        Ok(Model {
            config,
            layers,
            heads,
        })
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            keys.push(ParamKey::LayerW(i));
            if l.bias.is_some() {
                keys.push(ParamKey::LayerB(i));
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            keys.push(ParamKey::HeadW(i));
            if h.bias.is_some() {
                keys.push(ParamKey::HeadB(i));
            }
        }
        keys
    }

    pub fn param_indices(&self) -> Vec<usize> {
        self.param_keys().into_iter().map(ParamKey::index).collect()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::LayerW(i) => self.layers.get(i).map(|l| &l.w),
            ParamKey::LayerB(i) => self.layers.get(i).and_then(|l| l.bias.as_ref()),
            ParamKey::HeadW(i) => self.heads.get(i).map(|h| &h.w),
            ParamKey::HeadB(i) => self.heads.get(i).and_then(|h| h.bias.as_ref()),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::LayerW(i) => self.layers.get_mut(i).map(|l| &mut l.w),
            ParamKey::LayerB(i) => self.layers.get_mut(i).and_then(|l| l.bias.as_mut()),
            ParamKey::HeadW(i) => self.heads.get_mut(i).map(|h| &mut h.w),
            ParamKey::HeadB(i) => self.heads.get_mut(i).and_then(|h| h.bias.as_mut()),
        }
    }

    /// Same model wired in another mode. Shapes must agree, so this works
    /// between joint, dfs and final_only.
    pub fn with_mode(&self, mode: Mode) -> Result<Model> {
        let mut config = self.config.clone();
        config.mode = mode;
        config.validate()?;
        let mut m = self.clone();
        for i in 0..config.layers {
            if config.layer_in(i) != self.layers[i].w.rows() || config.head_in(i) != self.heads[i].w.rows() {
                return Err(Error::Config(format!(
                    "{} and {} wirings have different shapes",
                    self.config.mode.name(),
                    mode.name()
                )));
            }
            m.layers[i].split = config.split(i);
        }
        m.config = config;
        Ok(m)
    }

    /// Logits of every exit for a batch, on a throwaway tape.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let out = forward(self, x, &mut tape)?;
        Ok(out.logits.iter().map(|v| tape.value(*v).clone()).collect())
    }
}

pub fn forward(model: &Model, x: &Tensor, tape: &mut Tape) -> Result<ExitOutputs> {
    forward_routed(model, x, tape, &Routing::for_config(&model.config))
}

/// Records the forward pass with explicit detach flags.
pub fn forward_routed(model: &Model, x: &Tensor, tape: &mut Tape, routing: &Routing) -> Result<ExitOutputs> {
    let cfg = &model.config;
    if x.cols() != cfg.input_dim {
        return Err(Error::Dimension {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![x.rows(), cfg.input_dim],
        });
    }
    let input = tape.constant(x.clone());
    let mut logits = Vec::with_capacity(cfg.layers);
    // feature handed to the next layer
    let mut carry = input;
    for (i, layer) in model.layers.iter().enumerate() {
        let w = tape.param(ParamKey::LayerW(i).index(), layer.w.clone())?;
        let b = match &layer.bias {
            Some(b) => Some(tape.param(ParamKey::LayerB(i).index(), b.clone())?),
            None => None,
        };
        let last = i + 1 == cfg.layers;
        let head_in = if cfg.mode.is_partitioned() && !last {
            let out = layer.out_dim();
            let plus = affine_relu(tape, carry, w, b, 0, layer.split, out)?;
            let minus = affine_relu(tape, carry, w, b, layer.split, out, out)?;
            let minus_fwd = if routing.cut_specific_forward[i] {
                tape.detach(minus)
            } else {
                minus
            };
            let plus_head = if routing.cut_shared_to_head[i] {
                tape.detach(plus)
            } else {
                plus
            };
            match cfg.mode {
                Mode::Dfs => {
                    carry = tape.concat_cols(&[plus, minus_fwd])?;
                    tape.concat_cols(&[plus_head, minus])?
                }
                _ => {
                    carry = plus;
                    minus
                }
            }
        } else {
            let out = layer.out_dim();
            let f = affine_relu(tape, carry, w, b, 0, out, out)?;
            carry = f;
            f
        };
        let head = &model.heads[i];
        let wc = tape.param(ParamKey::HeadW(i).index(), head.w.clone())?;
        let mut z = tape.matmul(head_in, wc)?;
        if let Some(bc) = &head.bias {
            let bc = tape.param(ParamKey::HeadB(i).index(), bc.clone())?;
            z = tape.add_bias(z, bc)?;
        }
        logits.push(z);
    }
    Ok(ExitOutputs { logits })
}

/// `relu(x · w[:, lo..hi] + b[lo..hi])`. The full range uses `w` directly.
fn affine_relu(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    lo: usize,
    hi: usize,
    out: usize,
) -> Result<Var> {
    let full = lo == 0 && hi == out;
    let wv = if full { w } else { tape.slice_cols(w, lo, hi)? };
    let mut h = tape.matmul(x, wv)?;
    if let Some(b) = b {
        let bv = if full { b } else { tape.slice_cols(b, lo, hi)? };
        h = tape.add_bias(h, bv)?;
    }
    tape.relu(h)
}

/// Cross-entropy node for every exit.
pub fn exit_losses(tape: &mut Tape, out: &ExitOutputs, labels: &[usize]) -> Result<Vec<Var>> {
    out.logits
        .iter()
        .map(|z| tape.softmax_ce(*z, labels))
        .collect()
}

/// Outcome of one structural probe in [`routing_check`].
#[derive(Debug, Clone, Serialize)]
pub struct RoutingProbe {
    pub layer: usize,
    pub clause: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingReport {
    pub mode: Mode,
    pub probes: Vec<RoutingProbe>,
}

impl RoutingReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }

    pub fn first_failure(&self) -> Option<&RoutingProbe> {
        self.probes.iter().find(|p| !p.passed)
    }
}

/// Exercises the routing table with single-loss and downstream-loss probes.
/// Returns the full report, or the first violated clause as an error.
pub fn routing_check(model: &Model, x: &Tensor, labels: &[usize]) -> Result<RoutingReport> {
    routing_check_with(model, x, labels, &Routing::for_config(&model.config))
}

pub fn routing_check_with(model: &Model, x: &Tensor, labels: &[usize], routing: &Routing) -> Result<RoutingReport> {
    let report = routing_probes(model, x, labels, routing)?;
    if let Some(bad) = report.first_failure() {
        return Err(Error::Routing {
            layer: bad.layer,
            clause: bad.clause.clone(),
        });
    }
    Ok(report)
}

/// Runs every probe and reports pass/fail without short-circuiting.
pub fn routing_probes(model: &Model, x: &Tensor, labels: &[usize], routing: &Routing) -> Result<RoutingReport> {
    let cfg = &model.config;
    let l = cfg.layers;
    let keys = model.param_indices();
    let grads_for = |seeded: &[usize]| -> Result<crate::autograd::GradMap> {
        let mut tape = Tape::new();
        let out = forward_routed(model, x, &mut tape, routing)?;
        let losses = exit_losses(&mut tape, &out, labels)?;
        let sel: Vec<Var> = seeded.iter().map(|&k| losses[k]).collect();
        tape.backward(&sel, &keys)
    };
    let mut probes = Vec::new();
    let mut push = |layer: usize, clause: String, passed: bool| {
        probes.push(RoutingProbe { layer, clause, passed });
    };
    let head_clause = |g: &crate::autograd::GradMap, seeded: &[usize], push: &mut dyn FnMut(usize, String, bool)| {
        for j in 0..l {
            let gw = g.get(ParamKey::HeadW(j).index()).expect("head grad");
            let zero = gw.all_zero();
            if seeded.contains(&j) {
                push(j + 1, format!("(c) head {} weight gradient nonzero when its loss is seeded", j + 1), !zero);
            } else {
                push(j + 1, format!("(c) head {} weight gradient zero when its loss is not seeded (seeded {:?})", j + 1, one_based(seeded)), zero);
            }
        }
    };

    for i in 0..l.saturating_sub(1) {
        let alone = grads_for(&[i])?;
        let w = alone.get(ParamKey::LayerW(i).index()).expect("layer grad");
        let split = model.layers[i].split;
        if cfg.mode.is_partitioned() {
            let plus = w.slice_cols(0, split)?;
            let minus = w.slice_cols(split, w.cols())?;
            push(i + 1, format!("(a) loss {} alone: specific block gradient nonzero", i + 1), !minus.all_zero());
            push(i + 1, format!("(a) loss {} alone: shared block gradient exactly zero", i + 1), plus.all_zero());
        } else {
            push(i + 1, format!("loss {} alone: layer weight gradient nonzero", i + 1), !w.all_zero());
        }
        head_clause(&alone, &[i], &mut push);

        let downstream: Vec<usize> = (i + 1..l).collect();
        let later = grads_for(&downstream)?;
        if cfg.mode.is_partitioned() {
            let w = later.get(ParamKey::LayerW(i).index()).expect("layer grad");
            let minus = w.slice_cols(split, w.cols())?;
            push(
                i + 1,
                format!("(b) losses {:?}: specific block gradient exactly zero", one_based(&downstream)),
                minus.all_zero(),
            );
        }
        head_clause(&later, &downstream, &mut push);
    }
    Ok(RoutingReport {
        mode: cfg.mode,
        probes,
    })
}

fn one_based(idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|i| i + 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{detach_aware_fd, max_rel_error};

    fn batch(n: usize, d: usize, k: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let x = he_init(n, d, &mut rng).scale((d as f64 / 2.0).sqrt());
        let y = (0..n).map(|_| rng.below(k)).collect();
        (x, y)
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_channels(64, 0.5).unwrap(), (32, 32));
        assert_eq!(partition_channels(8, 0.05).unwrap(), (1, 7));
        assert_eq!(partition_channels(5, 0.3).unwrap(), (2, 3));
        assert_eq!(partition_channels(8, 0.99).unwrap(), (7, 1));
        assert!(partition_channels(1, 0.5).is_err());
        assert!(partition_channels(4, 1.0).is_err());
    }

    #[test]
    fn build_shapes_per_mode() {
        let mut rng = RngStream::new(0);
        let m = Model::build(ModelConfig::uniform(4, 32, 2, 3, 0.5, Mode::Dfs), &mut rng).unwrap();
        for l in &m.layers[..3] {
            assert_eq!((l.split, l.out_dim() - l.split), (16, 16));
        }
        assert_eq!(m.layers[3].split, 32);
        assert!(m.heads.iter().all(|h| h.w.rows() == 32));

        let m = Model::build(ModelConfig::uniform(4, 32, 2, 3, 0.25, Mode::PartitionOnly), &mut rng).unwrap();
        for h in &m.heads[..3] {
            assert_eq!(h.w.rows(), 24);
        }
        assert_eq!(m.heads[3].w.rows(), 32);
        assert_eq!(m.layers[1].w.rows(), 8);

        let m = Model::build(ModelConfig::uniform(3, 8, 2, 3, 0.5, Mode::Joint), &mut rng).unwrap();
        assert!(m.layers.iter().all(|l| l.split == l.out_dim()));
        assert!(m.heads.iter().all(|h| h.w.rows() == 8));
    }

    #[test]
    fn build_rejects_invalid_configs() {
        let mut rng = RngStream::new(0);
        let mut cfg = ModelConfig::uniform(3, 8, 2, 3, 1.0, Mode::Dfs);
        assert!(matches!(Model::build(cfg.clone(), &mut rng), Err(Error::Config(_))));
        cfg.beta = 0.5;
        cfg.widths = vec![8, 1, 8];
        assert!(matches!(Model::build(cfg.clone(), &mut rng), Err(Error::Config(_))));
        cfg.widths = vec![8, 8];
        assert!(matches!(Model::build(cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn views_share_storage() {
        let mut rng = RngStream::new(1);
        let mut m = Model::build(ModelConfig::uniform(2, 6, 3, 2, 0.5, Mode::Dfs), &mut rng).unwrap();
        let l = &mut m.layers[0];
        assert!(l.shared().concat_cols(&l.specific()).unwrap().bitwise_eq(&l.w));
        l.specific_mut().set(1, 0, 42.0);
        l.shared_mut().set(0, 2, -7.0);
        assert_eq!(l.w.get(1, 3), 42.0);
        assert_eq!(l.w.get(0, 2), -7.0);
        assert_eq!(l.specific().get(1, 0), 42.0);
    }

    #[test]
    fn output_shapes() {
        let mut rng = RngStream::new(2);
        let m = Model::build(ModelConfig::uniform(2, 4, 3, 3, 0.5, Mode::Dfs), &mut rng).unwrap();
        let (x, _) = batch(2, 3, 3, 9);
        let logits = m.predict(&x).unwrap();
        assert_eq!(logits.len(), 2);
        assert!(logits.iter().all(|z| z.shape() == [2, 3]));
        assert!(matches!(m.predict(&Tensor::zeros(2, 4)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dfs_forward_matches_joint_bitwise() {
        let mut rng = RngStream::new(3);
        let mut cfg = ModelConfig::uniform(4, 10, 5, 4, 0.3, Mode::Joint);
        cfg.bias = true;
        let mut joint = Model::build(cfg, &mut rng).unwrap();
        for l in &mut joint.layers {
            l.bias = Some(he_init(1, l.out_dim(), &mut rng));
        }
        let dfs = joint.with_mode(Mode::Dfs).unwrap();
        let (x, _) = batch(7, 5, 4, 4);
        let a = joint.predict(&x).unwrap();
        let b = dfs.predict(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!(p.bitwise_eq(q));
        }
        let mut tape = Tape::new();
        let out = forward_routed(&dfs, &x, &mut tape, &Routing::none(4)).unwrap();
        for (v, q) in out.logits.iter().zip(&b) {
            assert!(tape.value(*v).bitwise_eq(q));
        }
    }

    #[test]
    fn dfs_routing_holds() {
        let mut rng = RngStream::new(5);
        let m = Model::build(ModelConfig::uniform(3, 8, 4, 3, 0.5, Mode::Dfs), &mut rng).unwrap();
        let (x, y) = batch(12, 4, 3, 6);
        let report = routing_check(&m, &x, &y).unwrap();
        assert!(report.passed());
        assert!(report.probes.len() > 10);
    }

    #[test]
    fn flipped_detach_is_caught() {
        let mut rng = RngStream::new(5);
        let m = Model::build(ModelConfig::uniform(3, 8, 4, 3, 0.5, Mode::Dfs), &mut rng).unwrap();
        let (x, y) = batch(12, 4, 3, 6);
        let mut r = Routing::for_config(&m.config);
        r.cut_specific_forward[0] = false;
        let err = routing_check_with(&m, &x, &y, &r).unwrap_err();
        assert!(matches!(err, Error::Routing { layer: 1, .. }), "{err}");
        let mut r = Routing::for_config(&m.config);
        r.cut_shared_to_head[1] = false;
        assert!(matches!(
            routing_check_with(&m, &x, &y, &r),
            Err(Error::Routing { layer: 2, .. })
        ));
    }

    #[test]
    fn partition_only_routing_holds() {
        let mut rng = RngStream::new(8);
        let m = Model::build(ModelConfig::uniform(3, 8, 4, 3, 0.25, Mode::PartitionOnly), &mut rng).unwrap();
        let (x, y) = batch(12, 4, 3, 6);
        assert!(routing_check(&m, &x, &y).unwrap().passed());
    }

    #[test]
    fn joint_loss_one_reaches_first_layer_and_matches_fd() {
        let mut rng = RngStream::new(9);
        let m = Model::build(ModelConfig::uniform(3, 6, 3, 3, 0.5, Mode::Joint), &mut rng).unwrap();
        let (x, y) = batch(8, 3, 3, 10);
        let report = routing_check(&m, &x, &y).unwrap();
        assert!(report.passed());

        let key = ParamKey::LayerW(0);
        let mut tape = Tape::new();
        let out = forward(&m, &x, &mut tape).unwrap();
        let losses = exit_losses(&mut tape, &out, &y).unwrap();
        let g = tape.backward(&losses[..1], &m.param_indices()).unwrap();
        let fd = detach_aware_fd(m.param(key).unwrap(), 1e-5, |t, p| {
            let mut mm = m.clone();
            *mm.param_mut(key).unwrap() = p.clone();
            let out = forward(&mm, &x, t)?;
            Ok(exit_losses(t, &out, &y)?[..1].to_vec())
        })
        .unwrap();
        let g = g.get(key.index()).unwrap();
        assert!(!g.all_zero());
        assert!(max_rel_error(g, &fd) < 1e-4);
    }

    #[test]
    fn partition_only_specific_weights_touch_only_their_exit() {
        let mut rng = RngStream::new(11);
        let m = Model::build(ModelConfig::uniform(3, 6, 3, 3, 0.5, Mode::PartitionOnly), &mut rng).unwrap();
        let (x, _) = batch(5, 3, 3, 12);
        let base = m.predict(&x).unwrap();
        for i in 0..2 {
            let mut p = m.clone();
            for r in 0..p.layers[i].w.rows() {
                let view = &mut p.layers[i].specific_mut();
                for c in 0..view.cols() {
                    let v = view.get(r, c);
                    view.set(r, c, v + 0.5);
                }
            }
            let moved = p.predict(&x).unwrap();
            for j in 0..3 {
                assert_eq!(moved[j].bitwise_eq(&base[j]), j != i, "layer {i} exit {j}");
            }
        }
    }

    #[test]
    fn param_key_index_roundtrip() {
        for k in 0..40 {
            assert_eq!(ParamKey::from_index(k).index(), k);
        }
    }
}
