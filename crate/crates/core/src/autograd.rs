//! Reverse-mode differentiation over a recorded tape.
//!
//! Every edge into a node carries a detach flag. A detached edge passes its
//! value forward and nothing backward. Before propagating, [`Tape::backward`]
//! computes which nodes both depend on a requested parameter and feed a
//! seeded loss through live edges; nothing else gets gradient storage.
//!
//! When a product's left operand is a column concatenation, only the column
//! blocks whose sources are live are materialized. That is what makes the
//! operation counter reproduce the partitioned-network totals.
//!
//! Operation counting: a product of `m × k` by `k × n` costs `2·m·k·n`, both
//! forward and for every operand-gradient block computed backward. Slicing,
//! concatenation, activations, bias adds and the loss cost nothing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Handle to a tape node as seen by one consumer. `detached` marks the edge
/// as forward-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: NodeId,
    pub detached: bool,
}

impl Var {
    pub fn live(id: NodeId) -> Self {
        Self { id, detached: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Constant,
    /// Trainable leaf, keyed by the owner's parameter index.
    Param(usize),
    MatMul,
    ConcatCols,
    SliceCols { lo: usize, hi: usize },
    Relu,
    AddBias,
    Add,
    /// Mean cross-entropy of row-softmaxed logits against labels.
    SoftmaxCe { labels: Vec<usize> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param(_) => "param",
            OpKind::MatMul => "matmul",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Relu => "relu",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::SoftmaxCe { .. } => "softmax_ce",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PinMode {
    Off,
    Record,
    Replay,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// Materialize only live column blocks of concatenated operands.
    pub prune: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { prune: true }
    }
}

/// Parameter gradients keyed by parameter index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, key: usize) -> Option<&Tensor> {
        self.grads.get(&key)
    }

    pub fn insert(&mut self, key: usize, grad: Tensor) {
        self.grads.insert(key, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum of two maps over the same keys.
    pub fn sum(&self, other: &GradMap) -> Result<GradMap> {
        let mut out = self.clone();
        for (k, g) in other.iter() {
            match out.grads.get_mut(&k) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    out.grads.insert(k, g.clone());
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: BTreeMap<usize, NodeId>,
    fwd_macs: u64,
    bwd_macs: u64,
    node_bwd_macs: Vec<u64>,
    pin_mode: PinMode,
    pins: Vec<Tensor>,
    pin_cursor: usize,
    grad_allocations: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            fwd_macs: 0,
            bwd_macs: 0,
            node_bwd_macs: Vec::new(),
            pin_mode: PinMode::Off,
            pins: Vec::new(),
            pin_cursor: 0,
            grad_allocations: 0,
        }
    }

    /// A tape that remembers the value crossing every detached edge, in
    /// consumption order. See [`Tape::pinned`].
    pub fn recording_pins() -> Self {
        Self {
            pin_mode: PinMode::Record,
            ..Self::new()
        }
    }

    /// A tape that substitutes previously recorded values for every detached
    /// edge, so detached paths stay frozen under re-evaluation.
    pub fn pinned(pins: Vec<Tensor>) -> Self {
        Self {
            pin_mode: PinMode::Replay,
            pins,
            ..Self::new()
        }
    }

    pub fn take_pins(&mut self) -> Vec<Tensor> {
        std::mem::take(&mut self.pins)
    }

    /// Whether a replaying tape consumed exactly the recorded pins.
    pub fn pins_exhausted(&self) -> bool {
        self.pin_mode != PinMode::Replay || self.pin_cursor == self.pins.len()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&TapeNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Graph(format!("unknown node {id}")))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// (forward, backward) operation counts.
    pub fn macs(&self) -> (u64, u64) {
        (self.fwd_macs, self.bwd_macs)
    }

    /// Backward operations attributed to each node, indexed by node id.
    pub fn backward_macs_by_node(&self) -> &[u64] {
        &self.node_bwd_macs
    }

    /// Number of node gradient buffers allocated by the last backward.
    pub fn grad_allocations(&self) -> usize {
        self.grad_allocations
    }

    pub fn param_node(&self, key: usize) -> Option<NodeId> {
        self.params.get(&key).copied()
    }

    /// Appends a node with an already computed value. Forward operations are
    /// counted from the kind and input shapes.
    pub fn record(&mut self, kind: OpKind, inputs: Vec<Var>, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        for v in &inputs {
            if v.id >= id {
                return Err(Error::Graph(format!(
                    "node {id} ({}) references unknown input {}",
                    kind.name(),
                    v.id
                )));
            }
        }
        if let OpKind::MatMul = kind {
            let a = &self.nodes[inputs[0].id].value;
            let b = &self.nodes[inputs[1].id].value;
            self.fwd_macs += 2 * (a.rows() * a.cols() * b.cols()) as u64;
        }
        let requires_grad = match kind {
            OpKind::Param(_) => true,
            _ => inputs
                .iter()
                .any(|v| !v.detached && self.nodes[v.id].requires_grad),
        };
        if let OpKind::Param(key) = kind {
            if self.params.insert(key, id).is_some() {
                return Err(Error::Graph(format!("parameter {key} registered twice")));
            }
        }
        self.nodes.push(TapeNode {
            id,
            kind,
            inputs,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(TapeNode {
            id,
            kind: OpKind::Constant,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        Var::live(id)
    }

    pub fn param(&mut self, key: usize, value: Tensor) -> Result<Var> {
        self.record(OpKind::Param(key), Vec::new(), value).map(Var::live)
    }

    /// Same node, forward-only edge.
    pub fn detach(&self, v: Var) -> Var {
        Var {
            id: v.id,
            detached: true,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Graph(format!("unknown node {}", v.id)))
        }
    }

    /// Claims pin slots for detached inputs; `None` means read the node.
    fn claim_pins(&mut self, inputs: &[Var]) -> Result<Vec<Option<usize>>> {
        let mut slots = Vec::with_capacity(inputs.len());
        for v in inputs {
            self.check(*v)?;
            let slot = match (self.pin_mode, v.detached) {
                (PinMode::Record, true) => {
                    self.pins.push(self.nodes[v.id].value.clone());
                    Some(self.pins.len() - 1)
                }
                (PinMode::Replay, true) => {
                    let s = self.pin_cursor;
                    let expected = self.nodes[v.id].value.shape();
                    match self.pins.get(s) {
                        Some(p) if p.shape() == expected => {}
                        _ => {
                            return Err(Error::Graph(format!(
                                "pinned replay diverged at detached edge {s}"
                            )))
                        }
                    }
                    self.pin_cursor += 1;
                    Some(s)
                }
                _ => None,
            };
            slots.push(slot);
        }
        Ok(slots)
    }

    fn operand(&self, v: Var, slot: Option<usize>) -> &Tensor {
        match slot {
            Some(s) => &self.pins[s],
            None => &self.nodes[v.id].value,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.claim_pins(&[a, b])?;
        let value = self.operand(a, s[0]).matmul(self.operand(b, s[1]))?;
        self.record(OpKind::MatMul, vec![a, b], value).map(Var::live)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.claim_pins(parts)?;
        let refs: Vec<&Tensor> = parts
            .iter()
            .zip(&s)
            .map(|(v, slot)| self.operand(*v, *slot))
            .collect();
        let value = Tensor::concat_many(&refs)?;
        self.record(OpKind::ConcatCols, parts.to_vec(), value)
            .map(Var::live)
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let s = self.claim_pins(&[x])?;
        let value = self.operand(x, s[0]).slice_cols(lo, hi)?;
        self.record(OpKind::SliceCols { lo, hi }, vec![x], value)
            .map(Var::live)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let s = self.claim_pins(&[x])?;
        let value = self.operand(x, s[0]).relu();
        self.record(OpKind::Relu, vec![x], value).map(Var::live)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.claim_pins(&[x, bias])?;
        let value = self.operand(x, s[0]).add_row(self.operand(bias, s[1]))?;
        self.record(OpKind::AddBias, vec![x, bias], value)
            .map(Var::live)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.claim_pins(&[a, b])?;
        let value = self.operand(a, s[0]).add(self.operand(b, s[1]))?;
        self.record(OpKind::Add, vec![a, b], value).map(Var::live)
    }

    /// Mean over rows of `−log softmax(logits)[label]`, as a `1 × 1` node.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.claim_pins(&[logits])?;
        let x = self.operand(logits, s[0]);
        let loss = cross_entropy_value(x, labels)?;
        self.record(
            OpKind::SoftmaxCe {
                labels: labels.to_vec(),
            },
            vec![logits],
            Tensor::scalar(loss),
        )
        .map(Var::live)
    }

    pub fn backward(&mut self, losses: &[Var], params: &[usize]) -> Result<GradMap> {
        self.backward_with(losses, params, BackwardOptions::default())
    }

    /// Sum over `losses` (each seeded with 1) of d loss / d param, for each
    /// requested parameter key.
    pub fn backward_with(
        &mut self,
        losses: &[Var],
        params: &[usize],
        opts: BackwardOptions,
    ) -> Result<GradMap> {
        for l in losses {
            let node = self.node(l.id)?;
            if node.value.len() != 1 {
                return Err(Error::Contract(format!(
                    "loss node {} is {:?}, not a scalar",
                    l.id,
                    node.value.shape()
                )));
            }
        }
        let mut wanted = vec![false; self.nodes.len()];
        for &key in params {
            let id = self
                .param_node(key)
                .ok_or_else(|| Error::Graph(format!("parameter {key} not on tape")))?;
            wanted[id] = true;
        }

        let n = self.nodes.len();
        let mut reaches_param = vec![false; n];
        for node in &self.nodes {
            reaches_param[node.id] = wanted[node.id]
                || node
                    .inputs
                    .iter()
                    .any(|v| !v.detached && reaches_param[v.id]);
        }
        let mut from_loss = vec![false; n];
        for l in losses {
            from_loss[l.id] = true;
        }
        for node in self.nodes.iter().rev() {
            if from_loss[node.id] {
                for v in &node.inputs {
                    if !v.detached {
                        from_loss[v.id] = true;
                    }
                }
            }
        }
        let live: Vec<bool> = (0..n).map(|i| reaches_param[i] && from_loss[i]).collect();

        self.node_bwd_macs.resize(n, 0);
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut allocations = 0usize;
        let mut accumulate = |grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor| -> Result<()> {
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => {
                    allocations += 1;
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        for l in losses {
            if live[l.id] {
                accumulate(&mut grads, l.id, Tensor::scalar(1.0))?;
            }
        }

        for id in (0..n).rev() {
            if !live[id] {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let feeds = |v: &Var| !v.detached && live[v.id];
            let mut cost = 0u64;
            match &node.kind {
                OpKind::Constant => {}
                OpKind::Param(_) => {
                    grads[id] = Some(g);
                }
                OpKind::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let av = &self.nodes[a.id].value;
                    let bv = &self.nodes[b.id].value;
                    let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                    if feeds(&b) {
                        cost += 2 * (m * k * nn) as u64;
                        accumulate(&mut grads, b.id, av.matmul_tn(&g)?)?;
                    }
                    if feeds(&a) {
                        let src = &self.nodes[a.id];
                        if opts.prune && src.kind == OpKind::ConcatCols {
                            let mut off = 0;
                            for part in &src.inputs {
                                let w = self.nodes[part.id].value.cols();
                                if feeds(part) {
                                    cost += 2 * (m * nn * w) as u64;
                                    accumulate(
                                        &mut grads,
                                        part.id,
                                        g.matmul_nt_rows(bv, off, off + w)?,
                                    )?;
                                }
                                off += w;
                            }
                        } else {
                            cost += 2 * (m * k * nn) as u64;
                            accumulate(&mut grads, a.id, g.matmul_nt_rows(bv, 0, k)?)?;
                        }
                    }
                }
                OpKind::ConcatCols => {
                    let mut off = 0;
                    for part in &node.inputs {
                        let w = self.nodes[part.id].value.cols();
                        if feeds(part) {
                            accumulate(&mut grads, part.id, g.slice_cols(off, off + w)?)?;
                        }
                        off += w;
                    }
                }
                OpKind::SliceCols { lo, .. } => {
                    let x = node.inputs[0];
                    if feeds(&x) {
                        let xv = &self.nodes[x.id].value;
                        let mut full = Tensor::zeros(xv.rows(), xv.cols());
                        full.add_cols_from(*lo, &g)?;
                        accumulate(&mut grads, x.id, full)?;
                    }
                }
                OpKind::Relu => {
                    let x = node.inputs[0];
                    if feeds(&x) {
                        let mut d = g;
                        for (gv, out) in d.data_mut().iter_mut().zip(node.value.data()) {
                            if *out <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        accumulate(&mut grads, x.id, d)?;
                    }
                }
                OpKind::AddBias => {
                    let (x, b) = (node.inputs[0], node.inputs[1]);
                    if feeds(&b) {
                        let bv = &self.nodes[b.id].value;
                        let s = g.sum_rows();
                        accumulate(&mut grads, b.id, Tensor::new(bv.shape().to_vec(), s.into_data())?)?;
                    }
                    if feeds(&x) {
                        accumulate(&mut grads, x.id, g)?;
                    }
                }
                OpKind::Add => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if feeds(&b) {
                        accumulate(&mut grads, b.id, g.clone())?;
                    }
                    if feeds(&a) {
                        accumulate(&mut grads, a.id, g)?;
                    }
                }
                OpKind::SoftmaxCe { labels } => {
                    let x = node.inputs[0];
                    if feeds(&x) {
                        let seed = g.data()[0];
                        let d = cross_entropy_grad(&self.nodes[x.id].value, labels, seed);
                        accumulate(&mut grads, x.id, d)?;
                    }
                }
            }
            self.node_bwd_macs[id] += cost;
            self.bwd_macs += cost;
        }
        self.grad_allocations = allocations;

        let mut out = GradMap::default();
        for &key in params {
            let id = self.params[&key];
            let g = grads[id].take().unwrap_or_else(|| {
                let v = &self.nodes[id].value;
                Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]).expect("shape of existing value")
            });
            out.insert(key, g);
        }
        Ok(out)
    }
}

pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, k) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::Dimension {
            op: "softmax_ce",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if m == 0 {
        return Err(Error::Data("cross entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Ok(total / m as f64)
}

fn cross_entropy_grad(logits: &Tensor, labels: &[usize], seed: f64) -> Tensor {
    let m = logits.rows();
    let mut p = logits.softmax_rows();
    let k = p.cols();
    let scale = seed / m as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut p.data_mut()[i * k..(i + 1) * k];
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    p
}

/// Central finite-difference gradient of the summed losses returned by
/// `eval` with respect to one parameter value.
///
/// `eval` must rebuild the graph on the tape it is given, using the supplied
/// parameter value. The baseline run records every detached-edge value; the
/// perturbed runs replay them, so gradient flow through detached edges is
/// excluded exactly as backward excludes it.
pub fn detach_aware_fd<F>(param: &Tensor, step: f64, mut eval: F) -> Result<Tensor>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Vec<Var>>,
{
    let mut base = Tape::recording_pins();
    eval(&mut base, param)?;
    let pins = base.take_pins();

    let mut total = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::pinned(pins.clone());
        let losses = eval(&mut tape, p)?;
        if !tape.pins_exhausted() {
            return Err(Error::Graph("pinned replay left detached edges unused".into()));
        }
        Ok(losses.iter().map(|l| tape.value(*l).data()[0]).sum())
    };

    let mut grad = vec![0.0; param.len()];
    let mut probe = param.clone();
    for (j, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let up = total(&probe)?;
        probe.data_mut()[j] = orig - step;
        let down = total(&probe)?;
        probe.data_mut()[j] = orig;
        *g = (up - down) / (2.0 * step);
    }
    Tensor::new(param.shape().to_vec(), grad)
}

/// `|a − b| / max(1, |b|)`, elementwise maximum.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
