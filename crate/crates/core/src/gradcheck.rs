//! Randomized gradient verification: routing probes plus a finite-difference
//! comparison on small random networks.

use serde::Serialize;

use crate::autograd::{detach_aware_fd, max_rel_error, OpKind, Tape, Var};
use crate::error::Result;
use crate::net::{exit_losses, forward_routed, routing_probes, Mode, Model, ModelConfig, Routing};
use crate::rng::RngStream;
use crate::tensor::{he_init, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// A deliberately wrong routing, for exercising the checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Let gradient flow from layer `i`'s specific block into layer `i+1`.
    SpecificForward(usize),
    /// Let gradient flow from layer `i`'s shared block into head `i`.
    SharedToHead(usize),
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub max_layers: usize,
    pub max_width: usize,
    pub mode: Mode,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl GradcheckConfig {
    pub fn new(mode: Mode, cases: usize, seed: u64) -> Self {
        Self {
            cases,
            max_layers: 4,
            max_width: 16,
            mode,
            seed,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub case: usize,
    pub layers: usize,
    pub widths: Vec<usize>,
    pub beta: f64,
    pub routing_probes: usize,
    /// First violated routing clause as `(layer, clause)`.
    pub routing_failure: Option<(usize, String)>,
    pub fd_max_rel: f64,
    pub fd_worst_param: String,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.routing_failure.is_none() && self.fd_max_rel <= FD_TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub mode: Mode,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn worst_fd(&self) -> f64 {
        self.cases.iter().map(|c| c.fd_max_rel).fold(0.0, f64::max)
    }
}

pub fn random_config(rng: &mut RngStream, mode: Mode, max_layers: usize, max_width: usize) -> ModelConfig {
    let layers = 2 + rng.below(max_layers.max(2) - 1);
    let widths = (0..layers).map(|_| 2 + rng.below(max_width.max(2) - 1)).collect();
    ModelConfig {
        layers,
        widths,
        input_dim: 2 + rng.below(4),
        classes: 2 + rng.below(3),
        beta: 0.05 + 0.9 * rng.uniform(),
        mode,
        bias: rng.below(2) == 1,
        seed: rng.seed(),
        head_shared_grad: false,
    }
}

const KINK_MARGIN: f64 = 1e-3;
const DRAWS_PER_CONFIG: usize = 20;

/// True when no relu input sits within [`KINK_MARGIN`] of zero and every
/// relu unit is active on at least one sample.
pub fn is_regular(model: &Model, x: &Tensor) -> Result<bool> {
    let mut tape = Tape::new();
    forward_routed(model, x, &mut tape, &Routing::none(model.config.layers))?;
    for node in tape.nodes() {
        if !matches!(node.kind, OpKind::Relu) {
            continue;
        }
        let pre = tape.value(node.inputs[0]);
        if pre.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            return Ok(false);
        }
        let dead = (0..pre.cols()).any(|c| (0..pre.rows()).all(|r| pre.get(r, c) <= 0.0));
        if dead {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Zero biases put all-dead input rows exactly on the relu kink.
fn randomize_biases(model: &mut Model, rng: &mut RngStream) {
    let biases = model
        .layers
        .iter_mut()
        .filter_map(|l| l.bias.as_mut())
        .chain(model.heads.iter_mut().filter_map(|h| h.bias.as_mut()));
    for b in biases {
        for v in b.data_mut() {
            *v = 0.1 * rng.normal();
        }
    }
}

pub fn apply_fault(routing: &mut Routing, fault: Fault) {
    match fault {
        Fault::SpecificForward(i) => {
            if let Some(f) = routing.cut_specific_forward.get_mut(i) {
                *f = !*f;
            }
        }
        Fault::SharedToHead(i) => {
            if let Some(f) = routing.cut_shared_to_head.get_mut(i) {
                *f = !*f;
            }
        }
    }
}

/// Largest relative error between tape gradients and the detach-aware
/// finite-difference oracle over every parameter, for the given seeded
/// loss subset.
pub fn fd_check(model: &Model, x: &Tensor, labels: &[usize], routing: &Routing, seeded: &[usize]) -> Result<(f64, String)> {
    let keys = model.param_indices();
    let mut tape = Tape::new();
    let out = forward_routed(model, x, &mut tape, routing)?;
    let losses = exit_losses(&mut tape, &out, labels)?;
    let sel: Vec<Var> = seeded.iter().map(|&k| losses[k]).collect();
    let grads = tape.backward(&sel, &keys)?;

    let mut worst = (0.0, String::new());
    for key in model.param_keys() {
        let fd = detach_aware_fd(model.param(key).expect("model key"), FD_STEP, |t, p| {
            let mut m = model.clone();
            *m.param_mut(key).expect("model key") = p.clone();
            let out = forward_routed(&m, x, t, routing)?;
            let losses = exit_losses(t, &out, labels)?;
            Ok(seeded.iter().map(|&k| losses[k]).collect())
        })?;
        let err = max_rel_error(grads.get(key.index()).expect("requested"), &fd);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, key.name());
        }
    }
    Ok(worst)
}

/// Draws configs, weights and batches until [`is_regular`] holds.
fn regular_case(rng: &mut RngStream, cfg: &GradcheckConfig, case: usize) -> Result<(ModelConfig, Model, Tensor, Vec<usize>)> {
    let mut draw = 0u64;
    loop {
        let mc = random_config(rng, cfg.mode, cfg.max_layers, cfg.max_width);
        for _ in 0..DRAWS_PER_CONFIG {
            let mut model = Model::build(mc.clone(), &mut RngStream::derive(cfg.seed, (case as u64) << 20 | draw))?;
            draw += 1;
            randomize_biases(&mut model, rng);
            let n = 8 + rng.below(9);
            let x = he_init(n, mc.input_dim, rng).scale((mc.input_dim as f64 / 2.0).sqrt());
            let labels: Vec<usize> = (0..n).map(|_| rng.below(mc.classes)).collect();
            if is_regular(&model, &x)? {
                return Ok((mc, model, x, labels));
            }
        }
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = RngStream::new(cfg.seed);
    let mut cases = Vec::with_capacity(cfg.cases);
    for case in 0..cfg.cases {
        let (mc, model, x, labels) = regular_case(&mut rng, cfg, case)?;

        let mut routing = Routing::for_config(&mc);
        if let Some(f) = cfg.fault {
            apply_fault(&mut routing, f);
        }
        let report = routing_probes(&model, &x, &labels, &routing)?;
        let routing_failure = report.first_failure().map(|p| (p.layer, p.clause.clone()));

        let all: Vec<usize> = (0..mc.layers).collect();
        let single = [rng.below(mc.layers)];
        let a = fd_check(&model, &x, &labels, &routing, &all)?;
        let b = fd_check(&model, &x, &labels, &routing, &single)?;
        let (fd_max_rel, fd_worst_param) = if b.0 > a.0 { b } else { a };

        cases.push(CaseReport {
            case,
            layers: mc.layers,
            widths: mc.widths.clone(),
            beta: mc.beta,
            routing_probes: report.probes.len(),
            routing_failure,
            fd_max_rel,
            fd_worst_param,
        });
    }
    Ok(GradcheckReport { mode: cfg.mode, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dfs_suite_passes() {
        let r = run_gradcheck(&GradcheckConfig::new(Mode::Dfs, 4, 1)).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert!(r.cases.iter().all(|c| c.routing_probes > 0));
    }

    #[test]
    fn joint_plain_fd_passes() {
        let r = run_gradcheck(&GradcheckConfig::new(Mode::Joint, 3, 2)).unwrap();
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn flipped_detach_is_reported() {
        for fault in [Fault::SpecificForward(0), Fault::SharedToHead(0)] {
            let mut cfg = GradcheckConfig::new(Mode::Dfs, 2, 3);
            cfg.fault = Some(fault);
            let r = run_gradcheck(&cfg).unwrap();
            assert!(!r.passed());
            assert!(r.cases.iter().all(|c| c.routing_failure.as_ref().map(|f| f.0) == Some(1)));
        }
    }

    #[test]
    fn random_configs_are_valid() {
        let mut rng = RngStream::new(5);
        for _ in 0..200 {
            let c = random_config(&mut rng, Mode::Dfs, 4, 16);
            c.validate().unwrap();
            assert!(c.layers <= 4 && c.widths.iter().all(|&w| (2..=16).contains(&w)));
        }
    }
}
