//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cris_autograd::{Graph, Tensor, Var};
use cris_core::backbone::{image_batch, BackboneConfig, BackboneKind};
use cris_core::data::synth_shapes;
use cris_core::metrics::ConfusionCounts;
use cris_core::nn::Forward;
use cris_core::refinement::{FullModel, RefinementConfig};
use cris_core::training::{ModelConfig, SegModel};
use cris_core::types::{Dataset, MaskTensor, ProbMap, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Floor on the comparison scale so gradients that are zero up to rounding
/// do not produce meaningless relative errors.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_ABS_FLOOR)
}

pub fn tiny_backbone(kind: BackboneKind) -> BackboneConfig {
    BackboneConfig::new(kind).with_base_channels(4).with_depth(2).with_seed(11)
}

pub fn tiny_refinement() -> RefinementConfig {
    RefinementConfig {
        expand_channels: 4,
        seed: 12,
        ..RefinementConfig::default()
    }
}

pub fn tiny_model_config(kind: BackboneKind, refined: bool) -> ModelConfig {
    if refined {
        ModelConfig::Refined {
            backbone: tiny_backbone(kind),
            refinement: tiny_refinement(),
        }
    } else {
        ModelConfig::Plain {
            backbone: tiny_backbone(kind),
        }
    }
}

/// Which output a finite-difference objective reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Backbone,
    Refined,
}

/// One evaluation of the finite-difference objective.
pub struct Eval {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor<f64>>,
    pub kinks: Vec<u64>,
}

/// BCE of the chosen output against `target`, recorded in training mode
/// without dropout.
pub fn objective(model: &SegModel<f64>, x: &Tensor<f64>, target: &Tensor<f64>, out: Output) -> Eval {
    let mut fw = Forward::<f64>::train(None);
    let xv = fw.input(x.clone(), false);
    let y = match (model, out) {
        (SegModel::Plain(b), _) | (SegModel::Refined(FullModel { backbone: b, .. }), Output::Backbone) => {
            b.forward_var(&mut fw, xv).unwrap()
        }
        (SegModel::Refined(m), Output::Refined) => m.forward_pair_var(&mut fw, xv).unwrap().1,
    };
    let loss = fw.graph.bce(y, target, 1e-7);
    let value = fw.graph.value(loss).item();
    let grads = fw.graph.backward(loss);
    Eval {
        value,
        grads: fw.param_grads(&grads),
        kinks: fw.graph.kink_pattern(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdSummary {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose `±h` stencil crossed a ReLU, max-pool or clamp
    /// boundary; the objective is not differentiable across them.
    pub skipped: usize,
}

/// Compares autodiff parameter gradients with central differences on up to
/// `per_param` evenly spaced coordinates of every parameter.
pub fn fd_check_model(model: &SegModel<f64>, x: &Tensor<f64>, target: &Tensor<f64>, out: Output, per_param: usize) -> FdSummary {
    let base = objective(model, x, target, out);
    let mut s = FdSummary::default();
    for (name, g) in &base.grads {
        let n = g.len();
        let stride = (n / per_param.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_param) {
            let eval = |delta: f64| {
                let mut m = model.clone();
                for st in m.stores_mut() {
                    if let Some(p) = st.param_mut(name) {
                        p.data_mut()[i] += delta;
                    }
                }
                objective(&m, x, target, out)
            };
            let (hi, lo) = (eval(FD_STEP), eval(-FD_STEP));
            if hi.kinks != base.kinks || lo.kinks != base.kinks {
                s.skipped += 1;
                continue;
            }
            let numeric = (hi.value - lo.value) / (2.0 * FD_STEP);
            let e = rel_err(g.data()[i], numeric);
            if std::env::var_os("FD_DEBUG").is_some() && e > FD_REL_TOL {
                eprintln!("{name}[{i}]: analytic {} numeric {numeric} rel {e}", g.data()[i]);
            }
            s.worst = s.worst.max(e);
            s.checked += 1;
        }
    }
    s
}

/// Gradient of a scalar loss on a `[1,1,h,w]` map versus central differences.
pub fn fd_check_loss(p: &[f64], t: &[f64], side: usize, loss: impl Fn(&mut Graph<f64>, Var, &Tensor<f64>) -> Var) -> f64 {
    let target = Tensor::from_vec(&[1, 1, side, side], t.to_vec());
    let eval = |vals: &[f64]| {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_vec(&[1, 1, side, side], vals.to_vec()), true);
        let l = loss(&mut g, v, &target);
        let value = g.value(l).item();
        (value, g.backward(l).take(v).unwrap())
    };
    let (_, grad) = eval(p);
    let mut worst = 0f64;
    for i in 0..p.len() {
        let mut hi = p.to_vec();
        let mut lo = p.to_vec();
        hi[i] += FD_STEP;
        lo[i] -= FD_STEP;
        let numeric = (eval(&hi).0 - eval(&lo).0) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    worst
}

/// Uniform random `[n,3,side,side]` batch and binary `[n,1,side,side]` target.
pub fn random_batch(n: usize, side: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * 3 * side * side).map(|_| rng.gen::<f64>()).collect();
    let t = (0..n * side * side).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    (
        Tensor::from_vec(&[n, 3, side, side], x),
        Tensor::from_vec(&[n, 1, side, side], t),
    )
}

/// Synthetic dataset split into disjoint train/val/test parts by position.
pub fn synth_parts(train: usize, val: usize, test: usize, side: usize, seed: u64) -> (Dataset, Dataset, Dataset) {
    let d = synth_shapes(train + val + test, (side, side), seed).unwrap();
    let idx = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    (
        d.select("train", &idx(0, train)),
        d.select("val", &idx(train, train + val)),
        d.select("test", &idx(train + val, train + val + test)),
    )
}

/// Naive per-pixel confusion counts.
pub fn oracle_counts(pred: &[bool], gt: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn random_fixture(rng: &mut ChaCha8Rng, side: usize) -> (ProbMap, MaskTensor) {
    let n = side * side;
    let density: f64 = rng.gen_range(0.05..0.95);
    let bits: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < density).collect();
    let probs: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    (
        ProbMap::new(side, side, probs).unwrap(),
        MaskTensor::from_bits(side, side, &bits).unwrap(),
    )
}

/// Both loss terms for the current parameters, each from its own training
/// forward with a copy of the dropout stream.
pub fn loss_terms(model: &SegModel<f32>, batch: &[&Sample], rng: &ChaCha8Rng) -> (f64, f64) {
    let SegModel::Refined(m) = model else { unreachable!() };
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let x: Tensor<f32> = image_batch(&images).unwrap();
    let h = batch[0].mask.height();
    let w = batch[0].mask.width();
    let target = Tensor::from_vec(&[batch.len(), 1, h, w], batch.iter().flat_map(|s| s.mask.data().to_vec()).collect());
    let mut r1 = rng.clone();
    let mut fw = Forward::train(Some(&mut r1));
    let xv = fw.input(x.clone(), false);
    let mid = m.backbone.forward_var(&mut fw, xv).unwrap();
    let l = fw.graph.mse(mid, &target);
    let l1 = f64::from(fw.graph.value(l).item());
    let mut r2 = rng.clone();
    let mut fw = Forward::train(Some(&mut r2));
    let xv = fw.input(x, false);
    let (_, fin) = m.forward_pair_var(&mut fw, xv).unwrap();
    let l = fw.graph.bce(fin, &target, 1e-7);
    let l2 = f64::from(fw.graph.value(l).item());
    (l1, l2)
}
