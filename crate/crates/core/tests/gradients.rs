mod common;

use common::*;
use cris_autograd::Tensor;
use cris_core::backbone::BackboneKind;
use cris_core::nn::Forward;
use cris_core::refinement::{RefinementModule, Refiner};
use cris_core::training::{loss_bce, loss_mse, SegModel};
use cris_core::types::{MaskTensor, ProbMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map_and_target(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
    let t = (0..16).map(|_| f64::from(rng.gen::<bool>() as u8)).collect();
    (p, t)
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (p, t) = map_and_target(seed);
        let mse = fd_check_loss(&p, &t, 4, |g, v, t| g.mse(v, t));
        let bce = fd_check_loss(&p, &t, 4, |g, v, t| g.bce(v, t, 1e-7));
        assert!(mse < FD_REL_TOL, "mse rel err {mse}");
        assert!(bce < FD_REL_TOL, "bce rel err {bce}");
    }
}

#[test]
fn loss_functions_agree_with_direct_formulas() {
    let (p, t) = map_and_target(9);
    let pm = ProbMap::new(4, 4, p.iter().map(|&v| v as f32).collect()).unwrap();
    let tm = MaskTensor::new(4, 4, t.iter().map(|&v| v as f32).collect()).unwrap();
    let pf: Vec<f64> = pm.data().iter().map(|&v| f64::from(v)).collect();
    let mse: f64 = pf.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
    let bce: f64 = -pf
        .iter()
        .zip(&t)
        .map(|(&a, &b)| b * a.ln() + (1.0 - b) * (1.0 - a).ln())
        .sum::<f64>()
        / 16.0;
    assert!((loss_mse(&pm, &tm).unwrap() - mse).abs() < 1e-12);
    assert!((loss_bce(&pm, &tm).unwrap() - bce).abs() < 1e-12);
}

#[test]
fn refinement_gradients_match_finite_differences() {
    let head = RefinementModule::<f64>::build(&tiny_refinement()).unwrap();
    let (x, target) = random_batch(2, 8, 3);
    let p0 = Tensor::from_vec(&[2, 1, 8, 8], x.data()[..128].iter().map(|v| 0.1 + 0.8 * v).collect());
    let run = |h: &RefinementModule<f64>, p: &Tensor<f64>| {
        let mut fw = Forward::<f64>::train(None);
        let pv = fw.input(p.clone(), true);
        let y = h.refine_var(&mut fw, pv).unwrap();
        let loss = fw.graph.bce(y, &target, 1e-7);
        let value = fw.graph.value(loss).item();
        let mut grads = fw.graph.backward(loss);
        let params = fw.param_grads(&grads);
        (value, grads.take(pv).unwrap(), params)
    };
    let (_, gp, gparams) = run(&head, &p0);
    let mut worst = 0f64;
    for i in (0..p0.len()).step_by(7) {
        let mut hi = p0.clone();
        let mut lo = p0.clone();
        hi.data_mut()[i] += FD_STEP;
        lo.data_mut()[i] -= FD_STEP;
        let numeric = (run(&head, &hi).0 - run(&head, &lo).0) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(gp.data()[i], numeric));
    }
    for (name, g) in &gparams {
        for i in (0..g.len()).step_by((g.len() / 3).max(1)) {
            let shifted = |d: f64| {
                let mut h = head.clone();
                h.store_mut().param_mut(name).unwrap().data_mut()[i] += d;
                run(&h, &p0).0
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    assert!(worst < FD_REL_TOL, "worst rel err {worst}");
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let (x, target) = random_batch(2, 16, 5);
    for kind in BackboneKind::ALL {
        let model = SegModel::<f64>::build(&tiny_model_config(kind, false)).unwrap();
        let s = fd_check_model(&model, &x, &target, Output::Backbone, 3);
        assert!(s.checked >= s.skipped && s.checked > 20, "{kind:?}: {s:?}");
        assert!(s.worst < FD_REL_TOL, "{kind:?}: {s:?}");
    }
}

#[test]
fn composed_model_gradients_reach_the_backbone() {
    let (x, target) = random_batch(2, 16, 6);
    let model = SegModel::<f64>::build(&tiny_model_config(BackboneKind::Unet, true)).unwrap();
    let s = fd_check_model(&model, &x, &target, Output::Refined, 2);
    assert!(s.checked >= s.skipped && s.checked > 20, "{s:?}");
    assert!(s.worst < FD_REL_TOL, "{s:?}");
}
