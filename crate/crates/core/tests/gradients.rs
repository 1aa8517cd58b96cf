//! Reverse-mode gradients against central finite differences in f64.

mod common;

use common::{grad_error, probe_loss, random_model, registry_grad_error, rng, small_config, tensor};
use mcm_core::data::ConceptBank;
use mcm_core::losses::{objective, LossWeights, Objective, SingleHotMask};
use mcm_core::model::{MaskPlan, MaskShape, Mcm, Pass, Variant};
use mcm_core::nn::{AttnScale, Bound, FeedForward, LayerNorm, MultiHeadAttention, ParamRegistry};
use mcm_core::{Tape, Tensor, Var};

const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

fn check(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> mcm_core::Result<Var>) {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| tensor(&mut r, s, 1.0)).collect();
    let err = grad_error(&inputs, None, FLOOR, |t, v| {
        let out = build(t, v)?;
        if t.shape(out).is_empty() {
            Ok(out)
        } else {
            probe_loss(t, out, seed + 1)
        }
    });
    assert!(err <= TOL, "relative gradient error {err:e}");
}

#[test]
fn matmul() {
    check(&[&[3, 4], &[4, 5]], 1, |t, v| t.matmul(v[0], v[1]));
    check(&[&[2, 3, 4], &[2, 4, 2]], 2, |t, v| t.matmul(v[0], v[1]));
    check(&[&[2, 3, 4], &[4, 2]], 3, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn transpose_permute_reshape() {
    check(&[&[2, 3, 4]], 4, |t, v| t.transpose(v[0]));
    check(&[&[2, 3, 4, 2]], 5, |t, v| t.permute(v[0], &[0, 2, 1, 3]));
    check(&[&[2, 3, 4]], 6, |t, v| t.reshape(v[0], &[6, 4]));
}

#[test]
fn elementwise_with_broadcasting() {
    check(&[&[2, 3, 4], &[2, 3, 4]], 7, |t, v| t.add(v[0], v[1]));
    check(&[&[2, 3, 4], &[4]], 8, |t, v| t.add(v[0], v[1]));
    check(&[&[2, 3, 4], &[3, 4]], 9, |t, v| t.sub(v[0], v[1]));
    check(&[&[2, 3, 4], &[3, 4]], 10, |t, v| t.mul(v[0], v[1]));
    check(&[&[3, 4]], 11, |t, v| Ok(t.scale(v[0], -0.7)));
    check(&[&[3, 4]], 12, |t, v| Ok(t.square(v[0])));
    check(&[&[3, 4]], 13, |t, v| Ok(t.gelu(v[0])));
}

#[test]
fn reductions() {
    check(&[&[3, 4]], 14, |t, v| {
        let s = t.square(v[0]);
        Ok(t.sum(s))
    });
    check(&[&[3, 4]], 15, |t, v| {
        let s = t.square(v[0]);
        Ok(t.mean(s))
    });
}

#[test]
fn softmax_and_layer_norm() {
    check(&[&[2, 3, 5]], 16, |t, v| t.softmax(v[0]));
    check(&[&[4, 6], &[6], &[6]], 17, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn row_selection() {
    check(&[&[2, 4, 3]], 18, |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]));
    check(&[&[2, 2, 3], &[2, 3, 3]], 19, |t, v| t.concat_rows(v[0], v[1]));
    check(&[&[2, 3]], 20, |t, v| t.broadcast_to(v[0], &[4]));
}

/// Gradients of a layer's parameters and of its input.
fn layer_check(
    seed: u64,
    forward: impl Fn(&mut Tape<f64>, &Bound, Var) -> mcm_core::Result<Var>,
    reg: ParamRegistry<f64>,
) {
    let mut reg = reg;
    common::randomize(&mut reg, &mut rng(seed), 0.5);
    let x = tensor(&mut rng(seed + 1), &[2, 3, 8], 1.0);
    let graph = |r: &ParamRegistry<f64>, x: &Tensor<f64>| {
        let mut t = Tape::new();
        let b = r.bind(&mut t);
        let xv = t.param(x.clone());
        let out = forward(&mut t, &b, xv).unwrap();
        let l = probe_loss(&mut t, out, seed + 2).unwrap();
        (t, b, xv, l)
    };
    let (err, at) = registry_grad_error(&reg, None, FLOOR, |r| {
        let (t, b, _, l) = graph(r, &x);
        (t, b, l)
    });
    assert!(err <= TOL, "parameter gradient error {err:e} at {at}");
    let err = grad_error(std::slice::from_ref(&x), None, FLOOR, |t, v| {
        let b = reg.bind(t);
        let out = forward(t, &b, v[0])?;
        probe_loss(t, out, seed + 2)
    });
    assert!(err <= TOL, "input gradient error {err:e}");
}

#[test]
fn feedforward_layer() {
    let mut reg = ParamRegistry::new();
    let f = FeedForward::new(&mut reg, "ffn", 8, 5).unwrap();
    layer_check(21, |t, p, x| f.forward(t, p, x), reg);
}

#[test]
fn layer_norm_layer() {
    let mut reg = ParamRegistry::new();
    let ln = LayerNorm::new(&mut reg, "ln", 8).unwrap();
    layer_check(22, |t, p, x| ln.forward(t, p, x), reg);
}

#[test]
fn self_attention_layer() {
    for (seed, scale) in [(23, AttnScale::PerHead), (24, AttnScale::FullDim)] {
        let mut reg = ParamRegistry::new();
        let a = MultiHeadAttention::new(&mut reg, "attn", 8, 2, scale).unwrap();
        layer_check(seed, |t, p, x| a.forward(t, p, x, x, None), reg);
    }
}

#[test]
fn cross_attention_layer() {
    let mut reg = ParamRegistry::new();
    let a = MultiHeadAttention::new(&mut reg, "attn", 8, 4, AttnScale::PerHead).unwrap();
    let kv = tensor(&mut rng(25), &[2, 5, 8], 1.0);
    layer_check(
        26,
        |t, p, x| {
            let kv = t.constant(kv.clone());
            a.forward(t, p, x, kv, None)
        },
        reg,
    );
}

/// Total loss of a random small model with every loss term active.
fn model_loss(model: &Mcm<f64>, reg: &ParamRegistry<f64>, bank: &ConceptBank, seed: u64) -> (Tape<f64>, Bound, Var) {
    let mut m = model.clone();
    m.params = reg.clone();
    let cfg = m.cfg().clone();
    let plan = MaskPlan::new(cfg.grid(), 0.5, seed, MaskShape::Random).unwrap();
    let patches = tensor(&mut rng(seed + 5), &[2, cfg.num_patches(), cfg.patch_dim()], 0.5);
    let ids = [0, 3, 4, 1, 2, 5];
    let mut pass = m.pass(bank).unwrap();
    let x = pass.tape.constant(patches);
    let obj = Objective {
        plan: &plan,
        prototype_ids: &ids,
        u: SingleHotMask { position: 1, len: 3 },
        weights: LossWeights::default(),
        uniform_weights: false,
    };
    let (total, _, _) = objective(&mut pass, x, &obj).unwrap();
    let Pass { tape, p, .. } = pass;
    (tape, p, total)
}

fn model_check(variant: Variant, seed: u64) {
    let model = random_model(small_config(variant), seed, 0.3);
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let bank = ConceptBank::synthetic(&names, 8, seed).unwrap();
    let (err, at) = registry_grad_error(&model.params, Some(6), FLOOR, |r| model_loss(&model, r, &bank, seed));
    assert!(err <= TOL, "{variant:?}: gradient error {err:e} at {at}");
}

#[test]
fn full_model_loss() {
    model_check(Variant::Full, 31);
}

#[test]
fn no_branches_model_loss() {
    model_check(Variant::NoBranches, 32);
}

#[test]
fn fixed_concepts_model_loss() {
    model_check(Variant::FixedConcepts, 33);
}

#[test]
fn repetitive_concepts_model_loss() {
    model_check(Variant::RepetitiveConcepts, 34);
}
