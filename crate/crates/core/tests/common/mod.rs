//! Dense-loop reference implementations and a finite-difference checker
//! shared by the integration suites.
#![allow(dead_code)]

pub mod oracle_suite;

use mcm_core::model::{Block, EncoderLayer, Mcm, ModelConfig, Variant};
use mcm_core::nn::{AttnScale, Bound, FeedForward, LayerNorm, LinearLayer, MultiHeadAttention, ParamRegistry};
use mcm_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), randn(rng, n, std)).unwrap()
}

/// Replaces every parameter by `N(0, std²)` draws so that layers are far from
/// their near-identity initialization.
pub fn randomize(reg: &mut ParamRegistry<f64>, rng: &mut impl Rng, std: f64) {
    for (_, p) in reg.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = tensor(rng, &shape, std);
    }
}

/// A small model with every dimension distinct enough to catch transposes.
pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        image_height: 4,
        image_width: 6,
        channels: 1,
        patch: 2,
        width: 8,
        heads: 2,
        enc_layers: 2,
        enc_mlp: 6,
        dec_mlp: 5,
        concepts: 3,
        concept_dim: 8,
        variant,
        attn_scale: AttnScale::PerHead,
        pos_embed: true,
    }
}

pub fn random_model(cfg: ModelConfig, seed: u64, std: f64) -> Mcm<f64> {
    let mut model = Mcm::<f64>::new(cfg, seed).unwrap();
    randomize(&mut model.params, &mut rng(seed ^ 0xabc), std);
    model
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Dense oracles on row-major slices.

pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

pub fn layer_norm_rows(x: &[f64], width: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        for i in 0..width {
            out.push((row[i] - mean) / (var + eps).sqrt() * gain[i] + bias[i]);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn value(reg: &ParamRegistry<f64>, id: mcm_core::nn::ParamId) -> &[f64] {
    reg.value(id).data()
}

pub fn linear(reg: &ParamRegistry<f64>, layer: &LinearLayer, x: &[f64]) -> Vec<f64> {
    let (w, b) = (value(reg, layer.weight), value(reg, layer.bias));
    let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
    let rows = x.len() / i_dim;
    let mut out = vec![0.0; rows * o_dim];
    for r in 0..rows {
        for o in 0..o_dim {
            let mut acc = b[o];
            for i in 0..i_dim {
                acc += x[r * i_dim + i] * w[i * o_dim + o];
            }
            out[r * o_dim + o] = acc;
        }
    }
    out
}

pub fn layer_norm(reg: &ParamRegistry<f64>, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let g = value(reg, ln.gain);
    layer_norm_rows(x, g.len(), g, value(reg, ln.bias), ln.eps)
}

pub fn ffn(reg: &ParamRegistry<f64>, f: &FeedForward, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(reg, &f.fc1, x).into_iter().map(gelu).collect();
    linear(reg, &f.fc2, &h)
}

/// One sample: `q: [lq, E]`, `kv: [lk, E]`.
pub fn attention(reg: &ParamRegistry<f64>, a: &MultiHeadAttention, q: &[f64], kv: &[f64]) -> Vec<f64> {
    let e = a.width;
    let (lq, lk) = (q.len() / e, kv.len() / e);
    let d = e / a.heads;
    let qp = linear(reg, &a.query, q);
    let kp = linear(reg, &a.key, kv);
    let vp = linear(reg, &a.value, kv);
    let denom = match a.scale {
        AttnScale::PerHead => d as f64,
        AttnScale::FullDim => e as f64,
    }
    .sqrt();
    let mut ctx = vec![0.0; lq * e];
    for h in 0..a.heads {
        for i in 0..lq {
            let mut logits = vec![0.0; lk];
            for (j, l) in logits.iter_mut().enumerate() {
                for c in 0..d {
                    *l += qp[i * e + h * d + c] * kp[j * e + h * d + c];
                }
                *l /= denom;
            }
            let w = softmax_rows(&logits, lk);
            for c in 0..d {
                ctx[i * e + h * d + c] = (0..lk).map(|j| w[j] * vp[j * e + h * d + c]).sum();
            }
        }
    }
    linear(reg, &a.output, &ctx)
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `LN2(h + FFN(h))`, `h = LN1(q + MHA(q, kv))`.
pub fn block(reg: &ParamRegistry<f64>, blk: &Block, q: &[f64], kv: Option<&[f64]>) -> Vec<f64> {
    let h = match kv {
        Some(kv) => add(q, &attention(reg, &blk.attn, q, kv)),
        None => q.to_vec(),
    };
    let h = layer_norm(reg, &blk.ln1, &h);
    let s = add(&h, &ffn(reg, &blk.ffn, &h));
    layer_norm(reg, &blk.ln2, &s)
}

/// `(visible', concepts')` of one sample.
pub fn encoder_layer(
    reg: &ParamRegistry<f64>,
    layer: &EncoderLayer,
    visible: &[f64],
    concepts: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = block(reg, &layer.concept, concepts, Some(visible));
    let v = block(reg, &layer.token, visible, Some(visible));
    (v, c)
}

/// Mean over masked rows (all rows when `z` is empty) of squared errors;
/// inputs are `[b, N, D]`.
pub fn masked_mse(recon: &[f64], target: &[f64], b: usize, n: usize, d: usize, z: &[usize]) -> f64 {
    let rows: Vec<usize> = if z.is_empty() { (0..n).collect() } else { z.to_vec() };
    let mut total = 0.0;
    for i in 0..b {
        for &r in &rows {
            for c in 0..d {
                let at = (i * n + r) * d + c;
                total += (recon[at] - target[at]).powi(2);
            }
        }
    }
    total / (b * rows.len() * d) as f64
}

/// Macro accuracy, precision, recall and F1 from explicit confusion counts;
/// undefined ratios count as 0.
pub fn macro_scores(pred: &[Vec<bool>], actual: &[Vec<bool>]) -> [f64; 4] {
    let m = actual[0].len();
    let mut sums = [0.0; 4];
    for j in 0..m {
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for (p, a) in pred.iter().zip(actual) {
            match (p[j], a[j]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        sums[0] += (tp + tn) / (tp + tn + fp + fn_);
        sums[1] += precision;
        sums[2] += recall;
        sums[3] += ratio(2.0 * precision * recall, precision + recall);
    }
    sums.map(|s| s / m as f64)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `build` with respect to each input. Error is measured as
/// `|a − n| / max(|a|, |n|, floor)`. With `per_input` set, only that many
/// coordinates per input are probed: the largest analytic entry plus
/// evenly strided ones.
pub fn grad_error(
    inputs: &[Tensor<f64>],
    per_input: Option<usize>,
    floor: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> mcm_core::Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let coords = probe_coords(&analytic, per_input);
        for i in coords {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst relative error over the parameters of `reg`, and the parameter it
/// occurred in. `loss` builds a graph from a registry and returns its tape,
/// the bound leaves and the scalar loss.
pub fn registry_grad_error(
    reg: &ParamRegistry<f64>,
    per_param: Option<usize>,
    floor: f64,
    loss: impl Fn(&ParamRegistry<f64>) -> (Tape<f64>, Bound, Var),
) -> (f64, String) {
    let (tape, bound, l) = loss(reg);
    let grads = tape.backward(l).unwrap();
    let mut with_grads = reg.clone();
    with_grads.accumulate_grads(&bound, &grads);
    let eval = |r: &ParamRegistry<f64>| {
        let (tape, _, l) = loss(r);
        tape.value(l).item()
    };
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut probe = reg.clone();
    for name in reg.sorted_names() {
        let id = reg.id(&name).unwrap();
        let analytic = with_grads.param(id).grad.clone().unwrap().into_data();
        for i in probe_coords(&analytic, per_param) {
            let orig = probe.value(id).data()[i];
            probe.param_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.param_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.param_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn probe_coords(analytic: &[f64], per_input: Option<usize>) -> Vec<usize> {
    let n = analytic.len();
    match per_input {
        Some(k) if k < n => {
            let largest = (0..n)
                .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
                .unwrap_or(0);
            let mut out = vec![largest];
            let stride = (n / k.max(1)).max(1);
            out.extend((0..n).step_by(stride).take(k.saturating_sub(1)));
            out.sort_unstable();
            out.dedup();
            out
        }
        _ => (0..n).collect(),
    }
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every element.
pub fn probe_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> mcm_core::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tensor(&mut rng(seed), &shape, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}
