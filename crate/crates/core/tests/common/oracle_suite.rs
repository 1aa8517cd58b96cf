//! Tape computations checked against the loop implementations.

use super::{max_abs_diff, random_model, rng, small_config, tensor};
use mcm_core::data::ConceptBank;
use mcm_core::losses::masked_recon_loss;
use mcm_core::model::{MaskPlan, MaskShape, Mcm, Variant};
use mcm_core::nn::{AttnScale, MultiHeadAttention, ParamRegistry};
use mcm_core::trainer::{confusions, macro_average, predict_concepts};
use mcm_core::{Tape, Tensor};
use rand::Rng;

const TOL: f64 = 1e-10;

fn sample(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    let per: usize = t.shape()[1..].iter().product();
    t.data()[i * per..(i + 1) * per].to_vec()
}

pub fn softmax_matches_loops(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(seed);
        let (a, w) = (r.random_range(1..5), r.random_range(1..9));
        let x = tensor(&mut r, &[a, w], 3.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax(v).unwrap();
        let want = super::softmax_rows(x.data(), w);
        assert!(max_abs_diff(tape.value(s).data(), &want) <= TOL, "instance {seed}");
    }
}

pub fn layer_norm_matches_loops(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(seed + 1000);
        let (a, w) = (r.random_range(1..5), r.random_range(2..9));
        let x = tensor(&mut r, &[a, w], 2.0);
        let (g, b) = (tensor(&mut r, &[w], 1.0), tensor(&mut r, &[w], 1.0));
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant(x.clone()),
            tape.constant(g.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
        let want = super::layer_norm_rows(x.data(), w, g.data(), b.data(), 1e-5);
        assert!(max_abs_diff(tape.value(y).data(), &want) <= TOL, "instance {seed}");
    }
}

pub fn attention_matches_loops(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(seed + 2000);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let scale = if r.random_bool(0.5) {
            AttnScale::PerHead
        } else {
            AttnScale::FullDim
        };
        let (b, lq, lk) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
        let mut reg = ParamRegistry::new();
        let a = MultiHeadAttention::new(&mut reg, "attn", 8, heads, scale).unwrap();
        super::randomize(&mut reg, &mut r, 0.5);
        let q = tensor(&mut r, &[b, lq, 8], 1.0);
        let kv = tensor(&mut r, &[b, lk, 8], 1.0);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let out = a.forward(&mut tape, &p, qv, kvv, None).unwrap();
        let got = tape.value(out);
        for i in 0..b {
            let want = super::attention(&reg, &a, &sample(&q, i), &sample(&kv, i));
            assert!(
                max_abs_diff(&sample(got, i), &want) <= TOL,
                "instance {seed}, sample {i}"
            );
        }
    }
}

pub fn encoder_layer_and_decoder_block_match_loops(instances: u64) {
    for seed in 0..instances {
        let model = random_model(small_config(Variant::Full), seed, 0.4);
        let mut r = rng(seed + 3000);
        let (b, keep, m) = (2, r.random_range(1..6), 3);
        let visible = tensor(&mut r, &[b, keep, 8], 1.0);
        let concepts = tensor(&mut r, &[b, m, 8], 1.0);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let (vv, cv) = (tape.constant(visible.clone()), tape.constant(concepts.clone()));
        let layer = &model.encoder[1];
        let (v_out, c_out) = layer.forward(&mut tape, &p, vv, cv).unwrap();
        let block = &model.decoder[0];
        let d_out = block.forward(&mut tape, &p, vv, Some(cv), "test").unwrap();
        let plain = block.forward(&mut tape, &p, vv, None, "test").unwrap();
        for i in 0..b {
            let (v, c) = (sample(&visible, i), sample(&concepts, i));
            let (want_v, want_c) = super::encoder_layer(&model.params, layer, &v, &c);
            assert!(
                max_abs_diff(&sample(tape.value(v_out), i), &want_v) <= TOL,
                "instance {seed}"
            );
            assert!(
                max_abs_diff(&sample(tape.value(c_out), i), &want_c) <= TOL,
                "instance {seed}"
            );
            let want_d = super::block(&model.params, block, &v, Some(&c));
            assert!(
                max_abs_diff(&sample(tape.value(d_out), i), &want_d) <= TOL,
                "instance {seed}"
            );
            let want_plain = super::block(&model.params, block, &v, None);
            assert!(
                max_abs_diff(&sample(tape.value(plain), i), &want_plain) <= TOL,
                "instance {seed}"
            );
        }
    }
}

fn param(model: &Mcm<f64>, name: &str) -> Vec<f64> {
    model.params.get(name).unwrap().value.data().to_vec()
}

/// Reconstruction of one sample, `patches: [N, D]`.
fn dense_forward(model: &Mcm<f64>, bank: &ConceptBank, patches: &[f64], plan: &MaskPlan) -> Vec<f64> {
    let cfg = model.cfg();
    let (e, d) = (cfg.width, cfg.patch_dim());
    let reg = &model.params;
    let mut visible = Vec::new();
    for &k in plan.visible() {
        let mut row = super::linear(reg, &model.patch_embed, &patches[k * d..(k + 1) * d]);
        if cfg.pos_embed {
            row = super::add(&row, &param(model, "enc_pos")[k * e..(k + 1) * e]);
        }
        visible.extend(row);
    }
    let table = bank.table::<f64>();
    let bank_rows = match &model.bank_proj {
        Some(proj) => super::linear(reg, proj, table.data()),
        None => table.data().to_vec(),
    };
    let fixed = cfg.variant == Variant::FixedConcepts;
    let seed_rows: Vec<f64> = if fixed {
        (0..cfg.concepts)
            .flat_map(|j| bank_rows[2 * j * e..(2 * j + 1) * e].to_vec())
            .collect()
    } else {
        param(model, "concepts")
    };
    let mut concepts = seed_rows.clone();
    let mut snapshots = Vec::new();
    for (l, layer) in model.encoder.iter().enumerate() {
        let query = if fixed { seed_rows.clone() } else { concepts.clone() };
        (visible, concepts) = super::encoder_layer(reg, layer, &visible, &query);
        if l % 2 == 1 {
            snapshots.push(concepts.clone());
        }
    }
    let n = cfg.num_patches();
    let mask_token = param(model, "mask_token");
    let mut full = Vec::with_capacity(n * e);
    for k in 0..n {
        let row = match plan.visible().iter().position(|&v| v == k) {
            Some(at) => visible[at * e..(at + 1) * e].to_vec(),
            None => mask_token.clone(),
        };
        full.extend(row);
    }
    if cfg.pos_embed {
        full = super::add(&full, &param(model, "dec_pos"));
    }
    let x = match cfg.variant {
        Variant::NoBranches => {
            let mut x = full;
            x.extend(concepts);
            for block in &model.decoder {
                x = super::block(reg, block, &x, Some(&x.clone()));
            }
            x.truncate(n * e);
            x
        }
        variant => {
            let memory: Vec<Vec<f64>> = match variant {
                Variant::RepetitiveConcepts => vec![concepts; model.decoder.len()],
                _ => snapshots.into_iter().rev().collect(),
            };
            let mut x = full;
            for (block, mem) in model.decoder.iter().zip(&memory) {
                x = super::block(reg, block, &x, Some(mem));
            }
            x
        }
    };
    super::linear(reg, &model.head, &x)
}

pub fn model_forward_matches_loops(instances: u64) {
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    for seed in 0..instances {
        let variant = Variant::ALL[seed as usize % 4];
        let mut cfg = small_config(variant);
        cfg.enc_layers = 4;
        cfg.pos_embed = seed % 3 != 0;
        cfg.concept_dim = if seed % 2 == 0 { 8 } else { 10 };
        let model = random_model(cfg.clone(), seed, 0.4);
        let bank = ConceptBank::synthetic(&names, cfg.concept_dim, seed).unwrap();
        let mut r = rng(seed + 4000);
        let ratio = [0.0, 0.25, 0.5, 0.9][r.random_range(0..4)];
        let plan = MaskPlan::new(cfg.grid(), ratio, seed, MaskShape::Random).unwrap();
        let patches = tensor(&mut r, &[2, cfg.num_patches(), cfg.patch_dim()], 0.5);
        let mut pass = model.pass(&bank).unwrap();
        let x = pass.tape.constant(patches.clone());
        let out = pass.forward(x, &plan).unwrap();
        let got = pass.tape.value(out.recon);
        for i in 0..2 {
            let want = dense_forward(&model, &bank, &sample(&patches, i), &plan);
            let err = max_abs_diff(&sample(got, i), &want);
            assert!(err <= TOL, "{variant:?} instance {seed}: {err:e}");
        }
    }
}

pub fn masked_recon_loss_matches_loops(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(seed + 5000);
        let (b, n, d) = (r.random_range(1..4), r.random_range(2..10), r.random_range(1..5));
        let recon = tensor(&mut r, &[b, n, d], 1.0);
        let target = tensor(&mut r, &[b, n, d], 1.0);
        let count = r.random_range(0..n);
        let mut z: Vec<usize> = rand::seq::index::sample(&mut r, n, count).into_vec();
        z.sort_unstable();
        let mut tape = Tape::new();
        let (rv, tv) = (tape.constant(recon.clone()), tape.constant(target.clone()));
        let l = masked_recon_loss(&mut tape, rv, tv, &z).unwrap();
        let want = super::masked_mse(recon.data(), target.data(), b, n, d, &z);
        assert!((tape.value(l).item() - want).abs() <= TOL, "instance {seed}");
    }
}

pub fn concept_metrics_match_loops(instances: u64) {
    for seed in 0..instances {
        let mut r = rng(seed + 6000);
        let (b, m, e) = (r.random_range(1..12), r.random_range(1..5), 6);
        let concepts = tensor(&mut r, &[b, m, e], 1.0);
        let bank = tensor(&mut r, &[2 * m, e], 1.0);
        let predicted = predict_concepts(&concepts, &bank).unwrap();
        for i in 0..b {
            for j in 0..m {
                let row = &concepts.data()[(i * m + j) * e..(i * m + j + 1) * e];
                let cos = |k: usize| {
                    let p = &bank.data()[k * e..(k + 1) * e];
                    let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                    dot / (row.iter().map(|a| a * a).sum::<f64>().sqrt() * p.iter().map(|a| a * a).sum::<f64>().sqrt())
                };
                assert_eq!(predicted[i][j], cos(2 * j) >= cos(2 * j + 1), "instance {seed}");
            }
        }
        let actual: Vec<Vec<bool>> = (0..b).map(|_| (0..m).map(|_| r.random_bool(0.4)).collect()).collect();
        let per: Vec<_> = confusions(&predicted, &actual)
            .unwrap()
            .iter()
            .map(|c| c.scores())
            .collect();
        let got = macro_average(&per);
        let want = super::macro_scores(&predicted, &actual);
        let got = [got.accuracy, got.precision, got.recall, got.f1];
        assert!(max_abs_diff(&got, &want) <= TOL, "instance {seed}");
    }
}
