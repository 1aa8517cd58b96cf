//! Randomized invariants of the tape, layers, model, losses and data.

mod common;

use common::{max_abs_diff, random_model, rng, small_config, tensor};
use mcm_core::data::{antonym_id, gen_synthetic, prototype_id, ConceptBank, ImageGeometry, SyntheticSpec};
use mcm_core::losses::{antonym_swap, masked_recon_loss, weighted_concept_loss, LossWeights, SingleHotMask};
use mcm_core::model::mcm::TAG_ENC_SELF;
use mcm_core::model::{masked_count, patchify, unpatchify, MaskPlan, MaskShape, Variant};
use mcm_core::nn::{AdamWConfig, AdamWState, AttnScale, MultiHeadAttention, ParamRegistry};
use mcm_core::trainer::{confusions, macro_average};
use mcm_core::{Tape, Tensor};
use proptest::prelude::*;

fn names(m: usize) -> Vec<String> {
    (0..m).map(|j| format!("c{j}")).collect()
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    p.shuffle(&mut rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, width in 1usize..10, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = tensor(&mut rng(seed), &[rows, width], scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(width) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn gather_by_permutation_and_inverse_is_identity(n in 1usize..8, width in 1usize..4, seed in any::<u64>()) {
        let perm = permutation(n, seed);
        let mut inverse = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let x = tensor(&mut rng(seed ^ 1), &[2, n, width], 1.0);
        let r = tensor(&mut rng(seed ^ 2), &[2, n, width], 1.0);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let there = tape.gather_rows(xv, &perm).unwrap();
        let back = tape.gather_rows(there, &inverse).unwrap();
        prop_assert_eq!(tape.value(back).data(), x.data());
        let rv = tape.constant(r.clone());
        let prod = tape.mul(back, rv).unwrap();
        let l = tape.sum(prod);
        let g = tape.backward(l).unwrap().get(xv).unwrap();
        prop_assert_eq!(g.data(), r.data());
    }

    #[test]
    fn backward_is_replayable_bitwise(seed in any::<u64>()) {
        let mut tape = Tape::new();
        let a = tape.param(tensor(&mut rng(seed), &[3, 4], 1.0));
        let b = tape.param(tensor(&mut rng(seed ^ 1), &[4, 5], 1.0));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax(m).unwrap();
        let g = tape.gelu(s);
        let sq = tape.mul(g, m).unwrap();
        let l = tape.mean(sq);
        let first = tape.backward(l).unwrap();
        let second = tape.backward(l).unwrap();
        for v in [a, b] {
            let (x, y) = (first.get(v).unwrap(), second.get(v).unwrap());
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn attention_ignores_key_value_order(lk in 1usize..7, heads in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
        let mut reg = ParamRegistry::new();
        let a = MultiHeadAttention::new(&mut reg, "attn", 8, heads, AttnScale::PerHead).unwrap();
        common::randomize(&mut reg, &mut rng(seed), 0.5);
        let q = tensor(&mut rng(seed ^ 1), &[2, 3, 8], 1.0);
        let kv = tensor(&mut rng(seed ^ 2), &[2, lk, 8], 1.0);
        let perm = permutation(lk, seed);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let (qv, kvv) = (tape.constant(q), tape.constant(kv));
        let shuffled = tape.gather_rows(kvv, &perm).unwrap();
        let out = a.forward(&mut tape, &p, qv, kvv, None).unwrap();
        let out_shuffled = a.forward(&mut tape, &p, qv, shuffled, None).unwrap();
        prop_assert!(max_abs_diff(tape.value(out).data(), tape.value(out_shuffled).data()) <= 1e-12);
    }

    #[test]
    fn mask_plan_partitions_the_patches(rows in 1usize..7, cols in 1usize..7, ratio in 0.0f64..=1.0, seed in any::<u64>(), square in any::<bool>()) {
        let shape = if square { MaskShape::Square } else { MaskShape::Random };
        let plan = MaskPlan::new((rows, cols), ratio, seed, shape).unwrap();
        let n = rows * cols;
        prop_assert_eq!(plan.masked().len(), masked_count(n, ratio));
        prop_assert_eq!(plan.visible().len() + plan.masked().len(), n);
        let mut all: Vec<usize> = plan.visible().iter().chain(plan.masked()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.visible().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.masked().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&plan, &MaskPlan::new((rows, cols), ratio, seed, shape).unwrap());
    }

    #[test]
    fn recon_loss_ignores_mask_index_order(n in 2usize..10, count in 1usize..10, seed in any::<u64>()) {
        let count = count.min(n);
        let z: Vec<usize> = rand::seq::index::sample(&mut rng(seed), n, count).into_vec();
        let mut sorted = z.clone();
        sorted.sort_unstable();
        let recon = tensor(&mut rng(seed ^ 1), &[2, n, 3], 1.0);
        let target = tensor(&mut rng(seed ^ 2), &[2, n, 3], 1.0);
        let mut tape = Tape::new();
        let (r, t) = (tape.constant(recon), tape.constant(target));
        let a = masked_recon_loss(&mut tape, r, t, &z).unwrap();
        let b = masked_recon_loss(&mut tape, r, t, &sorted).unwrap();
        prop_assert!((tape.value(a).item() - tape.value(b).item()).abs() <= 1e-14);
    }

    #[test]
    fn equal_frequencies_scale_the_plain_loss(b in 1usize..5, m in 1usize..4, scale in 0.1f64..20.0, seed in any::<u64>()) {
        // Every sample carries the same labels, so every prototype occurs b times.
        let labels: Vec<bool> = (0..m).map(|j| (seed >> j) & 1 == 1).collect();
        let ids: Vec<usize> = (0..b).flat_map(|_| labels.iter().enumerate().map(|(j, &a)| prototype_id(j, a))).collect();
        let concepts = tensor(&mut rng(seed), &[b, m, 4], 1.0);
        let bank = tensor(&mut rng(seed ^ 1), &[2 * m, 4], 1.0);
        let lw = LossWeights { scale, ..LossWeights::default() };
        let mut tape = Tape::new();
        let (c, k) = (tape.constant(concepts.clone()), tape.constant(bank.clone()));
        let weighted = weighted_concept_loss(&mut tape, c, k, &ids, &lw, false).unwrap();
        let weighted = tape.value(weighted).item();
        let mut plain = 0.0;
        for (slot, &id) in ids.iter().enumerate() {
            let row = &concepts.data()[slot * 4..(slot + 1) * 4];
            let proto = &bank.data()[id * 4..(id + 1) * 4];
            plain += row.iter().zip(proto).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0;
        }
        plain /= b as f64;
        let w = scale / (b as f64 + lw.eps_freq);
        prop_assert!((weighted - w * plain).abs() <= 1e-12 * (1.0 + weighted.abs()));
    }

    #[test]
    fn bank_is_a_valid_involution(m in 1usize..6, dim in 8usize..24, seed in any::<u64>()) {
        let bank = ConceptBank::synthetic(&names(m), dim, seed).unwrap();
        for id in 0..2 * m {
            prop_assert_eq!(antonym_id(antonym_id(id)), id);
            prop_assert_eq!(bank.vector(antonym_id(antonym_id(id))), bank.vector(id));
            let norm = bank.vector(id).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9);
        }
        prop_assert!(bank.offending_pairs().is_empty());
    }

    #[test]
    fn patchify_round_trips(gh in 1usize..4, gw in 1usize..4, p in 1usize..4, gray in any::<bool>(), seed in any::<u64>()) {
        let c = if gray { 1 } else { 3 };
        let (h, w) = (gh * p, gw * p);
        let img = tensor(&mut rng(seed), &[h, w, c], 1.0);
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[gh * gw, p * p * c]);
        let back = unpatchify(&patches, h, w, c, p).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn f1_is_consistent_with_precision_and_recall(b in 1usize..20, m in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut labels = || (0..b).map(|_| (0..m).map(|_| r.random_bool(0.5)).collect::<Vec<bool>>()).collect::<Vec<_>>();
        let (pred, actual) = (labels(), labels());
        for c in confusions(&pred, &actual).unwrap() {
            let s = c.scores();
            let want = if s.precision + s.recall > 0.0 { 2.0 * s.precision * s.recall / (s.precision + s.recall) } else { 0.0 };
            prop_assert!((s.f1 - want).abs() <= 1e-12);
            prop_assert!([s.accuracy, s.precision, s.recall, s.f1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        let per: Vec<_> = confusions(&pred, &actual).unwrap().iter().map(|c| c.scores()).collect();
        let avg = macro_average(&per);
        prop_assert!((avg.f1 - per.iter().map(|s| s.f1).sum::<f64>() / m as f64).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn antonym_swap_changes_one_row_per_sample(position in 0usize..3, seed in any::<u64>()) {
        let model = random_model(small_config(Variant::Full), seed, 0.3);
        let bank = ConceptBank::synthetic(&names(3), 8, seed).unwrap();
        let plan = MaskPlan::new(model.cfg().grid(), 0.5, seed, MaskShape::Random).unwrap();
        let cfg = model.cfg().clone();
        let patches = tensor(&mut rng(seed ^ 1), &[2, cfg.num_patches(), cfg.patch_dim()], 0.5);
        let mut pass = model.pass(&bank).unwrap();
        let x = pass.tape.constant(patches);
        let out = pass.forward(x, &plan).unwrap();
        let (swapped, memory) = antonym_swap(&mut pass, out.concepts, &out.memory, SingleHotMask { position, len: 3 }).unwrap();
        prop_assert_eq!(memory.len(), out.memory.len());
        let (before, after) = (pass.tape.value(out.concepts), pass.tape.value(swapped));
        for i in 0..2 {
            for j in 0..3 {
                let at = (i * 3 + j) * 8;
                let changed = before.data()[at..at + 8] != after.data()[at..at + 8];
                prop_assert_eq!(changed, j == position);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_uses_every_visible_token(variant in prop::sample::select(Variant::ALL.to_vec()), seed in any::<u64>()) {
        let model = random_model(small_config(variant), seed, 0.3);
        let bank = ConceptBank::synthetic(&names(3), 8, seed).unwrap();
        let cfg = model.cfg().clone();
        let plan = MaskPlan::new(cfg.grid(), 0.5, seed, MaskShape::Random).unwrap();
        let patches = tensor(&mut rng(seed ^ 1), &[1, cfg.num_patches(), cfg.patch_dim()], 0.5);
        let run = |p: &Tensor<f64>| {
            let mut pass = model.pass(&bank).unwrap();
            let x = pass.tape.constant(p.clone());
            let out = pass.forward(x, &plan).unwrap();
            pass.tape.value(out.recon).clone()
        };
        let base = run(&patches);
        prop_assert_eq!(&base, &run(&patches));
        for &k in plan.visible() {
            let mut moved = patches.clone();
            moved.data_mut()[k * cfg.patch_dim()] += 0.5;
            prop_assert!(max_abs_diff(run(&moved).data(), base.data()) > 0.0, "visible patch {} had no effect", k);
        }
    }

    #[test]
    fn shared_concept_gradient_adds_over_the_batch(seed in any::<u64>()) {
        let model = random_model(small_config(Variant::Full), seed, 0.3);
        let bank = ConceptBank::synthetic(&names(3), 8, seed).unwrap();
        let cfg = model.cfg().clone();
        let plan = MaskPlan::new(cfg.grid(), 0.5, seed, MaskShape::Random).unwrap();
        let patches = tensor(&mut rng(seed ^ 1), &[2, cfg.num_patches(), cfg.patch_dim()], 0.5);
        let grad = |p: Tensor<f64>| {
            let mut pass = model.pass(&bank).unwrap();
            let x = pass.tape.constant(p);
            let out = pass.forward(x, &plan).unwrap();
            let l = masked_recon_loss(&mut pass.tape, out.recon, x, &[]).unwrap();
            let b = pass.tape.shape(x)[0] as f64;
            let l = pass.tape.scale(l, b);
            let g = pass.tape.backward(l).unwrap();
            g.get(pass.p.var(model.concepts)).unwrap()
        };
        let per = cfg.num_patches() * cfg.patch_dim();
        let one = |i: usize| Tensor::new([1, cfg.num_patches(), cfg.patch_dim()], patches.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let both = grad(patches.clone());
        let (a, b) = (grad(one(0)), grad(one(1)));
        for ((x, y), z) in both.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!((x - (y + z)).abs() <= 1e-6 * x.abs().max(1e-8));
        }
    }

    #[test]
    fn adamw_without_decay_or_gradient_is_a_no_op(seed in any::<u64>(), steps in 1usize..4) {
        let mut model = random_model(small_config(Variant::Full), seed, 0.3);
        let before = model.params.clone();
        let mut opt = AdamWState::new(&model.params, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        for _ in 0..steps {
            for (_, p) in model.params.iter_mut() {
                p.grad = Some(Tensor::zeros(p.value.shape().to_vec()));
            }
            opt.step(&mut model.params).unwrap();
        }
        for ((n1, p1), (n2, p2)) in before.iter().zip(model.params.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(&p1.value, &p2.value);
        }
    }

    #[test]
    fn construction_order_and_snapshots_are_stable(pairs in 1usize..4, seed in any::<u64>()) {
        let mut cfg = small_config(Variant::Full);
        cfg.enc_layers = 2 * pairs;
        let a = mcm_core::model::Mcm::<f64>::new(cfg.clone(), seed).unwrap();
        let b = mcm_core::model::Mcm::<f64>::new(cfg.clone(), seed).unwrap();
        let order = |m: &mcm_core::model::Mcm<f64>| m.params.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>();
        prop_assert_eq!(order(&a), order(&b));
        let bank = ConceptBank::synthetic(&names(3), 8, seed).unwrap();
        let plan = MaskPlan::new(cfg.grid(), 0.25, seed, MaskShape::Random).unwrap();
        let mut pass = a.pass(&bank).unwrap();
        let x = pass.tape.constant(Tensor::zeros([1, cfg.num_patches(), cfg.patch_dim()]));
        let enc = pass.encode(x, &plan).unwrap();
        prop_assert_eq!(enc.snapshots.len(), cfg.dec_layers());
        prop_assert_eq!(pass.tape.shape(enc.visible)[1], cfg.num_patches() - masked_count(cfg.num_patches(), 0.25));
    }

    #[test]
    fn encoder_self_attention_work_falls_with_the_ratio(seed in any::<u64>()) {
        let model = random_model(small_config(Variant::Full), seed, 0.3);
        let bank = ConceptBank::synthetic(&names(3), 8, seed).unwrap();
        let cfg = model.cfg().clone();
        let n = cfg.num_patches();
        let mut last = u64::MAX;
        for k in 0..n {
            let ratio = k as f64 / n as f64;
            let plan = MaskPlan::new(cfg.grid(), ratio, seed, MaskShape::Random).unwrap();
            let mut pass = model.pass(&bank).unwrap();
            let x = pass.tape.constant(Tensor::zeros([1, n, cfg.patch_dim()]));
            pass.encode(x, &plan).unwrap();
            let macs = pass.tape.macs(TAG_ENC_SELF);
            prop_assert!(macs < last);
            last = macs;
        }
    }

    #[test]
    fn synthetic_data_is_a_pure_function_of_its_inputs(n in 1usize..12, seed in any::<u64>()) {
        let spec = SyntheticSpec::default();
        let g = ImageGeometry { height: 24, width: 24, channels: 3 };
        let a = gen_synthetic(n, &spec, g, seed).unwrap();
        prop_assert_eq!(&a, &gen_synthetic(n, &spec, g, seed).unwrap());
        let bank = ConceptBank::synthetic(&spec.names, 16, seed).unwrap();
        for record in &a.records {
            let protos = mcm_core::data::prototypes_for::<f64>(record, &bank).unwrap();
            let m = spec.names.len();
            for j in 0..m {
                let row = &protos.data()[j * 16..(j + 1) * 16];
                let other = bank.vector(prototype_id(j, !record.attributes[j]));
                prop_assert!(row != other);
            }
        }
    }
}
