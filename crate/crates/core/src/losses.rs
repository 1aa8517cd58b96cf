//! Reconstruction, disentanglement and weighted concept losses.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::data::bank::antonym_id;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, MaskPlan, Pass};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Disentanglement coefficient.
    pub alpha: f64,
    /// Concept-loss coefficient.
    pub beta: f64,
    /// Scale `S` of the inverse-frequency weights.
    pub scale: f64,
    pub eps_freq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            scale: 1.0,
            eps_freq: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha {} and beta {} must be nonnegative",
                self.alpha, self.beta
            )));
        }
        if !(self.scale > 0.0 && self.eps_freq > 0.0) {
            return Err(Error::Config(format!(
                "scale {} and eps_freq {} must be positive",
                self.scale, self.eps_freq
            )));
        }
        Ok(())
    }
}

/// Mean squared error over the patch positions in `z`, averaged per sample
/// and then over the batch. An empty `z` averages over every position.
pub fn masked_recon_loss<T: Real>(tape: &mut Tape<T>, recon: Var, target: Var, z: &[usize]) -> Result<Var> {
    let (sr, st) = (tape.shape(recon).to_vec(), tape.shape(target).to_vec());
    if sr != st || sr.len() < 2 {
        return Err(Error::dim("masked_recon_loss", &sr, &st));
    }
    let diff = tape.sub(recon, target)?;
    let diff = if z.is_empty() { diff } else { tape.gather_rows(diff, z)? };
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Weight of every slot, `S / (count of its prototype in the batch + eps)`.
pub fn frequency_weights(ids: &[usize], lw: &LossWeights) -> Vec<f64> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &id in ids {
        *counts.entry(id).or_default() += 1;
    }
    ids.iter()
        .map(|id| lw.scale / (counts[id] as f64 + lw.eps_freq))
        .collect()
}

/// `(1/b)·Σ w_ij·MSE(C_L[i,j], prototype[i,j])`. `ids[i·M + j]` is the bank
/// row of the prototype for sample `i`, position `j`; `bank` is `[2M, E]`.
/// With `uniform` every slot gets the mean of the frequency weights instead.
pub fn weighted_concept_loss<T: Real>(
    tape: &mut Tape<T>,
    concepts: Var,
    bank: Var,
    ids: &[usize],
    lw: &LossWeights,
    uniform: bool,
) -> Result<Var> {
    let s = tape.shape(concepts).to_vec();
    if s.len() != 3 || s[0] * s[1] != ids.len() {
        return Err(Error::dim("weighted_concept_loss", &s, &[ids.len()]));
    }
    let rows = tape.shape(bank)[0];
    if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
        return Err(Error::Contract(format!(
            "prototype {bad} is not in a bank of {rows} rows"
        )));
    }
    let (b, e) = (s[0], s[2]);
    let mut w = frequency_weights(ids, lw);
    if uniform && !w.is_empty() {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        w.fill(mean);
    }
    let norm = 1.0 / (b * e) as f64;
    let per_elem: Vec<T> = w
        .iter()
        .flat_map(|&wi| std::iter::repeat_n(T::lit(wi * norm), e))
        .collect();
    let weights = tape.constant(Tensor::new(s.clone(), per_elem)?);
    let protos = tape.gather_rows(bank, ids)?;
    let protos = tape.reshape(protos, &s)?;
    let diff = tape.sub(concepts, protos)?;
    let sq = tape.square(diff);
    let weighted = tape.mul(sq, weights)?;
    Ok(tape.sum(weighted))
}

/// A single-hot vector `U ∈ {0,1}^M`, stored as the position of its one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SingleHotMask {
    pub position: usize,
    pub len: usize,
}

impl SingleHotMask {
    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        assert!(len >= 1, "single-hot mask needs at least one position");
        Self {
            position: rng.random_range(0..len),
            len,
        }
    }

    pub fn to_vec(self) -> Vec<u8> {
        (0..self.len).map(|j| u8::from(j == self.position)).collect()
    }
}

/// Bank row with the highest cosine similarity to `row`. A zero row falls
/// back to row 0.
pub fn nearest_prototype<T: Real>(row: &[T], bank: &Tensor<T>) -> usize {
    let e = row.len();
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    let rn = norm(row);
    if rn == 0.0 {
        log::warn!("zero-norm concept row; using prototype 0");
        return 0;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (id, proto) in bank.data().chunks(e).enumerate() {
        let dot: f64 = row.iter().zip(proto).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let cos = dot / (rn * norm(proto));
        if cos > best.1 {
            best = (id, cos);
        }
    }
    best.0
}

/// For each sample, the antonym of the prototype nearest to the row at
/// `u.position`; `None` elsewhere. Indexed `[i·M + j]`.
pub fn antonym_targets<T: Real>(
    concepts: &Tensor<T>,
    bank: &Tensor<T>,
    u: SingleHotMask,
) -> Result<Vec<Option<usize>>> {
    let s = concepts.shape();
    if s.len() != 3 || s[1] != u.len || bank.shape().get(1) != s.get(2) {
        return Err(Error::dim("antonym_swap", s, bank.shape()));
    }
    let (b, m, e) = (s[0], s[1], s[2]);
    let mut ids = vec![None; b * m];
    for i in 0..b {
        let row = &concepts.outer(i)[u.position * e..(u.position + 1) * e];
        ids[i * m + u.position] = Some(antonym_id(nearest_prototype(row, bank)));
    }
    Ok(ids)
}

/// `Ĉ = U·O(C) + (1−U)·C`, applied identically to every decoder memory.
pub fn antonym_swap<T: Real>(
    pass: &mut Pass<'_, T>,
    concepts: Var,
    memory: &[Var],
    u: SingleHotMask,
) -> Result<(Var, Vec<Var>)> {
    let ids = antonym_targets(pass.tape.value(concepts), pass.tape.value(pass.bank), u)?;
    pass.swap_rows(concepts, memory, &ids)
}

/// Swaps one concept for its antonym, decodes `x̃`, re-encodes it with
/// `reencode` and returns `(1/b)·Σ_i Σ_j MSE(Ĉ[i,j], C̃[i,j])`, the same
/// normalization as the concept loss.
pub fn disentangle_loss_with<T: Real>(
    pass: &mut Pass<'_, T>,
    out: &ForwardOutput,
    u: SingleHotMask,
    mut reencode: impl FnMut(&mut Pass<'_, T>, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let (c_hat, memory) = antonym_swap(pass, out.concepts, &out.memory, u)?;
    let x_tilde = pass.decode(out.full, &memory)?;
    let c_tilde = reencode(pass, x_tilde, c_hat)?;
    let diff = pass.tape.sub(c_hat, c_tilde)?;
    let sq = pass.tape.square(diff);
    let s = pass.tape.shape(sq).to_vec();
    let total = pass.tape.sum(sq);
    Ok(pass.tape.scale(total, 1.0 / (s[0] * s[2]) as f64))
}

/// The disentanglement loss with every patch of `x̃` visible on re-encoding.
pub fn disentangle_loss<T: Real>(pass: &mut Pass<'_, T>, out: &ForwardOutput, u: SingleHotMask) -> Result<Var> {
    let full = MaskPlan::full(pass.model.cfg().num_patches());
    disentangle_loss_with(pass, out, u, |pass, x, _| Ok(pass.encode(x, &full)?.concepts))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub re: f64,
    pub dis: f64,
    pub concept: f64,
    pub total: f64,
}

/// `ℓ_re + α·ℓ_dis + β·ℓ_concept`. A non-finite component is reported by name.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    re: Var,
    dis: Var,
    concept: Var,
    lw: &LossWeights,
) -> Result<(Var, LossValues)> {
    let value = |tape: &Tape<T>, v: Var| tape.value(v).item().as_f64();
    let mut vals = LossValues {
        re: value(tape, re),
        dis: value(tape, dis),
        concept: value(tape, concept),
        total: 0.0,
    };
    for (name, v) in [("l_re", vals.re), ("l_dis", vals.dis), ("l_concept", vals.concept)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} is {v} (l_re={}, l_dis={}, l_concept={})",
                vals.re, vals.dis, vals.concept
            )));
        }
    }
    let d = tape.scale(dis, lw.alpha);
    let c = tape.scale(concept, lw.beta);
    let t = tape.add(re, d)?;
    let t = tape.add(t, c)?;
    vals.total = value(tape, t);
    Ok((t, vals))
}

/// Inputs of one training objective evaluation.
pub struct Objective<'a> {
    pub plan: &'a MaskPlan,
    /// Prototype bank row per `(sample, position)`.
    pub prototype_ids: &'a [usize],
    pub u: SingleHotMask,
    pub weights: LossWeights,
    pub uniform_weights: bool,
}

/// Full forward pass and all three losses on `patches: [b, N, P²·C]`.
pub fn objective<T: Real>(
    pass: &mut Pass<'_, T>,
    patches: Var,
    obj: &Objective<'_>,
) -> Result<(Var, LossValues, ForwardOutput)> {
    let out = pass.forward(patches, obj.plan)?;
    let re = masked_recon_loss(&mut pass.tape, out.recon, patches, obj.plan.masked())?;
    let dis = if obj.weights.alpha > 0.0 {
        disentangle_loss(pass, &out, obj.u)?
    } else {
        pass.tape.constant(Tensor::scalar(T::zero()))
    };
    let bank = pass.bank;
    let concept = weighted_concept_loss(
        &mut pass.tape,
        out.concepts,
        bank,
        obj.prototype_ids,
        &obj.weights,
        obj.uniform_weights,
    )?;
    let (total, vals) = total_loss(&mut pass.tape, re, dis, concept, &obj.weights)?;
    Ok((total, vals, out))
}
