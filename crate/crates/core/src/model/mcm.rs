//! The masked concept encoder, the concept-map decoder and the pixel head.

use crate::autograd::{Tape, Var};
use crate::data::bank::ConceptBank;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Variant};
use crate::model::mask::MaskPlan;
use crate::model::patch::patchify_batch;
use crate::nn::{Bound, FeedForward, Init, LayerNorm, LinearLayer, MultiHeadAttention, ParamId, ParamRegistry};
use crate::tensor::{Real, Tensor};

pub const TAG_ENC_SELF: &str = "encoder.self";
pub const TAG_ENC_CROSS: &str = "encoder.cross";
pub const TAG_DEC_CROSS: &str = "decoder.cross";
pub const TAG_DEC_SELF: &str = "decoder.self";

/// Standard deviation of the initial concept tokens.
pub const CONCEPT_INIT_STD: f64 = 1.0;
pub const MASK_TOKEN_STD: f64 = 0.02;

/// Attention, residual, layer norm, feedforward, residual, layer norm.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl Block {
    fn new<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, cfg: &ModelConfig, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(reg, &format!("{prefix}.attn"), cfg.width, cfg.heads, cfg.attn_scale)?,
            ln1: LayerNorm::new(reg, &format!("{prefix}.ln1"), cfg.width)?,
            ffn: FeedForward::new(reg, &format!("{prefix}.ffn"), cfg.width, hidden)?,
            ln2: LayerNorm::new(reg, &format!("{prefix}.ln2"), cfg.width)?,
        })
    }

    /// `LN2(h + FFN(h))` with `h = LN1(q + MHA(q, kv))`. Without `kv` the
    /// attention term is dropped.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q: Var,
        kv: Option<Var>,
        tag: &'static str,
    ) -> Result<Var> {
        let h = match kv {
            Some(kv) => {
                let a = self.attn.forward(tape, p, q, kv, Some(tag))?;
                tape.add(q, a)?
            }
            None => q,
        };
        let h = self.ln1.forward(tape, p, h)?;
        let f = self.ffn.forward(tape, p, h)?;
        let s = tape.add(h, f)?;
        self.ln2.forward(tape, p, s)
    }
}

/// A concept branch cross-attending to the visible tokens next to a token
/// branch self-attending among them. Concepts never attend to each other.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub concept: Block,
    pub token: Block,
}

impl EncoderLayer {
    /// Returns `(visible', concepts')`; both branches read the layer input.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, visible: Var, concepts: Var) -> Result<(Var, Var)> {
        if tape.shape(visible)[1] == 0 {
            let c = self.concept.forward(tape, p, concepts, None, TAG_ENC_CROSS)?;
            return Ok((visible, c));
        }
        let c = self.concept.forward(tape, p, concepts, Some(visible), TAG_ENC_CROSS)?;
        let v = self.token.forward(tape, p, visible, Some(visible), TAG_ENC_SELF)?;
        Ok((v, c))
    }
}

#[derive(Clone, Debug)]
pub struct Mcm<T> {
    cfg: ModelConfig,
    pub params: ParamRegistry<T>,
    pub patch_embed: LinearLayer,
    pub enc_pos: Option<ParamId>,
    pub dec_pos: Option<ParamId>,
    pub concepts: ParamId,
    pub mask_token: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<Block>,
    pub head: LinearLayer,
    pub bank_proj: Option<LinearLayer>,
}

/// Result of the encoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[b, keep, E]`
    pub visible: Var,
    /// `C_L`, `[b, M, E]`
    pub concepts: Var,
    /// Concept tokens after encoder layers 2, 4, …
    pub snapshots: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[b, N, P²·C]`
    pub recon: Var,
    pub concepts: Var,
    pub visible: Var,
    pub snapshots: Vec<Var>,
    /// What each decoder layer attended to, in layer order.
    pub memory: Vec<Var>,
    /// Assembled decoder input, `[b, N, E]`.
    pub full: Var,
}

/// Values of a forward pass, detached from the tape.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub recon: Tensor<T>,
    pub concepts: Tensor<T>,
}

impl<T: Real> Mcm<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamRegistry::new();
        let (n, e, m) = (cfg.num_patches(), cfg.width, cfg.concepts);
        let patch_embed = LinearLayer::new(&mut reg, "patch_embed", cfg.patch_dim(), e)?;
        let (enc_pos, dec_pos) = if cfg.pos_embed {
            let pos = Init::TruncNormal {
                std: crate::nn::layers::WEIGHT_STD,
            };
            (
                Some(reg.add("enc_pos", &[n, e], pos)?),
                Some(reg.add("dec_pos", &[n, e], pos)?),
            )
        } else {
            (None, None)
        };
        let concepts = reg.add("concepts", &[m, e], Init::Normal { std: CONCEPT_INIT_STD })?;
        let mask_token = reg.add("mask_token", &[e], Init::Normal { std: MASK_TOKEN_STD })?;
        let encoder = (0..cfg.enc_layers)
            .map(|l| {
                Ok(EncoderLayer {
                    concept: Block::new(&mut reg, &format!("encoder.{l}.concept"), &cfg, cfg.enc_mlp)?,
                    token: Block::new(&mut reg, &format!("encoder.{l}.token"), &cfg, cfg.enc_mlp)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.dec_layers())
            .map(|d| Block::new(&mut reg, &format!("decoder.{d}"), &cfg, cfg.dec_mlp))
            .collect::<Result<Vec<_>>>()?;
        let head = LinearLayer::new(&mut reg, "head", e, cfg.patch_dim())?;
        let bank_proj = if cfg.concept_dim != e {
            Some(LinearLayer::new(&mut reg, "bank_proj", cfg.concept_dim, e)?)
        } else {
            None
        };
        reg.init_params(seed);
        Ok(Self {
            cfg,
            params: reg,
            patch_embed,
            enc_pos,
            dec_pos,
            concepts,
            mask_token,
            encoder,
            decoder,
            head,
            bank_proj,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn check_bank(&self, bank: &ConceptBank) -> Result<()> {
        if bank.concept_count() != self.cfg.concepts {
            return Err(Error::Config(format!(
                "bank has {} concepts, model expects {}",
                bank.concept_count(),
                self.cfg.concepts
            )));
        }
        if bank.dim() != self.cfg.concept_dim {
            return Err(Error::Config(format!(
                "bank width {} differs from concept_dim {}",
                bank.dim(),
                self.cfg.concept_dim
            )));
        }
        Ok(())
    }

    /// Starts a graph: binds every parameter and places the (projected) bank.
    pub fn pass(&self, bank: &ConceptBank) -> Result<Pass<'_, T>> {
        self.check_bank(bank)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let table = tape.constant(bank.table::<T>());
        let bank = match &self.bank_proj {
            Some(proj) => proj.forward(&mut tape, &p, table)?,
            None => table,
        };
        Ok(Pass {
            model: self,
            tape,
            p,
            bank,
        })
    }

    /// `[b, N, P²·C]` patches of images shaped like the configuration.
    pub fn patches(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = &self.cfg;
        for img in images {
            if img.shape() != [c.image_height, c.image_width, c.channels] {
                return Err(Error::Config(format!(
                    "image shape {:?} does not match model geometry {}x{}x{}",
                    img.shape(),
                    c.image_height,
                    c.image_width,
                    c.channels
                )));
            }
        }
        patchify_batch(images, c.patch)
    }

    /// Bank rows in model space, `[2M, E]`.
    pub fn projected_bank(&self, bank: &ConceptBank) -> Result<Tensor<T>> {
        let pass = self.pass(bank)?;
        Ok(pass.tape.value(pass.bank).clone())
    }

    /// Encodes and decodes `patches` under `plan`, optionally replacing concept
    /// rows `(position, prototype id)` before decoding.
    pub fn infer(
        &self,
        bank: &ConceptBank,
        patches: Tensor<T>,
        plan: &MaskPlan,
        edits: &[(usize, usize)],
    ) -> Result<Inference<T>> {
        let mut pass = self.pass(bank)?;
        let x = pass.tape.constant(patches);
        let enc = pass.encode(x, plan)?;
        let memory = pass.memory(&enc);
        let (concepts, memory) = pass.edit(enc.concepts, &memory, edits)?;
        let full = pass.assemble(enc.visible, plan)?;
        let recon = pass.decode(full, &memory)?;
        Ok(Inference {
            recon: pass.tape.value(recon).clone(),
            concepts: pass.tape.value(concepts).clone(),
        })
    }
}

/// One forward graph over a model.
pub struct Pass<'m, T> {
    pub model: &'m Mcm<T>,
    pub tape: Tape<T>,
    pub p: Bound,
    /// Bank rows in model space, `[2M, E]`.
    pub bank: Var,
}

impl<T: Real> Pass<'_, T> {
    fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    fn check_patches(&self, patches: Var) -> Result<usize> {
        let s = self.tape.shape(patches);
        let want = [self.cfg().num_patches(), self.cfg().patch_dim()];
        if s.len() != 3 || s[1..] != want {
            return Err(Error::dim("encode", s, &want));
        }
        Ok(s[0])
    }

    /// Projects the visible patches and adds their positions.
    pub fn embed(&mut self, patches: Var, plan: &MaskPlan) -> Result<Var> {
        self.check_patches(patches)?;
        if plan.n() != self.cfg().num_patches() {
            return Err(Error::Contract(format!(
                "mask plan covers {} patches, model has {}",
                plan.n(),
                self.cfg().num_patches()
            )));
        }
        let vis = self.tape.gather_rows(patches, plan.visible())?;
        let tokens = self.model.patch_embed.forward(&mut self.tape, &self.p, vis)?;
        match self.model.enc_pos {
            Some(id) => {
                let pos = self.tape.gather_rows(self.p.var(id), plan.visible())?;
                self.tape.add(tokens, pos)
            }
            None => Ok(tokens),
        }
    }

    /// Fixed prototype queries for the `fixed_concepts` variant, `[M, E]`.
    fn prototype_queries(&mut self) -> Result<Var> {
        let ids: Vec<usize> = (0..self.cfg().concepts).map(|j| 2 * j).collect();
        self.tape.gather_rows(self.bank, &ids)
    }

    pub fn encode(&mut self, patches: Var, plan: &MaskPlan) -> Result<Encoded> {
        let b = self.check_patches(patches)?;
        let mut visible = self.embed(patches, plan)?;
        let fixed = self.cfg().variant == Variant::FixedConcepts;
        let seed = if fixed {
            self.prototype_queries()?
        } else {
            self.p.var(self.model.concepts)
        };
        let seed = self.tape.broadcast_to(seed, &[b])?;
        let mut concepts = seed;
        let mut snapshots = Vec::with_capacity(self.cfg().dec_layers());
        for (l, layer) in self.model.encoder.iter().enumerate() {
            let query = if fixed { seed } else { concepts };
            (visible, concepts) = layer.forward(&mut self.tape, &self.p, visible, query)?;
            if l % 2 == 1 {
                snapshots.push(concepts);
            }
        }
        Ok(Encoded {
            visible,
            concepts,
            snapshots,
        })
    }

    /// The concept tensors the decoder layers attend to, in layer order.
    pub fn memory(&self, enc: &Encoded) -> Vec<Var> {
        match self.cfg().variant {
            Variant::Full | Variant::FixedConcepts => enc.snapshots.iter().rev().copied().collect(),
            Variant::RepetitiveConcepts => vec![enc.concepts; self.cfg().dec_layers()],
            Variant::NoBranches => vec![enc.concepts],
        }
    }

    /// Puts visible latents and mask tokens back into patch order and adds
    /// the decoder positions.
    pub fn assemble(&mut self, visible: Var, plan: &MaskPlan) -> Result<Var> {
        let s = self.tape.shape(visible).to_vec();
        let e = self.cfg().width;
        if s.len() != 3 || s[1] != plan.keep || s[2] != e || plan.n() != self.cfg().num_patches() {
            return Err(Error::Contract(format!(
                "visible latents {s:?} do not fit a plan keeping {} of {} patches",
                plan.keep,
                plan.n()
            )));
        }
        let z = plan.masked().len();
        let ordered = if z == 0 {
            visible
        } else {
            let token = self.tape.broadcast_to(self.p.var(self.model.mask_token), &[s[0], z])?;
            if plan.keep == 0 {
                token
            } else {
                self.tape.concat_rows(visible, token)?
            }
        };
        let full = self.tape.gather_rows(ordered, &plan.inverse)?;
        match self.model.dec_pos {
            Some(id) => self.tape.add(full, self.p.var(id)),
            None => Ok(full),
        }
    }

    pub fn decode(&mut self, full: Var, memory: &[Var]) -> Result<Var> {
        let model = self.model;
        let n = self.cfg().num_patches();
        let x = if self.cfg().variant == Variant::NoBranches {
            let [c] = memory else {
                return Err(Error::Contract(format!(
                    "expected the final concepts only, got {} tensors",
                    memory.len()
                )));
            };
            let mut x = self.tape.concat_rows(full, *c)?;
            for block in &model.decoder {
                x = block.forward(&mut self.tape, &self.p, x, Some(x), TAG_DEC_SELF)?;
            }
            let rows: Vec<usize> = (0..n).collect();
            self.tape.gather_rows(x, &rows)?
        } else {
            if memory.len() != model.decoder.len() {
                return Err(Error::Contract(format!(
                    "{} concept snapshots for {} decoder layers",
                    memory.len(),
                    model.decoder.len()
                )));
            }
            let mut x = full;
            for (block, &mem) in model.decoder.iter().zip(memory) {
                x = block.forward(&mut self.tape, &self.p, x, Some(mem), TAG_DEC_CROSS)?;
            }
            x
        };
        model.head.forward(&mut self.tape, &self.p, x)
    }

    pub fn forward(&mut self, patches: Var, plan: &MaskPlan) -> Result<ForwardOutput> {
        let enc = self.encode(patches, plan)?;
        let memory = self.memory(&enc);
        let full = self.assemble(enc.visible, plan)?;
        let recon = self.decode(full, &memory)?;
        Ok(ForwardOutput {
            recon,
            concepts: enc.concepts,
            visible: enc.visible,
            snapshots: enc.snapshots,
            memory,
            full,
        })
    }

    /// Replaces rows of `x: [b, M, E]` by bank rows. `ids[i·M + j]` names the
    /// bank row for sample `i`, position `j`; `None` keeps the row.
    pub fn replace_rows(&mut self, x: Var, ids: &[Option<usize>]) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        if s.len() != 3 || s[0] * s[1] != ids.len() {
            return Err(Error::dim("replace_rows", &s, &[ids.len()]));
        }
        if ids.iter().all(Option::is_none) {
            return Ok(x);
        }
        let e = s[2];
        let mut mask = Vec::with_capacity(ids.len() * e);
        for id in ids {
            mask.extend(std::iter::repeat_n(if id.is_some() { T::one() } else { T::zero() }, e));
        }
        let keep: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
        let flat: Vec<usize> = ids.iter().map(|id| id.unwrap_or(0)).collect();
        let rows = self.tape.gather_rows(self.bank, &flat)?;
        let rows = self.tape.reshape(rows, &s)?;
        let mask = self.tape.constant(Tensor::new(s.clone(), mask)?);
        let keep = self.tape.constant(Tensor::new(s, keep)?);
        let kept = self.tape.mul(x, keep)?;
        let placed = self.tape.mul(rows, mask)?;
        self.tape.add(kept, placed)
    }

    /// Applies the same `(position, bank id)` edits to every sample of the
    /// final concepts and of every decoder memory tensor.
    pub fn edit(&mut self, concepts: Var, memory: &[Var], edits: &[(usize, usize)]) -> Result<(Var, Vec<Var>)> {
        let (m, rows) = (self.cfg().concepts, 2 * self.cfg().concepts);
        let b = self.tape.shape(concepts)[0];
        let mut per_position = vec![None; m];
        for &(pos, id) in edits {
            if pos >= m {
                return Err(Error::Index {
                    op: "edit_concepts",
                    index: pos,
                    extent: m,
                });
            }
            if id >= rows {
                return Err(Error::Contract(format!(
                    "prototype {id} is not in a bank of {rows} rows"
                )));
            }
            if per_position[pos].replace(id).is_some() {
                return Err(Error::Contract(format!("concept position {pos} edited twice")));
            }
        }
        let ids: Vec<Option<usize>> = (0..b).flat_map(|_| per_position.iter().copied()).collect();
        self.swap_rows(concepts, memory, &ids)
    }

    /// [`Self::replace_rows`] on the concepts and on every memory tensor.
    pub fn swap_rows(&mut self, concepts: Var, memory: &[Var], ids: &[Option<usize>]) -> Result<(Var, Vec<Var>)> {
        let c = self.replace_rows(concepts, ids)?;
        let mut mem = Vec::with_capacity(memory.len());
        for &x in memory {
            mem.push(if x == concepts { c } else { self.replace_rows(x, ids)? });
        }
        Ok((c, mem))
    }
}

/// Replaces rows `j` of every sample of `concepts: [b, M, E]` by `target`.
pub fn edit_concepts<T: Real>(concepts: &Tensor<T>, edits: &[(usize, &[T])]) -> Result<Tensor<T>> {
    let s = concepts.shape();
    if s.len() != 3 {
        return Err(Error::dim("edit_concepts", s, &[0, 0, 0]));
    }
    let (b, m, e) = (s[0], s[1], s[2]);
    let mut seen = vec![false; m];
    for &(pos, target) in edits {
        if pos >= m {
            return Err(Error::Index {
                op: "edit_concepts",
                index: pos,
                extent: m,
            });
        }
        if std::mem::replace(&mut seen[pos], true) {
            return Err(Error::Contract(format!("concept position {pos} edited twice")));
        }
        if target.len() != e {
            return Err(Error::dim("edit_concepts", s, &[target.len()]));
        }
    }
    let mut out = concepts.clone();
    let data = out.data_mut();
    for i in 0..b {
        for &(pos, target) in edits {
            data[(i * m + pos) * e..(i * m + pos + 1) * e].copy_from_slice(target);
        }
    }
    Ok(out)
}
