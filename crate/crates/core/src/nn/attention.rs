//! Multi-head attention. Self-attention is the case where the query and
//! key/value sequences are the same tensor.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layers::LinearLayer;
use crate::nn::registry::{Bound, ParamRegistry};
use crate::tensor::Real;

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttnScale {
    /// `√(E / heads)`
    #[default]
    PerHead,
    /// `√E`
    FullDim,
}

impl AttnScale {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnScale::PerHead => "per_head",
            AttnScale::FullDim => "full_dim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_head" => Ok(AttnScale::PerHead),
            "full_dim" => Ok(AttnScale::FullDim),
            other => Err(Error::Config(format!("unknown attn_scale {other}"))),
        }
    }
}

/// Multiply-accumulates of the attention core (`QKᵀ` and `A·V`), excluding
/// the projections.
pub fn attention_core_macs(batch: usize, len_q: usize, len_kv: usize, width: usize) -> u64 {
    2 * (batch * len_q * len_kv * width) as u64
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub width: usize,
    pub scale: AttnScale,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        scale: AttnScale,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            width,
            scale,
            query: LinearLayer::new(reg, &format!("{prefix}.query"), width, width)?,
            key: LinearLayer::new(reg, &format!("{prefix}.key"), width, width)?,
            value: LinearLayer::new(reg, &format!("{prefix}.value"), width, width)?,
            output: LinearLayer::new(reg, &format!("{prefix}.output"), width, width)?,
        })
    }

    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let d = self.width / self.heads;
        let x = tape.reshape(x, &[b, l, self.heads, d])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// `q_seq: [b, Lq, E]`, `kv_seq: [b, Lk, E]` → `[b, Lq, E]`. When `tag` is
    /// given, the core multiply-accumulates are tallied on the tape under it.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q_seq: Var,
        kv_seq: Var,
        tag: Option<&'static str>,
    ) -> Result<Var> {
        let (sq, skv) = (tape.shape(q_seq).to_vec(), tape.shape(kv_seq).to_vec());
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != self.width || skv[2] != self.width {
            return Err(Error::dim("attention", &sq, &skv));
        }
        if skv[1] == 0 {
            return Err(Error::Contract("attention needs at least one key/value token".into()));
        }
        let (b, lq, lk) = (sq[0], sq[1], skv[1]);
        let d = self.width / self.heads;

        let q = self.query.forward(tape, p, q_seq)?;
        let k = self.key.forward(tape, p, kv_seq)?;
        let v = self.value.forward(tape, p, kv_seq)?;
        let (q, k, v) = if self.heads == 1 {
            (q, k, v)
        } else {
            (
                self.split_heads(tape, q)?,
                self.split_heads(tape, k)?,
                self.split_heads(tape, v)?,
            )
        };

        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let denom = match self.scale {
            AttnScale::PerHead => d as f64,
            AttnScale::FullDim => self.width as f64,
        };
        let logits = tape.scale(logits, 1.0 / denom.sqrt());
        let weights = tape.softmax(logits)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = if self.heads == 1 {
            ctx
        } else {
            let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
            tape.reshape(merged, &[b, lq, self.width])?
        };
        if let Some(tag) = tag {
            tape.record_macs(tag, attention_core_macs(b, lq, lk, self.width));
        }
        self.output.forward(tape, p, ctx)
    }
}
