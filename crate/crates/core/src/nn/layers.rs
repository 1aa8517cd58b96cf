use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::registry::{Bound, Init, ParamId, ParamRegistry};
use crate::tensor::Real;

pub const WEIGHT_STD: f64 = 0.02;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: reg.add(
                format!("{prefix}.weight"),
                &[in_dim, out_dim],
                Init::TruncNormal { std: WEIGHT_STD },
            )?,
            bias: reg.add(format!("{prefix}.bias"), &[out_dim], Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.in_dim) {
            return Err(Error::dim("linear", tape.shape(x), &[self.in_dim, self.out_dim]));
        }
        let xw = tape.matmul(x, p.var(self.weight))?;
        tape.add(xw, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: reg.add(format!("{prefix}.gain"), &[width], Init::Ones)?,
            bias: reg.add(format!("{prefix}.bias"), &[width], Init::Zeros)?,
            eps: Self::EPS,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), self.eps)
    }
}

/// Two linear layers with an exact GELU in between, `E → F → E`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl FeedForward {
    pub fn new<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: LinearLayer::new(reg, &format!("{prefix}.fc1"), width, hidden)?,
            fc2: LinearLayer::new(reg, &format!("{prefix}.fc2"), hidden, width)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}
