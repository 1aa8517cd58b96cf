//! Parameterized layers, the parameter registry and the optimizer.

pub mod adamw;
pub mod attention;
pub mod layers;
pub mod registry;

pub use adamw::{AdamWConfig, AdamWState};
pub use attention::{attention_core_macs, AttnScale, MultiHeadAttention};
pub use layers::{FeedForward, LayerNorm, LinearLayer};
pub use registry::{Bound, Init, Param, ParamId, ParamRegistry};
