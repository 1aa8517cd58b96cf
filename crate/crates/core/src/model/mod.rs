//! The concept-map architecture and its ablation variants.

pub mod config;
pub mod mask;
pub mod mcm;
pub mod patch;

pub use config::{ModelConfig, Variant};
pub use mask::{masked_count, MaskPlan, MaskShape};
pub use mcm::{edit_concepts, Block, Encoded, EncoderLayer, ForwardOutput, Inference, Mcm, Pass};
pub use patch::{patchify, patchify_batch, unpatchify, unpatchify_batch};
