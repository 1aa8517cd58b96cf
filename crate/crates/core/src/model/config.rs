use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::AttnScale;

/// Architecture variants, the full model plus three ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// The decoder never sees the snapshots; `C_L` is appended to the decoder
    /// sequence once and the layers self-attend over it.
    NoBranches,
    /// Concept queries are fixed prototype embeddings instead of learned
    /// tokens; the decoder consumes the concept-branch outputs they produce.
    FixedConcepts,
    /// Every decoder layer consumes the final concepts `C_L`.
    RepetitiveConcepts,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoBranches,
        Variant::FixedConcepts,
        Variant::RepetitiveConcepts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBranches => "no_branches",
            Variant::FixedConcepts => "fixed_concepts",
            Variant::RepetitiveConcepts => "repetitive_concepts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub enc_mlp: usize,
    pub dec_mlp: usize,
    pub concepts: usize,
    /// Prototype width `E_c`; a learned projection is added when it differs
    /// from `width`.
    pub concept_dim: usize,
    pub variant: Variant,
    pub attn_scale: AttnScale,
    pub pos_embed: bool,
}

impl ModelConfig {
    /// Desk-scale default: 24×24 RGB, 6-pixel patches, 16 patches.
    pub fn tiny() -> Self {
        Self {
            image_height: 24,
            image_width: 24,
            channels: 3,
            patch: 6,
            width: 64,
            heads: 4,
            enc_layers: 2,
            enc_mlp: 128,
            dec_mlp: 128,
            concepts: 4,
            concept_dim: 64,
            variant: Variant::Full,
            attn_scale: AttnScale::PerHead,
            pos_embed: true,
        }
    }

    /// 48×48 images, 6-pixel patches, 2 encoder layers, MLP 128, width 512,
    /// 4 heads.
    pub fn small(concepts: usize) -> Self {
        Self {
            image_height: 48,
            image_width: 48,
            channels: 3,
            patch: 6,
            width: 512,
            heads: 4,
            enc_layers: 2,
            enc_mlp: 128,
            dec_mlp: 128,
            concepts,
            concept_dim: 512,
            variant: Variant::Full,
            attn_scale: AttnScale::PerHead,
            pos_embed: true,
        }
    }

    pub fn dec_layers(&self) -> usize {
        self.enc_layers / 2
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("width", self.width),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("enc_mlp", self.enc_mlp),
            ("dec_mlp", self.dec_mlp),
            ("concepts", self.concepts),
            ("concept_dim", self.concept_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            )));
        }
        if !self.enc_layers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder depth {} must be even to pair with a decoder of half the depth",
                self.enc_layers
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("channels", self.channels.to_string()),
            ("patch", self.patch.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers().to_string()),
            ("enc_mlp", self.enc_mlp.to_string()),
            ("dec_mlp", self.dec_mlp.to_string()),
            ("concepts", self.concepts.to_string()),
            ("concept_dim", self.concept_dim.to_string()),
            ("variant", self.variant.to_string()),
            ("attn_scale", self.attn_scale.as_str().to_string()),
            ("pos_embed", if self.pos_embed { "on" } else { "off" }.to_string()),
        ]
    }

    /// Rebuilds a config from `key=value` pairs as written by [`Self::to_pairs`].
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .get(k)
                .ok_or_else(|| Error::Config(format!("missing model key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("model key {k} is not an integer")))
        };
        let cfg = Self {
            image_height: num("image_height")?,
            image_width: num("image_width")?,
            channels: num("channels")?,
            patch: num("patch")?,
            width: num("width")?,
            heads: num("heads")?,
            enc_layers: num("enc_layers")?,
            enc_mlp: num("enc_mlp")?,
            dec_mlp: num("dec_mlp")?,
            concepts: num("concepts")?,
            concept_dim: num("concept_dim")?,
            variant: Variant::parse(get("variant")?)?,
            attn_scale: AttnScale::parse(get("attn_scale")?)?,
            pos_embed: parse_switch(get("pos_embed")?)?,
        };
        if let Some(d) = pairs.get("dec_layers") {
            if d.parse::<usize>().ok() != Some(cfg.dec_layers()) {
                return Err(Error::Config(format!(
                    "dec_layers {d} must be half of enc_layers {}",
                    cfg.enc_layers
                )));
            }
        }
        Ok(cfg)
    }

    /// Names and values of every field that differs from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|((k, a), (_, b))| format!("{k}: {a} != {b}"))
            .collect()
    }
}

pub fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("expected on/off, got {other}"))),
    }
}
