//! Run configuration, loaded from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::GeneratorDims;
use crate::losses::{DiscriminatorDims, LossWeights};
use crate::mask::MaskOptions;
use crate::martt::MarttDims;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub mask: MaskConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub memory_slots: usize,
    pub d_node: usize,
    pub d_word: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub blocks: usize,
    pub heads: usize,
    pub expansion_threshold: f64,
    pub max_triples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub final_layer_full: bool,
    pub node_embed_depth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_align: usize,
    pub grid: usize,
    pub image: usize,
    pub channels: usize,
    pub slots: usize,
    pub phrase_len: usize,
    pub story_len: usize,
    pub characters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub pool: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub stories: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub g_batch: usize,
    pub d_batch: usize,
    /// Generator updates per discriminator update.
    pub g_per_d: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub stories: Option<String>,
    pub embeddings: Option<String>,
    pub triples: Option<String>,
    pub lexicon: Option<String>,
    /// Add a horizontally mirrored copy of every story with images.
    pub mirror_augment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 192,
            heads: 6,
            layers: 4,
            memory_slots: 3,
            d_node: 50,
            d_word: 300,
            d_ff: 768,
            max_len: 64,
            ln_eps: 1e-12,
            dropout: 0.1,
        }
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            blocks: 2,
            heads: 6,
            expansion_threshold: 0.6,
            max_triples: Some(32),
        }
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            final_layer_full: true,
            node_embed_depth: None,
        }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_align: 192,
            grid: 8,
            image: 64,
            channels: 16,
            slots: 10,
            phrase_len: 4,
            story_len: 5,
            characters: 9,
        }
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { pool: 8, hidden: 64 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            stories: 50,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            g_batch: 8,
            d_batch: 4,
            g_per_d: 2,
        }
    }
}

impl Config {
    /// Reduced widths for desk-scale training runs; every other setting keeps
    /// its default.
    pub fn demo() -> Self {
        let mut c = Config::default();
        c.model.d_model = 48;
        c.model.d_ff = 96;
        c.model.d_node = 16;
        c.model.d_word = 32;
        c.model.dropout = 0.0;
        c.generator.d_align = 48;
        c.generator.channels = 8;
        c.discriminator.hidden = 32;
        c.train.lr = 2e-3;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} does not fit a TOML integer (max 2^63 - 1)", self.seed));
        }
        if m.d_model == 0 || m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", m.d_model, m.heads));
        }
        if m.layers == 0 || m.d_word == 0 || m.d_node == 0 || m.d_ff == 0 || m.max_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", m.dropout));
        }
        if !(m.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        let g = &self.graph;
        if g.heads == 0 || !m.d_model.is_multiple_of(g.heads) {
            return bad(format!("d_model {} must be a multiple of graph heads {}", m.d_model, g.heads));
        }
        if !(-1.0..=1.0).contains(&g.expansion_threshold) {
            return bad("expansion_threshold must be a cosine in [-1, 1]".into());
        }
        if self.mask.node_embed_depth == Some(0) {
            return bad("node_embed_depth must be at least 1".into());
        }
        self.generator_dims(1).validate()?;
        if self.generator.d_align == 0 || self.generator.channels == 0 || self.generator.characters == 0 {
            return bad("generator dimensions must be positive".into());
        }
        let d = &self.discriminator;
        if d.pool == 0 || !self.generator.image.is_multiple_of(d.pool) || d.hidden == 0 {
            return bad(format!("image {} must be a multiple of pool {}", self.generator.image, d.pool));
        }
        if self.loss.bbox < 0.0 || self.loss.caption < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        let t = &self.train;
        if t.g_batch == 0 || t.d_batch == 0 || t.g_per_d == 0 || t.stories == 0 {
            return bad("batch sizes, g_per_d and stories must be positive".into());
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("invalid optimizer settings".into());
        }
        Ok(())
    }

    pub fn mask_options(&self) -> MaskOptions {
        MaskOptions {
            final_layer_full: self.mask.final_layer_full,
            ..Default::default()
        }
    }

    pub fn martt_dims(&self, n_labels: usize) -> MarttDims {
        let m = &self.model;
        MarttDims {
            d_word: m.d_word,
            d_node: m.d_node,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            memory_slots: m.memory_slots,
            d_ff: m.d_ff,
            max_len: m.max_len,
            n_labels,
            ln_eps: m.ln_eps,
        }
    }

    pub fn generator_dims(&self, phrase_vocab: usize) -> GeneratorDims {
        let g = &self.generator;
        GeneratorDims {
            d_model: self.model.d_model,
            d_sent: self.model.d_word,
            story_len: g.story_len,
            d_align: g.d_align,
            grid: g.grid,
            image: g.image,
            channels: g.channels,
            slots: g.slots,
            phrase_len: g.phrase_len,
            phrase_vocab,
        }
    }

    pub fn discriminator_dims(&self) -> DiscriminatorDims {
        DiscriminatorDims {
            image: self.generator.image,
            pool: self.discriminator.pool,
            hidden: self.discriminator.hidden,
            d_sent: self.model.d_word,
            d_model: self.model.d_model,
            story_len: self.generator.story_len,
            characters: self.generator.characters,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for c in [Config::default(), Config::demo()] {
            c.validate().unwrap();
            assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn full_size_defaults() {
        let c = Config::default();
        assert_eq!((c.model.d_model, c.model.heads, c.model.layers), (192, 6, 4));
        assert_eq!((c.model.memory_slots, c.model.d_node, c.model.d_word), (3, 50, 300));
        assert_eq!(c.model.ln_eps, 1e-12);
        assert_eq!((c.generator.image, c.generator.slots, c.generator.characters), (64, 10, 9));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(Config::parse("[model]\nwidth = 3\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = Config::parse("seed = 7\n[model]\nd_model = 12\nheads = 3\n[graph]\nheads = 2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.d_model, 12);
        assert_eq!(c.model.layers, 4);
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(Config::parse("[model]\nd_model = 10\n").is_err());
    }
}
