//! The full story-visualization model: caption encoder, graph encoder,
//! generator with dense-captioning heads, and the discriminators.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::generate::{
    cond_augment, densecap_heads, encode_regions, generate_frame, Conditioning, DenseCaptions, FrameOutput,
    GeneratorParams,
};
use crate::graph::{graph_encode, GraphEncoderParams};
use crate::losses::{
    bbox_loss_mirror, caption_ce, generator_gan_losses, kl_loss, story_word_loss, DiscriminatorParams, GanStory,
    LossVars,
};
use crate::martt::{encode_story, MarttParams};
use crate::nn::{sub_rng, Bound, Dropout, ParamStore};
use crate::pack::StoryData;
use crate::tensor::{Tape, Tensor, Var};
use crate::tensorfile::{TensorFile, CHECKPOINT_MAGIC};
use crate::tree::LabelVocab;

/// Random streams derived from the master seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const DATA_ORDER: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
}

#[derive(Clone, Debug)]
pub struct StoryModel {
    pub cfg: Config,
    pub phrase_vocab: usize,
    /// Generator-side parameters (encoders, generator, heads).
    pub g_store: ParamStore,
    pub martt: MarttParams,
    pub graph: GraphEncoderParams,
    pub gen: GeneratorParams,
    pub d_store: ParamStore,
    pub disc: DiscriminatorParams,
}

impl StoryModel {
    pub fn new(cfg: &Config, phrase_vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = sub_rng(cfg.seed, streams::INIT);
        let mut g_store = ParamStore::new();
        let labels = LabelVocab::ptb();
        let martt = MarttParams::new(&mut g_store, "martt", cfg.martt_dims(labels.len()), &mut rng)?;
        let m = &cfg.model;
        let graph = GraphEncoderParams::new(
            &mut g_store,
            "graph",
            m.d_word,
            m.d_model,
            cfg.graph.heads,
            cfg.graph.blocks,
            m.d_ff,
            m.ln_eps,
            &mut rng,
        )?;
        let gen = GeneratorParams::new(&mut g_store, "gen", cfg.generator_dims(phrase_vocab), &mut rng)?;
        let mut d_store = ParamStore::new();
        let disc = DiscriminatorParams::new(&mut d_store, "disc", cfg.discriminator_dims(), &mut rng)?;
        Ok(StoryModel {
            cfg: cfg.clone(),
            phrase_vocab,
            g_store,
            martt,
            graph,
            gen,
            d_store,
            disc,
        })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.model.d_model
    }

    /// Checkpoint with both parameter stores and the configuration.
    pub fn to_checkpoint(&self, step: usize) -> TensorFile {
        let mut f = TensorFile::new(serde_json::json!({
            "config": self.cfg.to_toml(),
            "phrase_vocab": self.phrase_vocab,
            "step": step,
        }));
        for (name, t) in self.g_store.iter().chain(self.d_store.iter()) {
            f.push(name, t.clone());
        }
        f
    }

    pub fn save(&self, path: &std::path::Path, step: usize) -> Result<()> {
        self.to_checkpoint(step).write(path, CHECKPOINT_MAGIC)
    }

    pub fn from_checkpoint(file: &TensorFile) -> Result<Self> {
        let text = file
            .meta
            .get("config")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("checkpoint has no config".into()))?;
        let vocab = file
            .meta
            .get("phrase_vocab")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("checkpoint has no phrase_vocab".into()))?;
        let cfg = Config::parse(text)?;
        let mut model = StoryModel::new(&cfg, vocab as usize)?;
        let (g, d): (Vec<_>, Vec<_>) = file.arrays.iter().cloned().partition(|(n, _)| !n.starts_with("disc."));
        if g.len() != model.g_store.len() || d.len() != model.d_store.len() {
            return Err(Error::Format("checkpoint parameter count does not match the model".into()));
        }
        model.g_store.load_from(&g)?;
        model.d_store.load_from(&d)?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&TensorFile::read(path, CHECKPOINT_MAGIC)?)
    }
}

/// Everything the generator produces for one story.
#[derive(Clone, Debug)]
pub struct StoryPass {
    pub cond: Conditioning,
    pub captions: Vec<Var>,
    pub entities: Option<Var>,
    pub frames: Vec<FrameOutput>,
    /// Region features of each generated frame.
    pub regions: Vec<Var>,
    pub dense: Vec<DenseCaptions>,
}

pub fn forward_story(
    tape: &mut Tape,
    gp: &Bound,
    model: &StoryModel,
    story: &StoryData,
    noise: &Tensor,
    dropout: &mut Dropout,
) -> Result<StoryPass> {
    let cond = cond_augment(tape, gp, &model.gen, &story.sentences(), noise)?;
    let inputs: Vec<_> = story.frames.iter().map(|f| f.input.clone()).collect();
    let captions = encode_story(tape, gp, &model.martt, &inputs, cond.h0, dropout)?;
    let entities = match &story.graph_input {
        Some(g) => graph_encode(tape, gp, &model.graph, model.martt.word_unk, g)?.entities,
        None => None,
    };
    let mut frames = Vec::with_capacity(captions.len());
    let mut regions = Vec::with_capacity(captions.len());
    let mut dense = Vec::with_capacity(captions.len());
    for &c in &captions {
        let out = generate_frame(tape, gp, &model.gen, cond.h0, c, entities)?;
        let r = encode_regions(tape, gp, &model.gen, out.image)?;
        dense.push(densecap_heads(tape, gp, &model.gen, r)?);
        regions.push(r);
        frames.push(out);
    }
    Ok(StoryPass {
        cond,
        captions,
        entities,
        frames,
        regions,
        dense,
    })
}

/// Constant tape values describing a story for the discriminators.
pub struct GanInputs {
    pub images: Vec<Var>,
    pub sentences: Vec<Var>,
    pub story: Var,
    pub h0: Var,
}

pub fn sentence_vars(tape: &mut Tape, story: &StoryData) -> Result<(Vec<Var>, Var)> {
    let sentences: Vec<Var> = story.frames.iter().map(|f| tape.constant(f.sentence.clone())).collect();
    let all = tape.constant(story.sentences());
    let mean = tape.mean_rows(all)?;
    Ok((sentences, mean))
}

/// All generator loss terms for one story pass.
pub fn generator_losses(
    tape: &mut Tape,
    dp: &Bound,
    model: &StoryModel,
    story: &StoryData,
    pass: &StoryPass,
) -> Result<LossVars> {
    let kl = kl_loss(tape, pass.cond.mu, pass.cond.logvar)?;

    let mut bbox_terms = Vec::new();
    let mut cap_terms = Vec::new();
    for (f, d) in story.frames.iter().zip(&pass.dense) {
        bbox_terms.push(bbox_loss_mirror(tape, d.boxes, &f.boxes)?);
        cap_terms.push(caption_ce(tape, d.logits, &f.phrases)?);
    }
    let bbox = mean_vars(tape, &bbox_terms)?;
    let caption = mean_vars(tape, &cap_terms)?;

    let tokens: Vec<Var> = pass.frames.iter().map(|f| f.tokens).collect();
    let word = story_word_loss(tape, &pass.regions, &tokens)?;

    let (sentences, story_emb) = sentence_vars(tape, story)?;
    let images: Vec<Var> = pass.frames.iter().map(|f| f.image).collect();
    let chars: Vec<Tensor> = story.frames.iter().map(|f| f.characters.clone()).collect();
    let gan = generator_gan_losses(
        tape,
        dp,
        &model.disc,
        &GanStory {
            images: &images,
            sentences: &sentences,
            story: story_emb,
            h0: pass.cond.h0,
            characters: &chars,
        },
    )?;
    Ok(LossVars {
        kl,
        img: gan.img,
        story: gan.story,
        bbox,
        caption,
        word,
    })
}

fn mean_vars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::graph::{Lexicon, TripleStore};
    use crate::pack::{memory_images, Dataset};
    use crate::tree::WordTable;

    pub(crate) fn tiny_config() -> Config {
        let mut c = Config::demo();
        c.model.d_model = 12;
        c.model.heads = 2;
        c.model.d_ff = 16;
        c.model.d_node = 4;
        c.model.d_word = 6;
        c.model.layers = 2;
        c.graph.heads = 2;
        c.graph.blocks = 1;
        c.generator.d_align = 8;
        c.generator.image = 16;
        c.generator.grid = 4;
        c.generator.channels = 3;
        c.generator.slots = 3;
        c.generator.story_len = 2;
        c.discriminator.pool = 4;
        c.discriminator.hidden = 5;
        c
    }

    #[test]
    fn story_pass_and_losses_are_finite() {
        let cfg = tiny_config();
        let corpus = synthetic_corpus(&cfg, 1, &mut sub_rng(0, 9));
        let words = WordTable::parse(&corpus.embeddings).unwrap();
        let triples = TripleStore::parse(&corpus.triples).unwrap();
        let images = memory_images(&corpus.images);
        let ds = Dataset::build(&corpus.stories, &cfg, &words, &triples, &Lexicon::bundled(), &images).unwrap();
        let model = StoryModel::new(&cfg, ds.vocab.len()).unwrap();
        let mut tape = Tape::new();
        let gp = model.g_store.bind(&mut tape, true);
        let dp = model.d_store.bind(&mut tape, false);
        let noise = Tensor::zeros(&[1, 12]);
        let pass = forward_story(&mut tape, &gp, &model, &ds.stories[0], &noise, &mut Dropout::off()).unwrap();
        let losses = generator_losses(&mut tape, &dp, &model, &ds.stories[0], &pass).unwrap();
        let values = losses.values(&tape);
        assert!(values.is_finite(), "{values:?}");
        let total = losses.total(&mut tape, cfg.loss).unwrap();
        let grads = tape.backward(total).unwrap();
        let g = gp.gradients(&tape, &grads);
        assert!(g.iter().all(Tensor::is_finite));
        assert!(g[model.martt.labels.index()].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let model = StoryModel::new(&cfg, 9).unwrap();
        let back = StoryModel::from_checkpoint(&model.to_checkpoint(3)).unwrap();
        assert_eq!(back.g_store.tensors(), model.g_store.tensors());
        assert_eq!(back.d_store.tensors(), model.d_store.tensors());
    }
}
