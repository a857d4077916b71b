//! Model-ready story data, per-story pack files, and preprocessing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{phrase_words, mirror_text, StoryRecord};
use crate::error::{Error, Result};
use crate::generate::rgb8_to_image;
use crate::graph::{extract_triples, GraphInput, Lexicon, LeviGraph, Triple, TripleStore};
use crate::losses::mirror_boxes;
use crate::mask::{BoolMatrix, MaskStack};
use crate::martt::FrameInput;
use crate::ppm::Rgb8;
use crate::tensor::Tensor;
use crate::tensorfile::{TensorFile, PACK_MAGIC};
use crate::tree::{LabelVocab, WordTable};

pub const PAD_ID: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub caption: String,
    pub tree: String,
    pub input: FrameInput,
    /// Mean caption word vector, `[1, d_word]`.
    pub sentence: Tensor,
    /// Annotation boxes in confidence order, `[slots, 4]`.
    pub boxes: Tensor,
    /// Phrase token ids per slot, padded to the phrase length.
    pub phrases: Vec<Vec<Option<usize>>>,
    /// Multi-hot character labels, `[1, characters]`.
    pub characters: Tensor,
    /// `[pixels, 3]` in `[-1, 1]`.
    pub image: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoryData {
    pub story_id: String,
    pub frames: Vec<FrameData>,
    pub triples: Vec<Triple>,
    pub graph: LeviGraph,
    pub graph_input: Option<GraphInput>,
}

impl StoryData {
    /// Sentence embeddings stacked, `[T, d_word]`.
    pub fn sentences(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.frames.iter().map(|f| f.sentence.data().to_vec()).collect();
        Tensor::from_rows(&rows).expect("frames share the word dimension")
    }

    pub fn has_images(&self) -> bool {
        self.frames.iter().all(|f| f.image.is_some())
    }
}

/// Shared resources needed to turn records into [`StoryData`].
pub struct Resources<'a> {
    pub cfg: &'a Config,
    pub words: &'a WordTable,
    pub triples: &'a TripleStore,
    pub lexicon: &'a Lexicon,
    pub labels: &'a LabelVocab,
    pub vocab: &'a PhraseVocab,
}

/// Phrase-token vocabulary; id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseVocab {
    pub tokens: Vec<String>,
}

impl PhraseVocab {
    pub fn from_records(records: &[StoryRecord], max_len: usize) -> Self {
        let set: BTreeSet<String> = records
            .iter()
            .flat_map(|r| &r.frames)
            .flat_map(|f| &f.annotations)
            .flat_map(|a| phrase_words(&a.phrase, max_len))
            .collect();
        let mut tokens = vec!["<unk>".to_string()];
        tokens.extend(set);
        PhraseVocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(0, |i| i + 1)
    }
}

/// Build one story. `load_image` resolves a record's `image_path`.
pub fn build_story(
    rec: &StoryRecord,
    res: &Resources,
    load_image: &(dyn Fn(&str) -> Result<Rgb8> + Sync),
) -> Result<StoryData> {
    let cfg = res.cfg;
    let trees = rec.validate(cfg)?;
    let captions: Vec<&str> = rec.frames.iter().map(|f| f.caption.as_str()).collect();
    let triples = extract_triples(
        &captions,
        res.triples,
        res.words,
        res.lexicon,
        cfg.graph.expansion_threshold,
        cfg.graph.max_triples,
    );
    let graph = LeviGraph::from_triples(&triples);
    let graph_input = GraphInput::new(&graph, res.words)?;
    let plen = cfg.generator.phrase_len;
    let mut frames = Vec::with_capacity(rec.frames.len());
    for (k, (f, tree)) in rec.frames.iter().zip(&trees).enumerate() {
        let masks = MaskStack::build(tree, cfg.model.layers, cfg.model.memory_slots, cfg.mask_options())?;
        let input = FrameInput::from_tree(tree, res.words, res.labels, masks, cfg.mask.node_embed_depth)?;
        let sentence = Tensor::new(vec![1, res.words.dim()], res.words.mean_of(&tree.words()))?;
        let mut ann = f.annotations.clone();
        ann.sort_by_key(|a| a.confidence_rank);
        let boxes = Tensor::new(vec![ann.len(), 4], ann.iter().flat_map(|a| a.bbox).collect())?;
        let phrases = ann
            .iter()
            .map(|a| {
                let mut ids: Vec<Option<usize>> =
                    phrase_words(&a.phrase, plen).iter().map(|w| Some(res.vocab.id(w))).collect();
                ids.resize(plen, None);
                ids
            })
            .collect();
        let characters = Tensor::new(
            vec![1, f.character_labels.len()],
            f.character_labels.iter().map(|&v| v as f64).collect(),
        )?;
        let image = match &f.image_path {
            Some(p) => {
                let img = load_image(p)?;
                let side = cfg.generator.image;
                if img.width != side || img.height != side {
                    return Err(Error::Schema {
                        story_id: rec.story_id.clone(),
                        path: format!("frames[{k}].image_path"),
                        msg: format!("image is {}x{}, expected {side}x{side}", img.width, img.height),
                    });
                }
                Some(rgb8_to_image(&img.pixels)?)
            }
            None => None,
        };
        frames.push(FrameData {
            caption: f.caption.clone(),
            tree: f.tree.clone(),
            input,
            sentence,
            boxes,
            phrases,
            characters,
            image,
        });
    }
    Ok(StoryData {
        story_id: rec.story_id.clone(),
        frames,
        triples,
        graph,
        graph_input,
    })
}

/// Horizontally mirrored copy of a record: direction words swapped and boxes
/// mirrored. Images are mirrored by the loader.
pub fn mirror_record(rec: &StoryRecord) -> StoryRecord {
    let mut out = rec.clone();
    out.story_id = format!("{}.mirror", rec.story_id);
    for f in &mut out.frames {
        f.caption = mirror_text(&f.caption);
        f.tree = mirror_text(&f.tree);
        for a in &mut f.annotations {
            let m = mirror_boxes(&Tensor::new(vec![1, 4], a.bbox.to_vec()).expect("4 values"));
            a.bbox.copy_from_slice(m.data());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrameMeta {
    caption: String,
    tree: String,
    chains: Vec<Vec<usize>>,
    layers: usize,
    has_image: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PackMeta {
    story_id: String,
    memory_slots: usize,
    frames: Vec<FrameMeta>,
    triples: Vec<Triple>,
    graph: LeviGraph,
}

fn bool_tensor(m: &BoolMatrix) -> Result<Tensor> {
    Tensor::new(
        vec![m.rows, m.cols],
        m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
}

fn tensor_bools(t: &Tensor) -> Result<BoolMatrix> {
    let (rows, cols) = (t.rows(), t.cols());
    let data = t
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Format(format!("mask value {v} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    Ok(BoolMatrix { rows, cols, data })
}

impl StoryData {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let meta = PackMeta {
            story_id: self.story_id.clone(),
            memory_slots: self.frames.first().map_or(0, |f| f.input.masks.memory_slots),
            frames: self
                .frames
                .iter()
                .map(|f| FrameMeta {
                    caption: f.caption.clone(),
                    tree: f.tree.clone(),
                    chains: f.input.chains.clone(),
                    layers: f.input.masks.num_layers(),
                    has_image: f.image.is_some(),
                })
                .collect(),
            triples: self.triples.clone(),
            graph: self.graph.clone(),
        };
        let mut file = TensorFile::new(serde_json::to_value(&meta)?);
        for (k, f) in self.frames.iter().enumerate() {
            file.push(format!("frame{k}.words"), f.input.words.clone());
            file.push(format!("frame{k}.oov"), f.input.oov.clone());
            for (l, m) in f.input.masks.layers.iter().enumerate() {
                file.push(format!("frame{k}.mask{l}"), bool_tensor(m)?);
            }
            file.push(format!("frame{k}.sentence"), f.sentence.clone());
            file.push(format!("frame{k}.boxes"), f.boxes.clone());
            let plen = f.phrases.first().map_or(1, Vec::len).max(1);
            let ids = f
                .phrases
                .iter()
                .flat_map(|p| p.iter().map(|id| id.map_or(PAD_ID, |i| i as f64)))
                .collect();
            file.push(format!("frame{k}.phrases"), Tensor::new(vec![f.phrases.len(), plen], ids)?);
            file.push(format!("frame{k}.characters"), f.characters.clone());
            if let Some(img) = &f.image {
                file.push(format!("frame{k}.image"), img.clone());
            }
        }
        if let Some(g) = &self.graph_input {
            file.push("graph.known", g.known.clone());
            file.push("graph.oov", g.oov.clone());
        }
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: PackMeta = serde_json::from_value(file.meta.clone())?;
        let mut frames = Vec::with_capacity(meta.frames.len());
        for (k, fm) in meta.frames.iter().enumerate() {
            let words = file.get(&format!("frame{k}.words"))?.clone();
            let layers = (0..fm.layers)
                .map(|l| tensor_bools(file.get(&format!("frame{k}.mask{l}"))?))
                .collect::<Result<Vec<_>>>()?;
            let masks = MaskStack {
                memory_slots: meta.memory_slots,
                caption_len: words.rows(),
                layers,
            };
            let phrases = file
                .get(&format!("frame{k}.phrases"))?
                .data()
                .chunks(file.get(&format!("frame{k}.phrases"))?.cols())
                .map(|row| {
                    row.iter()
                        .map(|&v| if v < 0.0 { None } else { Some(v as usize) })
                        .collect()
                })
                .collect();
            frames.push(FrameData {
                caption: fm.caption.clone(),
                tree: fm.tree.clone(),
                input: FrameInput {
                    words,
                    oov: file.get(&format!("frame{k}.oov"))?.clone(),
                    chains: fm.chains.clone(),
                    masks,
                },
                sentence: file.get(&format!("frame{k}.sentence"))?.clone(),
                boxes: file.get(&format!("frame{k}.boxes"))?.clone(),
                phrases,
                characters: file.get(&format!("frame{k}.characters"))?.clone(),
                image: if fm.has_image {
                    Some(file.get(&format!("frame{k}.image"))?.clone())
                } else {
                    None
                },
            });
        }
        let graph_input = if meta.graph.is_empty() {
            None
        } else {
            Some(GraphInput {
                known: file.get("graph.known")?.clone(),
                oov: file.get("graph.oov")?.clone(),
                mask: meta.graph.attention_mask(),
                entity_rows: meta.graph.entity_rows(),
            })
        };
        Ok(StoryData {
            story_id: meta.story_id,
            frames,
            triples: meta.triples,
            graph: meta.graph,
            graph_input,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub story_id: String,
    pub file: String,
    pub caption_lens: Vec<usize>,
    pub vertices: usize,
    pub entities: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab: PhraseVocab,
    pub d_word: usize,
    pub layers: usize,
    pub memory_slots: usize,
    pub slots: usize,
    pub phrase_len: usize,
    pub stories: Vec<ManifestEntry>,
}

/// Preprocessed corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: PhraseVocab,
    pub stories: Vec<StoryData>,
}

impl Dataset {
    /// Validate and convert records in parallel; output order follows input.
    pub fn build(
        records: &[StoryRecord],
        cfg: &Config,
        words: &WordTable,
        triples: &TripleStore,
        lexicon: &Lexicon,
        load_image: &(dyn Fn(&str) -> Result<Rgb8> + Sync),
    ) -> Result<Self> {
        if words.dim() != cfg.model.d_word {
            return Err(Error::Config(format!(
                "embeddings have dimension {}, config d_word is {}",
                words.dim(),
                cfg.model.d_word
            )));
        }
        let mut seen = HashSet::new();
        for r in records {
            if !seen.insert(r.story_id.as_str()) {
                return Err(Error::Schema {
                    story_id: r.story_id.clone(),
                    path: "story_id".into(),
                    msg: "duplicate story id".into(),
                });
            }
        }
        let mut all: Vec<(StoryRecord, bool)> = records.iter().map(|r| (r.clone(), false)).collect();
        if cfg.data.mirror_augment {
            all.extend(records.iter().map(|r| (mirror_record(r), true)));
        }
        let src: Vec<StoryRecord> = all.iter().map(|(r, _)| r.clone()).collect();
        let vocab = PhraseVocab::from_records(&src, cfg.generator.phrase_len);
        let labels = LabelVocab::ptb();
        let res = Resources {
            cfg,
            words,
            triples,
            lexicon,
            labels: &labels,
            vocab: &vocab,
        };
        let stories = all
            .par_iter()
            .map(|(r, mirrored)| {
                if *mirrored {
                    build_story(r, &res, &|p: &str| load_image(p).map(|i| i.mirrored()))
                } else {
                    build_story(r, &res, load_image)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { vocab, stories })
    }

    pub fn manifest(&self, cfg: &Config) -> Manifest {
        Manifest {
            vocab: self.vocab.clone(),
            d_word: cfg.model.d_word,
            layers: cfg.model.layers,
            memory_slots: cfg.model.memory_slots,
            slots: cfg.generator.slots,
            phrase_len: cfg.generator.phrase_len,
            stories: self
                .stories
                .iter()
                .map(|s| ManifestEntry {
                    story_id: s.story_id.clone(),
                    file: pack_name(&s.story_id),
                    caption_lens: s.frames.iter().map(|f| f.input.len()).collect(),
                    vertices: s.graph.len(),
                    entities: s.graph.entity_rows().len(),
                })
                .collect(),
        }
    }

    /// Write one pack per story plus `manifest.json`.
    pub fn write(&self, cfg: &Config, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = self
            .stories
            .par_iter()
            .map(|s| s.to_tensor_file()?.to_bytes(PACK_MAGIC))
            .collect::<Result<Vec<_>>>()?;
        for (s, b) in self.stories.iter().zip(bytes) {
            let p = dir.join(pack_name(&s.story_id));
            std::fs::write(&p, b).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest(cfg))?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<(Manifest, Self)> {
        let p = dir.join("manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let stories = manifest
            .stories
            .par_iter()
            .map(|e| read_pack(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            vocab: manifest.vocab.clone(),
            stories,
        };
        Ok((manifest, ds))
    }
}

pub fn pack_name(story_id: &str) -> String {
    format!("{story_id}.svpack")
}

pub fn read_pack(path: &Path) -> Result<StoryData> {
    StoryData::from_tensor_file(&TensorFile::read(path, PACK_MAGIC)?)
}

/// Image loader resolving paths relative to `base`.
pub fn file_images(base: PathBuf) -> impl Fn(&str) -> Result<Rgb8> + Sync {
    move |rel: &str| Rgb8::read(&base.join(rel))
}

/// Image loader over an in-memory map.
pub fn memory_images(images: &BTreeMap<String, Rgb8>) -> impl Fn(&str) -> Result<Rgb8> + Sync + '_ {
    move |rel: &str| {
        images
            .get(rel)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no image {rel}")))
    }
}

/// Input files for [`preprocess`].
pub struct PreprocessInputs<'a> {
    pub stories: &'a Path,
    pub embeddings: &'a Path,
    pub triples: &'a Path,
    /// Bundled lexicon when `None`.
    pub lexicon: Option<&'a Path>,
}

/// Read inputs, build the dataset and write packs to `out`.
pub fn preprocess(cfg: &Config, inputs: &PreprocessInputs, out: &Path) -> Result<Dataset> {
    let records = crate::data::load_stories(inputs.stories)?;
    let words = WordTable::load(inputs.embeddings)?;
    let triples = TripleStore::load(inputs.triples)?;
    let lexicon = match inputs.lexicon {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Lexicon::parse(&text)?
        }
        None => Lexicon::bundled(),
    };
    let base = inputs.stories.parent().map(Path::to_path_buf).unwrap_or_default();
    let ds = Dataset::build(&records, cfg, &words, &triples, &lexicon, &file_images(base))?;
    ds.write(cfg, out)?;
    Ok(ds)
}

/// Look up a story by id.
pub fn find_story<'a>(stories: &'a [StoryData], id: &str) -> Result<&'a StoryData> {
    let index: HashMap<&str, &StoryData> = stories.iter().map(|s| (s.story_id.as_str(), s)).collect();
    index
        .get(id)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("no story with id {id:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::nn::sub_rng;

    fn build(cfg: &Config, n: usize) -> Dataset {
        let corpus = synthetic_corpus(cfg, n, &mut sub_rng(5, 0));
        let words = WordTable::parse(&corpus.embeddings).unwrap();
        let triples = TripleStore::parse(&corpus.triples).unwrap();
        let images = memory_images(&corpus.images);
        Dataset::build(&corpus.stories, cfg, &words, &triples, &Lexicon::bundled(), &images).unwrap()
    }

    #[test]
    fn pack_round_trip() {
        let cfg = Config::demo();
        let ds = build(&cfg, 2);
        for s in &ds.stories {
            assert!(s.has_images());
            assert!(!s.triples.is_empty());
            let back = StoryData::from_tensor_file(&s.to_tensor_file().unwrap()).unwrap();
            assert_eq!(&back, s);
        }
    }

    #[test]
    fn vocab_ids() {
        let cfg = Config::demo();
        let ds = build(&cfg, 2);
        assert_eq!(ds.vocab.tokens[0], "<unk>");
        assert_eq!(ds.vocab.id("zzz-not-there"), 0);
        let circle = ds.vocab.id("background");
        assert_eq!(ds.vocab.tokens[circle], "background");
    }

    #[test]
    fn mirror_augment_doubles() {
        let mut cfg = Config::demo();
        cfg.data.mirror_augment = true;
        let ds = build(&cfg, 2);
        assert_eq!(ds.stories.len(), 4);
        assert_eq!(ds.stories[2].story_id, "story0000.mirror");
        let a = &ds.stories[0].frames[0];
        let b = &ds.stories[2].frames[0];
        assert_eq!(b.boxes, mirror_boxes(&a.boxes));
    }
}
