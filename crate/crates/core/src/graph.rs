//! Commonsense triples, their Levi-graph form, and the graph encoder.
//!
//! Triples are matched against the content words of a whole story, optionally
//! widened by embedding similarity, then turned into an unlabeled bipartite
//! graph in which every relation occurrence becomes its own vertex. The
//! encoder is a stack of transformer blocks whose attention is restricted to
//! graph neighbours (base edges, their reverses, and self-loops).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Bound, FeedForward, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::tree::{tokenize, WordTable};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        if subject.trim().is_empty() || relation.trim().is_empty() || object.trim().is_empty() {
            return Err(Error::Format(format!(
                "triple has an empty field: ({subject:?}, {relation:?}, {object:?})"
            )));
        }
        Ok(Triple {
            subject: subject.trim().to_string(),
            relation: relation.trim().to_string(),
            object: object.trim().to_string(),
        })
    }
}

/// Local triple store read from `subject<TAB>relation<TAB>object` lines.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    pub triples: Vec<Triple>,
}

impl TripleStore {
    pub fn parse(tsv: &str) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, line) in tsv.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!(
                    "triples line {}: expected 3 tab-separated fields, got {}",
                    i + 1,
                    f.len()
                )));
            }
            triples.push(Triple::new(f[0], f[1], f[2])?);
        }
        Ok(TripleStore { triples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Coarse noun/verb lookup used in place of a tagger.
#[derive(Clone, Debug)]
pub struct Lexicon {
    nouns: HashSet<String>,
    verbs: HashSet<String>,
}

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");
const VERB_SUFFIXES: &[&str] = &["ing", "ed"];

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut nouns = HashSet::new();
        let mut verbs = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split('\t').collect::<Vec<_>>().as_slice() {
                [w, "noun"] => {
                    nouns.insert(w.to_lowercase());
                }
                [w, "verb"] => {
                    verbs.insert(w.to_lowercase());
                }
                _ => return Err(Error::Format(format!("lexicon line {}: {line:?}", i + 1))),
            }
        }
        Ok(Lexicon { nouns, verbs })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is well-formed")
    }

    /// Noun or verb by lexicon, capitalization (proper nouns), or a verb
    /// suffix on a word of five letters or more.
    pub fn is_content_word(&self, token: &str) -> bool {
        let lower = token.to_lowercase();
        if self.nouns.contains(&lower) || self.verbs.contains(&lower) {
            return true;
        }
        if !token.chars().any(char::is_alphabetic) {
            return false;
        }
        if token.chars().next().is_some_and(char::is_uppercase) {
            return true;
        }
        lower.len() >= 5 && VERB_SUFFIXES.iter().any(|s| lower.ends_with(s))
    }
}

/// Lowercase content words across all captions of a story.
pub fn content_words<S: AsRef<str>>(captions: &[S], lexicon: &Lexicon) -> BTreeSet<String> {
    captions
        .iter()
        .flat_map(|c| tokenize(c.as_ref()))
        .filter(|t| lexicon.is_content_word(t))
        .map(|t| t.to_lowercase())
        .collect()
}

/// Lowercase tokens of a phrase or relation label (`HasA` -> `has a`).
pub fn phrase_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in text.split(|c: char| c.is_whitespace() || c == '_' || c == '/') {
        let mut cur = String::new();
        let mut prev_lower = false;
        for ch in part.chars() {
            if ch.is_uppercase() && prev_lower && !cur.is_empty() {
                out.push(std::mem::take(&mut cur).to_lowercase());
            }
            prev_lower = ch.is_lowercase();
            cur.push(ch);
        }
        if !cur.is_empty() {
            out.push(cur.to_lowercase());
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Triples whose subject or object mentions a caption noun/verb, or a word
/// whose embedding has cosine similarity above `threshold` with one.
/// Deduplicated, store order, capped at `max_triples`.
pub fn extract_triples<S: AsRef<str>>(
    captions: &[S],
    store: &TripleStore,
    words: &WordTable,
    lexicon: &Lexicon,
    threshold: f64,
    max_triples: Option<usize>,
) -> Vec<Triple> {
    let keywords = content_words(captions, lexicon);
    if keywords.is_empty() {
        return Vec::new();
    }
    let key_vecs: Vec<&[f64]> = keywords.iter().filter_map(|k| words.get(k)).collect();
    let mut related: HashMap<String, bool> = HashMap::new();
    let mut is_related = |tok: &str| -> bool {
        if keywords.contains(tok) {
            return true;
        }
        *related.entry(tok.to_string()).or_insert_with(|| {
            words
                .get(tok)
                .is_some_and(|v| key_vecs.iter().any(|k| cosine(v, k) > threshold))
        })
    };

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in &store.triples {
        if max_triples.is_some_and(|m| out.len() >= m) {
            break;
        }
        let hit = phrase_tokens(&t.subject)
            .iter()
            .chain(phrase_tokens(&t.object).iter())
            .any(|tok| is_related(tok));
        if hit && seen.insert(t.clone()) {
            out.push(t.clone());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VertexKind {
    Entity,
    Relation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub text: String,
    pub kind: VertexKind,
}

/// Bipartite graph of entity and relation vertices. `edges` holds the base
/// directed edges subject→relation and relation→object.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeviGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<(usize, usize)>,
}

impl LeviGraph {
    pub fn from_triples(triples: &[Triple]) -> Self {
        let mut g = LeviGraph::default();
        let mut entity_ids: HashMap<&str, usize> = HashMap::new();
        fn entity<'a>(g: &mut LeviGraph, ids: &mut HashMap<&'a str, usize>, text: &'a str) -> usize {
            *ids.entry(text).or_insert_with(|| {
                g.vertices.push(Vertex {
                    text: text.to_string(),
                    kind: VertexKind::Entity,
                });
                g.vertices.len() - 1
            })
        }
        for t in triples {
            let s = entity(&mut g, &mut entity_ids, &t.subject);
            g.vertices.push(Vertex {
                text: t.relation.clone(),
                kind: VertexKind::Relation,
            });
            let r = g.vertices.len() - 1;
            let o = entity(&mut g, &mut entity_ids, &t.object);
            g.edges.push((s, r));
            g.edges.push((r, o));
        }
        g
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn entity_rows(&self) -> Vec<usize> {
        self.rows_of(VertexKind::Entity)
    }

    pub fn relation_rows(&self) -> Vec<usize> {
        self.rows_of(VertexKind::Relation)
    }

    fn rows_of(&self, kind: VertexKind) -> Vec<usize> {
        self.vertices
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Base edges plus reverse edges plus self-loops, `n x n` row-major.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for i in 0..n {
            m[i * n + i] = true;
        }
        for &(a, b) in &self.edges {
            m[a * n + b] = true;
            m[b * n + a] = true;
        }
        m
    }

    /// Same graph with vertex `i` moved to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut vertices = self.vertices.clone();
        for (i, v) in self.vertices.iter().enumerate() {
            vertices[perm[i]] = v.clone();
        }
        LeviGraph {
            vertices,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "vertices": self.vertices,
            "edges": self.edges,
            "entity_rows": self.entity_rows(),
        })
    }
}

/// Model-independent inputs for encoding one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    /// Mean of known word vectors per vertex: `[n_v, d_word]`.
    pub known: Tensor,
    /// Fraction of the vertex's tokens that are unknown: `[n_v, 1]`.
    pub oov: Tensor,
    pub mask: Vec<bool>,
    pub entity_rows: Vec<usize>,
}

impl GraphInput {
    /// `None` for an empty graph.
    pub fn new(graph: &LeviGraph, words: &WordTable) -> Result<Option<Self>> {
        if graph.is_empty() {
            return Ok(None);
        }
        let d = words.dim();
        let n = graph.len();
        let mut known = vec![0.0; n * d];
        let mut oov = vec![0.0; n];
        for (i, v) in graph.vertices.iter().enumerate() {
            let toks = phrase_tokens(&v.text);
            let count = toks.len().max(1) as f64;
            let mut missing = 0usize;
            for t in &toks {
                match words.get(t) {
                    Some(vec) => {
                        for (k, x) in vec.iter().enumerate() {
                            known[i * d + k] += x / count;
                        }
                    }
                    None => missing += 1,
                }
            }
            if toks.is_empty() {
                missing = 1;
            }
            oov[i] = missing as f64 / count;
        }
        Ok(Some(GraphInput {
            known: Tensor::new(vec![n, d], known)?,
            oov: Tensor::new(vec![n, 1], oov)?,
            mask: graph.attention_mask(),
            entity_rows: graph.entity_rows(),
        }))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GraphBlock {
    pub attn: Attention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct GraphEncoderParams {
    pub input: Linear,
    pub blocks: Vec<GraphBlock>,
}

impl GraphEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_word: usize,
        d_model: usize,
        heads: usize,
        blocks: usize,
        d_ff: usize,
        ln_eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut init = Init { rng, store };
        let input = init.linear(&format!("{prefix}.input"), d_word, d_model);
        let blocks = (0..blocks)
            .map(|b| {
                let p = format!("{prefix}.block{b}");
                Ok(GraphBlock {
                    attn: init.attention(&format!("{p}.attn"), d_model, heads)?,
                    ln_attn: init.layer_norm(&format!("{p}.ln_attn"), d_model, ln_eps),
                    ffn: init.feed_forward(&format!("{p}.ffn"), d_model, d_ff),
                    ln_ffn: init.layer_norm(&format!("{p}.ln_ffn"), d_model, ln_eps),
                })
            })
            .collect::<Result<_>>()?;
        Ok(GraphEncoderParams { input, blocks })
    }
}

/// Encoded vertices (`[n_v, d]`) and the entity rows gathered from them.
#[derive(Clone, Debug)]
pub struct GraphEncoding {
    pub vertices: Var,
    pub entities: Option<Var>,
    /// Attention probabilities per block and head.
    pub attention: Vec<Vec<Var>>,
}

/// Encode a graph. `word_unk` is the learned unknown-word vector shared with
/// the caption encoder.
pub fn graph_encode(
    tape: &mut Tape,
    p: &Bound,
    params: &GraphEncoderParams,
    word_unk: ParamId,
    input: &GraphInput,
) -> Result<GraphEncoding> {
    let known = tape.constant(input.known.clone());
    let oov = tape.constant(input.oov.clone());
    let unk = tape.matmul(oov, p[word_unk])?;
    let x = tape.add(known, unk)?;
    let mut h = params.input.forward(tape, p, x)?;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (a, probs) = b.attn.forward(tape, p, h, h, Some(&input.mask))?;
        attention.push(probs);
        let r = tape.add(h, a)?;
        let h1 = b.ln_attn.forward(tape, p, r)?;
        let f = b.ffn.forward(tape, p, h1)?;
        let r = tape.add(h1, f)?;
        h = b.ln_ffn.forward(tape, p, r)?;
    }
    let entities = if input.entity_rows.is_empty() {
        None
    } else {
        Some(tape.gather_rows(h, std::rc::Rc::new(input.entity_rows.clone()))?)
    };
    Ok(GraphEncoding {
        vertices: h,
        entities,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o).unwrap()
    }

    #[test]
    fn car_triple_retained() {
        let store = TripleStore::parse("car\tHasA\tdoor\nsnow\tIsA\tweather\n").unwrap();
        let words = WordTable::from_entries(2, vec![]).unwrap();
        let got = extract_triples(&["Pororo drives a car"], &store, &words, &Lexicon::bundled(), 0.6, None);
        assert_eq!(got, vec![t("car", "HasA", "door")]);
    }

    #[test]
    fn empty_captions_give_empty_set() {
        let store = TripleStore::parse("car\tHasA\tdoor\n").unwrap();
        let words = WordTable::from_entries(2, vec![]).unwrap();
        let none: [&str; 0] = [];
        assert!(extract_triples(&none, &store, &words, &Lexicon::bundled(), 0.6, None).is_empty());
    }

    #[test]
    fn embedding_expansion() {
        let store = TripleStore::parse("ice\tRelatedTo\tcold\nsun\tIsA\tstar\n").unwrap();
        let words = WordTable::from_entries(
            2,
            vec![
                ("snow".into(), vec![1.0, 0.1]),
                ("ice".into(), vec![0.9, 0.2]),
                ("sun".into(), vec![-1.0, 0.3]),
            ],
        )
        .unwrap();
        let lex = Lexicon::bundled();
        let strict = extract_triples(&["the snow falls"], &store, &words, &lex, 1.0, None);
        assert!(strict.is_empty());
        let loose = extract_triples(&["the snow falls"], &store, &words, &lex, 0.6, None);
        assert_eq!(loose, vec![t("ice", "RelatedTo", "cold")]);
    }

    #[test]
    fn cap_keeps_first() {
        let store = TripleStore::parse("car\tHasA\tdoor\ncar\tHasA\twheel\ncar\tAtLocation\troad\n").unwrap();
        let words = WordTable::from_entries(2, vec![]).unwrap();
        let got = extract_triples(&["a car"], &store, &words, &Lexicon::bundled(), 0.6, Some(2));
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].object, "wheel");
    }

    #[test]
    fn malformed_tsv() {
        assert!(TripleStore::parse("a\tb\n").is_err());
        assert!(TripleStore::parse("a\t\tc\n").is_err());
    }

    #[test]
    fn single_triple_levi() {
        let g = LeviGraph::from_triples(&[t("car", "HasA", "door")]);
        assert_eq!(g.len(), 3);
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
        assert_eq!(g.entity_rows(), vec![0, 2]);
    }

    #[test]
    fn shared_subject_dedups_entity() {
        let g = LeviGraph::from_triples(&[t("car", "HasA", "door"), t("car", "HasA", "wheel")]);
        assert_eq!(g.entity_rows().len(), 3);
        assert_eq!(g.relation_rows().len(), 2);
    }

    #[test]
    fn relation_tokens() {
        assert_eq!(phrase_tokens("HasA"), ["has", "a"]);
        assert_eq!(phrase_tokens("ice cream"), ["ice", "cream"]);
        assert_eq!(phrase_tokens("/r/RelatedTo"), ["r", "related", "to"]);
    }

    #[test]
    fn attention_mask_is_symmetric_with_self_loops() {
        let g = LeviGraph::from_triples(&[t("car", "HasA", "door")]);
        let m = g.attention_mask();
        assert_eq!(m, vec![true, true, false, true, true, true, false, true, true]);
    }
}
