//! Story records (JSONL), schema validation, and the synthetic corpus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ppm::Rgb8;
use crate::tree::{tokenize, ConstituencyTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    pub story_id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub caption: String,
    pub tree: String,
    pub annotations: Vec<Annotation>,
    pub character_labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    /// `(x1, y1, x2, y2)`, normalized to `[0, 1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub phrase: String,
    pub confidence_rank: u32,
}

/// Parse a JSONL story file; blank lines are skipped.
pub fn parse_stories(text: &str) -> Result<Vec<StoryRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Schema {
            story_id: format!("<line {}>", i + 1),
            path: String::new(),
            msg: e.to_string(),
        })?;
        let id = value
            .get("story_id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("<line {}>", i + 1), str::to_string);
        let rec: StoryRecord = serde_json::from_value(value).map_err(|e| Error::Schema {
            story_id: id,
            path: String::new(),
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_stories(path: &Path) -> Result<Vec<StoryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stories(&text)
}

pub fn stories_to_jsonl(stories: &[StoryRecord]) -> String {
    let mut out = String::new();
    for s in stories {
        out.push_str(&serde_json::to_string(s).expect("records serialize"));
        out.push('\n');
    }
    out
}

impl StoryRecord {
    fn err(&self, path: impl Into<String>, msg: impl Into<String>) -> Error {
        Error::Schema {
            story_id: self.story_id.clone(),
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Check the record against the configuration and return the parsed
    /// trees, one per frame.
    pub fn validate(&self, cfg: &Config) -> Result<Vec<ConstituencyTree>> {
        let id_ok = !self.story_id.is_empty()
            && !self.story_id.starts_with('.')
            && self
                .story_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if !id_ok {
            return Err(self.err("story_id", "must be non-empty ASCII letters, digits, '_', '-' or '.'"));
        }
        let t = cfg.generator.story_len;
        if self.frames.len() != t {
            return Err(self.err("frames", format!("expected {t} frames, got {}", self.frames.len())));
        }
        let mut trees = Vec::with_capacity(t);
        for (k, f) in self.frames.iter().enumerate() {
            let p = |s: &str| format!("frames[{k}].{s}");
            let tree = ConstituencyTree::parse(&f.tree).map_err(|e| self.err(p("tree"), e.to_string()))?;
            let tokens = tokenize(&f.caption);
            let leaves = tree.words();
            if leaves != tokens {
                return Err(self.err(
                    p("tree"),
                    format!("leaves {leaves:?} do not match caption tokens {tokens:?}"),
                ));
            }
            if leaves.len() > cfg.model.max_len {
                return Err(self.err(
                    p("caption"),
                    format!("{} tokens exceeds max_len {}", leaves.len(), cfg.model.max_len),
                ));
            }
            let k_slots = cfg.generator.slots;
            if f.annotations.len() != k_slots {
                return Err(self.err(
                    p("annotations"),
                    format!("expected {k_slots} slots, got {}", f.annotations.len()),
                ));
            }
            let mut ranks: Vec<u32> = f.annotations.iter().map(|a| a.confidence_rank).collect();
            ranks.sort_unstable();
            ranks.dedup();
            if ranks.len() != k_slots {
                return Err(self.err(p("annotations"), "confidence_rank values must be distinct"));
            }
            for (j, a) in f.annotations.iter().enumerate() {
                let b = a.bbox;
                if b.iter().any(|v| !(0.0..=1.0).contains(v)) || !(b[0] < b[2] && b[1] < b[3]) {
                    return Err(self.err(
                        format!("frames[{k}].annotations[{j}].box"),
                        format!("{b:?} must lie in [0, 1] with x1 < x2 and y1 < y2"),
                    ));
                }
                if tokenize(&a.phrase).is_empty() {
                    return Err(self.err(format!("frames[{k}].annotations[{j}].phrase"), "empty phrase"));
                }
            }
            let c = cfg.generator.characters;
            if f.character_labels.len() != c || f.character_labels.iter().any(|&v| v > 1) {
                return Err(self.err(p("character_labels"), format!("expected {c} entries of 0 or 1")));
            }
            trees.push(tree);
        }
        Ok(trees)
    }
}

/// Lowercase phrase tokens, truncated to `max_len`.
pub fn phrase_words(phrase: &str, max_len: usize) -> Vec<String> {
    tokenize(phrase)
        .into_iter()
        .take(max_len)
        .map(|t| t.to_lowercase())
        .collect()
}

/// Swap horizontal direction words in a caption or tree.
pub fn mirror_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        let swapped = match word.as_str() {
            "left" => "right",
            "right" => "left",
            "Left" => "Right",
            "Right" => "Left",
            w => w,
        };
        out.push_str(swapped);
        word.clear();
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

pub const CHARACTERS: [&str; 9] = [
    "Pororo", "Crong", "Eddy", "Loopy", "Poby", "Petty", "Harry", "Rody", "Tongtong",
];
const CHARACTER_COLORS: [[u8; 3]; 9] = [
    [40, 90, 200],
    [60, 170, 60],
    [230, 140, 30],
    [230, 120, 170],
    [250, 250, 250],
    [120, 60, 170],
    [200, 200, 40],
    [90, 90, 90],
    [210, 40, 40],
];
const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 30, 30]),
    ("green", [30, 170, 50]),
    ("blue", [40, 60, 220]),
    ("yellow", [240, 220, 40]),
    ("purple", [140, 50, 180]),
    ("orange", [245, 140, 20]),
];
const BACKGROUNDS: [(&str, [u8; 3]); 3] = [("white", [238, 238, 238]), ("gray", [150, 150, 150]), ("pale", [200, 225, 245])];
const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const VERBS: [&str; 3] = ["sees", "holds", "moves"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn tree(self, object: &str) -> String {
        match self {
            Relation::LeftOf => format!("(PP (RB left) (IN of) {object})"),
            Relation::RightOf => format!("(PP (RB right) (IN of) {object})"),
            Relation::Above => format!("(PP (IN above) {object})"),
            Relation::Below => format!("(PP (IN below) {object})"),
        }
    }
}

/// Synthetic stories with their images, word vectors and triples.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub stories: Vec<StoryRecord>,
    /// Image bytes keyed by the `image_path` used in the records.
    pub images: BTreeMap<String, Rgb8>,
    pub embeddings: String,
    pub triples: String,
}

impl SyntheticCorpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (rel, img) in &self.images {
            img.write(&dir.join(rel))?;
        }
        let w = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        w("stories.jsonl", &stories_to_jsonl(&self.stories))?;
        w("embeddings.txt", &self.embeddings)?;
        w("triples.tsv", &self.triples)
    }
}

fn draw_shape(img: &mut Rgb8, shape: &str, x0: usize, y0: usize, size: usize, color: [u8; 3]) {
    let r = size as f64 / 2.0;
    for dy in 0..size {
        for dx in 0..size {
            let inside = match shape {
                "circle" => {
                    let (cx, cy) = (dx as f64 + 0.5 - r, dy as f64 + 0.5 - r);
                    cx * cx + cy * cy <= r * r
                }
                "triangle" => {
                    let half = (dy as f64 + 1.0) / size as f64 * r;
                    (dx as f64 + 0.5 - r).abs() <= half
                }
                _ => true,
            };
            if inside {
                img.set(x0 + dx, y0 + dy, color);
            }
        }
    }
}

fn norm_box(x0: usize, y0: usize, w: usize, h: usize, image: usize) -> [f64; 4] {
    let s = image as f64;
    [x0 as f64 / s, y0 as f64 / s, (x0 + w) as f64 / s, (y0 + h) as f64 / s]
}

/// Colored shapes on plain backgrounds with templated captions and trees.
pub fn synthetic_corpus(cfg: &Config, n_stories: usize, rng: &mut ChaCha8Rng) -> SyntheticCorpus {
    let image = cfg.generator.image;
    let t = cfg.generator.story_len;
    let k_slots = cfg.generator.slots;
    let n_chars = cfg.generator.characters.min(CHARACTERS.len());
    let size = (image / 4).max(2);
    let badge = (image / 8).max(1);
    let mut stories = Vec::with_capacity(n_stories);
    let mut images = BTreeMap::new();
    for s in 0..n_stories {
        let story_id = format!("story{s:04}");
        let hero = rng.gen_range(0..n_chars);
        let mut frames = Vec::with_capacity(t);
        for k in 0..t {
            let who = if rng.gen_bool(0.8) { hero } else { rng.gen_range(0..n_chars) };
            let name = CHARACTERS[who];
            let verb = VERBS[rng.gen_range(0..VERBS.len())];
            let (c1, rgb1) = COLORS[rng.gen_range(0..COLORS.len())];
            let (c2, rgb2) = loop {
                let c = COLORS[rng.gen_range(0..COLORS.len())];
                if c.0 != c1 {
                    break c;
                }
            };
            let s1 = SHAPES[rng.gen_range(0..SHAPES.len())];
            let s2 = SHAPES[rng.gen_range(0..SHAPES.len())];
            let rel = *Relation::ALL.choose(rng).expect("non-empty");
            let (bg, bg_rgb) = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];

            let half = image / 2;
            let lo = badge;
            let pos = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi.max(lo));
            let (p1, p2) = match rel {
                Relation::LeftOf | Relation::RightOf => {
                    let left = (pos(rng, 0, half - size), pos(rng, lo, image - size));
                    let right = (pos(rng, half, image - size), pos(rng, lo, image - size));
                    if rel == Relation::LeftOf {
                        (left, right)
                    } else {
                        (right, left)
                    }
                }
                Relation::Above | Relation::Below => {
                    let top = (pos(rng, lo, image - size), pos(rng, lo, half - size));
                    let bottom = (pos(rng, lo, image - size), pos(rng, half, image - size));
                    if rel == Relation::Above {
                        (top, bottom)
                    } else {
                        (bottom, top)
                    }
                }
            };
            let mut img = Rgb8::new(image, image, bg_rgb);
            draw_shape(&mut img, s1, p1.0, p1.1, size, rgb1);
            draw_shape(&mut img, s2, p2.0, p2.1, size, rgb2);
            draw_shape(&mut img, "square", 0, 0, badge, CHARACTER_COLORS[who]);

            let caption = format!("{name} {verb} a {c1} {s1} {} a {c2} {s2} .", rel.words());
            let object = format!("(NP (DT a) (JJ {c2}) (NN {s2}))");
            let tree = format!(
                "(S (NP (NNP {name})) (VP (VBZ {verb}) (NP (NP (DT a) (JJ {c1}) (NN {s1})) {})) (. .))",
                rel.tree(&object)
            );
            let base = [
                (norm_box(p1.0, p1.1, size, size, image), format!("{c1} {s1}")),
                (norm_box(p2.0, p2.1, size, size, image), format!("{c2} {s2}")),
                (norm_box(0, 0, badge, badge, image), name.to_lowercase()),
                ([0.0, 0.0, 1.0, 1.0], format!("{bg} background")),
            ];
            let annotations = (0..k_slots)
                .map(|j| Annotation {
                    bbox: base[j % base.len()].0,
                    phrase: base[j % base.len()].1.clone(),
                    confidence_rank: j as u32,
                })
                .collect();
            let mut character_labels = vec![0u8; cfg.generator.characters];
            character_labels[who] = 1;
            let image_path = format!("images/{story_id}_{k}.ppm");
            images.insert(image_path.clone(), img);
            frames.push(FrameRecord {
                caption,
                tree,
                annotations,
                character_labels,
                image_path: Some(image_path),
            });
        }
        stories.push(StoryRecord { story_id, frames });
    }
    SyntheticCorpus {
        stories,
        images,
        embeddings: synthetic_embeddings(cfg.model.d_word, rng),
        triples: SYNTHETIC_TRIPLES.to_string(),
    }
}

const SYNTHETIC_TRIPLES: &str = "\
circle\tIsA\tshape
circle\tHasProperty\tround
square\tIsA\tshape
square\tHasA\tcorner
triangle\tIsA\tshape
triangle\tHasA\tcorner
red\tIsA\tcolor
blue\tIsA\tcolor
green\tIsA\tcolor
pororo\tIsA\tpenguin
crong\tIsA\tdinosaur
eddy\tIsA\tfox
loopy\tIsA\tbeaver
poby\tIsA\tbear
petty\tIsA\tpenguin
harry\tIsA\tbird
rody\tIsA\trobot
tongtong\tIsA\tdragon
penguin\tAtLocation\tsnow
bear\tAtLocation\tforest
ball\tHasProperty\tround
wheel\tHasProperty\tround
box\tHasA\tcorner
";

/// Word vectors where words of one category share a direction (cosine about
/// 0.7 within a category), so that embedding expansion has something to find.
fn synthetic_embeddings(dim: usize, rng: &mut ChaCha8Rng) -> String {
    use rand_distr::{Distribution, StandardNormal};
    let groups: [&[&str]; 8] = [
        &["pororo", "crong", "eddy", "loopy", "poby", "petty", "harry", "rody", "tongtong"],
        &["red", "green", "blue", "yellow", "purple", "orange", "white", "gray", "pale", "color"],
        &["circle", "square", "triangle", "shape", "round", "corner", "ball", "wheel", "box"],
        &["sees", "holds", "moves", "is", "has", "at", "location", "property"],
        &["left", "right", "above", "below", "of"],
        &["penguin", "dinosaur", "fox", "beaver", "bear", "bird", "robot", "dragon"],
        &["snow", "forest", "background"],
        &["a", ".", "the"],
    ];
    let mut out = String::new();
    let normal = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    };
    for words in groups {
        let center = normal(rng);
        for w in words {
            let noise = normal(rng);
            let v: Vec<String> = center
                .iter()
                .zip(&noise)
                .map(|(c, e)| format!("{:.6}", 0.7f64.sqrt() * c + 0.3f64.sqrt() * e))
                .collect();
            out.push_str(w);
            out.push(' ');
            out.push_str(&v.join(" "));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sub_rng;

    #[test]
    fn synthetic_records_validate() {
        let cfg = Config::demo();
        let corpus = synthetic_corpus(&cfg, 4, &mut sub_rng(1, 0));
        assert_eq!(corpus.stories.len(), 4);
        for s in &corpus.stories {
            let trees = s.validate(&cfg).unwrap();
            assert_eq!(trees.len(), 5);
        }
        assert_eq!(corpus.images.len(), 20);
        let parsed = parse_stories(&stories_to_jsonl(&corpus.stories)).unwrap();
        assert_eq!(parsed, corpus.stories);
    }

    #[test]
    fn caption_tree_mismatch_names_frame() {
        let cfg = Config::demo();
        let mut s = synthetic_corpus(&cfg, 1, &mut sub_rng(2, 0)).stories.remove(0);
        s.frames[2].caption.push_str(" extra");
        match s.validate(&cfg) {
            Err(Error::Schema { story_id, path, .. }) => {
                assert_eq!(story_id, "story0000");
                assert_eq!(path, "frames[2].tree");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_box_is_reported_with_path() {
        let cfg = Config::demo();
        let mut s = synthetic_corpus(&cfg, 1, &mut sub_rng(2, 0)).stories.remove(0);
        s.frames[1].annotations[3].bbox = [0.5, 0.1, 0.4, 0.9];
        let err = s.validate(&cfg).unwrap_err().to_string();
        assert!(err.contains("frames[1].annotations[3].box"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let err = parse_stories("{\"story_id\": \"a\", \"frames\": [], \"extra\": 1}\n").unwrap_err();
        assert!(matches!(err, Error::Schema { ref story_id, .. } if story_id == "a"));
    }

    #[test]
    fn mirror_swaps_directions() {
        assert_eq!(mirror_text("(PP (RB left) (IN of))"), "(PP (RB right) (IN of))");
        assert_eq!(mirror_text("a leftover right."), "a leftover left.");
    }
}
