//! Constituency trees and leaf embeddings.
//!
//! Trees are read from bracketed S-expressions such as
//! `(S (NP (NNP Pororo)) (VP (VBZ smiles)))`. Words are not nodes: the node
//! arena holds phrase and part-of-speech nodes only, and each leaf records the
//! preterminal above it. Heights count from the preterminal (height 1).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Inclusive leaf range `[first, last]`.
    pub span: (usize, usize),
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leaf {
    pub word: String,
    pub preterminal: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstituencyTree {
    nodes: Vec<TreeNode>,
    leaves: Vec<Leaf>,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

/// Intermediate parse result before flattening into the arena.
enum Raw {
    Pre { label: String, word: String },
    Phrase { label: String, children: Vec<Raw> },
}

impl<'a> Parser<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn atom(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn node(&mut self) -> Result<Raw> {
        // caller guarantees '(' at pos
        self.pos += 1;
        self.skip_ws();
        let label = match self.peek() {
            Some(c) if c != '(' && c != ')' => self.atom().to_string(),
            _ => String::new(),
        };
        let mut children = Vec::new();
        let mut word: Option<String> = None;
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(self.err(self.src.len(), "unbalanced parentheses: missing ')'")),
                Some('(') => {
                    if word.is_some() {
                        return Err(self.err(self.pos, "node mixes a terminal word with child constituents"));
                    }
                    children.push(self.node()?);
                }
                Some(')') => {
                    let close = self.pos;
                    self.pos += 1;
                    return match word {
                        Some(word) => Ok(Raw::Pre { label, word }),
                        None if children.is_empty() => Err(self.err(close, "empty constituent")),
                        None => Ok(Raw::Phrase { label, children }),
                    };
                }
                Some(_) => {
                    let at = self.pos;
                    if !children.is_empty() {
                        return Err(self.err(at, "node mixes a terminal word with child constituents"));
                    }
                    if word.is_some() {
                        return Err(self.err(at, "preterminal has more than one word"));
                    }
                    word = Some(self.atom().to_string());
                }
            }
        }
    }
}

impl ConstituencyTree {
    /// Parse one bracketed tree. Empty labels are accepted (the outer
    /// wrapper of Penn Treebank files has none).
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser { src: text, pos: 0 };
        p.skip_ws();
        match p.peek() {
            Some('(') => {}
            Some(_) => return Err(p.err(p.pos, "expected '('")),
            None => return Err(p.err(0, "empty input")),
        }
        let raw = p.node()?;
        p.skip_ws();
        if p.pos < text.len() {
            let msg = if p.peek() == Some(')') {
                "unbalanced parentheses: unexpected ')'"
            } else {
                "trailing input after tree"
            };
            return Err(p.err(p.pos, msg));
        }
        Ok(Self::from_raw(raw))
    }

    fn from_raw(raw: Raw) -> Self {
        let mut tree = ConstituencyTree {
            nodes: Vec::new(),
            leaves: Vec::new(),
        };
        tree.push_raw(raw, None);
        tree
    }

    fn push_raw(&mut self, raw: Raw, parent: Option<usize>) -> usize {
        let id = self.nodes.len();
        match raw {
            Raw::Pre { label, word } => {
                let leaf = self.leaves.len();
                self.leaves.push(Leaf {
                    word,
                    preterminal: id,
                });
                self.nodes.push(TreeNode {
                    label,
                    parent,
                    children: Vec::new(),
                    span: (leaf, leaf),
                    height: 1,
                });
            }
            Raw::Phrase { label, children } => {
                self.nodes.push(TreeNode {
                    label,
                    parent,
                    children: Vec::new(),
                    span: (0, 0),
                    height: 0,
                });
                let kids: Vec<usize> = children
                    .into_iter()
                    .map(|c| self.push_raw(c, Some(id)))
                    .collect();
                let first = self.nodes[kids[0]].span.0;
                let last = self.nodes[*kids.last().unwrap()].span.1;
                let height = 1 + kids.iter().map(|&k| self.nodes[k].height).max().unwrap();
                let node = &mut self.nodes[id];
                node.children = kids;
                node.span = (first, last);
                node.height = height;
            }
        }
        id
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn words(&self) -> Vec<&str> {
        self.leaves.iter().map(|l| l.word.as_str()).collect()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn height(&self) -> usize {
        self.nodes[0].height
    }

    /// Node indices from the leaf's preterminal up to and including the root.
    pub fn ancestor_chain(&self, leaf: usize) -> Vec<usize> {
        let mut chain = Vec::new();
        let mut cur = Some(self.leaves[leaf].preterminal);
        while let Some(n) = cur {
            chain.push(n);
            cur = self.nodes[n].parent;
        }
        chain
    }

    /// Height of the lowest common ancestor of two leaves; a leaf with itself
    /// gives its preterminal (height 1).
    pub fn lca_height(&self, i: usize, j: usize) -> Result<usize> {
        let n = self.leaf_count();
        if i >= n || j >= n {
            return Err(Error::Index {
                index: i.max(j),
                len: n,
            });
        }
        let mut a = self.leaves[i].preterminal;
        let (lo, hi) = (i.min(j), i.max(j));
        while !(self.nodes[a].span.0 <= lo && self.nodes[a].span.1 >= hi) {
            a = self.nodes[a].parent.expect("root spans every leaf");
        }
        Ok(self.nodes[a].height)
    }

    /// Serialize back to bracketed text.
    pub fn to_bracketed(&self) -> String {
        let mut out = String::new();
        self.write_node(0, &mut out);
        out
    }

    fn write_node(&self, id: usize, out: &mut String) {
        let node = &self.nodes[id];
        out.push('(');
        out.push_str(&node.label);
        if node.children.is_empty() {
            let leaf = &self.leaves[node.span.0];
            let _ = write!(out, " {}", leaf.word);
        } else {
            for &c in &node.children {
                out.push(' ');
                self.write_node(c, out);
            }
        }
        out.push(')');
    }

    /// Copy with the children of `node` reversed (leaf order changes).
    pub fn with_reversed_children(&self, node: usize) -> Self {
        fn rebuild(t: &ConstituencyTree, id: usize, flip: usize) -> Raw {
            let n = &t.nodes[id];
            if n.children.is_empty() {
                return Raw::Pre {
                    label: n.label.clone(),
                    word: t.leaves[n.span.0].word.clone(),
                };
            }
            let mut kids: Vec<Raw> = n.children.iter().map(|&c| rebuild(t, c, flip)).collect();
            if id == flip {
                kids.reverse();
            }
            Raw::Phrase {
                label: n.label.clone(),
                children: kids,
            }
        }
        Self::from_raw(rebuild(self, 0, node))
    }

    /// Random tree with `n_leaves` leaves. Internal nodes get 1–3 children
    /// (unary chains included); labels drawn from `labels`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_leaves: usize, labels: &[&str]) -> Self {
        fn build<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize, labels: &[&str], depth: usize) -> Raw {
            let n = hi - lo;
            let label = labels[rng.gen_range(0..labels.len())].to_string();
            if n == 1 && (depth > 6 || rng.gen_bool(0.6)) {
                return Raw::Pre {
                    label,
                    word: format!("w{lo}"),
                };
            }
            if n == 1 || rng.gen_bool(0.15) {
                let child = build(rng, lo, hi, labels, depth + 1);
                return Raw::Phrase {
                    label,
                    children: vec![child],
                };
            }
            let parts = rng.gen_range(2..=3.min(n));
            let mut cuts: Vec<usize> = rand::seq::index::sample(rng, n - 1, parts - 1)
                .into_iter()
                .map(|c| lo + c + 1)
                .collect();
            cuts.sort_unstable();
            let mut bounds = vec![lo];
            bounds.extend(cuts);
            bounds.push(hi);
            let children = bounds
                .windows(2)
                .map(|w| build(rng, w[0], w[1], labels, depth + 1))
                .collect();
            Raw::Phrase { label, children }
        }
        assert!(n_leaves >= 1);
        Self::from_raw(build(rng, 0, n_leaves, labels, 0))
    }

    /// Every ordered tree shape over `n_leaves` leaves whose phrase nodes have
    /// at least two children, each optionally with one unary phrase node
    /// inserted above any phrase node. Labels are `X`, preterminals `P`.
    pub fn enumerate_shapes(n_leaves: usize) -> Vec<Self> {
        fn shapes(lo: usize, hi: usize) -> Vec<Raw> {
            let n = hi - lo;
            if n == 1 {
                return vec![Raw::Pre {
                    label: "P".into(),
                    word: format!("w{lo}"),
                }];
            }
            let mut out = Vec::new();
            // compositions of the range into >= 2 contiguous parts
            for mask in 0u32..(1 << (n - 1)) {
                if mask == 0 {
                    continue;
                }
                let mut bounds = vec![lo];
                for b in 0..n - 1 {
                    if mask & (1 << b) != 0 {
                        bounds.push(lo + b + 1);
                    }
                }
                bounds.push(hi);
                let parts: Vec<Vec<Raw>> = bounds.windows(2).map(|w| shapes(w[0], w[1])).collect();
                for combo in cartesian(&parts) {
                    out.push(Raw::Phrase {
                        label: "X".into(),
                        children: combo,
                    });
                    let last = out.len() - 1;
                    let wrapped = wrap_unary(&out[last]);
                    out.push(wrapped);
                }
            }
            out
        }
        fn clone_raw(r: &Raw) -> Raw {
            match r {
                Raw::Pre { label, word } => Raw::Pre {
                    label: label.clone(),
                    word: word.clone(),
                },
                Raw::Phrase { label, children } => Raw::Phrase {
                    label: label.clone(),
                    children: children.iter().map(clone_raw).collect(),
                },
            }
        }
        fn wrap_unary(r: &Raw) -> Raw {
            Raw::Phrase {
                label: "U".into(),
                children: vec![clone_raw(r)],
            }
        }
        fn cartesian(parts: &[Vec<Raw>]) -> Vec<Vec<Raw>> {
            let mut acc: Vec<Vec<Raw>> = vec![Vec::new()];
            for options in parts {
                let mut next = Vec::new();
                for prefix in &acc {
                    for o in options {
                        let mut v: Vec<Raw> = prefix.iter().map(clone_raw).collect();
                        v.push(clone_raw(o));
                        next.push(v);
                    }
                }
                acc = next;
            }
            acc
        }
        shapes(0, n_leaves).into_iter().map(Self::from_raw).collect()
    }
}

/// Phrase-label vocabulary. Id 0 is reserved for unknown labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocab {
    index: HashMap<String, usize>,
    names: Vec<String>,
}

/// Penn Treebank part-of-speech and phrase labels.
pub const PTB_LABELS: &[&str] = &[
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS", "NNP",
    "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO", "UH", "VB",
    "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT", "WP", "WP$", "WRB", ".", ",", ":", "``", "''",
    "-LRB-", "-RRB-", "$", "#", "ADJP", "ADVP", "CONJP", "FRAG", "INTJ", "LST", "NAC", "NP",
    "NX", "PP", "PRN", "PRT", "QP", "RRC", "S", "SBAR", "SBARQ", "SINV", "SQ", "UCP", "VP",
    "WHADJP", "WHADVP", "WHNP", "WHPP", "X", "ROOT",
];

impl LabelVocab {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut names = vec!["<unk>".to_string()];
        let mut index = HashMap::new();
        for l in labels {
            let l = l.as_ref();
            if !index.contains_key(l) {
                index.insert(l.to_string(), names.len());
                names.push(l.to_string());
            }
        }
        LabelVocab { index, names }
    }

    pub fn ptb() -> Self {
        Self::new(PTB_LABELS)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row for a label; functional tags (`NP-SBJ`) fall back to their base.
    pub fn id(&self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        match label.split(['-', '=']).next() {
            Some(base) if !base.is_empty() && base != label => {
                self.index.get(base).copied().unwrap_or(0)
            }
            _ => 0,
        }
    }
}

/// Label embeddings: `vocab.len()` rows of `dim` values, row 0 for unknowns.
#[derive(Clone, Debug)]
pub struct LabelTable {
    pub vocab: LabelVocab,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl LabelTable {
    pub fn new(vocab: LabelVocab, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != vocab.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("label table rows do not match vocabulary".into()));
        }
        Ok(LabelTable { vocab, dim, rows })
    }

    pub fn zeros(vocab: LabelVocab, dim: usize) -> Self {
        let rows = vec![vec![0.0; dim]; vocab.len()];
        LabelTable { vocab, dim, rows }
    }

    pub fn embedding(&self, label: &str) -> &[f64] {
        &self.rows[self.vocab.id(label)]
    }
}

/// Label ids along a leaf's ancestor chain, truncated to `depth` entries.
pub fn label_chain(tree: &ConstituencyTree, leaf: usize, vocab: &LabelVocab, depth: Option<usize>) -> Vec<usize> {
    let chain = tree.ancestor_chain(leaf);
    let take = depth.map_or(chain.len(), |d| d.max(1).min(chain.len()));
    chain[..take]
        .iter()
        .map(|&n| vocab.id(&tree.nodes()[n].label))
        .collect()
}

/// Upward cumulative average: mean of the label embeddings from the leaf's
/// preterminal up to the root (or `depth` levels when capped).
pub fn node_embedding(
    tree: &ConstituencyTree,
    leaf: usize,
    labels: &LabelTable,
    depth: Option<usize>,
) -> Result<Vec<f64>> {
    if leaf >= tree.leaf_count() {
        return Err(Error::Index {
            index: leaf,
            len: tree.leaf_count(),
        });
    }
    let chain = label_chain(tree, leaf, &labels.vocab, depth);
    let mut out = vec![0.0; labels.dim];
    for &id in &chain {
        for (o, v) in out.iter_mut().zip(&labels.rows[id]) {
            *o += v;
        }
    }
    let n = chain.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// Pretrained word vectors in GloVe text layout (`token v1 ... vD` per line).
#[derive(Clone, Debug)]
pub struct WordTable {
    index: HashMap<String, usize>,
    dim: usize,
    vectors: Vec<f64>,
    /// Row used for out-of-vocabulary tokens.
    pub unk: Vec<f64>,
}

impl WordTable {
    pub fn from_entries(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (tok, v) in entries {
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "embedding for {tok:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok, index.len());
            vectors.extend(v);
        }
        Ok(WordTable {
            index,
            dim,
            vectors,
            unk: vec![0.0; dim],
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            let tok = it.next().unwrap_or_default().to_string();
            let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Format(format!("embeddings line {}: {e}", lineno + 1)))?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::Format(format!(
                        "embeddings line {}: {} values, expected {d}",
                        lineno + 1,
                        vals.len()
                    )))
                }
                _ => {}
            }
            entries.push((tok, vals));
        }
        let dim = dim.ok_or_else(|| Error::Format("empty embedding table".into()))?;
        Self::from_entries(dim, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Exact match first, then lowercase.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        let i = self
            .index
            .get(word)
            .or_else(|| self.index.get(&word.to_lowercase()))?;
        Some(&self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn vector_or_unk(&self, word: &str) -> &[f64] {
        self.get(word).unwrap_or(&self.unk)
    }

    /// Mean of word vectors; unknown words use the UNK row.
    pub fn mean_of<S: AsRef<str>>(&self, words: &[S]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if words.is_empty() {
            return out;
        }
        for w in words {
            for (o, v) in out.iter_mut().zip(self.vector_or_unk(w.as_ref())) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|x| *x /= words.len() as f64);
        out
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }
}

/// Word vector ⊕ node embedding for every leaf, in sentence order.
pub fn build_leaf_embeddings(
    tree: &ConstituencyTree,
    words: &WordTable,
    labels: &LabelTable,
    depth: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    (0..tree.leaf_count())
        .map(|i| {
            let mut v = words.vector_or_unk(&tree.leaves()[i].word).to_vec();
            v.extend(node_embedding(tree, i, labels, depth)?);
            Ok(v)
        })
        .collect()
}

/// Whitespace tokenization with leading/trailing punctuation split off.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        let mut head = Vec::new();
        let mut tail = Vec::new();
        while lo < hi && is_punct(chars[lo]) {
            head.push(chars[lo].to_string());
            lo += 1;
        }
        while hi > lo && is_punct(chars[hi - 1]) {
            tail.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        out.extend(head);
        if lo < hi {
            out.push(chars[lo..hi].iter().collect());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"' | '(' | ')')
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "(S (NP (NNP Pororo)) (VP (VP (VBZ says) (UH hi)) (CC and) (VP (VBZ smiles))))";

    #[test]
    fn single_leaf_heights() {
        let t = ConstituencyTree::parse("(S (NP (NNP Pororo)))").unwrap();
        assert_eq!(t.words(), ["Pororo"]);
        assert_eq!(t.height(), 3);
    }

    #[test]
    fn example_layout() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        assert_eq!(t.words(), ["Pororo", "says", "hi", "and", "smiles"]);
        let vp_inner = t.nodes().iter().find(|n| n.label == "VP" && n.span == (1, 2)).unwrap();
        let vp_outer = t.nodes().iter().find(|n| n.label == "VP" && n.span == (1, 4)).unwrap();
        assert_eq!(vp_inner.height, 2);
        assert_eq!(vp_outer.height, 3);
        assert_eq!(t.lca_height(1, 2).unwrap(), 2);
        assert_eq!(t.lca_height(1, 4).unwrap(), 3);
        assert_eq!(t.lca_height(3, 3).unwrap(), 1);
    }

    #[test]
    fn malformed_offsets() {
        let err = |s: &str| match ConstituencyTree::parse(s) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("((S)"), 3);
        assert_eq!(err("(S (NP x)"), 9);
        assert_eq!(err("(S (NP x)))"), 10);
        assert_eq!(err("(S (NP x) y)"), 10);
        assert_eq!(err("(NP x y)"), 6);
        assert_eq!(err("(NP x (NN y))"), 6);
        assert_eq!(err(""), 0);
    }

    #[test]
    fn ptb_wrapper_has_empty_label() {
        let t = ConstituencyTree::parse("( (S (NN x)))").unwrap();
        assert_eq!(t.nodes()[0].label, "");
        assert_eq!(t.height(), 3);
        assert_eq!(ConstituencyTree::parse(&t.to_bracketed()).unwrap(), t);
    }

    #[test]
    fn fig3_average() {
        let vocab = LabelVocab::new(&["NNP", "NP"]);
        let mut table = LabelTable::zeros(vocab, 2);
        table.rows[1] = vec![1.0, 0.0];
        table.rows[2] = vec![0.0, 1.0];
        let t = ConstituencyTree::parse("(NP (NNP Pororo))").unwrap();
        assert_eq!(node_embedding(&t, 0, &table, None).unwrap(), vec![0.5, 0.5]);
        // Truncated reading of a deeper tree.
        let t = ConstituencyTree::parse("(S (NP (NNP Pororo)) (VP (VBZ smiles)))").unwrap();
        assert_eq!(node_embedding(&t, 0, &table, Some(2)).unwrap(), vec![0.5, 0.5]);
        assert_eq!(node_embedding(&t, 0, &table, None).unwrap(), vec![1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn identical_chain_keeps_embedding() {
        let vocab = LabelVocab::new(&["X"]);
        let mut table = LabelTable::zeros(vocab, 3);
        table.rows[1] = vec![0.1, -0.7, 3.0];
        let t = ConstituencyTree::parse("(X (X (X (X a))))").unwrap();
        assert_eq!(node_embedding(&t, 0, &table, None).unwrap(), table.rows[1]);
    }

    #[test]
    fn leaf_embedding_width() {
        let words = WordTable::from_entries(300, vec![("says".into(), vec![0.5; 300])]).unwrap();
        let labels = LabelTable::zeros(LabelVocab::ptb(), 50);
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let e = build_leaf_embeddings(&t, &words, &labels, None).unwrap();
        assert_eq!(e.len(), 5);
        assert!(e.iter().all(|v| v.len() == 350));
        assert_eq!(e[1][0], 0.5);
        assert_eq!(e[0][0], 0.0);
    }

    #[test]
    fn zero_tables_give_zero_leaves() {
        let words = WordTable::from_entries(4, vec![("a".into(), vec![0.0; 4])]).unwrap();
        let labels = LabelTable::zeros(LabelVocab::ptb(), 3);
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let e = build_leaf_embeddings(&t, &words, &labels, None).unwrap();
        assert!(e.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn glove_text_roundtrip() {
        let w = WordTable::parse("car 0.1 0.2\ndoor -1 2.5\n").unwrap();
        assert_eq!(w.dim(), 2);
        assert_eq!(w.get("Car"), Some(&[0.1, 0.2][..]));
        assert!(w.get("boat").is_none());
        assert!(WordTable::parse("a 1 2\nb 3\n").is_err());
    }

    #[test]
    fn functional_tags_fall_back() {
        let v = LabelVocab::ptb();
        assert_eq!(v.id("NP-SBJ"), v.id("NP"));
        assert_eq!(v.id("NOPE"), 0);
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Pororo smiles."), ["Pororo", "smiles", "."]);
        assert_eq!(tokenize("  hi,  there "), ["hi", ",", "there"]);
    }

    #[test]
    fn shape_enumeration_counts() {
        // Schröder-Hipparchus counts, each doubled by the optional unary wrap
        // except for single leaves.
        let counts: Vec<usize> = (1..=4).map(|n| ConstituencyTree::enumerate_shapes(n).len()).collect();
        assert_eq!(counts[0], 1);
        assert_eq!(counts[1], 2);
        // n=3: ((ab)c),(a(bc)),(abc) with every sub-phrase optionally wrapped
        assert!(counts[2] > 3);
        for t in ConstituencyTree::enumerate_shapes(4) {
            assert_eq!(t.leaf_count(), 4);
        }
    }
}
