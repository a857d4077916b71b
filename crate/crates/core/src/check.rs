//! Registry of invariant and oracle checks run by `storyvis check`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::error::Result;
use crate::generate::{generate_frame, GeneratorDims, GeneratorParams};
use crate::graph::{graph_encode, GraphEncoderParams, GraphInput, LeviGraph, Triple, VertexKind};
use crate::losses::{
    bbox_loss_mirror, caption_ce, contrastive_word_loss, discriminator_loss, generator_gan_losses, kl_loss,
    mirror_boxes, DiscriminatorDims, DiscriminatorParams, GanStory,
};
use crate::mask::{layer_mask, MaskOptions, MaskRule, MaskStack};
use crate::martt::{encode_step, encode_story, frames_from_trees, init_memory, memory_update, MarttDims, MarttParams};
use crate::nn::{sub_rng, Bound, Dropout, ParamStore};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::tree::{node_embedding, ConstituencyTree, LabelTable, LabelVocab, WordTable};

pub const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

/// Example sentence with a three-stage visibility pattern.
pub const EXAMPLE_TREE: &str = "(S (NP (NNP Pororo)) (VP (VP (VBZ says) (UH hi)) (CC and) (VP (VBZ smiles))))";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Mask rule under test; `MaskRule::Corrupted` must make the mask checks fail.
    pub mask_rule: MaskRule,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            mask_rule: MaskRule::Subtree,
        }
    }
}

pub type Outcome = std::result::Result<String, String>;

pub struct Property {
    pub name: &'static str,
    pub run: fn(&CheckOptions) -> Outcome,
}

pub fn registry() -> Vec<Property> {
    vec![
        Property { name: "mask.oracle.exhaustive", run: mask_exhaustive },
        Property { name: "mask.oracle.random", run: mask_random },
        Property { name: "mask.example_sentence", run: mask_example },
        Property { name: "tree.node_embedding", run: node_embedding_oracle },
        Property { name: "tensor.masked_softmax", run: softmax_normalization },
        Property { name: "tensor.grad.primitives", run: grad_primitives },
        Property { name: "martt.grad.encode_step", run: grad_encode_step },
        Property { name: "martt.grad.memory_update", run: grad_memory_update },
        Property { name: "martt.reduction", run: martt_reduction },
        Property { name: "martt.causality", run: martt_causality },
        Property { name: "graph.levi_invariants", run: levi_invariants },
        Property { name: "graph.grad.encode", run: grad_graph_encode },
        Property { name: "generate.grad.frame", run: grad_generate_frame },
        Property { name: "losses.grad.terms", run: grad_loss_terms },
        Property { name: "losses.closed_forms", run: loss_closed_forms },
        Property { name: "config.round_trip", run: config_round_trip },
    ]
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status}  {:width$}  {:>6} ms  {}", r.name, r.millis, r.detail);
        }
        let passed = self.rows.iter().filter(|r| r.passed).count();
        let _ = writeln!(out, "{passed}/{} properties passed", self.rows.len());
        out
    }
}

pub fn run_all(opts: &CheckOptions) -> Report {
    let rows = registry()
        .par_iter()
        .map(|p| {
            let start = Instant::now();
            let outcome = (p.run)(opts);
            let millis = start.elapsed().as_millis();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            ReportRow {
                name: p.name,
                passed,
                detail,
                millis,
            }
        })
        .collect();
    Report { rows }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Brute-force visibility: some node of height `<= layer` spans both leaves.
pub fn brute_force_visible(tree: &ConstituencyTree, i: usize, j: usize, layer: usize) -> bool {
    let (lo, hi) = (i.min(j), i.max(j));
    tree.nodes()
        .iter()
        .any(|n| n.height <= layer && n.span.0 <= lo && n.span.1 >= hi)
}

fn mask_mismatches(tree: &ConstituencyTree, rule: MaskRule) -> Result<usize> {
    let opts = MaskOptions {
        final_layer_full: false,
        rule,
    };
    let n = tree.leaf_count();
    let top = tree.height() + 1;
    let mut bad = 0;
    for l in 1..=top {
        let m = layer_mask(tree, l, top, opts)?;
        for i in 0..n {
            for j in 0..n {
                if m.get(i, j) != brute_force_visible(tree, i, j, l) {
                    bad += 1;
                }
            }
        }
    }
    Ok(bad)
}

const RANDOM_LABELS: [&str; 6] = ["S", "NP", "VP", "PP", "ADJP", "SBAR"];

fn mask_exhaustive(o: &CheckOptions) -> Outcome {
    let (mut trees, mut bad) = (0, 0);
    for n in 1..=6 {
        for t in ConstituencyTree::enumerate_shapes(n) {
            trees += 1;
            bad += mask_mismatches(&t, o.mask_rule).map_err(err)?;
        }
    }
    match bad {
        0 => Ok(format!("{trees} trees, 0 mismatches")),
        _ => Err(format!("{bad} mismatched entries over {trees} trees")),
    }
}

fn mask_random(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 100);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let t = ConstituencyTree::random(&mut rng, n, &RANDOM_LABELS);
        bad += mask_mismatches(&t, o.mask_rule).map_err(err)?;
    }
    match bad {
        0 => Ok("1000 trees, 0 mismatches".into()),
        _ => Err(format!("{bad} mismatched entries over 1000 trees")),
    }
}

fn mask_example(o: &CheckOptions) -> Outcome {
    let tree = ConstituencyTree::parse(EXAMPLE_TREE).map_err(err)?;
    let opts = MaskOptions {
        final_layer_full: true,
        rule: o.mask_rule,
    };
    let stack = MaskStack::build(&tree, 4, 0, opts).map_err(err)?;
    let block = |l: usize| stack.caption_block(l - 1);
    let n = tree.leaf_count();
    let mut problems = Vec::new();
    let l1 = block(1);
    if (0..n).any(|i| (0..n).any(|j| l1.get(i, j) != (i == j))) {
        problems.push("layer 1 is not the identity");
    }
    if block(1).get(1, 2) || !block(2).get(1, 2) || !block(2).get(2, 1) {
        problems.push("says/hi not first visible at layer 2");
    }
    let full = |l: usize| (1..n).all(|i| (1..n).all(|j| block(l).get(i, j)));
    if full(2) || !full(3) {
        problems.push("'says hi and smiles' not first fully visible at layer 3");
    }
    if block(3).get(0, 1) || !block(4).get(0, 1) {
        problems.push("Pororo/says not first visible at layer 4");
    }
    if problems.is_empty() {
        Ok("identity, says<->hi at 2, predicate block at 3".into())
    } else {
        Err(problems.join("; "))
    }
}

fn node_embedding_oracle(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 101);
    let vocab = LabelVocab::new(&RANDOM_LABELS);
    let rows = (0..vocab.len())
        .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let table = LabelTable::new(vocab.clone(), rows).map_err(err)?;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let tree = ConstituencyTree::random(&mut rng, n, &RANDOM_LABELS);
        for leaf in 0..n {
            let got = node_embedding(&tree, leaf, &table, None).map_err(err)?;
            let mut acc = vec![0.0; 5];
            let mut count = 0usize;
            let mut cur = Some(tree.leaves()[leaf].preterminal);
            while let Some(id) = cur {
                let node = &tree.nodes()[id];
                for (a, v) in acc.iter_mut().zip(table.embedding(&node.label)) {
                    *a += v;
                }
                count += 1;
                cur = node.parent;
            }
            acc.iter_mut().for_each(|a| *a /= count as f64);
            if got != acc {
                return Err(format!("leaf {leaf} of {} differs", tree.to_bracketed()));
            }
        }
    }
    Ok("1000 trees bit-exact".into())
}

fn softmax_normalization(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 102);
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..8));
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.6)).collect();
        for i in 0..r {
            mask[i * c + rng.gen_range(0..c)] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[r, c], 3.0, &mut rng));
        let y = tape.masked_softmax(x, &mask).map_err(err)?;
        let y = tape.value(y);
        for i in 0..r {
            let row = y.row(i);
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(format!("row {i} does not sum to 1"));
            }
            if row.iter().zip(&mask[i * c..]).any(|(&v, &m)| !m && v != 0.0) {
                return Err(format!("row {i} has mass on a masked entry"));
            }
        }
    }
    Ok("100 random masks".into())
}

fn grad_report(name: &str, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> Result<f64, String> {
    let r = grad_check(f, params, FD_EPS).map_err(|e| format!("{name}: {e}"))?;
    if r.passes(GRAD_TOL) {
        Ok(r.max_rel_error)
    } else {
        Err(format!(
            "{name}: relative error {:.3e} at {:?} (analytic {}, numeric {})",
            r.max_rel_error, r.worst, r.analytic, r.numeric
        ))
    }
}

/// Weighted sum `sum(x * w)` with a fixed random `w`, so every output entry
/// gets a distinct upstream gradient.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(x), 1.0, &mut sub_rng(seed, 7));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// Names accepted by [`Tape::apply`] together with random inputs of
/// compatible shapes.
pub fn primitive_inputs(name: &str, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let m = rng.gen_range(1..5);
    let n = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(s, 1.0, rng);
    match name {
        "matmul" => vec![r(&[m, k], rng), r(&[k, n], rng)],
        "add" | "sub" | "mul" => {
            let b = if rng.gen_bool(0.5) { vec![m, n] } else { vec![1, n] };
            vec![r(&[m, n], rng), r(&b, rng)]
        }
        "l1" | "min" | "cosine_similarity" => vec![r(&[m, n], rng), r(&[m, n], rng)],
        "concat_rows" => vec![r(&[m, n], rng), r(&[k, n], rng)],
        "concat_cols" => vec![r(&[m, n], rng), r(&[m, k], rng)],
        "gaussian_kl" => vec![r(&[1, n], rng), r(&[1, n], rng)],
        "reparameterize" => vec![r(&[1, n], rng), r(&[1, n], rng), r(&[1, n], rng)],
        "layer_norm" => vec![r(&[m, n + 2], rng)],
        _ => vec![r(&[m, n], rng)],
    }
}

pub const PRIMITIVES: [&str; 24] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "concat_rows",
    "concat_cols",
    "mean_pool",
    "sum",
    "mean",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "abs",
    "log_sigmoid",
    "transpose",
    "layer_norm",
    "softmax",
    "log_sum_exp",
    "cosine_similarity",
    "l1",
    "min",
    "gaussian_kl",
    "reparameterize",
];

fn grad_primitives(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 103);
    let mut worst: f64 = 0.0;
    for name in PRIMITIVES {
        for case in 0..5u64 {
            let inputs = primitive_inputs(name, &mut rng);
            let f = |t: &mut Tape, v: &[Var]| {
                let y = t.apply(name, v)?;
                probe(t, y, case)
            };
            worst = worst.max(grad_report(name, f, &inputs)?);
        }
    }
    let logits = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let targets = [Some(1), None, Some(4), Some(0)];
    worst = worst.max(grad_report("cross_entropy", |t, v| t.cross_entropy(v[0], &targets), &[logits])?);
    let mask = [true, false, true, true, true, false];
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.masked_softmax(v[0], &mask)?;
        probe(t, y, 9)
    };
    worst = worst.max(grad_report("masked_softmax", f, &[x])?);
    Ok(format!("{} primitives, max rel error {worst:.2e}", PRIMITIVES.len() + 2))
}

/// Small encoder dimensions used by the gradient and structural checks.
pub fn reduced_martt_dims(memory_slots: usize, layers: usize) -> MarttDims {
    MarttDims {
        d_word: 4,
        d_node: 3,
        d_model: 6,
        heads: 2,
        layers,
        memory_slots,
        d_ff: 8,
        max_len: 16,
        n_labels: LabelVocab::ptb().len(),
        ln_eps: 1e-12,
    }
}

/// Random word table covering `words`.
pub fn random_words(words: &[&str], dim: usize, rng: &mut ChaCha8Rng) -> WordTable {
    let entries = words
        .iter()
        .map(|w| (w.to_string(), Tensor::randn(&[dim], 1.0, rng).into_data()))
        .collect();
    WordTable::from_entries(dim, entries).expect("unique words")
}

fn example_frames(dims: &MarttDims, rng: &mut ChaCha8Rng, opts: MaskOptions) -> Result<Vec<crate::martt::FrameInput>> {
    let tree = ConstituencyTree::parse(EXAMPLE_TREE)?;
    let words = random_words(&["Pororo", "says", "hi", "smiles"], dims.d_word, rng);
    frames_from_trees(&[tree], &words, &LabelVocab::ptb(), dims, opts, None)
}

fn grad_encode_step(o: &CheckOptions) -> Outcome {
    let dims = reduced_martt_dims(2, 2);
    let mut rng = sub_rng(o.seed, 104);
    let mut store = ParamStore::new();
    let params = MarttParams::new(&mut store, "m", dims, &mut rng).map_err(err)?;
    let frame = example_frames(&dims, &mut rng, MaskOptions::default()).map_err(err)?.remove(0);
    let mut all = store.tensors().to_vec();
    all.push(Tensor::randn(&[1, dims.d_model], 1.0, &mut rng));
    let n = store.len();
    let f = |t: &mut Tape, v: &[Var]| {
        let p = Bound::from_vars(v[..n].to_vec());
        let mem = init_memory(t, &p, &params, v[n])?;
        let out = encode_step(t, &p, &params, &frame, &mem, &mut Dropout::off())?;
        let mut loss = probe(t, out.caption, 1)?;
        for (l, m) in out.memory.iter().enumerate() {
            let pm = probe(t, *m, 2 + l as u64)?;
            loss = t.add(loss, pm)?;
        }
        Ok(loss)
    };
    let e = grad_report("encode_step", f, &all)?;
    Ok(format!("{} scalars, max rel error {e:.2e}", all.iter().map(Tensor::numel).sum::<usize>()))
}

fn grad_memory_update(o: &CheckOptions) -> Outcome {
    let dims = reduced_martt_dims(3, 1);
    let mut rng = sub_rng(o.seed, 105);
    let mut store = ParamStore::new();
    let params = MarttParams::new(&mut store, "m", dims, &mut rng).map_err(err)?;
    let upd = params.layers[0].memory.expect("memory layer");
    let mut all = store.tensors().to_vec();
    all.push(Tensor::randn(&[3, dims.d_model], 1.0, &mut rng));
    all.push(Tensor::randn(&[5, dims.d_model], 1.0, &mut rng));
    let n = store.len();
    let f = |t: &mut Tape, v: &[Var]| {
        let p = Bound::from_vars(v[..n].to_vec());
        let m = memory_update(t, &p, &upd, v[n], v[n + 1])?;
        probe(t, m, 3)
    };
    let e = grad_report("memory_update", f, &all)?;
    Ok(format!("max rel error {e:.2e}"))
}

/// Plain post-norm transformer encoder over the same layer weights, without
/// memory or masks.
pub fn plain_encoder(tape: &mut Tape, p: &Bound, params: &MarttParams, x: Var) -> Result<Var> {
    let mut h = params.input.forward(tape, p, x)?;
    let n = tape.shape(h)[0];
    let pos = tape.slice_rows(p[params.positions], 0, n)?;
    h = tape.add(h, pos)?;
    for layer in &params.layers {
        let (a, _) = layer.attn.forward(tape, p, h, h, None)?;
        let r = tape.add(h, a)?;
        let h1 = layer.ln_attn.forward(tape, p, r)?;
        let f = layer.ffn.forward(tape, p, h1)?;
        let r = tape.add(h1, f)?;
        h = layer.ln_ffn.forward(tape, p, r)?;
    }
    Ok(h)
}

fn martt_reduction(o: &CheckOptions) -> Outcome {
    let dims = reduced_martt_dims(0, 3);
    let mut rng = sub_rng(o.seed, 106);
    let mut store = ParamStore::new();
    let params = MarttParams::new(&mut store, "m", dims, &mut rng).map_err(err)?;
    let mut frame = example_frames(&dims, &mut rng, MaskOptions::default()).map_err(err)?.remove(0);
    frame.masks = MaskStack::full(frame.len(), dims.layers, 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = encode_step(&mut tape, &p, &params, &frame, &[], &mut Dropout::off()).map_err(err)?;
    let x = crate::martt::leaf_embeddings(&mut tape, &p, &params, &frame).map_err(err)?;
    let plain = plain_encoder(&mut tape, &p, &params, x).map_err(err)?;
    let diff = tape.value(out.caption).max_abs_diff(tape.value(plain));
    if diff <= 1e-10 {
        Ok(format!("max abs diff {diff:.1e}"))
    } else {
        Err(format!("max abs diff {diff:.3e} > 1e-10"))
    }
}

fn martt_causality(o: &CheckOptions) -> Outcome {
    let dims = reduced_martt_dims(2, 2);
    let mut rng = sub_rng(o.seed, 107);
    let mut store = ParamStore::new();
    let params = MarttParams::new(&mut store, "m", dims, &mut rng).map_err(err)?;
    let trees: Vec<ConstituencyTree> = (0..5)
        .map(|_| {
            let n = rng.gen_range(2..7);
            ConstituencyTree::random(&mut rng, n, &["S", "NP", "VP"])
        })
        .collect();
    let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let refs: Vec<&str> = vocab.iter().map(String::as_str).collect();
    let words = random_words(&refs, dims.d_word, &mut rng);
    let frames = frames_from_trees(&trees, &words, &LabelVocab::ptb(), &dims, MaskOptions::default(), None)
        .map_err(err)?;
    let h0 = Tensor::randn(&[1, dims.d_model], 1.0, &mut rng);
    let encode = |frames: &[crate::martt::FrameInput]| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h = tape.constant(h0.clone());
        let out = encode_story(&mut tape, &p, &params, frames, h, &mut Dropout::off())?;
        Ok(out.iter().map(|v| tape.value(*v).clone()).collect())
    };
    let base = encode(&frames).map_err(err)?;
    for k in 0..5 {
        let mut edited = frames.clone();
        let w = &mut edited[k].words;
        let shape = w.shape().to_vec();
        *w = Tensor::randn(&shape, 1.0, &mut rng);
        let out = encode(&edited).map_err(err)?;
        if out[..k] != base[..k] {
            return Err(format!("editing frame {k} changed an earlier frame"));
        }
        if k + 1 < 5 && out[k + 1] == base[k + 1] {
            return Err(format!("editing frame {k} did not reach frame {}", k + 1));
        }
    }
    Ok("5 edits, earlier frames bit-identical".into())
}

/// Random triples over small entity and relation pools.
pub fn random_triples(rng: &mut ChaCha8Rng, max: usize) -> Vec<Triple> {
    const ENTITIES: [&str; 8] = ["car", "door", "snow", "ice", "house", "tree", "ball", "dog"];
    const RELATIONS: [&str; 4] = ["HasA", "IsA", "AtLocation", "RelatedTo"];
    let n = rng.gen_range(1..=max);
    (0..n)
        .map(|_| {
            let s = ENTITIES[rng.gen_range(0..ENTITIES.len())];
            let r = RELATIONS[rng.gen_range(0..RELATIONS.len())];
            let o = ENTITIES[rng.gen_range(0..ENTITIES.len())];
            Triple::new(s, r, o).expect("non-empty fields")
        })
        .collect()
}

fn graph_words(dim: usize, rng: &mut ChaCha8Rng) -> WordTable {
    random_words(
        &["car", "door", "snow", "ice", "house", "tree", "ball", "has", "a", "is", "at", "location", "related", "to"],
        dim,
        rng,
    )
}

fn levi_invariants(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 108);
    let mut store = ParamStore::new();
    let params = GraphEncoderParams::new(&mut store, "g", 4, 6, 2, 2, 8, 1e-12, &mut rng).map_err(err)?;
    let unk = store.add("unk", Tensor::randn(&[1, 4], 0.1, &mut rng));
    let words = graph_words(4, &mut rng);
    let mut violations = Vec::new();
    for case in 0..500 {
        let triples = random_triples(&mut rng, 6);
        let g = LeviGraph::from_triples(&triples);
        let entities: std::collections::BTreeSet<&str> = triples
            .iter()
            .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
            .collect();
        if g.len() != entities.len() + triples.len() || g.relation_rows().len() != triples.len() {
            violations.push(format!("case {case}: vertex count"));
        }
        let kind = |i: usize| g.vertices[i].kind;
        if g.edges.iter().any(|&(a, b)| kind(a) == kind(b)) {
            violations.push(format!("case {case}: edge inside one side"));
        }
        if g.edges.iter().filter(|&&(a, _)| kind(a) == VertexKind::Entity).count() != triples.len() {
            violations.push(format!("case {case}: edge count"));
        }
        let mut perm: Vec<usize> = (0..g.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let encode = |graph: &LeviGraph| -> Result<Tensor> {
            let input = GraphInput::new(graph, &words)?.expect("non-empty graph");
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let e = graph_encode(&mut tape, &p, &params, unk, &input)?;
            Ok(tape.value(e.vertices).clone())
        };
        let a = encode(&g).map_err(err)?;
        let b = encode(&g.permuted(&perm)).map_err(err)?;
        let diff = (0..g.len())
            .flat_map(|i| a.row(i).iter().zip(b.row(perm[i])).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        if diff > 1e-10 {
            violations.push(format!("case {case}: permutation changed outputs by {diff:.2e}"));
        }
    }
    match violations.len() {
        0 => Ok("500 triple sets, 0 violations".into()),
        n => Err(format!("{n} violations, first: {}", violations[0])),
    }
}

fn grad_graph_encode(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 109);
    let mut store = ParamStore::new();
    let params = GraphEncoderParams::new(&mut store, "g", 4, 6, 2, 2, 8, 1e-12, &mut rng).map_err(err)?;
    let unk = store.add("unk", Tensor::randn(&[1, 4], 0.1, &mut rng));
    let words = graph_words(4, &mut rng);
    let g = LeviGraph::from_triples(&[
        Triple::new("car", "HasA", "door").map_err(err)?,
        Triple::new("car", "AtLocation", "garage").map_err(err)?,
    ]);
    let input = GraphInput::new(&g, &words).map_err(err)?.expect("non-empty");
    let f = |t: &mut Tape, v: &[Var]| {
        let p = Bound::from_vars(v.to_vec());
        let e = graph_encode(t, &p, &params, unk, &input)?;
        probe(t, e.vertices, 4)
    };
    let e = grad_report("graph_encode", f, store.tensors())?;
    Ok(format!("max rel error {e:.2e}"))
}

pub fn reduced_generator_dims() -> GeneratorDims {
    GeneratorDims {
        d_model: 6,
        d_sent: 4,
        story_len: 2,
        d_align: 4,
        grid: 2,
        image: 4,
        channels: 3,
        slots: 2,
        phrase_len: 2,
        phrase_vocab: 5,
    }
}

fn grad_generate_frame(o: &CheckOptions) -> Outcome {
    let dims = reduced_generator_dims();
    let mut rng = sub_rng(o.seed, 110);
    let mut store = ParamStore::new();
    let params = GeneratorParams::new(&mut store, "gen", dims, &mut rng).map_err(err)?;
    let mut all = store.tensors().to_vec();
    let n = all.len();
    all.push(Tensor::randn(&[1, 6], 1.0, &mut rng));
    all.push(Tensor::randn(&[3, 6], 1.0, &mut rng));
    all.push(Tensor::randn(&[2, 6], 1.0, &mut rng));
    let f = |t: &mut Tape, v: &[Var]| {
        let p = Bound::from_vars(v[..n].to_vec());
        let out = generate_frame(t, &p, &params, v[n], v[n + 1], Some(v[n + 2]))?;
        let a = probe(t, out.image, 5)?;
        let b = probe(t, out.grid, 6)?;
        t.add(a, b)
    };
    let e = grad_report("generate_frame", f, &all)?;
    Ok(format!("max rel error {e:.2e}"))
}

fn grad_loss_terms(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 111);
    let mut worst: f64 = 0.0;
    let r = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(s, 1.0, rng);

    worst = worst.max(grad_report("kl", |t, v| kl_loss(t, v[0], v[1]), &[r(&[1, 5], &mut rng), r(&[1, 5], &mut rng)])?);

    let regions: Vec<Tensor> = (0..3).map(|_| r(&[4, 3], &mut rng)).collect();
    let tokens: Vec<Tensor> = (0..3).map(|_| r(&[2, 3], &mut rng)).collect();
    let all: Vec<Tensor> = regions.iter().chain(&tokens).cloned().collect();
    let f = |t: &mut Tape, v: &[Var]| contrastive_word_loss(t, &v[..3], &v[3..], 1);
    worst = worst.max(grad_report("word", f, &all)?);

    let target = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng);
    let pred = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng);
    worst = worst.max(grad_report("bbox", |t, v| bbox_loss_mirror(t, v[0], &target), &[pred])?);

    let phrases = vec![vec![Some(1), Some(3)], vec![Some(4), None]];
    worst = worst.max(grad_report("caption", |t, v| caption_ce(t, v[0], &phrases), &[r(&[4, 5], &mut rng)])?);

    let dims = DiscriminatorDims {
        image: 4,
        pool: 2,
        hidden: 3,
        d_sent: 2,
        d_model: 3,
        story_len: 2,
        characters: 2,
    };
    let mut store = ParamStore::new();
    let disc = DiscriminatorParams::new(&mut store, "d", dims, &mut rng).map_err(err)?;
    let n = store.len();
    let mut all = store.tensors().to_vec();
    for _ in 0..2 {
        all.push(Tensor::uniform(&[16, 3], -1.0, 1.0, &mut rng));
    }
    let sentences = [r(&[1, 2], &mut rng), r(&[1, 2], &mut rng)];
    let story = r(&[1, 2], &mut rng);
    let h0 = r(&[1, 3], &mut rng);
    let chars = [Tensor::row_vector(&[1.0, 0.0]).map_err(err)?, Tensor::row_vector(&[0.0, 1.0]).map_err(err)?];
    let gan = |t: &mut Tape| -> (Vec<Var>, Var, Var) {
        let s: Vec<Var> = sentences.iter().map(|x| t.constant(x.clone())).collect();
        (s, t.constant(story.clone()), t.constant(h0.clone()))
    };
    let gen_loss = |t: &mut Tape, v: &[Var], which: usize| {
        let p = Bound::from_vars(v[..n].to_vec());
        let (s, st, h) = gan(t);
        let g = generator_gan_losses(
            t,
            &p,
            &disc,
            &GanStory {
                images: &v[n..],
                sentences: &s,
                story: st,
                h0: h,
                characters: &chars,
            },
        )?;
        Ok([g.img, g.story][which])
    };
    worst = worst.max(grad_report("img", |t, v| gen_loss(t, v, 0), &all)?);
    worst = worst.max(grad_report("story", |t, v| gen_loss(t, v, 1), &all)?);

    let real: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[16, 3], -1.0, 1.0, &mut rng)).collect();
    let f_disc = |t: &mut Tape, v: &[Var]| {
        let p = Bound::from_vars(v[..n].to_vec());
        let (s, st, h) = gan(t);
        let real: Vec<Var> = real.iter().map(|x| t.constant(x.clone())).collect();
        let mk = |images| GanStory {
            images,
            sentences: &s,
            story: st,
            h0: h,
            characters: &chars,
        };
        discriminator_loss(t, &p, &disc, &mk(&real), &mk(&v[n..]))
    };
    worst = worst.max(grad_report("discriminator", f_disc, &all)?);
    Ok(format!("7 terms, max rel error {worst:.2e}"))
}

fn loss_closed_forms(o: &CheckOptions) -> Outcome {
    let mut rng = sub_rng(o.seed, 112);
    let mut tape = Tape::new();
    let mut problems = Vec::new();
    let zeros = tape.constant(Tensor::zeros(&[1, 4]));
    let kl = kl_loss(&mut tape, zeros, zeros).map_err(err)?;
    if tape.value(kl).item() != 0.0 {
        problems.push("kl(0, 0) != 0".to_string());
    }

    let reg = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let tok = tape.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
    let one = contrastive_word_loss(&mut tape, &[reg], &[tok], 0).map_err(err)?;
    if tape.value(one).item().abs() > 1e-10 {
        problems.push("word loss at T=1 != 0".to_string());
    }
    let same = contrastive_word_loss(&mut tape, &[reg; 4], &[tok; 4], 2).map_err(err)?;
    if (tape.value(same).item() - 4f64.ln()).abs() > 1e-10 {
        problems.push("word loss for identical frames != ln T".to_string());
    }

    let target = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng);
    let mirrored = tape.constant(mirror_boxes(&target));
    let b = bbox_loss_mirror(&mut tape, mirrored, &target).map_err(err)?;
    if tape.value(b).item() != 0.0 {
        problems.push("bbox loss at mirrored target != 0".to_string());
    }

    let v = 7;
    let logits = tape.constant(Tensor::zeros(&[4, v]));
    let phrases = vec![vec![Some(1), Some(2)], vec![Some(6), None]];
    let ce = caption_ce(&mut tape, logits, &phrases).map_err(err)?;
    if (tape.value(ce).item() - (v as f64).ln()).abs() > 1e-12 {
        problems.push("uniform caption CE != ln V".to_string());
    }
    if problems.is_empty() {
        Ok("kl, word (T=1, identical), bbox mirror, caption CE".into())
    } else {
        Err(problems.join("; "))
    }
}

fn config_round_trip(_: &CheckOptions) -> Outcome {
    for cfg in [Config::default(), Config::demo()] {
        let back = Config::parse(&cfg.to_toml()).map_err(err)?;
        if back != cfg {
            return Err("config changed after a TOML round trip".into());
        }
    }
    Ok("default and demo configs".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let names: std::collections::BTreeSet<_> = registry().iter().map(|p| p.name).collect();
        assert_eq!(names.len(), registry().len());
    }

    #[test]
    fn corrupted_rule_fails_mask_checks() {
        let o = CheckOptions {
            seed: 0,
            mask_rule: MaskRule::Corrupted,
        };
        assert!(mask_exhaustive(&o).is_err());
        assert!(mask_example(&o).is_err());
    }

    #[test]
    fn fast_properties_pass() {
        let o = CheckOptions::default();
        for f in [mask_example, loss_closed_forms, config_round_trip, softmax_normalization, martt_reduction] {
            f(&o).unwrap();
        }
    }
}
