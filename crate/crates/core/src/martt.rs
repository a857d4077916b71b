//! Memory-augmented recurrent tree transformer.
//!
//! Each frame's caption is encoded by `L` post-norm transformer layers whose
//! self-attention runs over `[memory_l; caption]` under the layer's sub-tree
//! mask. After every layer the layer's memory slots are refreshed by a gated
//! updater, and the refreshed memory is handed to the next frame.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::MaskStack;
use crate::nn::{Attention, Bound, Dropout, FeedForward, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::tree::{label_chain, ConstituencyTree, LabelVocab, WordTable};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarttDims {
    pub d_word: usize,
    pub d_node: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub memory_slots: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_labels: usize,
    pub ln_eps: f64,
}

/// Gated memory refresh: `S = attn(M, [M; H])`, tanh candidate, sigmoid gate.
#[derive(Clone, Copy, Debug)]
pub struct MemoryUpdater {
    pub attn: Attention,
    pub w_mc: ParamId,
    pub w_sc: ParamId,
    pub b_c: ParamId,
    pub w_mz: ParamId,
    pub w_sz: ParamId,
    pub b_z: ParamId,
}

#[derive(Clone, Debug)]
pub struct MarttLayer {
    pub attn: Attention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
    pub memory: Option<MemoryUpdater>,
    /// Per-slot offsets added to `h0` when the memory is initialized.
    pub slot_bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct MarttParams {
    pub dims: MarttDims,
    /// Learned vector for out-of-vocabulary words.
    pub word_unk: ParamId,
    /// Node-label embedding table, `n_labels x d_node`.
    pub labels: ParamId,
    pub input: Linear,
    pub positions: ParamId,
    pub layers: Vec<MarttLayer>,
}

impl MarttParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: MarttDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, tm) = (dims.d_model, dims.memory_slots);
        let mut init = Init { rng, store };
        let word_unk = init.normal(&format!("{prefix}.word_unk"), &[1, dims.d_word], 0.1);
        let labels = init.normal(&format!("{prefix}.labels"), &[dims.n_labels, dims.d_node], 0.5);
        let input = init.linear(&format!("{prefix}.input"), dims.d_word + dims.d_node, d);
        let positions = init.normal(&format!("{prefix}.positions"), &[dims.max_len, d], 0.1);
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let p = format!("{prefix}.layer{l}");
            let attn = init.attention(&format!("{p}.attn"), d, dims.heads)?;
            let ln_attn = init.layer_norm(&format!("{p}.ln_attn"), d, dims.ln_eps);
            let ffn = init.feed_forward(&format!("{p}.ffn"), d, dims.d_ff);
            let ln_ffn = init.layer_norm(&format!("{p}.ln_ffn"), d, dims.ln_eps);
            let (memory, slot_bias) = if tm > 0 {
                let m = MemoryUpdater {
                    attn: init.attention(&format!("{p}.mem.attn"), d, dims.heads)?,
                    w_mc: init.matrix(&format!("{p}.mem.w_mc"), d, d),
                    w_sc: init.matrix(&format!("{p}.mem.w_sc"), d, d),
                    b_c: init.zeros(&format!("{p}.mem.b_c"), &[1, d]),
                    w_mz: init.matrix(&format!("{p}.mem.w_mz"), d, d),
                    w_sz: init.matrix(&format!("{p}.mem.w_sz"), d, d),
                    b_z: init.zeros(&format!("{p}.mem.b_z"), &[1, d]),
                };
                let bias = init.normal(&format!("{p}.mem.slot_bias"), &[tm, d], 0.1);
                (Some(m), Some(bias))
            } else {
                (None, None)
            };
            layers.push(MarttLayer {
                attn,
                ln_attn,
                ffn,
                ln_ffn,
                memory,
                slot_bias,
            });
        }
        Ok(MarttParams {
            dims,
            word_unk,
            labels,
            input,
            positions,
            layers,
        })
    }
}

/// Everything the encoder needs about one caption, independent of the model
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    /// In-vocabulary word vectors, zero rows for unknown words: `[T_c, d_word]`.
    pub words: Tensor,
    /// 1.0 where the word is unknown: `[T_c, 1]`.
    pub oov: Tensor,
    /// Label ids from preterminal upward, per leaf.
    pub chains: Vec<Vec<usize>>,
    pub masks: MaskStack,
}

impl FrameInput {
    pub fn from_tree(
        tree: &ConstituencyTree,
        words: &WordTable,
        vocab: &LabelVocab,
        masks: MaskStack,
        node_embed_depth: Option<usize>,
    ) -> Result<Self> {
        let n = tree.leaf_count();
        let d = words.dim();
        let mut w = Vec::with_capacity(n * d);
        let mut oov = Vec::with_capacity(n);
        for leaf in tree.leaves() {
            match words.get(&leaf.word) {
                Some(v) => {
                    w.extend_from_slice(v);
                    oov.push(0.0);
                }
                None => {
                    w.extend(std::iter::repeat_n(0.0, d));
                    oov.push(1.0);
                }
            }
        }
        let chains = (0..n)
            .map(|i| label_chain(tree, i, vocab, node_embed_depth))
            .collect();
        Ok(FrameInput {
            words: Tensor::new(vec![n, d], w)?,
            oov: Tensor::new(vec![n, 1], oov)?,
            chains,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.words.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Averaging matrix `[T_c, n_labels]`: row `i` puts `1/len` on each label
    /// of leaf `i`'s chain.
    pub fn chain_average(&self, n_labels: usize) -> Result<Tensor> {
        let n = self.chains.len();
        let mut a = vec![0.0; n * n_labels];
        for (i, chain) in self.chains.iter().enumerate() {
            let w = 1.0 / chain.len() as f64;
            for &id in chain {
                if id >= n_labels {
                    return Err(Error::Index {
                        index: id,
                        len: n_labels,
                    });
                }
                a[i * n_labels + id] += w;
            }
        }
        Tensor::new(vec![n, n_labels], a)
    }
}

/// Output of one encode step, including the attention probabilities of every
/// layer and head (`attention[layer][head]`, each `T_c x (T_m + T_c)`).
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub caption: Var,
    pub memory: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

/// Leaf embeddings (word ⊕ node) on the tape: `[T_c, d_word + d_node]`.
pub fn leaf_embeddings(tape: &mut Tape, p: &Bound, params: &MarttParams, frame: &FrameInput) -> Result<Var> {
    let words = tape.constant(frame.words.clone());
    let oov = tape.constant(frame.oov.clone());
    let unk = tape.matmul(oov, p[params.word_unk])?;
    let words = tape.add(words, unk)?;
    let avg = tape.constant(frame.chain_average(params.dims.n_labels)?);
    let nodes = tape.matmul(avg, p[params.labels])?;
    tape.concat_cols(&[words, nodes])
}

/// Memory for the first frame: every layer gets `h0` plus its slot biases.
pub fn init_memory(tape: &mut Tape, p: &Bound, params: &MarttParams, h0: Var) -> Result<Vec<Var>> {
    params
        .layers
        .iter()
        .filter_map(|l| l.slot_bias)
        .map(|bias| tape.add(p[bias], h0))
        .collect()
}

/// `M_next = (1 - Z) ⊙ C + Z ⊙ M_prev`.
pub fn memory_update(tape: &mut Tape, p: &Bound, upd: &MemoryUpdater, memory: Var, hidden: Var) -> Result<Var> {
    let ctx = tape.concat_rows(&[memory, hidden])?;
    let (s, _) = upd.attn.forward(tape, p, memory, ctx, None)?;

    let mc = tape.matmul(memory, p[upd.w_mc])?;
    let sc = tape.matmul(s, p[upd.w_sc])?;
    let c = tape.add(mc, sc)?;
    let c = tape.add(c, p[upd.b_c])?;
    let c = tape.tanh(c);

    let mz = tape.matmul(memory, p[upd.w_mz])?;
    let sz = tape.matmul(s, p[upd.w_sz])?;
    let z = tape.add(mz, sz)?;
    let z = tape.add(z, p[upd.b_z])?;
    let z = tape.sigmoid(z);

    let keep = tape.mul(z, memory)?;
    let one_minus = tape.scale(z, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let fresh = tape.mul(one_minus, c)?;
    tape.add(fresh, keep)
}

/// Encode one caption against the previous memory.
pub fn encode_step(
    tape: &mut Tape,
    p: &Bound,
    params: &MarttParams,
    frame: &FrameInput,
    memory: &[Var],
    dropout: &mut Dropout,
) -> Result<StepOutput> {
    let dims = &params.dims;
    let tc = frame.len();
    let masks = &frame.masks;
    if masks.caption_len != tc || masks.memory_slots != dims.memory_slots || masks.num_layers() != dims.layers {
        return Err(Error::Shape {
            op: "encode_step",
            shapes: vec![
                vec![masks.num_layers(), masks.caption_len, masks.memory_slots],
                vec![dims.layers, tc, dims.memory_slots],
            ],
        });
    }
    if tc > dims.max_len {
        return Err(Error::shape("encode_step", &[&[tc], &[dims.max_len]]));
    }
    let expected_mem = if dims.memory_slots > 0 { dims.layers } else { 0 };
    if memory.len() != expected_mem {
        return Err(Error::shape("encode_step", &[&[memory.len()], &[expected_mem]]));
    }

    let x = leaf_embeddings(tape, p, params, frame)?;
    let h = params.input.forward(tape, p, x)?;
    let pos = tape.slice_rows(p[params.positions], 0, tc)?;
    let mut h = tape.add(h, pos)?;

    let mut new_memory = Vec::with_capacity(memory.len());
    let mut attention = Vec::with_capacity(dims.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let ctx = if dims.memory_slots > 0 {
            tape.concat_rows(&[memory[l], h])?
        } else {
            h
        };
        let (a, probs) = layer.attn.forward(tape, p, h, ctx, Some(&masks.layers[l].data))?;
        attention.push(probs);
        let a = dropout.apply(tape, a)?;
        let r = tape.add(h, a)?;
        let h1 = layer.ln_attn.forward(tape, p, r)?;
        let f = layer.ffn.forward(tape, p, h1)?;
        let f = dropout.apply(tape, f)?;
        let r = tape.add(h1, f)?;
        let h2 = layer.ln_ffn.forward(tape, p, r)?;
        if let Some(upd) = &layer.memory {
            new_memory.push(memory_update(tape, p, upd, memory[l], h)?);
        }
        h = h2;
    }
    Ok(StepOutput {
        caption: h,
        memory: new_memory,
        attention,
    })
}

/// Fold [`encode_step`] over a story, starting from memory built on `h0`.
pub fn encode_story(
    tape: &mut Tape,
    p: &Bound,
    params: &MarttParams,
    frames: &[FrameInput],
    h0: Var,
    dropout: &mut Dropout,
) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::Invalid("story has no frames".into()));
    }
    let mut memory = init_memory(tape, p, params, h0)?;
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let step = encode_step(tape, p, params, f, &memory, dropout)?;
        memory = step.memory;
        out.push(step.caption);
    }
    Ok(out)
}

/// Frame inputs for a list of parsed captions.
pub fn frames_from_trees(
    trees: &[ConstituencyTree],
    words: &WordTable,
    vocab: &LabelVocab,
    dims: &MarttDims,
    opts: crate::mask::MaskOptions,
    node_embed_depth: Option<usize>,
) -> Result<Vec<FrameInput>> {
    trees
        .iter()
        .map(|t| {
            let masks = MaskStack::build(t, dims.layers, dims.memory_slots, opts)?;
            FrameInput::from_tree(t, words, vocab, masks, node_embed_depth)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskOptions;
    use crate::nn::sub_rng;

    fn dims(tm: usize, layers: usize) -> MarttDims {
        MarttDims {
            d_word: 4,
            d_node: 3,
            d_model: 6,
            heads: 2,
            layers,
            memory_slots: tm,
            d_ff: 8,
            max_len: 16,
            n_labels: LabelVocab::ptb().len(),
            ln_eps: 1e-12,
        }
    }

    fn words() -> WordTable {
        let mut rng = sub_rng(1, 0);
        let entries = ["Pororo", "says", "hi", "and", "smiles"]
            .iter()
            .map(|w| (w.to_string(), Tensor::randn(&[4], 1.0, &mut rng).into_data()))
            .collect();
        WordTable::from_entries(4, entries).unwrap()
    }

    const EXAMPLE: &str = "(S (NP (NNP Pororo)) (VP (VP (VBZ says) (UH hi)) (CC and) (VP (VBZ smiles))))";

    #[test]
    fn first_layer_blocks_cross_word_attention() {
        let d = dims(3, 4);
        let mut store = ParamStore::new();
        let params = MarttParams::new(&mut store, "m", d, &mut sub_rng(2, 0)).unwrap();
        let tree = ConstituencyTree::parse(EXAMPLE).unwrap();
        let frames = frames_from_trees(&[tree], &words(), &LabelVocab::ptb(), &d, MaskOptions::default(), None).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = tape.constant(Tensor::randn(&[1, 6], 1.0, &mut sub_rng(3, 0)));
        let mem = init_memory(&mut tape, &p, &params, h0).unwrap();
        assert_eq!(mem.len(), 4);
        assert_eq!(tape.shape(mem[0]), &[3, 6]);
        let out = encode_step(&mut tape, &p, &params, &frames[0], &mem, &mut Dropout::off()).unwrap();
        for head in &out.attention[0] {
            let probs = tape.value(*head);
            // "Pororo" is row 0, "says" is caption column 1 -> column 3 + 1.
            assert_eq!(probs.get2(0, 4), 0.0);
            assert!(probs.get2(0, 3) > 0.0);
        }
        assert_eq!(tape.shape(out.caption), &[5, 6]);
    }

    #[test]
    fn mask_shape_mismatch_is_error() {
        let d = dims(2, 2);
        let mut store = ParamStore::new();
        let params = MarttParams::new(&mut store, "m", d, &mut sub_rng(2, 0)).unwrap();
        let tree = ConstituencyTree::parse(EXAMPLE).unwrap();
        let mut frame = frames_from_trees(&[tree], &words(), &LabelVocab::ptb(), &d, MaskOptions::default(), None)
            .unwrap()
            .remove(0);
        frame.masks = MaskStack::full(5, 3, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = tape.constant(Tensor::zeros(&[1, 6]));
        let mem = init_memory(&mut tape, &p, &params, h0).unwrap();
        let err = encode_step(&mut tape, &p, &params, &frame, &mem, &mut Dropout::off());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_h0_and_bias_give_zero_memory() {
        let d = dims(3, 2);
        let mut store = ParamStore::new();
        let params = MarttParams::new(&mut store, "m", d, &mut sub_rng(2, 0)).unwrap();
        for l in &params.layers {
            let b = l.slot_bias.unwrap();
            *store.get_mut(b) = Tensor::zeros(&[3, 6]);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = tape.constant(Tensor::zeros(&[1, 6]));
        for m in init_memory(&mut tape, &p, &params, h0).unwrap() {
            assert!(tape.value(m).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn saturated_gate_keeps_memory() {
        let d = dims(3, 1);
        let mut store = ParamStore::new();
        let params = MarttParams::new(&mut store, "m", d, &mut sub_rng(5, 0)).unwrap();
        let upd = params.layers[0].memory.unwrap();
        for id in [upd.w_mz, upd.w_sz] {
            *store.get_mut(id) = Tensor::zeros(&[6, 6]);
        }
        // sigmoid(800) == 1.0 exactly in f64
        *store.get_mut(upd.b_z) = Tensor::full(&[1, 6], 800.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let m = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut sub_rng(6, 0)));
        let h = tape.constant(Tensor::randn(&[5, 6], 1.0, &mut sub_rng(7, 0)));
        let next = memory_update(&mut tape, &p, &upd, m, h).unwrap();
        assert_eq!(tape.value(next), tape.value(m));

        // Closed gate: output is exactly the candidate.
        *store.get_mut(upd.b_z) = Tensor::full(&[1, 6], -800.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let m = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut sub_rng(6, 0)));
        let h = tape.constant(Tensor::randn(&[5, 6], 1.0, &mut sub_rng(7, 0)));
        let next = memory_update(&mut tape, &p, &upd, m, h).unwrap();
        let v = tape.value(next).clone();
        assert!(v.data().iter().all(|x| x.abs() < 1.0));
    }
}
