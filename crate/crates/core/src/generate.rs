//! Conditioning, caption/entity fusion, word-region alignment, and a small
//! two-stage frame generator with dense-captioning heads.
//!
//! The generator is deliberately tiny: dense layers and nearest-neighbour
//! upsampling only. Images are `[H * W, 3]` row-major pixel matrices with
//! values in `[-1, 1]`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorDims {
    /// Encoder width (caption tokens, entities, `h0`).
    pub d_model: usize,
    /// Sentence-embedding width.
    pub d_sent: usize,
    /// Frames per story seen by the conditioning heads.
    pub story_len: usize,
    /// Alignment space width.
    pub d_align: usize,
    /// Feature grid side.
    pub grid: usize,
    /// Image side in pixels; a multiple of `grid`.
    pub image: usize,
    /// Channels of the stage-2 feature map.
    pub channels: usize,
    /// Dense-caption slots per frame.
    pub slots: usize,
    /// Tokens per slot phrase.
    pub phrase_len: usize,
    pub phrase_vocab: usize,
}

impl GeneratorDims {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn pixels(&self) -> usize {
        self.image * self.image
    }

    /// Pixels per region side.
    pub fn patch(&self) -> usize {
        self.image / self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.image == 0 || !self.image.is_multiple_of(self.grid) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of grid {}",
                self.image, self.grid
            )));
        }
        if self.story_len == 0 || self.slots == 0 || self.phrase_len == 0 || self.phrase_vocab == 0 {
            return Err(Error::Config("generator dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub dims: GeneratorDims,
    pub cond_mu: Linear,
    pub cond_logvar: Linear,
    pub f_entity: Linear,
    pub f_caption: Linear,
    pub stage1: Linear,
    pub stage2: Linear,
    pub to_rgb: Linear,
    /// Patch encoder mapping an image back to a region grid.
    pub regions: Linear,
    pub slot_queries: ParamId,
    pub box_head: Linear,
    pub phrase_positions: ParamId,
    pub vocab_head: Linear,
}

impl GeneratorParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: GeneratorDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let (d, da) = (dims.d_model, dims.d_align);
        let patch_in = dims.patch() * dims.patch() * 3;
        let mut init = Init { rng, store };
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(GeneratorParams {
            dims,
            cond_mu: init.linear(&n("cond.mu"), dims.story_len * dims.d_sent, d),
            cond_logvar: init.linear(&n("cond.logvar"), dims.story_len * dims.d_sent, d),
            f_entity: init.linear(&n("f_entity"), d, da),
            f_caption: init.linear(&n("f_caption"), d, da),
            stage1: init.linear(&n("stage1"), 2 * d, dims.regions() * da),
            stage2: init.linear(&n("stage2"), 2 * da, dims.channels),
            to_rgb: init.linear(&n("to_rgb"), dims.channels, 3),
            regions: init.linear(&n("regions"), patch_in, da),
            slot_queries: init.normal(&n("densecap.queries"), &[dims.slots, da], 1.0),
            box_head: init.linear(&n("densecap.box"), da, 4),
            phrase_positions: init.normal(&n("densecap.positions"), &[dims.phrase_len, da], 1.0),
            vocab_head: init.linear(&n("densecap.vocab"), da, dims.phrase_vocab),
        })
    }
}

/// Story conditioning vector and the Gaussian it was drawn from.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub h0: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// `h0 = mu + exp(logvar / 2) * noise`, with `mu` and `logvar` read from the
/// concatenated sentence embeddings (`[story_len, d_sent]`). `noise` is `[1, d_model]`.
pub fn cond_augment(
    tape: &mut Tape,
    p: &Bound,
    params: &GeneratorParams,
    sentences: &Tensor,
    noise: &Tensor,
) -> Result<Conditioning> {
    let dims = &params.dims;
    if sentences.shape() != [dims.story_len, dims.d_sent] {
        return Err(Error::shape("cond_augment", &[sentences.shape(), &[dims.story_len, dims.d_sent]]));
    }
    let s = tape.constant(sentences.reshape(&[1, dims.story_len * dims.d_sent])?);
    let mu = params.cond_mu.forward(tape, p, s)?;
    let logvar = params.cond_logvar.forward(tape, p, s)?;
    let noise = tape.constant(noise.clone());
    let h0 = tape.reparameterize(mu, logvar, noise)?;
    Ok(Conditioning { h0, mu, logvar })
}

/// Projected entities stacked above projected caption tokens.
pub fn fuse_tokens(
    tape: &mut Tape,
    p: &Bound,
    params: &GeneratorParams,
    caption: Var,
    entities: Option<Var>,
) -> Result<Var> {
    let c = params.f_caption.forward(tape, p, caption)?;
    match entities {
        Some(e) => {
            let e = params.f_entity.forward(tape, p, e)?;
            tape.concat_rows(&[e, c])
        }
        None => Ok(c),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    /// `[n_regions, n_tokens]`, rows sum to one.
    pub beta: Var,
    /// `[n_regions, d_align]`.
    pub context: Var,
}

/// Word-context vectors: `beta = softmax(h m^T)`, `context = beta m`.
pub fn align(tape: &mut Tape, regions: Var, tokens: Var) -> Result<Alignment> {
    let mt = tape.transpose(tokens)?;
    let scores = tape.matmul(regions, mt)?;
    let beta = tape.softmax(scores)?;
    let context = tape.matmul(beta, tokens)?;
    Ok(Alignment { beta, context })
}

#[derive(Clone, Copy, Debug)]
pub struct FrameOutput {
    /// `[image * image, 3]`.
    pub image: Var,
    /// Stage-1 feature grid, `[grid * grid, d_align]`.
    pub grid: Var,
    pub alignment: Alignment,
    /// Fused token matrix the grid was aligned against.
    pub tokens: Var,
}

/// Pixel `(y, x)` of the image reads region `(y / patch, x / patch)`.
pub fn upsample_index(grid: usize, image: usize) -> Vec<usize> {
    let s = image / grid;
    (0..image * image)
        .map(|px| {
            let (y, x) = (px / image, px % image);
            (y / s) * grid + x / s
        })
        .collect()
}

/// Pixels reordered so that every region's patch is contiguous.
pub fn patch_index(grid: usize, image: usize) -> Vec<usize> {
    let s = image / grid;
    let mut out = Vec::with_capacity(image * image);
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..s {
                for dx in 0..s {
                    out.push((gy * s + dy) * image + gx * s + dx);
                }
            }
        }
    }
    out
}

/// Two-stage frame generation conditioned on `h0`, the encoded caption and
/// the story's entity encodings.
pub fn generate_frame(
    tape: &mut Tape,
    p: &Bound,
    params: &GeneratorParams,
    h0: Var,
    caption: Var,
    entities: Option<Var>,
) -> Result<FrameOutput> {
    let dims = &params.dims;
    let pooled = tape.mean_rows(caption)?;
    let o = tape.concat_cols(&[pooled, h0])?;
    let flat = params.stage1.forward(tape, p, o)?;
    let grid = tape.reshape(flat, &[dims.regions(), dims.d_align])?;

    let tokens = fuse_tokens(tape, p, params, caption, entities)?;
    let alignment = align(tape, grid, tokens)?;

    let joint = tape.concat_cols(&[grid, alignment.context])?;
    let feat = params.stage2.forward(tape, p, joint)?;
    let feat = tape.relu(feat);
    let up = tape.gather_rows(feat, Rc::new(upsample_index(dims.grid, dims.image)))?;
    let rgb = params.to_rgb.forward(tape, p, up)?;
    let image = tape.tanh(rgb);
    Ok(FrameOutput {
        image,
        grid,
        alignment,
        tokens,
    })
}

/// Region features of an image (`[pixels, 3]` -> `[regions, d_align]`).
pub fn encode_regions(tape: &mut Tape, p: &Bound, params: &GeneratorParams, image: Var) -> Result<Var> {
    let dims = &params.dims;
    let patches = tape.gather_rows(image, Rc::new(patch_index(dims.grid, dims.image)))?;
    let s = dims.patch();
    let patches = tape.reshape(patches, &[dims.regions(), s * s * 3])?;
    let h = params.regions.forward(tape, p, patches)?;
    Ok(tape.tanh(h))
}

#[derive(Clone, Copy, Debug)]
pub struct DenseCaptions {
    /// `[slots, 4]` as `(x1, y1, x2, y2)` in `[0, 1]` with `x1 <= x2`, `y1 <= y2`.
    pub boxes: Var,
    /// `[slots * phrase_len, phrase_vocab]`, slot-major.
    pub logits: Var,
}

/// Box and phrase predictions per slot from an attention readout over the grid.
pub fn densecap_heads(tape: &mut Tape, p: &Bound, params: &GeneratorParams, grid: Var) -> Result<DenseCaptions> {
    let dims = &params.dims;
    let gt = tape.transpose(grid)?;
    let scores = tape.matmul(p[params.slot_queries], gt)?;
    let scores = tape.scale(scores, 1.0 / (dims.d_align as f64).sqrt());
    let attn = tape.softmax(scores)?;
    let read = tape.matmul(attn, grid)?;

    let raw = params.box_head.forward(tape, p, read)?;
    let raw = tape.sigmoid(raw);
    let a = tape.slice_cols(raw, 0, 2)?;
    let b = tape.slice_cols(raw, 2, 2)?;
    let lo = tape.minimum(a, b)?;
    let sum = tape.add(a, b)?;
    let hi = tape.sub(sum, lo)?;
    let x1 = tape.slice_cols(lo, 0, 1)?;
    let y1 = tape.slice_cols(lo, 1, 1)?;
    let x2 = tape.slice_cols(hi, 0, 1)?;
    let y2 = tape.slice_cols(hi, 1, 1)?;
    let boxes = tape.concat_cols(&[x1, y1, x2, y2])?;

    let (k, t) = (dims.slots, dims.phrase_len);
    let per_slot: Vec<usize> = (0..k * t).map(|i| i / t).collect();
    let per_pos: Vec<usize> = (0..k * t).map(|i| i % t).collect();
    let slot_rows = tape.gather_rows(read, Rc::new(per_slot))?;
    let pos_rows = tape.gather_rows(p[params.phrase_positions], Rc::new(per_pos))?;
    let h = tape.add(slot_rows, pos_rows)?;
    let h = tape.tanh(h);
    let logits = params.vocab_head.forward(tape, p, h)?;
    Ok(DenseCaptions { boxes, logits })
}

/// Image tensor (values in `[-1, 1]`) as 8-bit RGB bytes.
pub fn image_to_rgb8(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
        .collect()
}

/// 8-bit RGB bytes as an image tensor in `[-1, 1]`.
pub fn rgb8_to_image(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.len().is_multiple_of(3) {
        return Err(Error::Format(format!("{} bytes is not a whole number of RGB pixels", bytes.len())));
    }
    let data = bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![bytes.len() / 3, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sub_rng;

    fn dims() -> GeneratorDims {
        GeneratorDims {
            d_model: 6,
            d_sent: 4,
            story_len: 2,
            d_align: 5,
            grid: 2,
            image: 8,
            channels: 3,
            slots: 3,
            phrase_len: 2,
            phrase_vocab: 7,
        }
    }

    fn setup() -> (ParamStore, GeneratorParams) {
        let mut store = ParamStore::new();
        let params = GeneratorParams::new(&mut store, "g", dims(), &mut sub_rng(3, 0)).unwrap();
        (store, params)
    }

    #[test]
    fn zero_noise_gives_mean() {
        let (store, params) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let s = Tensor::randn(&[2, 4], 1.0, &mut sub_rng(1, 1));
        let c = cond_augment(&mut tape, &p, &params, &s, &Tensor::zeros(&[1, 6])).unwrap();
        assert_eq!(tape.value(c.h0), tape.value(c.mu));
    }

    #[test]
    fn fuse_puts_entities_first() {
        let (store, params) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let cap = tape.constant(Tensor::randn(&[5, 6], 1.0, &mut sub_rng(1, 2)));
        let ent = tape.constant(Tensor::randn(&[4, 6], 1.0, &mut sub_rng(1, 3)));
        let fused = fuse_tokens(&mut tape, &p, &params, cap, Some(ent)).unwrap();
        assert_eq!(tape.shape(fused), [9, 5]);
        let e = params.f_entity.forward(&mut tape, &p, ent).unwrap();
        assert_eq!(tape.value(fused).row(0), tape.value(e).row(0));
        let only = fuse_tokens(&mut tape, &p, &params, cap, None).unwrap();
        assert_eq!(tape.shape(only), [5, 5]);
    }

    #[test]
    fn single_token_alignment() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut sub_rng(2, 0)));
        let m = tape.constant(Tensor::row_vector(&[0.5, -1.0, 2.0]).unwrap());
        let a = align(&mut tape, h, m).unwrap();
        assert!(tape.value(a.beta).data().iter().all(|&b| b == 1.0));
        for r in 0..4 {
            assert_eq!(tape.value(a.context).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn frame_shapes_and_range() {
        let (store, params) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = tape.constant(Tensor::randn(&[1, 6], 1.0, &mut sub_rng(4, 0)));
        let cap = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut sub_rng(4, 1)));
        let out = generate_frame(&mut tape, &p, &params, h0, cap, None).unwrap();
        assert_eq!(tape.shape(out.image), [64, 3]);
        assert_eq!(tape.shape(out.grid), [4, 5]);
        assert!(tape.value(out.image).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let dc = densecap_heads(&mut tape, &p, &params, out.grid).unwrap();
        assert_eq!(tape.shape(dc.boxes), [3, 4]);
        assert_eq!(tape.shape(dc.logits), [6, 7]);
        let b = tape.value(dc.boxes);
        for r in 0..3 {
            let row = b.row(r);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(row[0] <= row[2] && row[1] <= row[3]);
        }
    }

    #[test]
    fn zero_params_give_black_frame() {
        let (mut store, params) = setup();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = tape.constant(Tensor::randn(&[1, 6], 1.0, &mut sub_rng(4, 0)));
        let cap = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut sub_rng(4, 1)));
        let out = generate_frame(&mut tape, &p, &params, h0, cap, None).unwrap();
        assert!(tape.value(out.image).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_index_is_a_permutation() {
        let mut idx = patch_index(4, 16);
        idx.sort_unstable();
        assert_eq!(idx, (0..256).collect::<Vec<_>>());
        let up = upsample_index(2, 4);
        assert_eq!(up, [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn rgb_round_trip() {
        let bytes = vec![0u8, 127, 255, 10, 200, 64];
        assert_eq!(image_to_rgb8(&rgb8_to_image(&bytes).unwrap()), bytes);
    }
}
