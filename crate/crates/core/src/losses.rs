//! Training losses, the combined objective, and the toy discriminators.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generate::align;
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)`.
pub fn kl_loss(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    tape.gaussian_kl(mu, logvar)
}

/// Matching score `log sum_j exp(cos(h_j, a_j))` of a region grid against a
/// token matrix, as a `[1, 1]` value.
pub fn word_score(tape: &mut Tape, regions: Var, tokens: Var) -> Result<Var> {
    let a = align(tape, regions, tokens)?;
    let cos = tape.cosine_rows(regions, a.context)?;
    let row = tape.transpose(cos)?;
    tape.log_sum_exp(row)
}

/// Contrastive loss of caption `k` against every frame of its story:
/// `-S(k, k) + log sum_m exp S(m, k)`.
pub fn contrastive_word_loss(tape: &mut Tape, regions: &[Var], tokens: &[Var], k: usize) -> Result<Var> {
    if regions.is_empty() {
        return Err(Error::Invalid("contrastive loss needs at least one frame".into()));
    }
    if tokens.len() != regions.len() {
        return Err(Error::shape("contrastive_word_loss", &[&[regions.len()], &[tokens.len()]]));
    }
    if k >= regions.len() {
        return Err(Error::Index {
            index: k,
            len: regions.len(),
        });
    }
    let scores = regions
        .iter()
        .map(|&h| word_score(tape, h, tokens[k]))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat_cols(&scores)?;
    let lse = tape.log_sum_exp(all)?;
    let l = tape.sub(lse, scores[k])?;
    tape.reshape(l, &[1])
}

/// Mean of [`contrastive_word_loss`] over every caption of the story.
pub fn story_word_loss(tape: &mut Tape, regions: &[Var], tokens: &[Var]) -> Result<Var> {
    let terms = (0..regions.len())
        .map(|k| contrastive_word_loss(tape, regions, tokens, k))
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &terms)
}

/// `(x1, y1, x2, y2) -> (1 - x2, y1, 1 - x1, y2)`.
pub fn mirror_box(b: [f64; 4]) -> [f64; 4] {
    [1.0 - b[2], b[1], 1.0 - b[0], b[3]]
}

pub fn mirror_boxes(boxes: &Tensor) -> Tensor {
    let data = boxes
        .data()
        .chunks(4)
        .flat_map(|c| mirror_box([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(boxes.shape().to_vec(), data).expect("same shape")
}

/// L1 box regression against the target or its horizontal mirror, whichever
/// is lower for the frame as a whole; averaged over slots.
pub fn bbox_loss_mirror(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let k = target.rows();
    if target.cols() != 4 || tape.shape(pred) != target.shape() {
        return Err(Error::shape("bbox_loss_mirror", &[tape.shape(pred), target.shape()]));
    }
    let t = tape.constant(target.clone());
    let m = tape.constant(mirror_boxes(target));
    let direct = tape.l1(pred, t)?;
    let mirrored = tape.l1(pred, m)?;
    let best = tape.minimum(direct, mirrored)?;
    Ok(tape.scale(best, 1.0 / k as f64))
}

/// Phrase cross-entropy: token mean within each slot, then mean over slots
/// that have at least one token. `targets[k]` holds slot `k`'s ids, `None`
/// for padding; `logits` is `[slots * phrase_len, vocab]`.
pub fn caption_ce(tape: &mut Tape, logits: Var, targets: &[Vec<Option<usize>>]) -> Result<Var> {
    let k = targets.len();
    let rows = tape.shape(logits)[0];
    if k == 0 || !rows.is_multiple_of(k) {
        return Err(Error::shape("caption_ce", &[tape.shape(logits), &[k]]));
    }
    let t = rows / k;
    let mut terms = Vec::new();
    for (slot, ids) in targets.iter().enumerate() {
        if ids.len() != t {
            return Err(Error::shape("caption_ce", &[&[ids.len()], &[t]]));
        }
        if ids.iter().all(Option::is_none) {
            continue;
        }
        let l = tape.slice_rows(logits, slot * t, t)?;
        terms.push(tape.cross_entropy(l, ids)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    mean_of(tape, &terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// `-mean(y log sigma(z) + (1 - y) log sigma(-z))` for multi-hot `labels`.
pub fn multilabel_bce(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    if tape.shape(logits) != labels.shape() {
        return Err(Error::shape("multilabel_bce", &[tape.shape(logits), labels.shape()]));
    }
    let y = tape.constant(labels.clone());
    let not_y = tape.constant(Tensor::new(
        labels.shape().to_vec(),
        labels.data().iter().map(|v| 1.0 - v).collect(),
    )?);
    let pos = tape.log_sigmoid(logits);
    let neg_logits = tape.scale(logits, -1.0);
    let neg = tape.log_sigmoid(neg_logits);
    let a = tape.mul(y, pos)?;
    let b = tape.mul(not_y, neg)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.scale(m, -1.0))
}

/// `-mean log sigma(z)` (target real) or `-mean log sigma(-z)` (target fake).
pub fn logistic_loss(tape: &mut Tape, logits: Var, real: bool) -> Result<Var> {
    let z = if real { logits } else { tape.scale(logits, -1.0) };
    let ls = tape.log_sigmoid(z);
    let m = tape.mean(ls)?;
    Ok(tape.scale(m, -1.0))
}

/// Loss terms of the generator objective, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub kl: f64,
    pub img: f64,
    pub story: f64,
    pub bbox: f64,
    pub caption: f64,
    pub word: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bbox: f64,
    pub caption: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bbox: 1.0, caption: 1.0 }
    }
}

impl LossBundle {
    pub fn total(&self, w: LossWeights) -> f64 {
        self.kl + self.img + self.story + w.bbox * self.bbox + w.caption * self.caption + self.word
    }

    pub fn is_finite(&self) -> bool {
        [self.kl, self.img, self.story, self.bbox, self.caption, self.word]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss terms still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kl: Var,
    pub img: Var,
    pub story: Var,
    pub bbox: Var,
    pub caption: Var,
    pub word: Var,
}

impl LossVars {
    pub fn total(&self, tape: &mut Tape, w: LossWeights) -> Result<Var> {
        let bbox = tape.scale(self.bbox, w.bbox);
        let caption = tape.scale(self.caption, w.caption);
        let mut acc = tape.add(self.kl, self.img)?;
        for v in [self.story, bbox, caption, self.word] {
            acc = tape.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn values(&self, tape: &Tape) -> LossBundle {
        let v = |x: Var| tape.value(x).item();
        LossBundle {
            kl: v(self.kl),
            img: v(self.img),
            story: v(self.story),
            bbox: v(self.bbox),
            caption: v(self.caption),
            word: v(self.word),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorDims {
    pub image: usize,
    /// Side of the mean-pooled image the features are read from.
    pub pool: usize,
    pub hidden: usize,
    pub d_sent: usize,
    pub d_model: usize,
    pub story_len: usize,
    pub characters: usize,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    pub dims: DiscriminatorDims,
    pub features: Linear,
    pub img_hidden: Linear,
    pub img_out: Linear,
    pub characters: Linear,
    pub story_hidden: Linear,
    pub story_out: Linear,
    pool: Tensor,
}

/// `[pool^2, image^2]` averaging matrix over square blocks.
pub fn pool_matrix(image: usize, pool: usize) -> Result<Tensor> {
    if pool == 0 || !image.is_multiple_of(pool) {
        return Err(Error::Config(format!("image size {image} is not a multiple of pool {pool}")));
    }
    let s = image / pool;
    let w = 1.0 / (s * s) as f64;
    let mut data = vec![0.0; pool * pool * image * image];
    for px in 0..image * image {
        let (y, x) = (px / image, px % image);
        let r = (y / s) * pool + x / s;
        data[r * image * image + px] = w;
    }
    Tensor::new(vec![pool * pool, image * image], data)
}

impl DiscriminatorParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: DiscriminatorDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let pool = pool_matrix(dims.image, dims.pool)?;
        let h = dims.hidden;
        let mut init = Init { rng, store };
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(DiscriminatorParams {
            dims,
            features: init.linear(&n("features"), dims.pool * dims.pool * 3, h),
            img_hidden: init.linear(&n("img.hidden"), h + dims.d_sent + dims.d_model, h),
            img_out: init.linear(&n("img.out"), h, 1),
            characters: init.linear(&n("img.characters"), h, dims.characters),
            story_hidden: init.linear(&n("story.hidden"), dims.story_len * h + dims.d_sent, h),
            story_out: init.linear(&n("story.out"), h, 1),
            pool,
        })
    }

    /// Shared frame features, `[pixels, 3] -> [1, hidden]`.
    pub fn frame_features(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let pool = tape.constant(self.pool.clone());
        let pooled = tape.matmul(pool, image)?;
        let flat = tape.reshape(pooled, &[1, self.dims.pool * self.dims.pool * 3])?;
        let f = self.features.forward(tape, p, flat)?;
        Ok(tape.relu(f))
    }

    /// Real/fake logit and character logits for one frame.
    pub fn image_logits(&self, tape: &mut Tape, p: &Bound, features: Var, sentence: Var, h0: Var) -> Result<(Var, Var)> {
        let x = tape.concat_cols(&[features, sentence, h0])?;
        let h = self.img_hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        let logit = self.img_out.forward(tape, p, h)?;
        let chars = self.characters.forward(tape, p, features)?;
        Ok((logit, chars))
    }

    /// Real/fake logit for a whole story given its frame features.
    pub fn story_logit(&self, tape: &mut Tape, p: &Bound, features: &[Var], story: Var) -> Result<Var> {
        if features.len() != self.dims.story_len {
            return Err(Error::shape("story_logit", &[&[features.len()], &[self.dims.story_len]]));
        }
        let mut parts = features.to_vec();
        parts.push(story);
        let x = tape.concat_cols(&parts)?;
        let h = self.story_hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.story_out.forward(tape, p, h)
    }
}

/// One story as seen by the discriminators.
#[derive(Clone, Debug)]
pub struct GanStory<'a> {
    /// Frame images, `[pixels, 3]` each.
    pub images: &'a [Var],
    /// Sentence embeddings, `[1, d_sent]` each.
    pub sentences: &'a [Var],
    /// Mean sentence embedding, `[1, d_sent]`.
    pub story: Var,
    pub h0: Var,
    /// Multi-hot character labels per frame, `[1, characters]` each.
    pub characters: &'a [Tensor],
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorGan {
    /// Non-saturating image loss plus character loss on generated frames.
    pub img: Var,
    pub story: Var,
    pub characters: Var,
}

/// Generator side: `-log D(fake)` for frames and story, plus the character
/// loss on the generated frames.
pub fn generator_gan_losses(tape: &mut Tape, p: &Bound, d: &DiscriminatorParams, fake: &GanStory) -> Result<GeneratorGan> {
    let (feats, img_terms, char_terms) = frame_terms(tape, p, d, fake, true)?;
    let adv = mean_of(tape, &img_terms)?;
    let characters = mean_of(tape, &char_terms)?;
    let img = tape.add(adv, characters)?;
    let s = d.story_logit(tape, p, &feats, fake.story)?;
    let story = logistic_loss(tape, s, true)?;
    Ok(GeneratorGan { img, story, characters })
}

/// Discriminator side: real frames/stories toward 1, fake toward 0, plus the
/// character loss on real frames.
pub fn discriminator_loss(
    tape: &mut Tape,
    p: &Bound,
    d: &DiscriminatorParams,
    real: &GanStory,
    fake: &GanStory,
) -> Result<Var> {
    let (rf, r_img, r_char) = frame_terms(tape, p, d, real, true)?;
    let (ff, f_img, _) = frame_terms(tape, p, d, fake, false)?;
    let img_real = mean_of(tape, &r_img)?;
    let img_fake = mean_of(tape, &f_img)?;
    let chars = mean_of(tape, &r_char)?;
    let sr = d.story_logit(tape, p, &rf, real.story)?;
    let sf = d.story_logit(tape, p, &ff, fake.story)?;
    let story_real = logistic_loss(tape, sr, true)?;
    let story_fake = logistic_loss(tape, sf, false)?;
    let mut acc = tape.add(img_real, img_fake)?;
    for v in [chars, story_real, story_fake] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

type FrameTerms = (Vec<Var>, Vec<Var>, Vec<Var>);

fn frame_terms(tape: &mut Tape, p: &Bound, d: &DiscriminatorParams, s: &GanStory, target_real: bool) -> Result<FrameTerms> {
    if s.images.len() != s.sentences.len() || s.images.len() != s.characters.len() || s.images.is_empty() {
        return Err(Error::shape(
            "gan_losses",
            &[&[s.images.len()], &[s.sentences.len()], &[s.characters.len()]],
        ));
    }
    let mut feats = Vec::new();
    let mut adv = Vec::new();
    let mut chars = Vec::new();
    for ((&img, &sent), labels) in s.images.iter().zip(s.sentences).zip(s.characters) {
        let f = d.frame_features(tape, p, img)?;
        let (logit, cl) = d.image_logits(tape, p, f, sent, s.h0)?;
        adv.push(logistic_loss(tape, logit, target_real)?);
        chars.push(multilabel_bce(tape, cl, labels)?);
        feats.push(f);
    }
    Ok((feats, adv, chars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sub_rng;

    #[test]
    fn kl_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let k = kl_loss(&mut tape, z, z).unwrap();
        assert_eq!(tape.value(k).item(), 0.0);
        let one = tape.constant(Tensor::row_vector(&[1.0]).unwrap());
        let z1 = tape.constant(Tensor::zeros(&[1, 1]));
        let k = kl_loss(&mut tape, one, z1).unwrap();
        assert_eq!(tape.value(k).item(), 0.5);
    }

    #[test]
    fn single_frame_contrastive_is_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut sub_rng(1, 0)));
        let m = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut sub_rng(1, 1)));
        let l = contrastive_word_loss(&mut tape, &[h], &[m], 0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(contrastive_word_loss(&mut tape, &[], &[], 0).is_err());
    }

    #[test]
    fn identical_frames_give_log_t() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut sub_rng(2, 0)));
        let m = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut sub_rng(2, 1)));
        let l = contrastive_word_loss(&mut tape, &[h, h, h], &[m, m, m], 1).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mirror_target_costs_nothing() {
        let target = Tensor::from_rows(&[vec![0.1, 0.2, 0.4, 0.9], vec![0.5, 0.0, 0.75, 0.25]]).unwrap();
        let mut tape = Tape::new();
        let pred = tape.constant(mirror_boxes(&target));
        let l = bbox_loss_mirror(&mut tape, pred, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let pred = tape.constant(target.clone());
        let l = bbox_loss_mirror(&mut tape, pred, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_caption_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[6, 11]));
        let targets = vec![vec![Some(1), Some(2), None], vec![Some(10), None, None]];
        let l = caption_ce(&mut tape, logits, &targets).unwrap();
        assert!((tape.value(l).item() - 11f64.ln()).abs() < 1e-12);
        let bad = vec![vec![Some(11), None, None], vec![None, None, None]];
        assert!(matches!(
            caption_ce(&mut tape, logits, &bad),
            Err(Error::TokenOutOfRange { id: 11, vocab: 11 })
        ));
    }

    #[test]
    fn half_probability_discriminator() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 1]));
        let real = logistic_loss(&mut tape, z, true).unwrap();
        let fake = logistic_loss(&mut tape, z, false).unwrap();
        assert!((tape.value(real).item() - 2f64.ln()).abs() < 1e-15);
        assert!((tape.value(fake).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clamped_generator_loss() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[1, 1], -1e6));
        let l = logistic_loss(&mut tape, z, true).unwrap();
        let v = tape.value(l).item();
        assert!(v.is_finite() && v <= 30.0 + 1e-9 && v > 29.0);
    }

    #[test]
    fn bundle_total() {
        let b = LossBundle {
            kl: 1.0,
            img: 1.0,
            story: 1.0,
            bbox: 1.0,
            caption: 1.0,
            word: 1.0,
        };
        assert_eq!(b.total(LossWeights::default()), 6.0);
        assert_eq!(LossBundle::default().total(LossWeights::default()), 0.0);
    }

    #[test]
    fn pool_rows_average() {
        let p = pool_matrix(4, 2).unwrap();
        assert_eq!(p.shape(), [4, 16]);
        for r in 0..4 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(pool_matrix(5, 2).is_err());
    }
}
