//! Alternating generator/discriminator training driver.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::generate::image_to_rgb8;
use crate::graph::{Lexicon, TripleStore};
use crate::losses::{discriminator_loss, GanStory, LossBundle};
use crate::model::{forward_story, generator_losses, sentence_vars, streams, StoryModel};
use crate::nn::{sub_rng, Adam, Dropout};
use crate::pack::{memory_images, Dataset, StoryData};
use crate::ppm::Rgb8;
use crate::tensor::{Tape, Tensor};
use crate::tree::WordTable;

pub const CSV_HEADER: &str = "step,kl,img,story,bbox,caption,word,total";

/// Batch-mean losses measured before the update of a given step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub losses: LossBundle,
    pub total: f64,
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.step, l.kl, l.img, l.story, l.bbox, l.caption, l.word, self.total
        )
    }
}

/// Per-story results of one generator pass.
struct StoryResult {
    losses: LossBundle,
    total: f64,
    grads: Vec<Tensor>,
    fakes: Vec<Tensor>,
    h0: Tensor,
}

fn generator_pass(
    model: &StoryModel,
    story: &StoryData,
    noise: &Tensor,
    dropout_seed: u64,
    with_grads: bool,
) -> Result<StoryResult> {
    let mut tape = Tape::new();
    let gp = model.g_store.bind(&mut tape, with_grads);
    let dp = model.d_store.bind(&mut tape, false);
    let mut dropout = match model.cfg.model.dropout {
        r if r > 0.0 && with_grads => Dropout::new(r, ChaCha8Rng::seed_from_u64(dropout_seed)),
        _ => Dropout::off(),
    };
    let pass = forward_story(&mut tape, &gp, model, story, noise, &mut dropout)?;
    let vars = generator_losses(&mut tape, &dp, model, story, &pass)?;
    let total = vars.total(&mut tape, model.cfg.loss)?;
    let grads = if with_grads {
        let g = tape.backward(total)?;
        gp.gradients(&tape, &g)
    } else {
        Vec::new()
    };
    Ok(StoryResult {
        losses: vars.values(&tape),
        total: tape.value(total).data()[0],
        grads,
        fakes: pass.frames.iter().map(|f| tape.value(f.image).clone()).collect(),
        h0: tape.value(pass.cond.h0).clone(),
    })
}

fn discriminator_grads(model: &StoryModel, story: &StoryData, fakes: &[Tensor], h0: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let dp = model.d_store.bind(&mut tape, true);
    let (sentences, story_emb) = sentence_vars(&mut tape, story)?;
    let h0 = tape.constant(h0.clone());
    let chars: Vec<Tensor> = story.frames.iter().map(|f| f.characters.clone()).collect();
    let real_images = story
        .frames
        .iter()
        .map(|f| {
            f.image
                .clone()
                .map(|t| tape.constant(t))
                .ok_or_else(|| Error::Invalid(format!("story {} has frames without images", story.story_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let fake_images: Vec<_> = fakes.iter().map(|t| tape.constant(t.clone())).collect();
    let gan = |images| GanStory {
        images,
        sentences: &sentences,
        story: story_emb,
        h0,
        characters: &chars,
    };
    let loss = discriminator_loss(&mut tape, &dp, &model.disc, &gan(&real_images), &gan(&fake_images))?;
    let g = tape.backward(loss)?;
    Ok(dp.gradients(&tape, &g))
}

fn mean_grads(parts: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for part in iter {
        for (a, g) in acc.iter_mut().zip(part) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
        }
    }
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    acc
}

fn mean_bundle(results: &[StoryResult]) -> (LossBundle, f64) {
    let n = results.len() as f64;
    let mut b = LossBundle::default();
    let mut total = 0.0;
    for r in results {
        let l = &r.losses;
        b.kl += l.kl / n;
        b.img += l.img / n;
        b.story += l.story / n;
        b.bbox += l.bbox / n;
        b.caption += l.caption / n;
        b.word += l.word / n;
        total += r.total / n;
    }
    (b, total)
}

/// Cycles through shuffled epochs of story indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn normal_noise(rng: &mut ChaCha8Rng, dim: usize) -> Tensor {
    let data = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![1, dim], data).expect("shape matches data")
}

/// Run `cfg.train.steps` generator updates, with a discriminator update after
/// every `g_per_d` of them. `on_row` sees one row per step plus a final
/// evaluation row, so `steps + 1` rows in total.
pub fn train(cfg: &Config, data: &Dataset, mut on_row: impl FnMut(&LossRow) -> Result<()>) -> Result<StoryModel> {
    let t = &cfg.train;
    if data.stories.is_empty() {
        return Err(Error::Invalid("training needs at least one story".into()));
    }
    if t.g_batch == 0 || t.d_batch == 0 || t.g_per_d == 0 {
        return Err(Error::Config("train batch sizes and g_per_d must be positive".into()));
    }
    if let Some(s) = data.stories.iter().find(|s| !s.has_images()) {
        return Err(Error::Invalid(format!("story {} has frames without images", s.story_id)));
    }
    let mut model = StoryModel::new(cfg, data.vocab.len())?;
    let mut g_opt = Adam::new(&model.g_store, t.lr, t.beta1, t.beta2);
    let mut d_opt = Adam::new(&model.d_store, t.lr, t.beta1, t.beta2);
    let mut sampler = BatchSampler::new(data.stories.len(), sub_rng(cfg.seed, streams::DATA_ORDER));
    let mut noise_rng = sub_rng(cfg.seed, streams::NOISE);
    let mut dropout_rng = sub_rng(cfg.seed, streams::DROPOUT);
    let d = model.d_model();
    let mut last_good = None;

    for step in 0..=t.steps {
        let batch = sampler.next_batch(t.g_batch);
        let inputs: Vec<(usize, Tensor, u64)> = batch
            .iter()
            .map(|&i| (i, normal_noise(&mut noise_rng, d), dropout_rng.gen()))
            .collect();
        let train_step = step < t.steps;
        let results = inputs
            .par_iter()
            .map(|(i, noise, seed)| generator_pass(&model, &data.stories[*i], noise, *seed, train_step))
            .collect::<Result<Vec<_>>>()?;
        let (losses, total) = mean_bundle(&results);
        if !losses.is_finite() || !total.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss".into(),
                step,
                last_good,
            });
        }
        on_row(&LossRow { step, losses, total })?;
        if !train_step {
            break;
        }
        let (grads, fakes): (Vec<_>, Vec<_>) = results.into_iter().map(|r| (r.grads, (r.fakes, r.h0))).unzip();
        let g = mean_grads(grads);
        if !g.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite {
                what: "generator gradient".into(),
                step,
                last_good,
            });
        }
        g_opt.step(&mut model.g_store, &g);

        if (step + 1) % t.g_per_d == 0 {
            let n = t.d_batch.min(batch.len());
            let dg = batch[..n]
                .par_iter()
                .zip(&fakes[..n])
                .map(|(&i, (f, h0))| discriminator_grads(&model, &data.stories[i], f, h0))
                .collect::<Result<Vec<_>>>()?;
            let dg = mean_grads(dg);
            if !dg.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite {
                    what: "discriminator gradient".into(),
                    step,
                    last_good,
                });
            }
            d_opt.step(&mut model.d_store, &dg);
        }
        last_good = Some(step);
    }
    Ok(model)
}

/// Frames for one story generated with zero noise and dropout off.
pub fn sample_frames(model: &StoryModel, story: &StoryData) -> Result<Vec<Rgb8>> {
    let noise = Tensor::zeros(&[1, model.d_model()]);
    let r = generator_pass(model, story, &noise, 0, false)?;
    let side = model.cfg.generator.image;
    Ok(r.fakes
        .iter()
        .map(|img| Rgb8 {
            width: side,
            height: side,
            pixels: image_to_rgb8(img),
        })
        .collect())
}

/// Synthetic dataset built in memory from the `SYNTHETIC` seed stream.
pub fn synthetic_dataset(cfg: &Config, n_stories: usize) -> Result<Dataset> {
    let corpus = crate::data::synthetic_corpus(cfg, n_stories, &mut sub_rng(cfg.seed, streams::SYNTHETIC));
    let words = WordTable::parse(&corpus.embeddings)?;
    let triples = TripleStore::parse(&corpus.triples)?;
    let images = memory_images(&corpus.images);
    Dataset::build(&corpus.stories, cfg, &words, &triples, &Lexicon::bundled(), &images)
}

/// Summary of a demo run as written to `run.json`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub streams: std::collections::BTreeMap<&'static str, u64>,
    pub steps: usize,
    pub stories: usize,
    pub parameters: usize,
    pub first_total: f64,
    pub last_total: f64,
}

/// Train and write `losses.csv`, `checkpoint.svckpt`, `samples/frame{k}.ppm`,
/// `config.toml` and `run.json` into `out`.
pub fn run_demo(cfg: &Config, data: &Dataset, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("losses.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let mut totals = Vec::new();
    let result = train(cfg, data, |row| {
        totals.push(row.total);
        writeln!(csv, "{}", row.to_csv()).map_err(|e| Error::io(&csv_path, e))
    });
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let model = result?;

    model.save(&out.join("checkpoint.svckpt"), cfg.train.steps)?;
    let samples = out.join("samples");
    std::fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    for (k, img) in sample_frames(&model, &data.stories[0])?.iter().enumerate() {
        img.write(&samples.join(format!("frame{k}.ppm")))?;
    }
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let summary = RunSummary {
        seed: cfg.seed,
        streams: [
            ("init", streams::INIT),
            ("noise", streams::NOISE),
            ("data_order", streams::DATA_ORDER),
            ("dropout", streams::DROPOUT),
            ("synthetic", streams::SYNTHETIC),
        ]
        .into_iter()
        .collect(),
        steps: cfg.train.steps,
        stories: data.stories.len(),
        parameters: model.g_store.num_scalars() + model.d_store.num_scalars(),
        first_total: totals[0],
        last_total: *totals.last().expect("at least one row"),
    };
    let run_path = out.join("run.json");
    std::fs::write(&run_path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&run_path, e))?;
    Ok(summary)
}

/// Parse a loss CSV written by [`run_demo`] into `(step, total)` pairs.
pub fn read_totals(text: &str) -> Result<Vec<(usize, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad loss row {l:?}"));
            if fields.len() != 8 {
                return Err(bad());
            }
            Ok((fields[0].parse().map_err(|_| bad())?, fields[7].parse().map_err(|_| bad())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn tiny_run(steps: usize) -> Vec<LossRow> {
        let mut cfg = tiny_config();
        cfg.train.steps = steps;
        cfg.train.g_batch = 2;
        cfg.train.d_batch = 1;
        let data = synthetic_dataset(&cfg, 3).unwrap();
        let mut rows = Vec::new();
        train(&cfg, &data, |r| {
            rows.push(*r);
            Ok(())
        })
        .unwrap();
        rows
    }

    #[test]
    fn zero_steps_gives_one_row() {
        let rows = tiny_run(0);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 0);
        assert!(rows[0].losses.is_finite());
    }

    #[test]
    fn runs_are_deterministic() {
        let a = tiny_run(3);
        let b = tiny_run(3);
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, sub_rng(1, 2));
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn csv_round_trip() {
        let row = LossRow {
            step: 4,
            losses: LossBundle::default(),
            total: 1.25,
        };
        let text = format!("{CSV_HEADER}\n{}\n", row.to_csv());
        assert_eq!(read_totals(&text).unwrap(), vec![(4, 1.25)]);
    }
}
