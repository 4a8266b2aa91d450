//! Contrastive pretraining of the image and text stand-ins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairedSample, Split, TokenId, Vocabulary, N_COLORS, N_OBJECTS, N_TINTS};
use crate::error::{Error, Result};
use crate::model::{info_nce, TAU_INIT, TAU_MAX, TAU_MIN};
use crate::numerics::{adam_step, AdamConfig, AdamState, LrSchedule, Stream, Tape, Tensor};
use crate::params::Binder;

use super::config::EncoderConfig;
use super::stack::{embed_patches, embed_tokens, image_encode, text_encode, FrozenEncoderSet};

const LOG_TAU: &str = "pretrain.log_temperature";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub final_lr: f64,
    /// Chance that a pretraining pair gets a random background tint, named
    /// by a tint word at the start of its caption.
    pub tint_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, peak_lr: 2e-3, warmup_steps: 100, final_lr: 1e-5, tint_prob: 0.5 }
    }
}

impl PretrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            final_lr: self.final_lr,
            total_steps: self.steps,
        }
    }
}

/// Images of the corpus training splits with all their captions.
struct Unit<'a> {
    image: &'a [Vec<f64>],
    captions: Vec<&'a [TokenId]>,
}

fn training_units<'a>(corpus: &[&'a Dataset]) -> Vec<Unit<'a>> {
    let mut by_image: BTreeMap<(usize, u64), Unit<'a>> = BTreeMap::new();
    for (d, ds) in corpus.iter().enumerate() {
        for s in ds.samples.iter().filter(|s| s.split == Split::Train) {
            by_image
                .entry((d, s.image_id))
                .or_insert_with(|| Unit { image: &s.image, captions: Vec::new() })
                .captions
                .push(&s.caption);
        }
    }
    by_image.into_values().collect()
}

/// Jointly trains the image and text encoders with the symmetric contrastive
/// loss on ground-truth captions, some of them with a described tint. The audio encoder keeps its seeded init.
/// Returns the trained set and the loss of every step.
pub fn pretrain_standins(
    corpus: &[&Dataset],
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(FrozenEncoderSet, Vec<f64>)> {
    let units = training_units(corpus);
    if units.len() < 2 {
        return Err(Error::InvalidArgument("pretraining corpus needs at least two training images".into()));
    }
    let schedule = cfg.schedule();
    schedule.validate()?;
    let mut set = FrozenEncoderSet::init(enc_cfg, seed)?;
    let mut store = set.store.with_prefix("image.");
    store.extend(set.store.with_prefix("text."));
    store.insert(LOG_TAU, Tensor::scalar(TAU_INIT.ln()));
    let adam_cfg = AdamConfig::default();
    let mut adam = AdamState::new(store.iter().map(|(_, t)| t));
    let mut rng = Stream::new(seed).fork_str("pretrain");
    let batch = cfg.batch_size.min(units.len());
    let mut order: Vec<usize> = (0..units.len()).collect();
    let tint_words = Vocabulary::standard().tint_ids();
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 1..=cfg.steps {
        rng.shuffle(&mut order);
        let picked = &order[..batch];
        let mut owned_images = Vec::with_capacity(batch);
        let mut owned_texts = Vec::with_capacity(batch);
        for &i in picked {
            let mut image = units[i].image.to_vec();
            let mut caption = units[i].captions[rng.below(units[i].captions.len())].to_vec();
            if rng.bernoulli(cfg.tint_prob) {
                let t = rng.below(N_TINTS);
                for cell in &mut image {
                    cell[N_OBJECTS + N_COLORS + t] = 1.0;
                }
                caption.insert(0, tint_words[t]);
            }
            owned_images.push(image);
            owned_texts.push(caption);
        }
        let images: Vec<&[Vec<f64>]> = owned_images.iter().map(Vec::as_slice).collect();
        let texts: Vec<&[TokenId]> = owned_texts.iter().map(Vec::as_slice).collect();

        let mut tape = Tape::new();
        let binder = Binder::new(&store, true);
        let e_v = embed_patches(&mut tape, &binder, &images, enc_cfg)?;
        let f_v = image_encode(&mut tape, &binder, &e_v, None, enc_cfg)?;
        let (e_t, _) = embed_tokens(&mut tape, &binder, &texts, enc_cfg)?;
        let f_t = text_encode(&mut tape, &binder, &e_t, None, enc_cfg)?;
        let log_tau = binder.var(&mut tape, LOG_TAU)?;
        let a = info_nce(&mut tape, f_v, f_t, log_tau)?;
        let b = info_nce(&mut tape, f_t, f_v, log_tau)?;
        let loss = tape.add(a, b)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss became {value} at step {step}")));
        }
        losses.push(value);
        tape.backward(loss)?;
        let bound = binder.bound();
        let grads: Vec<Vec<f64>> = store
            .iter()
            .map(|(name, t)| bound.get(name).and_then(|&v| tape.grad(v)).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        drop(binder);
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut tensors: Vec<&mut Tensor> = store.iter_mut().map(|(_, t)| t).collect();
        adam_step(&mut tensors, &refs, &mut adam, schedule.lr_at(step), &adam_cfg)?;
        let t = &mut store.get_mut(LOG_TAU)?.data_mut()[0];
        *t = t.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    for (name, t) in store.iter() {
        if name != LOG_TAU {
            set.store.insert(name.clone(), t.clone());
        }
    }
    Ok((set, losses))
}

/// Caption-to-image R@1 of unprompted encoders over one split, one query
/// per sample against that split's distinct images.
pub fn zero_shot_r1(set: &FrozenEncoderSet, samples: &[&PairedSample]) -> Result<f64> {
    let mut images: BTreeMap<u64, &[Vec<f64>]> = BTreeMap::new();
    for s in samples {
        images.entry(s.image_id).or_insert(&s.image);
    }
    let ids: Vec<u64> = images.keys().copied().collect();
    let imgs: Vec<&[Vec<f64>]> = images.values().copied().collect();
    let f_v = set.encode_images(&imgs)?;
    let texts: Vec<&[TokenId]> = samples.iter().map(|s| s.caption.as_slice()).collect();
    let f_t = set.encode_texts(&texts)?;
    let sims = crate::eval::similarity_matrix(&f_t, &f_v)?;
    let hits = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| ids[crate::eval::top_k(sims.row(*i), 1)[0]] == s.image_id)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}
