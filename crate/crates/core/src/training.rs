//! Fine-tuning loop shared by the command line and the test suites.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AsrStatus, Dataset, PairedSample, Split, TokenId};
use crate::error::{invalid, Result};
use crate::eval::{audio_latents, evaluate_retrieval, EvalOptions, RetrievalReport, TextSource};
use crate::model::{train_step, Batch, BrewClipParams, LossConfig, LossValues, Trainer};
use crate::numerics::{AdamConfig, LrSchedule, Stream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub schedule: LrSchedule,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_interval: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossValues,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters after the last step.
    pub last: BrewClipParams,
    /// Parameters at the best held-out speech-to-image R@1, or the last ones
    /// when evaluation is disabled.
    pub best: BrewClipParams,
    pub best_step: u64,
    pub best_r1: Option<f64>,
    pub losses: Vec<StepRecord>,
    pub evals: Vec<(u64, RetrievalReport)>,
}

struct Item<'a> {
    text: &'a [TokenId],
    latent: Option<usize>,
}

struct Unit<'a> {
    image: &'a [Vec<f64>],
    items: Vec<Item<'a>>,
}

/// Training samples grouped by image. Crashed transcriptions are dropped in
/// pipeline-only training and become an empty (begin-token) text in full mode.
fn units<'a>(params: &BrewClipParams, samples: &[&'a PairedSample]) -> Result<Vec<Unit<'a>>> {
    let mode = params.mode;
    let mut by_image: BTreeMap<u64, Unit<'a>> = BTreeMap::new();
    for (idx, s) in samples.iter().enumerate() {
        let text: &[TokenId] = match (s.asr_status, &s.transcription) {
            _ if !mode.uses_text() => &[],
            (AsrStatus::Ok, Some(t)) => t,
            (AsrStatus::Crashed, _) if mode.uses_acoustic() => &[],
            (AsrStatus::Crashed, _) => continue,
            _ => return Err(invalid(format!("sample {} has no ASR outcome yet", s.sample_id))),
        };
        by_image
            .entry(s.image_id)
            .or_insert_with(|| Unit { image: &s.image, items: Vec::new() })
            .items
            .push(Item { text, latent: mode.uses_acoustic().then_some(idx) });
    }
    Ok(by_image.into_values().collect())
}

/// Fine-tunes `params` on the training split of `dataset`.
pub fn fit(params: BrewClipParams, dataset: &Dataset, cfg: &FitConfig, threads: usize) -> Result<FitOutcome> {
    fit_with(params, dataset, cfg, threads, |_| {})
}

/// As [`fit`], calling `progress` after every step.
pub fn fit_with(
    mut params: BrewClipParams,
    dataset: &Dataset,
    cfg: &FitConfig,
    threads: usize,
    mut progress: impl FnMut(&StepRecord),
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(&params, cfg.schedule, cfg.loss, cfg.adam)?;
    let train = dataset.split(Split::Train);
    let latents: Vec<Tensor> =
        if params.mode.uses_acoustic() { audio_latents(&params, &train, threads)? } else { Vec::new() };
    let units = units(&params, &train)?;
    if units.len() < 2 {
        return Err(invalid("training split needs at least two usable images"));
    }
    let batch_size = cfg.loss.batch_size.min(units.len());
    let mut rng = Stream::new(cfg.seed).fork_str("batches");
    let mut order: Vec<usize> = (0..units.len()).collect();
    let opts = EvalOptions { threads, ..EvalOptions::default() };

    let mut out = FitOutcome {
        last: params.clone(),
        best: params.clone(),
        best_step: 0,
        best_r1: None,
        losses: Vec::with_capacity(cfg.schedule.total_steps as usize),
        evals: Vec::new(),
    };
    for step in 1..=cfg.schedule.total_steps {
        rng.shuffle(&mut order);
        let mut batch = Batch::default();
        for &u in &order[..batch_size] {
            let unit = &units[u];
            let item = &unit.items[rng.below(unit.items.len())];
            batch.images.push(unit.image);
            if params.mode.uses_text() {
                batch.texts.push(item.text);
            }
            if let Some(i) = item.latent {
                batch.latents.push(&latents[i]);
            }
        }
        let loss = train_step(&mut params, &mut trainer, &batch, step)?;
        let record = StepRecord { step, lr: cfg.schedule.lr_at(step), loss };
        progress(&record);
        out.losses.push(record);

        let due = cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.schedule.total_steps);
        if due {
            let report = evaluate_retrieval(&params, dataset, Split::Test, params.mode, TextSource::Asr, &opts)?.report;
            let r1 = report.speech2image.r1;
            if out.best_r1.is_none_or(|b| r1 > b) {
                out.best_r1 = Some(r1);
                out.best_step = step;
                out.best = params.clone();
            }
            out.evals.push((step, report));
        }
    }
    if cfg.eval_interval == 0 {
        out.best = params.clone();
        out.best_step = cfg.schedule.total_steps;
    }
    out.last = params;
    Ok(out)
}
