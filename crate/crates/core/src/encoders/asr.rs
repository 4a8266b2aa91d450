//! Procedural stand-in for an ASR decoder with a word-error-rate dial.

use serde::{Deserialize, Serialize};

use crate::data::{compute_wer, corrupt_transcript, AsrStatus, Dataset, PairedSample, TokenId, Vocabulary};
use crate::error::{invalid, Result};
use crate::numerics::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub target_wer: f64,
    /// Half-width of the uniform per-sample WER distribution.
    pub wer_jitter: f64,
    pub drop_filler_prob: f64,
    pub crash_prob: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self { target_wer: 0.0, wer_jitter: 0.0, drop_filler_prob: 0.0, crash_prob: 0.0 }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.drop_filler_prob) || !unit.contains(&self.crash_prob) {
            return Err(invalid("ASR probabilities must lie in [0, 1]"));
        }
        if self.wer_jitter < 0.0
            || !unit.contains(&(self.target_wer - self.wer_jitter))
            || !unit.contains(&(self.target_wer + self.wer_jitter))
        {
            return Err(invalid(format!(
                "target WER {} ± {} leaves [0, 1]",
                self.target_wer, self.wer_jitter
            )));
        }
        Ok(())
    }
}

/// Result of decoding one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrOutcome {
    pub transcription: Option<Vec<TokenId>>,
    /// WER against the ground-truth caption.
    pub realized_wer: Option<f64>,
}

/// Decodes `sample`: maybe crash, drop fillers, then corrupt toward a
/// per-sample WER target.
pub fn asr_decode_standin(
    sample: &PairedSample,
    cfg: &AsrConfig,
    vocab: &Vocabulary,
    rng: &mut Stream,
) -> Result<AsrOutcome> {
    cfg.validate()?;
    if rng.bernoulli(cfg.crash_prob) {
        return Ok(AsrOutcome { transcription: None, realized_wer: None });
    }
    let kept: Vec<TokenId> = sample
        .caption
        .iter()
        .copied()
        .filter(|&t| !(vocab.is_filler(t) && rng.bernoulli(cfg.drop_filler_prob)))
        .collect();
    let target = if cfg.wer_jitter > 0.0 {
        rng.uniform_range(cfg.target_wer - cfg.wer_jitter, cfg.target_wer + cfg.wer_jitter)
    } else {
        cfg.target_wer
    };
    let hyp = corrupt_transcript(&kept, target, &vocab.content_ids(), rng)?.tokens;
    let wer = compute_wer(&sample.caption, &hyp)?;
    Ok(AsrOutcome { transcription: Some(hyp), realized_wer: Some(wer) })
}

/// Runs the decoder over every sample, each with its own stream derived
/// from `seed` and the sample id. Returns the number of crashes.
pub fn transcribe_dataset(dataset: &mut Dataset, cfg: &AsrConfig, seed: u64) -> Result<usize> {
    cfg.validate()?;
    let vocab = dataset.vocabulary();
    let root = Stream::new(seed).fork_str("asr");
    let mut crashes = 0;
    for s in &mut dataset.samples {
        let out = asr_decode_standin(s, cfg, &vocab, &mut root.fork(s.sample_id))?;
        s.asr_status = if out.transcription.is_some() { AsrStatus::Ok } else { AsrStatus::Crashed };
        crashes += usize::from(out.transcription.is_none());
        s.transcription = out.transcription;
        s.realized_wer = out.realized_wer;
    }
    Ok(crashes)
}
