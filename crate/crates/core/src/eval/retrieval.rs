use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AsrStatus, Dataset, PairedSample, Split, TokenId};
use crate::error::{invalid, Error, Result};
use crate::model::{BrewClipParams, ModelMode, Session};
use crate::numerics::{Tape, Tensor};
use crate::parallel::par_map;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
const CHUNK: usize = 64;

/// Row-normalized `a · vᵀ`.
pub fn similarity_matrix(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, dv) = v.dims2()?;
    if d != dv {
        return Err(Error::ShapeMismatch { op: "similarity_matrix", shapes: vec![a.shape().to_vec(), v.shape().to_vec()] });
    }
    let an = normalize_rows(a);
    let vn = normalize_rows(v);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &an[i * d..(i + 1) * d];
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(&vn[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, m], out)
}

fn normalize_rows(t: &Tensor) -> Vec<f64> {
    let d = *t.shape().last().expect("rank 2");
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > crate::numerics::NORM_FLOOR { 1.0 / norm } else { 0.0 };
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SpeechToImage,
    ImageToSpeech,
}

/// How image-to-speech queries are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallRule {
    /// One query per image; any of its captions in the top K counts.
    #[default]
    AnyCaption,
    /// One query per (image, caption) pair.
    PerCaption,
}

/// Recall@K over a `(speech rows × image columns)` matrix. `truth[i]` is the
/// column of row `i`'s image.
pub fn recall_at_k(scores: &Tensor, truth: &[usize], k: usize, direction: Direction, rule: RecallRule) -> Result<f64> {
    let (n, m) = scores.dims2()?;
    if truth.len() != n || truth.iter().any(|&c| c >= m) {
        return Err(invalid("ground truth does not match the similarity matrix"));
    }
    let candidates = match direction {
        Direction::SpeechToImage => m,
        Direction::ImageToSpeech => n,
    };
    if k == 0 || k > candidates {
        return Err(invalid(format!("K = {k} must be in 1..={candidates}")));
    }
    match direction {
        Direction::SpeechToImage => {
            let hits = (0..n).filter(|&i| top_k(scores.row(i), k).contains(&truth[i])).count();
            Ok(hits as f64 / n as f64)
        }
        Direction::ImageToSpeech => {
            let mut hits = 0;
            let mut queries = 0;
            for j in 0..m {
                let answers: Vec<usize> = (0..n).filter(|&i| truth[i] == j).collect();
                if answers.is_empty() {
                    continue;
                }
                let column: Vec<f64> = (0..n).map(|i| scores.data()[i * m + j]).collect();
                let top = top_k(&column, k);
                match rule {
                    RecallRule::AnyCaption => {
                        queries += 1;
                        hits += usize::from(answers.iter().any(|a| top.contains(a)));
                    }
                    RecallRule::PerCaption => {
                        queries += answers.len();
                        hits += answers.iter().filter(|a| top.contains(a)).count();
                    }
                }
            }
            if queries == 0 {
                return Err(invalid("no image has a caption"));
            }
            Ok(hits as f64 / queries as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    fn compute(scores: &Tensor, truth: &[usize], direction: Direction, rule: RecallRule) -> Result<Self> {
        let (n, m) = scores.dims2()?;
        let candidates = if direction == Direction::SpeechToImage { m } else { n };
        // with fewer candidates than K every query trivially hits
        let at = |k: usize| recall_at_k(scores, truth, k.min(candidates), direction, rule);
        Ok(Self { r1: at(1)?, r5: at(5)?, r10: at(10)? })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Asr,
    GroundTruth,
}

impl FromStr for TextSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Self::Asr),
            "ground_truth" => Ok(Self::GroundTruth),
            _ => Err(invalid(format!("unknown text source `{s}`"))),
        }
    }
}

impl fmt::Display for TextSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Asr => "asr",
            Self::GroundTruth => "ground_truth",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub speech2image: Recalls,
    pub image2speech: Recalls,
    pub n_queries_speech2image: usize,
    pub n_queries_image2speech: usize,
    /// Samples left out because their transcription crashed.
    pub n_dropped: usize,
    pub mode: ModelMode,
    pub text_source: TextSource,
    pub rule: RecallRule,
    pub config: serde_json::Value,
}

impl RetrievalReport {
    pub const CSV_COLUMNS: [&'static str; 6] = [
        "speech2image_r1",
        "speech2image_r5",
        "speech2image_r10",
        "image2speech_r1",
        "image2speech_r5",
        "image2speech_r10",
    ];

    pub fn metrics(&self) -> [f64; 6] {
        let (a, b) = (self.speech2image.as_array(), self.image2speech.as_array());
        [a[0], a[1], a[2], b[0], b[1], b[2]]
    }
}

/// Per-sample speech-to-image outcome, used by the WER analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: u64,
    pub image_id: u64,
    pub realized_wer: Option<f64>,
    pub hit_at_1: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalEval {
    pub report: RetrievalReport,
    pub outcomes: Vec<SampleOutcome>,
    pub scores: Tensor,
    /// Column order of `scores`.
    pub image_ids: Vec<u64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub rule: RecallRule,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { rule: RecallRule::AnyCaption, threads: 1 }
    }
}

fn stack(blocks: Vec<Tensor>) -> Result<Tensor> {
    let d = blocks[0].shape()[1];
    let data: Vec<f64> = blocks.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len() / d, d], data)
}

/// Image embeddings for `images`, chunked for bounded tape size.
pub fn embed_images(params: &BrewClipParams, images: &[&[Vec<f64>]], threads: usize) -> Result<Tensor> {
    let chunks: Vec<&[&[Vec<f64>]]> = images.chunks(CHUNK).collect();
    let blocks = par_map(&chunks, threads, |c| {
        let mut tape = Tape::new();
        let session = Session::new(params, false);
        let f = session.encode_images(&mut tape, c)?;
        Ok(tape.value(f).clone())
    })?;
    stack(blocks)
}

/// Z_A for every sample, in order.
pub fn audio_latents(params: &BrewClipParams, samples: &[&PairedSample], threads: usize) -> Result<Vec<Tensor>> {
    par_map(samples, threads, |s| params.frozen.audio_latents(&s.audio))
}

/// F_L for every sample (the speech-side retrieval embedding).
pub fn embed_speech(
    params: &BrewClipParams,
    samples: &[&PairedSample],
    source: TextSource,
    threads: usize,
) -> Result<Tensor> {
    let chunks: Vec<&[&PairedSample]> = samples.chunks(CHUNK).collect();
    let blocks = par_map(&chunks, threads, |c| {
        let texts: Vec<&[TokenId]> = c.iter().map(|s| speech_text(s, source)).collect::<Result<_>>()?;
        let latents = if params.mode.uses_acoustic() {
            c.iter().map(|s| params.frozen.audio_latents(&s.audio)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let latent_refs: Vec<&Tensor> = latents.iter().collect();
        let mut tape = Tape::new();
        let session = Session::new(params, false);
        let (_, _, f_l) = session.encode_audio(&mut tape, &texts, &latent_refs)?;
        Ok(tape.value(f_l).clone())
    })?;
    stack(blocks)
}

/// The text a sample contributes to the pipeline channel.
pub fn speech_text(s: &PairedSample, source: TextSource) -> Result<&[TokenId]> {
    match source {
        TextSource::GroundTruth => Ok(&s.caption),
        TextSource::Asr => match (&s.asr_status, &s.transcription) {
            (AsrStatus::Ok, Some(t)) => Ok(t),
            (AsrStatus::Crashed, _) => Ok(&[]),
            _ => Err(Error::InvalidArgument(format!("sample {} has no ASR outcome yet", s.sample_id))),
        },
    }
}

/// Scores one split in both directions.
pub fn evaluate_retrieval(
    params: &BrewClipParams,
    dataset: &Dataset,
    split: Split,
    mode: ModelMode,
    source: TextSource,
    opts: &EvalOptions,
) -> Result<RetrievalEval> {
    if mode != params.mode {
        return Err(Error::Incompatible(format!("checkpoint mode {} cannot be evaluated as {mode}", params.mode)));
    }
    if !mode.uses_text() && source == TextSource::GroundTruth {
        return Err(invalid("e2e_only has no text channel, so a ground-truth text source does not apply"));
    }
    let all = dataset.split(split);
    if all.is_empty() {
        return Err(invalid(format!("split {split:?} is empty")));
    }
    let drops = mode.uses_text() && source == TextSource::Asr;
    let mut kept = Vec::with_capacity(all.len());
    for s in &all {
        if source == TextSource::Asr && mode.uses_text() && s.asr_status == AsrStatus::Pending {
            return Err(invalid(format!("sample {} has no ASR outcome yet", s.sample_id)));
        }
        if !(drops && s.asr_status == AsrStatus::Crashed) {
            kept.push(*s);
        }
    }
    if kept.is_empty() {
        return Err(invalid("every sample of the split was dropped"));
    }
    let mut gallery: BTreeMap<u64, &[Vec<f64>]> = BTreeMap::new();
    for s in &all {
        gallery.entry(s.image_id).or_insert(&s.image);
    }
    let image_ids: Vec<u64> = gallery.keys().copied().collect();
    let column: BTreeMap<u64, usize> = image_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    let images: Vec<&[Vec<f64>]> = gallery.values().copied().collect();

    let f_v = embed_images(params, &images, opts.threads)?;
    let f_l = embed_speech(params, &kept, source, opts.threads)?;
    let scores = similarity_matrix(&f_l, &f_v)?;
    let truth: Vec<usize> = kept.iter().map(|s| column[&s.image_id]).collect();

    let outcomes = kept
        .iter()
        .enumerate()
        .map(|(i, s)| SampleOutcome {
            sample_id: s.sample_id,
            image_id: s.image_id,
            realized_wer: s.realized_wer,
            hit_at_1: top_k(scores.row(i), 1)[0] == truth[i],
        })
        .collect();
    let n_i2s = match opts.rule {
        RecallRule::AnyCaption => truth.iter().collect::<std::collections::BTreeSet<_>>().len(),
        RecallRule::PerCaption => kept.len(),
    };
    let report = RetrievalReport {
        speech2image: Recalls::compute(&scores, &truth, Direction::SpeechToImage, opts.rule)?,
        image2speech: Recalls::compute(&scores, &truth, Direction::ImageToSpeech, opts.rule)?,
        n_queries_speech2image: kept.len(),
        n_queries_image2speech: n_i2s,
        n_dropped: all.len() - kept.len(),
        mode,
        text_source: source,
        rule: opts.rule,
        config: serde_json::Value::Null,
    };
    Ok(RetrievalEval { report, outcomes, scores, image_ids })
}
