use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Stream;

use super::audio::{synthesize_audio, FRAME_WIDTH};
use super::scene::{compose_caption, Mood, Scene, N_TINTS, PATCH_DIM};
use super::vocab::{TokenId, Vocabulary};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStyle {
    /// Short read-aloud captions.
    Scripted,
    /// Long spontaneous narration with fillers and repetitions.
    Unscripted,
    /// Scripted captions over pairs of images that differ only in tint; the
    /// speaker's mood names the tint.
    MoodAware,
}

impl std::str::FromStr for DatasetStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "unscripted" => Ok(Self::Unscripted),
            "mood_aware" => Ok(Self::MoodAware),
            other => Err(invalid(format!("unknown dataset style `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrStatus {
    /// No transcription attempted yet.
    Pending,
    Ok,
    Crashed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub style: DatasetStyle,
    pub n_images: usize,
    pub captions_per_image: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub style: DatasetStyle,
    pub seed: u64,
    pub config: GenConfig,
    pub vocab: Vec<String>,
    pub patch_dim: usize,
    pub frame_width: usize,
    /// Echo of the run that wrote the file, if any.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSample {
    pub sample_id: u64,
    pub image_id: u64,
    /// Shared by the two images of a mood-aware confusable pair.
    pub pair_id: Option<u64>,
    pub split: Split,
    pub style: DatasetStyle,
    /// One row of `PATCH_DIM` features per grid cell.
    pub image: Vec<Vec<f64>>,
    pub caption: Vec<TokenId>,
    /// `FRAME_WIDTH`-wide frames.
    pub audio: Vec<Vec<f64>>,
    pub mood: Mood,
    pub speaker_seed: u64,
    pub asr_status: AsrStatus,
    pub transcription: Option<Vec<TokenId>>,
    pub realized_wer: Option<f64>,
}

impl PairedSample {
    fn validate(&self) -> Result<()> {
        if self.transcription.is_some() != self.realized_wer.is_some() {
            return Err(invalid("realized_wer must be present iff transcription is"));
        }
        if (self.asr_status == AsrStatus::Ok) != self.transcription.is_some() {
            return Err(invalid("asr_status disagrees with transcription"));
        }
        if self.image.iter().any(|r| r.len() != PATCH_DIM) {
            return Err(invalid(format!("image rows must have {PATCH_DIM} features")));
        }
        if self.audio.is_empty() || self.audio.iter().any(|r| r.len() != FRAME_WIDTH) {
            return Err(invalid(format!("audio must be non-empty {FRAME_WIDTH}-wide frames")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<PairedSample>,
}

/// Generates a deterministic dataset split 80/20 by image (by pair for the
/// mood-aware style).
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.n_images < 2 {
        return Err(invalid("need at least two images"));
    }
    if cfg.captions_per_image == 0 {
        return Err(invalid("need at least one caption per image"));
    }
    if cfg.style == DatasetStyle::MoodAware && cfg.n_images % 2 != 0 {
        return Err(invalid(format!(
            "mood_aware pairs images, so n_images must be even (got {})",
            cfg.n_images
        )));
    }
    let vocab = Vocabulary::standard();
    let root = Stream::new(cfg.seed);

    // units are images, or confusable pairs
    let unit_size = if cfg.style == DatasetStyle::MoodAware { 2 } else { 1 };
    let n_units = cfg.n_images / unit_size;
    let mut order: Vec<usize> = (0..n_units).collect();
    root.fork_str("split").shuffle(&mut order);
    let mut n_test = ((n_units as f64 * TEST_FRACTION).round() as usize).max(1);
    if n_units >= 2 {
        n_test = n_test.min(n_units - 1);
    }
    let test_units: BTreeSet<usize> = order[..n_test].iter().copied().collect();

    let mut samples = Vec::with_capacity(cfg.n_images * cfg.captions_per_image);
    for unit in 0..n_units {
        let mut rng = root.fork_str("scene").fork(unit as u64);
        let split = if test_units.contains(&unit) { Split::Test } else { Split::Train };
        let mut scene = Scene::random(&mut rng);
        let captions: Vec<Vec<TokenId>> = (0..cfg.captions_per_image)
            .map(|c| compose_caption(&scene, cfg.style, &vocab, &mut rng.fork(c as u64)))
            .collect();
        let tints: Vec<Option<usize>> = if unit_size == 2 {
            let first = rng.below(N_TINTS);
            let second = (first + 1 + rng.below(N_TINTS - 1)) % N_TINTS;
            vec![Some(first), Some(second)]
        } else {
            vec![None]
        };
        for (member, tint) in tints.into_iter().enumerate() {
            let image_id = (unit * unit_size + member) as u64;
            scene.tint = tint;
            let image = scene.image();
            for (c, caption) in captions.iter().enumerate() {
                let sample_id = image_id * cfg.captions_per_image as u64 + c as u64;
                let mut srng = root.fork_str("sample").fork(sample_id);
                let mood = match tint {
                    Some(t) => Mood::from_index(t),
                    None => Mood::from_index(srng.below(4)),
                };
                let speaker_seed = srng.next_u64();
                let caption = caption.clone();
                samples.push(PairedSample {
                    sample_id,
                    image_id,
                    pair_id: (unit_size == 2).then_some(unit as u64),
                    split,
                    style: cfg.style,
                    image: image.clone(),
                    audio: synthesize_audio(&caption, mood, speaker_seed),
                    caption,
                    mood,
                    speaker_seed,
                    asr_status: AsrStatus::Pending,
                    transcription: None,
                    realized_wer: None,
                });
            }
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            style: cfg.style,
            seed: cfg.seed,
            config: *cfg,
            vocab: vocab.tokens().to_vec(),
            patch_dim: PATCH_DIM,
            frame_width: FRAME_WIDTH,
            run: serde_json::Value::Null,
        },
        samples,
    })
}

impl Dataset {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.header.vocab.clone())
    }

    pub fn split(&self, split: Split) -> Vec<&PairedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn image_ids(&self, split: Split) -> BTreeSet<u64> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.image_id)
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let malformed = |line: usize, msg: String| Error::MalformedRecord { line: line + 1, msg };
        let (_, first) = lines
            .next()
            .ok_or_else(|| malformed(0, "missing header record".into()))?;
        let header: DatasetHeader =
            serde_json::from_str(&first?).map_err(|e| malformed(0, e.to_string()))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(malformed(
                0,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: PairedSample =
                serde_json::from_str(&line).map_err(|e| malformed(i, e.to_string()))?;
            sample.validate().map_err(|e| malformed(i, e.to_string()))?;
            if let Some(&bad) = sample
                .caption
                .iter()
                .chain(sample.transcription.iter().flatten())
                .find(|&&t| t as usize >= header.vocab.len())
            {
                return Err(malformed(i, format!("token {bad} outside vocabulary")));
            }
            samples.push(sample);
        }
        Ok(Self { header, samples })
    }
}
