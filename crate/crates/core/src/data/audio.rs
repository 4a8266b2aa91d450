use std::sync::OnceLock;

use crate::numerics::Stream;

use super::scene::Mood;
use super::vocab::TokenId;

pub const FRAME_WIDTH: usize = 16;
pub const FRAMES_PER_TOKEN: usize = 3;
pub const MOOD_OFFSET_NORM: f64 = 0.5;
pub const SPEAKER_JITTER: f64 = 0.05;
/// Template table capacity; covers any vocabulary up to this size.
pub const MAX_TOKENS: usize = 64;

const WORLD_SEED: u64 = 0xB4E_C11F;

/// Per-token frame templates and per-mood offsets. One fixed table for the
/// whole synthetic world, so clips from different datasets are comparable.
#[derive(Clone, Debug)]
pub struct AcousticTables {
    templates: Vec<[[f64; FRAME_WIDTH]; FRAMES_PER_TOKEN]>,
    mood_offsets: [[f64; FRAME_WIDTH]; 4],
}

impl AcousticTables {
    pub fn standard() -> &'static AcousticTables {
        static TABLES: OnceLock<AcousticTables> = OnceLock::new();
        TABLES.get_or_init(|| Self::from_seed(WORLD_SEED))
    }

    fn from_seed(seed: u64) -> Self {
        let root = Stream::new(seed);
        let mut rng = root.fork_str("templates");
        let templates = (0..MAX_TOKENS)
            .map(|_| {
                let mut t = [[0.0; FRAME_WIDTH]; FRAMES_PER_TOKEN];
                for frame in &mut t {
                    for v in frame.iter_mut() {
                        *v = rng.normal();
                    }
                }
                t
            })
            .collect();
        let mut rng = root.fork_str("moods");
        let mut mood_offsets = [[0.0; FRAME_WIDTH]; 4];
        for offset in &mut mood_offsets {
            let dir = rng.normal_vec(FRAME_WIDTH, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (o, d) in offset.iter_mut().zip(dir) {
                *o = MOOD_OFFSET_NORM * d / norm;
            }
        }
        Self {
            templates,
            mood_offsets,
        }
    }

    pub fn mood_offset(&self, mood: Mood) -> &[f64; FRAME_WIDTH] {
        &self.mood_offsets[mood.index()]
    }

    pub fn template(&self, token: TokenId) -> &[[f64; FRAME_WIDTH]; FRAMES_PER_TOKEN] {
        &self.templates[token as usize]
    }
}

/// Renders a caption as frames: token template + mood offset + speaker jitter.
/// `jitter` scales the jitter standard deviation (1.0 = default, 0.0 = none).
pub fn synthesize_audio_with(
    caption: &[TokenId],
    mood: Mood,
    speaker_seed: u64,
    jitter: f64,
) -> Vec<Vec<f64>> {
    let tables = AcousticTables::standard();
    let offset = tables.mood_offset(mood);
    let mut rng = Stream::new(speaker_seed).fork_str("speaker");
    let mut frames = Vec::with_capacity(caption.len() * FRAMES_PER_TOKEN);
    for &tok in caption {
        for template in tables.template(tok) {
            frames.push(
                template
                    .iter()
                    .zip(offset)
                    .map(|(t, o)| t + o + jitter * SPEAKER_JITTER * rng.normal())
                    .collect(),
            );
        }
    }
    frames
}

pub fn synthesize_audio(caption: &[TokenId], mood: Mood, speaker_seed: u64) -> Vec<Vec<f64>> {
    synthesize_audio_with(caption, mood, speaker_seed, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mood_offsets_have_fixed_norm() {
        let t = AcousticTables::standard();
        for m in Mood::ALL {
            let n = t.mood_offset(m).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - MOOD_OFFSET_NORM).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_count_is_three_per_token() {
        let frames = synthesize_audio(&[1, 2, 3, 4], Mood::Sad, 9);
        assert_eq!(frames.len(), 12);
        assert!(frames.iter().all(|f| f.len() == FRAME_WIDTH));
    }

    #[test]
    fn mood_difference_is_exact_without_jitter() {
        let caption = [5, 9, 13, 17];
        let happy = synthesize_audio_with(&caption, Mood::Happy, 1, 0.0);
        let sad = synthesize_audio_with(&caption, Mood::Sad, 1, 0.0);
        let t = AcousticTables::standard();
        for (h, s) in happy.iter().zip(&sad) {
            for k in 0..FRAME_WIDTH {
                let want = t.mood_offset(Mood::Happy)[k] - t.mood_offset(Mood::Sad)[k];
                assert!((h[k] - s[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn content_dominates_mood() {
        let rng_root = Stream::new(10);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..200 {
            let mut rng = rng_root.fork(i);
            let a: Vec<TokenId> = (0..10).map(|_| 1 + rng.below(37) as TokenId).collect();
            let b: Vec<TokenId> = (0..10).map(|_| 1 + rng.below(37) as TokenId).collect();
            if a == b {
                continue;
            }
            let fa = synthesize_audio(&a, Mood::Neutral, rng.next_u64());
            let fb = synthesize_audio(&b, Mood::Neutral, rng.next_u64());
            for (x, y) in fa.iter().zip(&fb) {
                total += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                count += 1;
            }
        }
        assert!(total / count as f64 > MOOD_OFFSET_NORM);
    }
}
