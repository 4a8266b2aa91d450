use serde::{Deserialize, Serialize};

use crate::data::{CELLS, FRAME_WIDTH, PATCH_DIM};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Text sequence budget including the class token and prompts.
    pub max_text_len: usize,
    /// Longest audio clip, in frames, the audio encoder accepts.
    pub max_audio_len: usize,
    pub vocab_size: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub frame_width: usize,
    /// Number of shared prompt vectors.
    pub prompt_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_text_len: 64,
            max_audio_len: 160,
            vocab_size: 64,
            n_patches: CELLS,
            patch_dim: PATCH_DIM,
            frame_width: FRAME_WIDTH,
            prompt_len: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(invalid("n_layers and d_ff must be positive"));
        }
        if self.max_text_len < self.prompt_len + 2 {
            return Err(invalid(format!(
                "max_text_len {} leaves no room for tokens after {} prompts and the class token",
                self.max_text_len, self.prompt_len
            )));
        }
        if self.max_audio_len == 0 || self.n_patches == 0 || self.patch_dim == 0 {
            return Err(invalid("audio/patch extents must be positive"));
        }
        Ok(())
    }

    /// Tokens a transcription may keep: the text budget minus the class
    /// token and the prompt slots.
    pub fn token_budget(&self) -> usize {
        self.max_text_len - 1 - self.prompt_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
