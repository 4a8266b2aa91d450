//! Deterministic synthetic world: scenes, captions, spoken audio, WER tools
//! and the JSON-lines dataset format.

mod audio;
mod dataset;
mod scene;
mod vocab;
mod wer;

pub use audio::{
    synthesize_audio, synthesize_audio_with, AcousticTables, FRAMES_PER_TOKEN, FRAME_WIDTH,
    MOOD_OFFSET_NORM, SPEAKER_JITTER,
};
pub use dataset::{
    generate_dataset, AsrStatus, Dataset, DatasetHeader, DatasetStyle, GenConfig, PairedSample,
    Split, DATASET_FORMAT_VERSION, TEST_FRACTION,
};
pub use scene::{
    compose_caption, quadrant, Cell, Mood, Scene, CELLS, GRID, N_COLORS, N_OBJECTS, N_TINTS,
    PATCH_DIM,
};
pub use vocab::{TokenId, Vocabulary, BOS};
pub use wer::{compute_wer, corrupt_transcript, edit_distance, Corruption, EditOp};
