//! Retrieval metrics, the mood probe, the WER analysis and cross-dataset
//! sweeps.

mod cross;
mod probe;
mod retrieval;
mod wer_fit;

pub use cross::{compatibility, cross_dataset_eval, CrossCell};
pub use probe::{probe_features, ser_probe, FeatureSource, ProbeConfig, ProbeReport};
pub use retrieval::{
    audio_latents, embed_images, embed_speech, evaluate_retrieval, recall_at_k, similarity_matrix, speech_text, top_k,
    Direction, EvalOptions, RecallRule, Recalls, RetrievalEval, RetrievalReport, SampleOutcome, TextSource, RECALL_KS,
};
pub use wer_fit::{wer_recall_analysis, WerAnalysis, MIN_SAMPLES, MIN_SPREAD, SLOPE_L2};
