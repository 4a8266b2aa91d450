//! Stand-ins for the pretrained components: the transformer primitive,
//! the image/text encoders, the frozen audio encoder, the trainable
//! acoustic layer and a procedural ASR decoder.

mod asr;
mod config;
mod pretrain;
mod stack;
mod transformer;

pub use asr::{asr_decode_standin, transcribe_dataset, AsrConfig, AsrOutcome};
pub use config::EncoderConfig;
pub use pretrain::{pretrain_standins, zero_shot_r1, PretrainConfig};
pub use stack::{
    acoustic_encode, audio_featurize, embed_patches, embed_tokens, image_encode, init_acoustic, prepare_tokens,
    text_encode, whisper_encode_standin, Embedded, FrozenEncoderSet,
};
pub use transformer::{encoder_layer, init_layer, pack, pool_sequence, transformer_encode, Segment, LN_EPS};
