//! The dual-channel model: shared prompts, pipeline and acoustic channels,
//! additive fusion, the contrastive losses and the training step.

mod brewclip;
mod gradcheck;
mod loss;

pub use brewclip::{
    batch_loss, forward_batch, fuse, prepend_audio_prompts, prepend_text_prompts, project_image_prompts, train_step,
    Batch, BrewClipParams, Features, ModelMode, Session, Trainer, LOG_TEMPERATURE, PROMPTS, PROMPT_PROJ,
};
pub use gradcheck::{tiny_config, total_loss_gradcheck};
pub use loss::{
    info_nce, info_nce_scaled, info_nce_value, total_loss, LossConfig, LossValues, LossVars, TAU_INIT, TAU_MAX,
    TAU_MIN,
};

#[cfg(test)]
mod tests;
