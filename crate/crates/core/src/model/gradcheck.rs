use crate::data::{generate_dataset, DatasetStyle, GenConfig, TokenId};
use crate::encoders::{EncoderConfig, FrozenEncoderSet};
use crate::error::Result;
use crate::numerics::{finite_diff_grad, relative_error, Stream, Tape, Tensor};

use super::brewclip::{batch_loss, Batch, BrewClipParams, ModelMode, Session};
use super::loss::LossConfig;

/// A miniature configuration small enough for finite differences over
/// every trainable scalar.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_text_len: 16,
        max_audio_len: 40,
        prompt_len: 2,
        ..EncoderConfig::default()
    }
}

/// Checks the analytic gradient of the combined loss against central
/// differences for every trainable tensor of `mode`, at randomized
/// parameters and a random batch drawn from `seed`. Returns the largest
/// per-tensor relative error.
pub fn total_loss_gradcheck(mode: ModelMode, seed: u64, eps: f64) -> Result<f64> {
    let cfg = tiny_config();
    let mut rng = Stream::new(seed).fork_str("gradcheck");
    let frozen = FrozenEncoderSet::init(&cfg, rng.next_u64())?;
    let mut params = BrewClipParams::new(frozen, mode, rng.next_u64());
    for (_, t) in params.trainable.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let n = 2 + rng.below(3);
    let ds = generate_dataset(&GenConfig {
        style: DatasetStyle::Scripted,
        n_images: n,
        captions_per_image: 1,
        seed: rng.next_u64(),
    })?;
    let texts: Vec<Vec<TokenId>> = ds.samples.iter().map(|s| s.caption[..4].to_vec()).collect();
    let clips: Vec<Vec<Vec<f64>>> = ds.samples.iter().map(|s| s.audio[..6].to_vec()).collect();
    let latents: Vec<Tensor> = clips.iter().map(|c| params.frozen.audio_latents(c)).collect::<Result<_>>()?;
    let batch = Batch {
        images: ds.samples.iter().map(|s| s.image.as_slice()).collect(),
        texts: if mode.uses_text() { texts.iter().map(Vec::as_slice).collect() } else { vec![] },
        latents: if mode.uses_acoustic() { latents.iter().collect() } else { vec![] },
    };
    let loss_cfg = LossConfig { alpha: 0.1 + 0.8 * rng.uniform(), batch_size: n };

    let mut tape = Tape::new();
    let session = Session::new(&params, true);
    let loss = batch_loss(&mut tape, &session, &batch, &loss_cfg)?;
    tape.backward(loss.final_loss)?;
    let bound = session.trainable.bound();
    let analytic: Vec<(String, Vec<f64>)> = params
        .trainable
        .names()
        .into_iter()
        .map(|name| {
            let g = bound.get(&name).and_then(|&v| tape.grad(v)).map(<[f64]>::to_vec);
            let len = params.trainable.get(&name).map_or(0, Tensor::numel);
            (name, g.unwrap_or_else(|| vec![0.0; len]))
        })
        .collect();
    drop(session);

    let mut worst: f64 = 0.0;
    for (name, grad) in analytic {
        let theta = params.trainable.get(&name)?.clone();
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |t| {
                *probe.trainable.get_mut(&name)? = t.clone();
                let mut tape = Tape::new();
                let session = Session::new(&probe, false);
                let l = batch_loss(&mut tape, &session, &batch, &loss_cfg)?;
                Ok(tape.value(l.final_loss).item())
            },
            &theta,
            eps,
        )?;
        worst = worst.max(relative_error(&grad, numeric.data()));
    }
    Ok(worst)
}
