use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::encoders::{
    acoustic_encode, embed_patches, embed_tokens, image_encode, init_acoustic, text_encode, Embedded, EncoderConfig,
    FrozenEncoderSet,
};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, LrSchedule, Stream, Tape, Tensor, Var};
use crate::params::{normal, Binder, ParamStore};

use super::loss::{total_loss, LossConfig, LossValues, LossVars, TAU_INIT, TAU_MAX, TAU_MIN};

pub const PROMPTS: &str = "prompt.p_t";
pub const PROMPT_PROJ: &str = "prompt.proj";
pub const LOG_TEMPERATURE: &str = "log_temperature";
const PROMPT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Full,
    PipelineZeroShot,
    PipelinePrompted,
    E2eOnly,
}

impl ModelMode {
    pub const ALL: [ModelMode; 4] =
        [ModelMode::Full, ModelMode::PipelineZeroShot, ModelMode::PipelinePrompted, ModelMode::E2eOnly];

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Full => "full",
            ModelMode::PipelineZeroShot => "pipeline_zero_shot",
            ModelMode::PipelinePrompted => "pipeline_prompted",
            ModelMode::E2eOnly => "e2e_only",
        }
    }

    pub fn uses_text(self) -> bool {
        self != ModelMode::E2eOnly
    }

    pub fn uses_acoustic(self) -> bool {
        matches!(self, ModelMode::Full | ModelMode::E2eOnly)
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, ModelMode::Full | ModelMode::PipelinePrompted)
    }

    pub fn is_trainable(self) -> bool {
        self != ModelMode::PipelineZeroShot
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

/// Frozen encoders plus the mode's trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BrewClipParams {
    pub mode: ModelMode,
    pub frozen: FrozenEncoderSet,
    pub trainable: ParamStore,
}

impl BrewClipParams {
    pub fn new(frozen: FrozenEncoderSet, mode: ModelMode, seed: u64) -> Self {
        let cfg = frozen.config;
        let d = cfg.d_model;
        let root = Stream::new(seed).fork_str("trainable");
        let mut t = ParamStore::new();
        if mode.is_trainable() {
            t.insert(LOG_TEMPERATURE, Tensor::scalar(TAU_INIT.ln()));
        }
        if mode.uses_prompts() && cfg.prompt_len > 0 {
            t.insert(PROMPTS, normal(&mut root.fork_str("prompts"), &[cfg.prompt_len, d], PROMPT_STD));
            t.insert(format!("{PROMPT_PROJ}.w"), Tensor::identity(d));
            t.insert(format!("{PROMPT_PROJ}.b"), Tensor::zeros(&[1, d]));
        }
        if mode.uses_acoustic() {
            t.extend(init_acoustic(&cfg, &mut root.fork_str("e2e")));
        }
        Self { mode, frozen, trainable: t }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.frozen.config
    }

    pub fn tau(&self) -> f64 {
        self.trainable.get(LOG_TEMPERATURE).map_or(TAU_INIT, |t| t.item().exp())
    }

    fn has_prompts(&self) -> bool {
        self.trainable.contains(PROMPTS)
    }

    fn check_mode(&self, mode: ModelMode) -> Result<()> {
        if mode != self.mode {
            return Err(Error::Incompatible(format!(
                "parameters were built for mode {} but {} was requested",
                self.mode, mode
            )));
        }
        if mode.uses_acoustic() && !self.trainable.contains("e2e.cls") {
            return Err(Error::MissingParameter("e2e.cls".into()));
        }
        Ok(())
    }
}

/// One row-aligned batch: image `i` pairs with transcription `i` and
/// latent `i`. Unused channels may be left empty.
#[derive(Clone, Debug, Default)]
pub struct Batch<'a> {
    pub images: Vec<&'a [Vec<f64>]>,
    /// Transcriptions; an empty slice stands for a crashed decode.
    pub texts: Vec<&'a [TokenId]>,
    /// Cached Z_A per sample.
    pub latents: Vec<&'a Tensor>,
}

/// Encoder outputs before normalization.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub f_v: Var,
    pub f_t: Option<Var>,
    pub f_a: Option<Var>,
    pub f_l: Var,
}

/// Binders for one forward pass.
pub struct Session<'a> {
    pub params: &'a BrewClipParams,
    pub frozen: Binder<'a>,
    pub trainable: Binder<'a>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a BrewClipParams, train: bool) -> Self {
        Self {
            params,
            frozen: params.frozen.binder(),
            trainable: Binder::new(&params.trainable, train),
        }
    }

    fn cfg(&self) -> &EncoderConfig {
        self.params.config()
    }

    fn prompts(&self, tape: &mut Tape) -> Result<Option<Var>> {
        if self.params.mode.uses_prompts() && self.params.has_prompts() {
            Ok(Some(self.trainable.var(tape, PROMPTS)?))
        } else {
            Ok(None)
        }
    }

    fn log_tau(&self, tape: &mut Tape) -> Result<Var> {
        self.trainable.var(tape, LOG_TEMPERATURE)
    }

    /// F_V rows, with projected prompts in prompted modes.
    pub fn encode_images(&self, tape: &mut Tape, images: &[&[Vec<f64>]]) -> Result<Var> {
        let p_v = match self.prompts(tape)? {
            Some(p_t) => Some(project_image_prompts(tape, &self.trainable, p_t)?),
            None => None,
        };
        let e_v = embed_patches(tape, &self.frozen, images, self.cfg())?;
        image_encode(tape, &self.frozen, &e_v, p_v, self.cfg())
    }

    /// The audio side: F_T and F_A as the mode requires, and their fusion F_L.
    pub fn encode_audio(
        &self,
        tape: &mut Tape,
        texts: &[&[TokenId]],
        latents: &[&Tensor],
    ) -> Result<(Option<Var>, Option<Var>, Var)> {
        let mode = self.params.mode;
        let p_t = self.prompts(tape)?;
        let f_t = if mode.uses_text() {
            let (e_t, _) = embed_tokens(tape, &self.frozen, texts, self.cfg())?;
            Some(text_encode(tape, &self.frozen, &e_t, p_t, self.cfg())?)
        } else {
            None
        };
        let f_a = if mode.uses_acoustic() {
            let z = stack_latents(tape, latents, self.cfg().d_model)?;
            Some(acoustic_encode(tape, &self.trainable, &z, p_t, self.cfg())?)
        } else {
            None
        };
        let f_l = match (f_a, f_t) {
            (Some(a), Some(t)) => fuse(tape, a, t)?,
            (Some(a), None) => a,
            (None, Some(t)) => t,
            (None, None) => unreachable!("every mode has at least one audio channel"),
        };
        Ok((f_t, f_a, f_l))
    }
}

fn stack_latents(tape: &mut Tape, latents: &[&Tensor], d: usize) -> Result<Embedded> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("acoustic channel needs audio latents".into()));
    }
    let mut data = Vec::new();
    let mut lengths = Vec::with_capacity(latents.len());
    for z in latents {
        let (l, w) = z.dims2()?;
        if w != d {
            return Err(Error::ShapeMismatch { op: "audio latents", shapes: vec![z.shape().to_vec(), vec![l, d]] });
        }
        data.extend_from_slice(z.data());
        lengths.push(l);
    }
    let total = lengths.iter().sum();
    let var = tape.constant(Tensor::new(vec![total, d], data)?);
    Ok(Embedded { var, lengths })
}

fn check_width(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::ShapeMismatch { op, shapes: vec![sa.to_vec(), sb.to_vec()] });
    }
    Ok(())
}

/// `[P_T; E_T]`. `None` prompts (M = 0) leave the sequence as is.
pub fn prepend_text_prompts(tape: &mut Tape, p_t: Option<Var>, e_t: Var) -> Result<Var> {
    match p_t {
        None => Ok(e_t),
        Some(p) => {
            check_width(tape, "prepend_prompts", p, e_t)?;
            tape.concat(&[p, e_t], 0)
        }
    }
}

/// `[P_T; Z_A]`, the same operation applied to the acoustic sequence.
pub fn prepend_audio_prompts(tape: &mut Tape, p_t: Option<Var>, z_a: Var) -> Result<Var> {
    prepend_text_prompts(tape, p_t, z_a)
}

/// `P_V = P_T · W + b` using the projection bound through `b`.
pub fn project_image_prompts(tape: &mut Tape, b: &Binder, p_t: Var) -> Result<Var> {
    let w = b.var(tape, &format!("{PROMPT_PROJ}.w"))?;
    let bias = b.var(tape, &format!("{PROMPT_PROJ}.b"))?;
    tape.affine(p_t, w, bias)
}

/// Plain sum of the two audio representations.
pub fn fuse(tape: &mut Tape, f_a: Var, f_t: Var) -> Result<Var> {
    if tape.shape(f_a) != tape.shape(f_t) {
        return Err(Error::ShapeMismatch { op: "fuse", shapes: vec![tape.shape(f_a).to_vec(), tape.shape(f_t).to_vec()] });
    }
    tape.add(f_a, f_t)
}

fn check_batch(batch: &Batch, mode: ModelMode) -> Result<()> {
    let n = batch.images.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if mode.uses_text() && batch.texts.len() != n {
        return Err(Error::InvalidArgument(format!("{} images but {} transcriptions", n, batch.texts.len())));
    }
    if mode.uses_acoustic() && batch.latents.len() != n {
        return Err(Error::InvalidArgument(format!("{} images but {} latents", n, batch.latents.len())));
    }
    Ok(())
}

/// Forward pass for `mode` on a row-aligned batch.
pub fn forward_batch(tape: &mut Tape, session: &Session, batch: &Batch, mode: ModelMode) -> Result<Features> {
    session.params.check_mode(mode)?;
    check_batch(batch, mode)?;
    let f_v = session.encode_images(tape, &batch.images)?;
    let (f_t, f_a, f_l) = session.encode_audio(tape, &batch.texts, &batch.latents)?;
    Ok(Features { f_v, f_t, f_a, f_l })
}

/// Forward pass plus the combined loss.
pub fn batch_loss(tape: &mut Tape, session: &Session, batch: &Batch, loss_cfg: &LossConfig) -> Result<LossVars> {
    let f = forward_batch(tape, session, batch, session.params.mode)?;
    let log_tau = session.log_tau(tape)?;
    total_loss(tape, f.f_v, f.f_t, f.f_a, f.f_l, loss_cfg, log_tau)
}

/// Optimizer state tied to a parameter set.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub adam: AdamState,
    pub adam_cfg: AdamConfig,
    pub schedule: LrSchedule,
    pub loss_cfg: LossConfig,
}

impl Trainer {
    pub fn new(params: &BrewClipParams, schedule: LrSchedule, loss_cfg: LossConfig, adam_cfg: AdamConfig) -> Result<Self> {
        if !params.mode.is_trainable() {
            return Err(Error::InvalidArgument(
                "pipeline_zero_shot has no trainable parameters; it is evaluated without any fine tuning or prompting"
                    .into(),
            ));
        }
        schedule.validate()?;
        loss_cfg.validate()?;
        Ok(Self {
            adam: AdamState::new(params.trainable.iter().map(|(_, t)| t)),
            adam_cfg,
            schedule,
            loss_cfg,
        })
    }
}

/// One optimizer step at `lr_at(step)`; only trainable parameters move.
pub fn train_step(params: &mut BrewClipParams, trainer: &mut Trainer, batch: &Batch, step: u64) -> Result<LossValues> {
    let mut tape = Tape::new();
    let (values, grads) = {
        let session = Session::new(params, true);
        let loss = batch_loss(&mut tape, &session, batch, &trainer.loss_cfg)?;
        let values = loss.values(&tape);
        if !values.final_loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at step {step}", values.final_loss)));
        }
        tape.backward(loss.final_loss)?;
        let bound = session.trainable.bound();
        let grads: Vec<Vec<f64>> = params
            .trainable
            .iter()
            .map(|(name, t)| match bound.get(name).and_then(|&v| tape.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect();
        (values, grads)
    };
    let lr = trainer.schedule.lr_at(step);
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut tensors: Vec<&mut Tensor> = params.trainable.iter_mut().map(|(_, t)| t).collect();
    adam_step(&mut tensors, &grad_refs, &mut trainer.adam, lr, &trainer.adam_cfg)?;
    if let Ok(t) = params.trainable.get_mut(LOG_TEMPERATURE) {
        let v = &mut t.data_mut()[0];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
    if !params.trainable.all_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {step}")));
    }
    Ok(values)
}
