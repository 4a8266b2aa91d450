//! Embedders and the image, text, audio and end-to-end acoustic encoders.

use crate::data::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::numerics::{Stream, Tape, Tensor, Var};
use crate::params::{normal, Binder, ParamStore};

use super::config::EncoderConfig;
use super::transformer::{
    assemble, init_head, init_layer, init_linear, pack, pool_sequence, project_pooled, transformer_encode, Segment,
};

/// Stacked per-sequence embeddings plus the length of each sequence.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub var: Var,
    pub lengths: Vec<usize>,
}

impl Embedded {
    pub fn segments(&self) -> Vec<Segment> {
        pack(self.lengths.iter().copied())
    }

    /// Splits the stack back into one `Var` per sequence.
    pub fn split(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        if self.lengths.len() == 1 {
            return Ok(vec![self.var]);
        }
        self.segments()
            .iter()
            .map(|s| tape.rows(self.var, s.start, s.start + s.len))
            .collect()
    }
}

const POS_STD: f64 = 0.3;
const CLS_STD: f64 = 0.3;

fn positions(lengths: &[usize]) -> Vec<TokenId> {
    lengths.iter().flat_map(|&l| 0..l as TokenId).collect()
}

fn add_positions(tape: &mut Tape, b: &Binder, table: &str, x: Var, lengths: &[usize]) -> Result<Var> {
    let pos = b.var(tape, table)?;
    let p = tape.embedding(pos, &positions(lengths))?;
    tape.add(x, p)
}

fn stack_rows(rows: impl Iterator<Item = Vec<f64>>, width: usize, what: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != width {
            return Err(Error::InvalidArgument(format!("{what} row has width {}, expected {width}", r.len())));
        }
        data.extend_from_slice(&r);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no {what} rows")));
    }
    Tensor::new(vec![n, width], data)
}

/// E_V for a batch of images: projected patches plus positional encodings.
pub fn embed_patches(tape: &mut Tape, b: &Binder, images: &[&[Vec<f64>]], cfg: &EncoderConfig) -> Result<Embedded> {
    if let Some(bad) = images.iter().find(|im| im.len() != cfg.n_patches) {
        return Err(Error::InvalidArgument(format!(
            "image has {} cells, expected {}",
            bad.len(),
            cfg.n_patches
        )));
    }
    let raw = stack_rows(images.iter().flat_map(|im| im.iter().cloned()), cfg.patch_dim, "patch")?;
    let x = tape.constant(raw);
    let x = super::transformer::linear(tape, b, "image.patch", x)?;
    let lengths = vec![cfg.n_patches; images.len()];
    let var = add_positions(tape, b, "image.pos", x, &lengths)?;
    Ok(Embedded { var, lengths })
}

/// Applies the empty-input and truncation policies; returns whether the
/// sequence was cut.
pub fn prepare_tokens(tokens: &[TokenId], budget: usize) -> (Vec<TokenId>, bool) {
    if tokens.is_empty() {
        return (vec![BOS], false);
    }
    if tokens.len() > budget {
        return (tokens[..budget].to_vec(), true);
    }
    (tokens.to_vec(), false)
}

/// E_T for a batch of token sequences. Also returns per-sequence truncation
/// flags.
pub fn embed_tokens(
    tape: &mut Tape,
    b: &Binder,
    seqs: &[&[TokenId]],
    cfg: &EncoderConfig,
) -> Result<(Embedded, Vec<bool>)> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no token sequences".into()));
    }
    let mut ids = Vec::new();
    let mut lengths = Vec::with_capacity(seqs.len());
    let mut truncated = Vec::with_capacity(seqs.len());
    for s in seqs {
        let (kept, cut) = prepare_tokens(s, cfg.token_budget());
        if let Some(&id) = kept.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::OutOfVocabulary { id, vocab: cfg.vocab_size });
        }
        lengths.push(kept.len());
        truncated.push(cut);
        ids.extend(kept);
    }
    let table = b.var(tape, "text.tok")?;
    let x = tape.embedding(table, &ids)?;
    let var = add_positions(tape, b, "text.pos", x, &lengths)?;
    Ok((Embedded { var, lengths }, truncated))
}

fn check_prompts(tape: &Tape, prompts: Option<Var>, cfg: &EncoderConfig) -> Result<()> {
    if let Some(p) = prompts {
        let shape = tape.shape(p);
        if shape.len() != 2 || shape[1] != cfg.d_model || shape[0] > cfg.prompt_len {
            return Err(Error::ShapeMismatch {
                op: "prompts",
                shapes: vec![shape.to_vec(), vec![cfg.prompt_len, cfg.d_model]],
            });
        }
    }
    Ok(())
}

fn encode_with_cls(
    tape: &mut Tape,
    b: &Binder,
    prefix: &str,
    n_layers: usize,
    body: &Embedded,
    prompts: Option<Var>,
    budget: usize,
    cfg: &EncoderConfig,
) -> Result<Var> {
    check_prompts(tape, prompts, cfg)?;
    let cls = b.var(tape, &format!("{prefix}.cls"))?;
    let parts = body.split(tape)?;
    let bodies: Vec<(Var, usize)> = parts.into_iter().zip(body.lengths.iter().copied()).collect();
    let (x, segments) = assemble(tape, cls, prompts, &bodies)?;
    let h = transformer_encode(tape, b, &format!("{prefix}.layers"), n_layers, cfg.n_heads, x, &segments, budget)?;
    let pooled = pool_sequence(tape, h, &segments)?;
    project_pooled(tape, b, prefix, pooled)
}

/// F_V, one row per image: `pool(encode([class; P_V?; E_V]))`.
pub fn image_encode(
    tape: &mut Tape,
    b: &Binder,
    e_v: &Embedded,
    prompts: Option<Var>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let budget = 1 + cfg.prompt_len + cfg.n_patches;
    encode_with_cls(tape, b, "image", cfg.n_layers, e_v, prompts, budget, cfg)
}

/// F_T, one row per sequence: `pool(encode([class; P_T?; E_T]))`.
pub fn text_encode(
    tape: &mut Tape,
    b: &Binder,
    e_t: &Embedded,
    prompts: Option<Var>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    encode_with_cls(tape, b, "text", cfg.n_layers, e_t, prompts, cfg.max_text_len, cfg)
}

/// E_A: every frame projected to `d_model` plus positional encodings.
pub fn audio_featurize(tape: &mut Tape, b: &Binder, clips: &[&[Vec<f64>]], cfg: &EncoderConfig) -> Result<Embedded> {
    if clips.iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidArgument("empty audio clip".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.len() > cfg.max_audio_len) {
        return Err(Error::SequenceTooLong { len: c.len(), budget: cfg.max_audio_len });
    }
    let raw = stack_rows(clips.iter().flat_map(|c| c.iter().cloned()), cfg.frame_width, "frame")?;
    let x = tape.constant(raw);
    let x = super::transformer::linear(tape, b, "audio.frame", x)?;
    let lengths: Vec<usize> = clips.iter().map(|c| c.len()).collect();
    let var = add_positions(tape, b, "audio.pos", x, &lengths)?;
    Ok(Embedded { var, lengths })
}

/// Z_A: the frozen random-feature audio stack, no pooling, no normalization.
pub fn whisper_encode_standin(tape: &mut Tape, b: &Binder, e_a: &Embedded, cfg: &EncoderConfig) -> Result<Embedded> {
    let var = transformer_encode(
        tape,
        b,
        "audio.layers",
        cfg.n_layers,
        cfg.n_heads,
        e_a.var,
        &e_a.segments(),
        cfg.max_audio_len,
    )?;
    Ok(Embedded { var, lengths: e_a.lengths.clone() })
}

/// F_A: one trainable layer over `[class; P_T?; Z_A]`, pooled and projected.
pub fn acoustic_encode(
    tape: &mut Tape,
    b: &Binder,
    z_a: &Embedded,
    prompts: Option<Var>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let budget = 1 + cfg.prompt_len + cfg.max_audio_len;
    encode_with_cls(tape, b, "e2e", 1, z_a, prompts, budget, cfg)
}

/// Fresh weights for the trainable acoustic layer, all under `e2e.`.
pub fn init_acoustic(cfg: &EncoderConfig, rng: &mut Stream) -> ParamStore {
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    s.insert("e2e.cls", normal(rng, &[1, d], CLS_STD));
    init_layer(&mut s, "e2e.layers.0", d, cfg.d_ff, rng, 1.0);
    init_head(&mut s, "e2e", d, rng);
    s
}

/// The frozen image, text and audio encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoderSet {
    pub config: EncoderConfig,
    pub store: ParamStore,
}

impl FrozenEncoderSet {
    /// Random initialization; each encoder draws from its own fork of `seed`.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Stream::new(seed);
        let d = cfg.d_model;
        let mut s = ParamStore::new();

        let mut rng = root.fork_str("image");
        init_linear(&mut s, "image.patch", cfg.patch_dim, d, &mut rng, 1.0);
        s.insert("image.pos", normal(&mut rng, &[cfg.n_patches, d], POS_STD));
        s.insert("image.cls", normal(&mut rng, &[1, d], CLS_STD));
        for i in 0..cfg.n_layers {
            init_layer(&mut s, &format!("image.layers.{i}"), d, cfg.d_ff, &mut rng, 1.0);
        }
        init_head(&mut s, "image", d, &mut rng);

        let mut rng = root.fork_str("text");
        s.insert("text.tok", normal(&mut rng, &[cfg.vocab_size, d], 1.0));
        s.insert("text.pos", normal(&mut rng, &[cfg.max_text_len, d], POS_STD));
        s.insert("text.cls", normal(&mut rng, &[1, d], CLS_STD));
        for i in 0..cfg.n_layers {
            init_layer(&mut s, &format!("text.layers.{i}"), d, cfg.d_ff, &mut rng, 1.0);
        }
        init_head(&mut s, "text", d, &mut rng);

        s.extend(Self::init_audio(cfg, seed));
        Ok(Self { config: *cfg, store: s })
    }

    /// The audio encoder weights `init` draws for `seed`.
    pub fn init_audio(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut rng = Stream::new(seed).fork_str("audio");
        let d = cfg.d_model;
        let mut s = ParamStore::new();
        init_linear(&mut s, "audio.frame", cfg.frame_width, d, &mut rng, 1.0);
        s.insert("audio.pos", normal(&mut rng, &[cfg.max_audio_len, d], POS_STD));
        for i in 0..cfg.n_layers {
            init_layer(&mut s, &format!("audio.layers.{i}"), d, cfg.d_ff, &mut rng, 1.0);
        }
        s
    }

    pub fn binder(&self) -> Binder<'_> {
        Binder::new(&self.store, false)
    }

    /// Unprompted F_V rows for `images`.
    pub fn encode_images(&self, images: &[&[Vec<f64>]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.binder();
        let e = embed_patches(&mut tape, &b, images, &self.config)?;
        let f = image_encode(&mut tape, &b, &e, None, &self.config)?;
        Ok(tape.value(f).clone())
    }

    /// Unprompted F_T rows for token sequences.
    pub fn encode_texts(&self, seqs: &[&[TokenId]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.binder();
        let (e, _) = embed_tokens(&mut tape, &b, seqs, &self.config)?;
        let f = text_encode(&mut tape, &b, &e, None, &self.config)?;
        Ok(tape.value(f).clone())
    }

    /// Z_A for one clip, shape `(frames, d_model)`.
    pub fn audio_latents(&self, clip: &[Vec<f64>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.binder();
        let e = audio_featurize(&mut tape, &b, &[clip], &self.config)?;
        let z = whisper_encode_standin(&mut tape, &b, &e, &self.config)?;
        Ok(tape.value(z.var).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.to_bytes()
    }
}
