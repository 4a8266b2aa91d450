//! Pre-norm transformer encoder shared by every stand-in encoder.
//!
//! Sequences of a batch are stacked row-wise into one matrix; `Segment`s
//! mark where each sequence lives. Projections run on the whole stack,
//! attention runs per segment.

use crate::error::{Error, Result};
use crate::numerics::{Stream, Tape, Tensor, Var};
use crate::params::{normal, Binder, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Rows `start..start + len` of a stacked sequence matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Back-to-back segments of the given lengths.
pub fn pack(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[1, d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, d]));
}

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Stream, gain: f64) {
    store.insert(
        format!("{prefix}.w"),
        normal(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

/// Inserts one layer's weights under `prefix`. `gain` scales every weight
/// matrix relative to `1/sqrt(fan_in)`.
pub fn init_layer(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut Stream, gain: f64) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    for name in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{name}"), d, d, rng, gain);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.ff1"), d, d_ff, rng, gain);
    init_linear(store, &format!("{prefix}.ff2"), d_ff, d, rng, gain);
}

pub(crate) fn layer_norm(tape: &mut Tape, b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let g = b.var(tape, &format!("{prefix}.g"))?;
    let bias = b.var(tape, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, bias, LN_EPS)
}

pub(crate) fn linear(tape: &mut Tape, b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(tape, &format!("{prefix}.w"))?;
    let bias = b.var(tape, &format!("{prefix}.b"))?;
    tape.affine(x, w, bias)
}

fn check_segments(tape: &Tape, x: Var, segments: &[Segment]) -> Result<()> {
    let rows = tape.shape(x)[0];
    let covered: usize = segments.iter().map(|s| s.len).sum();
    let contiguous = segments.windows(2).all(|w| w[0].start + w[0].len == w[1].start);
    if segments.is_empty()
        || segments[0].start != 0
        || !contiguous
        || covered != rows
        || segments.iter().any(|s| s.len == 0)
    {
        return Err(Error::InvalidArgument(format!(
            "segments {segments:?} do not tile {rows} rows"
        )));
    }
    Ok(())
}

fn attention(tape: &mut Tape, b: &Binder, prefix: &str, h: Var, segments: &[Segment], n_heads: usize) -> Result<Var> {
    let d = tape.shape(h)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(tape, b, &format!("{prefix}.q"), h)?;
    let k = linear(tape, b, &format!("{prefix}.k"), h)?;
    let v = linear(tape, b, &format!("{prefix}.v"), h)?;
    let mut outputs = Vec::with_capacity(segments.len());
    for seg in segments {
        let end = seg.start + seg.len;
        let (qs, ks, vs) = if segments.len() == 1 {
            (q, k, v)
        } else {
            (tape.rows(q, seg.start, end)?, tape.rows(k, seg.start, end)?, tape.rows(v, seg.start, end)?)
        };
        let mut heads = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (qs, ks, vs)
            } else {
                let cols = (head * dh, (head + 1) * dh);
                (
                    tape.slice(qs, 1, cols.0, cols.1)?,
                    tape.slice(ks, 1, cols.0, cols.1)?,
                    tape.slice(vs, 1, cols.0, cols.1)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        outputs.push(tape.concat(&heads, 1)?);
    }
    let merged = tape.concat(&outputs, 0)?;
    linear(tape, b, &format!("{prefix}.o"), merged)
}

/// One pre-norm layer: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
pub fn encoder_layer(tape: &mut Tape, b: &Binder, prefix: &str, x: Var, segments: &[Segment], n_heads: usize) -> Result<Var> {
    check_segments(tape, x, segments)?;
    let h = layer_norm(tape, b, &format!("{prefix}.ln1"), x)?;
    let a = attention(tape, b, prefix, h, segments, n_heads)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, b, &format!("{prefix}.ln2"), x)?;
    let f = linear(tape, b, &format!("{prefix}.ff1"), h)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, b, &format!("{prefix}.ff2"), f)?;
    tape.add(x, f)
}

/// Runs `n_layers` layers named `{prefix}.{i}`; no final normalization.
pub fn transformer_encode(
    tape: &mut Tape,
    b: &Binder,
    prefix: &str,
    n_layers: usize,
    n_heads: usize,
    x: Var,
    segments: &[Segment],
    budget: usize,
) -> Result<Var> {
    if let Some(seg) = segments.iter().find(|s| s.len > budget) {
        return Err(Error::SequenceTooLong { len: seg.len, budget });
    }
    (0..n_layers).try_fold(x, |x, i| encoder_layer(tape, b, &format!("{prefix}.{i}"), x, segments, n_heads))
}

/// First row of every segment (the class-token position).
pub fn pool_sequence(tape: &mut Tape, x: Var, segments: &[Segment]) -> Result<Var> {
    if segments.is_empty() || segments.iter().any(|s| s.len == 0) {
        return Err(Error::InvalidArgument("cannot pool an empty sequence".into()));
    }
    let rows: Vec<Var> = segments
        .iter()
        .map(|s| tape.rows(x, s.start, s.start + 1))
        .collect::<Result<_>>()?;
    tape.concat(&rows, 0)
}

/// Pooling head: layer norm then a bias-free projection.
pub fn project_pooled(tape: &mut Tape, b: &Binder, prefix: &str, pooled: Var) -> Result<Var> {
    let h = layer_norm(tape, b, &format!("{prefix}.ln_post"), pooled)?;
    let w = b.var(tape, &format!("{prefix}.proj"))?;
    tape.matmul(h, w)
}

pub(crate) fn init_head(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Stream) {
    init_layer_norm(store, &format!("{prefix}.ln_post"), d);
    store.insert(format!("{prefix}.proj"), normal(rng, &[d, d], 1.0 / (d as f64).sqrt()));
}

/// Stacks per-sequence pieces as `[first; middle?; body_i]` for every body.
pub(crate) fn assemble(
    tape: &mut Tape,
    first: Var,
    middle: Option<Var>,
    bodies: &[(Var, usize)],
) -> Result<(Var, Vec<Segment>)> {
    let extra = 1 + middle.map_or(0, |m| tape.shape(m)[0]);
    let mut pieces = Vec::with_capacity(bodies.len() * 3);
    let mut lengths = Vec::with_capacity(bodies.len());
    for &(body, len) in bodies {
        pieces.push(first);
        if let Some(m) = middle {
            pieces.push(m);
        }
        pieces.push(body);
        lengths.push(extra + len);
    }
    Ok((tape.concat(&pieces, 0)?, pack(lengths)))
}
