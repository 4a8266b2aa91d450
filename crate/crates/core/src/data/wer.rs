use crate::error::{invalid, Result};
use crate::numerics::Stream;

use super::vocab::TokenId;

/// Unit-cost Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=a.len()).collect();
    let mut curr = vec![0; a.len() + 1];
    for (j, bj) in b.iter().enumerate() {
        curr[0] = j + 1;
        for (i, ai) in a.iter().enumerate() {
            let sub = prev[i] + usize::from(ai != bj);
            curr[i + 1] = sub.min(prev[i + 1] + 1).min(curr[i] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[a.len()]
}

/// Word error rate: edit distance over reference length.
pub fn compute_wer(reference: &[TokenId], hypothesis: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("word error rate needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Substitute,
    Delete,
    Insert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub tokens: Vec<TokenId>,
    pub ops: Vec<EditOp>,
}

/// Applies `round(target_wer * len)` random edits. Substituted and inserted
/// tokens are drawn from `replacement_pool`; a substitution always changes
/// the token. Every original token is edited at most once and inserted
/// tokens are never edited again, so edits do not undo each other. When no
/// untouched token is left, the edit becomes an insertion.
pub fn corrupt_transcript(
    caption: &[TokenId],
    target_wer: f64,
    replacement_pool: &[TokenId],
    rng: &mut Stream,
) -> Result<Corruption> {
    if !(0.0..=1.0).contains(&target_wer) {
        return Err(invalid(format!("target WER {target_wer} outside [0, 1]")));
    }
    if replacement_pool.len() < 2 {
        return Err(invalid("replacement pool needs at least two tokens"));
    }
    let n_ops = (target_wer * caption.len() as f64).round() as usize;
    // (token, still untouched)
    let mut tokens: Vec<(TokenId, bool)> = caption.iter().map(|&t| (t, true)).collect();
    let mut ops = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let untouched: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].1).collect();
        let mut op = match rng.below(3) {
            0 => EditOp::Substitute,
            1 => EditOp::Delete,
            _ => EditOp::Insert,
        };
        if untouched.is_empty() {
            op = EditOp::Insert;
        }
        match op {
            EditOp::Substitute => {
                let pos = untouched[rng.below(untouched.len())];
                let current = tokens[pos].0;
                let choices: Vec<TokenId> =
                    replacement_pool.iter().copied().filter(|&t| t != current).collect();
                tokens[pos] = (choices[rng.below(choices.len())], false);
            }
            EditOp::Delete => {
                let pos = untouched[rng.below(untouched.len())];
                tokens.remove(pos);
            }
            EditOp::Insert => {
                let pos = rng.below(tokens.len() + 1);
                tokens.insert(pos, (replacement_pool[rng.below(replacement_pool.len())], false));
            }
        }
        ops.push(op);
    }
    Ok(Corruption { tokens: tokens.into_iter().map(|(t, _)| t).collect(), ops })
}
