use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::model::BrewClipParams;

use super::retrieval::{evaluate_retrieval, EvalOptions, RetrievalReport, TextSource};

/// One grid cell: a report, or the reason the pair could not be scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossCell {
    Report(Box<RetrievalReport>),
    Incompatible(String),
}

/// Reasons `params` cannot score `dataset`, if any.
pub fn compatibility(params: &BrewClipParams, dataset: &Dataset) -> Option<String> {
    let cfg = params.config();
    let h = &dataset.header;
    if h.vocab.len() > cfg.vocab_size {
        return Some(format!("dataset vocabulary has {} tokens, model embeds {}", h.vocab.len(), cfg.vocab_size));
    }
    if h.vocab != crate::data::Vocabulary::standard().tokens() {
        return Some("dataset vocabulary differs from the model's".into());
    }
    if h.patch_dim != cfg.patch_dim || h.frame_width != cfg.frame_width {
        return Some(format!(
            "dataset patch/frame widths {}/{} differ from model {}/{}",
            h.patch_dim, h.frame_width, cfg.patch_dim, cfg.frame_width
        ));
    }
    None
}

/// Every checkpoint against every dataset's test split. Incompatible or
/// failing pairs are marked and the sweep continues.
pub fn cross_dataset_eval(
    checkpoints: &[&BrewClipParams],
    datasets: &[&Dataset],
    source: TextSource,
    opts: &EvalOptions,
) -> Result<Vec<Vec<CrossCell>>> {
    Ok(checkpoints
        .iter()
        .map(|p| {
            datasets
                .iter()
                .map(|d| match compatibility(p, d) {
                    Some(reason) => CrossCell::Incompatible(reason),
                    None => match evaluate_retrieval(p, d, Split::Test, p.mode, source, opts) {
                        Ok(e) => CrossCell::Report(Box::new(e.report)),
                        Err(e) => CrossCell::Incompatible(e.to_string()),
                    },
                })
                .collect()
        })
        .collect())
}
