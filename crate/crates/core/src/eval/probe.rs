use serde::{Deserialize, Serialize};

use crate::data::{Mood, PairedSample};
use crate::error::{invalid, Result};
use crate::model::{BrewClipParams, Session};
use crate::numerics::{adam_step, AdamConfig, AdamState, Stream, Tape, Tensor};
use crate::parallel::par_map;

use super::retrieval::{audio_latents, speech_text, TextSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    AcousticEncoder,
    TextChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// Held-out accuracy per mood, `None` when the mood is absent there.
    pub per_class: Vec<Option<f64>>,
    pub feature_source: FeatureSource,
    pub head_trained: bool,
    pub backbone_frozen: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub config: serde_json::Value,
}

/// Frozen features for the probe. Acoustic features are F_A when the
/// parameters carry a trained acoustic layer, otherwise mean-pooled Z_A.
pub fn probe_features(
    params: &BrewClipParams,
    samples: &[&PairedSample],
    source: FeatureSource,
    threads: usize,
) -> Result<Tensor> {
    let d = params.config().d_model;
    let rows: Vec<Vec<f64>> = match source {
        FeatureSource::AcousticEncoder if params.mode.uses_acoustic() => par_map(samples, threads, |s| {
            let z = params.frozen.audio_latents(&s.audio)?;
            let mut tape = Tape::new();
            let session = Session::new(params, false);
            let (_, f_a, _) = session.encode_audio(&mut tape, &[&[]], &[&z])?;
            Ok(tape.value(f_a.expect("acoustic mode")).data().to_vec())
        })?,
        FeatureSource::AcousticEncoder => audio_latents(params, samples, threads)?
            .into_iter()
            .map(|z| {
                let n = z.shape()[0] as f64;
                (0..d).map(|j| (0..z.shape()[0]).map(|i| z.data()[i * d + j]).sum::<f64>() / n).collect()
            })
            .collect(),
        FeatureSource::TextChannel => {
            if !params.mode.uses_text() {
                return Err(invalid("parameters have no text channel"));
            }
            par_map(samples, threads, |s| {
                let text = speech_text(s, TextSource::Asr).or_else(|_| speech_text(s, TextSource::GroundTruth))?;
                let mut tape = Tape::new();
                let session = Session::new(params, false);
                let latents = if params.mode.uses_acoustic() { vec![params.frozen.audio_latents(&s.audio)?] } else { vec![] };
                let refs: Vec<&Tensor> = latents.iter().collect();
                let (f_t, _, _) = session.encode_audio(&mut tape, &[text], &refs)?;
                Ok(tape.value(f_t.expect("text mode")).data().to_vec())
            })?
        }
    };
    Tensor::from_rows(&rows)
}

fn standardize(train: &Tensor, x: &Tensor) -> Tensor {
    let (n, d) = train.dims2().expect("rank 2");
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += train.data()[i * d + j] / n as f64;
        }
    }
    for i in 0..n {
        for j in 0..d {
            var[j] += (train.data()[i * d + j] - mean[j]).powi(2) / n as f64;
        }
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / (var[j].sqrt() + 1e-8);
        }
    }
    out
}

fn rows_of(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Tensor::from_rows(&idx.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
}

/// Trains a linear softmax head on frozen `features` rows marked in `train`
/// and reports accuracy on the rest.
pub fn ser_probe(
    features: &Tensor,
    labels: &[Mood],
    train: &[bool],
    source: FeatureSource,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (n, d) = features.dims2()?;
    if labels.len() != n || train.len() != n {
        return Err(invalid("features, labels and split mask differ in length"));
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| train[i]).collect();
    let test_idx: Vec<usize> = (0..n).filter(|&i| !train[i]).collect();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(invalid("probe needs both training and held-out samples"));
    }
    let k = Mood::ALL.len();
    let mut present = vec![false; k];
    train_idx.iter().for_each(|&i| present[labels[i].index()] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(invalid("probe needs at least two classes in its training split"));
    }
    let x_train = rows_of(features, &train_idx)?;
    let x_train = standardize(&x_train, &x_train);
    let x_test = standardize(&rows_of(features, &train_idx)?, &rows_of(features, &test_idx)?);
    let mut onehot = Tensor::zeros(&[train_idx.len(), k]);
    for (r, &i) in train_idx.iter().enumerate() {
        onehot.data_mut()[r * k + labels[i].index()] = 1.0;
    }

    let mut rng = Stream::new(cfg.seed).fork_str("probe");
    let mut w = Tensor::new(vec![d, k], rng.normal_vec(d * k, 0.01))?;
    let mut b = Tensor::zeros(&[1, k]);
    let adam_cfg = AdamConfig { weight_decay: 1e-4, ..AdamConfig::default() };
    let mut state = AdamState::new([&w, &b]);
    let scale = -1.0 / train_idx.len() as f64;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let logits = tape.affine(x, wv, bv)?;
        let p = tape.softmax(logits, 1)?;
        let y = tape.constant(onehot.clone());
        let picked = tape.mul(p, y)?;
        let ones = tape.constant(Tensor::full(&[k, 1], 1.0));
        let py = tape.matmul(picked, ones)?;
        let lp = tape.log(py)?;
        let s = tape.sum(lp)?;
        let loss = tape.scale(s, scale)?;
        tape.backward(loss)?;
        let (gw, gb) = (tape.grad(wv).expect("param").to_vec(), tape.grad(bv).expect("param").to_vec());
        adam_step(&mut [&mut w, &mut b], &[&gw, &gb], &mut state, cfg.lr, &adam_cfg)?;
    }

    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (r, &i) in test_idx.iter().enumerate() {
        let xr = x_test.row(r);
        let pred = (0..k)
            .map(|c| (0..d).map(|j| xr[j] * w.data()[j * k + c]).sum::<f64>() + b.data()[c])
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
            .0;
        let truth = labels[i].index();
        total[truth] += 1;
        correct[truth] += usize::from(pred == truth);
    }
    Ok(ProbeReport {
        accuracy: correct.iter().sum::<usize>() as f64 / test_idx.len() as f64,
        per_class: (0..k).map(|c| (total[c] > 0).then(|| correct[c] as f64 / total[c] as f64)).collect(),
        feature_source: source,
        head_trained: true,
        backbone_frozen: true,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        config: serde_json::Value::Null,
    })
}
