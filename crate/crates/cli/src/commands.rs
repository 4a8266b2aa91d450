use std::path::Path;

use brewclip_core::checkpoint::{frozen_checkpoint, model_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta};
use brewclip_core::data::{generate_dataset, Dataset, GenConfig, Mood, Split, Vocabulary};
use brewclip_core::encoders::{pretrain_standins, transcribe_dataset};
use brewclip_core::eval::{
    compatibility, cross_dataset_eval, evaluate_retrieval, probe_features, ser_probe, wer_recall_analysis, CrossCell,
    EvalOptions, FeatureSource, RetrievalReport,
};
use brewclip_core::model::{BrewClipParams, ModelMode};
use brewclip_core::training::fit_with;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{csv_writer, write_json};
use crate::{
    AnalyzeWerArgs, CliError, CliResult, CrossEvalArgs, EvalArgs, FeaturesArg, GenDataArgs, PretrainArgs, ProbeArgs,
    SplitArg, TrainArgs,
};

const LOG_EVERY: u64 = 50;

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Model parameters from any checkpoint. Frozen checkpoints only serve the
/// zero-shot pipeline.
fn load_params(path: &Path, mode: Option<ModelMode>) -> CliResult<BrewClipParams> {
    let ck = read_checkpoint(path)?;
    let meta = ck.meta()?;
    match meta.kind {
        CheckpointKind::Frozen => match mode.unwrap_or(ModelMode::PipelineZeroShot) {
            ModelMode::PipelineZeroShot => Ok(BrewClipParams::new(ck.frozen_set()?, ModelMode::PipelineZeroShot, 0)),
            m => Err(CliError::Usage(format!(
                "{} holds frozen encoders only; train a {m} model first",
                path.display()
            ))),
        },
        CheckpointKind::Model => {
            let params = ck.params()?;
            match mode {
                Some(m) if m != params.mode => Err(CliError::Usage(format!(
                    "{} is a {} checkpoint and cannot be evaluated as {m}",
                    path.display(),
                    params.mode
                ))),
                _ => Ok(params),
            }
        }
    }
}

fn checkpoint_echo(path: &Path) -> CliResult<Value> {
    Ok(serde_json::to_value(read_checkpoint(path)?.meta()?)?)
}

pub fn gen_data(cfg: &mut RunConfig, a: &GenDataArgs) -> CliResult<()> {
    let asr = &mut cfg.asr;
    asr.target_wer = a.target_wer.unwrap_or(asr.target_wer);
    asr.wer_jitter = a.wer_jitter.unwrap_or(asr.wer_jitter);
    asr.crash_prob = a.crash_prob.unwrap_or(asr.crash_prob);
    asr.drop_filler_prob = a.drop_filler_prob.unwrap_or(asr.drop_filler_prob);
    cfg.asr.validate()?;
    let gen = GenConfig {
        style: a.style.into(),
        n_images: a.n_images,
        captions_per_image: a.captions_per_image,
        seed: cfg.seed,
    };
    let mut data = generate_dataset(&gen)?;
    let crashed = transcribe_dataset(&mut data, &cfg.asr, cfg.seed)?;
    data.header.run = cfg.echo();
    let out = cfg.resolve(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data.write(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    println!(
        "wrote {} samples ({} train, {} test, {} ASR crashes) to {}",
        data.samples.len(),
        data.split(Split::Train).len(),
        data.split(Split::Test).len(),
        crashed,
        out.display()
    );
    Ok(())
}

fn check_corpus(cfg: &RunConfig, path: &Path, data: &Dataset) -> CliResult<()> {
    let h = &data.header;
    let enc = &cfg.encoder;
    if h.vocab != Vocabulary::standard().tokens() || h.vocab.len() > enc.vocab_size {
        return Err(CliError::Data(format!(
            "{}: vocabulary ({} tokens) does not match the encoder vocabulary ({} slots)",
            path.display(),
            h.vocab.len(),
            enc.vocab_size
        )));
    }
    if h.patch_dim != enc.patch_dim || h.frame_width != enc.frame_width {
        return Err(CliError::Data(format!(
            "{}: patch/frame widths {}/{} differ from the encoder's {}/{}",
            path.display(),
            h.patch_dim,
            h.frame_width,
            enc.patch_dim,
            enc.frame_width
        )));
    }
    Ok(())
}

pub fn pretrain(cfg: &mut RunConfig, a: &PretrainArgs) -> CliResult<()> {
    if let Some(steps) = a.steps {
        cfg.pretrain.steps = steps;
    }
    if let Some(w) = a.warmup {
        cfg.pretrain.warmup_steps = w;
    }
    cfg.datasets = a.corpus.clone();
    cfg.validate()?;
    let corpus: Vec<Dataset> = a.corpus.iter().map(|p| read_dataset(p)).collect::<CliResult<_>>()?;
    for (p, d) in a.corpus.iter().zip(&corpus) {
        check_corpus(cfg, p, d)?;
    }
    let refs: Vec<&Dataset> = corpus.iter().collect();
    let (set, losses) = pretrain_standins(&refs, &cfg.encoder, &cfg.pretrain, cfg.seed)?;
    let echo = cfg.echo();
    let mut meta = CheckpointMeta::new(CheckpointKind::Frozen, None, cfg.encoder, echo.clone());
    meta.step = cfg.pretrain.steps;
    let out = cfg.resolve(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    frozen_checkpoint(&set, &meta)?.save(&out)?;
    if let Some(path) = &a.loss_csv {
        let mut w = csv_writer(&cfg.resolve(path), &echo)?;
        w.write_record(["step", "loss", "window_mean"])?;
        for (i, chunk) in losses.chunks(LOG_EVERY as usize).enumerate() {
            let step = i * LOG_EVERY as usize + chunk.len();
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            w.write_record([step.to_string(), losses[step - 1].to_string(), mean.to_string()])?;
        }
        w.flush()?;
    }
    let head = losses.iter().take(10).sum::<f64>() / losses.len().min(10) as f64;
    let tail = losses.iter().rev().take(10).sum::<f64>() / losses.len().min(10) as f64;
    println!("pretrained {} steps: loss {head:.4} -> {tail:.4}; wrote {}", losses.len(), out.display());
    Ok(())
}

pub fn train(cfg: &mut RunConfig, a: &TrainArgs, threads: usize) -> CliResult<()> {
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(steps) = a.steps {
        cfg.schedule.total_steps = steps;
    }
    if let Some(w) = a.warmup {
        cfg.schedule.warmup_steps = w;
    }
    if let Some(n) = a.eval_interval {
        cfg.eval_interval = n;
    }
    cfg.datasets = vec![a.data.clone()];
    cfg.validate()?;
    if !cfg.mode.is_trainable() {
        return Err(CliError::Usage(format!(
            "mode {} cannot be trained: it is evaluated without any fine tuning or prompting",
            cfg.mode
        )));
    }
    let frozen = read_checkpoint(&a.frozen)?.frozen_set()?;
    let data = read_dataset(&a.data)?;
    if let Some(reason) = compatibility(&BrewClipParams::new(frozen.clone(), ModelMode::PipelineZeroShot, 0), &data) {
        return Err(CliError::Data(format!("{}: {reason}", a.data.display())));
    }
    let params = BrewClipParams::new(frozen, cfg.mode, cfg.seed);
    let echo = cfg.echo();
    let mut log = match &a.log {
        Some(p) => {
            let mut w = csv_writer(&cfg.resolve(p), &echo)?;
            w.write_record(["step", "lr", "final", "inner", "outer"])?;
            Some(w)
        }
        None => None,
    };
    let total = cfg.schedule.total_steps;
    let mut log_err = None;
    let outcome = fit_with(params, &data, &cfg.fit_config(), threads, |r| {
        if r.step % LOG_EVERY == 0 || r.step == total {
            if let Some(w) = log.as_mut() {
                let row = [r.step.to_string(), r.lr.to_string(), r.loss.final_loss.to_string(), r.loss.inner.to_string(), r.loss.outer.to_string()];
                if let Err(e) = w.write_record(row) {
                    log_err.get_or_insert(e);
                }
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    for (step, report) in &outcome.evals {
        println!(
            "step {step}: speech2image R@1 {:.3} R@5 {:.3} R@10 {:.3}",
            report.speech2image.r1, report.speech2image.r5, report.speech2image.r10
        );
    }
    let mut meta = CheckpointMeta::new(CheckpointKind::Model, Some(cfg.mode), cfg.encoder, echo);
    meta.step = outcome.best_step;
    meta.best_r1 = outcome.best_r1;
    let out = cfg.resolve(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model_checkpoint(&outcome.best, &meta)?.save(&out)?;
    match outcome.best_r1 {
        Some(r1) => println!("kept step {} (R@1 {r1:.3}); wrote {}", outcome.best_step, out.display()),
        None => println!("trained {total} steps; wrote {}", out.display()),
    }
    Ok(())
}

fn report_echo(cfg: &RunConfig, checkpoint: &Path, extra: Value) -> CliResult<Value> {
    Ok(json!({ "run": cfg.echo(), "checkpoint": checkpoint_echo(checkpoint)?, "request": extra }))
}

fn write_report_csv(path: &Path, echo: &Value, reports: &[(String, String, Option<&RetrievalReport>)]) -> CliResult<()> {
    let mut w = csv_writer(path, echo)?;
    let mut header = vec!["checkpoint", "dataset", "status"];
    header.extend(RetrievalReport::CSV_COLUMNS);
    w.write_record(&header)?;
    for (ck, data, report) in reports {
        let mut row = vec![ck.clone(), data.clone()];
        match report {
            Some(r) => {
                row.push("ok".into());
                row.extend(r.metrics().iter().map(f64::to_string));
            }
            None => {
                row.push("incompatible".into());
                row.extend(std::iter::repeat_n(String::new(), RetrievalReport::CSV_COLUMNS.len()));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(cfg: &mut RunConfig, a: &EvalArgs, threads: usize) -> CliResult<()> {
    let params = load_params(&a.checkpoint, a.mode.map(Into::into))?;
    cfg.mode = params.mode;
    cfg.datasets = vec![a.data.clone()];
    let data = read_dataset(&a.data)?;
    if let Some(reason) = compatibility(&params, &data) {
        return Err(CliError::Data(format!("{}: {reason}", a.data.display())));
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let opts = EvalOptions { rule: a.recall_rule.into(), threads };
    let mut result = evaluate_retrieval(&params, &data, split, params.mode, a.text_source.into(), &opts)?;
    let echo = report_echo(
        cfg,
        &a.checkpoint,
        json!({ "split": split, "text_source": result.report.text_source, "recall_rule": opts.rule }),
    )?;
    result.report.config = echo.clone();
    let r = &result.report;
    write_json(&cfg.resolve(&a.out_json), &echo, "report", r)?;
    let mut w = csv_writer(&cfg.resolve(&a.out_csv), &echo)?;
    w.write_record(RetrievalReport::CSV_COLUMNS)?;
    w.write_record(r.metrics().iter().map(f64::to_string))?;
    w.flush()?;
    if let Some(path) = &a.samples {
        let mut w = csv_writer(&cfg.resolve(path), &echo)?;
        w.write_record(["sample_id", "image_id", "realized_wer", "hit_at_1"])?;
        for o in &result.outcomes {
            w.write_record([
                o.sample_id.to_string(),
                o.image_id.to_string(),
                o.realized_wer.map(|v| v.to_string()).unwrap_or_default(),
                u8::from(o.hit_at_1).to_string(),
            ])?;
        }
        w.flush()?;
    }
    println!(
        "{} ({}): speech2image R@1 {:.3} R@5 {:.3} R@10 {:.3} | image2speech R@1 {:.3} R@5 {:.3} R@10 {:.3} | {} queries, {} dropped",
        r.mode,
        r.text_source,
        r.speech2image.r1,
        r.speech2image.r5,
        r.speech2image.r10,
        r.image2speech.r1,
        r.image2speech.r5,
        r.image2speech.r10,
        r.n_queries_speech2image,
        r.n_dropped
    );
    Ok(())
}

pub fn probe_ser(cfg: &mut RunConfig, a: &ProbeArgs, threads: usize) -> CliResult<()> {
    let params = load_params(&a.checkpoint, None)?;
    cfg.mode = params.mode;
    cfg.datasets = vec![a.data.clone()];
    let data = read_dataset(&a.data)?;
    if let Some(reason) = compatibility(&params, &data) {
        return Err(CliError::Data(format!("{}: {reason}", a.data.display())));
    }
    let source = match a.features {
        FeaturesArg::Acoustic => FeatureSource::AcousticEncoder,
        FeaturesArg::Text => FeatureSource::TextChannel,
    };
    let samples: Vec<_> = data.samples.iter().collect();
    let features = probe_features(&params, &samples, source, threads)?;
    let labels: Vec<Mood> = samples.iter().map(|s| s.mood).collect();
    let train: Vec<bool> = samples.iter().map(|s| s.split == Split::Train).collect();
    let mut report = ser_probe(&features, &labels, &train, source, &cfg.probe)?;
    let echo = report_echo(cfg, &a.checkpoint, json!({ "features": source }))?;
    report.config = echo.clone();
    write_json(&cfg.resolve(&a.out), &echo, "report", &report)?;
    println!("accuracy: {:.3}", report.accuracy);
    Ok(())
}

pub fn analyze_wer(cfg: &RunConfig, a: &AnalyzeWerArgs) -> CliResult<()> {
    let file = std::fs::File::open(&a.samples).map_err(|e| CliError::Data(format!("{}: {e}", a.samples.display())))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", a.samples.display())))
    };
    let (wer_col, hit_col) = (col("realized_wer")?, col("hit_at_1")?);
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Data(format!("{}: row {}: bad {what}", a.samples.display(), i + 1));
        let wer = &rec[wer_col];
        if wer.is_empty() {
            continue;
        }
        let wer: f64 = wer.parse().map_err(|_| bad("realized_wer"))?;
        let hit = match &rec[hit_col] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("hit_at_1")),
        };
        points.push((wer, hit));
    }
    let mut fit = wer_recall_analysis(&points)?;
    let echo = json!({ "run": cfg.echo(), "samples": a.samples });
    fit.config = echo.clone();
    write_json(&cfg.resolve(&a.out), &echo, "analysis", &fit)?;
    let sign = if fit.slope < 0.0 { "negative" } else { "non-negative" };
    println!(
        "slope {:.4} ({sign}), intercept {:.4}, {} samples",
        fit.slope,
        fit.intercept,
        fit.points.len()
    );
    Ok(())
}

pub fn cross_eval(cfg: &mut RunConfig, a: &CrossEvalArgs, threads: usize) -> CliResult<()> {
    let params: Vec<BrewClipParams> = a.checkpoints.iter().map(|p| load_params(p, None)).collect::<CliResult<_>>()?;
    let data: Vec<Dataset> = a.data.iter().map(|p| read_dataset(p)).collect::<CliResult<_>>()?;
    cfg.datasets = a.data.clone();
    let prefs: Vec<&BrewClipParams> = params.iter().collect();
    let drefs: Vec<&Dataset> = data.iter().collect();
    let grid = cross_dataset_eval(&prefs, &drefs, a.text_source.into(), &EvalOptions { threads, ..EvalOptions::default() })?;
    let echo = json!({
        "run": cfg.echo(),
        "checkpoints": a.checkpoints.iter().map(|p| checkpoint_echo(p)).collect::<CliResult<Vec<_>>>()?,
    });
    let mut rows = Vec::new();
    for (i, row) in grid.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let report = match cell {
                CrossCell::Report(r) => Some(r.as_ref()),
                CrossCell::Incompatible(reason) => {
                    eprintln!("{} x {}: incompatible ({reason})", a.checkpoints[i].display(), a.data[j].display());
                    None
                }
            };
            rows.push((a.checkpoints[i].display().to_string(), a.data[j].display().to_string(), report));
        }
    }
    write_report_csv(&cfg.resolve(&a.out), &echo, &rows)?;
    let ok = rows.iter().filter(|r| r.2.is_some()).count();
    println!("{} cells ({ok} scored) written to {}", rows.len(), a.out.display());
    Ok(())
}
