use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use brewclip_core::checkpoint::Checkpoint;
use brewclip_core::data::Dataset;

const BIN: &str = env!("CARGO_BIN_EXE_brewclip");

fn brewclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("BFRC_THREADS").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brewclip(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A small corpus, a dataset, a pretrained checkpoint and a trained model,
/// built once for all tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(
            root.join("small.json"),
            r#"{"pretrain": {"steps": 500, "batch_size": 8, "peak_lr": 0.002, "warmup_steps": 20, "final_lr": 0.00001, "tint_prob": 0.5},
                "loss": {"alpha": 0.1, "batch_size": 8}}"#,
        )
        .unwrap();
        ok(&root, &["gen-data", "--style", "scripted", "--n-images", "40", "--captions", "2", "--seed", "1", "--out", "corpus.jsonl"]);
        ok(&root, &[
            "gen-data", "--style", "unscripted", "--n-images", "40", "--captions", "2", "--seed", "2", "--target-wer", "0.3",
            "--wer-jitter", "0.2", "--crash-prob", "0.05", "--out", "data.jsonl",
        ]);
        ok(&root, &["--config", "small.json", "pretrain", "--corpus", "corpus.jsonl", "--out", "pre.bfrc", "--loss-csv", "pre.csv"]);
        ok(&root, &[
            "--config", "small.json", "train", "--frozen", "pre.bfrc", "--data", "data.jsonl", "--mode", "full", "--steps", "20",
            "--warmup", "2", "--eval-interval", "10", "--out", "full.bfrc", "--log", "train.csv",
        ]);
        Fixture { _dir: dir, root }
    })
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn data_lines(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn gen_data_counts_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gen-data", "--style", "scripted", "--n-images", "100", "--captions", "5", "--out", "a.jsonl"]);
    assert!(out.contains("500 samples"), "{out}");
    ok(dir.path(), &["gen-data", "--style", "scripted", "--n-images", "100", "--captions", "5", "--out", "b.jsonl"]);
    let a = read(&dir.path().join("a.jsonl"));
    assert_eq!(a, read(&dir.path().join("b.jsonl")));
    let d = Dataset::read(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(d.samples.len(), 500);
    assert_eq!(d.header.run["seed"], 0);
}

#[test]
fn gen_data_rejects_odd_mood_pairs_and_bad_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = brewclip(dir.path(), &["gen-data", "--style", "mood-aware", "--n-images", "101", "--out", "m.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("even"));
    std::fs::write(dir.path().join("file"), "x").unwrap();
    let out = brewclip(dir.path(), &["gen-data", "--style", "scripted", "--n-images", "4", "--out", "file/sub/d.jsonl"]);
    assert_ne!(code(&out), 0);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&brewclip(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&brewclip(dir.path(), &["gen-data", "--style", "scripted"])), 1);
    assert_eq!(code(&brewclip(dir.path(), &["--help"])), 0);
    std::fs::write(dir.path().join("bad.json"), r#"{"sead": 1}"#).unwrap();
    let out = brewclip(dir.path(), &["--config", "bad.json", "gen-data", "--style", "scripted", "--n-images", "4", "--out", "d"]);
    assert_eq!(code(&out), 1);
    let out = Command::new(BIN)
        .args(["gen-data", "--style", "scripted", "--n-images", "4", "--out", "d"])
        .current_dir(dir.path())
        .env("BFRC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn pretraining_log_trends_down_and_checkpoint_reloads() {
    let f = fixture();
    let csv = std::fs::read_to_string(f.root.join("pre.csv")).unwrap();
    assert!(csv.starts_with("# brewclip format_version=1 config={"));
    let rows: Vec<Vec<f64>> = data_lines(&csv)[1..]
        .iter()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().map(|r| r[0] as u64).collect::<Vec<_>>(), (1..=10).map(|i| i * 50).collect::<Vec<_>>());
    assert!(rows[9][2] < rows[0][2], "{} vs {}", rows[9][2], rows[0][2]);

    let bytes = read(&f.root.join("pre.bfrc"));
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert_eq!(ck.meta().unwrap().run["pretrain"]["steps"], 500);
}

#[test]
fn corrupt_checkpoint_is_refused() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = read(&f.root.join("pre.bfrc"));
    let mid = bytes.len() / 3;
    bytes[mid] ^= 0xff;
    std::fs::write(dir.path().join("bad.bfrc"), bytes).unwrap();
    let data = f.root.join("data.jsonl");
    let out = brewclip(dir.path(), &[
        "eval", "--checkpoint", "bad.bfrc", "--data", data.to_str().unwrap(), "--out-json", "r.json", "--out-csv", "r.csv",
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("CRC mismatch") && err.contains("corrupt"), "{err}");
}

#[test]
fn pretraining_rejects_foreign_vocabulary() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(f.root.join("corpus.jsonl")).unwrap();
    let mut d = Dataset::parse(text.as_bytes()).unwrap();
    d.header.vocab[3] = "zebra".into();
    d.write(&dir.path().join("odd.jsonl")).unwrap();
    let out = brewclip(dir.path(), &["pretrain", "--corpus", "odd.jsonl", "--out", "p.bfrc", "--steps", "5", "--warmup", "1"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("p.bfrc").exists());
}

#[test]
fn training_keeps_frozen_weights_and_refuses_zero_shot() {
    let f = fixture();
    let pre = Checkpoint::load(&f.root.join("pre.bfrc")).unwrap().frozen_set().unwrap();
    let ck = Checkpoint::load(&f.root.join("full.bfrc")).unwrap();
    let trained = ck.params().unwrap();
    assert_eq!(trained.frozen.to_bytes(), pre.to_bytes());
    let meta = ck.meta().unwrap();
    assert!(meta.best_r1.is_some());
    assert_eq!(meta.run["mode"], "full");

    let log = std::fs::read_to_string(f.root.join("train.csv")).unwrap();
    assert_eq!(data_lines(&log)[0], "step,lr,final,inner,outer");

    let out = brewclip(&f.root, &["train", "--frozen", "pre.bfrc", "--data", "data.jsonl", "--mode", "pipeline-zero-shot", "--out", "z.bfrc"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("without any fine tuning or prompting"));
}

#[test]
fn divergent_training_exits_three() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("hot.json"),
        r#"{"schedule": {"peak_lr": 1e300, "warmup_steps": 0, "final_lr": 1e300, "total_steps": 5}, "eval_interval": 0}"#,
    )
    .unwrap();
    let pre = f.root.join("pre.bfrc");
    let data = f.root.join("data.jsonl");
    let out = brewclip(dir.path(), &[
        "--config", "hot.json", "train", "--frozen", pre.to_str().unwrap(), "--data", data.to_str().unwrap(), "--mode",
        "pipeline-prompted", "--out", "h.bfrc",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reports_are_stable_and_six_columns_wide() {
    let f = fixture();
    let args = |tag: &str| {
        vec![
            "eval".to_string(), "--checkpoint".into(), "full.bfrc".into(), "--data".into(), "data.jsonl".into(),
            "--out-json".into(), format!("{tag}.json"), "--out-csv".into(), format!("{tag}.csv"),
            "--samples".into(), format!("{tag}.samples.csv"),
        ]
    };
    let a: Vec<String> = args("e1");
    ok(&f.root, &a.iter().map(String::as_str).collect::<Vec<_>>());
    let b: Vec<String> = args("e2");
    let out = Command::new(BIN).args(&b).current_dir(&f.root).env("BFRC_THREADS", "3").output().unwrap();
    assert!(out.status.success());
    for ext in ["json", "csv", "samples.csv"] {
        assert_eq!(read(&f.root.join(format!("e1.{ext}"))), read(&f.root.join(format!("e2.{ext}"))), "{ext}");
    }
    let csv = std::fs::read_to_string(f.root.join("e1.csv")).unwrap();
    let lines = data_lines(&csv);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), 6);
    assert_eq!(lines[1].split(',').count(), 6);
    let json: serde_json::Value = serde_json::from_slice(&read(&f.root.join("e1.json"))).unwrap();
    assert_eq!(json["format_version"], 1);
    assert_eq!(json["report"]["mode"], "full");
    assert!(json["config"]["run"].is_object());
}

#[test]
fn e2e_only_has_no_ground_truth_source() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let pre = f.root.join("pre.bfrc");
    let data = f.root.join("data.jsonl");
    ok(dir.path(), &[
        "train", "--frozen", pre.to_str().unwrap(), "--data", data.to_str().unwrap(), "--mode", "e2e-only", "--steps", "3",
        "--warmup", "1", "--eval-interval", "0", "--out", "e.bfrc",
    ]);
    let out = brewclip(dir.path(), &[
        "eval", "--checkpoint", "e.bfrc", "--data", data.to_str().unwrap(), "--text-source", "ground-truth", "--out-json",
        "r.json", "--out-csv", "r.csv",
    ]);
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn probe_prints_three_decimals_and_writes_its_report() {
    let f = fixture();
    for features in ["acoustic", "text"] {
        let out_file = format!("probe-{features}.json");
        let out = ok(&f.root, &["probe-ser", "--checkpoint", "pre.bfrc", "--data", "data.jsonl", "--features", features, "--out", &out_file]);
        let line = out.lines().find(|l| l.starts_with("accuracy: ")).unwrap();
        let value = line.trim_start_matches("accuracy: ");
        assert_eq!(value.split('.').nth(1).unwrap().len(), 3, "{line}");
        let doc: serde_json::Value = serde_json::from_slice(&read(&f.root.join(&out_file))).unwrap();
        let report: brewclip_core::eval::ProbeReport = serde_json::from_value(doc["report"].clone()).unwrap();
        assert_eq!(format!("{:.3}", report.accuracy), value);
        assert!(report.backbone_frozen && report.head_trained);
    }
}

#[test]
fn wer_analysis_is_deterministic_and_guarded() {
    let f = fixture();
    ok(&f.root, &[
        "eval", "--checkpoint", "full.bfrc", "--data", "data.jsonl", "--split", "train", "--out-json", "tr.json", "--out-csv",
        "tr.csv", "--samples", "tr.samples.csv",
    ]);
    let a = ok(&f.root, &["analyze-wer", "--samples", "tr.samples.csv", "--out", "w1.json"]);
    ok(&f.root, &["analyze-wer", "--samples", "tr.samples.csv", "--out", "w2.json"]);
    assert!(a.contains("negative") || a.contains("non-negative"));
    assert_eq!(read(&f.root.join("w1.json")), read(&f.root.join("w2.json")));

    let dir = tempfile::tempdir().unwrap();
    let mut few = String::from("sample_id,image_id,realized_wer,hit_at_1\n");
    for i in 0..29 {
        few.push_str(&format!("{i},{i},{},{}\n", i as f64 / 29.0, i % 2));
    }
    std::fs::write(dir.path().join("few.csv"), few).unwrap();
    assert_eq!(code(&brewclip(dir.path(), &["analyze-wer", "--samples", "few.csv", "--out", "w.json"])), 1);
}

#[test]
fn cross_eval_grid_matches_eval_and_marks_incompatible_cells() {
    let f = fixture();
    let text = std::fs::read_to_string(f.root.join("data.jsonl")).unwrap();
    let mut odd = Dataset::parse(text.as_bytes()).unwrap();
    odd.header.vocab[7] = "zebra".into();
    odd.write(&f.root.join("odd.jsonl")).unwrap();
    let out = brewclip(&f.root, &[
        "cross-eval", "--checkpoints", "full.bfrc", "pre.bfrc", "--data", "data.jsonl", "corpus.jsonl", "odd.jsonl", "--out",
        "grid.csv",
    ]);
    assert_eq!(code(&out), 0);
    let grid = std::fs::read_to_string(f.root.join("grid.csv")).unwrap();
    let rows = data_lines(&grid);
    assert_eq!(rows.len(), 1 + 2 * 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 9));
    assert!(rows.iter().filter(|r| r.contains("odd.jsonl")).all(|r| r.contains(",incompatible,")));

    ok(&f.root, &["eval", "--checkpoint", "full.bfrc", "--data", "data.jsonl", "--out-json", "d.json", "--out-csv", "d.csv"]);
    let single = std::fs::read_to_string(f.root.join("d.csv")).unwrap();
    let metrics = data_lines(&single)[1];
    assert_eq!(rows[1], format!("full.bfrc,data.jsonl,ok,{metrics}"));
}

#[test]
fn config_file_round_trips_field_names() {
    let cfg = brewclip_cli::RunConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: brewclip_cli::RunConfig = text.parse().unwrap();
    assert_eq!(back, cfg);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["adam", "asr", "datasets", "encoder", "eval_interval", "loss", "mode", "output_dir", "pretrain", "probe", "schedule", "seed"]
    );
    assert_eq!(cfg.schedule.total_steps, 3000);
    assert_eq!(cfg.loss.batch_size, 32);
    assert_eq!(cfg.encoder.d_model, 32);
}
