use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use prism_core::aligner::{AdamW, AdamWConfig, AlignModel, Checkpoint};
use prism_core::lm::{tokenize, FrozenLm};
use prism_core::numerics::fnv1a64;

fn prism(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = prism(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn file_hash(path: &Path) -> u64 {
    fnv1a64(&std::fs::read(path).unwrap())
}

#[test]
fn init_lm_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "init-lm", "--seed", "42", "--preset", "tiny", "--out", "a.flmw",
        ],
    );
    ok(
        d,
        &[
            "init-lm", "--seed", "42", "--preset", "tiny", "--out", "b.flmw",
        ],
    );
    ok(
        d,
        &[
            "init-lm", "--seed", "43", "--preset", "tiny", "--out", "c.flmw",
        ],
    );
    assert_eq!(file_hash(&d.join("a.flmw")), file_hash(&d.join("b.flmw")));
    assert_ne!(file_hash(&d.join("a.flmw")), file_hash(&d.join("c.flmw")));

    let lm = FrozenLm::load(&d.join("a.flmw")).unwrap();
    let c = lm.config();
    assert_eq!(
        (c.vocab_size, c.d_model, c.n_layers, c.n_heads),
        (260, 64, 2, 4)
    );
    let hidden = lm.forward_causal(&tokenize("hello")).unwrap();
    assert_eq!(hidden.shape(), &[6, 64]);
    assert!(hidden.all_finite());
}

#[test]
fn synth_data_is_deterministic_and_fast() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let t = Instant::now();
    ok(
        d,
        &["synth-data", "--n", "256", "--seed", "3", "--out", "a"],
    );
    assert!(t.elapsed().as_secs_f64() < 10.0, "took {:?}", t.elapsed());
    ok(
        d,
        &["synth-data", "--n", "256", "--seed", "3", "--out", "b"],
    );
    let a = std::fs::read_to_string(d.join("a/corpus.jsonl")).unwrap();
    assert_eq!(
        a,
        std::fs::read_to_string(d.join("b/corpus.jsonl")).unwrap()
    );
    assert_eq!(a.lines().count(), 256);
    for name in ["000000.ppm", "000255.ppm"] {
        assert_eq!(
            file_hash(&d.join("a/images").join(name)),
            file_hash(&d.join("b/images").join(name))
        );
    }
    for line in a.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let caption = rec["caption"].as_str().unwrap();
        for key in ["shape", "color"] {
            assert!(
                caption.contains(rec["labels"][key].as_str().unwrap()),
                "{caption}"
            );
        }
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-lm", "--out", "lm.flmw"]);
    ok(
        d,
        &["synth-data", "--n", "24", "--seed", "1", "--out", "train"],
    );
    ok(
        d,
        &[
            "synth-data",
            "--n",
            "8",
            "--seed",
            "2",
            "--single-object",
            "--out",
            "held",
        ],
    );
    ok(
        d,
        &[
            "embed",
            "--corpus",
            "train/corpus.jsonl",
            "--lm",
            "lm.flmw",
            "--out",
            "store",
            "--shard-size",
            "10",
        ],
    );
    assert_eq!(std::fs::read_dir(d.join("store")).unwrap().count(), 3);
    ok(
        d,
        &[
            "train",
            "--corpus",
            "train/corpus.jsonl",
            "--store",
            "store",
            "--out",
            "model.flmw",
            "--steps",
            "4",
            "--batch-size",
            "8",
            "--metrics",
            "metrics.jsonl",
        ],
    );
    let metrics = std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let report: serde_json::Value = serde_json::from_str(&ok(
        d,
        &[
            "eval-retrieval",
            "--model",
            "model.flmw",
            "--corpus",
            "train/corpus.jsonl",
            "--store",
            "store",
            "--json",
        ],
    ))
    .unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
    for dir_report in report.as_array().unwrap() {
        assert_eq!(dir_report["n_queries"], 24);
        let recall: Vec<f64> = dir_report["recall"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p[1].as_f64().unwrap())
            .collect();
        assert!(recall.windows(2).all(|w| w[0] <= w[1]) && recall[2] <= 1.0);
    }

    let table = ok(
        d,
        &[
            "eval-classify",
            "--model",
            "model.flmw",
            "--lm",
            "lm.flmw",
            "--corpus",
            "held/corpus.jsonl",
            "--task",
            "color",
        ],
    );
    assert!(table.contains("accuracy"), "{table}");

    let map: serde_json::Value = serde_json::from_str(&ok(
        d,
        &[
            "vocabmap",
            "--model",
            "model.flmw",
            "--lm",
            "lm.flmw",
            "--image",
            "held/images/000000.ppm",
            "--pool",
            "2",
            "--overlay",
            "overlay.ppm",
            "--json",
        ],
    ))
    .unwrap();
    assert_eq!(map["side"], 2);
    assert_eq!(map["words"].as_array().unwrap().len(), 4);
    assert!(std::fs::read(d.join("overlay.ppm"))
        .unwrap()
        .starts_with(b"P6"));
}

#[test]
fn train_reports_first_missing_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-lm", "--out", "lm.flmw"]);
    ok(
        d,
        &["synth-data", "--n", "6", "--seed", "1", "--out", "small"],
    );
    ok(
        d,
        &["synth-data", "--n", "9", "--seed", "1", "--out", "big"],
    );
    ok(
        d,
        &[
            "embed",
            "--corpus",
            "small/corpus.jsonl",
            "--lm",
            "lm.flmw",
            "--out",
            "store",
        ],
    );
    let out = prism(
        d,
        &[
            "train",
            "--corpus",
            "big/corpus.jsonl",
            "--store",
            "store",
            "--out",
            "m.flmw",
            "--steps",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("sample 6 not found"),
        "{}",
        stderr(&out)
    );

    let out = prism(
        d,
        &[
            "train",
            "--corpus",
            "big/corpus.jsonl",
            "--store",
            "nowhere",
            "--out",
            "m.flmw",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(prism(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(prism(d, &["init-lm"]).status.code(), Some(1));
    std::fs::write(d.join("bad.json"), r#"{"train": {"stepz": 1}}"#).unwrap();
    let out = prism(d, &["--config", "bad.json", "init-lm", "--out", "x.flmw"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
    assert!(!d.join("x.flmw").exists());
}

#[test]
fn resolved_config_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.json"), r#"{"lm": {"seed": 5}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_prism"))
        .current_dir(d)
        .env("RUST_LOG", "info")
        .args(["--config", "run.json", "init-lm", "--out", "lm.flmw"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let log = stderr(&out);
    assert!(
        log.contains("resolved config")
            && log.contains("\"seed\": 5")
            && log.contains("\"batch_size\""),
        "{log}"
    );
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-lm", "--out", "lm.flmw"]);
    ok(
        d,
        &["synth-data", "--n", "8", "--seed", "1", "--out", "data"],
    );
    ok(
        d,
        &[
            "embed",
            "--corpus",
            "data/corpus.jsonl",
            "--lm",
            "lm.flmw",
            "--out",
            "store",
        ],
    );

    let mut model = AlignModel::new(Default::default(), 64, 0).unwrap();
    let id = model.params.find("proj.w2").unwrap();
    model.params.get_mut(id).data_mut().fill(f32::NAN);
    let optim = AdamW::new(AdamWConfig::default(), &model.params);
    Checkpoint {
        model,
        optim,
        step: 0,
    }
    .save(&d.join("nan.flmw"))
    .unwrap();

    let out = prism(
        d,
        &[
            "train",
            "--corpus",
            "data/corpus.jsonl",
            "--store",
            "store",
            "--resume",
            "nan.flmw",
            "--out",
            "m.flmw",
            "--steps",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("step 0"), "{}", stderr(&out));
}

#[test]
fn bench_fda_emits_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "bench-fda",
            "--k",
            "7",
            "--captions",
            "1",
            "--reps",
            "1",
            "--prefix",
            "64",
        ],
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let report: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(report["facets"], 7);
    assert_eq!(report["mean_prefix_tokens"], 64.0);
    assert!(report["speedup"].as_f64().unwrap() > 0.0);
}
