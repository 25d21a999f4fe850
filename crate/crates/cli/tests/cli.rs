use std::path::Path;
use std::process::{Command, Output};

use iser_core::data::to_span_json;
use iser_core::synthetic::toy_corpus;

fn iser(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iser"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> String {
    stderr(o).lines().find(|l| l.starts_with("ERROR ")).unwrap_or_default().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stats_counts_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.json"), to_span_json(&toy_corpus(20, 0))).unwrap();
    let o = iser(&["stats", "--set", "train_path=toy.json", "--set", "output_dir=out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("20"), "{stdout}");
    let v = json(&dir.path().join("out/stats.json"));
    assert_eq!(v["datasets"]["train"]["sentences"], 20);
    assert_eq!(v["datasets"]["train"]["relations"], 24);
    assert_eq!(v["config"]["train_path"], "toy.json");
}

#[test]
fn memorised_corpus_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.json"), to_span_json(&toy_corpus(20, 0))).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "train_path = \"toy.json\"\neval_path = \"toy.json\"\noutput_dir = \"run\"\n\
         epochs = 200\nseed = 7\ndim = 32\nheads = 2\ndropout = 0.0\nmax_span_width = 3\n\
         width_dim = 8\ncontext_heads = 2\nneg_entities = 1000\nneg_relations = 1000\n",
    )
    .unwrap();
    let o = iser(&["train", "--config", "run.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = json(&dir.path().join("run/loss_trace.json"));
    assert_eq!(trace["epochs"].as_array().unwrap().len(), 200);
    assert_eq!(trace["config"]["epochs"], 200);

    let o = iser(&["eval", "--config", "run.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("run/report.json"));
    assert_eq!(r["ner"]["micro"]["f1"], 1.0, "{r}");
    assert_eq!(r["re"]["micro"]["f1"], 1.0, "{r}");
    assert!(dir.path().join("run/report.txt").exists());

    let o = iser(&["predict", "--config", "run.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let p = json(&dir.path().join("run/predictions.json"));
    assert_eq!(p["predictions"].as_array().unwrap().len(), 20);
    assert_eq!(p["predictions"][0]["id"], "toy-0");
    assert_eq!(p["config"]["seed"], 7);

    let o = iser(&["attn", "--config", "run.toml", "--set", "attn_limit=2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.path().join("run/attn_manifest.json"));
    let dumps = m["dumps"].as_array().unwrap();
    assert_eq!(dumps.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("run").join(dumps[0]["query_relations"].as_str().unwrap())).unwrap();
    let n = dumps[0]["tokens"].as_array().unwrap().len();
    assert_eq!(csv.lines().count(), n + 2);
}

#[test]
fn loss_trace_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.json"), to_span_json(&toy_corpus(6, 1))).unwrap();
    let mut traces = Vec::new();
    for out in ["a", "b"] {
        let o = iser(
            &[
                "train", "--set", "train_path=toy.json", "--set", "epochs=3", "--set", "dim=16",
                "--set", "max_span_width=3", "--set", "width_dim=4", "--set", "output_dir=same",
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        traces.push(std::fs::read(dir.path().join("same/loss_trace.json")).unwrap());
        std::fs::rename(dir.path().join("same"), dir.path().join(out)).unwrap();
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn missing_dataset_fails_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = iser(&["train", "--set", "train_path=nope.json", "--set", "output_dir=out"], dir.path());
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("ERROR IO: "), "{}", stderr(&o));
    assert!(!dir.path().join("out/checkpoint.json").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "epochz = 3\n").unwrap();
    let o = iser(&["stats", "--config", "run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let line = error_line(&o);
    assert!(line.starts_with("ERROR CONFIG: ") && line.contains("epochz"), "{line}");
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.json"), to_span_json(&toy_corpus(2, 0))).unwrap();
    std::fs::write(dir.path().join("old.json"), r#"{"format_version": 99}"#).unwrap();
    let o = iser(&["eval", "--set", "eval_path=toy.json", "--set", "checkpoint=old.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("ERROR CHECKPOINT_VERSION: "), "{}", stderr(&o));
}

#[test]
fn missing_eval_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = iser(&["stats"], dir.path());
    assert!(error_line(&o).starts_with("ERROR CONFIG: "), "{}", stderr(&o));
}
