use std::path::Path;
use std::process::{Command, Output};

fn emotune(args: &[&str], artifacts: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emotune"))
        .args(args)
        .env("EMOTUNE_ARTIFACTS", artifacts)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn emotune")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(emotune(&["no-such-command"], tmp.path()).status.code(), Some(1));
    assert_eq!(emotune(&["generate", "--emotion", "Q7"], tmp.path()).status.code(), Some(1));
    assert_eq!(emotune(&["generate"], tmp.path()).status.code(), Some(1));
    assert_eq!(emotune(&["--help"], tmp.path()).status.code(), Some(0));
    let m = tmp.path().join("m.json");
    std::fs::write(&m, r#"{"entries":[{"id":"a","path":"a.mid","label":"Q1"}]}"#).unwrap();
    let out = emotune(&["split", "--manifest", p(&m), "--out", p(tmp.path()), "--ratios", "0.5,0.4"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_split_is_stratified() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let out = emotune(&["synth-corpus", "--out", p(&corpus), "--n", "10", "--seed", "3"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&corpus).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mid")).count(), 40);

    let splits = tmp.path().join("splits");
    let out = emotune(&["split", "--manifest", p(&corpus.join("manifest.json")), "--out", p(&splits), "--seed", "3"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let load = |name: &str| -> serde_json::Value { serde_json::from_slice(&std::fs::read(splits.join(name)).unwrap()).unwrap() };
    let (train, valid, test) = (load("train.json"), load("valid.json"), load("test.json"));
    let count = |v: &serde_json::Value, q: &str| v["entries"].as_array().unwrap().iter().filter(|e| e["label"] == q).count();
    for q in ["Q1", "Q2", "Q3", "Q4"] {
        assert_eq!((count(&train, q), count(&valid, q), count(&test, q)), (8, 1, 1), "{q}");
    }
    // absolute paths so the split manifests can be used from anywhere
    assert!(Path::new(train["entries"][0]["path"].as_str().unwrap()).is_absolute());
}

#[test]
fn tiny_pipeline_runs_and_skips_when_current() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let arts = tmp.path().join("artifacts");
    assert!(emotune(&["synth-corpus", "--out", p(&corpus), "--n", "12", "--noise", "0.2"], &arts).status.success());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "generate_per_quadrant": 2,
            "bias_n": 2,
            "bias_per_sample": 1,
            "sampler": { "p": 0.9, "temperature": 1.0, "max_tokens": 96, "seed": 0 }
        })
        .to_string(),
    )
    .unwrap();
    let args = ["--config", p(&cfg), "run", "--corpus", p(&corpus), "--top-k", "6", "--model", "tiny", "--steps", "30"];
    let first = emotune(&args, &arts);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let report = json(&first);
    assert!(report["stages"].as_array().unwrap().iter().all(|s| s["executed"] == true));

    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(arts.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval["n_generated"], 8);
    let acc = eval["objective_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(std::fs::read_dir(arts.join("generated")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mid")).count(), 8);

    let second = emotune(&args, &arts);
    assert!(second.status.success());
    assert!(json(&second)["stages"].as_array().unwrap().iter().all(|s| s["executed"] == false));

    let out_dir = tmp.path().join("gen");
    let out = emotune(&["--config", p(&cfg), "generate", "--emotion", "Q3", "--n", "2", "--out", p(&out_dir)], &arts);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["generated"], 2);
    assert!(out_dir.join("Q3_0001.mid").exists());

    // six raw values against six selected attributes
    let attr = tmp.path().join("attr.json");
    std::fs::write(&attr, "[1, 2, 3, 4, 5, 6]").unwrap();
    let out = emotune(&["--config", p(&cfg), "generate", "--attr-file", p(&attr), "--out", p(&out_dir)], &arts);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(&attr, "[1, 2]").unwrap();
    let out = emotune(&["--config", p(&cfg), "generate", "--attr-file", p(&attr), "--out", p(&out_dir)], &arts);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_midi_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    std::fs::write(corpus.join("broken.mid"), b"MThd\x00\x00\x00\x06\x00").unwrap();
    let out = emotune(&["extract", "--corpus", p(&corpus)], &tmp.path().join("artifacts"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = emotune(&["train-forest"], &tmp.path().join("empty"));
    assert_ne!(missing.status.code(), Some(0));
}
