use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defemb_core::geometry::EmbeddingMatrix;
use defemb_core::pipeline::embeddings_to_bytes;

fn defemb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defemb"))
        .current_dir(dir)
        .env_remove("DEFEMB_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn write_emb(dir: &Path) -> PathBuf {
    let data: Vec<f64> = (0..60).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let e = EmbeddingMatrix::new(15, 4, data).unwrap();
    let p = dir.join("e.emb");
    std::fs::write(&p, embeddings_to_bytes(&e)).unwrap();
    p
}

fn manifest(dir: &Path, run: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("runs").join(run).join("manifest.json")).unwrap()).unwrap()
}

fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error record");
    serde_json::from_str(line).unwrap()
}

#[test]
fn isotropy_writes_csv_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    write_emb(tmp.path());
    let out = defemb(tmp.path(), &["isotropy", "--emb", "e.emb"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("runs/isotropy/isotropy.csv")).unwrap();
    assert!(csv.starts_with("group,score\nall,"));
    let m = manifest(tmp.path(), "isotropy");
    assert_eq!(m["command"], "isotropy");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["inputs"][0]["arg"], "emb");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "isotropy.csv"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["isotropy", "--emb", "e.emb", "--bogus"][..], &["no-such-command"], &[]] {
        let out = defemb(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let out = defemb(tmp.path(), &["isotropy", "--bogus"]);
    assert_eq!(stderr_record(&out)["error"], "usage");
    assert_eq!(defemb(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_keys_are_checked_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    write_emb(tmp.path());
    std::fs::write(tmp.path().join("bad.cfg"), "emb = e.emb\nno_such_key = 1\n").unwrap();
    let out = defemb(tmp.path(), &["--config", "bad.cfg", "isotropy"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(tmp.path().join("ok.cfg"), "# comment\nemb = e.emb\nseed = 7\nbeta = 2\n").unwrap();
    let out = defemb(tmp.path(), &["--config", "ok.cfg", "--name", "a", "deldirection"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path(), "a");
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(7), Some("config")));
    assert_eq!(m["config"]["beta"], "2");

    let out = defemb(tmp.path(), &["--config", "ok.cfg", "--name", "b", "--seed", "9", "deldirection", "--beta", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let m = manifest(tmp.path(), "b");
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(9), Some("flag")));
    assert_eq!(m["config"]["beta"], "1");
}

#[test]
fn seed_falls_back_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    write_emb(tmp.path());
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_defemb"))
            .current_dir(tmp.path())
            .env("DEFEMB_SEED", seed)
            .args(["--name", "env", "isotropy", "--emb", "e.emb"])
            .output()
            .unwrap()
    };
    assert_eq!(run("42").status.code(), Some(0));
    let m = manifest(tmp.path(), "env");
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(42), Some("env")));
    assert_eq!(run("forty-two").status.code(), Some(2));
}

#[test]
fn identical_runs_give_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    write_emb(tmp.path());
    for parent in ["one", "two"] {
        let out = defemb(tmp.path(), &["--run-dir", parent, "--seed", "3", "project", "--emb", "e.emb"]);
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |p: &str| std::fs::read(tmp.path().join(p).join("project/manifest.json")).unwrap();
    assert_eq!(read("one"), read("two"));
    let svg = std::fs::read_to_string(tmp.path().join("one/project/projection.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn runtime_errors_exit_1_with_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = defemb(tmp.path(), &["isotropy", "--emb", "missing.emb"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"], "runtime");
    assert!(tmp.path().join("runs/isotropy/error.json").is_file());

    std::fs::write(tmp.path().join("bad.emb"), b"EMB1\x01\x00").unwrap();
    let out = defemb(tmp.path(), &["--name", "bad", "isotropy", "--emb", "bad.emb"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"], "core");
}

#[test]
fn report_converts_projection_csv() {
    let tmp = tempfile::tempdir().unwrap();
    write_emb(tmp.path());
    assert_eq!(defemb(tmp.path(), &["project", "--emb", "e.emb"]).status.code(), Some(0));
    let out = defemb(tmp.path(), &["report", "--input", "runs/project/projection.csv", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("runs/report/projection.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().map(Vec::len), Some(15));
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let tk = "runs/tok/tokenizer.txt";
    let steps: [&[&str]; 9] = [
        &["--name", "tok", "tokenizer-train"],
        &["--name", "pre", "pretrain", "--tokenizer", tk, "--steps", "20", "--layers", "1"],
        &["--name", "mim", "mimic-train", "--plm", "runs/pre/plm.ckpt", "--tokenizer", tk, "--steps", "10"],
        &["--name", "rec", "reconstruct", "--defemb", "runs/mim/defemb.ckpt", "--tokenizer", tk],
        &[
            "--name", "plan", "plan", "--tokenizer", tk, "--counts", "runs/tok/counts.jsonl", "--alpha", "10", "--backfill", "true",
            "--reconstructions", "runs/rec/reconstructions.jsonl",
        ],
        &[
            "--name", "app", "apply", "--emb", "runs/pre/embeddings.emb", "--plan", "runs/plan/plan.json", "--reconstructions",
            "runs/rec/reconstructions.jsonl",
        ],
        &[
            "--name", "again", "apply", "--emb", "runs/app/embeddings.emb", "--plan", "runs/plan/plan.json", "--reconstructions",
            "runs/rec/reconstructions.jsonl", "--lock", "runs/app/lock.json",
        ],
        &["--name", "md", "mse-dist", "--pre", "runs/pre/embeddings.emb", "--def", "runs/app/embeddings.emb"],
        &["--name", "pr", "prompts-build", "--tokenizer", tk, "--mode", "t5"],
    ];
    for args in steps {
        let out = defemb(d, args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let plan = manifest(d, "plan");
    let selected = plan["results"]["selected"].as_array().unwrap().len();
    assert!(selected > 0);
    assert_eq!(manifest(d, "app")["results"]["replaced"], selected);
    assert_eq!(manifest(d, "again")["results"]["replaced"], 0);
    assert_eq!(
        std::fs::read(d.join("runs/app/embeddings.emb")).unwrap(),
        std::fs::read(d.join("runs/again/embeddings.emb")).unwrap()
    );
    let changed = manifest(d, "md")["results"]["changed_tokens"].as_u64().unwrap();
    assert_eq!(changed as usize, selected);
    let pre = manifest(d, "pre");
    assert_eq!(pre["results"]["loss_trace"].as_array().unwrap().len(), 20);
}
