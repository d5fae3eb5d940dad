use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ucil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucil"))
        .args(args)
        .env_remove("UCIL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two tasks of three classes in 16 dimensions.
fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join("data");
    let seed = seed.to_string();
    let o = ucil(&[
        "synth", "--tasks", "2", "--classes", "3", "--dim", "16", "--train", "60", "--test", "30", "--seed",
        &seed, "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.toml")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "pnum = 12\nepochs = 8\nbatch_size = 64\nhidden_dim = 32\nproj_dim = 16\n",
    )
    .unwrap();
    path
}

fn train(dir: &Path, manifest: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let config = small_config(dir);
    let mut args = vec!["train", "--manifest", p(manifest), "--out", p(&out), "--config", p(&config)];
    args.extend_from_slice(extra);
    let o = ucil(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn value_after<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no line starting with {prefix:?} in:\n{text}"))
        .split_whitespace()
        .next()
        .unwrap()
}

#[test]
fn train_without_out_names_the_flag() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 0);
    let o = ucil(&["train", "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth(a.path(), 7);
    synth(b.path(), 7);
    let mut names: Vec<_> = fs::read_dir(a.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        let x = fs::read(a.path().join("data").join(&name)).unwrap();
        let y = fs::read(b.path().join("data").join(&name)).unwrap();
        assert!(x == y, "{name:?} differs");
    }
}

#[test]
fn eval_reproduces_training_numbers() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 1);
    let run = train(dir.path(), &manifest, "run", &[]);
    for f in ["resolved_config.toml", "metrics.jsonl", "results.jsonl", "summary.json", "checkpoint.ucck"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let last = summary["sessions"].as_array().unwrap().last().unwrap().clone();

    let o = ucil(&["eval", "--checkpoint", p(&run.join("checkpoint.ucck")), "--manifest", p(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let a: f64 = value_after(&out, "A = ").parse().unwrap();
    let t1: f64 = value_after(&out, "task 1: ").parse().unwrap();
    let t2: f64 = value_after(&out, "task 2: ").parse().unwrap();
    let f: f64 = value_after(&out, "F = ").parse().unwrap();
    let close = |x: f64, key: &str| (x - last[key].as_f64().unwrap()).abs() < 1e-6;
    assert!(close(a, "acc_overall") && close(t1, "acc_task_1") && close(t2, "acc_task_2") && close(f, "forgetting"));
}

#[test]
fn disabling_sep_loss_zeroes_it_in_metrics() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 2);
    let run = train(dir.path(), &manifest, "run", &["--no-sep-loss"]);
    let config = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(config.contains("sep_loss = false"));
    let text = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let mut second_task = 0;
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["sep"].as_f64(), Some(0.0));
        second_task += usize::from(rec["task"] == 1);
    }
    assert_eq!(second_task, 8);
}

#[test]
fn missing_test_file_is_named() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 3);
    let run = train(dir.path(), &manifest, "run", &[]);
    let gone = dir.path().join("data").join("task1_test.ucfv");
    fs::remove_file(&gone).unwrap();
    let o = ucil(&["eval", "--checkpoint", p(&run.join("checkpoint.ucck")), "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task1_test.ucfv"), "{}", stderr(&o));
}

#[test]
fn inspect_memory_lists_both_tasks() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 4);
    let run = train(dir.path(), &manifest, "run", &[]);
    let o = ucil(&["inspect-memory", "--checkpoint", p(&run.join("checkpoint.ucck"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("classes stored: 6"), "{out}");
    let tasks: Vec<&str> = out
        .lines()
        .skip_while(|l| !l.starts_with("class"))
        .skip(1)
        .take(6)
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert_eq!(tasks, ["1", "1", "1", "2", "2", "2"]);
    assert!(out.contains("exemplar-equivalents per class"));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 5);
    let run = train(dir.path(), &manifest, "run", &[]);
    let ck = run.join("checkpoint.ucck");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let o = ucil(&["inspect-memory", "--checkpoint", p(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint.ucck"), "{}", stderr(&o));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 6);
    let full = train(dir.path(), &manifest, "full", &[]);

    // Stop after the first task by training on a one-task manifest.
    let text = fs::read_to_string(&manifest).unwrap();
    let first_only = text.split("[[tasks]]").take(2).collect::<Vec<_>>().join("[[tasks]]");
    let short = manifest.with_file_name("first.toml");
    fs::write(&short, first_only).unwrap();
    let part = train(dir.path(), &short, "part", &[]);

    let resumed = dir.path().join("resumed");
    let ck = part.join("checkpoint.ucck");
    let o = ucil(&["train", "--manifest", p(&manifest), "--out", p(&resumed), "--resume", p(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(full.join("checkpoint.ucck")).unwrap(),
        fs::read(resumed.join("checkpoint.ucck")).unwrap()
    );
}

#[test]
fn resume_rejects_config_flags() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 8);
    let run = train(dir.path(), &manifest, "run", &[]);
    let ck = run.join("checkpoint.ucck");
    let o = ucil(&["train", "--manifest", p(&manifest), "--out", p(&dir.path().join("x")), "--resume", p(&ck), "--pnum", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_diagnostics() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 9);
    let config = dir.path().join("wild.toml");
    fs::write(&config, "lr = 1e300\npnum = 12\nepochs = 2\nbatch_size = 64\nhidden_dim = 32\nproj_dim = 16\n").unwrap();
    let out = dir.path().join("run");
    let o = ucil(&["train", "--manifest", p(&manifest), "--out", p(&out), "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(3));
    let diag = out.join("diagnostics.json");
    assert!(stderr(&o).contains("diagnostics.json"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(diag).unwrap()).unwrap();
    assert_eq!(v["task"], 0);
    assert!(v["losses"].is_object());
}
