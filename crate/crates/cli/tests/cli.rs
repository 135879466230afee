use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
method = data
num_tasks = 2
d_in = 8
hidden = 16
train_size = 64
val_size = 8
test_size = 64
epochs = 2
restore_interval = 5
pretrain_samples = 128
pretrain_epochs = 1
";

fn datacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datacl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    datacl(&args)
}

#[test]
fn missing_config_names_the_path() {
    let o = datacl(&["run", "--config", "/nonexistent/cfg.conf"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/cfg.conf"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", &format!("{SMALL}bogus = 1\nalso_bad = 2\n"));
    let o = run(&cfg, dir.path(), &[]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("also_bad") && err.contains("bogus"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", &SMALL.replace("epochs = 2", "epochs = 2\nlr = -1"));
    let o = run(&cfg, dir.path(), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));
}

#[test]
fn smoke_run_writes_metrics_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &[]).status.success());
    let metrics = fs::read_to_string(a.join("data_seed0/metrics.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    for key in ["fp", "ap", "forget"] {
        assert!(value[key].is_number(), "{key} missing in {metrics}");
    }
    assert_eq!(fs::read(a.join("data_seed0/metrics.json")).unwrap(), fs::read(b.join("data_seed0/metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("data_seed0/steps.csv")).unwrap(), fs::read(b.join("data_seed0/steps.csv")).unwrap());
    assert!(a.join("data_seed0/checkpoints/task2.ckpt").is_file());
    assert!(a.join("metrics_data.csv").is_file());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", &SMALL.replace("method = data", "method = data_replay"));
    let full = dir.path().join("full");
    assert!(run(&cfg, &full, &[]).status.success());

    let part = dir.path().join("part");
    assert!(run(&cfg, &part, &[]).status.success());
    let ck = part.join("data_replay_seed0/checkpoints/task1.ckpt");
    let o = run(&cfg, &part, &["--resume", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["metrics.json", "accuracy.json", "steps.csv"] {
        assert_eq!(
            fs::read(full.join("data_replay_seed0").join(file)).unwrap(),
            fs::read(part.join("data_replay_seed0").join(file)).unwrap(),
            "{file}"
        );
    }

    let other = write_config(dir.path(), "other.conf", &SMALL.replace("method = data", "method = data_replay\nlr = 0.001"));
    let o = run(&other, &dir.path().join("x"), &["--resume", ck.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn report_summarises_runs_with_charts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    for method in ["seqlora", "data"] {
        let cfg = write_config(dir.path(), &format!("{method}.conf"), &SMALL.replace("method = data", &format!("method = {method}")));
        assert!(run(&cfg, &out, &[]).status.success());
    }
    let o = datacl(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let data = summary.find("data").unwrap();
    let seq = summary.find("seqlora").unwrap();
    assert!(data < seq, "{summary}");
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.lines().count() >= 3);
    for run in ["data_seed0", "seqlora_seed0"] {
        let svg = fs::read_to_string(out.join("charts").join(format!("{run}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
    }
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = datacl(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no completed runs"));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", SMALL);
    let path = cfg.to_str().unwrap();
    let ok = datacl(&["gradcheck", "--config", path]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("bank.weight") && !text.contains("FAIL"));

    let bad = datacl(&["gradcheck", "--config", path, "--corrupt-group", "adapter.high"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));

    let no_ortho = write_config(dir.path(), "n.conf", &format!("{SMALL}ortho = false\n"));
    let o = datacl(&["gradcheck", "--config", no_ortho.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped"));
}

#[test]
fn gradcheck_refuses_large_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", &SMALL.replace("hidden = 16", "hidden = 64"));
    let o = datacl(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn genstream_writes_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", SMALL);
    let out = dir.path().join("s.csv");
    let o = datacl(&["genstream", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with("label,task_id,split"));
    assert_eq!(lines.count(), 2 * (64 + 8 + 64));
}

#[test]
fn shipped_config_parses() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = datacl(&["genstream", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}
