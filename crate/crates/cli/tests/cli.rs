use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
epochs = 2
batch_size = 16
warmup_epochs = 1
record_wall_time = false

[model]
D = 16
depth = 1
heads = 2
image_size = 16
patch_size = 4
M = 2
K = 2
pool_kernel = 3

[head]
hidden = 16
bottleneck = 8
prototypes = 16

[augment]
out_size = 16

[data.synthetic]
classes = 3
train_per_class = 16
test_per_class = 8
image_size = 32
"#;

fn mte(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mte"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-parsable error")
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn pretrain_strip_knn_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("tiny.toml"), TINY).unwrap();

    let o = mte(cwd, &["pretrain", "--config", "tiny.toml", "--out", "pt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cwd.join("pt/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "pretrain");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config"]["epochs"], 2);
    let log = std::fs::read_to_string(cwd.join("pt/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let o = mte(cwd, &["strip", "--checkpoint", "pt/last.mte", "--out", "st"]);
    assert!(o.status.success());
    let o = mte(cwd, &["eval-knn", "--checkpoint", "st/stripped.mte", "--out", "knn"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("global"));
    let line = std::fs::read_to_string(cwd.join("knn/knn.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let top1 = rec["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));

    // Stripping is lossless for the global token, so both checkpoints agree.
    let o = mte(cwd, &["eval-knn", "--checkpoint", "pt/last.mte", "--out", "knn_full"]);
    let full = std::fs::read_to_string(cwd.join("knn_full/knn.jsonl")).unwrap();
    assert!(o.status.success());
    assert_eq!(full, line);

    // Rerunning from the manifest reproduces the metric log byte for byte.
    let o = mte(cwd, &["pretrain", "--config", "pt/manifest.json", "--out", "again"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(cwd.join("again/metrics.jsonl")).unwrap(), log);

    // Nothing lands outside the output directories.
    assert_eq!(entries(cwd), ["again", "knn", "knn_full", "pt", "st", "tiny.toml"]);
}

#[test]
fn analysis_commands_run_on_an_unstripped_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("tiny.toml"), TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    assert!(mte(cwd, &["pretrain", "--config", "tiny.toml", "--out", "pt"]).status.success());
    let ck = "pt/last.mte";
    let cases: &[(&[&str], &str)] = &[
        (&["eval-knn", "--tokens", "global,all"], "knn.jsonl"),
        (&["eval-linear", "--tokens", "aux:0..1", "--probe-epochs", "20"], "linear.jsonl"),
        (&["analyze-cka"], "cka.csv"),
        (&["analyze-nmi"], "nmi.jsonl"),
        (&["analyze-combination"], "combination.jsonl"),
        (&["analyze-per-class"], "per_class.json"),
        (&["analyze-patch-knn", "--top", "1,16"], "patch_knn.jsonl"),
        (&["export-weights", "--images", "0", "--channels", "0..1"], "weights/kernel_branch1.csv"),
    ];
    for (i, (args, file)) in cases.iter().enumerate() {
        let out = format!("a{i}");
        let mut full = args.to_vec();
        full.extend(["--checkpoint", ck, "--out", &out]);
        let o = mte(cwd, &full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(cwd.join(&out).join(file).exists(), "{args:?} wrote no {file}");
        assert!(cwd.join(&out).join("manifest.json").exists());
    }

    let nmi = std::fs::read_to_string(cwd.join("a3/nmi.jsonl")).unwrap();
    let tokens: Vec<String> = nmi
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["token"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(tokens, ["global", "aux:0", "aux:1", "pool:0", "pool:1", "fused"]);
    let curve = std::fs::read_to_string(cwd.join("a4/combination.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let o = mte(cwd, &["eval-ensemble", "--checkpoint", ck, "--checkpoint", ck, "--out", "ens"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ensemble"));
}

#[test]
fn flops_reports_equal_inference() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = mte(dir.path(), &["flops", "--config", "tiny.toml", "--out", "f"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("inference equal: true"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("f/flops.json")).unwrap()).unwrap();
    assert_eq!(v["rows"][0]["inference_total"], v["rows"][1]["inference_total"]);
    assert!(v["train_overhead_ratio"].as_f64().unwrap() > 1.0);
}

#[test]
fn grad_check_and_selfcheck_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = mte(dir.path(), &["grad-check", "--max-coords", "8", "--out", "g"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));
    let o = mte(dir.path(), &["selfcheck", "--out", "s"]);
    assert!(o.status.success());
    assert_eq!(entries(&dir.path().join("s")), ["manifest.json", "selfcheck.csv"]);
}

#[test]
fn errors_are_one_json_line_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();

    let o = mte(cwd, &["eval-knn", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "usage");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("--bogus") && msg.contains("--checkpoint") && msg.contains("--tokens"));

    let o = mte(cwd, &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));

    let o = mte(cwd, &["eval-knn", "--checkpoint", "missing.mte", "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "data");

    std::fs::write(cwd.join("bad.mte"), b"not a checkpoint").unwrap();
    let o = mte(cwd, &["strip", "--checkpoint", "bad.mte", "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(cwd.join("tiny.toml"), TINY).unwrap();
    let o = mte(cwd, &["pretrain", "--config", "tiny.toml", "--mode", "sideways", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mte(cwd, &["eval-knn", "--checkpoint", "bad.mte", "--mode", "no-mask", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(cwd.join("hot.toml"), TINY.replace("epochs = 2", "epochs = 2\nlr = 1e30")).unwrap();
    let o = mte(cwd, &["pretrain", "--config", "hot.toml", "--out", "hot"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_line(&o)["error"], "numeric");
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().filter(|l| l.starts_with('{')).count(), 1);
}
