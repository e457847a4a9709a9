use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn evifuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evifuse")).args(args).output().unwrap()
}

fn with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_evifuse"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const TINY: &str = "\
[experiment]
seeds = [3]
variants = [\"single_0\", \"eif\", \"eif_adapted\"]
adapt_batches = 3

[network]
feature_layer_sizes = [8, 8]
mff_start_layer = 1
group_count = 3

[train]
learning_rate = 0.001
batch_size = 16
stage1_batches = 5
stage2_batches = 3
";

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn fuse_reads_stdin_and_files() {
    let o = with_stdin(&["fuse"], "1 2 3 4\n3 1 2 1\n");
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "δ=1.666667 γ=3 α=5.5 β=6.333333");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nig.txt");
    fs::write(&p, "# two heads\n1.0, 2.0, 3.0, 4.0\n\n3 1 2 1\n").unwrap();
    let o = evifuse(&["fuse", p.to_str().unwrap()]);
    assert_eq!(stdout(&o).trim(), "δ=1.666667 γ=3 α=5.5 β=6.333333");
}

#[test]
fn fuse_rejects_bad_lines() {
    let o = with_stdin(&["fuse"], "1 2 3\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
    let o = with_stdin(&["fuse"], "1 2 0.5 4\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("alpha"));
}

#[test]
fn loss_prints_the_parts() {
    let o = evifuse(&["loss", "0", "1", "1", "0.5", "0", "0.01"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "nll=1.039721 reg=0 total=1.039721");
    let o = evifuse(&["loss", "-1", "1", "2", "0.5", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("reg=8 "));
}

#[test]
fn partition_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("labels.txt");
    fs::write(&p, "1\n2\n3\n4\n5\n6\n7\n8\n").unwrap();
    let o = evifuse(&["partition", p.to_str().unwrap(), "--groups", "4", "--overlap", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("group"));
}

#[test]
fn gradcheck_exits_zero() {
    let o = evifuse(&["gradcheck", "--seed", "11", "--cases", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cases=6"));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nbatch_size = 0\n").unwrap();
    let o = evifuse(&["train-stage1", "--config", p.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"));
    fs::write(&p, "[network]\ngroup_cnt = 3\n").unwrap();
    let o = evifuse(&["experiment", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("group_cnt"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = evifuse(&[
        "eval",
        "--checkpoint",
        dir.path().join("nope.evf").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn staged_training_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    let o = evifuse(&["gen-data", "--config", &cfg, "--out", &d("data")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().count() >= 9);

    let o = evifuse(&["train-stage1", "--config", &cfg, "--out", &d("s1")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("s1/stage1_branch0.csv").exists());
    let o = evifuse(&["train-stage2", "--config", &cfg, "--checkpoint", &d("s1/stage1.evf"), "--out", &d("s2")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = evifuse(&["eval", "--config", &cfg, "--checkpoint", &d("s2/eif.evf"), "--out", &d("ev")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let o = evifuse(&["adapt", "--config", &cfg, "--checkpoint", &d("s2/eif.evf"), "--target", "1", "--out", &d("ad")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("before="));
    let o = evifuse(&["train-baseline", "--config", &cfg, "--variant", "single_1", "--out", &d("bl")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = evifuse(&["eval", "--config", &cfg, "--checkpoint", &d("bl/single_1.evf"), "--out", &d("ev2")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = evifuse(&["train-baseline", "--config", &cfg, "--variant", "single_7", "--out", &d("bl")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = evifuse(&["experiment", "--config", &cfg, "--out", run.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "manifest.toml",
        "comparison.csv",
        "branch_weight_heatmap.csv",
        "regressor_weight_heatmap.csv",
        "uncertainty_summary.csv",
        "aleatoric_pairs.csv",
        "seed3/metrics.csv",
        "seed3/eif.evf",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let agg = dir.path().join("agg");
    let o = evifuse(&["report", run.to_str().unwrap(), "--out", agg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(run.join("comparison.csv")).unwrap(),
        fs::read(agg.join("comparison.csv")).unwrap()
    );

    let manifest = fs::read_to_string(run.join("manifest.toml")).unwrap();
    fs::write(run.join("manifest.toml"), manifest.replace("evifuse-results v1", "evifuse-results v0")).unwrap();
    let o = evifuse(&["report", run.to_str().unwrap(), "--out", agg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format"));
}
