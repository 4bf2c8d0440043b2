use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes an empty config and runs it for `steps` steps into `out`.
fn run(dir: &Path, out: &Path, steps: usize, extra: &[&str]) -> Output {
    let cfg = dir.join("base.toml");
    fs::write(&cfg, "").unwrap();
    let steps = format!("steps={steps}");
    let out = format!("output_dir={}", out.display());
    let mut args = vec!["run", cfg.to_str().unwrap(), "--set", &steps, "--set", &out];
    for e in extra {
        args.push("--set");
        args.push(e);
    }
    moelab(&args)
}

#[test]
fn traffic_prints_bytes() {
    let o = moelab(&["traffic", "8", "1", "1536", "fp16"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "24576");
    assert_eq!(
        stdout(&moelab(&["traffic", "1", "1", "1", "fp32"])).trim(),
        "4"
    );
}

#[test]
fn traffic_usage_errors_exit_2() {
    let o = moelab(&["traffic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(
        moelab(&["traffic", "8", "1", "1536", "fp12"]).status.code(),
        Some(2)
    );
    assert_eq!(
        moelab(&["traffic", "0", "1", "1536", "fp16"]).status.code(),
        Some(2)
    );
}

#[test]
fn unknown_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nnum_expert = 4\n").unwrap();
    let o = moelab(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));

    let o = run(dir.path(), &dir.path().join("r"), 1, &["task.sepability=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_2() {
    assert_eq!(
        moelab(&["run", "/nonexistent/run.toml"]).status.code(),
        Some(2)
    );
}

#[test]
fn run_writes_outputs_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = run(
        dir.path(),
        &out,
        60,
        &["strategy=top1_lbl", "snapshot_every=20"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "resolved_config.toml",
        "metrics.csv",
        "snapshots.csv",
        "checkpoint.bin",
        "run_deviation_l0.svg",
        "run_distribution_l3.svg",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("strategy = \"top1_lbl\""), "{resolved}");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 61);
    assert!(metrics.starts_with("step,progress,lr,batch_size,task_loss,balance_loss,k_l0,"));

    // the resolved config alone reproduces the run
    let again = dir.path().join("again");
    let o = moelab(&[
        "run",
        out.join("resolved_config.toml").to_str().unwrap(),
        "--set",
        &format!("output_dir={}", again.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );
}

#[test]
fn dump_defaults_is_a_valid_config() {
    let o = moelab(&["dump-defaults"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("num_experts = 16"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defaults.toml");
    fs::write(&cfg, &text).unwrap();
    let out = format!("output_dir={}", dir.path().join("r").display());
    let o = moelab(&[
        "run",
        cfg.to_str().unwrap(),
        "--set",
        "steps=0",
        "--set",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn compare_identical_runs_has_zero_difference() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(dir.path(), &a, 30, &[]).status.success());
    assert!(run(dir.path(), &b, 30, &[]).status.success());
    let cmp = dir.path().join("cmp");
    let o = moelab(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max difference from"));
    assert!(
        stdout(&o).trim_end().ends_with("0.00000000e0"),
        "{}",
        stdout(&o)
    );
    assert!(cmp.join("summary.csv").exists());
    assert!(cmp.join("deviation_l0.svg").exists());
}

#[test]
fn compare_rejects_mismatched_grids() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(dir.path(), &a, 10, &[]).status.success());
    assert!(run(dir.path(), &b, 12, &[]).status.success());
    let o = moelab(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = moelab(&["compare", a.to_str().unwrap(), dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_shows_loss_free_runaway() {
    let dir = tempfile::tempdir().unwrap();
    let (lbl, lf) = (dir.path().join("lbl"), dir.path().join("lf"));
    assert!(run(
        dir.path(),
        &lbl,
        2000,
        &["strategy=lbl_global_batch", "run_id=lbl"]
    )
    .status
    .success());
    assert!(
        run(dir.path(), &lf, 2000, &["strategy=loss_free", "run_id=lf"])
            .status
            .success()
    );
    let cmp = dir.path().join("cmp");
    let o = moelab(&[
        "compare",
        lbl.to_str().unwrap(),
        lf.to_str().unwrap(),
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(cmp.join("summary.csv")).unwrap();
    let mut rows = summary.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "max_dev_l0").unwrap();
    let vals: Vec<f64> = rows
        .map(|r| r.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    assert!(vals[1] > vals[0], "{summary}");
}
