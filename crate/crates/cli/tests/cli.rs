use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gradapprox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradapprox"))
        .args(args)
        .env_remove("GRADAPPROX_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &str) -> Vec<String> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn schedule3_grid_on_five_layers() {
    let o = gradapprox(&["schedule", "schedule3", "--layers", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).take(5).collect();
    for r in &rows {
        assert!(r.ends_with("T..."), "{r}");
    }
    assert!(out.contains("approx_fraction 0.2500"));
}

#[test]
fn schedule1_on_resnet20() {
    let o = gradapprox(&["schedule", "schedule1", "--model", "resnet20"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("approx_fraction 0.2632"), "{out}");
    assert!(out.contains("[1, 5, 9, 13, 17]"));
}

#[test]
fn malformed_schedule_file_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.sched");
    fs::write(&p, "period 2\nlayer 1 phase 7 zero\n").unwrap();
    let o = gradapprox(&["schedule", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn schedule_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.sched");
    fs::write(&p, "period 2\n# second conv on odd batches\nlayer 1 phase 1 random\n").unwrap();
    let o = gradapprox(&["schedule", p.to_str().unwrap(), "--layers", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(".R"));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let o = gradapprox(&["gradcheck", "--f64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
    let o = gradapprox(&["gradcheck", "--f64", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(gradapprox(&["train", "--model", "alexnet"]).status.code(), Some(1));
    assert_eq!(gradapprox(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gradapprox(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = gradapprox(&["train", "--data-dir", dir.path().to_str().unwrap(), "--metrics-out"]
        .into_iter()
        .chain([dir.path().join("m.csv").to_str().unwrap()])
        .collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("data_batch_1.bin"));
}

fn train_synthetic(dir: &Path, name: &str, extra: &[&str]) -> (Output, String) {
    let metrics = dir.join(format!("{name}.csv"));
    let mut args = vec!["train", "--dataset", "synthetic", "--eval-limit", "128", "--metrics-out"];
    args.push(metrics.to_str().unwrap());
    args.extend_from_slice(extra);
    let o = gradapprox(&args);
    let csv = fs::read_to_string(&metrics).unwrap_or_default();
    (o, csv)
}

#[test]
fn one_epoch_run_writes_one_row_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (o, csv) = train_synthetic(
        dir.path(),
        "full",
        &["--model", "cnn2", "--method", "full", "--epochs", "1", "--subset", "1024", "--seed", "7"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(data_rows(&csv).len(), 1);
    assert!(data_rows(&csv)[0].starts_with("1,8,"));
    let manifest = fs::read_to_string(dir.path().join("full.json")).unwrap();
    assert!(manifest.contains("\"best_val_accuracy\""));
    assert!(stdout(&o).contains("best_val_accuracy"));

    // the finished run serves as a baseline for the next one
    let base = dir.path().join("full.json");
    let (o, _) = train_synthetic(
        dir.path(),
        "zero",
        &[
            "--method", "zero", "--schedule", "schedule2", "--epochs", "1", "--subset", "1024", "--seed", "7",
            "--baseline", base.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("speedup"), "{}", stdout(&o));
}

#[test]
fn repeated_runs_are_identical_apart_from_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let flags = [
        "--method", "random", "--schedule", "schedule2", "--epochs", "2", "--subset", "256", "--batch-size", "64",
        "--seed", "3",
    ];
    let (a, csv_a) = train_synthetic(dir.path(), "a", &flags);
    let (b, csv_b) = train_synthetic(dir.path(), "b", &flags);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let strip = |csv: &str| gradapprox::experiment::strip_wall_clock(csv);
    assert_eq!(strip(&csv_a), strip(&csv_b));
    assert_eq!(data_rows(&csv_a).len(), 2);
}

#[test]
fn resnet20_schedule1_records_five_layers() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = train_synthetic(
        dir.path(),
        "r20",
        &["--model", "resnet20", "--schedule", "schedule1", "--method", "topk", "--subset", "128"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r20.json")).unwrap()).unwrap();
    assert_eq!(m["approximated_layers"], serde_json::json!([1, 5, 9, 13, 17]));
    assert_eq!(m["topk_fallback_layers"], serde_json::json!([13]));
}

#[test]
fn bench_writes_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = gradapprox(&[
        "bench", "--case", "4x3x6x6x4x3", "--case", "2x2x5x5x3x1", "--iters", "5", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("n,ci,h,w,co,k,"));

    let o = gradapprox(&["bench", "--case", "2x2x4x4x2x4", "--iters", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).lines().count(), 2);
}
