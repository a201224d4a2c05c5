use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn halo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halo"))
        .args(args)
        .env("HALO_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a config whose outputs land in `dir/out`.
fn config(dir: &Path, body: &str) -> PathBuf {
    let out = dir.join("out");
    let text = format!("version = 1\noutput_dir = {:?}\n{body}", out.to_str().unwrap());
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL_MODEL: &str = "[model]\ndim = 16\nffn_dim = 32\nblocks = 2\nout_dim = 4\n[regression]\nbatch = 16\n";

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn train_writes_one_row_per_step_and_a_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        &format!("scheme = \"halo2\"\nsave_weights = true\n{SMALL_MODEL}[train]\nsteps = 12\n"),
    );
    let o = halo(&["train", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(dir.path(), "loss.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,grad_norm"));
    assert_eq!(lines.count(), 12);

    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    assert_eq!(manifest["config"]["train"]["steps"], 12);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs[0]["path"], "loss.csv");
    assert_eq!(outputs.len(), 1 + 4, "loss.csv plus four weight files");
    assert_eq!(manifest["verdicts"]["quantizer_calls"]["e"], 12 * 4 * 2);

    // The saved weights are valid tensor files.
    let w = dir.path().join("out/weights/block0.up.halt");
    let o = halo(&["inspect", w.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("shape: 32x16"));
}

#[test]
fn reruns_produce_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &format!("{SMALL_MODEL}[train]\nsteps = 8\n"));
    assert!(halo(&["train", cfg.to_str().unwrap()]).status.success());
    let first = read(dir.path(), "manifest.json");
    assert!(halo(&["train", cfg.to_str().unwrap()]).status.success());
    assert_eq!(read(dir.path(), "manifest.json"), first);
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "[train]\nsteps = \"many\"\n");
    let o = halo(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    let cfg = config(dir.path(), "[train]\nstepz = 3\n");
    let o = halo(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"));

    let o = halo(&["sensitivity", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn huge_learning_rate_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        &format!("scheme = \"halo0\"\nformat = \"int8\"\n{SMALL_MODEL}[train]\nsteps = 50\n[train.optim]\nlr = 1e3\nwarmup_steps = 0\n"),
    );
    let o = halo(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn sensitivity_reports_ordering() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "runs = 3\nformat = \"int8\"\n");
    let o = halo(&["sensitivity", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("fwd<bwd: PASS, had>fwd: PASS"), "{}", stdout(&o));
    let csv = read(dir.path(), "sensitivity.csv");
    assert!(csv.starts_with("layer,variant,cosine\n"));
    // Eight linears and the weighted row, three variants each.
    assert_eq!(csv.lines().count(), 1 + 9 * 3);
}

#[test]
fn identity_sensitivity_is_all_ones() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &format!("format = \"identity\"\n{SMALL_MODEL}"));
    let o = halo(&["sensitivity", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for line in read(dir.path(), "sensitivity.csv").lines().skip(1) {
        let cos: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((cos - 1.0).abs() < 1e-6, "{line}");
    }
}

#[test]
fn ablation_grid_sizes() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        &format!("format = \"int8\"\n{SMALL_MODEL}[ablate]\ntarget = \"G\"\n"),
    );
    assert!(halo(&["ablate", cfg.to_str().unwrap()]).status.success());
    let csv = read(dir.path(), "ablation.csv");
    assert!(csv.starts_with("placement,loss,cosine\n"));
    assert_eq!(csv.lines().count(), 1 + 8);

    let cfg = config(
        dir.path(),
        &format!("format = \"identity\"\n{SMALL_MODEL}[ablate]\ntarget = \"full\"\n"),
    );
    let o = halo(&["ablate", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(dir.path(), "ablation.csv").lines().count(), 1 + 512);
    assert!(stdout(&o).contains("identity cancellation: PASS"), "{}", stdout(&o));
}

fn fsdp_ledger(world: usize, rows: usize, cols: usize, trace: usize) -> serde_json::Value {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        &format!(
            "scheme = \"halo2\"\n{SMALL_MODEL}[fsdp]\nworld_size = {world}\nrows = {rows}\ncols = {cols}\ntrace_steps = {trace}\n"
        ),
    );
    let o = halo(&["fsdp", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&read(dir.path(), "ledger.json")).unwrap()
}

#[test]
fn fsdp_ratio_and_equivalence() {
    let ledger = fsdp_ledger(4, 256, 256, 4);
    let ratio = ledger["report"]["ratio"].as_f64().unwrap();
    assert!((ratio - 0.5).abs() < 0.01, "{ratio}");
    assert_eq!(ledger["equivalence"]["verdict"], "PASS");
    assert_eq!(ledger["equivalence"]["loss_trace_matches_single_rank"], true);
}

#[test]
fn fsdp_single_rank_moves_nothing() {
    let ledger = fsdp_ledger(1, 64, 64, 0);
    assert_eq!(ledger["report"]["gather_bytes"], 0);
    assert_eq!(
        ledger["equivalence"]["loss_trace_matches_single_rank"],
        serde_json::Value::Null
    );
}

#[test]
fn fsdp_reports_padding() {
    let ledger = fsdp_ledger(3, 10, 8, 0);
    assert_eq!(ledger["padding"], 2);
    assert_eq!(ledger["equivalence"]["verdict"], "PASS");
}

fn write_tensor_file(dir: &Path) -> PathBuf {
    // 16x8 f32 tensor with one large column, in the tensor file layout.
    let (rows, cols) = (16u64, 8u64);
    let mut bytes = b"HALT".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.push(0);
    bytes.push(2);
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            let v = ((i * 3 + j * 5) % 7) as f32 / 7.0 - 0.4;
            let v = if j == 2 { v * 100.0 + 50.0 } else { v };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join("t.halt");
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn inspect_reports_outliers_and_rotation() {
    let dir = TempDir::new().unwrap();
    let path = write_tensor_file(dir.path());
    let o = halo(&["inspect", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("shape: 16x8"));
    assert!(text.contains("dtype: f32"));
    assert!(text.contains("column 2:"), "{text}");

    let rotated = halo(&["inspect", path.to_str().unwrap(), "--hadamard", "right"]);
    assert!(rotated.status.success());
    let max = |s: &str| -> f64 {
        let line = s.lines().find(|l| l.starts_with("max_abs:")).unwrap();
        line["max_abs:".len()..].trim().parse().unwrap()
    };
    assert!(max(&stdout(&rotated)) < max(&text));
}

#[test]
fn corrupt_tensor_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let path = write_tensor_file(dir.path());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(halo(&["inspect", path.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&path, b"nope").unwrap();
    assert_eq!(halo(&["inspect", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(halo(&["quantreport", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn quantreport_lists_every_format_and_rotation() {
    let dir = TempDir::new().unwrap();
    let path = write_tensor_file(dir.path());
    let o = halo(&["quantreport", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("format,granularity,hadamard,mse,max_abs_err,snr_db\n"));
    assert_eq!(text.lines().count(), 1 + 5 * 3);
    let mse = |side: &str| -> f64 {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("int8,tensor,{side},")))
            .unwrap();
        line.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(mse("right") < mse("none"));
}

#[test]
fn bad_thread_count_is_an_input_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_halo"))
        .args(["quantreport", "x"])
        .env("HALO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
