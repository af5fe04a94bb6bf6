//! End-to-end tests that drive the compiled binary the way a user would:
//! real processes, real config files, real artifact directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spotpipe(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spotpipe"));
    cmd.args(args);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small two-stage experiment that finishes in well under a second.
fn write_config(dir: &Path, name: &str, strategy: &str) -> PathBuf {
    let text = format!(
        r#"
[profile]
preset = "two_stage_imbalanced"

[cluster]
pipelines = 2
depth = 2
demand_depth = 2
zones = ["z0", "z1", "z2"]
gpus_per_node = 1
gpu_mem_bytes = 68719476736
cpu_mem_bytes = 274877906944
spot_price_per_node_hour = 0.918
demand_price_per_node_hour = 3.06

[cluster.comm]
intra_zone_bytes_per_sec = 12500000000.0
cross_zone_factor = 2.0
per_message_latency = 0.0001

[strategy]
{strategy}

[churn.synthetic]
seed = 11
hourly_preemption_probability = 0.1

[stop]
kind = "samples"
target = 640

[run]
replicas = 2
probabilities = [0.0, 0.5]
"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const REDUNDANT: &str = "kind = \"redundant\"\nrc_mode = \"eflb\"";

#[test]
fn validate_reports_each_file_and_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.toml", REDUNDANT);
    let bad = dir.path().join("bad.toml");
    let broken = fs::read_to_string(&good)
        .unwrap()
        .replace("hourly_preemption_probability = 0.1", "hourly_preemption_probability = 1.5");
    fs::write(&bad, broken).unwrap();

    let ok = run(spotpipe(&["validate"]).arg(&good));
    assert!(ok.status.success(), "stderr: {}", stderr(&ok));
    assert!(stdout(&ok).contains("ok:"));

    let mixed = run(spotpipe(&["validate"]).arg(&good).arg(&bad));
    assert!(!mixed.status.success());
    assert!(stdout(&mixed).contains("ok:"), "good file still reported");
    let err = stderr(&mixed);
    assert!(err.contains("hourly_preemption_probability"), "stderr: {err}");
    assert!(err.contains("1 of 2"), "stderr: {err}");
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", REDUNDANT);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    let first = run(spotpipe(&["simulate"]).arg(&config).arg("--out").arg(&out_a));
    assert!(first.status.success(), "stderr: {}", stderr(&first));
    assert!(stdout(&first).contains("samples 640"));
    let second = run(spotpipe(&["simulate"]).arg(&config).arg("--out").arg(&out_b));
    assert!(second.status.success(), "stderr: {}", stderr(&second));

    for file in ["summary.json", "events.csv", "buckets.csv"] {
        let a = fs::read(out_a.join(file)).unwrap();
        let b = fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn stamped_directory_lands_under_the_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", REDUNDANT);
    let root = dir.path().join("results");

    let out = run(spotpipe(&["simulate"])
        .arg(&config)
        .env("SPOTPIPE_OUT", &root));
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let stamped: Vec<_> = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(stamped.len(), 1);
    let name = stamped[0].file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("simulate-"), "got {name}");
    assert!(stamped[0].join("summary.json").exists());
}

#[test]
fn set_overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", REDUNDANT);
    let out = run(spotpipe(&["simulate"])
        .arg(&config)
        .args(["--set", "stop.target=1280"])
        .arg("--out")
        .arg(dir.path().join("o")));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("samples 1280"), "stdout: {}", stdout(&out));
}

#[test]
fn batch_writes_lane_directories_and_a_merged_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", REDUNDANT);
    let out_dir = dir.path().join("sweep");

    let out = run(spotpipe(&["batch"]).arg(&config).arg("--out").arg(&out_dir));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("p=0.000") && text.contains("p=0.500"), "stdout: {text}");

    assert!(out_dir.join("p0.000").join("replica_0000.json").exists());
    assert!(out_dir.join("p0.500").join("replica_0001.json").exists());
    let table = fs::read_to_string(out_dir.join("batch.csv")).unwrap();
    assert_eq!(table.lines().count(), 3, "header plus one row per probability");
}

#[test]
fn compare_tabulates_strategies_and_degenerates_to_one_summary() {
    let dir = tempfile::tempdir().unwrap();
    let redundant = write_config(dir.path(), "redundant.toml", REDUNDANT);
    let dropper = write_config(dir.path(), "dropper.toml", "kind = \"sample_drop\"");
    let out_dir = dir.path().join("cmp");

    let out = run(spotpipe(&["compare"])
        .arg(&redundant)
        .arg(&dropper)
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("redundant") && text.contains("dropper"), "stdout: {text}");
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let single = run(spotpipe(&["compare"])
        .arg(&redundant)
        .arg("--out")
        .arg(dir.path().join("solo")));
    assert!(single.status.success(), "stderr: {}", stderr(&single));
    assert!(stdout(&single).contains("samples 640"), "stdout: {}", stdout(&single));
}

#[test]
fn synthesized_traces_feed_simulations() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let out = run(spotpipe(&[
        "trace",
        "synth",
        "--probability",
        "0.1",
        "--nodes",
        "8",
        "--hours",
        "12",
        "--seed",
        "5",
        "--output",
    ])
    .arg(&trace));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("time_s,kind,node_id,zone"), "got {text}");

    let config = write_config(dir.path(), "run.toml", REDUNDANT);
    let trace_fed = fs::read_to_string(&config).unwrap().replace(
        "[churn.synthetic]\nseed = 11\nhourly_preemption_probability = 0.1",
        "[churn]\ntrace = \"trace.csv\"",
    );
    fs::write(&config, trace_fed).unwrap();
    let sim = run(spotpipe(&["simulate"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("o")));
    assert!(sim.status.success(), "stderr: {}", stderr(&sim));
}

#[test]
fn shipped_example_config_validates() {
    let example = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/example.toml")
        .canonicalize()
        .unwrap();
    let out = run(spotpipe(&["validate"]).arg(&example));
    assert!(out.status.success(), "stderr: {}", stderr(&out));
}

#[test]
fn missing_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(spotpipe(&["simulate"]).arg(dir.path().join("missing.toml")));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "stderr: {}", stderr(&out));
}
