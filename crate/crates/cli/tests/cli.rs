use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = r#"
rounds = 3
slate_size = 5
gamma_grid = [0.0, 0.5, 1.0]
seeds = [1, 2]

[world]
n_users = 60
n_items = 200
latent_dim = 4

[train]
epochs = 3
embed_dim = 4
exposure_embed_dim = 4
batch_size = 64

[scoring]
gamma = 0.5
k = 10
"#;

fn exposim(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_exposim"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("EXPOSIM__") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn hash(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn assert_single_line_error(o: &Output, code: i32, needle: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains(needle), "expected {needle:?} in {err:?}");
}

fn run_sweep(dir: &Path, config: &Path, out: &str) -> (Output, PathBuf) {
    let out_dir = dir.join(out);
    let o = exposim(&["sweep", "--config", s(config), "--out", s(&out_dir)], &[]);
    (o, out_dir)
}

const SWEEP_FILES: [&str; 4] = ["sweep.csv", "aggregate.csv", "chosen_gamma.json", "sweep_long.csv"];

#[test]
fn sweep_writes_its_four_artifacts() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (o, out) = run_sweep(tmp.path(), &config, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in SWEEP_FILES {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(out.join("manifest.json").is_file());
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    // header + 3 gammas x 2 seeds + 2 opc rows
    assert_eq!(sweep.lines().count(), 1 + 6 + 2);
    let long = fs::read_to_string(out.join("sweep_long.csv")).unwrap();
    assert!(long.starts_with("gamma,metric,mean,sd\n"));
    let chosen: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("chosen_gamma.json")).unwrap()).unwrap();
    assert!(chosen["gamma"].is_number());
}

#[test]
fn sweep_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (a, out_a) = run_sweep(tmp.path(), &config, "a");
    let (b, out_b) = run_sweep(tmp.path(), &config, "b");
    assert!(a.status.success() && b.status.success());
    for f in SWEEP_FILES {
        assert_eq!(hash(&out_a.join(f)), hash(&out_b.join(f)), "{f} differs");
    }
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn rerun_into_same_directory_overwrites() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (_, out) = run_sweep(tmp.path(), &config, "out");
    let first = hash(&out.join("sweep.csv"));
    let (o, _) = run_sweep(tmp.path(), &config, "out");
    assert!(o.status.success());
    assert_eq!(hash(&out.join("sweep.csv")), first);
}

#[test]
fn empty_gamma_grid_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &format!("{SMALL}\n").replace("gamma_grid = [0.0, 0.5, 1.0]", "gamma_grid = []"));
    let (o, _) = run_sweep(tmp.path(), &config, "out");
    assert_single_line_error(&o, 1, "field=gamma_grid");
}

#[test]
fn environment_overrides_config_keys() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = exposim(
        &["sweep", "--config", s(&config), "--out", s(&out)],
        &[("EXPOSIM__GAMMA_GRID", "[]")],
    );
    assert_single_line_error(&o, 1, "field=gamma_grid");
    let o = exposim(
        &["sweep", "--config", s(&config), "--out", s(&out), "--quiet"],
        &[("EXPOSIM__GAMMA_GRID", "[0.25]")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.lines().skip(1).all(|l| l.contains(",0.25,") || l.starts_with("opc")));
}

#[test]
fn usage_errors_exit_one() {
    let o = exposim(&["frobnicate"], &[]);
    assert_single_line_error(&o, 1, "error=usage");
    let o = exposim(&["sweep", "--config", "/definitely/not/here.toml"], &[]);
    assert_single_line_error(&o, 1, "error=config_file");
}

fn run_loop(dir: &Path, config: &Path, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out_dir = dir.join(out);
    let mut args = vec!["loop", "--config", s(config), "--out", s(&out_dir)];
    args.extend_from_slice(extra);
    let o = exposim(&args, &[]);
    (o, out_dir)
}

#[test]
fn loop_gamma_defaults_to_scoring_gamma() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (o, out) = run_loop(tmp.path(), &config, "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("0.5")), "{trace}");
    assert!(out.join("logs_seed_1.csv").is_file());
    assert!(out.join("logs_seed_2.csv").is_file());
}

#[test]
fn loop_rejects_negative_gamma() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (o, _) = run_loop(tmp.path(), &config, "out", &["--gamma", "-0.5"]);
    assert_single_line_error(&o, 1, "error=config");
}

#[test]
fn loop_traces_depend_only_on_seeds() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (a, out_a) = run_loop(tmp.path(), &config, "a", &["--seed-override", "5"]);
    let (b, out_b) = run_loop(tmp.path(), &config, "b", &["--seed-override", "5"]);
    let (c, out_c) = run_loop(tmp.path(), &config, "c", &["--seed-override", "6"]);
    assert!(a.status.success() && b.status.success() && c.status.success());
    let trace = |d: &Path| hash(&d.join("trace.csv"));
    assert_eq!(trace(&out_a), trace(&out_b));
    let strip_seed = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("trace.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_ne!(strip_seed(&out_a), strip_seed(&out_c));
}

fn csv_field(header: &str, line: &str, name: &str) -> String {
    let idx = header.split(',').position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    line.split(',').nth(idx).unwrap().to_string()
}

#[test]
fn replaying_loop_logs_reproduces_final_round_metrics() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (o, loop_out) = run_loop(tmp.path(), &config, "loop", &["--seed-override", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let replay_out = tmp.path().join("replay");
    let logs = loop_out.join("logs_seed_7.csv");
    let o = exposim(
        &["replay", "--logs", s(&logs), "--config", s(&config), "--out", s(&replay_out), "--seed-override", "7"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let trace = fs::read_to_string(loop_out.join("trace.csv")).unwrap();
    let mut trace_lines = trace.lines();
    let trace_header = trace_lines.next().unwrap();
    let last = trace_lines.last().unwrap();
    let sweep = fs::read_to_string(replay_out.join("sweep.csv")).unwrap();
    let mut sweep_lines = sweep.lines();
    let sweep_header = sweep_lines.next().unwrap();
    let row = sweep_lines
        .find(|l| l.starts_with("exposure,") && csv_field(sweep_header, l, "gamma") == "0.5")
        .expect("gamma 0.5 row");
    for metric in [
        "positive_recall_at_k",
        "negative_recall_at_k",
        "unique_retrieved",
        "popular_dominance",
        "n_eval_users",
    ] {
        assert_eq!(
            csv_field(trace_header, last, metric),
            csv_field(sweep_header, row, metric),
            "{metric}"
        );
    }
}

fn exported_logs(tmp: &TempDir, config: &Path) -> String {
    let (o, out) = run_loop(tmp.path(), config, "loop", &["--seed-override", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::read_to_string(out.join("logs_seed_3.csv")).unwrap()
}

fn replay(tmp: &TempDir, config: &Path, logs_text: &str) -> Output {
    let logs = tmp.path().join("edited.csv");
    fs::write(&logs, logs_text).unwrap();
    exposim(
        &["replay", "--logs", s(&logs), "--config", s(config), "--out", s(&tmp.path().join("r"))],
        &[],
    )
}

#[test]
fn truncated_log_line_is_reported_with_its_number() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let text = exported_logs(&tmp, &config);
    let n_lines = text.lines().count();
    let cut = text.trim_end().rfind(',').unwrap();
    let o = replay(&tmp, &config, &text[..cut]);
    assert_single_line_error(&o, 2, &format!("line={n_lines}"));
}

#[test]
fn empty_log_file_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let o = replay(&tmp, &config, "");
    assert_single_line_error(&o, 2, "error=empty_input");
}

#[test]
fn out_of_range_ids_are_data_errors() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let mut text = exported_logs(&tmp, &config);
    text.push_str("2,59,200,positive\n");
    let o = replay(&tmp, &config, &text);
    assert_single_line_error(&o, 2, "error=index");
}

#[test]
fn generate_world_writes_a_snapshot() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("w");
    let o = exposim(&["generate-world", "--config", s(&config), "--out", s(&out), "--seed-override", "11"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let world: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("world.json")).unwrap()).unwrap();
    assert_eq!(world["format"], "exposure-world");
    assert_eq!(world["config"]["seed"], 11);
    assert!(out.join("manifest.json").is_file());
}
