use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
profile = "desk_cnn"
optimizer = "adam"
lr_main = 0.002
lr_head = 0.002
momentum = 0.0
epochs = 1
batch_size_primary = 8
batch_size_auxiliary = 8
crop_size = 12
desk_channels = [4, 8]
val_fraction = 0.25
"#;

fn geos(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geos"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEOS_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn geos")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

/// Workspace with a small synthetic dataset in `data/` and a tiny config.
fn workspace(domains: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
    let d = domains.to_string();
    ok(geos(dir.path(), &["synth", "--domains", &d, "--classes", "3", "--per-class", "6", "--resolution", "14", "--seed", "3", "--out", "data"]));
    dir
}

fn train_tiny(dir: &Path, out: &str) {
    ok(geos(dir, &["train", "--config", "tiny.toml", "--data", "data", "--resolution", "14", "--target", "photo", "--out", out]));
}

#[test]
fn permgen_writes_a_reproducible_set() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(geos(dir.path(), &["permgen", "--tiles", "9", "--count", "30", "--seed", "0", "--out", "p.txt"]));
    assert!(stdout(&o).starts_with("min pairwise hamming: "));
    let first = fs::read_to_string(dir.path().join("p.txt")).unwrap();
    let mut lines = first.lines();
    assert_eq!(lines.next(), Some("n=9 V=30 seed=0"));
    assert_eq!(lines.count(), 30);
    assert!(dir.path().join("p.txt.manifest.json").exists());
    ok(geos(dir.path(), &["permgen", "--tiles", "9", "--count", "30", "--seed", "0", "--out", "p.txt"]));
    assert_eq!(fs::read_to_string(dir.path().join("p.txt")).unwrap(), first);
}

#[test]
fn permgen_rejects_infeasible_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = geos(dir.path(), &["permgen", "--count", "7", "--tiles", "3", "--out", "p.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("infeasible: 7 > 3! = 6"), "{}", stderr(&o));
    assert!(!dir.path().join("p.txt").exists());
}

#[test]
fn train_usage_errors_exit_two() {
    let dir = workspace(3);
    let o = geos(dir.path(), &["train", "--config", "tiny.toml", "--data", "data", "--mode", "da", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--target"));
    let o = geos(dir.path(), &["train", "--config", "tiny.toml", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2), "missing dataset");
    let o = geos(dir.path(), &["train", "--config", "tiny.toml", "--data", "nowhere", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2), "unreachable dataset");
    let o = geos(dir.path(), &["train", "--config", "no_such_preset", "--data", "data", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2), "bad config");
}

#[test]
fn default_config_echoes_reference_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(geos(dir.path(), &["train", "--dry-run", "--out", "r"]));
    let line = stdout(&o);
    for field in ["alpha=2 ", "lr=0.001 ", "momentum=0.9 ", "wd=0.0005 ", "epochs=40 "] {
        assert!(line.contains(field), "{field} missing from {line}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["resolved_config"].as_str().unwrap().contains("epochs = 40"));
}

#[test]
fn train_then_eval_with_adaptation() {
    let dir = workspace(3);
    train_tiny(dir.path(), "run");
    for f in ["manifest.json", "checkpoint.safetensors", "log.csv"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.path().join("run/log.csv")).unwrap();
    assert!(log.starts_with("epoch,L_p,L_a,val_metric,lr"));

    let none = ok(geos(dir.path(), &["eval", "--checkpoint", "run/checkpoint.safetensors", "--data", "data", "--os-iterations", "0"]));
    assert_eq!(stdout(&none).lines().count(), 1);
    assert!(stdout(&none).starts_with("it=0 accuracy="));

    let args = ["eval", "--checkpoint", "run/checkpoint.safetensors", "--data", "data", "--os-iterations", "3", "--os-batch", "16", "--trace", "trace.csv"];
    let first = ok(geos(dir.path(), &args));
    let lines: Vec<String> = stdout(&first).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 4);
    for (k, l) in lines.iter().enumerate() {
        assert!(l.starts_with(&format!("it={k} accuracy=")), "{l}");
    }
    assert_eq!(lines[0], stdout(&none).trim_end());
    assert_eq!(stdout(&ok(geos(dir.path(), &args))), stdout(&first));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 18 * 4);
    assert!(dir.path().join("run/eval/manifest.json").exists());
}

#[test]
fn eval_rejects_mismatched_inputs() {
    let dir = workspace(3);
    train_tiny(dir.path(), "run");
    let o = geos(dir.path(), &["eval", "--checkpoint", "run/checkpoint.safetensors", "--data", "data", "--resolution", "20"]);
    assert_eq!(o.status.code(), Some(2));
    ok(geos(dir.path(), &["synth", "--domains", "2", "--classes", "4", "--per-class", "2", "--resolution", "14", "--out", "other"]));
    let o = geos(dir.path(), &["eval", "--checkpoint", "run/checkpoint.safetensors", "--data", "other", "--domain", "art"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_root_falls_back_to_the_environment() {
    let dir = workspace(3);
    let o = Command::new(env!("CARGO_BIN_EXE_geos"))
        .args(["train", "--config", "tiny.toml", "--resolution", "14", "--mode", "null", "--out", "env_run"])
        .current_dir(dir.path())
        .env("GEOS_DATA_ROOT", dir.path().join("data"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(o);
    assert!(dir.path().join("env_run/checkpoint.safetensors").exists());
}

#[test]
fn dg_loo_protocol_table_and_replay() {
    let dir = workspace(4);
    let o = ok(geos(
        dir.path(),
        &["protocol", "--protocol", "dg_loo", "--config", "tiny.toml", "--data", "data", "--resolution", "14", "--reps", "3", "--os-iterations", "1", "--os-batch", "8", "--eval-limit", "6", "--out", "table"],
    ));
    let md = stdout(&o);
    let header = md.lines().next().unwrap();
    assert_eq!(header.matches('|').count(), 1 + 1 + 4 + 1, "{header}");
    assert!(header.ends_with("| Avg |"));
    for f in ["manifest.json", "result.csv", "result.md", "aggregates.csv"] {
        assert!(dir.path().join("table").join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("table/result.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3 * 2);

    // Replay from another working directory.
    let elsewhere = dir.path().join("elsewhere");
    fs::create_dir(&elsewhere).unwrap();
    ok(geos(&elsewhere, &["protocol", "--from-manifest", "../table/manifest.json", "--out", "replay"]));
    assert_eq!(fs::read_to_string(elsewhere.join("replay/result.csv")).unwrap(), csv);

    let gains = ok(geos(dir.path(), &["report", "--input", "table/result.csv", "--format", "gains"]));
    assert!(stdout(&gains).starts_with("| Target | Task | Run | it=1 |"));
    ok(geos(dir.path(), &["report", "--input", "table/result.csv", "--format", "aggregates", "--out", "rep"]));
    assert!(fs::read_to_string(dir.path().join("rep/aggregates.csv")).unwrap().contains("Avg"));
    let bad = geos(dir.path(), &["report", "--input", "table/result.csv", "--format", "xml"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn replay_refuses_changed_inputs() {
    let dir = workspace(3);
    ok(geos(dir.path(), &["protocol", "--protocol", "dg_loo", "--config", "tiny.toml", "--data", "data", "--resolution", "14", "--reps", "1", "--methods", "null", "--eval-limit", "4", "--out", "a"]));
    fs::write(dir.path().join("tiny.toml"), TINY_CONFIG.replace("epochs = 1", "epochs = 2")).unwrap();
    let o = geos(dir.path(), &["protocol", "--from-manifest", "a/manifest.json", "--out", "b"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("changed"));
}

#[test]
fn pair_protocol_is_subsampled_without_full_sweep() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
    ok(geos(dir.path(), &["synth", "--domains", "30", "--classes", "2", "--per-class", "3", "--resolution", "14", "--out", "data"]));
    let o = ok(geos(
        dir.path(),
        &["protocol", "--protocol", "pda_pairs", "--config", "tiny.toml", "--data", "data", "--resolution", "14", "--reps", "1", "--methods", "null", "--eval-limit", "2", "--out", "pairs"],
    ));
    assert!(stderr(&o).contains("notice: running 6 of 870 ordered pairs"), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("pairs/result.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn divergence_exits_three_after_writing_results() {
    let dir = workspace(3);
    let o = geos(
        dir.path(),
        &["protocol", "--protocol", "dg_loo", "--config", "tiny.toml", "--data", "data", "--resolution", "14", "--reps", "1", "--methods", "null", "--lr", "1e30", "--epochs", "3", "--out", "dv"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("dv/result.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",failed")), "{csv}");
}

#[test]
fn report_appends_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    let rows = "protocol,target,method,os_iterations,run,seed,accuracy,status\n\
                pda_pairs,a->b,ges,0,0,1,0.5,ok\n\
                pda_pairs,b->a,ges,0,0,2,0.75,ok\n";
    fs::write(dir.path().join("result.csv"), rows).unwrap();
    fs::write(dir.path().join("refs.csv"), "method,target,accuracy,note\nAdaGraph,Avg,65.1,draft reports 58.8\n").unwrap();
    let o = ok(geos(dir.path(), &["report", "--input", "result.csv", "--reference", "refs.csv"]));
    let md = stdout(&o);
    assert!(md.contains("| GeS | 50.00 | 75.00 | 62.50 |"), "{md}");
    assert!(md.contains("| AdaGraph (reference) | - | - | 65.10 |"), "{md}");
    assert!(md.contains("- AdaGraph Avg: draft reports 58.8"));
    let o = geos(dir.path(), &["report", "--input", "result.csv", "--reference", "refs.csv", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(2));
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "protocol,target,method,os_iterations,run,seed,accuracy,status\n").unwrap();
    assert_eq!(geos(dir.path(), &["report", "--input", "empty.csv"]).status.code(), Some(2));
}
