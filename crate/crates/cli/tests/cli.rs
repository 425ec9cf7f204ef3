use std::fs;
use std::path::Path;
use std::process::Command;

fn tdcd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdcd"))
}

const MINIMAL: &str = r#"
silos = 1
clients = 1
local_steps = 1
learning_rate = 0.1
batch_size = 4
rounds = 0

[model]
architecture = "linear"

[loss]
kind = "squared_error"

[seeds]
data = 1
init = 2
batch = 3
shard = 4

[dataset]
source = "synthetic"
samples = 8
features = 2
task = "least_squares"
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn minimal_run_writes_empty_trace_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", MINIMAL);
    let out = dir.path().join("out");
    let st = tdcd().arg("run").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("trace.jsonl")).unwrap(), "");
    assert!(out.join("config.toml").exists());
}

#[test]
fn missing_rounds_exits_one_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &MINIMAL.replace("rounds = 0\n", ""));
    let o = tdcd().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rounds"));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("rounds = 0", "rounds = 5").replace("learning_rate = 0.1", "learning_rate = 1e300");
    let cfg = write(dir.path(), "c.toml", &text);
    let o = tdcd().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divergence"));
}

#[test]
fn gen_data_then_run_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let st = tdcd()
        .args(["gen-data", "--samples", "20", "--features", "4", "--noise", "0.1", "--seed", "9", "--out"])
        .arg(dir.path().join("d.csv"))
        .status()
        .unwrap();
    assert!(st.success());
    assert!(dir.path().join("d.csv.meta.json").exists());
    let text = MINIMAL
        .replace("rounds = 0", "rounds = 3")
        .replace("silos = 1", "silos = 2")
        .replace(
            "source = \"synthetic\"\nsamples = 8\nfeatures = 2\ntask = \"least_squares\"",
            "source = \"csv\"\npath = \"d.csv\"\nlabel_column = \"y\"",
        );
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let o = tdcd().arg("run").arg(&cfg).arg("--out").arg(&out).current_dir("/").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(), 1 + 3 + 1);
    // the snapshot carries an absolute dataset path and reruns identically
    let again = dir.path().join("again");
    let st = tdcd().arg("run").arg(out.join("config.toml")).arg("--out").arg(&again).status().unwrap();
    assert!(st.success());
    assert_eq!(fs::read(out.join("trace.jsonl")).unwrap(), fs::read(again.join("trace.jsonl")).unwrap());
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[sweep]\naxis = \"local_steps\"\nvalues = [1, 2]\n",
        MINIMAL.replace("rounds = 0", "rounds = 4")
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("s");
    let st = tdcd().arg("sweep").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("axis,value,silos,clients,local_steps"));
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn check_and_version() {
    let o = tdcd().arg("check").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains("FAIL"));
    assert!(text.lines().count() >= 12);
    let v = tdcd().arg("version").output().unwrap();
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("tdcd "));
}
