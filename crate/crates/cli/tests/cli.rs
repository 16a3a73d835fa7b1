use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
method = "cmn"
seeds = [0, 1]

[task]
kind = "synthetic"
tasks = 3
classes_per_task = 2
input = { kind = "vector", dim = 6 }
train_per_class = 20
test_per_class = 20
separation = 6.0

[backbone]
kind = "tiny_mlp"
width = 8

[short]
lr = 0.01
epochs = 3

[long]
lr = 0.01
epochs = 3

[metrics]
random_inits = 2
"#;

fn cmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmn"))
        .args(args)
        .env_remove("CMN_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_verifiable_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out_dir = tmp.path().join("out");
    let out = cmn(&["run", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["metrics.json", "config.json", "curves.csv", "summary.csv", "seed-0/record.json", "seed-1/matrix.csv", "seed-1/baselines.csv"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let curves = std::fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("seed,method,task,phase,epoch,loss,train_acc,acc_task1,acc_task2,acc_task3\n"), "{curves}");
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("cmn,3,af,") && l.contains(" ± ")), "{summary}");

    let verify = cmn(&["metrics", s(&out_dir)]);
    assert_eq!(code(&verify), 0, "{}", stderr(&verify));
    assert!(stdout(&verify).contains("(verified)"));

    std::fs::remove_file(out_dir.join("curves.csv")).unwrap();
    let again = cmn(&["curves", s(&out_dir)]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(std::fs::read_to_string(out_dir.join("curves.csv")).unwrap(), curves);
}

#[test]
fn tampered_records_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", &TINY.replace("seeds = [0, 1]", "seeds = [3]"));
    let out_dir = tmp.path().join("out");
    assert_eq!(code(&cmn(&["run", s(&cfg), "--out", s(&out_dir)])), 0);
    let path = out_dir.join("seed-3/record.json");
    let mut rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let bwt = rec["metrics"]["bwt"].as_f64().unwrap();
    rec["metrics"]["bwt"] = serde_json::json!(bwt + 1e-9);
    std::fs::write(&path, serde_json::to_string(&rec).unwrap()).unwrap();
    let out = cmn(&["metrics", s(&out_dir)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("bwt"), "{}", stderr(&out));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&cmn(&["run", s(&cfg), "--out", s(&a), "--threads", "1"])), 0);
    assert_eq!(code(&cmn(&["run", s(&cfg), "--out", s(&b), "--threads", "4"])), 0);
    assert_eq!(std::fs::read(a.join("metrics.json")).unwrap(), std::fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(std::fs::read(a.join("curves.csv")).unwrap(), std::fs::read(b.join("curves.csv")).unwrap());
}

#[test]
fn default_output_goes_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "named.toml", &TINY.replace("seeds = [0, 1]", "seeds = [0]"));
    let out = Command::new(env!("CARGO_BIN_EXE_cmn"))
        .args(["run", s(&cfg), "--epochs", "1"])
        .env("CMN_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("root/named/metrics.json").is_file());
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (TINY.replace("[long]\nlr = 0.01", "[long]\nlr = -1.0"), "long.lr"),
        (format!("{TINY}\n[consolidation]\ntemperature = 0.0\n"), "consolidation.temperature"),
        (format!("{TINY}\n[consolidation]\nbeta = 1.5\n"), "consolidation.beta"),
        (TINY.replace("width = 8", "width = \"wide\""), "backbone"),
        (TINY.replace("separation = 6.0", "separation = 6.0\nseperation = 1.0"), "seperation"),
        (TINY.replace("seeds = [0, 1]", "seeds = []"), "seeds"),
        (TINY.replace("tasks = 3", "tasks = 0"), "task.tasks"),
        (TINY.replace("method = \"cmn\"", "method = \"ewc\""), "method"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.toml"), text);
        let out = cmn(&["run", s(&cfg), "--out", s(&tmp.path().join("never"))]);
        assert_eq!(code(&out), 2, "case {i}: {}", stderr(&out));
        assert!(stderr(&out).contains(field), "case {i}: {}", stderr(&out));
    }
    assert!(!tmp.path().join("never").exists());
}

#[test]
fn missing_files_exit_4() {
    let out = cmn(&["run", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let tmp = tempfile::tempdir().unwrap();
    let out = cmn(&["curves", s(tmp.path())]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn csv_task_errors_carry_row_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("train.csv"), "x1,x2,label\n0.1,0.2,0\n0.3,oops,1\n").unwrap();
    std::fs::write(tmp.path().join("test.csv"), "x1,x2,label\n0.1,0.2,0\n0.3,0.4,1\n").unwrap();
    let text = r#"
method = "one"
[task]
kind = "csv"
files = [{ train = "train.csv", test = "test.csv" }]
[backbone]
kind = "tiny_mlp"
width = 4
"#;
    let cfg = write_config(tmp.path(), "csv.toml", text);
    let out = cmn(&["run", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("train.csv") && err.contains("row 2") && err.contains("column 2"), "{err}");
}

#[test]
fn csv_tasks_train_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train = String::from("a,b,label\n");
    let mut test = train.clone();
    for i in 0..40 {
        let (x, y) = if i % 2 == 0 { (3.0, 3.0) } else { (-3.0, -3.0) };
        let jitter = (i as f64 * 0.37).sin() * 0.5;
        train.push_str(&format!("{},{},{}\n", x + jitter, y - jitter, i % 2));
        test.push_str(&format!("{},{},{}\n", x - jitter, y + jitter, i % 2));
    }
    std::fs::write(tmp.path().join("train.csv"), &train).unwrap();
    std::fs::write(tmp.path().join("test.csv"), &test).unwrap();
    let text = r#"
method = "one"
[task]
kind = "csv"
files = [{ train = "train.csv", test = "test.csv" }]
[backbone]
kind = "tiny_mlp"
width = 4
"#;
    let cfg = write_config(tmp.path(), "csv.toml", text);
    let out = cmn(&["run", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("final_acc 1.0000"), "{}", stdout(&out));
}

#[test]
fn divergence_exits_3() {
    // Cross-entropy is bounded by its log epsilon, so only an overflow to a
    // non-finite loss can diverge.
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("[short]\nlr = 0.01", "[short]\nlr = 1e300\nmomentum = 0.0");
    let cfg = write_config(tmp.path(), "hot.toml", &text);
    let out = cmn(&["run", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("divergence during short phase"), "{}", stderr(&out));
}

#[test]
fn metrics_from_csv_match_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let matrix = write_config(tmp.path(), "r.csv", "0.9,0.4\n0.7,0.8\n");
    let base = write_config(tmp.path(), "b.csv", "task,m,n,b\n1,0.95,0.95,0.5\n2,0.85,0.8,0.5\n");
    let out = cmn(&["metrics", s(&matrix), "--baselines", s(&base)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let close = |k: &str, x: f64| assert!((v[k].as_f64().unwrap() - x).abs() < 1e-12, "{k}: {}", v[k]);
    close("acc", 0.75);
    close("bwt", -0.2);
    close("fwt", -0.1);
    // seen average after task 2 is 0.75: (0.75 - 0.8) + (0.8 - 0.85)
    close("af", -0.1);

    let no_n = write_config(tmp.path(), "bm.csv", "task,m,b\n1,0.95,0.5\n2,0.85,0.5\n");
    let out = cmn(&["metrics", s(&matrix), "--baselines", s(&no_n)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("baseline n is missing"), "{}", stderr(&out));
    let out = cmn(&["metrics", s(&matrix), "--baselines", s(&no_n), "--skip-af"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stdout(&out).contains("\"af\": -"), "{}", stdout(&out));

    let bad = write_config(tmp.path(), "bad.csv", "0.9,\n0.7,x\n");
    let out = cmn(&["metrics", s(&bad)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("row 2"), "{}", stderr(&out));
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let file = tmp.path().join("state.ckpt");
    let saved = cmn(&["checkpoint", "save", s(&cfg), "--out", s(&file), "--seed", "1"]);
    assert_eq!(code(&saved), 0, "{}", stderr(&saved));
    let accs = |o: &Output| stdout(o).lines().find(|l| l.starts_with("final accuracies")).unwrap().to_string();

    let loaded = cmn(&["checkpoint", "load", s(&file), "--config", s(&cfg)]);
    assert_eq!(code(&loaded), 0, "{}", stderr(&loaded));
    assert_eq!(accs(&saved), accs(&loaded));

    let other = write_config(tmp.path(), "other.toml", &TINY.replace("width = 8", "width = 9"));
    let out = cmn(&["checkpoint", "load", s(&file), "--config", s(&other)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let bytes = std::fs::read(&file).unwrap();
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    let bad = tmp.path().join("flipped.ckpt");
    std::fs::write(&bad, &flipped).unwrap();
    let out = cmn(&["checkpoint", "load", s(&bad)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));

    let truncated = tmp.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(code(&cmn(&["checkpoint", "load", s(&truncated)])), 4);

    let needle = b"\"schema_version\":1";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut newer = bytes.clone();
    newer[at + needle.len() - 1] = b'7';
    let future = tmp.path().join("future.ckpt");
    std::fs::write(&future, &newer).unwrap();
    let out = cmn(&["checkpoint", "load", s(&future)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("version 7"), "{}", stderr(&out));
}
