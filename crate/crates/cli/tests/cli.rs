use std::path::Path;
use std::process::{Command, Output};

use coded_resnext::analysis::read_records;
use coded_resnext::codebook::{verify_scheme, CodingScheme};

fn coded(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coded"))
        .current_dir(dir)
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

/// Small blob problem so that training finishes in a second or two.
fn write_small_config(dir: &Path) {
    let cfg = serde_json::json!({
        "output_dir": "run",
        "data": { "kind": "blobs", "num_classes": 4, "dim": 8, "samples_per_class": 60 },
        "train": { "epochs": 2, "batch_size": 32 },
        "analysis": { "trials": 2 }
    });
    std::fs::write(dir.join("small.json"), cfg.to_string()).unwrap();
}

#[test]
fn generated_scheme_passes_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["codebook", "generate", "--K", "10", "--N", "10", "--N-act", "3", "--H-min", "4", "-o", "scheme.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let file = CodingScheme::load(&dir.path().join("scheme.txt")).unwrap();
    assert!(verify_scheme(&file.scheme, 10, 10, 3, 4).passed());
    let v = coded(dir.path(), &["codebook", "verify", "scheme.txt"]);
    assert!(v.status.success(), "{}", stderr(&v));
    assert_eq!(stdout(&v).lines().count(), 1);
}

#[test]
fn verify_rejects_broken_scheme() {
    let dir = tempfile::tempdir().unwrap();
    coded(dir.path(), &["codebook", "generate", "--K", "6", "--N", "6", "--N-act", "2", "-o", "s.txt"]);
    let text = std::fs::read_to_string(dir.path().join("s.txt")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.iter().rposition(|l| !l.starts_with('#') && !l.trim().is_empty()).unwrap();
    let (class, bits) = lines[last].split_once(' ').unwrap();
    let mut bits: Vec<char> = bits.chars().collect();
    bits[0] = if bits[0] == '0' { '1' } else { '0' };
    lines[last] = format!("{class} {}", bits.iter().collect::<String>());
    std::fs::write(dir.path().join("s.txt"), lines.join("\n")).unwrap();
    let v = coded(dir.path(), &["codebook", "verify", "s.txt"]);
    assert!(!v.status.success());
    assert!(stderr(&v).contains("fails verification"), "{}", stderr(&v));
}

#[test]
fn params_prints_cifar10_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["params", "--arch", "table1-cifar10", "--class", "0"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let fraction: f64 = out.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((fraction - 0.38).abs() <= 0.02, "{out}");
}

#[test]
fn missing_config_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["train", "--config", "missing.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.json"));
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"sead": 3}"#).unwrap();
    let o = coded(dir.path(), &["params", "--config", "c.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sead"), "{}", stderr(&o));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["default-config"]);
    assert!(o.status.success());
    std::fs::write(dir.path().join("d.json"), &o.stdout).unwrap();
    let p = coded(dir.path(), &["params", "--config", "d.json", "--out-dir", "x"]);
    assert!(p.status.success(), "{}", stderr(&p));
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["gradcheck", "--points", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_records(&dir.path().join("out/gradcheck.csv")).unwrap();
    assert!(records.iter().all(|r| r.value < 1e-4));
}

#[test]
fn deterministic_training_reproduces_from_written_config() {
    let dir = tempfile::tempdir().unwrap();
    write_small_config(dir.path());
    let o = coded(dir.path(), &["train", "--config", "small.json", "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/train.config.json")).unwrap()).unwrap();
    assert_eq!(written["command"]["name"], "train");
    assert_eq!(written["deterministic"], true);

    let mut again = written.clone();
    again["output_dir"] = "rerun".into();
    std::fs::write(dir.path().join("again.json"), again.to_string()).unwrap();
    let r = coded(dir.path(), &["train", "--config", "again.json"]);
    assert!(r.status.success(), "{}", stderr(&r));
    for file in ["model.ckpt", "history.csv"] {
        let a = std::fs::read(dir.path().join("run").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("rerun").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn analysis_commands_write_parseable_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_small_config(dir.path());
    assert!(coded(dir.path(), &["train", "--config", "small.json"]).status.success());
    let cfg = ["--config", "run/train.config.json"];
    let runs: [(&[&str], &str); 4] = [
        (&["eval"], "eval.csv"),
        (&["ablate", "--block", "5", "--which", "inactive"], "ablation.csv"),
        (&["extract", "--class", "1"], "extract.csv"),
        (&["early-decode", "--scaling", "raw"], "early_decode.csv"),
    ];
    for (args, csv) in runs {
        let all: Vec<&str> = args.iter().chain(&cfg).copied().collect();
        let o = coded(dir.path(), &all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 1, "{args:?}");
        let path = dir.path().join("run").join(csv);
        let records = read_records(&path).unwrap();
        assert!(!records.is_empty());
        let copy = dir.path().join("copy.csv");
        coded_resnext::analysis::write_records(&copy, &records).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
        let name = args[0];
        assert!(dir.path().join("run").join(format!("{name}.config.json")).exists());
    }
    assert!(dir.path().join("run/class1.ckpt").exists());
    let bad = coded(dir.path(), &["ablate", "--block", "40", "--which", "active", "--config", "run/train.config.json"]);
    assert!(!bad.status.success());
}

#[test]
fn documented_defaults_match_binary() {
    let dir = tempfile::tempdir().unwrap();
    let o = coded(dir.path(), &["default-config"]);
    let doc = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run-config.default.json");
    assert_eq!(stdout(&o), std::fs::read_to_string(doc).unwrap());
}
