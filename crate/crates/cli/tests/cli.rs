use std::fs;
use std::process::Command;

const TINY: &str = r#"
[dataset]
kind = "synthetic"
source = "SRC"
target = "DST"
window_seconds = 1.0
slide_seconds = 1.0

[dataset.synthetic]
seed = 4
n_subjects = 3
n_classes = 3
segment_seconds = 4.0
segments_per_class = 1

[model.src]
d = 8
patch_len = 4
layers = 1
heads = 2

[model.dst]
d = 8
patch_len = 4
layers = 1
heads = 2

[train]
epochs_cls = 2
epochs_contrastive = 1
batch_size = 16

[eval]
modes = ["BASELINE", "CFSR"]
output_dir = "out"
"#;

fn xsense() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xsense"))
}

#[test]
fn gradcheck_passes_and_catches_a_broken_op() {
    let ok = xsense().arg("gradcheck").output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = xsense().args(["gradcheck", "--corrupt-op", "softmax"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn run_then_report_regenerates_the_same_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = xsense()
        .args(["run", "--strict-determinism", "--config"])
        .arg(&cfg)
        .arg("--output-root")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let out = dir.path().join("out");
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(String::from_utf8_lossy(&run.stdout).contains(md.lines().next().unwrap()));
    assert_eq!(md.lines().filter(|l| l.starts_with("| CFSR ")).count(), 1);

    let json = fs::read(out.join("report.json")).unwrap();
    fs::remove_file(out.join("report.json")).unwrap();
    fs::remove_file(out.join("report.md")).unwrap();
    let rep = xsense().args(["report", "--formats", "json,markdown", "--dir"]).arg(&out).output().unwrap();
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    assert_eq!(fs::read(out.join("report.json")).unwrap(), json);
    assert_eq!(fs::read_to_string(out.join("report.md")).unwrap(), md);
}

#[test]
fn bad_config_and_unknown_mode_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, TINY.replace("batch_size = 16", "batch_size = 16\nbogus = 1")).unwrap();
    let out = xsense().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let out = xsense().args(["run", "--modes", "teacher", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn synth_writes_a_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let out = xsense()
        .args(["synth", "--subjects", "3", "--classes", "2", "--seed", "1", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&path).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("timestamp,subject,activity,SRC.c0"));
    assert!(header.contains("DST.c0"));
    let subjects: std::collections::BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(subjects.len(), 3);
}
