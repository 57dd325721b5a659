use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7

[pattern]
width = 128
height = 128
spacing_x = 13
spacing_y = 25
slit_width = 3

[[scenes]]
id = "a"
split = "train"
surface = "plane"

[[scenes]]
id = "b"
split = "test"
surface = "ripple"
"#;

fn gridpoint(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("gridpoint.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gridpoint"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .arg("--log")
        .arg("error")
        .output()
        .unwrap()
}

#[test]
fn pattern_stage_writes_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridpoint(dir.path(), SMALL, &["pattern"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["grid.png", "vertical.png", "horizontal.png", "grid_spec.json"] {
        assert!(dir.path().join("run/patterns").join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("run/run_manifest.json").is_file());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridpoint(dir.path(), &SMALL.replace("slit_width = 3", "slit_width = 3\nbogus = 1"), &["pattern"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pattern"), "{err}");

    let out = gridpoint(dir.path(), &SMALL.replace("spacing_x = 13", "spacing_x = -1"), &["pattern"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridpoint(dir.path(), SMALL, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gridpoint patches"), "{err}");
}

#[test]
fn missing_config_file_exits_nonzero() {
    let out = Command::new(env!("CARGO_BIN_EXE_gridpoint"))
        .args(["pattern", "--config", "/nonexistent/gridpoint.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
