use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn envforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_envforge"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn build_tiny(tmp: &Path) -> PathBuf {
    let out = tmp.join("out");
    let o = envforge(
        &[
            "build",
            "--repo",
            tiny().to_str().unwrap(),
            "--backend",
            "sim",
            "--out",
            out.to_str().unwrap(),
        ],
        tmp,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    out
}

#[test]
fn build_emits_trace_and_dockerfile() {
    let tmp = tempfile::tempdir().unwrap();
    let out = build_tiny(tmp.path());
    assert!(out.join("local__tiny.trace.jsonl").is_file());
    let dockerfile = fs::read_to_string(out.join("Dockerfile")).unwrap();
    assert_eq!(
        dockerfile,
        "FROM python:3.10\nCOPY src /envforge/src\nRUN cp -r /envforge/src /repo\n\
         RUN cd /repo && pip install six==1.16.0\nRUN cd /repo && pip install pytest==8.0.0\n"
    );
    assert!(out.join("src/tinycalc.py").is_file());
    assert!(!out.join("src/.envforge").exists());
}

#[test]
fn replay_of_built_dockerfile_runs_tests() {
    let tmp = tempfile::tempdir().unwrap();
    let out = build_tiny(tmp.path());
    let world = tiny().join(".envforge/sim.json");
    let o = envforge(
        &[
            "replay",
            out.to_str().unwrap(),
            "--world",
            world.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(
        v,
        serde_json::json!({"dockerfile_built": true, "tests_ran": true})
    );
}

#[test]
fn synthesize_reproduces_the_build_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = build_tiny(tmp.path());
    let again = tmp.path().join("again");
    let o = envforge(
        &[
            "synthesize",
            out.join("local__tiny.trace.jsonl").to_str().unwrap(),
            "-o",
            again.to_str().unwrap(),
            "--source",
            tiny().to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        fs::read(out.join("Dockerfile")).unwrap(),
        fs::read(again.join("Dockerfile")).unwrap()
    );
}

#[test]
fn unverified_build_exits_one_and_synthesize_refuses_it() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = fixtures().join("broken");
    let out = tmp.path().join("out");
    let o = envforge(
        &[
            "build",
            "--repo",
            broken.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join("Dockerfile").exists());
    let trace = out.join("local__broken.trace.jsonl");
    let o = envforge(
        &["synthesize", trace.to_str().unwrap(), "-o", "x"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = envforge(
        &[
            "synthesize",
            trace.to_str().unwrap(),
            "-o",
            "x",
            "--allow-unverified",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn eval_scores_the_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = fixtures().join("bench.jsonl");
    let o = envforge(
        &[
            "eval",
            bench.to_str().unwrap(),
            "--backend",
            "sim",
            "--jobs",
            "2",
            "--out",
            "report.json",
        ],
        tmp.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let agg = &report["aggregate"];
    assert_eq!(agg["n"], 4);
    assert_eq!(agg["ebsr"], 0.75);
    assert_eq!(agg["dgsr"], 1.0);
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries[3]["entry"]["full_name"], "fixtures/broken");
    for e in entries {
        assert_eq!(e["tests_ran"] == true, e["failure_category"].is_null());
    }
    assert!(tmp
        .path()
        .join("envforge-eval/fixtures__tiny-a/Dockerfile")
        .is_file());
}

#[test]
fn classify_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = envforge(&["classify", "pip", "install", "numpy>=1.20"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "install");
    let o = envforge(&["classify", "cat notes.txt > copy.txt"], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "mutating");
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["build", "--repo", ".", "--no-such-flag"][..],
        &[][..],
        &["frobnicate"][..],
        &["build", "--backend", "podman", "--repo", "."][..],
        &["build", "--remote", "a/b"][..],
    ] {
        let o = envforge(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn operational_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = envforge(&["build", "--repo", "does-not-exist"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = envforge(
        &["build", "--remote", "acme/widget", "--sha", "abc1234"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--world"));
    let o = envforge(&["classify", "echo 'unterminated"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn docker_backend_without_runtime_fails_cleanly() {
    if docker_present() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let o = envforge(
        &[
            "build",
            "--repo",
            tiny().to_str().unwrap(),
            "--backend",
            "docker",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("container runtime"));
}

fn docker_present() -> bool {
    Command::new("docker")
        .args(["version", "--format", "{{.Server.Version}}"])
        .output()
        .is_ok_and(|o| o.status.success())
}
