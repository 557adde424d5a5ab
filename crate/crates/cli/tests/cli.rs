//! End-to-end behaviour of the `neemtrace` command.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use neemtrace_cli::{dispatch, dispatch_with_input, EXIT_INTEGRITY, EXIT_NOT_FOUND, EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION_FAILED};

fn testdata(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata").join(name).display().to_string()
}

struct Session {
    _dir: tempfile::TempDir,
    store: PathBuf,
}

impl Session {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("store");
        Session { _dir: dir, store }
    }

    fn call(&self, args: &[&str]) -> (i32, String, String) {
        self.call_with_input(args, "")
    }

    fn call_with_input(&self, args: &[&str], input: &str) -> (i32, String, String) {
        let mut argv = vec!["neemtrace".to_string(), "--store".into(), self.store.display().to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = dispatch_with_input(argv, &mut input.as_bytes(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn run(&self, scene: &str, seed: u64) -> String {
        let (code, out, err) = self.call(&[
            "run", "--scene", &testdata(scene), "--plan", &testdata("pour.plan"), "--seed", &seed.to_string(),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        out.trim().to_string()
    }
}

#[test]
fn run_is_reproducible() {
    let s = Session::new();
    let a = s.run("lab.scene", 1);
    assert_eq!(a.len(), 64);
    assert_eq!(s.run("lab.scene", 1), a);
    assert_ne!(s.run("lab.scene", 2), a);
    let other = Session::new();
    assert_eq!(other.run("lab.scene", 1), a);
}

#[test]
fn deterministic_output_matches_golden_files() {
    let s = Session::new();
    let h = s.run("lab.scene", 1);
    let (code, out, _) = s.call(&["--deterministic-output", "replay", &h]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, fs::read_to_string(testdata("golden/lab_replay.txt")).unwrap());

    let rules = testdata("grasp.rules");
    let (code, out, _) = s.call(&["--deterministic-output", "verify", &h, "--rules", &rules]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, fs::read_to_string(testdata("golden/lab_verify.txt")).unwrap());

    let weak = s.run("weak.scene", 1);
    let (code, out, _) = s.call(&["--deterministic-output", "verify", &weak, "--rules", &rules]);
    assert_eq!(code, EXIT_VERIFICATION_FAILED);
    assert_eq!(out, fs::read_to_string(testdata("golden/weak_verify.txt")).unwrap());
}

#[test]
fn wall_clock_appears_only_without_the_flag() {
    let s = Session::new();
    let h = s.run("lab.scene", 1);
    let (_, plain, _) = s.call(&["replay", &h]);
    let (_, det, _) = s.call(&["--deterministic-output", "replay", &h]);
    assert!(plain.contains("created "));
    assert!(!det.contains("created "));
    let (_, a, _) = s.call(&["--deterministic-output", "store", "list"]);
    let (_, b, _) = s.call(&["--deterministic-output", "store", "list"]);
    assert_eq!(a, b);
    assert!(a.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn usage_errors_exit_2() {
    let s = Session::new();
    assert_eq!(s.call(&[]).0, EXIT_USAGE);
    assert_eq!(s.call(&["run", "--scene", "x"]).0, EXIT_USAGE);
    assert_eq!(s.call(&["replay", "not-a-hash"]).0, EXIT_USAGE);
    assert_eq!(s.call(&["query", "episodes where"]).0, EXIT_USAGE);
    let (code, _, err) = s.call(&["run", "--scene", &testdata("grasp.rules"), "--plan", &testdata("pour.plan"), "--seed", "1"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    let h = s.run("lab.scene", 1);
    assert_eq!(s.call(&["verify", &h, "--rules", &testdata("pour.plan")]).0, EXIT_USAGE);
}

#[test]
fn missing_objects_exit_3() {
    let s = Session::new();
    let h = "0".repeat(64);
    assert_eq!(s.call(&["replay", &h]).0, EXIT_NOT_FOUND);
    assert_eq!(s.call(&["verify", &h, "--rules", &testdata("grasp.rules")]).0, EXIT_NOT_FOUND);
    assert_eq!(s.call(&["diff", &h]).0, EXIT_NOT_FOUND);
    assert_eq!(s.call(&["query", &format!("events in {h}")]).0, EXIT_NOT_FOUND);
}

#[test]
fn corruption_exits_4() {
    let s = Session::new();
    let h = s.run("lab.scene", 1);
    let (code, out, _) = s.call(&["verify", &h, "--rules", &testdata("grasp.rules")]);
    assert_eq!(code, EXIT_OK, "{out}");
    let (code, out, _) = s.call(&["store", "verify"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.ends_with("3 objects, 0 problems\n"), "{out}");

    let path = s.store.join("objects").join(&h[..2]).join(&h[2..]);
    let mut bytes = fs::read(&path).unwrap();
    bytes[10] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let (code, out, _) = s.call(&["store", "verify"]);
    assert_eq!(code, EXIT_INTEGRITY);
    assert!(out.contains(&h), "{out}");
    assert_eq!(s.call(&["replay", &h]).0, EXIT_INTEGRITY);
}

#[test]
fn diff_reports_identity_and_seed_changes() {
    let s = Session::new();
    let h = s.run("lab.scene", 1);
    let (code, out, _) = s.call(&["diff", &h]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("identical_bytes"));
    let (code, out, _) = s.call(&["diff", &h, "--seed", "8"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("semantic_match"));
}

#[test]
fn query_reads_stdin() {
    let s = Session::new();
    let h = s.run("lab.scene", 1);
    let text = "events in all where event_type == \"grasp\"";
    let (code, from_arg, _) = s.call(&["query", text]);
    assert_eq!(code, EXIT_OK);
    let (code, from_stdin, _) = s.call_with_input(&["query"], text);
    assert_eq!(code, EXIT_OK);
    assert_eq!(from_arg, from_stdin);
    let (_, dash, _) = s.call_with_input(&["query", "-"], text);
    assert_eq!(dash, from_arg);
    let (code, tsv, _) = s.call_with_input(&["query", "--tsv"], text);
    assert_eq!(code, EXIT_OK);
    assert_eq!(tsv, format!("episode\tannotation\tevent_type\toutcome\n{h}\ta3\tgrasp\tsucceeded\n"));
}

#[test]
fn store_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("env-store");
    let out = Command::new(env!("CARGO_BIN_EXE_neemtrace"))
        .env("TRACE_STORE_DIR", &store)
        .args(["run", "--scene", &testdata("lab.scene"), "--plan", &testdata("pour.plan"), "--seed", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let h = String::from_utf8(out.stdout).unwrap();
    assert!(store.join("objects").join(&h[..2]).join(&h.trim()[2..]).exists());
    let status = Command::new(env!("CARGO_BIN_EXE_neemtrace")).arg("bogus").output().unwrap().status;
    assert_eq!(status.code(), Some(EXIT_USAGE));
}

#[test]
fn help_exits_0() {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(dispatch(["neemtrace", "--help"], &mut out, &mut err), EXIT_OK);
    assert!(String::from_utf8(out).unwrap().contains("query"));
}
