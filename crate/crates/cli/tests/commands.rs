use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use evoflow_cli::parse_profiles;

fn evoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evoflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = evoflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A 120-row breastcancer excerpt plus a tiny config.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let src = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../datasets/breastcancer.csv")).unwrap();
    let data = dir.join("bc.csv");
    fs::write(&data, src.lines().take(121).collect::<Vec<_>>().join("\n")).unwrap();
    let config = dir.join("tiny.conf");
    fs::write(&config, "# desk-sized\npopulation_size = 8\nmax_generations = 6\n").unwrap();
    (data, config)
}

fn result_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("results")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn baseline_is_deterministic_and_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = fixture(tmp.path());
    let mut keys = Vec::new();
    for out in ["a", "b"] {
        let out = tmp.path().join(out);
        let text = ok(&[
            "run-baseline", "--dataset", data.to_str().unwrap(), "--config", config.to_str().unwrap(), "--seed", "3", "--clock", "constant",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(text.contains("fitness"));
        let files = result_files(&out);
        assert_eq!(files.len(), 1);
        let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        let f = r["fitness"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
        assert_eq!(r["timeline"].as_array().unwrap().len(), 7);
        assert_eq!(r["profile"], "baseline");
        keys.push(r["workflow"]["canonical_key"].as_str().unwrap().to_string());
        let log = out.join("logs").join("bc__baseline__s3.jsonl");
        assert_eq!(fs::read_to_string(log).unwrap().lines().count(), 8 * 7);
    }
    assert_eq!(keys[0], keys[1]);
}

#[test]
fn sweep_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = fixture(tmp.path());
    let out = tmp.path().join("sweep");
    let text = ok(&[
        "run-sweep", "--datasets", data.to_str().unwrap(), "--profiles", "f0.9_t0.5_aThird,t1_a1", "--repeats", "2", "--seed", "5",
        "--config", config.to_str().unwrap(), "--workers", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(text.contains("6 runs, 0 failed"), "{text}");
    assert_eq!(result_files(&out).len(), 6);
    let speedup = fs::read_to_string(out.join("speedup.csv")).unwrap();
    assert_eq!(speedup.lines().count(), 3);
    let rep = tmp.path().join("rep");
    let again = ok(&["report", "--in", out.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(text.starts_with(&again), "{again}");
    assert_eq!(fs::read_to_string(rep.join("speedup.csv")).unwrap(), speedup);
    assert_eq!(fs::read_to_string(rep.join("runs.csv")).unwrap().lines().count(), 7);
}

#[test]
fn profile_lists() {
    assert_eq!(parse_profiles("all").unwrap().len(), 16);
    let two = parse_profiles("f0.9_t0.5_aThird,t1_a1").unwrap();
    assert_eq!(two.iter().map(|p| p.id()).collect::<Vec<_>>(), vec!["f0.9_t0.5_a12", "t1_a1"]);
    assert!(parse_profiles("f0.7_a1").is_err());
    assert!(parse_profiles(",").is_err());
}

#[test]
fn config_files_follow_the_generation_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, config) = fixture(tmp.path());
    let c = evoflow_cli::load_config(Some(&config)).unwrap();
    assert_eq!((c.population_size, c.max_generations, c.first_interaction_generation), (8, 6, 2));
    let pinned = tmp.path().join("pinned.conf");
    fs::write(&pinned, "max_generations=6\nfirst_interaction_generation=5\nseed=9\n").unwrap();
    let c = evoflow_cli::load_config(Some(&pinned)).unwrap();
    assert_eq!((c.first_interaction_generation, c.seed), (5, 9));
    assert_eq!(evoflow_cli::load_config(None).unwrap().first_interaction_generation, 15);
    fs::write(&pinned, "max_generations=6\nfirst_interaction_generation=9\n").unwrap();
    assert!(evoflow_cli::load_config(Some(&pinned)).is_err());
}

#[test]
fn bad_inputs_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, _) = fixture(tmp.path());
    let out = tmp.path().join("o");
    let missing = evoflow(&["run-baseline", "--dataset", "/nonexistent.csv", "--out", out.to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "population_size = 1\n").unwrap();
    let r = evoflow(&["run-baseline", "--dataset", data.to_str().unwrap(), "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("population"));
    let r = evoflow(&["run-sweep", "--datasets", data.to_str().unwrap(), "--profiles", "nope", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    let r = evoflow(&["report", "--in", tmp.path().join("empty").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
}

#[test]
fn pre_split_sibling_is_used() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = fixture(tmp.path());
    let src = fs::read_to_string(&data).unwrap();
    fs::write(tmp.path().join("bc_test.csv"), src.lines().take(11).collect::<Vec<_>>().join("\n")).unwrap();
    let ds = evoflow_cli::open_dataset(&data, 0).unwrap();
    assert_eq!((ds.train.n_rows(), ds.test.n_rows()), (120, 10));
    let out = tmp.path().join("o");
    ok(&["run-baseline", "--dataset", data.to_str().unwrap(), "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
}

fn http(port: u16, request: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.write_all(request.as_bytes()).ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_http() {
    let tmp = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_evoflow"))
        .args(["serve", "--port", &port.to_string(), "--workdir", tmp.path().to_str().unwrap()])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let req = "GET /sessions/ghost/status HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n";
    let mut reply = None;
    for _ in 0..200 {
        reply = http(port, req);
        if reply.is_some() {
            break;
        }
        thread::sleep(Duration::from_millis(25));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server never answered");
    assert!(reply.starts_with("HTTP/1.1 404"), "{reply}");
    for sub in ["datasets", "grammars", "sessions"] {
        assert!(tmp.path().join(sub).is_dir());
    }
}
