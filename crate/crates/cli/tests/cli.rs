#[path = "../../core/tests/support/stub.rs"]
mod stub;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bami(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bami"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run bami")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn simgen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simgen", "--dims", "320x240", "--elements", "2", "--distractors", "2", "--seed", "5", "--out", "gen"];
    args.extend_from_slice(extra);
    let o = bami(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn http_backend(dir: &Path, endpoint: &str) {
    let toml = format!(
        "[grounding]\nkind = \"http\"\nendpoint = \"{endpoint}\"\nmodel_name = \"m\"\nmax_retries = 0\nretry_backoff_ms = 1\n"
    );
    std::fs::write(dir.join("http.toml"), toml).unwrap();
}

#[test]
fn ground_noiseless_sim_hits_target_center() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &[]);
    let scene: Value = serde_json::from_slice(&std::fs::read(dir.path().join("gen/scene.json")).unwrap()).unwrap();
    let b = &scene["elements"][1]["box"];
    let (x1, y1, x2, y2) = (b[0].as_u64().unwrap(), b[1].as_u64().unwrap(), b[2].as_u64().unwrap(), b[3].as_u64().unwrap());
    for mode in ["baseline", "bami"] {
        let o = bami(
            &["ground", "--image", "gen/screenshot.png", "--query", "target-1", "--backend-config", "gen/backends.toml", "--mode", mode, "--out", mode],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v = stdout_json(&o);
        assert_eq!(v["point"]["x"], (x1 + x2) / 2, "{mode}");
        assert_eq!(v["point"]["y"], (y1 + y2) / 2, "{mode}");
        assert_eq!(v["trace_path"].is_null(), mode == "baseline");
        assert!(dir.path().join(mode).join("manifest.json").is_file());
    }
    let trace: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bami/trace.json")).unwrap()).unwrap();
    assert_eq!(trace["iterations"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_code_contract() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &[]);
    let d = dir.path();

    let o = bami(&["ground", "--image", "gen/screenshot.png", "--query", "target-0", "--backend-config", "gen/backends.toml", "--lambda", "1.5"], d);
    assert_eq!(code(&o), 64);

    let o = bami(&["bench", "--mode", "bami", "--backend-config", "gen/backends.toml"], d);
    assert_eq!(code(&o), 64);

    let o = bami(&["mpd", "--image", "gen/screenshot.png", "--query", "target-0", "--backend-config", "gen/backends.toml", "--grid", "0x4"], d);
    assert_eq!(code(&o), 64);

    let o = bami(&["ground", "--image", "gen/screenshot.png"], d);
    assert_eq!(code(&o), 64);

    let o = bami(&["--help"], d);
    assert_eq!(code(&o), 0);
    let o = bami(&["--version"], d);
    assert_eq!(code(&o), 0);

    std::fs::write(d.join("bad.json"), r#"[{"id": "a", "image": "x.png", "instruction": "q", "bbox": [9, 0, 1, 1], "data_type": "text", "group": "g"}]"#).unwrap();
    let o = bami(&["bench", "--dataset", "bad.json", "--mode", "baseline", "--backend-config", "gen/backends.toml", "--out", "r"], d);
    assert_eq!(code(&o), 65);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 0"));

    let o = bami(&["bench", "--dataset", "missing.json", "--mode", "baseline", "--backend-config", "gen/backends.toml", "--out", "r"], d);
    assert_eq!(code(&o), 65);

    let o = bami(&["ground", "--image", "nope.png", "--query", "q", "--backend-config", "gen/backends.toml"], d);
    assert_eq!(code(&o), 65);

    std::fs::write(d.join("broken.toml"), "[grounding]\nkind = \"quantum\"\n").unwrap();
    let o = bami(&["ground", "--image", "gen/screenshot.png", "--query", "q", "--backend-config", "broken.toml"], d);
    assert_eq!(code(&o), 64);
}

#[test]
fn unreachable_endpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &[]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    http_backend(dir.path(), &format!("http://127.0.0.1:{port}/v1"));
    let o = bami(&["ground", "--image", "gen/screenshot.png", "--query", "q", "--backend-config", "http.toml", "--mode", "baseline", "--out", "r"], dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&std::fs::read(dir.path().join("r/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["exit_code"], 2);
}

#[test]
fn unparseable_reply_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &[]);
    let server = stub::Stub::start(vec![(200, stub::chat_reply("Sorry, I can't see it."))]);
    http_backend(dir.path(), &server.endpoint);
    let o = bami(&["ground", "--image", "gen/screenshot.png", "--query", "q", "--backend-config", "http.toml", "--mode", "baseline", "--out", "r"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_all_failures_is_nonzero_but_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &[]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    http_backend(dir.path(), &format!("http://127.0.0.1:{port}/v1"));
    let o = bami(&["bench", "--dataset", "gen/dataset.json", "--mode", "baseline", "--backend-config", "http.toml", "--out", "r"], dir.path());
    assert_eq!(code(&o), 2);
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["n"], 2);
    assert_eq!(report["overall"]["n_correct"], 0);
}

#[test]
fn bench_is_deterministic_and_compare_prints_deltas() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &["--scenes", "4", "--sigma", "0.04", "--ambig", "0.4"]);
    let d = dir.path();
    for (out, mode) in [("a", "baseline"), ("b", "bami"), ("c", "bami")] {
        let o = bami(&["bench", "--dataset", "gen/dataset.json", "--mode", mode, "--backend-config", "gen/backends.toml", "--out", out, "--seed", "3"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["report.json", "report.txt", "outcomes.jsonl", "manifest.json"] {
            assert!(d.join(out).join(f).is_file(), "{out}/{f}");
        }
    }
    assert_eq!(std::fs::read(d.join("b/outcomes.jsonl")).unwrap(), std::fs::read(d.join("c/outcomes.jsonl")).unwrap());
    let ra: Value = serde_json::from_slice(&std::fs::read(d.join("b/report.json")).unwrap()).unwrap();
    let rc: Value = serde_json::from_slice(&std::fs::read(d.join("c/report.json")).unwrap()).unwrap();
    assert_eq!(ra["cells"], rc["cells"]);
    assert_eq!(ra["metadata"]["config_hash"], rc["metadata"]["config_hash"]);

    let o = bami(&["bench", "--compare", "a/report.json", "b/report.json"], d);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[2].starts_with("baseline"));
    assert!(lines[3].starts_with("bami"));
    assert!(lines[4].starts_with("delta"));

    let manifest: Value = serde_json::from_slice(&std::fs::read(d.join("b/manifest.json")).unwrap()).unwrap();
    let dataset = std::fs::read(d.join("gen/dataset.json")).unwrap();
    use sha2::Digest;
    let digest: String = sha2::Sha256::digest(&dataset).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["inputs"][0]["role"], "dataset");
    assert_eq!(manifest["inputs"][0]["sha256"], digest);
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn mpd_defaults_and_degenerate_alpha() {
    let dir = tempfile::tempdir().unwrap();
    simgen(dir.path(), &[]);
    let d = dir.path();
    let o = bami(&["mpd", "--image", "gen/screenshot.png", "--query", "target-0", "--backend-config", "gen/backends.toml", "--out", "m", "--overlay"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&std::fs::read(d.join("m/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["mpd"]["samples"], 300);
    assert_eq!(m["config"]["mpd"]["grid"], serde_json::json!({"rows": 16, "cols": 16}));
    let scatter = std::fs::read_to_string(d.join("m/scatter.csv")).unwrap();
    assert!(scatter.starts_with("k,alpha,x,y\n"));
    let heat = std::fs::read_to_string(d.join("m/heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 256);
    assert!(d.join("m/overlay.png").is_file());

    let o = bami(&["mpd", "--image", "gen/screenshot.png", "--query", "target-0", "--backend-config", "gen/backends.toml", "--out", "z", "--samples", "1", "--alpha", "0:0"], d);
    assert_eq!(code(&o), 0);
    let base = bami(&["ground", "--image", "gen/screenshot.png", "--query", "target-0", "--backend-config", "gen/backends.toml", "--mode", "baseline", "--out", "g"], d);
    let p = stdout_json(&base)["point"].clone();
    let row = std::fs::read_to_string(d.join("z/scatter.csv")).unwrap();
    let fields: Vec<&str> = row.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[2], p["x"].to_string());
    assert_eq!(fields[3], p["y"].to_string());
}

#[test]
fn simgen_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simgen(a.path(), &["--scenes", "2"]);
    simgen(b.path(), &["--scenes", "2"]);
    let mut names: Vec<_> = std::fs::read_dir(a.path().join("gen")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join("gen").join(&n)).unwrap(),
            std::fs::read(b.path().join("gen").join(&n)).unwrap(),
            "{n:?}"
        );
    }
}
