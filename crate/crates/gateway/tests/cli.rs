use std::fmt::Write as _;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_saferoad");

fn saferoad(ws: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("INPAINT_BACKEND_URL")
        .env_remove("SALIENCY_BACKEND_URL")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    line["error"]["code"].as_str().unwrap().to_string()
}

/// Two 8-point blobs about 5 m across and 1 km apart, plus 4 isolated points.
fn blob_fixture() -> String {
    let m_lat = 1.0 / 111_195.0;
    let m_lon = m_lat / 40.7f64.to_radians().cos();
    let mut csv = String::from("CRASH DATE,CRASH TIME,LATITUDE,LONGITUDE,COLLISION_ID\n");
    let mut id = 0;
    let mut row = |csv: &mut String, lat: f64, lon: f64| {
        id += 1;
        writeln!(csv, "06/01/2023,8:15,{lat:.9},{lon:.9},{id}").unwrap();
    };
    for (lat0, lon0) in [(40.7, -73.95), (40.7 + 1000.0 * m_lat, -73.95)] {
        for i in 0..8 {
            let (dx, dy) = ((i % 4) as f64 * 1.6, (i / 4) as f64 * 1.6);
            row(&mut csv, lat0 + dy * m_lat, lon0 + dx * m_lon);
        }
    }
    for k in 0..4 {
        row(&mut csv, 40.7 + 500.0 * m_lat, -73.95 + (400.0 + 500.0 * k as f64) * m_lon);
    }
    csv
}

#[test]
fn cluster_fixture_yields_two_features() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    stdout_json(&saferoad(ws, &["init"]));
    let csv = ws.join("events.csv");
    std::fs::write(&csv, blob_fixture()).unwrap();
    let ingest = stdout_json(&saferoad(ws, &["ingest", csv.to_str().unwrap()]));
    assert_eq!(ingest["events"], 20);
    let summary = stdout_json(&saferoad(ws, &["cluster", "--eps", "50", "--min-samples", "4"]));
    assert_eq!(summary["clusters"], 2);
    assert_eq!(summary["noise"], 4);
    let geojson: Value = serde_json::from_slice(&std::fs::read(ws.join("clusters/clusters.geojson")).unwrap()).unwrap();
    assert_eq!(geojson["features"].as_array().unwrap().len(), 2);
}

#[test]
fn report_without_sessions_fails_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = saferoad(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "NO_SCORED_SESSIONS");
}

#[test]
fn errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = saferoad(dir.path(), &["cluster"]);
    assert_eq!(error_code(&out), "NOT_FOUND");
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
    let out = saferoad(dir.path(), &["inpaint", "--image", "x", "--mask", "y", "--cfg-scale", "31"]);
    assert_eq!(error_code(&out), "INVALID_REQUEST");
    let out = saferoad(dir.path(), &["train"]);
    assert_eq!(error_code(&out), "NOT_FOUND");
}

#[test]
fn toy_pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    let toy = stdout_json(&saferoad(ws, &["toy-workspace", "--n", "40"]));
    assert_eq!(toy["images"], 40);
    let trained = stdout_json(&saferoad(ws, &["train", "--epochs", "2"]));
    assert!(trained["accuracy"].as_f64().unwrap() >= 0.0);
    let cam = stdout_json(&saferoad(ws, &["cam", "--image", "toy-0000", "--method", "gradcam"]));
    let mask_id = cam["masks"][0]["mask_id"].as_str().unwrap().to_string();
    let job = stdout_json(&saferoad(
        ws,
        &["inpaint", "--image", "toy-0000", "--mask", &mask_id, "--design", "roundabout", "--seed", "3", "--candidates", "2"],
    ));
    assert_eq!(job["state"], "done");
    let session_id = job["session_id"].as_str().unwrap();
    let selected = stdout_json(&saferoad(ws, &["select", "--session", session_id, "--candidate", "c1"]));
    assert!(selected["p_after"].is_number());
    let report = stdout_json(&saferoad(ws, &["report"]));
    assert_eq!(report["sessions"], 1);
    let sal = stdout_json(&saferoad(ws, &["saliency"]));
    assert!(sal["images"].as_u64().unwrap() + sal["excluded"].as_u64().unwrap() == 20);
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_answers_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = KillOnDrop(
        Command::new(BIN)
            .arg("--workspace")
            .arg(dir.path())
            .args(["serve", "--port", &port.to_string()])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let url = format!("http://127.0.0.1:{port}/api/v1/prompts");
    let start = Instant::now();
    let resp = loop {
        match reqwest::blocking::get(&url) {
            Ok(r) => break r,
            Err(_) if start.elapsed() < Duration::from_secs(20) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("server never came up: {e}"),
        }
    };
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.json::<Vec<Value>>().unwrap().len(), 7);
}
