#![allow(dead_code)]

use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

use saferoad::classifier::{build_model, save_checkpoint};
use saferoad_gateway::{pipeline, Workspace};

/// Toy workspace with `n` images and an untrained (randomly initialised)
/// model checkpoint.
pub fn toy_workspace(n: usize) -> (TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::init(dir.path()).unwrap();
    pipeline::toy_workspace(&ws, n, 7).unwrap();
    let model = build_model::<f32>(&ws.config.model_spec()).unwrap();
    save_checkpoint(&model, &ws.model_path(), None, None).unwrap();
    (dir, ws)
}

/// Serves `ws` on an ephemeral port from a background thread and returns
/// the API base URL.
pub fn spawn_server(ws: Workspace) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            saferoad_gateway::api::serve_on(ws, listener).await.unwrap();
        });
    });
    format!("http://{addr}/api/v1")
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .unwrap()
}

/// Polls a job until it leaves queued/running.
pub fn wait_job(client: &reqwest::blocking::Client, base: &str, job_id: &str) -> Value {
    let start = Instant::now();
    loop {
        let job: Value = client.get(format!("{base}/jobs/{job_id}")).send().unwrap().json().unwrap();
        match job["state"].as_str() {
            Some("done") | Some("failed") => return job,
            _ if start.elapsed() > Duration::from_secs(60) => panic!("job {job_id} did not finish: {job}"),
            _ => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// Empty mask for `image_id` via the scribble endpoint.
pub fn empty_mask(client: &reqwest::blocking::Client, base: &str, image_id: &str) -> String {
    let resp: Value = client
        .post(format!("{base}/images/{image_id}/mask"))
        .json(&serde_json::json!({"strokes": []}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    resp["mask_id"].as_str().unwrap().to_string()
}
