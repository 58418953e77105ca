mod common;

use serde_json::{json, Value};

use common::{client, empty_mask, spawn_server, toy_workspace, wait_job};

#[test]
fn prompts_lists_the_catalog() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let resp = client().get(format!("{base}/prompts")).send().unwrap();
    assert_eq!(resp.status(), 200);
    let items: Vec<Value> = resp.json().unwrap();
    assert_eq!(items.len(), 7);
    assert_eq!(items[0]["subject_word"], "road-chicane0");
    assert!(items.iter().all(|p| p["full_prompt"].as_str().unwrap().starts_with("photo of road-")));
}

#[test]
fn inpaint_rejects_out_of_range_cfg() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let c = client();
    let mask = empty_mask(&c, &base, "toy-0000");
    let resp = c
        .post(format!("{base}/inpaint"))
        .json(&json!({"image_id": "toy-0000", "mask_id": mask, "cfg_scale": 31}))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().unwrap();
    assert_eq!(body["error"]["code"], "INVALID_REQUEST");
    assert!(body["error"]["message"].as_str().unwrap().contains("[0, 30]"));

    let nested = c
        .post(format!("{base}/inpaint"))
        .json(&json!({"image_id": "toy-0000", "mask_id": mask, "params": {"denoise_strength": 1.5}}))
        .send()
        .unwrap();
    assert_eq!(nested.status(), 400);
    let missing = c.post(format!("{base}/inpaint")).json(&json!({"mask_id": mask})).send().unwrap();
    assert_eq!(missing.status(), 400);
}

#[test]
fn unknown_ids_are_404() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let c = client();
    for path in [
        "images/nope",
        "images/nope/cam",
        "masks/nope",
        "jobs/job-nope",
        "sessions/job-nope",
        "saliency/nope",
    ] {
        assert_eq!(c.get(format!("{base}/{path}")).send().unwrap().status(), 404, "{path}");
    }
    let resp = c
        .post(format!("{base}/sessions/job-nope/select"))
        .json(&json!({"candidate_id": "c0"}))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 404);
    let resp = c
        .post(format!("{base}/inpaint"))
        .json(&json!({"image_id": "toy-0000", "mask_id": "no-such-mask"}))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 404);
}

#[test]
fn images_are_listed_with_probabilities() {
    let (_dir, ws) = toy_workspace(10);
    let base = spawn_server(ws);
    let page: Value = client()
        .get(format!("{base}/images?label=hotspot&per_page=3&page=2"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(page["total"], 5);
    let items = page["items"].as_array().unwrap();
    assert_eq!(items.len(), 2);
    for item in items {
        assert_eq!(item["label"], "hotspot");
        let p = item["p_hotspot"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    let bad = client().get(format!("{base}/images?label=purple")).send().unwrap();
    assert_eq!(bad.status(), 400);
}

#[test]
fn scribble_mask_round_trips() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let c = client();
    let scribble = json!({"strokes": [
        {"points": [[10.0, 10.0], [40.0, 20.0]], "radius": 3.0, "mode": "paint"},
        {"points": [[25.0, 15.0]], "radius": 2.0, "mode": "erase"}
    ]});
    let first = c.post(format!("{base}/images/toy-0001/mask")).json(&scribble).send().unwrap();
    assert_eq!(first.status(), 201);
    let first: Value = first.json().unwrap();
    let second: Value = c
        .post(format!("{base}/images/toy-0001/mask"))
        .json(&scribble)
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(first["mask_id"], second["mask_id"]);

    let set: saferoad::maskkit::ScribbleSet = serde_json::from_value(scribble).unwrap();
    let local = saferoad::maskkit::rasterize_scribbles(&set, 64, 64);
    let png = c
        .get(format!("{base}/masks/{}", first["mask_id"].as_str().unwrap()))
        .send()
        .unwrap()
        .bytes()
        .unwrap();
    let served = saferoad::maskkit::BinaryMask::from_png(&png, saferoad::maskkit::Polarity::Change).unwrap();
    assert_eq!(served, local);
    assert_eq!(first["area"], local.area());

    let bad = c
        .post(format!("{base}/images/toy-0001/mask"))
        .json(&json!({"strokes": [{"points": [[1.0, 1.0]], "radius": 0.0}]}))
        .send()
        .unwrap();
    assert_eq!(bad.status(), 400);
    let body: Value = bad.json().unwrap();
    assert_eq!(body["error"]["code"], "INVALID_SCRIBBLE");
}

#[test]
fn selecting_an_unchanged_candidate_reports_zero_change() {
    let (_dir, ws) = toy_workspace(4);
    let root = ws.root().to_path_buf();
    let base = spawn_server(ws);
    let c = client();
    let mask = empty_mask(&c, &base, "toy-0000");
    let submitted = c
        .post(format!("{base}/inpaint"))
        .json(&json!({"image_id": "toy-0000", "mask_id": mask, "seed": 5, "n_candidates": 2}))
        .send()
        .unwrap();
    assert_eq!(submitted.status(), 202);
    let submitted: Value = submitted.json().unwrap();
    let job_id = submitted["job_id"].as_str().unwrap().to_string();
    assert_eq!(submitted["session_id"], job_id);
    let job = wait_job(&c, &base, &job_id);
    assert_eq!(job["state"], "done", "{job}");

    let candidates: Value = c.get(format!("{base}/jobs/{job_id}/candidates")).send().unwrap().json().unwrap();
    assert_eq!(candidates["candidates"].as_array().unwrap().len(), 2);
    let original = image::open(root.join("images/toy/toy-0000.png")).unwrap().to_rgb8();
    let png = c.get(format!("{base}/jobs/{job_id}/candidates/c1")).send().unwrap().bytes().unwrap();
    assert_eq!(image::load_from_memory(&png).unwrap().to_rgb8(), original);

    let selected: Value = c
        .post(format!("{base}/sessions/{job_id}/select"))
        .json(&json!({"candidate_id": "c0"}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(selected["p_before"], selected["p_after"]);
    assert_eq!(selected["change_percent"].as_f64(), Some(0.0));

    let report: Value = c.get(format!("{base}/reports/latest")).send().unwrap().json().unwrap();
    assert_eq!(report["scored_sessions"], 1);
    assert_eq!(report["mean_relative_drop_percent"].as_f64(), Some(0.0));
    assert_eq!(report["drop_of_means_percent"].as_f64(), Some(0.0));
    assert!(root.join("reports/latest.csv").is_file());

    let unknown = c
        .post(format!("{base}/sessions/{job_id}/select"))
        .json(&json!({"candidate_id": "c9"}))
        .send()
        .unwrap();
    assert_eq!(unknown.status(), 404);
}

#[test]
fn report_without_sessions_is_not_found() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let resp = client().get(format!("{base}/reports/latest")).send().unwrap();
    assert_eq!(resp.status(), 404);
    let body: Value = resp.json().unwrap();
    assert_eq!(body["error"]["code"], "NO_SCORED_SESSIONS");
}

#[test]
fn idempotency_key_replays_the_first_response() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let c = client();
    let mask = empty_mask(&c, &base, "toy-0002");
    let body = json!({"image_id": "toy-0002", "mask_id": mask, "n_candidates": 1});
    let send = || {
        c.post(format!("{base}/inpaint"))
            .header("Idempotency-Key", "retry-1")
            .json(&body)
            .send()
            .unwrap()
    };
    let first = send();
    let second = send();
    assert_eq!(first.status(), 202);
    assert_eq!(second.status(), 202);
    assert!(second.headers().contains_key("idempotent-replay"));
    let a: Value = first.json().unwrap();
    let b: Value = second.json().unwrap();
    assert_eq!(a["job_id"], b["job_id"]);
    let jobs: Vec<Value> = c.get(format!("{base}/jobs")).send().unwrap().json().unwrap();
    assert_eq!(jobs.len(), 1);
}

#[test]
fn cam_and_saliency_endpoints() {
    let (_dir, ws) = toy_workspace(4);
    let base = spawn_server(ws);
    let c = client();
    let cam = c.get(format!("{base}/images/toy-0000/cam?method=gradcam&threshold=0.5")).send().unwrap();
    assert_eq!(cam.status(), 200);
    let cam: Value = cam.json().unwrap();
    let mask_id = cam["mask_id"].as_str().unwrap();
    assert_eq!(c.get(format!("{base}/masks/{mask_id}")).send().unwrap().status(), 200);
    assert_eq!((cam["width"].as_u64(), cam["height"].as_u64()), (Some(64), Some(64)));

    let bad = c.get(format!("{base}/images/toy-0000/cam?threshold=1.5")).send().unwrap();
    assert_eq!(bad.status(), 400);
    let bad = c.get(format!("{base}/images/toy-0000/cam?method=lime")).send().unwrap();
    assert_eq!(bad.status(), 400);

    let sal = c.get(format!("{base}/saliency/toy-0000")).send().unwrap();
    assert_eq!(sal.status(), 200);
    let sal: Value = sal.json().unwrap();
    assert_eq!(sal["source"], "builtin_baseline");
    if let Some(r) = sal["ratio_percent"].as_f64() {
        assert!((0.0..=100.0).contains(&r));
    }
}

#[test]
fn failed_backend_fails_the_job_and_blocks_selection() {
    let (_dir, mut ws) = toy_workspace(4);
    // Nothing listens on port 9 of localhost.
    ws.config.inpaint.backend_url = Some("http://127.0.0.1:9".into());
    ws.config.inpaint.timeout_secs = 5;
    ws.save_config().unwrap();
    let base = spawn_server(ws);
    let c = client();
    let mask = empty_mask(&c, &base, "toy-0000");
    let job: Value = c
        .post(format!("{base}/inpaint"))
        .json(&json!({"image_id": "toy-0000", "mask_id": mask, "n_candidates": 1}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let job_id = job["job_id"].as_str().unwrap();
    let done = wait_job(&c, &base, job_id);
    assert_eq!(done["state"], "failed");
    assert!(done["error"].as_str().unwrap().contains("unavailable"));
    let select = c
        .post(format!("{base}/sessions/{job_id}/select"))
        .json(&json!({"candidate_id": "c0"}))
        .send()
        .unwrap();
    assert_eq!(select.status(), 409);
    assert_eq!(c.get(format!("{base}/jobs/{job_id}/candidates")).send().unwrap().status(), 409);
}

#[test]
fn restart_keeps_sessions_and_job_results() {
    let (_dir, ws) = toy_workspace(4);
    let root = ws.root().to_path_buf();
    let base = spawn_server(ws);
    let c = client();
    let mask = empty_mask(&c, &base, "toy-0000");
    let job: Value = c
        .post(format!("{base}/inpaint"))
        .json(&json!({"image_id": "toy-0000", "mask_id": mask, "n_candidates": 1}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let job_id = job["job_id"].as_str().unwrap().to_string();
    wait_job(&c, &base, &job_id);
    let selected = c
        .post(format!("{base}/sessions/{job_id}/select"))
        .json(&json!({"candidate_id": "c0"}))
        .send()
        .unwrap();
    assert_eq!(selected.status(), 200);

    let again = spawn_server(saferoad_gateway::Workspace::open(&root).unwrap());
    let session: Value = c.get(format!("{again}/sessions/{job_id}")).send().unwrap().json().unwrap();
    assert_eq!(session["chosen_candidate"], "c0");
    assert!(session["p_after"].is_number());
    let job: Value = c.get(format!("{again}/jobs/{job_id}")).send().unwrap().json().unwrap();
    assert_eq!(job["state"], "done");
    assert_eq!(c.get(format!("{again}/jobs/{job_id}/candidates/c0")).send().unwrap().status(), 200);
}
