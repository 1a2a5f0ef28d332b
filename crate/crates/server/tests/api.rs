use std::time::Duration;

use serde_json::{json, Value};

async fn start() -> String {
    let addr = stnet_server::spawn(([127, 0, 0, 1], 0).into()).await.unwrap();
    format!("http://{addr}")
}

async fn wait(http: &reqwest::Client, base: &str, id: u64) -> Value {
    for _ in 0..600 {
        let s: Value = http
            .get(format!("{base}/v1/jobs/{id}"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if s["state"] == "succeeded" || s["state"] == "failed" {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

async fn submit(http: &reqwest::Client, base: &str, body: Value) -> u64 {
    let resp = http.post(format!("{base}/v1/jobs")).json(&body).send().await.unwrap();
    assert_eq!(resp.status(), 202);
    resp.json::<Value>().await.unwrap()["id"].as_u64().unwrap()
}

#[tokio::test]
async fn health_and_config() {
    let base = start().await;
    let http = reqwest::Client::new();
    let h: Value = http
        .get(format!("{base}/v1/health"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(h["status"], "ok");
    let c: Value = http
        .get(format!("{base}/v1/config?preset=paper"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(c["config"]["net"]["channels"], 256);
    assert!(c["text"].as_str().unwrap().contains("lr=0.00005"));
}

#[tokio::test]
async fn oracle_job_runs_to_success() {
    let base = start().await;
    let http = reqwest::Client::new();
    let id = submit(&http, &base, json!({"op": "oracle", "seed": 3})).await;
    let s = wait(&http, &base, id).await;
    assert_eq!(s["state"], "succeeded", "{s}");
    let checks = s["output"]["checks"].as_array().unwrap();
    assert!(!checks.is_empty() && checks.iter().all(|c| c["passed"] == true));
    assert_eq!(s["log"].as_array().unwrap().len(), checks.len());
}

#[tokio::test]
async fn unknown_job_and_bad_body() {
    let base = start().await;
    let http = reqwest::Client::new();
    let resp = http.get(format!("{base}/v1/jobs/999")).send().await.unwrap();
    assert_eq!(resp.status(), 404);
    assert!(resp.json::<Value>().await.unwrap()["error"]
        .as_str()
        .unwrap()
        .contains("999"));
    let resp = http
        .post(format!("{base}/v1/jobs"))
        .json(&json!({"op": "launch"}))
        .send()
        .await
        .unwrap();
    assert!(resp.status().is_client_error());
}

#[tokio::test]
async fn failures_are_reported_on_the_job() {
    let base = start().await;
    let http = reqwest::Client::new();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let id = submit(
        &http,
        &base,
        json!({"op": "synth", "out": data, "seed": 1, "videos": 2, "height": 16, "width": 16, "frames": 8, "difficulty": 0.3}),
    )
    .await;
    assert_eq!(wait(&http, &base, id).await["output"]["videos"], 2);

    let missing = dir.path().join("nope.stn1");
    let config = json!({"preset": "toy", "text": "", "overrides": [["data_dir", data]]});
    let id = submit(
        &http,
        &base,
        json!({"op": "eval", "config": config, "checkpoint": missing}),
    )
    .await;
    let s = wait(&http, &base, id).await;
    assert_eq!(s["state"], "failed");
    assert!(s["error"].as_str().unwrap().contains("nope.stn1"), "{s}");
}
