//! Two annotators judging 100 sampled tasks through the HTTP API.

use std::collections::HashMap;
use std::sync::Arc;

use semsense::annotation::{cohens_kappa, AnnotationServer, AnnotationService, JudgmentStore};
use semsense::pipeline::{selftest, Pipeline, RunConfig};
use serde_json::{json, Value};

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, String) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
}

fn post(url: &str, body: Value) -> (u16, Value) {
    let mut r = agent().post(url).send_json(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

/// Deterministic judgment script: annotators agree except on every seventh task.
fn verdict(annotator: usize, i: usize) -> bool {
    let base = !i.is_multiple_of(5);
    if i % 7 == 3 && annotator == 1 {
        !base
    } else {
        base
    }
}

#[test]
fn scripted_session_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::load(&selftest::write_fixture(dir.path()).unwrap()).unwrap();
    config.annotation.sample = 100;
    let pipeline = Pipeline::new(config.clone()).unwrap();
    pipeline.run_all().unwrap();
    let tasks = pipeline.annotation_tasks().unwrap();
    assert_eq!(tasks.len(), 100);
    assert_eq!(pipeline.annotation_tasks().unwrap(), tasks);

    let annotators = config.annotation.annotators.clone();
    let journal = config.journal_path();
    let start = || {
        let service = AnnotationService::new(tasks.clone(), JudgmentStore::open(&journal).unwrap(), &annotators).unwrap();
        AnnotationServer::bind("127.0.0.1:0", Arc::new(service)).unwrap()
    };

    let mut server = start();
    let submit = |url: &str, a: usize, i: usize, equivalent: bool| {
        let (status, body) = post(
            &format!("{url}/api/judgments"),
            json!({"task_id": tasks[i].task_id, "annotator": annotators[a], "equivalent": equivalent}),
        );
        assert_eq!((status, body), (200, json!({"ok": true})));
    };

    for i in 0..50 {
        for a in 0..2 {
            submit(&server.url(), a, i, verdict(a, i));
        }
    }
    // a wrong first answer, replaced by resubmission
    submit(&server.url(), 0, 50, !verdict(0, 50));
    submit(&server.url(), 0, 50, verdict(0, 50));
    let (status, _) = get(&format!("{}/api/agreement", server.url()));
    assert_eq!(status, 409);

    // restart mid-session: state comes back from the journal
    drop(server);
    server = start();
    let (_, listing) = get(&format!("{}/api/tasks?annotator={}", server.url(), annotators[0]));
    let listing: Value = serde_json::from_str(&listing).unwrap();
    let judged = listing["tasks"].as_array().unwrap().iter().filter(|t| t["judged"] == true).count();
    assert_eq!(judged, 51);
    let order: Vec<&str> = listing["tasks"].as_array().unwrap().iter().map(|t| t["task_id"].as_str().unwrap()).collect();
    assert_eq!(order, tasks.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>());

    for i in 50..100 {
        for a in 0..2 {
            if !(a == 0 && i == 50) {
                submit(&server.url(), a, i, verdict(a, i));
            }
        }
    }

    let (status, agreement) = get(&format!("{}/api/agreement", server.url()));
    assert_eq!(status, 200);
    let agreement: Value = serde_json::from_str(&agreement).unwrap();
    assert_eq!(agreement["n"], 100);

    let (status, csv_text) = get(&format!("{}/api/export", server.url()));
    assert_eq!(status, 200);
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut by_task: HashMap<String, [Option<bool>; 2]> = HashMap::new();
    for row in reader.records() {
        let row = row.unwrap();
        let a = annotators.iter().position(|x| x == &row[1]).unwrap();
        by_task.entry(row[0].to_string()).or_default()[a] = Some(&row[2] == "true");
    }
    assert_eq!(by_task.len(), 100);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for t in &tasks {
        let [a, b] = by_task[&t.task_id];
        x.push(a.unwrap());
        y.push(b.unwrap());
    }
    let expected: Vec<bool> = (0..100).map(|i| verdict(0, i)).collect();
    assert_eq!(x, expected);
    let kappa = cohens_kappa(&x, &y).unwrap();
    assert_eq!(agreement["kappa"].as_f64().unwrap(), kappa);
    let agree = x.iter().zip(&y).filter(|(a, b)| a == b).count() as f64;
    assert_eq!(agreement["percent_agreement"].as_f64().unwrap(), agree);
}
