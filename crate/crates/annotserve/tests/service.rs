use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use annotserve::{router, GridPayload, Service, ServiceConfig, Submission, TaskPayload, LATENTS_FILE};
use scancad::benchmark::{build_tasks, read_annotations, CatalogCad};
use scancad::datagen::{
    generate_catalog_cads, generate_dataset, read_catalog, write_catalog, write_pairs, Category, DatasetSpec,
};
use scancad::embedspace::{propose_candidates, write_embeddings_file, Domain, EmbeddingIndex, EmbeddingVector};
use scancad::voxel::{read_grid_file, GridDomain};

const PAIRS: usize = 4;

/// Four pairs, 120 extra CAD models and random proposal latents.
fn fixture(dir: &Path) {
    let mut spec = DatasetSpec::new(PAIRS, 3);
    spec.categories = vec![Category::Table, Category::Chair];
    let pairs = generate_dataset(&spec).unwrap();
    write_pairs(dir, &pairs).unwrap();
    let extra = generate_catalog_cads(120, 3, &[Category::Box, Category::Shelf, Category::Cylinder]);
    let catalog = write_catalog(dir, &pairs, &extra).unwrap();
    let mut index = EmbeddingIndex::new(4);
    for (i, e) in catalog.iter().enumerate() {
        let x = i as f32;
        let v = vec![(x * 0.37).sin(), (x * 1.3).cos(), x * 0.01, (x * 0.11).sin()];
        index.push(EmbeddingVector::new(&e.cad_id, Domain::Cad, &e.category, v)).unwrap();
    }
    write_embeddings_file(dir.join(LATENTS_FILE), &index).unwrap();
}

fn open(dir: &Path, lease: Duration) -> Service {
    let mut cfg = ServiceConfig::new(dir);
    cfg.lease = lease;
    cfg.seed = 11;
    Service::open(cfg).unwrap()
}

async fn spawn(svc: Service) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(svc))).await.unwrap() });
    addr
}

fn answer(task: &TaskPayload, picks: &[usize], who: &str) -> Submission {
    Submission {
        task_id: task.task_id.clone(),
        ranked_selection: picks.iter().map(|&i| task.proposals[i].cad_id.clone()).collect(),
        annotator: who.into(),
    }
}

#[test]
fn tasks_carry_the_deterministic_proposals() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let svc = open(dir.path(), Duration::from_secs(60));
    let latents = scancad::embedspace::read_embeddings_file(dir.path().join(LATENTS_FILE)).unwrap();
    let task = svc.next_task(Some("ann")).unwrap().unwrap();
    assert_eq!(task.task_id, "pair0000_scan#0");
    assert_eq!(task.proposals.len(), 6);
    let ids: Vec<String> = task.proposals.iter().map(|p| p.cad_id.clone()).collect();
    assert_eq!(ids, propose_candidates(&latents, "pair0000_cad", 11).unwrap());
    for p in &task.proposals {
        assert_eq!(p.grid.dims, [32, 32, 32]);
    }
}

#[test]
fn leases_spread_annotators_and_expire() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let svc = open(dir.path(), Duration::from_millis(200));
    let a = svc.next_task(Some("a")).unwrap().unwrap();
    let b = svc.next_task(Some("b")).unwrap().unwrap();
    assert_ne!(a.task_id, b.task_id);
    assert_eq!(svc.next_task(Some("a")).unwrap().unwrap().task_id, a.task_id);
    for who in ["c", "d"] {
        svc.next_task(Some(who)).unwrap().unwrap();
    }
    assert!(svc.next_task(Some("e")).unwrap().is_none());
    std::thread::sleep(Duration::from_millis(300));
    assert_eq!(svc.next_task(Some("e")).unwrap().unwrap().task_id, "pair0000_scan#0");
}

#[test]
fn answered_scans_move_to_the_next_round() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let svc = open(dir.path(), Duration::from_secs(60));
    let mut seen = Vec::new();
    for _ in 0..PAIRS {
        let t = svc.next_task(None).unwrap().unwrap();
        svc.submit(answer(&t, &[0], "a")).unwrap();
        seen.push(t.task_id);
    }
    assert!(seen.iter().all(|t| t.ends_with("#0")));
    let t = svc.next_task(None).unwrap().unwrap();
    assert_eq!(t.task_id, "pair0000_scan#1");
    let stats = svc.stats();
    assert_eq!(stats.total, PAIRS);
    assert_eq!(stats.pending_scans, 0);
    assert_eq!(stats.per_annotator["a"], PAIRS);

    // A restart replays the store.
    drop(svc);
    let svc = open(dir.path(), Duration::from_secs(60));
    assert_eq!(svc.stats().total, PAIRS);
    assert_eq!(svc.next_task(None).unwrap().unwrap().task_id, "pair0000_scan#1");
}

#[test]
fn submissions_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let svc = open(dir.path(), Duration::from_secs(60));
    let t = svc.next_task(None).unwrap().unwrap();
    let mut bad = answer(&t, &[0], "a");
    bad.ranked_selection = vec!["nope".into()];
    assert!(svc.submit(bad).is_err());
    assert!(svc.submit(answer(&t, &[], "a")).is_err());
    assert!(svc.submit(answer(&t, &[0, 1, 2, 3], "a")).is_err());
    assert!(svc.submit(answer(&t, &[1, 1], "a")).is_err());
    let mut unknown = answer(&t, &[0], "a");
    unknown.task_id = "ghost#0".into();
    assert!(matches!(svc.submit(unknown), Err(annotserve::ServiceError::NotFound(_))));
    let rec = svc.submit(answer(&t, &[2, 0], "a")).unwrap();
    assert_eq!(rec.ranked_selection.len(), 2);
    assert!(matches!(svc.submit(answer(&t, &[1], "b")), Err(annotserve::ServiceError::Conflict(_))));
    assert_eq!(read_annotations(dir.path().join("annotations.jsonl")).unwrap(), vec![rec]);
}

#[test]
fn grid_payload_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let svc = open(dir.path(), Duration::from_secs(60));
    for e in read_catalog(dir.path()).unwrap().iter().take(5) {
        let p = svc.grid(&e.cad_id).unwrap();
        let stored = read_grid_file(&e.path).unwrap();
        let decoded = p.decode(stored.object_id(), stored.domain()).unwrap();
        assert_eq!(decoded, stored);
        assert_eq!(decoded.count(), stored.count());
    }
    let bad = GridPayload { dims: [32, 32, 32], occupancy: "AAAA".into() };
    assert!(bad.decode("x", GridDomain::Cad).is_err());
    assert!(svc.grid("missing").is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_contract_with_concurrent_submissions() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let addr = spawn(open(dir.path(), Duration::from_secs(60))).await;
    let base = format!("http://{addr}");
    let client = reqwest::Client::new();

    let task: TaskPayload = client
        .get(format!("{base}/api/task?annotator=a"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let v = client.get(format!("{base}/api/voxels/pair0000_scan")).send().await.unwrap();
    assert_eq!(v.status(), 200);
    let grid: GridPayload = v.json().await.unwrap();
    assert_eq!(grid, task.scan);
    let missing = client.get(format!("{base}/api/voxels/nothing")).send().await.unwrap();
    assert_eq!(missing.status(), 404);

    let mut handles = Vec::new();
    for i in 0..8 {
        let (client, url, body) = (client.clone(), format!("{base}/api/annotation"), answer(&task, &[i % 6], "x"));
        handles.push(tokio::spawn(async move { client.post(url).json(&body).send().await.unwrap().status() }));
    }
    let mut codes = Vec::new();
    for h in handles {
        codes.push(h.await.unwrap().as_u16());
    }
    assert_eq!(codes.iter().filter(|&&c| c == 200).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|&&c| c == 409).count(), 7, "{codes:?}");

    let bad = client
        .post(format!("{base}/api/annotation"))
        .json(&serde_json::json!({"task_id": "pair0001_scan#0", "ranked_selection": ["zzz"], "annotator": "a"}))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 422);

    // Exhaust the queue: four queries, each leased once.
    for who in ["b", "c", "d"] {
        let r = client.get(format!("{base}/api/task?annotator={who}")).send().await.unwrap();
        assert_eq!(r.status(), 200);
    }
    let stats: serde_json::Value = client.get(format!("{base}/api/stats")).send().await.unwrap().json().await.unwrap();
    assert_eq!(stats["total"], 1);

    let records = read_annotations(dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    let catalog: Vec<CatalogCad> = read_catalog(dir.path()).unwrap().iter().map(CatalogCad::from).collect();
    let tasks = build_tasks(&records, &catalog, 5).unwrap();
    let proposed: HashSet<&String> = tasks[0].record.proposed.iter().collect();
    assert!(tasks[0].distractors.iter().all(|d| !proposed.contains(d)));
}
