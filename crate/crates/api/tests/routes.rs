use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use recital_api::{router, AppState, Shared, CURATOR_HEADER, ROUTES};
use recital_core::ingest::Task;
use recital_core::pipeline::run_all;
use recital_core::synth::{generate, SynthParams, TruthTable};
use recital_core::{Config, RecordId, Stage, Store};

const TOKEN: &str = "s3cret";

struct Fixture {
    state: Shared,
    truth: TruthTable,
    _dir: tempfile::TempDir,
}

fn fixture(params: SynthParams) -> Fixture {
    let corpus = generate(&params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.txt");
    std::fs::write(&registry, &corpus.registry).unwrap();
    let config = Config {
        registry: Some(registry),
        curator_token: Some(TOKEN.into()),
        ..Config::default()
    };
    let mut store = Store::in_memory();
    run_all(&mut store, &config, corpus.export.as_slice()).unwrap();
    Fixture {
        state: AppState::new(store, config),
        truth: corpus.truth,
        _dir: dir,
    }
}

fn noisy() -> Fixture {
    fixture(SynthParams {
        seed: 7,
        n_registers: 2,
        pages_per_register: 3,
        marks_per_page: 5,
        char_noise: 0.15,
        jitter: 0.005,
        verify_rate: 0.3,
        ..SynthParams::default()
    })
}

async fn send(state: &Shared, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, body)
}

async fn get(state: &Shared, uri: &str) -> (StatusCode, Value) {
    send(state, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn get_ok(state: &Shared, uri: &str) -> Value {
    let (status, body) = get(state, uri).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {body}");
    body
}

async fn post(state: &Shared, uri: &str, token: Option<&str>, body: Value) -> (StatusCode, Value) {
    let mut req = Request::post(uri).header("content-type", "application/json");
    if let Some(t) = token {
        req = req.header(CURATOR_HEADER, t);
    }
    send(state, req.body(Body::from(body.to_string())).unwrap()).await
}

/// Follows `offset` until `total` items have been read.
async fn all_items(state: &Shared, uri: &str, limit: usize) -> Vec<Value> {
    let sep = if uri.contains('?') { '&' } else { '?' };
    let mut items = Vec::new();
    loop {
        let page = get_ok(state, &format!("{uri}{sep}offset={}&limit={limit}", items.len())).await;
        let batch = page["items"].as_array().unwrap().clone();
        let total = page["total"].as_u64().unwrap() as usize;
        assert!(batch.len() <= limit);
        items.extend(batch);
        if items.len() >= total {
            assert_eq!(items.len(), total);
            return items;
        }
    }
}

fn ids_in(value: &Value, out: &mut BTreeSet<String>) {
    match value {
        Value::Object(map) => {
            for (key, v) in map {
                if key == "id" {
                    if let Some(s) = v.as_str() {
                        out.insert(s.to_string());
                    }
                }
                ids_in(v, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|v| ids_in(v, out)),
        _ => {}
    }
}

fn code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or_default()
}

#[tokio::test]
async fn empty_store_lists_nothing() {
    let state = AppState::new(Store::in_memory(), Config::default());
    let body = get_ok(&state, "/api/registers").await;
    assert_eq!(body["items"], json!([]));
    assert_eq!(body["total"], 0);
    let progress = get_ok(&state, "/api/progress").await;
    assert_eq!(progress["tasks"]["classify"]["completeness_value"], 0.0);
    assert_eq!(get_ok(&state, "/api/shows").await["total"], 0);
}

#[tokio::test]
async fn minimal_chain_has_one_mark() {
    let f = fixture(SynthParams {
        n_volunteers: 1,
        ..SynthParams::default()
    });
    let pages = all_items(&f.state, "/api/registers/raw:register:1/pages", 100).await;
    assert_eq!(pages.len(), 1);
    let page = pages[0]["id"].as_str().unwrap();
    let marks = get_ok(&f.state, &format!("/api/pages/{page}/marks")).await;
    assert_eq!(marks["total"], 1);
    assert_eq!(marks["items"][0]["page_id"], page);
}

#[tokio::test]
async fn progress_matches_generator_emissions() {
    let f = fixture(SynthParams {
        seed: 3,
        n_registers: 2,
        pages_per_register: 4,
        marks_per_page: 3,
        n_volunteers: 4,
        verify_rate: 0.5,
        skip: 0.1,
        ..SynthParams::default()
    });
    let report = get_ok(&f.state, "/api/progress").await;
    let runs = |task: Task| f.truth.runs.values().filter(|r| r.task == task).count() as u64;
    let pages = f.truth.pages.len() as u64;
    assert_eq!(report["tasks"]["classify"]["total"], pages);
    assert_eq!(report["tasks"]["mark"]["total"], pages);
    assert_eq!(report["tasks"]["transcribe"]["total"], runs(Task::Mark));
    assert_eq!(report["tasks"]["transcribe"]["done"], runs(Task::Transcribe));
    assert_eq!(report["tasks"]["verify"]["total"], runs(Task::Transcribe));

    let volunteers = report["volunteers"].as_array().unwrap();
    assert_eq!(volunteers.len(), f.truth.volunteers.len());
    for v in volunteers {
        let emitted = &f.truth.volunteers[v["volunteer"].as_str().unwrap()];
        for (task, n) in emitted {
            assert_eq!(v["by_task"][task.name()], *n, "{v}");
        }
        assert_eq!(v["classifications"], emitted.values().sum::<u64>());
    }

    let tiers: u64 = report["tiers"].as_object().unwrap().values().map(|n| n.as_u64().unwrap()).sum();
    assert_eq!(tiers, report["cooked_records"]);
}

#[tokio::test]
async fn every_kind_is_named_by_some_route() {
    let named: BTreeSet<&str> = ROUTES.iter().flat_map(|(_, kinds)| kinds.iter().copied()).collect();
    assert!(named.contains("*"), "the generic record route covers every kind");
    for stage in Stage::ALL {
        for kind in stage.kinds() {
            let key = format!("{stage}:{kind}");
            let specific = named.contains(key.as_str());
            let generic = matches!(stage, Stage::Cs);
            assert!(specific || generic, "{key} has no dedicated route");
        }
    }
}

#[tokio::test]
async fn every_stored_record_is_reachable_and_pagination_is_complete() {
    let f = noisy();
    let pending = get_ok(&f.state, "/api/review?status=pending&limit=1").await;
    let item = pending["items"][0]["id"].as_u64().expect("noisy run opens review items");
    let (status, _) = post(&f.state, &format!("/api/review/{item}"), Some(TOKEN), json!({"curator": "c1", "action": "reject"})).await;
    assert_eq!(status, StatusCode::OK);

    let store = f.state.store.read().unwrap();
    for stage in Stage::ALL {
        for kind in stage.kinds() {
            let expected: Vec<String> = store.iter_kind(stage, kind).map(|(id, _)| id.to_string()).collect();
            let items = all_items(&f.state, &format!("/api/records/{stage}/{kind}"), 7).await;
            let got: Vec<String> = items.iter().map(|i| i["id"].as_str().unwrap().to_string()).collect();
            assert_eq!(got, expected, "{stage}:{kind}");
            if let Some(first) = expected.first() {
                let id: RecordId = first.parse().unwrap();
                let one = get_ok(&f.state, &format!("/api/records/{stage}/{kind}/{}?exact=true", id.serial)).await;
                assert_eq!(&one["record"], store.get(&id).unwrap());
            }
        }
    }

    // Walk the entity routes and collect every id they mention.
    let mut seen = BTreeSet::new();
    for register in all_items(&f.state, "/api/registers", 1).await {
        seen.insert(register["id"].as_str().unwrap().to_string());
        let rid = register["id"].as_str().unwrap();
        for page in all_items(&f.state, &format!("/api/registers/{rid}/pages"), 2).await {
            let pid = page["id"].as_str().unwrap();
            ids_in(&get_ok(&f.state, &format!("/api/pages/{pid}")).await, &mut seen);
            for sub in ["marks", "clusters", "transcripts"] {
                for item in all_items(&f.state, &format!("/api/pages/{pid}/{sub}"), 3).await {
                    ids_in(&item, &mut seen);
                }
            }
        }
    }
    for show in all_items(&f.state, "/api/shows", 2).await {
        ids_in(&get_ok(&f.state, &format!("/api/shows/{}", show["id"].as_str().unwrap())).await, &mut seen);
    }
    for route in ["/api/plays", "/api/persons", "/api/link-decisions", "/api/financial-entries"] {
        for item in all_items(&f.state, route, 5).await {
            ids_in(&item, &mut seen);
        }
    }
    for v in all_items(&f.state, "/api/volunteers", 1).await {
        for run in all_items(&f.state, &format!("/api/volunteers/{}/activity", v["volunteer"].as_str().unwrap()), 50).await {
            ids_in(&run, &mut seen);
        }
    }
    let superseded: BTreeSet<String> = Stage::ALL
        .iter()
        .flat_map(|s| s.kinds().iter().map(move |k| (*s, *k)))
        .flat_map(|(s, k)| store.iter_kind(s, k).filter_map(|(_, v)| v.get("supersedes").and_then(Value::as_str).map(String::from)))
        .collect();
    for (stage, kind) in [
        (Stage::Cs, "classification"),
        (Stage::Raw, "register"),
        (Stage::Raw, "page"),
        (Stage::Raw, "mark"),
        (Stage::Raw, "transcript"),
        (Stage::Raw, "category_vote"),
        (Stage::Raw, "verification"),
        (Stage::Cooked, "mark_cluster"),
        (Stage::Cooked, "cooked_transcript"),
        (Stage::Cooked, "cooked_page"),
        (Stage::Domain, "canonical_entity"),
        (Stage::Domain, "link_decision"),
        (Stage::Domain, "show"),
        (Stage::Domain, "financial_entry"),
    ] {
        for (id, _) in store.iter_kind(stage, kind) {
            let id = id.to_string();
            if superseded.contains(&id) {
                // Superseded versions stay reachable through lineage.
                continue;
            }
            assert!(seen.contains(&id), "{id} not reachable from the entity routes");
        }
    }
}

#[tokio::test]
async fn reads_do_not_change_digests() {
    let f = noisy();
    let before = get_ok(&f.state, "/api/snapshot").await;
    for (route, _) in ROUTES {
        let uri = route
            .replace("{id}", "raw:page:1")
            .replace("{record}", "cooked:cooked_transcript:1")
            .replace("{stage}/{kind}", "raw/mark")
            .replace("{serial}", "1");
        get(&f.state, &uri).await;
    }
    assert_eq!(get_ok(&f.state, "/api/snapshot").await, before);
}

#[tokio::test]
async fn review_round_trip() {
    let f = noisy();
    let list = all_items(&f.state, "/api/review?status=pending&reason=questionable_tier&stage=cooked", 100).await;
    let item = list
        .iter()
        .find(|i| i["target"].as_str().unwrap().starts_with("cooked:cooked_transcript"))
        .expect("a questionable transcript");
    let id = item["id"].as_u64().unwrap();
    let target = item["target"].as_str().unwrap().to_string();
    let pending_before = list.len();
    let before = get_ok(&f.state, "/api/snapshot").await;

    let uri = format!("/api/review/{id}");
    let accept = json!({"curator": "curator-1", "action": "accept"});
    assert_eq!(code(&post(&f.state, &uri, None, accept.clone()).await.1), "unauthorized");
    assert_eq!(code(&post(&f.state, &uri, Some("wrong"), accept.clone()).await.1), "unauthorized");
    let (status, body) = post(&f.state, &uri, Some(TOKEN), accept.clone()).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["item"]["status"], "accepted");
    let superseding = body["superseding"].as_str().unwrap().to_string();

    let (status, body) = post(&f.state, &uri, Some(TOKEN), accept).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(code(&body), "conflict");

    let after = get_ok(&f.state, "/api/review?status=pending&reason=questionable_tier&stage=cooked&limit=1000").await;
    assert_eq!(after["total"].as_u64().unwrap() as usize, pending_before - 1);

    let newest = get_ok(&f.state, &format!("/api/transcripts/{target}")).await;
    assert_eq!(newest["latest"], superseding.as_str());
    let current = get_ok(&f.state, &format!("/api/transcripts/{superseding}")).await;
    assert_eq!(current["tier"], "fully_confident");
    assert_eq!(current["curator"], "curator-1");
    assert_eq!(current["reliability"]["curator_touched"], true);

    let (kind_path, serial) = target.rsplit_once(':').unwrap();
    let resolved = get_ok(&f.state, &format!("/api/records/{}/{serial}", kind_path.replace(':', "/"))).await;
    assert_eq!(resolved["id"], superseding.as_str());
    let original = get_ok(&f.state, &format!("/api/records/{}/{serial}?exact=true", kind_path.replace(':', "/"))).await;
    assert_eq!(original["id"], target.as_str());

    let lineage = get_ok(&f.state, &format!("/api/lineage/{superseding}")).await;
    let agents: Vec<&str> = lineage["edges"].as_array().unwrap().iter().filter_map(|e| e["agent"].as_str()).collect();
    assert!(agents.contains(&"curator:curator-1"), "{agents:?}");
    assert!(lineage["nodes"].as_array().unwrap().iter().any(|n| n["id"] == target.as_str()));

    let after = get_ok(&f.state, "/api/snapshot").await;
    for stage in ["cs", "raw"] {
        assert_eq!(after["stages"][stage]["digest"], before["stages"][stage]["digest"]);
    }
}

#[tokio::test]
async fn edit_replaces_text() {
    let f = noisy();
    let list = all_items(&f.state, "/api/review?status=pending&reason=questionable_tier", 100).await;
    let item = list
        .iter()
        .find(|i| i["target"].as_str().unwrap().starts_with("cooked:cooked_transcript"))
        .unwrap();
    let (status, body) = post(
        &f.state,
        &format!("/api/review/{}", item["id"]),
        Some(TOKEN),
        json!({"curator": "c2", "action": "edit", "text": "Arlequin"}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let record = get_ok(&f.state, &format!("/api/transcripts/{}", body["superseding"].as_str().unwrap())).await;
    assert_eq!(record["consensus_text"], "Arlequin");
}

#[tokio::test]
async fn review_disabled_without_token() {
    let state = AppState::new(Store::in_memory(), Config::default());
    let (status, body) = post(&state, "/api/review/1", Some("x"), json!({"curator": "c", "action": "accept"})).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(code(&body), "review_disabled");
}

#[tokio::test]
async fn errors_carry_reason_codes() {
    let f = noisy();
    let cases = [
        ("/api/pages/not-an-id", StatusCode::BAD_REQUEST, "bad_record_id"),
        ("/api/pages/raw:page:999", StatusCode::NOT_FOUND, "unknown_id"),
        ("/api/pages/raw:mark:1", StatusCode::BAD_REQUEST, "invalid_argument"),
        ("/api/registers?limit=0", StatusCode::BAD_REQUEST, "invalid_argument"),
        ("/api/registers?limit=1001", StatusCode::BAD_REQUEST, "invalid_argument"),
        ("/api/registers?offset=x", StatusCode::BAD_REQUEST, "invalid_argument"),
        ("/api/records/raw/show", StatusCode::BAD_REQUEST, "invalid_kind"),
        ("/api/review/999999", StatusCode::NOT_FOUND, "not_found"),
        ("/api/volunteers/nobody/activity", StatusCode::NOT_FOUND, "not_found"),
        ("/api/pages/raw:page:1/surrogate?mode=pdf", StatusCode::BAD_REQUEST, "invalid_argument"),
        ("/api/nowhere", StatusCode::NOT_FOUND, "no_route"),
    ];
    for (uri, status, expected) in cases {
        let (got, body) = get(&f.state, uri).await;
        assert_eq!((got, code(&body)), (status, expected), "{uri}");
    }
}

#[tokio::test]
async fn filters_by_tier_and_volunteer() {
    let f = noisy();
    let all = all_items(&f.state, "/api/records/cooked/cooked_transcript", 1000).await;
    let questionable = all_items(&f.state, "/api/records/cooked/cooked_transcript?tier=questionable", 1000).await;
    assert!(questionable.iter().all(|t| t["tier"] == "questionable"));
    assert_eq!(questionable.len(), all.iter().filter(|t| t["tier"] == "questionable").count());
    let marks = all_items(&f.state, "/api/records/raw/mark?volunteer=v2", 1000).await;
    assert!(!marks.is_empty());
    assert!(marks.iter().all(|m| m["volunteer"] == "v2"));
    let (status, body) = get(&f.state, "/api/records/raw/mark?tier=bogus").await;
    assert_eq!((status, code(&body)), (StatusCode::BAD_REQUEST, "invalid_argument"));
}

#[tokio::test]
async fn surrogates_in_both_modes() {
    let f = noisy();
    let layout = get_ok(&f.state, "/api/pages/raw:page:1/surrogate?mode=layout").await;
    let clusters = get_ok(&f.state, "/api/pages/raw:page:1/clusters?limit=1000").await;
    assert_eq!(layout["elements"].as_array().unwrap().len() as u64, clusters["total"].as_u64().unwrap());
    let text = get_ok(&f.state, "/api/pages/raw:page:1/surrogate?mode=text").await;
    assert!(!text["text"].as_str().unwrap().is_empty());
}
