use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use perception_core::corpus::Corpus;
use perception_core::features::{SaliencyMap, Sentence};
use perception_core::model::{fit, FitOptions, ModelSpec, Smoothing, Term};
use perception_core::plan::{make_study_plan, ItemKind, StudyMode, CONDITION_ORDERINGS};
use perception_core::records::{read_csv, read_jsonl, VisualizationCondition};
use perception_core::render::{render_map, RenderSpec};
use perception_service::*;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

fn study(n_sentences: usize, participants: usize, mode: StudyMode) -> StudyDefinition {
    let corpus = Corpus::toy().take(n_sentences);
    let plan = make_study_plan(&corpus.sentences, participants, mode, 7).unwrap();
    StudyDefinition { id: "pilot".into(), plan, corpus, render: RenderSpec::default() }
}

fn within(participants: usize) -> StudyDefinition {
    study(12, participants, StudyMode::WithinSubject)
}

/// A study whose first sentence consists only of 20-character words.
fn long_word_study() -> StudyDefinition {
    let mut sentences = vec![Sentence::from_words("long", &["abcdefghijklmnopqrst", "uvwxyzabcdefghijklmn"])];
    for i in 1..6 {
        sentences.push(Sentence::from_words(format!("short{i}"), &["a", "few", "short", "words"]));
    }
    let base = Corpus::toy();
    let corpus = Corpus { sentences, lexicons: base.lexicons };
    let plan =
        make_study_plan(&corpus.sentences, 2, StudyMode::SingleCondition(VisualizationCondition::Saliency), 3).unwrap();
    StudyDefinition { id: "long".into(), plan, corpus, render: RenderSpec::default() }
}

struct Server {
    base: String,
    service: Arc<Service>,
    task: JoinHandle<std::io::Result<()>>,
    client: Client,
}

impl Server {
    async fn start(dir: &Path, defs: Vec<StudyDefinition>) -> Server {
        let service = Service::open(dir, defs).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let task = tokio::spawn(serve(listener, service.clone()));
        Server { base, service, task, client: Client::new() }
    }

    fn stop(self) {
        self.task.abort();
    }

    async fn create(&self, study: &str, worker: &str) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}/studies/{study}/sessions", self.base))
            .json(&json!({ "worker_id": worker }))
            .send()
            .await
            .unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn next(&self, session: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}/sessions/{session}/next", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn rate(&self, session: &str, body: Value) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}/sessions/{session}/ratings", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn export(&self, study: &str, query: &str) -> String {
        let r = self.client.get(format!("{}/studies/{study}/export?{query}", self.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        r.text().await.unwrap()
    }

    /// Answers every remaining item with `rating(item)`.
    async fn complete(&self, session: &str, rating: impl Fn(&Value) -> u8, seconds: f64) {
        loop {
            let (_, next) = self.next(session).await;
            if next["done"].as_bool().unwrap() {
                break;
            }
            let item = &next["item"];
            let body = json!({
                "item_index": item["item_index"],
                "rating": rating(item),
                "completion_time_s": seconds,
            });
            let (status, ack) = self.rate(session, body).await;
            assert_eq!(status, StatusCode::OK, "{ack}");
        }
    }
}

fn session_id(v: &Value) -> String {
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread")]
async fn slots_are_allocated_in_order_until_the_plan_is_exhausted() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    let server = Server::start(dir.path(), vec![def.clone()]).await;
    for k in 0..6 {
        let (status, s) = server.create("pilot", &format!("worker-{k}")).await;
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!(s["slot"], k);
        assert_eq!(s["cursor"], 0);
        assert_eq!(s["status"], "active");
    }
    assert_eq!(def.plan.participants[0].ordering, Some(0));
    let (status, err) = server.create("pilot", "worker-6").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "plan_exhausted");
    let (status, err) = server.create("nope", "worker-0").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "unknown_study");
    server.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn duplicate_worker_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), vec![within(6)]).await;
    assert_eq!(server.create("pilot", "w").await.0, StatusCode::CREATED);
    let (status, err) = server.create("pilot", "w").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "duplicate_worker");
    let (status, _) = server.create("pilot", "  ").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    server.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn next_item_is_idempotent_and_progress_tracks_the_cursor() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    let total = def.plan.participants[0].items.len();
    let server = Server::start(dir.path(), vec![def]).await;
    let (_, s) = server.create("pilot", "w").await;
    let id = session_id(&s);
    let (status, first) = server.next(&id).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["progress"], json!({ "completed": 0, "total": total }));
    assert_eq!(server.next(&id).await.1, first);
    for k in 0..3 {
        let (_, cur) = server.next(&id).await;
        assert_eq!(cur["item"]["item_index"], k);
        let ack = server.rate(&id, json!({ "item_index": k, "rating": 4, "completion_time_s": 3.0 })).await;
        assert_eq!(ack.1, json!({ "accepted": true, "cursor": k + 1, "done": false }));
    }
    let (_, again) = server.next(&id).await;
    assert_eq!(again, server.next(&id).await.1);
    assert_eq!(again["item"]["item_index"], 3);
    assert_eq!(again["progress"]["completed"], 3);
    server.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn payload_markup_matches_the_renderer() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    let server = Server::start(dir.path(), vec![def.clone()]).await;
    for w in 0..2 {
        server.create("pilot", &format!("w{w}")).await;
    }
    // Slot 1 has a different condition ordering than slot 0.
    let mut seen_modes = HashSet::new();
    for (slot, session) in [(0, "pilot-0000"), (1, "pilot-0001")] {
        let plan = &def.plan.participants[slot];
        for (k, item) in plan.items.iter().enumerate() {
            let (_, next) = server.next(session).await;
            let payload: NextItem = serde_json::from_value(next).unwrap();
            let p = payload.item.unwrap();
            let sentence = item_sentence(&def, item).unwrap();
            let spec = RenderSpec { mode: render_mode(item.condition), ..def.render.clone() };
            let expected = render_map(&sentence, &SaliencyMap::new(sentence.id.clone(), item.scores.clone()), &spec).unwrap();
            assert_eq!(p.markup, expected.html);
            assert_eq!(p.svg, expected.svg);
            assert_eq!(p.mode, spec.mode);
            assert_eq!(p.target_token, item.target_token);
            assert_eq!(p.question, question(&p.tokens[p.target_token]));
            assert!(!p.markup.contains("trap"));
            seen_modes.insert(p.mode);
            server.rate(session, json!({ "item_index": k, "rating": 2, "completion_time_s": 1.5 })).await;
        }
    }
    assert_eq!(seen_modes.len(), 3);
    assert_eq!(CONDITION_ORDERINGS.len(), 6);
    server.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_and_duplicate_submissions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), vec![within(6)]).await;
    let (_, s) = server.create("pilot", "w").await;
    let id = session_id(&s);
    let bad = |rating: u8| json!({ "item_index": 0, "rating": rating, "completion_time_s": 2.0 });
    for r in [0, 8] {
        let (status, err) = server.rate(&id, bad(r)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(err["error"]["code"], "rating_out_of_range");
    }
    let (status, _) = server.rate(&id, json!({ "item_index": 0, "rating": 3, "completion_time_s": -1.0 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, err) = server.rate(&id, json!({ "rating": 3 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "invalid_body");
    assert_eq!(server.rate(&id, bad(5)).await.0, StatusCode::OK);
    let (status, err) = server.rate(&id, bad(5)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "stale_item");
    let (status, _) = server.rate(&id, json!({ "item_index": 7, "rating": 5, "completion_time_s": 2.0 })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(server.next("missing").await.0, StatusCode::NOT_FOUND);
    assert_eq!(server.rate("missing", bad(3)).await.0, StatusCode::NOT_FOUND);
    // Only the accepted rating was logged.
    assert_eq!(server.service.log().events().len(), 2);
    server.stop();
}

fn expected_rating(plan_item: &ItemKind) -> Option<u8> {
    match plan_item {
        ItemKind::Trap { expected_rating, .. } => Some(*expected_rating),
        ItemKind::Sentence { .. } => None,
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_traps_are_recorded_and_flagged_at_export() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    let server = Server::start(dir.path(), vec![def.clone()]).await;
    let items0 = def.plan.participants[0].items.clone();
    let items1 = def.plan.participants[1].items.clone();
    let (_, a) = server.create("pilot", "honest").await;
    let (_, b) = server.create("pilot", "clicker").await;
    let (a, b) = (session_id(&a), session_id(&b));
    server
        .complete(&a, |item| expected_rating(&items0[item["item_index"].as_u64().unwrap() as usize].kind).unwrap_or(4), 5.0)
        .await;
    // Answers every trap wrongly and still reaches the end.
    server
        .complete(
            &b,
            |item| match expected_rating(&items1[item["item_index"].as_u64().unwrap() as usize].kind) {
                Some(e) => e % 7 + 1,
                None => 4,
            },
            5.0,
        )
        .await;
    let sa = server.service.get_session(&a).await.unwrap();
    let sb = server.service.get_session(&b).await.unwrap();
    assert_eq!(sa.status, SessionStatus::Complete);
    assert_eq!(sa.trap_results, vec![true; 3]);
    assert_eq!(sb.status, SessionStatus::Excluded);
    assert_eq!(sb.trap_results, vec![false; 3]);
    assert_eq!(sb.cursor, sb.item_count);

    let (_, done) = server.next(&b).await;
    assert_eq!(done["done"], true);
    assert!(done.get("item").is_none());

    let jsonl = server.export("pilot", "format=jsonl").await;
    let rows: Vec<Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 24);
    for row in &rows {
        assert_eq!(row["flags"]["trap_fail"], row["worker_id"] == "clicker");
    }
    let filtered = server.export("pilot", "format=jsonl&paper-filters=true").await;
    assert_eq!(filtered.lines().count(), 12);
    assert!(filtered.lines().all(|l| l.contains("\"honest\"")));
    server.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn export_flags_outliers_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let def = long_word_study();
    let server = Server::start(dir.path(), vec![def.clone()]).await;
    let (_, a) = server.create("long", "slow").await;
    let (_, b) = server.create("long", "fast").await;
    server.complete(&session_id(&a), |_| 5, 61.0).await;
    server.complete(&session_id(&b), |_| 5, 59.5).await;

    let csv = server.export("long", "format=csv").await;
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (ct, len, worker, sentence) = (col("ct_outlier"), col("len_outlier"), col("worker_id"), col("sentence_id"));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert_eq!(r[ct] == "true", r[worker] == "slow");
        assert_eq!(r[len] == "true", r[sentence] == "long");
    }
    assert_eq!(server.export("long", "format=csv").await, csv);
    let filtered = server.export("long", "format=csv&paper-filters=true").await;
    assert_eq!(filtered.lines().count() - 1, 5);
    server.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_replays_sessions_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    let server = Server::start(dir.path(), vec![def.clone()]).await;
    let (_, s) = server.create("pilot", "w").await;
    let id = session_id(&s);
    for k in 0..5 {
        server.rate(&id, json!({ "item_index": k, "rating": 1 + k % 7, "completion_time_s": 2.5, "comment": "ok" })).await;
    }
    let before = server.export("pilot", "format=csv").await;
    let session_before = server.service.get_session(&id).await.unwrap();
    server.stop();

    let server = Server::start(dir.path(), vec![def.clone()]).await;
    assert_eq!(server.service.get_session(&id).await.unwrap(), session_before);
    assert_eq!(server.export("pilot", "format=csv").await, before);
    assert_eq!(server.next(&id).await.1["item"]["item_index"], 5);
    let (status, err) = server.create("pilot", "w").await;
    assert_eq!(status, StatusCode::CONFLICT, "{err}");
    assert_eq!(server.create("pilot", "v").await.1["slot"], 1);
    server.stop();

    let mut other = def.clone();
    other.plan.seed += 1;
    assert!(matches!(Service::open(dir.path(), vec![other]), Err(ServiceError::StudyMismatch(_))));
}

#[tokio::test(flavor = "multi_thread")]
async fn torn_tail_is_dropped_and_corruption_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    {
        let svc = Service::open(dir.path(), vec![def.clone()]).unwrap();
        svc.create_session("pilot", "w").await.unwrap();
    }
    let log = dir.path().join(LOG_FILE);
    let good = std::fs::read(&log).unwrap();
    let mut torn = good.clone();
    torn.extend_from_slice(b"{\"event\":\"response\",\"study_id\":\"pi");
    std::fs::write(&log, &torn).unwrap();
    let svc = Service::open(dir.path(), vec![def.clone()]).unwrap();
    assert_eq!(svc.log().events().len(), 1);
    drop(svc);
    assert_eq!(std::fs::read(&log).unwrap(), good);

    let mut corrupt = b"not json\n".to_vec();
    corrupt.extend_from_slice(&good);
    std::fs::write(&log, &corrupt).unwrap();
    assert!(matches!(Service::open(dir.path(), vec![def]), Err(ServiceError::CorruptLog { line: 1, .. })));
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_sessions_keep_one_record_per_cursor() {
    let dir = tempfile::tempdir().unwrap();
    let def = within(6);
    let server = Arc::new(Server::start(dir.path(), vec![def.clone()]).await);
    let mut tasks = Vec::new();
    for w in 0..6 {
        let server = server.clone();
        tasks.push(tokio::spawn(async move {
            let (_, s) = server.create("pilot", &format!("w{w}")).await;
            let id = session_id(&s);
            // Two submitters race for every item; exactly one wins.
            loop {
                let (_, next) = server.next(&id).await;
                if next["done"] == true {
                    break;
                }
                let body = json!({ "item_index": next["item"]["item_index"], "rating": 3, "completion_time_s": 1.0 });
                let (r1, r2) = tokio::join!(server.rate(&id, body.clone()), server.rate(&id, body));
                let mut statuses = [r1.0, r2.0];
                statuses.sort();
                assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let events = server.service.log().events();
    let mut seen = HashSet::new();
    for ev in &events {
        if let LogEvent::Response { session_id, item_index, .. } = ev {
            assert!(seen.insert((session_id.clone(), *item_index)));
        }
    }
    let per_session = def.plan.participants[0].items.len();
    assert_eq!(seen.len(), 6 * per_session);
}

#[tokio::test(flavor = "multi_thread")]
async fn export_round_trips_into_a_fit() {
    let dir = tempfile::tempdir().unwrap();
    let def = study(30, 10, StudyMode::SingleCondition(VisualizationCondition::Saliency));
    let server = Server::start(dir.path(), vec![def.clone()]).await;
    for w in 0..10 {
        let (_, s) = server.create("pilot", &format!("w{w}")).await;
        // Ratings grow with the shown saliency of the target.
        let items = def.plan.participants[w].items.clone();
        server
            .complete(
                &session_id(&s),
                |item| {
                    let it = &items[item["item_index"].as_u64().unwrap() as usize];
                    expected_rating(&it.kind).unwrap_or(1 + (it.scores[it.target_token] * 6.99) as u8)
                },
                4.0,
            )
            .await;
    }
    let csv = server.export("pilot", "format=csv").await;
    let jsonl = server.export("pilot", "format=jsonl").await;
    let from_csv = read_csv(csv.as_bytes()).unwrap();
    let from_jsonl = read_jsonl(jsonl.as_bytes()).unwrap();
    assert_eq!(from_csv, from_jsonl);
    assert_eq!(from_csv.len(), 300);
    let spec = ModelSpec::new(vec![Term::smooth_k(
        perception_core::features::NumericCovariate::Saliency,
        6,
        Smoothing::Fixed(1.0),
    )]);
    let model = fit(&from_csv, &spec, &FitOptions::default()).unwrap();
    assert!(model.report.converged);
}
