use std::path::Path;
use std::sync::Arc;

use disambig_core::detect::{mask_topk, saliency, KPolicy};
use disambig_core::eval::{cohen_kappa, AgreementTable};
use disambig_core::nnkit::checkpoint::{Checkpoint, CheckpointInfo, LossWeights, ModelKind};
use disambig_core::nnkit::{EncoderClassifier, HeadAggregation, Seq2Seq, Tokenizer, TransformerConfig};
use disambig_core::rewrite::{rewrite_text, Decision, RewriteConfig, RewriteMode};
use disambig_service::store::Store;
use disambig_service::{AppState, ModelSet};
use serde_json::{json, Value};

const TEXTS: [&str; 4] = [
    "the heart is normal.",
    "the heart is prominent.",
    "normal cardiac contour with atherosclerotic changes.",
    "mild pulmonary edema. no acute process.",
];

struct Server {
    base: String,
    agent: ureq::Agent,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    fn start(state: AppState) -> Server {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let state = Arc::new(state);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                disambig_service::serve(listener, state, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Server { base: format!("http://{addr}"), agent, shutdown: Some(stop_tx), thread: Some(thread) }
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.agent.get(&format!("{}{path}", self.base)).call().unwrap();
        read(resp)
    }

    fn post(&self, path: &str, body: &Value, annotator: Option<&str>) -> (u16, Value) {
        self.post_raw(path, &body.to_string(), annotator)
    }

    fn post_raw(&self, path: &str, body: &str, annotator: Option<&str>) -> (u16, Value) {
        let mut req = self.agent.post(&format!("{}{path}", self.base)).content_type("application/json");
        if let Some(a) = annotator {
            req = req.header("X-Annotator-Id", a);
        }
        read(req.send(body).unwrap())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn read(mut resp: ureq::http::Response<ureq::Body>) -> (u16, Value) {
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap() })
}

fn tiny_models() -> (Vec<Checkpoint<Seq2Seq>>, Checkpoint<EncoderClassifier>, Checkpoint<EncoderClassifier>) {
    let tok = Tokenizer::from_texts(TEXTS, 1).unwrap();
    let cfg = TransformerConfig::tiny(tok.len());
    let generator = |lambda2, seed| {
        let mut info = CheckpointInfo::new(ModelKind::Seq2seq, "generator", cfg.clone(), &tok);
        info.loss_weights = Some(LossWeights { lambda1: 1.0, lambda2 });
        Checkpoint { model: Seq2Seq::new(cfg.clone(), seed), tokenizer: tok.clone(), info }
    };
    let clf = |role: &str, seed| {
        let mut info = CheckpointInfo::new(ModelKind::Classifier, role, cfg.clone(), &tok);
        info.n_classes = Some(2);
        Checkpoint { model: EncoderClassifier::new(cfg.clone(), 2, seed), tokenizer: tok.clone(), info }
    };
    (vec![generator(1.0, 11), generator(0.0, 12)], clf("ambiguity", 13), clf("decision", 14))
}

fn rewrite_config() -> RewriteConfig {
    RewriteConfig { max_length: 12, iterations: 3, ..RewriteConfig::default() }
}

fn model_server() -> Server {
    let (generators, detector, decision) = tiny_models();
    let models = ModelSet::new(generators, Some(detector), decision).unwrap();
    Server::start(AppState::new(Store::in_memory(), Some(models)).with_rewrite_config(rewrite_config()))
}

#[test]
fn healthz_reports_loaded_modes() {
    let server = model_server();
    let (status, body) = server.get("/healthz");
    assert_eq!(status, 200);
    assert_eq!(body["models_loaded"], true);
    assert_eq!(body["modes"].as_array().unwrap().len(), 4);
    let bare = Server::start(AppState::new(Store::in_memory(), None));
    assert_eq!(bare.get("/healthz").1["models_loaded"], false);
}

#[test]
fn rewrite_masks_what_the_detector_selects() {
    let server = model_server();
    let text = "the heart is prominent.";
    let (status, body) =
        server.post("/rewrite", &json!({ "text": text, "decision_label": "normal", "mode": "full" }), None);
    assert_eq!(status, 200, "{body}");
    let (_, detector, _) = tiny_models();
    let oracle = mask_topk(&saliency(&detector.model, &detector.tokenizer, text, HeadAggregation::Mean).unwrap(), KPolicy::default()).unwrap();
    let masked: Vec<usize> = serde_json::from_value(body["masked_positions"].clone()).unwrap();
    assert!(!masked.is_empty());
    assert_eq!(masked, oracle.masked_positions);
    assert!(body["request_id"].as_str().is_some_and(|s| !s.is_empty()));
}

#[test]
fn rewrite_echoes_request_id() {
    let server = model_server();
    let resp = server
        .agent
        .post(&format!("{}/rewrite", server.base))
        .header("X-Request-Id", "abc-123")
        .send_json(json!({ "text": "the heart is normal.", "decision_label": "abnormal" }))
        .unwrap();
    assert_eq!(resp.headers().get("x-request-id").unwrap(), "abc-123");
    let (_, body) = read(resp);
    assert_eq!(body["request_id"], "abc-123");
}

#[test]
fn zero_iterations_is_the_unperturbed_generation() {
    let server = model_server();
    let text = "normal cardiac contour with atherosclerotic changes.";
    let body = json!({ "text": text, "decision_label": "abnormal", "mode": "no_detect", "iterations": 0 });
    let (status, trace) = server.post("/rewrite", &body, None);
    assert_eq!(status, 200, "{trace}");
    let (generators, detector, decision) = tiny_models();
    let models = ModelSet::new(generators.clone(), Some(detector), decision.clone()).unwrap();
    assert!(models.modes().contains(&RewriteMode::NoDetect));
    let direct = rewrite_text(
        text,
        Decision::Abnormal,
        &disambig_core::rewrite::RewriteModels::new(generators[0].clone(), None, decision).unwrap(),
        &RewriteConfig { mode: RewriteMode::NoDetect, iterations: 0, ..rewrite_config() },
    )
    .unwrap();
    assert_eq!(trace["output"], direct.output);
    for step in trace["steps"].as_array().unwrap() {
        assert_eq!(step["iterations"], 0);
        assert_eq!(step["p_y_before"], step["p_y_after"]);
    }
}

#[test]
fn rewrite_rejections() {
    let server = model_server();
    let empty = server.post("/rewrite", &json!({ "text": "  ", "decision_label": "normal" }), None);
    assert_eq!(empty.0, 400);
    assert_eq!(server.post_raw("/rewrite", "{not json", None).0, 400);
    assert_eq!(server.post("/rewrite", &json!({ "text": "the heart is normal." }), None).0, 400);
    let bad_mode = json!({ "text": "the heart is normal.", "decision_label": "normal", "mode": "bogus" });
    assert_eq!(server.post("/rewrite", &bad_mode, None).0, 400);
    let no_content = server.post("/rewrite", &json!({ "text": ". .", "decision_label": "normal" }), None);
    assert_eq!(no_content.0, 422, "{}", no_content.1);
    let long = "the heart is normal and the heart is normal and the heart is normal.";
    assert_eq!(server.post("/rewrite", &json!({ "text": long, "decision_label": "normal" }), None).0, 422);

    let bare = Server::start(AppState::new(Store::in_memory(), None));
    let (status, _) = bare.post("/rewrite", &json!({ "text": "the heart is normal.", "decision_label": "normal" }), None);
    assert_eq!(status, 409);
}

#[test]
fn mode_without_matching_generator_conflicts() {
    let (generators, detector, decision) = tiny_models();
    let models = ModelSet::new(vec![generators[0].clone()], Some(detector), decision).unwrap();
    let server = Server::start(AppState::new(Store::in_memory(), Some(models)).with_rewrite_config(rewrite_config()));
    let body = json!({ "text": "the heart is normal.", "decision_label": "normal", "mode": "no_contrastive" });
    assert_eq!(server.post("/rewrite", &body, None).0, 409);
}

fn start_round(server: &Server, n: usize) -> String {
    let items: Vec<Value> = (0..n).map(|i| json!({ "sentence_id": format!("s{i}"), "text": format!("sentence {i}.") })).collect();
    let (status, round) =
        server.post("/rounds", &json!({ "kind": "ambiguity", "annotators": ["ann-a", "ann-b"], "items": items }), None);
    assert_eq!(status, 201, "{round}");
    round["round_id"].as_str().unwrap().to_owned()
}

fn all_tasks(server: &Server, annotator: &str) -> Vec<Value> {
    let mut out = Vec::new();
    let mut cursor: Option<String> = None;
    loop {
        let mut path = format!("/tasks?annotator={annotator}&limit=3");
        if let Some(c) = &cursor {
            path.push_str(&format!("&cursor={c}"));
        }
        let (status, page) = server.get(&path);
        assert_eq!(status, 200);
        out.extend(page["tasks"].as_array().unwrap().iter().cloned());
        match page["next_cursor"].as_str() {
            Some(c) => cursor = Some(c.to_owned()),
            None => return out,
        }
    }
}

fn label_all(server: &Server, labels: &[(bool, bool)]) {
    let a = all_tasks(server, "ann-a");
    let b = all_tasks(server, "ann-b");
    assert_eq!(a.len(), labels.len());
    for (i, (x, y)) in labels.iter().enumerate() {
        let (s1, _) = server.post("/labels", &json!({ "task_id": a[i]["task_id"], "label": x }), Some("ann-a"));
        let (s2, _) = server.post("/labels", &json!({ "task_id": b[i]["task_id"], "label": y }), Some("ann-b"));
        assert_eq!((s1, s2), (201, 201));
    }
}

fn pattern_4_4_2() -> Vec<(bool, bool)> {
    let mut v = vec![(true, true); 4];
    v.extend([(false, false); 4]);
    v.extend([(true, false), (false, true)]);
    v
}

#[test]
fn round_with_4_4_2_pattern() {
    let server = Server::start(AppState::new(Store::in_memory(), None));
    let round = start_round(&server, 10);
    label_all(&server, &pattern_4_4_2());
    let (status, ag) = server.get(&format!("/agreement?round={round}"));
    assert_eq!(status, 200);
    let pairs: Vec<(bool, bool)> = serde_json::from_value(ag["pairs"].clone()).unwrap();
    let oracle = cohen_kappa(&AgreementTable { pairs }).unwrap();
    assert_eq!(ag["kappa"].as_f64().unwrap(), oracle);
    assert!((oracle - 0.6).abs() < 1e-12);
    assert_eq!(ag["disagreements"].as_array().unwrap().len(), 2);
    assert_eq!(ag["closable"], false);

    assert_eq!(server.post(&format!("/rounds/{round}/close"), &json!({}), None).0, 409);
    let (status, closed) = server.post(&format!("/rounds/{round}/close"), &json!({ "override": true }), None);
    assert_eq!(status, 200);
    assert_eq!(closed["round"]["status"], "closed");

    let (_, queue) = server.get(&format!("/adjudication?round={round}"));
    let queue = queue["items"].as_array().unwrap().clone();
    assert_eq!(queue.len(), 2);
    for item in &queue {
        let body = json!({ "round_id": round, "item_id": item["item_id"], "label": true });
        assert_eq!(server.post("/adjudication", &body, Some("doctor")).0, 201);
        assert_eq!(server.post("/adjudication", &body, Some("doctor")).0, 409);
    }
    let (_, finals) = server.get(&format!("/rounds/{round}/labels"));
    assert!(finals["labels"].as_array().unwrap().iter().all(|l| l["label"].is_boolean()));
    assert_eq!(server.get(&format!("/adjudication?round={round}")).1["items"].as_array().unwrap().len(), 0);
}

#[test]
fn perfect_agreement_round_closes() {
    let server = Server::start(AppState::new(Store::in_memory(), None));
    let round = start_round(&server, 6);
    label_all(&server, &[(true, true), (false, false), (true, true), (false, false), (true, true), (true, true)]);
    let (_, ag) = server.get(&format!("/agreement?round={round}"));
    assert_eq!(ag["kappa"].as_f64(), Some(1.0));
    assert_eq!(ag["disagreements"].as_array().unwrap().len(), 0);
    assert_eq!(ag["closable"], true);
    assert_eq!(server.post_raw(&format!("/rounds/{round}/close"), "", None).0, 200);
    assert_eq!(server.post_raw(&format!("/rounds/{round}/close"), "", None).0, 409);
}

#[test]
fn label_errors() {
    let server = Server::start(AppState::new(Store::in_memory(), None));
    start_round(&server, 2);
    let task = all_tasks(&server, "ann-a")[0]["task_id"].clone();
    assert_eq!(server.post("/labels", &json!({ "task_id": "missing", "label": true }), Some("ann-a")).0, 404);
    assert_eq!(server.post("/labels", &json!({ "task_id": task, "label": true }), None).0, 400);
    assert_eq!(server.post("/labels", &json!({ "task_id": task }), Some("ann-a")).0, 400);
    assert_eq!(server.post("/labels", &json!({ "task_id": task, "label": true }), Some("ann-a")).0, 201);
    assert_eq!(server.post("/labels", &json!({ "task_id": task, "label": false }), Some("ann-a")).0, 409);
    assert_eq!(server.post("/labels", &json!({ "task_id": task, "label": true }), Some("ann-c")).0, 409);
    assert_eq!(server.get("/agreement?round=nope").0, 404);
    assert_eq!(server.get("/tasks").0, 400);
}

fn traces(n: usize) -> Vec<Value> {
    let (generators, detector, decision) = tiny_models();
    let models = disambig_core::rewrite::RewriteModels::new(generators[0].clone(), Some(detector), decision).unwrap();
    let trace = rewrite_text("the heart is prominent.", Decision::Normal, &models, &RewriteConfig { iterations: 1, ..rewrite_config() }).unwrap();
    (0..n).map(|_| json!({ "trace": trace })).collect()
}

fn review(server: &Server, reviewer: &str, successes: usize) -> usize {
    let mut seen = 0;
    loop {
        let (status, item) = server.get(&format!("/audits/next?reviewer={reviewer}"));
        if status == 204 {
            return seen;
        }
        assert_eq!(status, 200);
        let body = json!({ "disambiguation": seen < successes, "fidelity": true, "notes": "" });
        let path = format!("/audits/{}/decision", item["item_id"].as_str().unwrap());
        assert_eq!(server.post(&path, &body, Some(reviewer)).0, 201);
        assert_eq!(server.post(&path, &body, Some(reviewer)).0, 409);
        seen += 1;
    }
}

fn audit_round_trip(log: &Path) {
    let server = Server::start(AppState::new(Store::open(log).unwrap(), None));
    let (_, empty) = server.get("/audits/summary");
    assert_eq!(empty, json!({ "n": 0, "disambiguation": null, "fidelity": null }));
    let (status, added) = server.post("/audits", &json!({ "items": traces(10) }), None);
    assert_eq!(status, 201);
    let first = added["item_ids"][0].as_str().unwrap().to_owned();
    let missing = json!({ "reviewer": "rev", "disambiguation": true });
    assert_eq!(server.post(&format!("/audits/{first}/decision"), &missing, None).0, 400);
    let ok = json!({ "disambiguation": true, "fidelity": true });
    assert_eq!(server.post("/audits/nope/decision", &ok, Some("rev")).0, 404);
    assert_eq!(review(&server, "rev", 8), 10);
    let (_, summary) = server.get("/audits/summary");
    assert_eq!(summary["n"], 10);
    assert_eq!(summary["disambiguation"].as_f64(), Some(0.8));
    assert_eq!(summary["fidelity"].as_f64(), Some(1.0));
}

#[test]
fn audits_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    audit_round_trip(&log);
    let server = Server::start(AppState::new(Store::open(&log).unwrap(), None));
    let (_, summary) = server.get("/audits/summary");
    assert_eq!(summary["n"], 10);
    assert_eq!(summary["disambiguation"].as_f64(), Some(0.8));
    let (status, _) = server.get("/audits/next?reviewer=rev");
    assert_eq!(status, 204);
    let (_, page) = server.get("/audits?limit=4");
    assert_eq!(page["items"].as_array().unwrap().len(), 4);
    assert!(page["next_cursor"].is_string());
}

#[test]
fn rounds_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let (round, before) = {
        let server = Server::start(AppState::new(Store::open(&log).unwrap(), None));
        let round = start_round(&server, 10);
        label_all(&server, &pattern_4_4_2());
        (round.clone(), server.get(&format!("/agreement?round={round}")).1)
    };
    let server = Server::start(AppState::new(Store::open(&log).unwrap(), None));
    assert_eq!(server.get(&format!("/agreement?round={round}")).1, before);
    let task = all_tasks(&server, "ann-a")[0]["task_id"].clone();
    assert_eq!(server.post("/labels", &json!({ "task_id": task, "label": true }), Some("ann-a")).0, 409);
}
