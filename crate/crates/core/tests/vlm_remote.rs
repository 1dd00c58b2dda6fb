mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use image::RgbImage;
use serde_json::{json, Value};

use vap::evalharness::{Answer, QAItem};
use vap::ingest::Frame;
use vap::transport::RetryPolicy;
use vap::vlmclient::{
    parse_answer, render_prompt, ChatRequest, Completion, FixtureStore, PromptTemplate, TemplateId,
    VlmBackend, VlmClient, VlmError,
};

fn client(url: &str, key: Option<&str>) -> VlmClient {
    VlmClient::with_policy(
        url,
        "test-model",
        key.map(String::from),
        RetryPolicy::new(3, Duration::from_millis(10)),
        Duration::from_secs(10),
        4,
    )
}

fn reply(text: &str) -> Value {
    json!({"choices": [{"index": 0, "finish_reason": "stop", "message": {"role": "assistant", "content": text}}]})
}

fn chat_request() -> ChatRequest {
    let item = QAItem {
        item_id: "q".into(),
        video_id: "v".into(),
        question: "What does the person pick up?".into(),
        options: (0..5).map(|i| format!("option {i}")).collect(),
        answer: Answer::Choice(2),
        qtype: None,
    };
    let frames: Vec<Frame> = (0..3)
        .map(|i| Frame::new(i, i as f64, RgbImage::new(4, 4)))
        .collect();
    render_prompt(
        &PromptTemplate::builtin(TemplateId::Egoschema),
        &item,
        &frames,
    )
    .unwrap()
}

#[test]
fn text_completion_reaches_the_parser() {
    let seen = Arc::new(Mutex::new(None::<(Value, Option<String>)>));
    let sink = seen.clone();
    let url = common::serve(Router::new().route(
        "/chat/completions",
        post(move |headers: HeaderMap, Json(body): Json<Value>| {
            let sink = sink.clone();
            async move {
                let auth = headers
                    .get("authorization")
                    .map(|h| h.to_str().unwrap().to_string());
                *sink.lock().unwrap() = Some((body, auth));
                Json(reply("The person grabs a cup.\nFinal Answer: (2)"))
            }
        }),
    ));
    let out = client(&url, Some("secret"))
        .complete(&chat_request())
        .unwrap();
    let Completion::Text { text } = out else {
        panic!("{out:?}")
    };
    assert_eq!(
        parse_answer(&text, TemplateId::Egoschema).unwrap().value,
        Answer::Choice(2)
    );

    let (body, auth) = seen.lock().unwrap().take().unwrap();
    assert_eq!(auth.as_deref(), Some("Bearer secret"));
    assert_eq!(body["model"], "test-model");
    let content = body["messages"][0]["content"].as_array().unwrap();
    let images = content.iter().filter(|c| c["type"] == "image_url").count();
    assert_eq!(images, 3);
    assert!(content
        .iter()
        .filter(|c| c["type"] == "image_url")
        .all(|c| c["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,")));
}

#[test]
fn rate_limit_then_success() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let url = common::serve(Router::new().route(
        "/chat/completions",
        post(move || {
            let counter = counter.clone();
            async move {
                if counter.fetch_add(1, Ordering::SeqCst) == 0 {
                    (
                        StatusCode::TOO_MANY_REQUESTS,
                        Json(json!({"error": "slow down"})),
                    )
                } else {
                    (StatusCode::OK, Json(reply("Final Answer: (1)")))
                }
            }
        }),
    ));
    let out = client(&url, None).complete(&chat_request()).unwrap();
    assert_eq!(
        out,
        Completion::Text {
            text: "Final Answer: (1)".into()
        }
    );
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn persistent_rate_limit_is_reported() {
    let url = common::serve(Router::new().route(
        "/chat/completions",
        post(|| async { StatusCode::TOO_MANY_REQUESTS }),
    ));
    let err = client(&url, None).complete(&chat_request()).unwrap_err();
    assert!(
        matches!(err, VlmError::RateLimited { attempts: 3 }),
        "{err}"
    );
}

#[test]
fn content_filter_is_blocked_not_an_error() {
    let url = common::serve(Router::new().route(
        "/chat/completions",
        post(|| async {
            Json(json!({"choices": [{"index": 0, "finish_reason": "content_filter", "message": {"role": "assistant", "content": null}}]}))
        }),
    ));
    let out = client(&url, None).complete(&chat_request()).unwrap();
    assert_eq!(
        out,
        Completion::Blocked {
            reason: "content_filter".into()
        }
    );
}

#[test]
fn unauthorized_is_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let url = common::serve(Router::new().route(
        "/chat/completions",
        post(move || {
            let counter = counter.clone();
            async move {
                counter.fetch_add(1, Ordering::SeqCst);
                StatusCode::UNAUTHORIZED
            }
        }),
    ));
    let err = client(&url, Some("bad"))
        .complete(&chat_request())
        .unwrap_err();
    assert!(matches!(err, VlmError::Unauthorized { status: 401 }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let err = client(&common::dead_endpoint(), None)
        .complete(&chat_request())
        .unwrap_err();
    assert!(matches!(err, VlmError::TransportError(_)));
}

#[test]
fn record_then_replay_offline() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let url = common::serve(Router::new().route(
        "/chat/completions",
        post(move || {
            let counter = counter.clone();
            async move {
                counter.fetch_add(1, Ordering::SeqCst);
                Json(reply("Final Answer: (4)"))
            }
        }),
    ));
    let dir = tempfile::tempdir().unwrap();
    let req = chat_request();
    let item = QAItem {
        item_id: "q".into(),
        video_id: "v".into(),
        question: String::new(),
        options: vec![],
        answer: Answer::Choice(0),
        qtype: None,
    };
    let selected = vap::ingest::IndexSet::new(vec![0, 1, 2], 3).unwrap();

    let record = VlmBackend::Record(Arc::new(client(&url, None)), FixtureStore::new(dir.path()));
    let first = record.respond(&req, &item, &selected, None).unwrap();
    let again = record.respond(&req, &item, &selected, None).unwrap();
    assert_eq!(first, again);
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let replay = VlmBackend::Replay(FixtureStore::new(dir.path()));
    assert_eq!(replay.respond(&req, &item, &selected, None).unwrap(), first);

    let mut other = req.clone();
    other.temperature = Some(0.5);
    assert!(matches!(
        replay.respond(&other, &item, &selected, None),
        Err(VlmError::FixtureMissing { .. })
    ));
}

#[test]
fn blocked_answers_are_reasked_when_configured() {
    let serve_block_then_answer = || {
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let url = common::serve(Router::new().route(
            "/chat/completions",
            post(move || {
                let counter = counter.clone();
                async move {
                    if counter.fetch_add(1, Ordering::SeqCst) == 0 {
                        Json(json!({"choices": [{"index": 0, "finish_reason": "content_filter", "message": {"content": null}}]}))
                    } else {
                        Json(reply("Final Answer: (2)"))
                    }
                }
            }),
        ));
        (url, hits)
    };
    let item = QAItem {
        item_id: "q".into(),
        video_id: "v".into(),
        question: "What does the person pick up?".into(),
        options: (0..5).map(|i| format!("option {i}")).collect(),
        answer: Answer::Choice(2),
        qtype: None,
    };
    let selection = vap::ingest::IndexSet::new(vec![0], 1).unwrap();
    for (retries, answered) in [(0, false), (1, true)] {
        let (url, hits) = serve_block_then_answer();
        let backend = VlmBackend::Remote(Arc::new(client(&url, None)));
        let rec = vap::pipeline::answer_item(
            vap::evalharness::SchemaId::Egoschema,
            &item,
            &selection,
            None,
            &backend,
            None,
            retries,
        )
        .unwrap();
        assert_eq!(rec.correct.is_some(), answered, "retries={retries}");
        assert_eq!(hits.load(Ordering::SeqCst), retries + 1);
    }
}
