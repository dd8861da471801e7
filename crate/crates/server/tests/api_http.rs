mod common;

use std::collections::BTreeSet;
use std::io::Read;
use std::sync::Arc;

use async_trait::async_trait;
use common::{dead_url, demo_corpus, doc_ids_in, start_stack, strip_volatile, StackOptions, API_KEY, HTML_QUERY};
use ragscope_core::attention::{score_documents, selection_attribution, RawAttention};
use ragscope_core::backend::{BackendError, BackendInfo, GenerationParams, ModelBackend};
use ragscope_core::context::{ContextLayout, Segment, SnippetMethod};
use ragscope_core::pipeline::Stage;
use ragscope_server::api::{ErrorResponse, QueryRequest, QueryResponse, API_KEY_HEADER, REQUEST_ID_HEADER};
use reqwest::StatusCode;

fn req(q: &str) -> QueryRequest {
    QueryRequest::new(q)
}

#[tokio::test]
async fn unauthenticated_requests_get_identical_401s_and_no_worker_traffic() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let body = req(HTML_QUERY);
    let mut bodies = Vec::new();
    for (path, key) in [
        ("/api/query", None),
        ("/api/query", Some("wrong-key-0123456789abcdef")),
        ("/api/rewrite", None),
        ("/api/rewrite", Some("")),
        ("/api/query", Some("test-key-0123456789abcdeF")),
    ] {
        let resp = stack.post_raw(path, key, &body).await;
        assert_eq!(resp.status(), StatusCode::UNAUTHORIZED, "{path} {key:?}");
        let rid = resp.headers()[REQUEST_ID_HEADER].to_str().unwrap().to_owned();
        let err: ErrorResponse = resp.json().await.unwrap();
        assert_eq!(err.request_id, rid);
        bodies.push(err.error);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(stack.worker_requests(), 0);

    // Malformed bodies are rejected by auth first, too.
    let resp = stack
        .client
        .post(format!("{}/api/query", stack.api_url))
        .body("{garbage")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(stack.worker_requests(), 0);

    let resp = stack.post_raw("/api/query", Some("second-key-abcdef0123456789"), &body).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(stack.worker_requests(), 2);
}

#[tokio::test]
async fn k2_response_structure_and_schema_round_trip() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let resp = stack.post_raw("/api/query", Some(API_KEY), &req(HTML_QUERY)).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let header_id = resp.headers()[REQUEST_ID_HEADER].to_str().unwrap().to_owned();
    let text = resp.text().await.unwrap();
    let parsed: QueryResponse = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string(&parsed).unwrap(), text);
    assert_eq!(parsed.request_id, header_id);
    uuid::Uuid::parse_str(&parsed.request_id).unwrap();

    let doc_segments: Vec<_> = parsed
        .prompt
        .segments
        .iter()
        .filter(|s| s.doc_id.is_some())
        .collect();
    assert_eq!(doc_segments.len(), 2);
    assert_eq!(parsed.doc_scores.len(), 2);
    assert_eq!(parsed.hits.len(), 2);
    assert_eq!(parsed.hits[0].doc_id, 0);
    assert_eq!(
        doc_segments.iter().map(|s| s.doc_id.unwrap()).collect::<Vec<_>>(),
        parsed.hits.iter().map(|h| h.doc_id).collect::<Vec<_>>()
    );
    assert_eq!(parsed.prompt.segments.iter().filter(|s| s.kind == ragscope_core::context::SegmentKind::Query).count(), 1);

    let mut cursor = 0;
    for s in &parsed.prompt.segments {
        assert_eq!(s.start, cursor);
        assert_eq!(s.tokens, parsed.prompt.tokens[s.start..s.end]);
        cursor = s.end;
    }
    assert_eq!(cursor, parsed.prompt.tokens.len());
    assert_eq!(parsed.attribution.in_len, parsed.prompt.tokens.len());
    assert_eq!(parsed.attribution.out_len, parsed.answer_tokens.len());
    assert_eq!(parsed.attribution.data.len(), parsed.attribution.in_len * parsed.attribution.out_len);
    assert!(parsed.answer_tokens.len() <= 40);
    assert_eq!(parsed.backend.max_tokens, 40);
    assert_eq!(parsed.plan.k, 2);
    assert!(!parsed.retrieval.partial);
    assert_eq!(parsed.retrieval.partitions_total, 2);
    assert!(parsed.exclusions.is_empty());
}

#[tokio::test]
async fn repeated_queries_are_byte_stable() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let mut body = req("How do web browsers render pages?");
    body.snippet_method = Some(SnippetMethod::SlidingWindow);
    let a = stack.query(&body).await;
    let b = stack.query(&body).await;
    assert_ne!(a["request_id"], b["request_id"]);
    assert_eq!(
        serde_json::to_string(&strip_volatile(a)).unwrap(),
        serde_json::to_string(&strip_volatile(b)).unwrap()
    );
}

#[tokio::test]
async fn doc_scores_match_recomputation_from_payload() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let mut body = req(HTML_QUERY);
    body.k = Some(3);
    let v = stack.query(&body).await;
    let resp: QueryResponse = serde_json::from_value(v).unwrap();
    let layout = ContextLayout {
        segments: resp
            .prompt
            .segments
            .iter()
            .map(|s| Segment {
                kind: s.kind,
                doc_id: s.doc_id,
                prompt_token_start: s.start,
                prompt_token_end: s.end,
            })
            .collect(),
    };
    let recomputed = score_documents(&resp.attribution, &layout).unwrap();
    assert_eq!(recomputed.len(), resp.doc_scores.len());
    for (a, b) in recomputed.iter().zip(&resp.doc_scores) {
        assert_eq!(a.doc_id, b.doc_id);
        assert!((a.raw - b.raw).abs() < 1e-12);
        assert!((a.share - b.share).abs() < 1e-12);
    }
    let share_sum: f64 = resp.doc_scores.iter().map(|d| d.share).sum();
    assert!((share_sum - 1.0).abs() < 1e-6);
    for row in resp.attribution.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    // The payload is enough to compute selection highlights client-side.
    let all: BTreeSet<usize> = (0..resp.attribution.out_len).collect();
    let sel = selection_attribution(&resp.attribution, &all).unwrap();
    let total: f64 = sel.sums.iter().sum();
    assert!((total - resp.attribution.out_len as f64).abs() < 1e-6);
    assert!(sel.scaled.iter().any(|&x| x == 1.0));
}

#[tokio::test]
async fn rewrite_excludes_documents_end_to_end() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let first = stack.query(&req(HTML_QUERY)).await;
    let top = first["hits"][0]["doc_id"].as_u64().unwrap();

    let mut body = req(HTML_QUERY);
    body.excluded_doc_ids = BTreeSet::from([top]);
    let second = stack.rewrite(&body).await;
    let (hits, segs, scores) = doc_ids_in(&second);
    assert!(!hits.contains(&top) && !segs.contains(&top) && !scores.contains(&top));
    assert_eq!(hits.len(), 2);
    assert_eq!(second["exclusions"], serde_json::json!([{"doc_id": top, "honored": true}]));

    // /api/query refuses exclusions; /api/rewrite without any behaves like /api/query.
    let resp = stack.post_raw("/api/query", Some(API_KEY), &body).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let plain = stack.rewrite(&req(HTML_QUERY)).await;
    assert_eq!(strip_volatile(plain), strip_volatile(first));
}

#[tokio::test]
async fn excluding_every_document_leaves_zero_context_generation() {
    let docs: Vec<String> = demo_corpus().into_iter().take(3).collect();
    let stack = start_stack(&docs, StackOptions::default()).await;
    let mut body = req(HTML_QUERY);
    body.k = Some(3);
    body.excluded_doc_ids = (0..3).collect();
    let v = stack.rewrite(&body).await;
    let (hits, segs, scores) = doc_ids_in(&v);
    assert!(hits.is_empty() && segs.is_empty() && scores.is_empty());
    assert!(!v["answer_tokens"].as_array().unwrap().is_empty());
    let kinds: Vec<&str> = v["prompt"]["segments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["kind"].as_str().unwrap())
        .collect();
    assert!(kinds.iter().all(|k| *k != "document"));
    assert!(kinds.contains(&"query"));
}

#[tokio::test]
async fn excluding_the_html_document_changes_the_answer() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    // Tokens that only the HTML document contributes to the prompt.
    let html_only = ["/", "body", "pages", "wrap", "element", "every"];
    let mut chosen = None;
    for seed in 0..200u64 {
        let mut body = req(HTML_QUERY);
        body.seed = Some(seed);
        let v = stack.query(&body).await;
        let answer: Vec<String> = serde_json::from_value(v["answer_tokens"].clone()).unwrap();
        if answer.iter().any(|t| html_only.contains(&t.as_str())) {
            assert_eq!(v["hits"][0]["doc_id"], 0);
            chosen = Some((seed, answer));
            break;
        }
    }
    let (seed, original) = chosen.expect("some seed copies an HTML-only token");

    let mut body = req(HTML_QUERY);
    body.seed = Some(seed);
    body.excluded_doc_ids = BTreeSet::from([0]);
    let v = stack.rewrite(&body).await;
    let prompt: Vec<String> = serde_json::from_value(v["prompt"]["tokens"].clone()).unwrap();
    assert!(prompt.iter().all(|t| !html_only.contains(&t.as_str())));
    let rewritten: Vec<String> = serde_json::from_value(v["answer_tokens"].clone()).unwrap();
    // The reference model only copies prompt tokens, so the HTML tokens cannot reappear.
    assert!(rewritten.iter().all(|t| !html_only.contains(&t.as_str())));
    assert_ne!(rewritten, original);
}

#[tokio::test]
async fn timings_cover_every_stage_within_total() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    for q in [HTML_QUERY, "browser page rendering", "markup tags"] {
        let resp: QueryResponse = serde_json::from_value(stack.query(&req(q)).await).unwrap();
        let t = &resp.timings;
        assert!(t.is_complete());
        let names: Vec<&str> = t.rows().iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(
            names,
            [
                "embed",
                "single_ann_call",
                "fanout_total",
                "fetch_documents",
                "snippeting",
                "generation",
                "attention_forward",
                "total"
            ]
        );
        assert!(t.rows().iter().all(|r| r.seconds > 0.0), "{t:?}");
        let total = t.get(Stage::Total);
        assert!(t.disjoint_sum() <= total * 1.05, "{t:?}");
        assert!(t.get(Stage::SingleAnnCall) <= t.get(Stage::FanoutTotal));
    }
}

#[tokio::test]
async fn invalid_parameters_are_400_with_request_id() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let cases = [
        serde_json::json!({"query": "   "}),
        serde_json::json!({"query": "x", "k": 0}),
        serde_json::json!({"query": "x", "window": 4, "stride": 5}),
        serde_json::json!({"query": "x", "max_tokens": 0}),
        serde_json::json!({"query": "x", "max_tokens": 41}),
        serde_json::json!({"query": "x", "snippet_method": "best"}),
        serde_json::json!({"query": "x", "unknown": 1}),
        serde_json::json!({"k": 2}),
    ];
    for body in cases {
        let resp = stack
            .client
            .post(format!("{}/api/query", stack.api_url))
            .header(API_KEY_HEADER, API_KEY)
            .json(&body)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST, "{body}");
        let err: ErrorResponse = resp.json().await.unwrap();
        assert_eq!(err.error.code, "invalid_request");
        assert!(!err.request_id.is_empty());
    }
}

#[tokio::test]
async fn dead_workers_give_503_and_partial_flag() {
    let docs = demo_corpus();
    let opts = StackOptions {
        extra_workers: vec![dead_url().await],
        ..StackOptions::default()
    };
    let stack = start_stack(&docs, opts).await;
    let v = stack.query(&req(HTML_QUERY)).await;
    assert_eq!(v["retrieval"]["partial"], true);
    assert_eq!(v["retrieval"]["partitions_total"], 3);
    assert_eq!(v["retrieval"]["failures"].as_array().unwrap().len(), 1);

    let opts = StackOptions {
        replace_workers: Some(vec![dead_url().await, dead_url().await]),
        ..StackOptions::default()
    };
    let dead_only = start_stack(&docs, opts).await;
    let resp = dead_only.post_raw("/api/query", Some(API_KEY), &req(HTML_QUERY)).await;
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    let err: ErrorResponse = resp.json().await.unwrap();
    assert_eq!(err.error.code, "retrieval_unavailable");
}

struct FailingBackend;

#[async_trait]
impl ModelBackend for FailingBackend {
    async fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            model_name: "failing".into(),
            layers: 1,
            heads: 1,
        })
    }
    async fn generate(&self, _: &[String], _: &GenerationParams) -> Result<Vec<String>, BackendError> {
        Err(BackendError::Timeout)
    }
    async fn attention(&self, _: &[String], _: &[String]) -> Result<RawAttention, BackendError> {
        Err(BackendError::Timeout)
    }
}

#[tokio::test]
async fn backend_failure_is_502() {
    let opts = StackOptions {
        backend: Some(Arc::new(FailingBackend)),
        ..StackOptions::default()
    };
    let stack = start_stack(&demo_corpus(), opts).await;
    let resp = stack.post_raw("/api/query", Some(API_KEY), &req(HTML_QUERY)).await;
    assert_eq!(resp.status(), StatusCode::BAD_GATEWAY);
    let err: ErrorResponse = resp.json().await.unwrap();
    assert_eq!(err.error.code, "backend_failed");
}

#[tokio::test]
async fn responses_are_gzip_encoded_on_request() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let resp = stack
        .client
        .post(format!("{}/api/query", stack.api_url))
        .header(API_KEY_HEADER, API_KEY)
        .header("accept-encoding", "gzip")
        .json(&req(HTML_QUERY))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-encoding"], "gzip");
    let bytes = resp.bytes().await.unwrap();
    let mut text = String::new();
    flate2::read::GzDecoder::new(&bytes[..]).read_to_string(&mut text).unwrap();
    let parsed: QueryResponse = serde_json::from_str(&text).unwrap();
    assert!(!parsed.answer_tokens.is_empty());
}

#[tokio::test]
async fn cors_allows_only_configured_origins() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let preflight = |origin: &'static str| {
        stack
            .client
            .request(reqwest::Method::OPTIONS, format!("{}/api/query", stack.api_url))
            .header("origin", origin)
            .header("access-control-request-method", "POST")
            .header("access-control-request-headers", "content-type,x-api-key")
            .send()
    };
    let ok = preflight("http://ui.example").await.unwrap();
    assert_eq!(ok.headers()["access-control-allow-origin"], "http://ui.example");
    let other = preflight("http://evil.example").await.unwrap();
    assert!(other.headers().get("access-control-allow-origin").is_none());
    assert_eq!(stack.worker_requests(), 0);
}

#[tokio::test]
async fn health_is_open_and_local() {
    let stack = start_stack(&demo_corpus(), StackOptions::default()).await;
    let v: serde_json::Value = stack
        .client
        .get(format!("{}/api/health", stack.api_url))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["documents"], 32);
    assert_eq!(v["model"]["layers"], 2);
    assert_eq!(stack.worker_requests(), 0);
}
