//! Benchmark runner that drives a deployed API over HTTP.

use async_trait::async_trait;
use ragscope_core::bench::QueryRunner;
use ragscope_core::pipeline::StageTimings;

use crate::api::{QueryRequest, QueryResponse, API_KEY_HEADER};

/// Posts each query to `/api/query` and reads the server-side stage timings.
pub struct ApiRunner {
    client: reqwest::Client,
    url: String,
    key: String,
}

impl ApiRunner {
    pub fn new(api_url: &str, key: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: format!("{}/api/query", api_url.trim_end_matches('/')),
            key: key.into(),
        }
    }
}

#[async_trait]
impl QueryRunner for ApiRunner {
    async fn run_query(&self, query: &str) -> Result<StageTimings, String> {
        let resp = self
            .client
            .post(&self.url)
            .header(API_KEY_HEADER, &self.key)
            .json(&QueryRequest::new(query))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(format!("HTTP {status}: {body}"));
        }
        let body: QueryResponse = resp.json().await.map_err(|e| e.to_string())?;
        if !body.timings.is_complete() {
            return Err("response is missing stage timings".into());
        }
        Ok(body.timings)
    }
}
