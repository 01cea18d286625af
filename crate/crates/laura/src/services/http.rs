//! HTTP clients for the retrieve/rerank/generate protocol, with bounded
//! retries and per-endpoint timeouts.

use std::sync::Mutex;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    GenerateRequest, GenerateResponse, Generator, RankCandidate, Reranker, Retriever,
    RerankRequest, RerankResponse, RetrieveRequest, RetrieveResponse,
};
use crate::pipeline::ScoredEntry;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub auth: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            auth: None,
            timeout: Duration::from_secs(30),
            retries: 3,
            max_in_flight: 8,
        }
    }
}

// Counting semaphore bounding in-flight requests per endpoint.
struct InFlight {
    limit: usize,
    state: Mutex<usize>,
    cond: std::sync::Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(0),
            cond: std::sync::Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut count = self.state.lock().unwrap();
        while *count >= self.limit {
            count = self.cond.wait(count).unwrap();
        }
        *count += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.0.state.lock().unwrap();
        *count -= 1;
        self.0.cond.notify_one();
    }
}

/// Shared JSON-POST machinery for all three roles.
pub struct HttpEndpoint {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let in_flight = InFlight::new(config.max_in_flight);
        Ok(Self { config, client, in_flight })
    }

    pub fn url(&self) -> &str {
        &self.config.url
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp> {
        let _guard = self.in_flight.acquire();
        let url = format!("{}{}", self.config.url.trim_end_matches('/'), path);
        let attempts = self.config.retries.max(1);
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            let mut request = self.client.post(&url).json(req);
            if let Some(auth) = &self.config.auth {
                request = request.bearer_auth(auth);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.json::<Resp>().map_err(|e| Error::Protocol {
                            endpoint: url.clone(),
                            reason: format!("malformed response body: {e}"),
                        });
                    }
                    // Client errors are not retryable; the request will not
                    // change between attempts.
                    if status.is_client_error() {
                        return Err(Error::Protocol {
                            endpoint: url,
                            reason: format!("status {status}"),
                        });
                    }
                    last_error = format!("status {status}");
                }
                Err(e) => last_error = e.to_string(),
            }
            if attempt < attempts {
                log::warn!("{url} attempt {attempt}/{attempts} failed: {last_error}");
            }
        }
        Err(Error::Service {
            endpoint: url,
            attempts,
            reason: last_error,
        })
    }
}

pub struct HttpRetriever(pub HttpEndpoint);

impl Retriever for HttpRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<ScoredEntry>> {
        if top_k == 0 {
            return Err(Error::Precondition("retrieve requires top_k >= 1".into()));
        }
        let response: RetrieveResponse = self.0.post(
            "/retrieve",
            &RetrieveRequest { query: query.to_string(), top_k },
        )?;
        if response.chunk_ids.len() != response.scores.len() || response.chunk_ids.len() > top_k {
            return Err(Error::Protocol {
                endpoint: self.0.url().to_string(),
                reason: format!(
                    "retrieve returned {} ids and {} scores for top_k={top_k}",
                    response.chunk_ids.len(),
                    response.scores.len()
                ),
            });
        }
        if response.scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Protocol {
                endpoint: self.0.url().to_string(),
                reason: "retrieve scores are not non-increasing".into(),
            });
        }
        Ok(response
            .chunk_ids
            .into_iter()
            .zip(response.scores)
            .map(|(chunk_id, score)| ScoredEntry { chunk_id, score })
            .collect())
    }
}

pub struct HttpReranker(pub HttpEndpoint);

impl Reranker for HttpReranker {
    fn score(&self, query: &str, candidates: &[RankCandidate]) -> Result<Vec<f64>> {
        // All candidates for one query go in a single request.
        let request = RerankRequest {
            query: query.to_string(),
            documents: candidates.iter().map(|c| c.rendered.clone()).collect(),
            chunk_ids: candidates.iter().map(|c| c.chunk_id.clone()).collect(),
        };
        let response: RerankResponse = self.0.post("/rerank", &request)?;
        Ok(response.scores)
    }
}

pub struct HttpGenerator(pub HttpEndpoint);

impl Generator for HttpGenerator {
    fn generate(&self, question: &str, context: &str, generator_id: &str) -> Result<String> {
        if question.is_empty() {
            return Err(Error::Precondition("generate requires a non-empty question".into()));
        }
        let response: GenerateResponse = self.0.post(
            "/generate",
            &GenerateRequest {
                question: question.to_string(),
                context: context.to_string(),
                generator_id: generator_id.to_string(),
            },
        )?;
        Ok(response.answer)
    }
}
