//! Mock HTTP server hosting the deterministic mock services over the wire
//! protocol, for end-to-end integration tests.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::mock::{MockGenerator, MockReranker, MockRetriever};
use super::{
    GenerateRequest, GenerateResponse, Generator, RankCandidate, Reranker, Retriever,
    RerankRequest, RerankResponse, RetrieveRequest, RetrieveResponse,
};
use crate::corpus::CorpusIndex;
use crate::{Error, Result};

/// Fixture file driving the mock services.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockFixtures {
    /// Chunk JSONL path, relative to the fixtures file.
    pub chunks_path: String,
    #[serde(default)]
    pub reranker_seed: u64,
    /// Optional explicit per-chunk reranker scores.
    #[serde(default)]
    pub rerank_scores: Option<BTreeMap<String, f64>>,
    /// generator_id -> question -> answer.
    #[serde(default)]
    pub answers: BTreeMap<String, BTreeMap<String, String>>,
    /// When set, generators echo the first N characters of the context
    /// instead of using the answer table.
    #[serde(default)]
    pub echo_prefix_chars: Option<usize>,
}

pub struct MockServices {
    pub retriever: MockRetriever,
    pub reranker: MockReranker,
    pub generator: MockGenerator,
}

impl MockServices {
    pub fn from_fixtures(fixtures_path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(fixtures_path)
            .map_err(|e| Error::io(fixtures_path.display().to_string(), e))?;
        let fixtures: MockFixtures =
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("fixtures: {e}")))?;
        let base = fixtures_path.parent().unwrap_or_else(|| Path::new("."));
        let index = CorpusIndex::load_jsonl(&base.join(&fixtures.chunks_path))?;

        let reranker = match fixtures.rerank_scores {
            Some(table) => MockReranker::with_table(table),
            None => MockReranker::seeded(fixtures.reranker_seed),
        };
        let generator = match fixtures.echo_prefix_chars {
            Some(n) => MockGenerator::EchoPrefix(n),
            None => MockGenerator::Table(fixtures.answers),
        };
        Ok(Self {
            retriever: MockRetriever::new(&index),
            reranker,
            generator,
        })
    }
}

async fn handle_retrieve(
    State(services): State<Arc<MockServices>>,
    Json(request): Json<RetrieveRequest>,
) -> std::result::Result<Json<RetrieveResponse>, (StatusCode, String)> {
    let entries = services
        .retriever
        .retrieve(&request.query, request.top_k)
        .map_err(bad_request)?;
    Ok(Json(RetrieveResponse {
        chunk_ids: entries.iter().map(|e| e.chunk_id.clone()).collect(),
        scores: entries.iter().map(|e| e.score).collect(),
    }))
}

async fn handle_rerank(
    State(services): State<Arc<MockServices>>,
    Json(request): Json<RerankRequest>,
) -> std::result::Result<Json<RerankResponse>, (StatusCode, String)> {
    if request.documents.len() != request.chunk_ids.len() {
        return Err((
            StatusCode::BAD_REQUEST,
            "documents and chunk_ids must be parallel".into(),
        ));
    }
    let candidates: Vec<RankCandidate> = request
        .chunk_ids
        .iter()
        .zip(&request.documents)
        .map(|(chunk_id, rendered)| RankCandidate {
            chunk_id: chunk_id.clone(),
            rendered: rendered.clone(),
        })
        .collect();
    let scores = services
        .reranker
        .score(&request.query, &candidates)
        .map_err(bad_request)?;
    Ok(Json(RerankResponse { scores }))
}

async fn handle_generate(
    State(services): State<Arc<MockServices>>,
    Json(request): Json<GenerateRequest>,
) -> std::result::Result<Json<GenerateResponse>, (StatusCode, String)> {
    let answer = services
        .generator
        .generate(&request.question, &request.context, &request.generator_id)
        .map_err(bad_request)?;
    Ok(Json(GenerateResponse { answer }))
}

fn bad_request(e: Error) -> (StatusCode, String) {
    (StatusCode::BAD_REQUEST, e.to_string())
}

pub fn router(services: Arc<MockServices>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/retrieve", post(handle_retrieve))
        .route("/rerank", post(handle_rerank))
        .route("/generate", post(handle_generate))
        .with_state(services)
}

/// Bind and serve the mock services; prints the bound address, then blocks.
pub fn serve(services: MockServices, port: u16) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| Error::Config(format!("bind port {port}: {e}")))?;
        let addr = listener.local_addr().expect("bound listener");
        println!("mock-serve listening on http://{addr}");
        axum::serve(listener, router(Arc::new(services)))
            .await
            .map_err(|e| Error::Config(format!("serve: {e}")))
    })
}
