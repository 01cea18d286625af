//! Document ingestion and chunking.
//!
//! Articles are split into chunks of at most 100 units, where a unit is a
//! whitespace-delimited word for most languages and a single Unicode scalar
//! value for the character-segmented languages (zh, ja, th by default).
//! The article title travels with every chunk and is prepended at render
//! time, so retrievers, rerankers, and generators all see `"{title}. {text}"`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHUNK_UNITS: usize = 100;

/// Languages chunked by Unicode scalar count rather than whitespace words.
pub fn default_char_segmented() -> BTreeSet<String> {
    ["zh", "ja", "th"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub language: String,
    pub index: usize,
}

impl DocumentChunk {
    pub fn chunk_id_for(doc_id: &str, index: usize) -> String {
        format!("{doc_id}#{index}")
    }
}

/// The exact string every retriever/reranker/generator sees for a chunk.
pub fn render_chunk_text(chunk: &DocumentChunk) -> String {
    format!("{}. {}", chunk.title, chunk.text)
}

/// Split a document into chunks of at most [`CHUNK_UNITS`] units.
///
/// Chunk texts are slices of the trimmed body, so word-internal whitespace
/// is preserved and concatenating the chunks (with the original inter-chunk
/// separators) reproduces the trimmed body.
pub fn chunk_document(
    doc: &RawDocument,
    char_segmented_languages: &BTreeSet<String>,
) -> Result<Vec<DocumentChunk>> {
    let body = doc.body.trim();
    if body.is_empty() {
        return Err(Error::InvalidDocument {
            doc_id: doc.doc_id.clone(),
            reason: "body is empty after trimming".into(),
        });
    }

    let texts = if char_segmented_languages.contains(&doc.language) {
        split_by_scalars(body)
    } else {
        split_by_words(body)
    };

    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(index, text)| DocumentChunk {
            chunk_id: DocumentChunk::chunk_id_for(&doc.doc_id, index),
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text,
            language: doc.language.clone(),
            index,
        })
        .collect())
}

fn split_by_scalars(body: &str) -> Vec<String> {
    let chars: Vec<char> = body.chars().collect();
    chars
        .chunks(CHUNK_UNITS)
        .map(|c| c.iter().collect())
        .collect()
}

fn split_by_words(body: &str) -> Vec<String> {
    // Byte span of each maximal run of non-whitespace.
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, ch) in body.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, body.len()));
    }

    spans
        .chunks(CHUNK_UNITS)
        .map(|group| {
            let (s, _) = group[0];
            let (_, e) = group[group.len() - 1];
            body[s..e].to_string()
        })
        .collect()
}

/// In-memory chunk lookup by chunk id.
#[derive(Debug, Default, Clone)]
pub struct CorpusIndex {
    chunks: BTreeMap<String, DocumentChunk>,
}

impl CorpusIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_chunks(chunks: impl IntoIterator<Item = DocumentChunk>) -> Self {
        let mut index = Self::new();
        for chunk in chunks {
            index.insert(chunk);
        }
        index
    }

    pub fn insert(&mut self, chunk: DocumentChunk) {
        self.chunks.insert(chunk.chunk_id.clone(), chunk);
    }

    pub fn get(&self, chunk_id: &str) -> Option<&DocumentChunk> {
        self.chunks.get(chunk_id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DocumentChunk> {
        self.chunks.values()
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        Ok(Self::from_chunks(read_chunks_jsonl(path)?))
    }
}

pub fn read_documents_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    read_jsonl(path)
}

pub fn read_chunks_jsonl(path: &Path) -> Result<Vec<DocumentChunk>> {
    read_jsonl(path)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for record in records {
        let line = serde_json::to_string(record).expect("serializable record");
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Chunk every document in a corpus file, checking doc_id uniqueness.
pub fn chunk_corpus(
    docs: &[RawDocument],
    char_segmented_languages: &BTreeSet<String>,
) -> Result<Vec<DocumentChunk>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for doc in docs {
        if doc.doc_id.is_empty() {
            return Err(Error::InvalidDocument {
                doc_id: "<empty>".into(),
                reason: "doc_id is empty".into(),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::InvalidDocument {
                doc_id: doc.doc_id.clone(),
                reason: "duplicate doc_id in corpus file".into(),
            });
        }
        out.extend(chunk_document(doc, char_segmented_languages)?);
    }
    Ok(out)
}
