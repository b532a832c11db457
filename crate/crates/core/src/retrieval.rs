//! Exact cosine-similarity index over the retrieval bank.
//!
//! The bank is small (on the order of a thousand items), so every query is a
//! full scan. Results are ordered by similarity descending with ties broken
//! by example id ascending, which makes rankings reproducible.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::backend::{embed, BackendError, Embedder, RetryPolicy};
use crate::model::{McqExample, RetrievalCandidate};

const MAGIC: &[u8; 8] = b"MASVIDX1";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding failed for {example_id}: {source}")]
    EmbeddingFailed { example_id: String, source: BackendError },
    #[error("zero vector for {0}")]
    ZeroVector(String),
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("empty bank")]
    EmptyBank,
    #[error("vector for {example_id} has dimension {got}, index expects {expected}")]
    DimensionMismatch { example_id: String, expected: usize, got: usize },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable set of vectors keyed by example id. Vectors are kept as given
/// and cosine similarity is computed in f64 at query time.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    norms: Vec<f64>,
}

fn norm(v: &[f32]) -> Option<f64> {
    let n = dot(v, v).sqrt();
    (n > 0.0 && n.is_finite()).then_some(n)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

impl VectorIndex {
    /// Builds an index from raw vectors. Zero vectors, ragged dimensions and
    /// duplicate ids are rejected.
    pub fn from_vectors(entries: Vec<(String, Vec<f32>)>) -> Result<Self, RetrievalError> {
        let dim = entries.first().map(|(_, v)| v.len()).ok_or(RetrievalError::EmptyBank)?;
        if dim == 0 {
            return Err(RetrievalError::Format("zero-dimensional vectors".into()));
        }
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut norms = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch { example_id: id, expected: dim, got: v.len() });
            }
            norms.push(norm(&v).ok_or_else(|| RetrievalError::ZeroVector(id.clone()))?);
            ids.push(id);
            vectors.push(v);
        }
        Ok(Self { dim, ids, vectors, norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i]
    }

    /// Top `n` entries by cosine similarity to `query`.
    pub fn query_vector(&self, query: &[f32], n: usize) -> Result<Vec<RetrievalCandidate>, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                example_id: "<query>".into(),
                expected: self.dim,
                got: query.len(),
            });
        }
        let qn = norm(query).ok_or_else(|| RetrievalError::ZeroVector("<query>".into()))?;
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (v, vn))| (dot(query, v) / (qn * vn), i))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        });
        Ok(scored
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(rank, (similarity, i))| RetrievalCandidate {
                example_id: self.ids[i].clone(),
                similarity,
                rerank_score: None,
                rank: rank + 1,
            })
            .collect())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), RetrievalError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            let len = u16::try_from(id.len()).map_err(|_| RetrievalError::Format(format!("id too long: {id}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an index; `expected_dim` rejects files of another dimension.
    pub fn read_from(mut r: impl Read, expected_dim: Option<usize>) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| RetrievalError::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|_| RetrievalError::Format("truncated header".into()))?;
        let dim = u32::from_le_bytes(b4) as usize;
        if let Some(expected) = expected_dim {
            if dim != expected {
                return Err(RetrievalError::Format(format!("dimension {dim}, expected {expected}")));
            }
        }
        r.read_exact(&mut b8).map_err(|_| RetrievalError::Format("truncated header".into()))?;
        let count = u64::from_le_bytes(b8);
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(|_| RetrievalError::Format("truncated entry".into()))?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut id).map_err(|_| RetrievalError::Format("truncated entry".into()))?;
            let id = String::from_utf8(id).map_err(|_| RetrievalError::Format("id is not UTF-8".into()))?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4).map_err(|_| RetrievalError::Format("truncated vector".into()))?;
                v.push(f32::from_le_bytes(b4));
            }
            entries.push((id, v));
        }
        if entries.is_empty() {
            return Err(RetrievalError::EmptyBank);
        }
        Self::from_vectors(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, RetrievalError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), expected_dim)
    }
}

/// Embeds every bank example's retrieval text and builds the index.
pub fn build_index(bank: &[McqExample], embedder: &dyn Embedder, retry: &RetryPolicy) -> Result<VectorIndex, RetrievalError> {
    if bank.is_empty() {
        return Err(RetrievalError::EmptyBank);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = bank.iter().find(|ex| !seen.insert(ex.id.as_str())) {
        return Err(RetrievalError::DuplicateId(dup.id.clone()));
    }
    let mut entries = Vec::with_capacity(bank.len());
    // batches keep request bodies bounded for HTTP embedders
    for chunk in bank.chunks(64) {
        let texts: Vec<String> = chunk.iter().map(McqExample::retrieval_text).collect();
        let vectors = embed(embedder, &texts, retry).result.map_err(|source| RetrievalError::EmbeddingFailed {
            example_id: chunk[0].id.clone(),
            source,
        })?;
        entries.extend(chunk.iter().map(|ex| ex.id.clone()).zip(vectors));
    }
    VectorIndex::from_vectors(entries)
}

/// Embeds `query_text` and returns the `min(n, len)` nearest entries.
pub fn query_top_n(
    index: &VectorIndex,
    query_text: &str,
    n: usize,
    embedder: &dyn Embedder,
    retry: &RetryPolicy,
) -> Result<Vec<RetrievalCandidate>, RetrievalError> {
    let outcome = embed(embedder, &[query_text.to_string()], retry);
    let mut vectors = outcome
        .result
        .map_err(|source| RetrievalError::EmbeddingFailed { example_id: "<query>".into(), source })?;
    index.query_vector(&vectors.remove(0), n)
}

/// The retrieval bank: examples plus their index, with ids kept in sync.
#[derive(Debug, Clone)]
pub struct RagBank {
    index: VectorIndex,
    examples: HashMap<String, McqExample>,
}

impl RagBank {
    pub fn build(examples: Vec<McqExample>, embedder: &dyn Embedder, retry: &RetryPolicy) -> Result<Self, RetrievalError> {
        let index = build_index(&examples, embedder, retry)?;
        Self::with_index(examples, index)
    }

    /// Pairs a prebuilt index with its examples; the id sets must be equal.
    pub fn with_index(examples: Vec<McqExample>, index: VectorIndex) -> Result<Self, RetrievalError> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for ex in examples {
            if by_id.contains_key(&ex.id) {
                return Err(RetrievalError::DuplicateId(ex.id));
            }
            by_id.insert(ex.id.clone(), ex);
        }
        if by_id.len() != index.len() || index.ids().iter().any(|id| !by_id.contains_key(id)) {
            return Err(RetrievalError::Format("index ids do not match the bank examples".into()));
        }
        Ok(Self { index, examples: by_id })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn get(&self, id: &str) -> Option<&McqExample> {
        self.examples.get(id)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{EmbedRequest, HashEmbedder};
    use crate::model::{AnswerLetter, McqExample};

    fn ex(id: &str, q: &str) -> McqExample {
        McqExample {
            id: id.into(),
            question: q.into(),
            options: AnswerLetter::ALL.iter().map(|l| (*l, format!("opt {l}"))).collect(),
            gold_answer: AnswerLetter::A,
            gold_explanation: String::new(),
            task_name: "t".into(),
            category: "c".into(),
            images: vec![],
        }
    }

    #[test]
    fn builds_one_entry_per_example() {
        let e = HashEmbedder::new(32, 42);
        let bank = vec![ex("a", "heart size"), ex("b", "lung fields"), ex("c", "rib fracture")];
        let index = build_index(&bank, &e, &RetryPolicy::immediate(0)).unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.dim(), 32);
        for (i, ex) in bank.iter().enumerate() {
            assert_eq!(index.vector(i), e.embed_one(&ex.retrieval_text()).as_slice());
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = HashEmbedder::new(32, 42);
        let bank = vec![ex("a", "x"), ex("a", "y")];
        assert!(matches!(build_index(&bank, &e, &RetryPolicy::immediate(0)), Err(RetrievalError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn zero_embedding_rejected() {
        struct Zero;
        impl Embedder for Zero {
            fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError> {
                Ok(req.texts.iter().map(|_| vec![0.0; 4]).collect())
            }
        }
        let bank = vec![ex("z", "anything")];
        assert!(matches!(build_index(&bank, &Zero, &RetryPolicy::immediate(0)), Err(RetrievalError::ZeroVector(id)) if id == "z"));
    }

    #[test]
    fn identical_text_ranks_first() {
        let e = HashEmbedder::new(64, 42);
        let bank = vec![ex("a", "heart size enlarged"), ex("b", "lung fields clear"), ex("c", "rib fracture left")];
        let index = build_index(&bank, &e, &RetryPolicy::immediate(0)).unwrap();
        let hits = query_top_n(&index, &bank[1].retrieval_text(), 2, &e, &RetryPolicy::immediate(0)).unwrap();
        assert_eq!(hits[0].example_id, "b");
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn n_larger_than_bank_returns_all() {
        let index = VectorIndex::from_vectors(vec![("x".into(), vec![1.0, 0.0]), ("y".into(), vec![0.0, 1.0])]).unwrap();
        let hits = index.query_vector(&[1.0, 1.0], 10).unwrap();
        assert_eq!(hits.len(), 2);
        // equal similarity: id order
        assert_eq!(hits[0].example_id, "x");
        assert_eq!(hits[1].example_id, "y");
    }

    #[test]
    fn binary_round_trip_and_rejections() {
        let index = VectorIndex::from_vectors(vec![("x".into(), vec![3.0, 4.0]), ("yy".into(), vec![0.0, 2.0])]).unwrap();
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MASVIDX1");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 20 + (2 + 1 + 8) + (2 + 2 + 8));
        assert_eq!(VectorIndex::read_from(&buf[..], Some(2)).unwrap(), index);
        assert!(matches!(VectorIndex::read_from(&buf[..], Some(3)), Err(RetrievalError::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(VectorIndex::read_from(&bad[..], None), Err(RetrievalError::Format(_))));
        assert!(VectorIndex::read_from(&buf[..buf.len() - 1], None).is_err());
    }
}
