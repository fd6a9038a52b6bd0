use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::{EntryMeta, ResponseCache};
use super::content_hash;
use super::remote::RemoteClient;
use crate::error::{BackendError, Error, Result};
use crate::model::Embedding;
use crate::text::tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Remote,
    HashMock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub name: String,
    pub dimension: usize,
    pub kind: EmbedderKind,
}

impl EmbedderSpec {
    pub fn hash_mock(dimension: usize) -> Self {
        EmbedderSpec {
            name: format!("hash-mock-{dimension}"),
            dimension,
            kind: EmbedderKind::HashMock,
        }
    }
}

pub trait Embedder: Send + Sync {
    fn spec(&self) -> &EmbedderSpec;

    /// One unit vector per input, in input order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self
            .embed_texts(&[text.to_string()])?
            .pop()
            .expect("one vector per text"))
    }

    /// Number of texts sent to a remote service (0 for local embedders).
    fn remote_calls(&self) -> u64 {
        0
    }
}

/// Signed feature hashing of lowercase alphanumeric tokens.
///
/// Each token's SHA-256 digest gives a u64 `h` (first 8 bytes, little
/// endian); the token adds `+1` (top bit clear) or `-1` (top bit set) to
/// bucket `h % D`. Texts without tokens, or whose counts cancel, get the
/// reserved vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    spec: EmbedderSpec,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder {
            spec: EmbedderSpec::hash_mock(dimension),
        }
    }

    pub fn raw_vector(&self, text: &str) -> Vec<f64> {
        let dim = self.spec.dimension;
        let mut v = vec![0.0f64; dim];
        for token in tokens(text) {
            let digest = Sha256::digest(token.as_bytes());
            let mut head = [0u8; 8];
            head.copy_from_slice(&digest[..8]);
            let h = u64::from_le_bytes(head);
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % dim as u64) as usize] += sign;
        }
        v
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        Embedding::normalize(&self.raw_vector(text))
            .unwrap_or_else(|_| Embedding::reserved(self.spec.dimension))
    }
}

impl Embedder for HashEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Err(Error::Input("embed_texts needs at least one text".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint, cached per text.
pub struct RemoteEmbedder {
    spec: EmbedderSpec,
    client: Arc<RemoteClient>,
    cache: Option<Arc<ResponseCache>>,
    calls: AtomicU64,
}

impl RemoteEmbedder {
    pub fn new(spec: EmbedderSpec, client: Arc<RemoteClient>, cache: Option<Arc<ResponseCache>>) -> Self {
        RemoteEmbedder {
            spec,
            client,
            cache,
            calls: AtomicU64::new(0),
        }
    }

    fn key(&self, text: &str) -> String {
        content_hash("remote-embed", &self.spec.name, "embed-v1", text)
    }

    fn to_embedding(&self, raw: &[f32]) -> Result<Embedding> {
        if raw.len() != self.spec.dimension {
            return Err(crate::error::EmbeddingError::Dimension {
                expected: self.spec.dimension,
                actual: raw.len(),
            }
            .into());
        }
        match Embedding::normalize_f32(raw) {
            Ok(e) => Ok(e),
            Err(crate::error::EmbeddingError::Zero) => Ok(Embedding::reserved(self.spec.dimension)),
            Err(e) => Err(e.into()),
        }
    }
}

const EMBED_BATCH: usize = 64;

impl Embedder for RemoteEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Err(Error::Input("embed_texts needs at least one text".into()));
        }
        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            if text.trim().is_empty() {
                out[i] = Some(Embedding::reserved(self.spec.dimension));
                continue;
            }
            let cached = self
                .cache
                .as_ref()
                .and_then(|c| c.get(&self.key(text)))
                .and_then(|raw| serde_json::from_str::<Vec<f32>>(&raw).ok());
            match cached {
                Some(v) => out[i] = Some(self.to_embedding(&v)?),
                None => missing.push(i),
            }
        }
        for batch in missing.chunks(EMBED_BATCH) {
            let inputs: Vec<String> = batch.iter().map(|&i| texts[i].clone()).collect();
            self.calls.fetch_add(inputs.len() as u64, Ordering::Relaxed);
            let vectors = self.client.embeddings(&self.spec.name, &inputs)?;
            if vectors.len() != inputs.len() {
                return Err(BackendError::Protocol(format!(
                    "asked for {} embeddings, got {}",
                    inputs.len(),
                    vectors.len()
                ))
                .into());
            }
            for (&i, v) in batch.iter().zip(vectors) {
                if let Some(cache) = &self.cache {
                    let meta = EntryMeta {
                        backend: "remote-embed".into(),
                        model: self.spec.name.clone(),
                        template_version: "embed-v1".into(),
                        op: "embed".into(),
                    };
                    let body = serde_json::to_string(&v).expect("floats serialize");
                    if let Err(e) = cache.put(&self.key(&texts[i]), &meta, &body) {
                        log::warn!("embedding cache write failed: {e}");
                    }
                }
                out[i] = Some(self.to_embedding(&v)?);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }

    fn remote_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NORM_TOLERANCE;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::new(256);
        let a = e.embed("alpha").unwrap();
        assert_eq!(a, e.embed("alpha").unwrap());
        assert!((a.norm() - 1.0).abs() < NORM_TOLERANCE);
        assert!((a.cosine(&a) - 1.0).abs() < NORM_TOLERANCE);
    }

    #[test]
    fn bag_of_tokens() {
        let e = HashEmbedder::new(256);
        let a = e.embed_one("red apple");
        let b = e.embed_one("Apple, RED!");
        assert!((a.cosine(&b) - 1.0).abs() < NORM_TOLERANCE);
    }

    #[test]
    fn empty_text_gets_reserved_vector() {
        let e = HashEmbedder::new(8);
        let v = e.embed_one(" ... ");
        assert!(v.is_degenerate());
        assert!(e.embed_texts(&[]).is_err());
    }
}
