//! Text embedding providers for the similarity baseline.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::RetrievalError;
use crate::render::word_tokens;

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, RetrievalError>;
    fn dimension(&self) -> usize;
    fn name(&self) -> &str;
}

/// Deterministic hashed bag-of-words: each lower-cased word token adds one
/// to bucket `sha256(token) mod dim`; the vector is then L2-normalised.
#[derive(Debug, Clone, Copy)]
pub struct HashedBow {
    dim: usize,
}

impl HashedBow {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let h = Sha256::digest(token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&h[..8]);
        (u64::from_le_bytes(b) % self.dim as u64) as usize
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for t in word_tokens(text) {
            v[self.bucket(&t)] += 1.0;
        }
        l2_normalize(&mut v);
        v
    }
}

impl Default for HashedBow {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashedBow {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "hashed-bow"
    }
}

pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// OpenAI-style `/embeddings` client: `{"model", "input": [...]}` in,
/// `data[i].embedding` out. Token read from the named environment variable.
pub struct LiveEmbedding {
    endpoint: String,
    model: String,
    dim: usize,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl LiveEmbedding {
    pub fn new(endpoint: &str, model: &str, dim: usize, key_env: &str, timeout: Duration) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            dim,
            token: std::env::var(key_env).ok().filter(|t| !t.is_empty()),
            client,
        })
    }
}

impl EmbeddingProvider for LiveEmbedding {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        let mut rb = self.client.post(&self.endpoint).json(&json!({"model": self.model, "input": texts}));
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        let resp = rb.send().map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RetrievalError::Provider(format!("HTTP {}", resp.status())));
        }
        let v: Value = resp.json().map_err(|e| RetrievalError::Provider(e.to_string()))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| RetrievalError::Provider("response lacks `data`".into()))?;
        let out: Vec<Vec<f32>> = data
            .iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).map(|x| x as f32).collect())
                    .unwrap_or_default()
            })
            .collect();
        if out.len() != texts.len() {
            return Err(RetrievalError::Provider(format!("expected {} embeddings, got {}", texts.len(), out.len())));
        }
        Ok(out)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "live"
    }
}

/// Memoises embeddings by exact text, so a changed headline is simply a new
/// key.
pub struct CachedEmbedder<P> {
    inner: P,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("embedding cache poisoned").len()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut m: Vec<&str> = texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
