//! LLM gateway: prompt construction, chat/embedding backends (real HTTP or
//! deterministic mocks), a persistent response cache, and fixed-dimension
//! query embeddings.
//!
//! Native embeddings are reduced to the feature dimension by a seeded
//! Gaussian random projection and L2-normalized; the projection seed is
//! persisted with retriever checkpoints so encodings are bit-stable across
//! process restarts.

pub mod cache;
pub mod mock;
pub mod openai;
pub mod prompts;
pub mod summary;

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::RetrievalStage;
use crate::matrix::Matrix;
use cache::ResponseCache;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    BadStatus { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("backend failed after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        last: Box<GatewayError>,
    },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    EmbedDimMismatch { expected: usize, got: usize },
    #[error("embedding input produced a zero-norm vector")]
    ZeroNormEmbedding,
    #[error("response cache error: {0}")]
    CacheIo(String),
    #[error("gateway configuration error: {0}")]
    Config(String),
}

impl GatewayError {
    /// Backend-call failures are retryable; local validation is not.
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_)
                | GatewayError::BadStatus { .. }
                | GatewayError::MalformedResponse(_)
        )
    }
}

/// A chat-completion backend. Implementations must be pure enough that
/// caching by (id, temperature, prompt) is sound.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, temperature: f64) -> Result<String, GatewayError>;
}

/// A text-embedding backend producing native-dimension vectors.
pub trait EmbedBackend: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Backend selection, shared by chat and embedding sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    OpenAiCompatible { endpoint: String, model: String, api_key_env: String },
    Mock { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        // 3 attempts, exponential backoff starting at 1s.
        Self { attempts: 3, base_backoff_ms: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub chat: BackendKind,
    pub embedding: BackendKind,
    /// Sampling temperature in [0, 1].
    pub temperature: f64,
    /// Native dimension of the embedding backend (>= target_dim).
    pub embed_dim_native: usize,
    /// Target dimension after projection; must equal the feature dim.
    pub target_dim: usize,
    /// Seed of the Gaussian projection matrix, persisted with checkpoints.
    pub projection_seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Upper bound on concurrent in-flight backend requests.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_max_in_flight() -> usize {
    4
}

impl LlmConfig {
    pub fn mock(seed: u64, native_dim: usize, target_dim: usize) -> Self {
        Self {
            chat: BackendKind::Mock { seed },
            embedding: BackendKind::Mock { seed },
            temperature: 0.2,
            embed_dim_native: native_dim,
            target_dim,
            projection_seed: 7,
            cache_dir: None,
            retry: RetryPolicy { attempts: 3, base_backoff_ms: 1 },
            max_in_flight: 4,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::Config(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.embed_dim_native < self.target_dim {
            return Err(GatewayError::Config(format!(
                "native embedding dim {} below target dim {}",
                self.embed_dim_native, self.target_dim
            )));
        }
        if self.retry.attempts == 0 {
            return Err(GatewayError::Config("retry attempts must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fixed-dimension encoding of a reasoning response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub stage: RetrievalStage,
    /// Digest of the text that produced this embedding.
    pub source_hash: String,
}

/// Backend call and cache accounting, reported after every command that
/// touches the gateway.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub chat_backend_calls: u64,
    pub chat_cache_hits: u64,
    pub embed_backend_calls: u64,
    pub embed_cache_hits: u64,
    /// Crude whitespace-token count over prompts and responses.
    pub estimated_tokens: u64,
}

/// Counting semaphore bounding concurrent backend requests.
struct InFlightLimit {
    available: Mutex<usize>,
    signal: Condvar,
}

impl InFlightLimit {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n), signal: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut slots = self.available.lock().unwrap();
        while *slots == 0 {
            slots = self.signal.wait(slots).unwrap();
        }
        *slots -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limit.available.lock().unwrap() += 1;
        self.limit.signal.notify_one();
    }
}

pub struct LlmGateway {
    chat: Box<dyn ChatBackend>,
    embed: Box<dyn EmbedBackend>,
    temperature: f64,
    retry: RetryPolicy,
    projection: Matrix,
    projection_seed: u64,
    target_dim: usize,
    cache: ResponseCache,
    stats: Mutex<GatewayStats>,
    limit: InFlightLimit,
}

/// Deterministic Gaussian projection matrix (native_dim x target_dim).
pub fn projection_matrix(seed: u64, native_dim: usize, target_dim: usize) -> Matrix {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(native_dim, target_dim);
    for i in 0..native_dim {
        for j in 0..target_dim {
            m.set(i, j, StandardNormal.sample(&mut rng));
        }
    }
    m
}

fn sha_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    crate::graph::hex_prefix(&hasher.finalize(), 16)
}

fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl LlmGateway {
    pub fn from_config(config: &LlmConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let chat: Box<dyn ChatBackend> = match &config.chat {
            BackendKind::Mock { seed } => Box::new(mock::MockChat { seed: *seed }),
            BackendKind::OpenAiCompatible { endpoint, model, api_key_env } => {
                Box::new(openai::OpenAiChat::new(endpoint, model, api_key_env))
            }
        };
        let embed: Box<dyn EmbedBackend> = match &config.embedding {
            BackendKind::Mock { seed } => {
                Box::new(mock::MockEmbed { seed: *seed, dim: config.embed_dim_native })
            }
            BackendKind::OpenAiCompatible { endpoint, model, api_key_env } => Box::new(
                openai::OpenAiEmbed::new(endpoint, model, api_key_env, config.embed_dim_native),
            ),
        };
        Ok(Self::new(chat, embed, config)?)
    }

    pub fn new(
        chat: Box<dyn ChatBackend>,
        embed: Box<dyn EmbedBackend>,
        config: &LlmConfig,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        if embed.dim() != config.embed_dim_native {
            return Err(GatewayError::Config(format!(
                "embedding backend dim {} does not match embed_dim_native {}",
                embed.dim(),
                config.embed_dim_native
            )));
        }
        Ok(Self {
            chat,
            embed,
            temperature: config.temperature,
            retry: config.retry,
            projection: projection_matrix(
                config.projection_seed,
                config.embed_dim_native,
                config.target_dim,
            ),
            projection_seed: config.projection_seed,
            target_dim: config.target_dim,
            cache: ResponseCache::new(config.cache_dir.clone())?,
            stats: Mutex::new(GatewayStats::default()),
            limit: InFlightLimit::new(config.max_in_flight),
        })
    }

    pub fn stats(&self) -> GatewayStats {
        *self.stats.lock().unwrap()
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut attempt = 1;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_retryable() && attempt < self.retry.attempts => {
                    let backoff = self.retry.base_backoff_ms.saturating_mul(1 << (attempt - 1));
                    std::thread::sleep(Duration::from_millis(backoff));
                    attempt += 1;
                }
                Err(err) if err.is_retryable() => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(err),
                    })
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Full chat completion for `prompt`, cached by
    /// (backend id, temperature, prompt digest).
    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let key = ResponseCache::key(&[
            "chat",
            &self.chat.id(),
            &format!("{:?}", self.temperature),
            prompt,
        ]);
        if let Some(hit) = self.cache.get::<String>(&key)? {
            self.stats.lock().unwrap().chat_cache_hits += 1;
            return Ok(hit);
        }
        let _slot = self.limit.acquire();
        let response = self.with_retries(|| {
            self.stats.lock().unwrap().chat_backend_calls += 1;
            self.chat.complete(prompt, self.temperature)
        })?;
        self.cache.put(&key, "chat", &response)?;
        let mut stats = self.stats.lock().unwrap();
        stats.estimated_tokens += count_tokens(prompt) + count_tokens(&response);
        Ok(response)
    }

    /// Encode text to the target dimension: native embedding (cached), then
    /// the seeded projection, then L2 normalization.
    pub fn encode_text(
        &self,
        text: &str,
        stage: RetrievalStage,
    ) -> Result<QueryEmbedding, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let key = ResponseCache::key(&["embed", &self.embed.id(), text]);
        let native = if let Some(hit) = self.cache.get::<Vec<f64>>(&key)? {
            self.stats.lock().unwrap().embed_cache_hits += 1;
            hit
        } else {
            let _slot = self.limit.acquire();
            let fetched = self.with_retries(|| {
                self.stats.lock().unwrap().embed_backend_calls += 1;
                self.embed.embed(text)
            })?;
            if fetched.len() != self.projection.rows() {
                return Err(GatewayError::EmbedDimMismatch {
                    expected: self.projection.rows(),
                    got: fetched.len(),
                });
            }
            self.cache.put(&key, "embed", &fetched)?;
            self.stats.lock().unwrap().estimated_tokens += count_tokens(text);
            fetched
        };

        let mut vector = vec![0.0; self.target_dim];
        for (i, &x) in native.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = self.projection.row(i);
            for (j, v) in vector.iter_mut().enumerate() {
                *v += x * row[j];
            }
        }
        if !crate::matrix::l2_normalize(&mut vector) {
            return Err(GatewayError::ZeroNormEmbedding);
        }
        Ok(QueryEmbedding { vector, stage, source_hash: sha_hex(text) })
    }
}
