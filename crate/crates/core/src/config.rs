//! Run configuration file and construction of pipeline dependencies from it.
//!
//! ```toml
//! clock = "fixed"            # or "system"
//! templates_dir = "prompts"  # optional
//!
//! [pipeline]
//! n_retrieve = 10
//! k_rerank = 5
//! confidence_threshold = 0.7
//! max_in_flight = 4
//! retry_limit = 2
//! seed = 0
//!
//! [retry]
//! base_delay_ms = 250
//! max_delay_ms = 8000
//! jitter = true
//!
//! [data]
//! rag_bank = "rag_bank.jsonl"
//! index = "rag_bank.idx"     # optional, built on the fly when absent
//!
//! [backend]
//! kind = "mock"              # or "http"
//! mock_script = "script.json"
//! embed_dim = 256
//! embed_seed = 42
//! fault_rate = 0.0
//! fault_seed = 0
//! base_url = "http://localhost:8000"
//! embed_model = "text-embedding"
//! timeout_secs = 60
//!
//! [backend.models]
//! rerank = "small-llm"
//! reasoning = "vision-llm"
//! confidence = "vision-llm"
//! revision = "vision-llm"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, Embedder, FaultInjector, Generator, HashEmbedder, HttpBackend, HttpSettings, MockScript,
    RetryPolicy, Role, ScriptedBackend,
};
use crate::datasets::{load_dataset, DatasetError};
use crate::model::{ConfigError, PipelineConfig};
use crate::orchestrator::PipelineDeps;
use crate::retrieval::{RagBank, RetrievalError, VectorIndex};
use crate::templates::Templates;
use crate::trace::{Clock, FixedClock, SystemClock};

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl RunConfigError {
    /// True when the failure came from talking to a model backend rather than
    /// from local files or settings.
    pub fn is_backend(&self) -> bool {
        match self {
            RunConfigError::Backend(e) => !matches!(e, BackendError::InvalidRequest(_)),
            RunConfigError::Retrieval(RetrievalError::EmbeddingFailed { .. }) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    /// Zero timestamps; result files are byte-stable.
    #[default]
    Fixed,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrySection {
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetrySection {
    fn default() -> Self {
        Self { base_delay_ms: 250, max_delay_ms: 8000, jitter: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub rag_bank: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub fault_rate: f64,
    pub fault_seed: u64,
    pub base_url: String,
    pub models: BTreeMap<Role, String>,
    pub embed_model: String,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock_script: None,
            embed_dim: 256,
            embed_seed: 42,
            fault_rate: 0.0,
            fault_seed: 0,
            base_url: "http://localhost:8000".into(),
            models: BTreeMap::new(),
            embed_model: String::new(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub retry: RetrySection,
    pub clock: ClockKind,
    pub templates_dir: Option<PathBuf>,
    pub data: DataSection,
    pub backend: BackendSection,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RunConfigError> {
        let file_err = |message: String| RunConfigError::File { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.templates_dir);
        resolve(base, &mut cfg.data.rag_bank);
        resolve(base, &mut cfg.data.index);
        resolve(base, &mut cfg.backend.mock_script);
        Ok(cfg)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retry_limit: self.pipeline.retry_limit,
            base_delay: Duration::from_millis(self.retry.base_delay_ms),
            max_delay: Duration::from_millis(self.retry.max_delay_ms),
            jitter: self.retry.jitter,
        }
    }

    pub fn templates(&self) -> Result<Templates, RunConfigError> {
        match &self.templates_dir {
            Some(dir) => Templates::with_overrides(dir)
                .map_err(|e| RunConfigError::File { path: dir.clone(), message: e.to_string() }),
            None => Ok(Templates::default()),
        }
    }

    fn http_backend(&self) -> Result<HttpBackend, BackendError> {
        HttpBackend::from_env(HttpSettings {
            base_url: self.backend.base_url.clone(),
            models: self.backend.models.clone(),
            embed_model: self.backend.embed_model.clone(),
            timeout: Duration::from_secs(self.backend.timeout_secs),
        })
    }

    /// Generator shared by every agent role, and the retrieval embedder.
    pub fn backends(&self) -> Result<(Arc<dyn Generator>, Arc<dyn Embedder>), RunConfigError> {
        let b = &self.backend;
        let (llm, embedder): (Arc<dyn Generator>, Arc<dyn Embedder>) = match b.kind {
            BackendKind::Mock => {
                let script = match &b.mock_script {
                    Some(path) => MockScript::load(path)?,
                    None => MockScript::default(),
                };
                let llm = ScriptedBackend::from_script(&script)?;
                let embedder = HashEmbedder::new(b.embed_dim, b.embed_seed);
                if b.fault_rate > 0.0 {
                    (
                        Arc::new(FaultInjector::new(llm, b.fault_rate, b.fault_seed)),
                        Arc::new(FaultInjector::new(embedder, b.fault_rate, b.fault_seed)),
                    )
                } else {
                    (Arc::new(llm), Arc::new(embedder))
                }
            }
            BackendKind::Http => {
                let http = Arc::new(self.http_backend()?);
                (http.clone(), http)
            }
        };
        Ok((llm, embedder))
    }

    /// Embedder used for the embedding-matching metric: the configured
    /// embedding backend without fault injection.
    pub fn metric_embedder(&self) -> Result<Arc<dyn Embedder>, RunConfigError> {
        Ok(match self.backend.kind {
            BackendKind::Mock => Arc::new(HashEmbedder::new(self.backend.embed_dim, self.backend.embed_seed)),
            BackendKind::Http => Arc::new(self.http_backend()?),
        })
    }

    /// Loads the RAG bank named in `[data]`, reading a saved index when one
    /// is configured and exists, building it otherwise.
    pub fn load_bank(&self, embedder: &dyn Embedder) -> Result<Option<RagBank>, RunConfigError> {
        let Some(path) = &self.data.rag_bank else { return Ok(None) };
        let examples = load_dataset(path)?.examples;
        let bank = match &self.data.index {
            Some(index) if index.exists() => RagBank::with_index(examples, VectorIndex::load(index, None)?)?,
            _ => RagBank::build(examples, embedder, &self.retry_policy())?,
        };
        Ok(Some(bank))
    }

    pub fn deps(&self) -> Result<PipelineDeps, RunConfigError> {
        let (llm, embedder) = self.backends()?;
        let bank = if self.pipeline.mode.uses_context() {
            self.load_bank(embedder.as_ref())?.map(Arc::new)
        } else {
            None
        };
        let clock: Arc<dyn Clock> = match self.clock {
            ClockKind::Fixed => Arc::new(FixedClock),
            ClockKind::System => Arc::new(SystemClock),
        };
        Ok(PipelineDeps {
            bank,
            embedder: Some(embedder),
            context_llm: llm.clone(),
            reasoning_llm: llm.clone(),
            validation_llm: llm,
            metric_embedder: self.metric_embedder()?,
            templates: self.templates()?,
            retry: self.retry_policy(),
            clock,
        })
    }
}
