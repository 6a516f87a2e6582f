//! Query answering shared by the HTTP handlers and the `query` subcommand.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wordalchemy::corpus::CorpusSplits;
use wordalchemy::evaluator::{EvalError, LexicalBaseline, RankedCandidates, Ranker};
use wordalchemy::trainer::Checkpoint;

use crate::config::{Backend, ServiceConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWord {
    pub word: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub candidates: Vec<RankedWord>,
    pub lang: String,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("empty_definition")]
    EmptyDefinition,
    #[error("unknown_language")]
    UnknownLanguage,
    #[error("k_too_large")]
    KTooLarge,
    #[error("invalid_k")]
    InvalidK,
    #[error("unsupported_backend")]
    UnsupportedBackend,
    #[error("internal: {0}")]
    Internal(String),
}

impl QueryError {
    pub fn code(&self) -> &'static str {
        match self {
            QueryError::EmptyDefinition => "empty_definition",
            QueryError::UnknownLanguage => "unknown_language",
            QueryError::KTooLarge => "k_too_large",
            QueryError::InvalidK => "invalid_k",
            QueryError::UnsupportedBackend => "unsupported_backend",
            QueryError::Internal(_) => "internal",
        }
    }
}

impl From<EvalError> for QueryError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownLanguage(_) => QueryError::UnknownLanguage,
            other => QueryError::Internal(other.to_string()),
        }
    }
}

/// Loaded checkpoints and baseline index. Immutable once built.
#[derive(Debug)]
pub struct Engine {
    models: BTreeMap<String, Arc<Ranker>>,
    baseline: Option<LexicalBaseline>,
    digest: String,
    backend: Backend,
    default_k: usize,
    max_k: usize,
}

impl Engine {
    pub fn load(cfg: &ServiceConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let splits = match &cfg.corpus {
            Some(dir) => Some(
                CorpusSplits::load_dir(dir)
                    .with_context(|| format!("loading splits from {}", dir.display()))?
                    .0,
            ),
            None => None,
        };
        let mut ckpts = Vec::new();
        if cfg.backend.uses_model() {
            for spec in &cfg.checkpoints {
                let ckpt = Checkpoint::load(&spec.path).with_context(|| format!("loading {}", spec.path.display()))?;
                ckpts.push((ckpt, spec.langs.clone()));
            }
        }
        Self::from_parts(ckpts, splits.as_ref(), cfg)
    }

    /// Builds an engine from already loaded parts. Headword inventories come
    /// from `splits` when given, otherwise from each checkpoint.
    pub fn from_parts(
        ckpts: Vec<(Checkpoint, Option<Vec<String>>)>,
        splits: Option<&CorpusSplits>,
        cfg: &ServiceConfig,
    ) -> anyhow::Result<Self> {
        let mut models = BTreeMap::new();
        let mut digests = Vec::new();
        for (ckpt, langs) in ckpts {
            digests.push(ckpt.digest());
            let inventory = splits.map_or(&ckpt.headwords, |s| &s.headwords);
            let headwords: BTreeMap<String, Vec<String>> = match &langs {
                Some(ls) => ls
                    .iter()
                    .map(|l| match inventory.get(l) {
                        Some(ws) => Ok((l.clone(), ws.clone())),
                        None => bail!("no headwords for language {l:?}"),
                    })
                    .collect::<anyhow::Result<_>>()?,
                None => inventory.clone(),
            };
            if headwords.is_empty() {
                bail!("checkpoint has no headword inventory; pass a corpus split directory");
            }
            let ranker = Arc::new(Ranker::new(Arc::new(ckpt), &headwords)?);
            for lang in ranker.languages() {
                if models.insert(lang.clone(), ranker.clone()).is_some() {
                    bail!("language {lang:?} is served by more than one checkpoint");
                }
            }
        }
        let baseline = if cfg.backend.uses_baseline() {
            match splits {
                Some(s) => Some(LexicalBaseline::new(s)),
                None => bail!("the baseline needs a corpus split directory"),
            }
        } else {
            None
        };
        Ok(Self {
            models,
            baseline,
            digest: digests.join(","),
            backend: cfg.backend,
            default_k: cfg.default_k,
            max_k: cfg.max_k,
        })
    }

    /// Digest of the served checkpoint; comma-joined when several are loaded.
    pub fn checkpoint_digest(&self) -> &str {
        &self.digest
    }

    pub fn default_k(&self) -> usize {
        self.default_k
    }

    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self.models.keys().cloned().collect();
        if let Some(b) = &self.baseline {
            langs.extend(b.languages());
        }
        langs.sort();
        langs.dedup();
        langs
    }

    /// The ranker serving `lang`, if any.
    pub fn ranker(&self, lang: &str) -> Option<&Arc<Ranker>> {
        self.models.get(lang)
    }

    fn pick_backend(&self, requested: Option<Backend>, lang: &str) -> Result<Backend, QueryError> {
        match (self.backend, requested) {
            (_, Some(Backend::Both)) => Err(QueryError::UnsupportedBackend),
            (Backend::Both, Some(b)) => Ok(b),
            (Backend::Both, None) if self.models.contains_key(lang) => Ok(Backend::Model),
            (Backend::Both, None) => Ok(Backend::Baseline),
            (configured, Some(b)) if b != configured => Err(QueryError::UnsupportedBackend),
            (configured, _) => Ok(configured),
        }
    }

    fn check(&self, definition: &str, lang: &str, k: Option<i64>) -> Result<usize, QueryError> {
        if definition.trim().is_empty() {
            return Err(QueryError::EmptyDefinition);
        }
        let k = match k {
            None => self.default_k,
            Some(k) if k < 1 => return Err(QueryError::InvalidK),
            Some(k) if k as u64 > self.max_k as u64 => return Err(QueryError::KTooLarge),
            Some(k) => k as usize,
        };
        if !self.languages().iter().any(|l| l == lang) {
            return Err(QueryError::UnknownLanguage);
        }
        Ok(k)
    }

    /// Full ranking for a query, before the top-k cut.
    pub fn rank(&self, definition: &str, lang: &str, backend: Backend) -> Result<RankedCandidates, QueryError> {
        match backend {
            Backend::Model => {
                let ranker = self.models.get(lang).ok_or(QueryError::UnknownLanguage)?;
                Ok(ranker.score(definition, lang)?)
            }
            Backend::Baseline => {
                let base = self.baseline.as_ref().ok_or(QueryError::UnsupportedBackend)?;
                Ok(base.rank(definition, lang)?)
            }
            Backend::Both => Err(QueryError::UnsupportedBackend),
        }
    }

    pub fn query(
        &self,
        definition: &str,
        lang: &str,
        k: Option<i64>,
        backend: Option<Backend>,
    ) -> Result<QueryResponse, QueryError> {
        let k = self.check(definition, lang, k)?;
        let backend = self.pick_backend(backend, lang)?;
        let ranked = self.rank(definition, lang, backend)?;
        let candidates = ranked
            .top(k)
            .iter()
            .enumerate()
            .map(|(i, c)| RankedWord {
                word: c.word.clone(),
                score: c.score,
                rank: i + 1,
            })
            .collect();
        Ok(QueryResponse {
            candidates,
            lang: lang.to_string(),
            backend,
        })
    }
}
