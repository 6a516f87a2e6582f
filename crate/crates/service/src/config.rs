use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "WORDALCHEMY_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Model,
    Baseline,
    Both,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Model => "model",
            Backend::Baseline => "baseline",
            Backend::Both => "both",
        }
    }

    pub fn uses_model(self) -> bool {
        matches!(self, Backend::Model | Backend::Both)
    }

    pub fn uses_baseline(self) -> bool {
        matches!(self, Backend::Baseline | Backend::Both)
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model" => Ok(Backend::Model),
            "baseline" => Ok(Backend::Baseline),
            "both" => Ok(Backend::Both),
            other => Err(format!("unknown backend {other:?} (expected model, baseline or both)")),
        }
    }
}

/// One checkpoint file. `langs` restricts which of its languages it serves;
/// absent means all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub langs: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default)]
    pub checkpoints: Vec<CheckpointSpec>,
    /// Split directory. Supplies the baseline index and, when set, the
    /// headword inventories.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_k")]
    pub default_k: usize,
    #[serde(default = "default_max_k")]
    pub max_k: usize,
    #[serde(default)]
    pub backend: Backend,
    /// Directory of static files served under `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_k() -> usize {
    10
}

fn default_max_k() -> usize {
    1000
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            corpus: None,
            bind: default_bind(),
            default_k: default_k(),
            max_k: default_max_k(),
            backend: Backend::Model,
            static_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.checkpoints.iter_mut().for_each(|c| resolve(&mut c.path));
        cfg.corpus.iter_mut().for_each(resolve);
        cfg.static_dir.iter_mut().for_each(resolve);
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.checkpoints.is_empty() && self.corpus.is_none() {
            bail!("configure at least one checkpoint or a baseline corpus");
        }
        if self.backend.uses_model() && self.checkpoints.is_empty() {
            bail!("backend {} needs at least one checkpoint", self.backend);
        }
        if self.backend.uses_baseline() && self.corpus.is_none() {
            bail!("backend {} needs a corpus split directory", self.backend);
        }
        if self.default_k < 1 || self.default_k > self.max_k {
            bail!("need 1 <= default_k <= max_k, got {} and {}", self.default_k, self.max_k);
        }
        Ok(())
    }
}
