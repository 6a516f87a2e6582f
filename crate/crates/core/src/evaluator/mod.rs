//! Exhaustive candidate ranking, free decoding, rank metrics, multi-seed
//! evaluation and the lexical retrieval baseline.

mod baseline;
mod metrics;
mod ranking;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use baseline::{lexical_overlap_baseline, smoothed_idf, LexicalBaseline};
pub use metrics::{compute_metrics, mean_metrics, Metrics};
pub use ranking::{
    candidate_order, generate, rank_of_target, score_candidates, Candidate, DecodeMode, Generated, RankedCandidates,
    Ranker,
};

use crate::corpus::{CorpusSplits, WordDefPair};
use crate::model::ModelError;
use crate::trainer::Checkpoint;

/// Number of independently seeded checkpoints an evaluation averages over.
pub const N_EVAL_SEEDS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("no headwords for language {0:?}")]
    NoHeadwords(String),
    #[error("no training definitions for language {0:?}")]
    NoTrainDefinitions(String),
    #[error("target {0:?} is not among the candidates")]
    TargetMissing(String),
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("evaluation needs exactly {N_EVAL_SEEDS} seeds (one checkpoint per seed), got {0}")]
    SeedCount(usize),
    #[error("checkpoints disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
    Description,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Seen, Split::Unseen, Split::Description];

    pub fn pairs(self, splits: &CorpusSplits) -> &[WordDefPair] {
        match self {
            Split::Seen => &splits.seen_test,
            Split::Unseen => &splits.unseen_test,
            Split::Description => &splits.description_test,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Description => "description",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            "description" => Ok(Split::Description),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Per-query line of the optional rank dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub definition: String,
    pub target: String,
    pub rank: usize,
    pub top10: Vec<String>,
}

/// Ranks of every query of `pairs` under a ranking function.
pub fn rank_queries(
    pairs: &[WordDefPair],
    mut rank: impl FnMut(&WordDefPair) -> Result<RankedCandidates, EvalError>,
) -> Result<Vec<RankRecord>, EvalError> {
    pairs
        .iter()
        .map(|p| {
            let ranked = rank(p)?;
            Ok(RankRecord {
                definition: p.definition.clone(),
                target: p.word.clone(),
                rank: rank_of_target(&ranked, &p.word)?,
                top10: ranked.top(10).iter().map(|c| c.word.clone()).collect(),
            })
        })
        .collect()
}

pub fn write_rank_dump<W: Write>(records: &[RankRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub per_seed: Vec<SeedMetrics>,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: BTreeMap<Split, SplitReport>,
    /// Lexical-overlap baseline on the same queries, when requested.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline: BTreeMap<Split, Metrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Ranks of every query in each requested split under one checkpoint.
pub fn evaluate_single(
    ranker: &Ranker,
    splits: &CorpusSplits,
    which: &[Split],
) -> Result<BTreeMap<Split, Vec<RankRecord>>, EvalError> {
    which
        .iter()
        .filter(|s| !s.pairs(splits).is_empty())
        .map(|&s| Ok((s, rank_queries(s.pairs(splits), |p| ranker.score(&p.definition, &p.lang))?)))
        .collect()
}

fn check_compatible(ckpts: &[Checkpoint]) -> Result<(), EvalError> {
    if ckpts.len() != N_EVAL_SEEDS {
        return Err(EvalError::SeedCount(ckpts.len()));
    }
    let first = &ckpts[0];
    for c in &ckpts[1..] {
        if c.model_config != first.model_config {
            return Err(EvalError::Mismatch("model configs differ".into()));
        }
        let strip = |c: &Checkpoint| crate::trainer::TrainConfig { seed: 0, ..c.train_config.clone() };
        if strip(c) != strip(first) {
            return Err(EvalError::Mismatch("training configs differ beyond the seed".into()));
        }
        if c.tokenizer != first.tokenizer {
            return Err(EvalError::Mismatch("tokenizers differ".into()));
        }
        if c.manifest_digest != first.manifest_digest {
            return Err(EvalError::Mismatch("trained on different corpus splits".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Default)]
pub struct EvalOptions {
    pub splits: Vec<Split>,
    pub with_baseline: bool,
    /// Called with `(seed index, split, records)` after each split is ranked.
    pub dump: Option<Arc<dyn Fn(usize, Split, &[RankRecord]) + Send + Sync>>,
}

impl fmt::Debug for EvalOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvalOptions")
            .field("splits", &self.splits)
            .field("with_baseline", &self.with_baseline)
            .field("dump", &self.dump.is_some())
            .finish()
    }
}

/// Evaluates five checkpoints that differ only by training seed and reports
/// per-seed metrics with their mean, over the full per-language headword
/// lists of `splits`.
pub fn evaluate(ckpts: &[Checkpoint], splits: &CorpusSplits, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    check_compatible(ckpts)?;
    let which = if opts.splits.is_empty() { Split::ALL.to_vec() } else { opts.splits.clone() };
    let mut per_split: BTreeMap<Split, Vec<SeedMetrics>> = BTreeMap::new();
    for (i, ckpt) in ckpts.iter().enumerate() {
        let ranker = Ranker::new(Arc::new(ckpt.clone()), &splits.headwords)?;
        for (split, records) in evaluate_single(&ranker, splits, &which)? {
            if let Some(dump) = &opts.dump {
                dump(i, split, &records);
            }
            let ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
            per_split.entry(split).or_default().push(SeedMetrics {
                seed: ckpt.train_config.seed,
                metrics: compute_metrics(&ranks)?,
            });
        }
    }
    let mut report = EvalReport::default();
    for (split, per_seed) in per_split {
        let all: Vec<Metrics> = per_seed.iter().map(|s| s.metrics).collect();
        report.splits.insert(
            split,
            SplitReport {
                mean: mean_metrics(&all)?,
                per_seed,
            },
        );
    }
    if opts.with_baseline {
        let base = LexicalBaseline::new(splits);
        for &split in &which {
            let pairs = split.pairs(splits);
            if pairs.is_empty() {
                continue;
            }
            let records = rank_queries(pairs, |p| base.rank(&p.definition, &p.lang))?;
            let ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
            report.baseline.insert(split, compute_metrics(&ranks)?);
        }
    }
    Ok(report)
}
