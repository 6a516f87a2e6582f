use std::collections::{BTreeMap, HashMap};

use super::{Candidate, EvalError, RankedCandidates};
use crate::corpus::{normalize_definition, CorpusSplits};

/// Smoothed inverse document frequency: `ln((1 + n) / (1 + df)) + 1`.
pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

fn term_counts(text: &str) -> BTreeMap<&str, f64> {
    let mut tf = BTreeMap::new();
    for t in text.split_whitespace() {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf
}

#[derive(Debug, Clone, Default)]
struct LangIndex {
    headwords: Vec<String>,
    idf: HashMap<String, f64>,
    /// term -> (definition, unit-normalized tf-idf weight)
    postings: HashMap<String, Vec<(usize, f64)>>,
    /// headword index of each stored definition
    owner: Vec<usize>,
}

/// Retrieval baseline: cosine similarity of tf-idf vectors between the query
/// and every training definition; a headword scores the maximum over its
/// definitions, and headwords without training definitions score 0.
#[derive(Debug, Clone)]
pub struct LexicalBaseline {
    langs: BTreeMap<String, LangIndex>,
}

impl LexicalBaseline {
    pub fn new(splits: &CorpusSplits) -> Self {
        let mut langs = BTreeMap::new();
        for (lang, words) in &splits.headwords {
            let word_idx: HashMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
            let defs: Vec<_> = splits.train.iter().filter(|p| &p.lang == lang).collect();
            let counts: Vec<BTreeMap<&str, f64>> = defs.iter().map(|p| term_counts(&p.definition)).collect();
            let mut df: HashMap<&str, usize> = HashMap::new();
            for c in &counts {
                for t in c.keys() {
                    *df.entry(t).or_insert(0) += 1;
                }
            }
            let idf: HashMap<String, f64> = df
                .iter()
                .map(|(t, &d)| (t.to_string(), smoothed_idf(defs.len(), d)))
                .collect();
            let mut postings: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
            for (d, c) in counts.iter().enumerate() {
                let weights: Vec<(&str, f64)> = c.iter().map(|(t, tf)| (*t, tf * idf[*t])).collect();
                let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                for (t, w) in weights {
                    postings.entry(t.to_string()).or_default().push((d, w / norm));
                }
            }
            let owner = defs.iter().map(|p| word_idx[p.word.as_str()]).collect();
            langs.insert(
                lang.clone(),
                LangIndex {
                    headwords: words.clone(),
                    idf,
                    postings,
                    owner,
                },
            );
        }
        Self { langs }
    }

    pub fn languages(&self) -> Vec<String> {
        self.langs.keys().cloned().collect()
    }

    pub fn rank(&self, definition: &str, lang: &str) -> Result<RankedCandidates, EvalError> {
        let idx = self
            .langs
            .get(lang)
            .ok_or_else(|| EvalError::UnknownLanguage(lang.to_string()))?;
        if idx.owner.is_empty() {
            return Err(EvalError::NoTrainDefinitions(lang.to_string()));
        }
        let text = normalize_definition(definition, lang);
        let q: Vec<(&str, f64)> = term_counts(&text)
            .into_iter()
            .filter_map(|(t, tf)| idx.idf.get(t).map(|idf| (t, tf * idf)))
            .collect();
        let q_norm = q.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut word_scores = vec![0.0f64; idx.headwords.len()];
        if q_norm > 0.0 {
            let mut doc_scores: HashMap<usize, f64> = HashMap::new();
            for (t, w) in &q {
                for &(d, dw) in &idx.postings[*t] {
                    *doc_scores.entry(d).or_insert(0.0) += w / q_norm * dw;
                }
            }
            for (d, s) in doc_scores {
                let o = idx.owner[d];
                word_scores[o] = word_scores[o].max(s);
            }
        }
        let candidates = idx
            .headwords
            .iter()
            .zip(word_scores)
            .map(|(w, score)| Candidate { word: w.clone(), score })
            .collect();
        Ok(RankedCandidates::new(definition, lang, candidates))
    }
}

/// One-off baseline ranking.
pub fn lexical_overlap_baseline(definition: &str, splits: &CorpusSplits, lang: &str) -> Result<RankedCandidates, EvalError> {
    LexicalBaseline::new(splits).rank(definition, lang)
}
