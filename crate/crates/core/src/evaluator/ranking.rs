use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::normalize_definition;
use crate::model::{encode, DecoderCache, EncoderMemory, StepRequest};
use crate::tokenizer::{ExampleConfig, EOS_ID, INPUT_PREFIX, LABEL_PREFIX};
use crate::trainer::Checkpoint;

/// Decoder rows computed per call while walking a candidate trie.
const STEP_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub word: String,
    /// Mean log-probability per real label token.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub definition: String,
    pub lang: String,
    pub candidates: Vec<Candidate>,
}

/// Descending score, ties by ascending word.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.word.cmp(&b.word))
}

impl RankedCandidates {
    pub fn new(definition: &str, lang: &str, mut candidates: Vec<Candidate>) -> Self {
        candidates.sort_by(candidate_order);
        Self {
            definition: definition.to_string(),
            lang: lang.to_string(),
            candidates,
        }
    }

    pub fn top(&self, k: usize) -> &[Candidate] {
        &self.candidates[..k.min(self.candidates.len())]
    }
}

/// 1-based position of `target`.
pub fn rank_of_target(ranked: &RankedCandidates, target: &str) -> Result<usize, EvalError> {
    ranked
        .candidates
        .iter()
        .position(|c| c.word == target)
        .map(|i| i + 1)
        .ok_or_else(|| EvalError::TargetMissing(target.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Prefix tree over the label sequences of one language's headwords.
#[derive(Debug, Clone)]
struct CandidateTrie {
    words: Vec<String>,
    lengths: Vec<usize>,
    /// per node: (token, parent); node 0 is the empty prefix
    nodes: Vec<(u32, usize)>,
    children: Vec<Vec<usize>>,
    /// words whose label ends at the node
    terminal: Vec<Vec<usize>>,
}

impl CandidateTrie {
    fn build(words: &[String], labels: impl Fn(&str) -> Vec<u32>) -> Self {
        let mut t = CandidateTrie {
            words: words.to_vec(),
            lengths: Vec::with_capacity(words.len()),
            nodes: vec![(0, 0)],
            children: vec![Vec::new()],
            terminal: vec![Vec::new()],
        };
        let mut edges: HashMap<(usize, u32), usize> = HashMap::new();
        for (w, word) in words.iter().enumerate() {
            let ids = labels(word);
            t.lengths.push(ids.len());
            let mut cur = 0;
            for &id in &ids {
                cur = *edges.entry((cur, id)).or_insert_with(|| {
                    t.nodes.push((id, cur));
                    t.children.push(Vec::new());
                    t.terminal.push(Vec::new());
                    let n = t.nodes.len() - 1;
                    t.children[cur].push(n);
                    n
                });
            }
            t.terminal[cur].push(w);
        }
        t
    }
}

/// A checkpoint plus per-language candidate tries; answers ranking and
/// generation queries.
#[derive(Debug, Clone)]
pub struct Ranker {
    ckpt: Arc<Checkpoint>,
    tries: BTreeMap<String, CandidateTrie>,
}

impl Ranker {
    pub fn new(ckpt: Arc<Checkpoint>, headwords: &BTreeMap<String, Vec<String>>) -> Result<Self, EvalError> {
        let ecfg = ckpt.model_config.example_config();
        let mut tries = BTreeMap::new();
        for (lang, words) in headwords {
            if words.is_empty() {
                return Err(EvalError::NoHeadwords(lang.clone()));
            }
            let trie = CandidateTrie::build(words, |w| ckpt.tokenizer.label_ids(w, &ecfg));
            tries.insert(lang.clone(), trie);
        }
        Ok(Self { ckpt, tries })
    }

    pub fn checkpoint(&self) -> &Arc<Checkpoint> {
        &self.ckpt
    }

    pub fn languages(&self) -> Vec<String> {
        self.tries.keys().cloned().collect()
    }

    fn example_config(&self) -> ExampleConfig {
        self.ckpt.model_config.example_config()
    }

    fn encode_definition(&self, definition: &str, lang: &str) -> Result<EncoderMemory<f32>, EvalError> {
        let ecfg = self.example_config();
        let prefix = ecfg.task_prefixes.then_some(INPUT_PREFIX);
        let text = normalize_definition(definition, lang);
        let seq = self.ckpt.tokenizer.encode(&text, prefix, ecfg.max_input_len, true);
        Ok(encode(&self.ckpt.params, &self.ckpt.model_config, seq.real_ids())?)
    }

    /// Scores every headword of `lang` by its mean per-token log-likelihood
    /// under teacher forcing. Shared label prefixes are decoded once.
    pub fn score(&self, definition: &str, lang: &str) -> Result<RankedCandidates, EvalError> {
        let trie = self
            .tries
            .get(lang)
            .ok_or_else(|| EvalError::UnknownLanguage(lang.to_string()))?;
        let memory = self.encode_definition(definition, lang)?;
        let (params, cfg) = (&self.ckpt.params, &self.ckpt.model_config);
        let v = cfg.vocab_size;
        let mut cache = DecoderCache::new();
        let mut cum = vec![0.0f64; trie.nodes.len()];
        let mut scores = vec![f64::NEG_INFINITY; trie.words.len()];
        // decoder node computed for each internal trie node
        let mut dec_node: Vec<Option<usize>> = vec![None; trie.nodes.len()];
        let mut frontier = vec![0usize];
        while !frontier.is_empty() {
            let internal: Vec<usize> = frontier.iter().copied().filter(|&n| !trie.children[n].is_empty()).collect();
            let mut next = Vec::new();
            for chunk in internal.chunks(STEP_CHUNK) {
                let requests: Vec<StepRequest> = chunk
                    .iter()
                    .map(|&n| {
                        if n == 0 {
                            DecoderCache::<f32>::root()
                        } else {
                            let (token, parent) = trie.nodes[n];
                            StepRequest {
                                parent: Some(dec_node[parent].expect("parent decoded first")),
                                token,
                            }
                        }
                    })
                    .collect();
                let (ids, lp) = cache.step(params, cfg, &memory, &requests)?;
                for (row, (&n, &id)) in chunk.iter().zip(&ids).enumerate() {
                    dec_node[n] = Some(id);
                    let lp_row = &lp[row * v..(row + 1) * v];
                    for &c in &trie.children[n] {
                        cum[c] = cum[n] + lp_row[trie.nodes[c].0 as usize] as f64;
                        next.push(c);
                    }
                }
            }
            for &n in &frontier {
                for &w in &trie.terminal[n] {
                    scores[w] = cum[n] / trie.lengths[w] as f64;
                }
            }
            frontier = next;
        }
        let candidates = trie
            .words
            .iter()
            .zip(scores)
            .map(|(w, score)| Candidate { word: w.clone(), score })
            .collect();
        Ok(RankedCandidates::new(definition, lang, candidates))
    }

    /// Free decoding until eos or `max_label_len` tokens. The label prefix,
    /// when the model uses one, is forced and counts toward the score.
    pub fn generate(&self, definition: &str, lang: &str, mode: DecodeMode) -> Result<Generated, EvalError> {
        match mode {
            DecodeMode::Greedy => self.greedy(definition, lang),
            DecodeMode::Beam(w) => self.beam(definition, lang, w.max(1)),
        }
    }

    fn forced_prefix(&self) -> Vec<u32> {
        let ecfg = self.example_config();
        let mut forced = if ecfg.task_prefixes { self.ckpt.tokenizer.prefix_ids(LABEL_PREFIX) } else { Vec::new() };
        forced.truncate(ecfg.max_label_len - 1);
        forced
    }

    fn finish(&self, tokens: Vec<u32>, logp: f64, n_forced: usize) -> Generated {
        let body: Vec<u32> = tokens[n_forced.min(tokens.len())..]
            .iter()
            .copied()
            .filter(|&t| t != EOS_ID)
            .collect();
        Generated {
            word: self.ckpt.tokenizer.decode(&body).trim().to_string(),
            score: logp / tokens.len() as f64,
            tokens,
        }
    }

    fn greedy(&self, definition: &str, lang: &str) -> Result<Generated, EvalError> {
        let (params, cfg) = (&self.ckpt.params, &self.ckpt.model_config);
        let forced = self.forced_prefix();
        let memory = self.encode_definition(definition, lang)?;
        let mut cache = DecoderCache::new();
        let mut request = DecoderCache::<f32>::root();
        let (mut tokens, mut logp) = (Vec::new(), 0.0f64);
        while tokens.len() < cfg.max_label_len {
            let (ids, lp) = cache.step(params, cfg, &memory, &[request])?;
            let t = match forced.get(tokens.len()) {
                Some(&t) => t,
                // first maximum, i.e. the smallest id among ties
                None => (0..cfg.vocab_size).fold(0, |best, i| if lp[i] > lp[best] { i } else { best }) as u32,
            };
            logp += lp[t as usize] as f64;
            tokens.push(t);
            if t == EOS_ID {
                break;
            }
            request = StepRequest { parent: Some(ids[0]), token: t };
        }
        Ok(self.finish(tokens, logp, forced.len()))
    }

    fn beam(&self, definition: &str, lang: &str, width: usize) -> Result<Generated, EvalError> {
        let ecfg = self.example_config();
        let (params, cfg) = (&self.ckpt.params, &self.ckpt.model_config);
        let max_len = ecfg.max_label_len;
        let forced = self.forced_prefix();
        let memory = self.encode_definition(definition, lang)?;
        let mut cache = DecoderCache::new();

        #[derive(Clone)]
        struct Hyp {
            node: Option<usize>,
            next_input: u32,
            tokens: Vec<u32>,
            logp: f64,
        }
        let mut live = vec![Hyp {
            node: None,
            next_input: crate::tokenizer::PAD_ID,
            tokens: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        let v = cfg.vocab_size;
        for pos in 0..max_len {
            let requests: Vec<StepRequest> = live
                .iter()
                .map(|h| StepRequest {
                    parent: h.node,
                    token: h.next_input,
                })
                .collect();
            let (ids, lp) = cache.step(params, cfg, &memory, &requests)?;
            let mut expansions: Vec<(f64, usize, u32)> = Vec::new();
            for (r, h) in live.iter().enumerate() {
                let row = &lp[r * v..(r + 1) * v];
                if pos < forced.len() {
                    let t = forced[pos];
                    expansions.push((h.logp + row[t as usize] as f64, r, t));
                    continue;
                }
                let mut order: Vec<u32> = (0..v as u32).collect();
                order.sort_by(|&a, &b| {
                    row[b as usize]
                        .partial_cmp(&row[a as usize])
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &t in order.iter().take(width) {
                    expansions.push((h.logp + row[t as usize] as f64, r, t));
                }
            }
            expansions.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next_live = Vec::new();
            for (logp, r, t) in expansions {
                if next_live.len() + finished.len() >= width {
                    break;
                }
                let mut tokens = live[r].tokens.clone();
                tokens.push(t);
                let h = Hyp {
                    node: Some(ids[r]),
                    next_input: t,
                    tokens,
                    logp,
                };
                if t == EOS_ID || pos + 1 == max_len {
                    finished.push(h);
                } else {
                    next_live.push(h);
                }
            }
            if next_live.is_empty() {
                break;
            }
            live = next_live;
        }
        let norm = |h: &Hyp| h.logp / h.tokens.len() as f64;
        let best = finished
            .into_iter()
            .max_by(|a, b| norm(a).partial_cmp(&norm(b)).unwrap_or(Ordering::Equal).then(b.tokens.cmp(&a.tokens)))
            .expect("decoding yields a hypothesis");
        Ok(self.finish(best.tokens, best.logp, forced.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub word: String,
    /// Every emitted label token, forced prefix and eos included.
    pub tokens: Vec<u32>,
    pub score: f64,
}

/// One-off ranking of `lang`'s headwords.
pub fn score_candidates(
    ckpt: &Checkpoint,
    definition: &str,
    lang: &str,
    headwords: &BTreeMap<String, Vec<String>>,
) -> Result<RankedCandidates, EvalError> {
    let words = headwords
        .get(lang)
        .ok_or_else(|| EvalError::UnknownLanguage(lang.to_string()))?;
    let one = BTreeMap::from([(lang.to_string(), words.clone())]);
    Ranker::new(Arc::new(ckpt.clone()), &one)?.score(definition, lang)
}

pub fn generate(ckpt: &Checkpoint, definition: &str, lang: &str, mode: DecodeMode) -> Result<Generated, EvalError> {
    Ranker::new(Arc::new(ckpt.clone()), &BTreeMap::new())?.generate(definition, lang, mode)
}
