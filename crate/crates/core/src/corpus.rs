//! Dictionary ingestion, normalization and the seen / unseen / description
//! split protocol.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_UNSEEN_WORD_FRACTION: f64 = 0.1;
pub const DEFAULT_SEEN_SAMPLE_SIZE: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: empty word")]
    EmptyWord { line: usize },
    #[error("line {line}: empty definition")]
    EmptyDefinition { line: usize },
    #[error("line {line}: language {lang:?} is not declared in the manifest")]
    UndeclaredLanguage { line: usize, lang: String },
    #[error("unseen word fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("language {lang:?}: fraction {fraction} leaves no word on one side of the split ({words} words)")]
    DegenerateSplit { lang: String, fraction: f64, words: usize },
    #[error("seen sample size {requested} exceeds train size {available}")]
    SeenSampleTooLarge { requested: usize, available: usize },
    #[error("cannot split an empty corpus")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One headword with one definition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WordDefPair {
    pub word: String,
    pub definition: String,
    pub lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl WordDefPair {
    pub fn new(word: &str, definition: &str, lang: &str) -> Self {
        Self {
            word: word.to_string(),
            definition: definition.to_string(),
            lang: lang.to_string(),
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub train: Vec<WordDefPair>,
    pub seen_test: Vec<WordDefPair>,
    pub unseen_test: Vec<WordDefPair>,
    pub description_test: Vec<WordDefPair>,
    /// Per-language sorted unique headwords across every split.
    pub headwords: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangStats {
    pub pairs: usize,
    pub unique_words: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_pairs: usize,
    pub n_unique_words: usize,
    pub per_lang: BTreeMap<String, LangStats>,
}

/// Collapses whitespace runs to one space and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalizes one pair the way the parser does: whitespace collapsed, and
/// English definitions lowercased.
pub fn normalize_pair(pair: &mut WordDefPair) {
    pair.word = normalize_whitespace(&pair.word);
    pair.definition = normalize_definition(&pair.definition, &pair.lang);
    pair.lang = pair.lang.trim().to_string();
}

/// Query-side normalization, identical to what stored definitions receive.
pub fn normalize_definition(text: &str, lang: &str) -> String {
    let d = normalize_whitespace(text);
    if lang == "en" {
        d.to_lowercase()
    } else {
        d
    }
}

#[derive(Deserialize)]
struct RawPair {
    word: String,
    definition: String,
    lang: String,
    #[serde(default)]
    source: Option<String>,
}

/// Parses the JSON-lines corpus format, skipping pairs whose language does
/// not match `lang_filter`.
pub fn parse_dictionary<R: BufRead>(
    source: R,
    lang_filter: Option<&str>,
) -> Result<Vec<WordDefPair>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPair = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut pair = WordDefPair {
            word: raw.word,
            definition: raw.definition,
            lang: raw.lang,
            source: raw.source,
        };
        normalize_pair(&mut pair);
        if pair.word.is_empty() {
            return Err(CorpusError::EmptyWord { line: line_no });
        }
        if pair.definition.is_empty() {
            return Err(CorpusError::EmptyDefinition { line: line_no });
        }
        if lang_filter.is_some_and(|f| f != pair.lang) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}

/// Human-written description queries. Same format as the dictionary; these
/// pairs are only ever attached as `description_test`.
pub fn load_description_set<R: BufRead>(source: R) -> Result<Vec<WordDefPair>, CorpusError> {
    parse_dictionary(source, None)
}

pub fn write_jsonl<W: Write>(pairs: &[WordDefPair], mut out: W) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn corpus_stats(pairs: &[WordDefPair]) -> CorpusStats {
    let mut words: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut per_lang: BTreeMap<String, LangStats> = BTreeMap::new();
    for p in pairs {
        per_lang.entry(p.lang.clone()).or_default().pairs += 1;
        words.entry(&p.lang).or_default().insert(&p.word);
    }
    for (lang, set) in &words {
        per_lang.get_mut(*lang).unwrap().unique_words = set.len();
    }
    CorpusStats {
        n_pairs: pairs.len(),
        n_unique_words: per_lang.values().map(|s| s.unique_words).sum(),
        per_lang,
    }
}

fn build_headwords<'a>(pairs: impl Iterator<Item = &'a WordDefPair>) -> BTreeMap<String, Vec<String>> {
    let mut sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in pairs {
        sets.entry(p.lang.clone()).or_default().insert(p.word.clone());
    }
    sets.into_iter()
        .map(|(l, s)| (l, s.into_iter().collect()))
        .collect()
}

/// Word-level held-out split: a `unseen_word_fraction` share of each
/// language's headwords (with all their definitions) forms the unseen test
/// set, the rest is train, and the seen test set is a sample of train pairs.
pub fn split_corpus(
    pairs: &[WordDefPair],
    unseen_word_fraction: f64,
    seen_sample_size: usize,
    seed: u64,
) -> Result<CorpusSplits, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::Empty);
    }
    if !(unseen_word_fraction > 0.0 && unseen_word_fraction < 1.0) {
        return Err(CorpusError::BadFraction(unseen_word_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_lang = build_headwords(pairs.iter());
    let mut held_out: HashSet<(&str, &str)> = HashSet::new();
    for (lang, words) in &by_lang {
        let n = words.len();
        let k = (unseen_word_fraction * n as f64).round() as usize;
        if k == 0 || k >= n {
            return Err(CorpusError::DegenerateSplit {
                lang: lang.clone(),
                fraction: unseen_word_fraction,
                words: n,
            });
        }
        let mut order: Vec<&str> = words.iter().map(String::as_str).collect();
        order.shuffle(&mut rng);
        held_out.extend(order[..k].iter().map(|w| (lang.as_str(), *w)));
    }

    let (unseen_test, train): (Vec<_>, Vec<_>) = pairs
        .iter()
        .cloned()
        .partition(|p| held_out.contains(&(p.lang.as_str(), p.word.as_str())));

    if seen_sample_size > train.len() {
        return Err(CorpusError::SeenSampleTooLarge {
            requested: seen_sample_size,
            available: train.len(),
        });
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    let mut chosen = idx[..seen_sample_size].to_vec();
    chosen.sort_unstable();
    let seen_test = chosen.iter().map(|&i| train[i].clone()).collect();

    Ok(CorpusSplits {
        train,
        seen_test,
        unseen_test,
        description_test: Vec::new(),
        headwords: by_lang,
        seed,
    })
}

impl CorpusSplits {
    /// Attaches a description set and extends the headword inventory with its
    /// targets.
    pub fn with_descriptions(mut self, descriptions: Vec<WordDefPair>) -> Self {
        self.description_test = descriptions;
        self.rebuild_headwords();
        self
    }

    pub fn rebuild_headwords(&mut self) {
        self.headwords = build_headwords(
            self.train
                .iter()
                .chain(&self.seen_test)
                .chain(&self.unseen_test)
                .chain(&self.description_test),
        );
    }

    pub fn languages(&self) -> Vec<String> {
        self.headwords.keys().cloned().collect()
    }

    /// Exhaustive check of the split invariants; returns a description of the
    /// first violation.
    pub fn validate(&self) -> Result<(), String> {
        let train_pairs: HashSet<&WordDefPair> = self.train.iter().collect();
        let train_words: HashSet<(&str, &str)> = self
            .train
            .iter()
            .map(|p| (p.lang.as_str(), p.word.as_str()))
            .collect();
        if let Some(p) = self.seen_test.iter().find(|p| !train_pairs.contains(p)) {
            return Err(format!("seen pair not in train: {p:?}"));
        }
        if let Some(p) = self.unseen_test.iter().find(|p| train_pairs.contains(p)) {
            return Err(format!("unseen pair also in train: {p:?}"));
        }
        if let Some(p) = self
            .unseen_test
            .iter()
            .find(|p| train_words.contains(&(p.lang.as_str(), p.word.as_str())))
        {
            return Err(format!("unseen word also a train word: {p:?}"));
        }
        let all = self
            .train
            .iter()
            .chain(&self.seen_test)
            .chain(&self.unseen_test)
            .chain(&self.description_test);
        for p in all {
            let ok = self
                .headwords
                .get(&p.lang)
                .is_some_and(|ws| ws.binary_search(&p.word).is_ok());
            if !ok {
                return Err(format!("headword missing: {p:?}"));
            }
        }
        Ok(())
    }

    /// Writes `train.jsonl`, `seen_test.jsonl`, `unseen_test.jsonl`,
    /// `description_test.jsonl` and `splits.json` into `dir`.
    pub fn save_dir(&self, dir: &Path, params: &SplitParams) -> Result<SplitsManifest, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (name, pairs) in self.named_sets() {
            let mut buf = Vec::new();
            write_jsonl(pairs, &mut buf).expect("writing to memory");
            let path = dir.join(format!("{name}.jsonl"));
            std::fs::write(&path, &buf).map_err(|e| CorpusError::io(&path, e))?;
            files.insert(name.to_string(), (pairs.len(), hex::encode(Sha256::digest(&buf))));
        }
        let manifest = SplitsManifest {
            seed: self.seed,
            unseen_word_fraction: params.unseen_word_fraction,
            seen_sample_size: params.seen_sample_size,
            counts: files.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
            file_digests: files.into_iter().map(|(k, v)| (k, v.1)).collect(),
        };
        let path = dir.join("splits.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| CorpusError::io(&path, e))?;
        Ok(manifest)
    }

    /// Reloads a directory written by [`CorpusSplits::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<(Self, SplitsManifest), CorpusError> {
        let path = dir.join("splits.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
        let manifest: SplitsManifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        let read = |name: &str| -> Result<Vec<WordDefPair>, CorpusError> {
            let path = dir.join(format!("{name}.jsonl"));
            match std::fs::File::open(&path) {
                Ok(f) => parse_dictionary(std::io::BufReader::new(f), None),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
                Err(e) => Err(CorpusError::io(&path, e)),
            }
        };
        let mut splits = CorpusSplits {
            train: read("train")?,
            seen_test: read("seen_test")?,
            unseen_test: read("unseen_test")?,
            description_test: read("description_test")?,
            headwords: BTreeMap::new(),
            seed: manifest.seed,
        };
        splits.rebuild_headwords();
        Ok((splits, manifest))
    }

    fn named_sets(&self) -> [(&'static str, &[WordDefPair]); 4] {
        [
            ("train", &self.train),
            ("seen_test", &self.seen_test),
            ("unseen_test", &self.unseen_test),
            ("description_test", &self.description_test),
        ]
    }

    /// SHA-256 over the canonical JSON-lines serialization of every split.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, pairs) in self.named_sets() {
            h.update(name.as_bytes());
            let mut buf = Vec::new();
            write_jsonl(pairs, &mut buf).expect("writing to memory");
            h.update((buf.len() as u64).to_le_bytes());
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub unseen_word_fraction: f64,
    pub seen_sample_size: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            unseen_word_fraction: DEFAULT_UNSEEN_WORD_FRACTION,
            seen_sample_size: DEFAULT_SEEN_SAMPLE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitsManifest {
    pub seed: u64,
    pub unseen_word_fraction: f64,
    pub seen_sample_size: usize,
    pub counts: BTreeMap<String, usize>,
    pub file_digests: BTreeMap<String, String>,
}

/// Declares the corpus languages and where each language's files live.
///
/// ```json
/// {"languages": [{"lang": "en", "path": "en.jsonl"}], "description": [{"lang": "en", "path": "desc.jsonl"}]}
/// ```
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub languages: Vec<ManifestEntry>,
    #[serde(default)]
    pub description: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub lang: String,
    pub path: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in m.languages.iter_mut().chain(m.description.iter_mut()) {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        if m.languages.is_empty() {
            return Err(CorpusError::Manifest("no languages declared".into()));
        }
        Ok(m)
    }

    pub fn declared(&self) -> BTreeSet<&str> {
        self.languages.iter().map(|e| e.lang.as_str()).collect()
    }

    fn read_entries(&self, entries: &[ManifestEntry]) -> Result<Vec<WordDefPair>, CorpusError> {
        let declared = self.declared();
        let mut out = Vec::new();
        for e in entries {
            let f = std::fs::File::open(&e.path).map_err(|err| CorpusError::io(&e.path, err))?;
            let all = parse_dictionary(std::io::BufReader::new(f), None)?;
            for (i, p) in all.into_iter().enumerate() {
                if !declared.contains(p.lang.as_str()) {
                    return Err(CorpusError::UndeclaredLanguage {
                        line: i + 1,
                        lang: p.lang,
                    });
                }
                if p.lang == e.lang {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    /// All dictionary pairs of every declared language, in manifest order.
    pub fn read_pairs(&self) -> Result<Vec<WordDefPair>, CorpusError> {
        self.read_entries(&self.languages)
    }

    pub fn read_descriptions(&self) -> Result<Vec<WordDefPair>, CorpusError> {
        self.read_entries(&self.description)
    }
}
