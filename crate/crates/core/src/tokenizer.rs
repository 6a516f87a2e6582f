//! Byte-level BPE tokenizer with fixed special tokens and the task prefixes.
//!
//! Token strings use the reversible byte-to-character mapping popularised by
//! GPT-2 so every token (including partial UTF-8 sequences) is a printable
//! string and the vocabulary serializes as plain JSON.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::WordDefPair;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const N_SPECIALS: u32 = 3;
/// Specials plus one symbol per byte.
pub const MIN_VOCAB_SIZE: usize = N_SPECIALS as usize + 256;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Prepended to definitions on the encoder side.
pub const INPUT_PREFIX: &str = "Definitions: ";
/// Prepended to headwords on the decoder side.
pub const LABEL_PREFIX: &str = "Word: ";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("vocab size {0} is below the minimum of {MIN_VOCAB_SIZE}")]
    VocabTooSmall(usize),
    #[error("invalid tokenizer file: {0}")]
    Invalid(String),
}

fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).unwrap();
            extra += 1;
            c
        };
    }
    table
}

fn bytes_to_token(bytes: &[u8], table: &[char; 256]) -> String {
    bytes.iter().map(|&b| table[b as usize]).collect()
}

/// Splits text into merge domains: every space starts a new chunk.
fn pre_tokenize(text: &str) -> impl Iterator<Item = &[u8]> {
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            i += 1;
            if i == bytes.len() || bytes[i] == b' ' {
                let chunk = &bytes[start..i];
                start = i;
                return Some(chunk);
            }
        }
        None
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub eos: u32,
    pub unk: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            pad: PAD_ID,
            eos: EOS_ID,
            unk: UNK_ID,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    merges: Vec<[String; 2]>,
    vocab: BTreeMap<String, u32>,
    specials: Specials,
    byte_fallback: bool,
}

/// Learned merge table plus vocabulary. Immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    id_bytes: Vec<Vec<u8>>,
    /// pair -> (rank, merged id)
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Padded id sequence with a real-token mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSeq {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.real_len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input: TokenSeq,
    pub labels: TokenSeq,
    pub lang: String,
}

/// Prefix and length settings for turning pairs into examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleConfig {
    pub task_prefixes: bool,
    pub max_input_len: usize,
    pub max_label_len: usize,
}

impl Tokenizer {
    fn byte_level() -> Self {
        let mut id_bytes = vec![Vec::new(); N_SPECIALS as usize];
        id_bytes.extend((0..=255u8).map(|b| vec![b]));
        Self {
            merges: Vec::new(),
            id_bytes,
            merge_ranks: HashMap::new(),
        }
    }

    /// Greedy byte-level BPE. Each round merges the most frequent adjacent
    /// pair (ties: lexicographically smallest pair of byte strings) until the
    /// vocabulary holds `vocab_size` tokens or no pair occurs twice.
    pub fn train<I, S>(corpus_text: I, vocab_size: usize) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if vocab_size < MIN_VOCAB_SIZE {
            return Err(TokenizerError::VocabTooSmall(vocab_size));
        }
        let mut tok = Self::byte_level();

        let mut chunk_counts: HashMap<Vec<u8>, usize> = HashMap::new();
        for line in corpus_text {
            for chunk in pre_tokenize(line.as_ref()) {
                *chunk_counts.entry(chunk.to_vec()).or_default() += 1;
            }
        }
        let mut chunks: Vec<(Vec<u32>, usize)> = chunk_counts
            .into_iter()
            .map(|(c, n)| (c.iter().map(|&b| b as u32 + N_SPECIALS).collect(), n))
            .collect();
        chunks.sort_unstable();

        let mut by_bytes: HashMap<Vec<u8>, u32> = tok
            .id_bytes
            .iter()
            .enumerate()
            .skip(N_SPECIALS as usize)
            .map(|(i, b)| (b.clone(), i as u32))
            .collect();

        while tok.id_bytes.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (syms, n) in &chunks {
                for w in syms.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += n;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tok.id_bytes[pa.0 as usize], &tok.id_bytes[pa.1 as usize]);
                    let kb = (&tok.id_bytes[pb.0 as usize], &tok.id_bytes[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let mut merged = tok.id_bytes[pair.0 as usize].clone();
            merged.extend_from_slice(&tok.id_bytes[pair.1 as usize]);
            let new_id = *by_bytes.entry(merged.clone()).or_insert_with(|| {
                tok.id_bytes.push(merged);
                (tok.id_bytes.len() - 1) as u32
            });
            tok.merge_ranks.insert(pair, (tok.merges.len(), new_id));
            tok.merges.push(pair);
            for (syms, _) in chunks.iter_mut() {
                if syms.len() >= 2 {
                    merge_in_place(syms, pair, new_id);
                }
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.id_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Printable token string for `id`.
    pub fn token(&self, id: u32) -> Option<String> {
        let table = byte_to_char_table();
        match id {
            PAD_ID => Some(PAD_TOKEN.into()),
            EOS_ID => Some(EOS_TOKEN.into()),
            UNK_ID => Some(UNK_TOKEN.into()),
            _ => self
                .id_bytes
                .get(id as usize)
                .map(|b| bytes_to_token(b, &table)),
        }
    }

    /// Unpadded token ids of `text` (no specials).
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32 + N_SPECIALS).collect();
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, (w[0], w[1]), id)))
                    .min();
                let Some((_, pair, id)) = best else { break };
                merge_in_place(&mut syms, pair, id);
            }
            out.extend(syms);
        }
        out
    }

    /// Tokens that a space-terminated `prefix` contributes in front of any
    /// text: its trailing space joins the first text chunk.
    pub fn prefix_ids(&self, prefix: &str) -> Vec<u32> {
        self.tokenize(prefix.strip_suffix(' ').unwrap_or(prefix))
    }

    /// Tokens of `prefix + text`, truncated (keeping the head) so that an
    /// optional trailing eos fits, then padded to `max_length`.
    ///
    /// # Panics
    /// If `max_length < 2`.
    pub fn encode(&self, text: &str, prefix: Option<&str>, max_length: usize, append_eos: bool) -> TokenSeq {
        assert!(max_length >= 2, "max_length must be at least 2");
        let mut ids = match prefix {
            Some(p) => self.tokenize(&format!("{p}{text}")),
            None => self.tokenize(text),
        };
        let budget = if append_eos { max_length - 1 } else { max_length };
        ids.truncate(budget);
        if append_eos {
            ids.push(EOS_ID);
        }
        let real = ids.len();
        ids.resize(max_length, PAD_ID);
        let mut mask = vec![1u8; real];
        mask.resize(max_length, 0);
        TokenSeq { ids, mask }
    }

    /// Inverse of tokenization; pad and eos are dropped and unknown ids become
    /// U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                PAD_ID | EOS_ID => {}
                _ => match self.id_bytes.get(id as usize) {
                    Some(b) if id >= N_SPECIALS => bytes.extend_from_slice(b),
                    _ => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                },
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Encoder input is the definition, decoder target the headword; the task
    /// prefixes are applied only when `cfg.task_prefixes` is set.
    pub fn make_example(&self, pair: &WordDefPair, cfg: &ExampleConfig) -> TrainingExample {
        let (ip, lp) = if cfg.task_prefixes {
            (Some(INPUT_PREFIX), Some(LABEL_PREFIX))
        } else {
            (None, None)
        };
        TrainingExample {
            input: self.encode(&pair.definition, ip, cfg.max_input_len, true),
            labels: self.encode(&pair.word, lp, cfg.max_label_len, true),
            lang: pair.lang.clone(),
        }
    }

    /// Decoder target ids (real tokens only, eos-terminated) for a headword.
    pub fn label_ids(&self, word: &str, cfg: &ExampleConfig) -> Vec<u32> {
        let prefix = cfg.task_prefixes.then_some(LABEL_PREFIX);
        self.encode(word, prefix, cfg.max_label_len, true).real_ids().to_vec()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("tokenizer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TokenizerError> {
        let file: TokenizerFile =
            serde_json::from_str(s).map_err(|e| TokenizerError::Invalid(e.to_string()))?;
        Self::from_file(file)
    }

    fn to_file(&self) -> TokenizerFile {
        let table = byte_to_char_table();
        let mut vocab = BTreeMap::new();
        for id in 0..self.id_bytes.len() as u32 {
            vocab.insert(self.token(id).unwrap(), id);
        }
        TokenizerFile {
            merges: self
                .merges
                .iter()
                .map(|&(a, b)| {
                    [
                        bytes_to_token(&self.id_bytes[a as usize], &table),
                        bytes_to_token(&self.id_bytes[b as usize], &table),
                    ]
                })
                .collect(),
            vocab,
            specials: Specials::default(),
            byte_fallback: true,
        }
    }

    fn from_file(file: TokenizerFile) -> Result<Self, TokenizerError> {
        if file.specials != Specials::default() {
            return Err(TokenizerError::Invalid("unexpected special ids".into()));
        }
        let table = byte_to_char_table();
        let char_to_byte: HashMap<char, u8> =
            table.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let n = file.vocab.len();
        let mut id_bytes: Vec<Option<Vec<u8>>> = vec![None; n];
        for (tok, &id) in &file.vocab {
            let slot = id_bytes
                .get_mut(id as usize)
                .ok_or_else(|| TokenizerError::Invalid(format!("id {id} out of range")))?;
            if slot.is_some() {
                return Err(TokenizerError::Invalid(format!("duplicate id {id}")));
            }
            *slot = Some(if id < N_SPECIALS {
                Vec::new()
            } else {
                tok.chars()
                    .map(|c| char_to_byte.get(&c).copied())
                    .collect::<Option<Vec<u8>>>()
                    .ok_or_else(|| TokenizerError::Invalid(format!("bad token {tok:?}")))?
            });
        }
        let id_bytes: Vec<Vec<u8>> = id_bytes
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| TokenizerError::Invalid("ids are not dense".into()))?;
        let mut tok = Self::byte_level();
        if id_bytes[..MIN_VOCAB_SIZE.min(n)] != tok.id_bytes[..MIN_VOCAB_SIZE.min(n)] || n < MIN_VOCAB_SIZE {
            return Err(TokenizerError::Invalid("byte symbols missing".into()));
        }
        tok.id_bytes = id_bytes;
        let lookup = |s: &str| -> Result<u32, TokenizerError> {
            file.vocab
                .get(s)
                .copied()
                .filter(|&id| id >= N_SPECIALS)
                .ok_or_else(|| TokenizerError::Invalid(format!("merge symbol {s:?} not in vocab")))
        };
        for [a, b] in &file.merges {
            let pair = (lookup(a)?, lookup(b)?);
            let merged = lookup(&format!("{a}{b}"))?;
            tok.merge_ranks.insert(pair, (tok.merges.len(), merged));
            tok.merges.push(pair);
        }
        Ok(tok)
    }
}

impl Serialize for Tokenizer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tokenizer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = TokenizerFile::deserialize(d)?;
        Self::from_file(file).map_err(serde::de::Error::custom)
    }
}

fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < syms.len() {
        if r + 1 < syms.len() && syms[r] == pair.0 && syms[r + 1] == pair.1 {
            syms[w] = new_id;
            r += 2;
        } else {
            syms[w] = syms[r];
            r += 1;
        }
        w += 1;
    }
    syms.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Tokenizer {
        let lines = [
            "to be unable to remember something",
            "to establish the identity of",
            "covered with water",
            "workplace consisting of a room or building where movies are made",
            "forget",
            "identify",
        ];
        Tokenizer::train(lines.iter(), 320).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let tok = Tokenizer::train(["aaab", "aab"], 260).unwrap();
        let a = b'a' as u32 + N_SPECIALS;
        assert_eq!(tok.merges()[0], (a, a));
        assert_eq!(tok.vocab_size(), 260);
        assert_eq!(tok.token(259).unwrap(), "aa");
    }

    #[test]
    fn ties_break_lexicographically() {
        let tok = Tokenizer::train(["xy", "xy", "ab", "ab"], 260).unwrap();
        let a = b'a' as u32 + N_SPECIALS;
        let b = b'b' as u32 + N_SPECIALS;
        assert_eq!(tok.merges()[0], (a, b));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let tok = Tokenizer::train(["abcdef"], 400).unwrap();
        assert_eq!(tok.vocab_size(), MIN_VOCAB_SIZE);
    }

    #[test]
    fn vocab_too_small() {
        assert_eq!(
            Tokenizer::train(["a"], 100).unwrap_err(),
            TokenizerError::VocabTooSmall(100)
        );
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(small(), small());
        assert_eq!(small().to_json(), small().to_json());
    }

    #[test]
    fn prefix_tokens_lead() {
        let tok = small();
        let p = tok.prefix_ids(LABEL_PREFIX);
        let e = tok.encode("forget", Some(LABEL_PREFIX), 16, true);
        assert_eq!(&e.ids[..p.len()], p.as_slice());
        // the headword keeps the leading space it has inside definitions
        assert_eq!(e.real_ids(), [p, tok.tokenize(" forget"), vec![EOS_ID]].concat());
    }

    #[test]
    fn truncation_keeps_head_and_ends_with_eos() {
        let tok = small();
        let long = "to be unable to remember something covered with water ".repeat(4);
        let e = tok.encode(&long, None, 8, true);
        assert_eq!(e.ids.len(), 8);
        assert_eq!(e.real_len(), 8);
        assert_eq!(e.ids[7], EOS_ID);
        assert_eq!(&e.ids[..7], &tok.tokenize(&long)[..7]);
        let e = tok.encode(&long, None, 8, false);
        assert_eq!(e.ids, tok.tokenize(&long)[..8].to_vec());
    }

    #[test]
    fn decode_pads_is_empty() {
        assert_eq!(small().decode(&[PAD_ID, PAD_ID]), "");
    }

    #[test]
    fn decode_unknown_id_is_replacement_char() {
        let tok = small();
        assert_eq!(tok.decode(&[UNK_ID]), "\u{FFFD}");
        assert_eq!(tok.decode(&[10_000]), "\u{FFFD}");
    }

    #[test]
    fn devanagari_round_trips() {
        let tok = small();
        let e = tok.encode("पानी", None, 32, true);
        assert_eq!(tok.decode(&e.ids), "पानी");
    }

    #[test]
    fn example_prefixes() {
        let tok = small();
        let cfg = ExampleConfig { task_prefixes: true, max_input_len: 32, max_label_len: 12 };
        let pair = WordDefPair::new("forget", "to be unable to remember something", "en");
        let ex = tok.make_example(&pair, &cfg);
        let ip = tok.prefix_ids(INPUT_PREFIX);
        let lp = tok.prefix_ids(LABEL_PREFIX);
        assert_eq!(&ex.input.ids[..ip.len()], ip.as_slice());
        assert_eq!(&ex.labels.ids[..lp.len()], lp.as_slice());
        assert_eq!(*ex.labels.real_ids().last().unwrap(), EOS_ID);
        assert_eq!(ex.input.ids.len(), 32);
        assert_eq!(ex.labels.ids.len(), 12);

        let multi = ExampleConfig { task_prefixes: false, ..cfg };
        let ex = tok.make_example(&pair, &multi);
        assert_eq!(ex.input.real_ids()[..ex.input.real_len() - 1], tok.tokenize(&pair.definition)[..]);
        assert_eq!(ex.labels.real_ids(), [tok.tokenize("forget"), vec![EOS_ID]].concat());
    }

    #[test]
    fn json_round_trip() {
        let tok = small();
        let back = Tokenizer::from_json(&tok.to_json()).unwrap();
        assert_eq!(back, tok);
        assert!(Tokenizer::from_json("{}").is_err());
    }

    #[test]
    fn vocab_is_bijective() {
        let tok = small();
        let mut seen = std::collections::HashSet::new();
        for id in 0..tok.vocab_size() as u32 {
            assert!(seen.insert(tok.token(id).unwrap()));
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC{0,40}") {
            let tok = small();
            let text = crate::corpus::normalize_whitespace(&s);
            let e = tok.encode(&text, None, 256, true);
            prop_assert_eq!(tok.decode(&e.ids), text);
        }

        #[test]
        fn mask_counts_real_tokens(s in "[a-z ]{0,60}", max_len in 2usize..24) {
            let tok = small();
            let e = tok.encode(&s, Some(INPUT_PREFIX), max_len, true);
            prop_assert_eq!(e.ids.len(), max_len);
            let non_pad = e.ids.iter().filter(|&&i| i != PAD_ID).count();
            prop_assert_eq!(e.mask.iter().map(|&m| m as usize).sum::<usize>(), non_pad);
            for (i, m) in e.ids.iter().zip(&e.mask) {
                prop_assert!(*m == 1 || *i == PAD_ID);
            }
        }
    }
}
