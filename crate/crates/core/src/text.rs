//! Corpus handling: whitespace tokenization, vocabularies, dataset splits and
//! padded minibatches.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of a vocabulary entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);
    pub const UNK: TokenId = TokenId(3);

    pub fn new(index: usize) -> Self {
        TokenId(u32::try_from(index).expect("token id fits in u32"))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Default maximum sentence length, in tokens, accepted by the corpus readers.
pub const DEFAULT_MAX_LEN: usize = 50;

pub fn tokenize(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the four special tokens.
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId::new(i)))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Ranks tokens by descending frequency, breaking ties lexicographically.
    /// `max_size` counts the special tokens; tokens seen fewer than
    /// `min_count` times are left out (and so encode to UNK).
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: Option<usize>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus {
            *counts.entry(tok).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Vocabulary::new();
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(SPECIAL_TOKENS.len()));
        for (tok, _) in ranked.into_iter().take(room) {
            vocab.push(tok.to_string());
        }
        vocab
    }

    /// Builds from an ordered token list whose first four entries are the
    /// special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(Error::invalid("vocabulary must start with <pad>, <s>, </s>, <unk>"));
        }
        let mut vocab = Vocabulary::new();
        for tok in tokens.into_iter().skip(4) {
            if vocab.ids.contains_key(&tok) {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{tok}`")));
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        self.ids.insert(tok.clone(), TokenId::new(self.tokens.len()));
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(TokenId::UNK))
            .collect()
    }

    pub fn encode_line(&self, line: &str) -> Vec<TokenId> {
        self.encode(&tokenize(line))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.token(id).ok_or(Error::OutOfRange {
                    what: "vocabulary",
                    index: id.index(),
                    size: self.len(),
                })
            })
            .collect()
    }

    pub fn decode_line(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    /// One token per line; line number (from 0) is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: "vocabulary entries must be non-empty and contain no whitespace".into(),
                });
            }
        }
        Self::from_tokens(tokens).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// What the corpus readers dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub lines: usize,
    pub kept: usize,
    pub invalid_encoding: usize,
    pub too_long: usize,
    pub empty: usize,
}

/// Splits raw bytes into lines, `None` marking lines that are not valid UTF-8.
pub fn split_lines(bytes: &[u8]) -> Vec<Option<String>> {
    if bytes.is_empty() {
        return Vec::new();
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .map(|line| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            std::str::from_utf8(line).ok().map(str::to_string)
        })
        .collect()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Tokenized sentences from raw text, dropping invalid, empty and overlong lines.
pub fn parse_corpus(bytes: &[u8], max_len: Option<usize>) -> (Vec<Vec<String>>, CorpusStats) {
    let mut stats = CorpusStats::default();
    let mut out = Vec::new();
    for line in split_lines(bytes) {
        stats.lines += 1;
        let Some(line) = line else {
            stats.invalid_encoding += 1;
            continue;
        };
        let toks: Vec<String> = tokenize(&line).into_iter().map(str::to_string).collect();
        if toks.is_empty() {
            stats.empty += 1;
        } else if max_len.is_some_and(|m| toks.len() > m) {
            stats.too_long += 1;
        } else {
            out.push(toks);
        }
    }
    stats.kept = out.len();
    (out, stats)
}

pub fn read_corpus(path: &Path, max_len: Option<usize>) -> Result<(Vec<Vec<String>>, CorpusStats)> {
    Ok(parse_corpus(&read_bytes(path)?, max_len))
}

pub type TokenPair = (Vec<String>, Vec<String>);

/// Line-aligned pairs; a pair is dropped when either side is invalid, empty
/// or too long.
pub fn parse_parallel(src: &[u8], tgt: &[u8], max_len: Option<usize>) -> Result<(Vec<TokenPair>, CorpusStats)> {
    let (src, tgt) = (split_lines(src), split_lines(tgt));
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            left: src.len(),
            right: tgt.len(),
        });
    }
    let mut stats = CorpusStats::default();
    let mut out = Vec::new();
    for (s, t) in src.into_iter().zip(tgt) {
        stats.lines += 1;
        let (Some(s), Some(t)) = (s, t) else {
            stats.invalid_encoding += 1;
            continue;
        };
        let s: Vec<String> = tokenize(&s).into_iter().map(str::to_string).collect();
        let t: Vec<String> = tokenize(&t).into_iter().map(str::to_string).collect();
        if s.is_empty() || t.is_empty() {
            stats.empty += 1;
        } else if max_len.is_some_and(|m| s.len() > m || t.len() > m) {
            stats.too_long += 1;
        } else {
            out.push((s, t));
        }
    }
    stats.kept = out.len();
    Ok((out, stats))
}

pub fn read_parallel(src: &Path, tgt: &Path, max_len: Option<usize>) -> Result<(Vec<TokenPair>, CorpusStats)> {
    parse_parallel(&read_bytes(src)?, &read_bytes(tgt)?, max_len)
}

/// Seeded shuffle followed by a contiguous train/validation/test cut.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = items.len();
    if n < 3 {
        return Err(Error::invalid(format!("cannot split {n} items three ways")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = ((b * n as f64).round() as usize).max(1);
    let mut n_test = ((c * n as f64).round() as usize).max(1);
    while n_val + n_test > n - 1 {
        if n_val >= n_test {
            n_val -= 1;
        } else {
            n_test -= 1;
        }
    }
    let n_train = n - n_val - n_test;
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| items[i].clone()).collect();
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

/// A padded batch of sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    /// `rows x max_len`, padded with PAD.
    pub ids: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    /// Position of each row in the input sentence list.
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn from_sentences(sentences: &[&[TokenId]], indices: Vec<usize>) -> Self {
        let width = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sentences.len());
        let mut mask = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut row = s.to_vec();
            row.resize(width, TokenId::PAD);
            ids.push(row);
            mask.push((0..width).map(|j| j < s.len()).collect());
        }
        Minibatch {
            ids,
            mask,
            lengths: sentences.iter().map(|s| s.len()).collect(),
            indices,
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Groups sentences into batches of at most `m`. With `seed`, the sentence
/// order is shuffled first (and batches are shuffled after bucketing);
/// without it the input order is kept. `sort_by_length` buckets similar
/// lengths together to reduce padding.
pub fn make_batches(sentences: &[Vec<TokenId>], m: usize, sort_by_length: bool, seed: Option<u64>) -> Result<Vec<Minibatch>> {
    if m == 0 {
        return Err(Error::invalid("minibatch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    if let Some(rng) = rng.as_mut() {
        order.shuffle(rng);
    }
    if sort_by_length {
        order.sort_by_key(|&i| sentences[i].len());
    }
    let mut batches: Vec<Minibatch> = order
        .chunks(m)
        .map(|chunk| {
            let rows: Vec<&[TokenId]> = chunk.iter().map(|&i| sentences[i].as_slice()).collect();
            Minibatch::from_sentences(&rows, chunk.to_vec())
        })
        .collect();
    if sort_by_length {
        if let Some(rng) = rng.as_mut() {
            batches.shuffle(rng);
        }
    }
    Ok(batches)
}
