//! Word-level tokenization, corpus vocabularies, pair encoding and MLM
//! masking.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::hash::fnv1a64;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const VOCAB_HEADER: &str = "#recobert-vocab v1";
pub const DEFAULT_TITLE_CAP: usize = 32;
pub const DEFAULT_MAX_LEN: usize = 256;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("no token reaches the minimum frequency")]
    EmptyVocabulary,
    #[error("{0} side tokenizes to zero tokens")]
    EmptySide(&'static str),
    #[error("max_len {0} too small; need at least 4")]
    MaxLenTooSmall(usize),
    #[error("bad vocabulary file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// NFKC, lowercase, split on whitespace, and split punctuation into
/// single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let norm: String = text.nfkc().collect::<String>().to_lowercase();
    let mut tokens = Vec::new();
    for word in norm.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_punct(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Token ↔ id mapping with the five specials at fixed ids 0–4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadVocabFile(format!("invalid token {tok:?}")));
            }
            if token_to_id.contains_key(&tok) {
                return Err(TokenizerError::BadVocabFile(format!("duplicate token {tok:?}")));
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as u32);
            id_to_token.push(tok);
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= NUM_SPECIALS as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS as usize..]
    }

    /// Serialized vocabulary file contents.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for t in self.regular_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// FNV-1a over the serialized file bytes.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_file_string().as_bytes())
    }

    pub fn parse(contents: &str) -> Result<Self, TokenizerError> {
        let mut lines = contents.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(TokenizerError::BadVocabFile("missing header".into()));
        }
        Vocabulary::from_tokens(lines)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Vocabulary::parse(&std::fs::read_to_string(path)?)
    }
}

/// Counts tokens over `corpus`, keeps those seen at least `min_freq` times,
/// and takes the `max_size - 5` most frequent (ties by token order).
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    min_freq: usize,
    max_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for tok in tokenize(doc.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(max_size.saturating_sub(NUM_SPECIALS as usize));
    if kept.is_empty() {
        return Err(TokenizerError::EmptyVocabulary);
    }
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// A `[CLS] title [SEP] description [PAD...]` encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSequence {
    pub ids: Vec<u32>,
    /// 0 for CLS, title and SEP (and PAD); 1 for description tokens.
    pub segments: Vec<u8>,
    pub title_span: (usize, usize),
    pub desc_span: (usize, usize),
    pub pad_len: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.ids.len() - self.pad_len
    }

    /// Positions eligible for masking: both spans, in order.
    pub fn span_positions(&self) -> impl Iterator<Item = usize> {
        (self.title_span.0..self.title_span.1).chain(self.desc_span.0..self.desc_span.1)
    }

    /// Same encoding with `n` trailing PAD positions removed.
    pub fn trimmed(&self, n: usize) -> InputSequence {
        let n = n.min(self.pad_len);
        let keep = self.ids.len() - n;
        InputSequence {
            ids: self.ids[..keep].to_vec(),
            segments: self.segments[..keep].to_vec(),
            title_span: self.title_span,
            desc_span: self.desc_span,
            pad_len: self.pad_len - n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub title_cap: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            max_len: DEFAULT_MAX_LEN,
            title_cap: DEFAULT_TITLE_CAP,
        }
    }
}

pub fn encode_pair<S: AsRef<str>>(
    title_tokens: &[S],
    desc_tokens: &[S],
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<InputSequence, TokenizerError> {
    let max_len = opts.max_len;
    if max_len < 4 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    if title_tokens.is_empty() {
        return Err(TokenizerError::EmptySide("title"));
    }
    if desc_tokens.is_empty() {
        return Err(TokenizerError::EmptySide("description"));
    }
    let n_title = title_tokens.len().min(opts.title_cap.max(1)).min(max_len - 3);
    let n_desc = desc_tokens.len().min(max_len - n_title - 2);

    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    segments.push(0);
    ids.extend(title_tokens[..n_title].iter().map(|t| vocab.id(t.as_ref())));
    segments.extend(std::iter::repeat_n(0, n_title));
    ids.push(SEP);
    segments.push(0);
    ids.extend(desc_tokens[..n_desc].iter().map(|t| vocab.id(t.as_ref())));
    segments.extend(std::iter::repeat_n(1, n_desc));
    let pad_len = max_len - ids.len();
    ids.resize(max_len, PAD);
    segments.resize(max_len, 0);
    Ok(InputSequence {
        ids,
        segments,
        title_span: (1, 1 + n_title),
        desc_span: (2 + n_title, 2 + n_title + n_desc),
        pad_len,
    })
}

/// Probabilities for what a selected position becomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskReplacement {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskReplacement {
    fn default() -> Self {
        MaskReplacement {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub base: InputSequence,
    /// (position, original id) for every selected position.
    pub targets: Vec<(usize, u32)>,
}

impl MaskedSequence {
    pub fn unmasked(seq: InputSequence) -> Self {
        MaskedSequence {
            base: seq,
            targets: Vec::new(),
        }
    }
}

pub fn apply_masking<R: Rng + ?Sized>(
    seq: &InputSequence,
    rate: f64,
    replacement: MaskReplacement,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedSequence {
    let mut base = seq.clone();
    let candidates: Vec<usize> = seq.span_positions().collect();
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rate > 0.0 && rng.random::<f64>() < rate)
        .collect();
    if rate > 0.0 && selected.is_empty() && !candidates.is_empty() {
        selected.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let total = replacement.mask + replacement.random + replacement.keep;
    let regular = vocab_size.saturating_sub(NUM_SPECIALS as usize);
    let mut targets = Vec::with_capacity(selected.len());
    for pos in selected {
        let original = seq.ids[pos];
        targets.push((pos, original));
        let u = rng.random::<f64>() * total;
        if u < replacement.mask {
            base.ids[pos] = MASK;
        } else if u < replacement.mask + replacement.random && regular > 0 {
            base.ids[pos] = NUM_SPECIALS + rng.random_range(0..regular) as u32;
        }
    }
    MaskedSequence { base, targets }
}
