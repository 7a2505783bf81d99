//! Tokenization, vocabulary construction, and fixed-length caption encoding.
//!
//! Captions are NFC-normalized and split on runs of Unicode whitespace. The
//! reserved `<unk>` token (id 0) stands for out-of-vocabulary words, fills the
//! right-hand padding of short captions, and marks the end of a caption when
//! ids are decoded back to text.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Literal rendering of the reserved unknown/padding token.
pub const UNK: &str = "<unk>";
/// Id of [`UNK`] in every vocabulary.
pub const UNK_ID: usize = 0;

/// A single NFC-normalized, whitespace-free, non-empty word.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    /// Normalizes `text` to NFC and wraps it, or returns `None` if the result
    /// is empty or contains whitespace.
    pub fn new(text: &str) -> Option<Token> {
        let normalized: String = text.nfc().collect();
        if normalized.is_empty() || normalized.chars().any(char::is_whitespace) {
            None
        } else {
            Some(Token(normalized))
        }
    }

    pub fn unk() -> Token {
        Token(UNK.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// NFC-normalizes `raw` and splits it on runs of Unicode whitespace.
pub fn normalize_and_tokenize(raw: &str) -> Vec<Token> {
    let normalized: String = raw.nfc().collect();
    normalized
        .split(char::is_whitespace)
        .filter(|piece| !piece.is_empty())
        .map(|piece| Token(piece.to_string()))
        .collect()
}

/// Byte-level entry point to [`normalize_and_tokenize`].
pub fn tokenize_bytes(raw: &[u8]) -> Result<Vec<Token>> {
    Ok(normalize_and_tokenize(std::str::from_utf8(raw)?))
}

/// Renders tokens as a single space-separated string.
pub fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Bijection between tokens and contiguous ids, with `<unk>` at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<Token>,
    index: HashMap<Token, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list. `<unk>` is prepended;
    /// later occurrences of `<unk>` and duplicates are rejected.
    pub fn from_tokens(tokens: impl IntoIterator<Item = Token>) -> Result<Vocabulary> {
        let mut vocab = Vocabulary {
            entries: vec![Token::unk()],
            index: HashMap::from([(Token::unk(), UNK_ID)]),
        };
        for token in tokens {
            if vocab.index.contains_key(&token) {
                return Err(Error::InvalidArgument(format!(
                    "token `{token}` appears twice in vocabulary"
                )));
            }
            vocab.index.insert(token.clone(), vocab.entries.len());
            vocab.entries.push(token);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Always false: `<unk>` is present in every vocabulary.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &Token) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to [`UNK_ID`].
    pub fn id_or_unk(&self, token: &Token) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&Token> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[Token] {
        &self.entries
    }

    /// Writes one token per line; line number is the id.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for token in &self.entries {
            writeln!(out, "{token}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to Vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn parse(contents: &str) -> Result<Vocabulary> {
        let mut lines = contents.lines();
        match lines.next() {
            Some(UNK) => {}
            other => {
                return Err(Error::format(
                    "vocabulary",
                    format!("line 0 must be `{UNK}`, found {other:?}"),
                ))
            }
        }
        let tokens = lines
            .enumerate()
            .map(|(i, line)| {
                Token::new(line)
                    .filter(|t| t.as_str() == line)
                    .ok_or_else(|| {
                        Error::format("vocabulary", format!("line {}: invalid token {line:?}", i + 1))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::from_tokens(tokens)
            .map_err(|e| Error::format("vocabulary", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(std::str::from_utf8(&bytes)?)
    }
}

/// Builds a vocabulary keeping tokens seen at least `min_count` times, most
/// frequent first, ties in ascending code-point order.
pub fn build_vocabulary(corpus: &[Vec<Token>], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&Token, usize> = HashMap::new();
    for token in corpus.iter().flatten() {
        *counts.entry(token).or_default() += 1;
    }
    let unk = Token::unk();
    let mut kept: Vec<(&Token, usize)> = counts
        .into_iter()
        .filter(|&(token, count)| count >= min_count && *token != unk)
        .collect();
    // String ordering on UTF-8 bytes coincides with code-point order.
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(token, _)| token.clone()))
}

/// A caption mapped to exactly `n` token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedCaption(Vec<usize>);

impl EncodedCaption {
    /// Wraps raw ids, checking them against `vocab_size`.
    pub fn from_ids(ids: Vec<usize>, vocab_size: usize) -> Result<EncodedCaption> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::IdOutOfRange { id, vocab_size });
        }
        Ok(EncodedCaption(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maps tokens to ids, truncating to the first `n` or right-padding with
/// `<unk>` up to `n`.
pub fn encode(vocab: &Vocabulary, tokens: &[Token], n: usize) -> EncodedCaption {
    let mut ids: Vec<usize> = tokens.iter().take(n).map(|t| vocab.id_or_unk(t)).collect();
    ids.resize(n, UNK_ID);
    EncodedCaption(ids)
}

/// Maps ids back to tokens, stopping at the first `<unk>`.
pub fn decode_ids(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::IdOutOfRange {
            id,
            vocab_size: vocab.len(),
        })?;
        if id == UNK_ID {
            break;
        }
        tokens.push(token.clone());
    }
    Ok(tokens)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub unique_tokens: usize,
    pub total_tokens: usize,
    /// Caption length in tokens → number of captions of that length.
    pub length_histogram: BTreeMap<usize, usize>,
}

/// Counts distinct surface forms and total tokens. Inflected forms of the same
/// root are distinct tokens.
pub fn corpus_stats(corpus: &[Vec<Token>]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut seen = std::collections::HashSet::new();
    for caption in corpus {
        stats.total_tokens += caption.len();
        *stats.length_histogram.entry(caption.len()).or_default() += 1;
        seen.extend(caption.iter());
    }
    stats.unique_tokens = seen.len();
    stats
}
