//! Prompts, token roles, and their resolution to token positions.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in stopwords removed when deriving non-conflicting words.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "being", "am", "of", "in", "on",
    "at", "to", "for", "with", "by", "from", "into", "onto", "over", "under", "and", "or", "its",
    "it", "this", "that", "some",
];

pub fn default_stopwords() -> HashSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// Output of a tokenizer over a full prompt, delimiters included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// `true` for sequence delimiters and padding.
    pub special: Vec<bool>,
    /// `true` where a token begins a new word.
    pub word_start: Vec<bool>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn special_indices(&self) -> BTreeSet<usize> {
        self.special
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

pub trait Tokenizer: Send + Sync {
    /// Tokenizes a prompt into a fixed-length, delimited sequence.
    fn encode(&self, text: &str) -> Encoding;

    /// Tokenizes bare words (no delimiters, no padding).
    fn encode_words(&self, text: &str) -> Vec<u32>;

    /// Inverse of tokenization, skipping special tokens.
    fn decode(&self, ids: &[u32]) -> String;

    fn context_len(&self) -> usize;
}

/// Lowercases and splits on anything that is not an ASCII letter or digit.
pub fn normalized_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

/// Whitespace tokenizer that splits long words into fixed-width pieces.
///
/// Piece ids are a base-37 code of the piece characters, so decoding is
/// exact. Continuation pieces carry [`ToyTokenizer::CONTINUATION`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTokenizer {
    context_len: usize,
    max_piece_len: usize,
}

impl ToyTokenizer {
    pub const SOT: u32 = 1;
    pub const EOT: u32 = 2;
    pub const CONTINUATION: u32 = 1 << 30;
    const BASE: u32 = 16;
    const MAX_PIECE: usize = 5;

    pub fn new(context_len: usize, max_piece_len: usize) -> Result<Self> {
        if context_len < 3 {
            return Err(Error::InvalidConfig(format!(
                "context_len {context_len} leaves no room for words"
            )));
        }
        if max_piece_len == 0 || max_piece_len > Self::MAX_PIECE {
            return Err(Error::InvalidConfig(format!(
                "max_piece_len must be in 1..={}",
                Self::MAX_PIECE
            )));
        }
        Ok(Self {
            context_len,
            max_piece_len,
        })
    }

    pub fn max_piece_len(&self) -> usize {
        self.max_piece_len
    }

    pub fn is_special(id: u32) -> bool {
        id == Self::SOT || id == Self::EOT
    }

    fn piece_id(piece: &str, continuation: bool) -> u32 {
        let code = piece.bytes().fold(0u32, |acc, b| {
            let digit = match b {
                b'a'..=b'z' => u32::from(b - b'a') + 1,
                b'0'..=b'9' => u32::from(b - b'0') + 27,
                _ => unreachable!("pieces are normalized"),
            };
            acc * 37 + digit
        });
        let flag = if continuation { Self::CONTINUATION } else { 0 };
        (Self::BASE + code) | flag
    }

    fn piece_text(id: u32) -> String {
        let mut code = (id & !Self::CONTINUATION) - Self::BASE;
        let mut out = Vec::new();
        while code > 0 {
            let digit = (code % 37) as u8;
            out.push(match digit {
                1..=26 => b'a' + digit - 1,
                _ => b'0' + digit - 27,
            });
            code /= 37;
        }
        out.reverse();
        String::from_utf8(out).expect("ascii")
    }

    fn pieces(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in normalized_words(text) {
            let bytes = word.as_bytes();
            for (i, chunk) in bytes.chunks(self.max_piece_len).enumerate() {
                let piece = std::str::from_utf8(chunk).expect("ascii");
                ids.push(Self::piece_id(piece, i > 0));
            }
        }
        ids
    }
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self {
            context_len: 24,
            max_piece_len: 5,
        }
    }
}

impl Tokenizer for ToyTokenizer {
    fn encode(&self, text: &str) -> Encoding {
        let mut pieces = self.pieces(text);
        pieces.truncate(self.context_len - 2);
        let mut ids = Vec::with_capacity(self.context_len);
        ids.push(Self::SOT);
        ids.extend(pieces);
        ids.resize(self.context_len, Self::EOT);
        let special = ids.iter().map(|&id| Self::is_special(id)).collect();
        let word_start = ids
            .iter()
            .map(|&id| !Self::is_special(id) && id & Self::CONTINUATION == 0)
            .collect();
        Encoding {
            ids,
            special,
            word_start,
        }
    }

    fn encode_words(&self, text: &str) -> Vec<u32> {
        self.pieces(text)
    }

    fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| !Self::is_special(id)) {
            if id & Self::CONTINUATION == 0 && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&Self::piece_text(id));
        }
        out
    }

    fn context_len(&self) -> usize {
        self.context_len
    }
}

/// A role word with an optional 1-based occurrence ordinal (`word#k`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleWord {
    pub text: String,
    pub ordinal: Option<usize>,
}

impl RoleWord {
    pub fn parse(raw: &str) -> Result<Self> {
        let (text, ordinal) = match raw.rsplit_once('#') {
            Some((text, k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::MalformedRoleWord(raw.to_string()))?;
                if k == 0 {
                    return Err(Error::MalformedRoleWord(raw.to_string()));
                }
                (text, Some(k))
            }
            None => (raw, None),
        };
        if normalized_words(text).is_empty() {
            return Err(Error::MalformedRoleWord(raw.to_string()));
        }
        Ok(Self {
            text: text.to_string(),
            ordinal,
        })
    }
}

/// Target and surrogate prompts plus the words playing each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub target_prompt: String,
    pub surrogate_prompt: String,
    pub non_conflicting_words: Vec<String>,
    #[serde(default)]
    pub conflicting_words: Vec<String>,
    #[serde(default)]
    pub target_words: Vec<String>,
}

/// Token positions of every role, resolved against one tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRoleMap {
    pub surrogate_token_ids: Vec<u32>,
    pub target_token_ids: Vec<u32>,
    pub non_conflicting_indices: BTreeSet<usize>,
    pub conflicting_indices: BTreeSet<usize>,
    pub target_indices: BTreeSet<usize>,
    pub special_indices_surrogate: BTreeSet<usize>,
    pub special_indices_target: BTreeSet<usize>,
}

impl TokenRoleMap {
    /// Number of target tokens (subtokens included).
    pub fn n_tar(&self) -> usize {
        self.target_indices.len()
    }
}

/// Positions of every occurrence of `needle` that starts and ends on word
/// boundaries, found by exhaustive scan.
fn occurrences(enc: &Encoding, needle: &[u32]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > enc.len() {
        return Vec::new();
    }
    (0..=enc.len() - needle.len())
        .filter(|&p| {
            let end = p + needle.len();
            enc.word_start[p]
                && enc.ids[p..end] == *needle
                && (end == enc.len() || enc.word_start[end] || enc.special[end])
        })
        .collect()
}

fn resolve_words(
    words: &[String],
    prompt: &str,
    enc: &Encoding,
    tokenizer: &dyn Tokenizer,
) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for raw in words {
        let word = RoleWord::parse(raw)?;
        let needle = tokenizer.encode_words(&word.text);
        let found = occurrences(enc, &needle);
        let start = match (found.len(), word.ordinal) {
            (0, _) => None,
            (1, None) => Some(found[0]),
            (n, None) => {
                return Err(Error::AmbiguousRoleWord {
                    word: word.text,
                    prompt: prompt.to_string(),
                    count: n,
                })
            }
            (_, Some(k)) => found.get(k - 1).copied(),
        };
        let start = start.ok_or_else(|| Error::RoleWordNotFound {
            word: raw.clone(),
            prompt: prompt.to_string(),
        })?;
        out.extend(start..start + needle.len());
    }
    Ok(out)
}

fn ensure_disjoint(
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
    enc: &Encoding,
    tokenizer: &dyn Tokenizer,
) -> Result<()> {
    match a.intersection(b).next() {
        Some(&i) => Err(Error::RoleOverlap {
            word: tokenizer.decode(&enc.ids[i..=i]),
        }),
        None => Ok(()),
    }
}

/// Resolves every role word to the positions of all of its subtokens.
pub fn resolve_token_roles(spec: &PromptSpec, tokenizer: &dyn Tokenizer) -> Result<TokenRoleMap> {
    let surr = tokenizer.encode(&spec.surrogate_prompt);
    let tgt = tokenizer.encode(&spec.target_prompt);

    let non_conflicting = resolve_words(
        &spec.non_conflicting_words,
        &spec.surrogate_prompt,
        &surr,
        tokenizer,
    )?;
    let conflicting = resolve_words(
        &spec.conflicting_words,
        &spec.surrogate_prompt,
        &surr,
        tokenizer,
    )?;
    let target = resolve_words(&spec.target_words, &spec.target_prompt, &tgt, tokenizer)?;

    if non_conflicting.is_empty() {
        return Err(Error::EmptyTokenSet);
    }
    ensure_disjoint(&non_conflicting, &conflicting, &surr, tokenizer)?;
    if !conflicting.is_empty() && target.is_empty() {
        return Err(Error::NonPositiveNTar);
    }

    Ok(TokenRoleMap {
        special_indices_surrogate: surr.special_indices(),
        special_indices_target: tgt.special_indices(),
        surrogate_token_ids: surr.ids,
        target_token_ids: tgt.ids,
        non_conflicting_indices: non_conflicting,
        conflicting_indices: conflicting,
        target_indices: target,
    })
}

/// Surrogate words minus stopwords, unrelated words and conflicting words,
/// in prompt order.
pub fn derive_non_conflicting_words(
    surrogate_prompt: &str,
    stopwords: &HashSet<String>,
    conflicting_words: &[String],
    unrelated_words: &[String],
) -> Result<Vec<String>> {
    let excluded: HashSet<String> = conflicting_words
        .iter()
        .chain(unrelated_words)
        .map(|w| w.split('#').next().unwrap_or(w))
        .flat_map(normalized_words)
        .collect();
    let words: Vec<String> = normalized_words(surrogate_prompt)
        .into_iter()
        .filter(|w| !stopwords.contains(w) && !excluded.contains(w))
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(words)
}
