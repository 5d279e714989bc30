//! C-lexer-style tokenization and corpus vocabularies.
//!
//! Source text is split into maximal identifier runs (`[A-Za-z0-9_]+`),
//! single punctuation characters, and string/char literals kept whole.
//! Whitespace and comments are dropped.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_MAX_LEN: usize = 512;

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Splits `source` into token strings.
pub fn tokenize(source: &str) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            // unterminated comments run to end of input
            i = (i + 2).min(chars.len());
        } else if c == '"' || c == '\'' {
            let start = i;
            i += 1;
            while i < chars.len() {
                match chars[i] {
                    '\\' if i + 1 < chars.len() && chars[i + 1] != '\n' => i += 2,
                    '\n' | '\r' => break,
                    q if q == c => {
                        i += 1;
                        break;
                    }
                    _ => i += 1,
                }
            }
            tokens.push(chars[start..i].iter().collect());
        } else if is_ident(c) {
            let start = i;
            while i < chars.len() && is_ident(chars[i]) {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

/// Splits on whitespace only, for input that an external tokenizer already
/// segmented.
pub fn split_pretokenized(source: &str) -> Vec<String> {
    source.split_whitespace().map(str::to_owned).collect()
}

/// Bijective token/id mapping with reserved PAD and UNK ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose ids 2.. follow the given token order.
    /// Duplicates and tokens equal to the reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        vocab.push(PAD_TOKEN.to_owned());
        vocab.push(UNK_TOKEN.to_owned());
        for t in tokens {
            let t = t.into();
            if !vocab.token_to_id.contains_key(&t) {
                vocab.push(t);
            }
        }
        vocab
    }

    fn push(&mut self, token: String) {
        self.token_to_id
            .insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
    }

    /// Total number of ids including PAD and UNK.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    /// True when only PAD and UNK are present.
    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= 2
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order (id 2 first).
    pub fn regular_tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    /// SHA-256 over the persisted file representation.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.regular_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// One token per line; line `n` (0-based) holds id `n + 2`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_file_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = HashMap::new();
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line == PAD_TOKEN || line == UNK_TOKEN {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    reason: format!("invalid vocabulary entry {line:?}"),
                });
            }
            if let Some(prev) = seen.insert(line, n + 1) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    reason: format!("duplicate token {line:?} (first on line {prev})"),
                });
            }
            tokens.push(line.to_owned());
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Counts token frequencies over `corpus` and assigns ids 2.. to tokens
/// occurring at least `min_count` times, most frequent first, ties broken
/// lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()))
}

/// Ordered token ids of one function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Wraps raw ids; fails on an empty list.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::NoTokens);
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps tokens to ids (UNK when absent) and keeps the first `max_len`.
pub fn encode<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(Error::NoTokens);
    }
    TokenSequence::new(
        tokens
            .iter()
            .take(max_len)
            .map(|t| vocab.id_or_unk(t.as_ref()))
            .collect(),
    )
}
