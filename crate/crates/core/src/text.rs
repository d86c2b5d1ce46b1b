//! Tokenization, vocabularies and the content-word list behind the long-range slots.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    pub const PAD: Token = Token(0);
    pub const BOS: Token = Token(1);
    pub const EOS: Token = Token(2);
    pub const UNK: Token = Token(3);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_reserved(self) -> bool {
        self.0 < NUM_RESERVED as u32
    }
}

pub const NUM_RESERVED: usize = 4;
pub const RESERVED_WORDS: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Encoded caption. BOS and PAD never appear; EOS is implied after the last token.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence(pub Vec<Token>);

impl Sentence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

/// Lowercases, turns every punctuation character into a space and splits on whitespace.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.chars()
        .map(|c| if c.is_ascii_punctuation() || c.is_ascii_control() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn word_frequencies<I, S>(corpus: I) -> BTreeMap<String, usize>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freq = BTreeMap::new();
    for line in corpus {
        for w in tokenize(line.as_ref()) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    freq
}

/// Frequency descending, ties by word ascending.
fn ranked(freq: BTreeMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<_> = freq.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, Token>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), Token(i as u32)))
            .collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        RESERVED_WORDS
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .into()
    }

    /// Reserved tokens, then the `max_size - 4` most frequent words.
    pub fn build<I, S>(corpus: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = Self::reserved_only().words;
        let room = max_size.saturating_sub(NUM_RESERVED);
        words.extend(ranked(word_frequencies(corpus)).into_iter().take(room).map(|(w, _)| w));
        words.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token(&self, word: &str) -> Token {
        self.index.get(word).copied().unwrap_or(Token::UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, t: Token) -> Option<&str> {
        self.words.get(t.index()).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Sentence {
        Sentence(words.iter().map(|w| self.token(w.as_ref())).collect())
    }

    /// Tokenizes, encodes and keeps at most `max_len` tokens.
    pub fn encode_caption(&self, raw: &str, max_len: usize) -> Sentence {
        let mut s = self.encode(&tokenize(raw));
        s.0.truncate(max_len);
        s
    }

    pub fn decode(&self, s: &Sentence) -> Vec<String> {
        s.0.iter()
            .map(|&t| self.word(t).unwrap_or(RESERVED_WORDS[Token::UNK.index()]).to_owned())
            .collect()
    }
}

pub fn build_vocab<I, S>(corpus: I, max_size: usize) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    Vocabulary::build(corpus, max_size)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

pub const DEFAULT_STOPWORDS: [&str; 12] = [
    "a", "an", "the", "is", "are", "be", "do", "to", "of", "in", "on", "and",
];

impl Default for Stopwords {
    fn default() -> Self {
        Self(DEFAULT_STOPWORDS.iter().map(|w| w.to_string()).collect())
    }
}

impl Stopwords {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(words.into_iter().map(Into::into).collect())
    }

    /// One word per line; blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, w: &str) -> bool {
        self.0.contains(w)
    }
}

/// The `k` most frequent non-stopwords, frequency descending then lexicographic.
pub fn top_k_content_words<I, S>(corpus: I, k: usize, stopwords: &Stopwords) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    ranked(word_frequencies(corpus))
        .into_iter()
        .filter(|(w, _)| !stopwords.contains(w))
        .take(k)
        .map(|(w, _)| w)
        .collect()
}
