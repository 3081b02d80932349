//! Dialog pairs, vocabularies and the noun lexicon.
//!
//! The corpus is JSON lines, one `{"post": [...], "response": [...]}` object per
//! line, already tokenized. Tokens are lowercased on load.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::open_reader;

/// A lowercase word with no whitespace.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    pub fn new(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::InvalidInput("empty token".into()));
        }
        if text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("token {text:?} contains whitespace")));
        }
        Ok(Token(text.to_lowercase()))
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

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Token::new(&s).map_err(serde::de::Error::custom)
    }
}

/// Splits free text on whitespace into tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace()
        .map(|w| Token(w.to_lowercase()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogPair {
    pub post: Vec<Token>,
    pub response: Vec<Token>,
}

impl DialogPair {
    pub fn new(post: Vec<Token>, response: Vec<Token>) -> Result<Self> {
        if post.is_empty() || response.is_empty() {
            return Err(Error::InvalidInput("post and response must be non-empty".into()));
        }
        Ok(Self { post, response })
    }

    /// Convenience constructor from whitespace-separated text.
    pub fn from_text(post: &str, response: &str) -> Result<Self> {
        Self::new(tokenize(post), tokenize(response))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.post.iter().chain(&self.response)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub pairs: Vec<DialogPair>,
    /// Records dropped because the post or the response was empty.
    pub rejected: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    post: Vec<Token>,
    response: Vec<Token>,
}

pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    parse_corpus(open_reader(path)?, path)
}

pub fn parse_corpus<R: BufRead>(reader: R, origin: &Path) -> Result<LoadedCorpus> {
    let mut pairs = Vec::new();
    let mut rejected = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        if record.post.is_empty() || record.response.is_empty() {
            rejected += 1;
            continue;
        }
        pairs.push(DialogPair {
            post: record.post,
            response: record.response,
        });
    }
    if rejected > 0 {
        warn!("{}: rejected {rejected} record(s) with an empty side", origin.display());
    }
    Ok(LoadedCorpus { pairs, rejected })
}

pub fn write_corpus<W: Write + ?Sized>(pairs: &[DialogPair], out: &mut W) -> std::io::Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut *out, pair)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Occurrences of every token over posts and responses.
pub fn token_frequencies(pairs: &[DialogPair]) -> HashMap<&str, u64> {
    let mut counts = HashMap::new();
    for tok in pairs.iter().flat_map(DialogPair::tokens) {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    counts
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/id bijection with per-token corpus frequency. Ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        let (tokens, freqs) = entries.into_iter().unzip();
        Self { tokens, freqs, index }
    }

    pub fn reserved_only() -> Self {
        Self::from_entries(RESERVED.iter().map(|t| (t.to_string(), 0)).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freqs[id]
    }

    pub fn write_tsv<W: Write + ?Sized>(&self, out: &mut W) -> std::io::Result<()> {
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            writeln!(out, "{t}\t{i}\t{f}")?;
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in open_reader(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [tok, id, freq] = fields[..] else {
                return Err(Error::parse(path, i + 1, "expected token<TAB>id<TAB>freq"));
            };
            let id: usize = id.parse().map_err(|_| Error::parse(path, i + 1, "bad id"))?;
            let freq: u64 = freq.parse().map_err(|_| Error::parse(path, i + 1, "bad frequency"))?;
            if id != entries.len() {
                return Err(Error::parse(path, i + 1, format!("expected id {}, found {id}", entries.len())));
            }
            if id < RESERVED.len() && tok != RESERVED[id] {
                return Err(Error::parse(path, i + 1, format!("reserved id {id} must be {}", RESERVED[id])));
            }
            entries.push((tok.to_string(), freq));
        }
        if entries.len() < RESERVED.len() {
            return Err(Error::parse(path, entries.len() + 1, "missing reserved entries"));
        }
        Ok(Self::from_entries(entries))
    }
}

/// Keeps the `max_size - 4` most frequent tokens with frequency `>= min_freq`,
/// ties broken lexicographically.
pub fn build_vocab(pairs: &[DialogPair], max_size: usize, min_freq: u64) -> Vocabulary {
    debug_assert!(max_size >= RESERVED.len());
    let mut counted: Vec<(&str, u64)> = token_frequencies(pairs)
        .into_iter()
        .filter(|&(t, f)| f >= min_freq && !RESERVED.contains(&t))
        .collect();
    counted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    counted.truncate(max_size.saturating_sub(RESERVED.len()));

    let mut entries: Vec<(String, u64)> = RESERVED.iter().map(|t| (t.to_string(), 0)).collect();
    entries.extend(counted.into_iter().map(|(t, f)| (t.to_string(), f)));
    Vocabulary::from_entries(entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Other,
}

/// Token to coarse part-of-speech lookup; unknown tokens are [`PosTag::Other`].
#[derive(Clone, Debug, Default)]
pub struct PosLexicon {
    tags: HashMap<String, PosTag>,
}

impl PosLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: &str, tag: PosTag) {
        self.tags.insert(token.to_lowercase(), tag);
    }

    pub fn tag(&self, token: &str) -> PosTag {
        self.tags.get(token).copied().unwrap_or(PosTag::Other)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// `token<TAB>TAG` lines. `NOUN` and Penn-style `NN*` tags map to nouns.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in open_reader(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((tok, tag)) = line.split_once('\t') else {
                return Err(Error::parse(path, i + 1, "expected token<TAB>tag"));
            };
            let tag = tag.trim().to_uppercase();
            let tag = if tag == "NOUN" || tag.starts_with("NN") {
                PosTag::Noun
            } else {
                PosTag::Other
            };
            lex.insert(tok.trim(), tag);
        }
        Ok(lex)
    }
}

impl FromIterator<(String, PosTag)> for PosLexicon {
    fn from_iter<I: IntoIterator<Item = (String, PosTag)>>(iter: I) -> Self {
        let mut lex = Self::new();
        for (t, tag) in iter {
            lex.insert(&t, tag);
        }
        lex
    }
}

/// Distinct corpus tokens tagged as nouns.
pub fn noun_tokens(pairs: &[DialogPair], lexicon: &PosLexicon) -> BTreeSet<Token> {
    pairs
        .iter()
        .flat_map(DialogPair::tokens)
        .filter(|t| lexicon.tag(t.as_str()) == PosTag::Noun)
        .cloned()
        .collect()
}
