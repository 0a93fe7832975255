//! Tokenized sentences, vocabularies with unknown-word mapping, and fold
//! partitions for jackknifed estimates.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Surface form used for the unknown word in vocabulary files.
pub const UNK: &str = "<unk>";

/// A non-empty sequence of lowercase, whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("sentence must have at least one token".into()));
        }
        if tokens.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::InvalidArgument(format!("invalid token in {tokens:?}")));
        }
        Ok(Sentence { tokens })
    }

    /// Lowercases and splits on runs of whitespace.
    pub fn parse(line: &str) -> Result<Self> {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::BlankLine);
        }
        Ok(Sentence { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Copy of this sentence with the token at `pos` replaced.
    pub fn with_token(&self, pos: usize, word: &str) -> Sentence {
        let mut tokens = self.tokens.clone();
        tokens[pos] = word.to_string();
        Sentence { tokens }
    }
}

impl TryFrom<Vec<String>> for Sentence {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Sentence::new(tokens)
    }
}

impl From<Sentence> for Vec<String> {
    fn from(s: Sentence) -> Self {
        s.tokens
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

pub fn tokenize_line(line: &str) -> Result<Sentence> {
    Sentence::parse(line)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub source_path: String,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, source_path: impl Into<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            sentences,
            source_path: source_path.into(),
        })
    }

    /// Parses one sentence per line, skipping blank lines.
    pub fn from_text(text: &str, source_path: impl Into<String>) -> Result<Self> {
        let sentences = text
            .lines()
            .filter_map(|l| Sentence::parse(l).ok())
            .collect();
        Corpus::new(sentences, source_path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        Corpus::from_text(&text, path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Word/id bijection. Id 0 is always the unknown word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub const UNK_ID: u32 = 0;

    /// Keeps words whose corpus frequency is strictly greater than
    /// `min_count`. Ids follow descending frequency, ties lexicographic.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &corpus.sentences {
            for t in s.tokens() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, c)| c > min_count && w != UNK)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_words(kept.into_iter().map(|(w, _)| w.to_string())))
    }

    fn from_words(retained: impl IntoIterator<Item = String>) -> Self {
        let mut words = vec![UNK.to_string()];
        words.extend(retained);
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, ids }
    }

    pub fn unk_id(&self) -> u32 {
        Self::UNK_ID
    }

    /// Number of ids, counting the unknown word.
    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        word != UNK && self.ids.contains_key(word)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Retained words, excluding the unknown word, in id order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words[1..].iter().map(String::as_str)
    }

    pub fn encode(&self, sentence: &Sentence) -> Vec<u32> {
        sentence.tokens().iter().map(|t| self.id(t)).collect()
    }

    /// `word<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w}\t{i}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected word<TAB>id", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad id", n + 1)))?;
            if id != n {
                return Err(Error::format(path, format!("line {}: ids must be dense and ordered", n + 1)));
            }
            words.push(w.to_string());
        }
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::format(path, "first entry must be <unk> with id 0"));
        }
        Ok(Self::from_words(words.into_iter().skip(1)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_file(path, self.to_tsv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&util::read_to_string(path)?, path)
    }

    /// SHA-256 of the TSV serialization; embedded in every model artifact.
    pub fn hash(&self) -> String {
        util::sha256_hex(self.to_tsv().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    /// Seeded permutation of sentence indices, then round-robin over `k` folds.
    pub fn assign(corpus: &Corpus, k: usize, seed: u64) -> Result<Self> {
        Self::assign_n(corpus.len(), k, seed)
    }

    pub fn assign_n(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("fold count must be >= 2, got {k}")));
        }
        if n < k {
            return Err(Error::InvalidArgument(format!(
                "corpus of {n} sentences is smaller than fold count {k}"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut util::seeded_rng(seed, 0xF01D));
        let mut fold_of = vec![0; n];
        for (rank, &idx) in perm.iter().enumerate() {
            fold_of[idx] = rank % k;
        }
        Ok(FoldAssignment { fold_of, k })
    }

    pub fn from_vec(fold_of: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 || fold_of.iter().any(|&f| f >= k) {
            return Err(Error::InvalidArgument("fold ids must lie in [0, k)".into()));
        }
        Ok(FoldAssignment { fold_of, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, sentence: usize) -> usize {
        self.fold_of[sentence]
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# k={}\n", self.k);
        for (i, f) in self.fold_of.iter().enumerate() {
            out.push_str(&format!("{i}\t{f}\n"));
        }
        out
    }
}
