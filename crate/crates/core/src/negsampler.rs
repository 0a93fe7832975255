//! Artificial n-best lists: phonetic-confusion substitution, n-gram
//! filtering of the samples, and corpus filtering by negative quality.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::ngram::NGramModel;
use crate::util;

/// Consonant-class code of a word.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhoneticKey(pub Vec<u8>);

fn class_of(c: char) -> Option<u8> {
    Some(match c {
        'b' | 'f' | 'p' | 'v' => 1,
        'c' | 'g' | 'j' | 'k' | 'q' | 's' | 'x' | 'z' => 2,
        'd' | 't' => 3,
        'l' => 4,
        'm' | 'n' => 5,
        'r' => 6,
        _ => return None,
    })
}

/// Soundex-style key: consonants map to six classes, vowels and `h w y`
/// vanish, then adjacent repeats collapse. All-vowel words get the empty key;
/// words with no letters at all are unencodable.
pub fn phonetic_key(word: &str) -> Result<PhoneticKey> {
    let mut code: Vec<u8> = Vec::new();
    let mut any_alpha = false;
    for c in word.chars().flat_map(char::to_lowercase) {
        if !c.is_ascii_alphabetic() {
            continue;
        }
        any_alpha = true;
        if let Some(class) = class_of(c) {
            if code.last() != Some(&class) {
                code.push(class);
            }
        }
    }
    if !any_alpha {
        return Err(Error::Unencodable(word.to_string()));
    }
    Ok(PhoneticKey(code))
}

pub(crate) fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Words whose phonetic keys are within edit distance one of each other.
#[derive(Debug, Clone, Default)]
pub struct ConfusionTable {
    by_key: HashMap<PhoneticKey, Vec<String>>,
    candidates: HashMap<String, Vec<String>>,
}

impl ConfusionTable {
    /// Builds over every retained vocabulary word (the unknown word excluded).
    pub fn build(vocab: &Vocabulary) -> Self {
        Self::from_words(vocab.words())
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut by_key: HashMap<PhoneticKey, Vec<String>> = HashMap::new();
        for w in words {
            if let Ok(k) = phonetic_key(w) {
                by_key.entry(k).or_default().push(w.to_string());
            }
        }
        for ws in by_key.values_mut() {
            ws.sort();
            ws.dedup();
        }
        // Two keys within distance one share either the key itself or a
        // single-deletion variant; bucket by those and verify.
        let mut buckets: HashMap<Vec<u8>, Vec<&PhoneticKey>> = HashMap::new();
        for key in by_key.keys() {
            let mut variants = vec![key.0.clone()];
            for i in 0..key.0.len() {
                let mut v = key.0.clone();
                v.remove(i);
                variants.push(v);
            }
            variants.sort();
            variants.dedup();
            for v in variants {
                buckets.entry(v).or_default().push(key);
            }
        }
        let mut near: HashMap<&PhoneticKey, BTreeSet<&PhoneticKey>> = HashMap::new();
        for keys in buckets.values() {
            for &a in keys {
                for &b in keys {
                    if edit_distance(&a.0, &b.0) <= 1 {
                        near.entry(a).or_default().insert(b);
                    }
                }
            }
        }
        let mut candidates = HashMap::new();
        for (key, words) in &by_key {
            let pool: Vec<&String> = near[key].iter().flat_map(|k| &by_key[*k]).collect();
            for w in words {
                let mut c: Vec<String> = pool.iter().filter(|&&p| p != w).map(|p| p.to_string()).collect();
                c.sort();
                candidates.insert(w.clone(), c);
            }
        }
        ConfusionTable { by_key, candidates }
    }

    /// Lexicographically ordered confusable words; empty for unknown words.
    pub fn candidates(&self, word: &str) -> &[String] {
        self.candidates.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn words_with_key(&self, key: &PhoneticKey) -> &[String] {
        self.by_key.get(key).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Negative {
    pub tokens: Sentence,
    pub lm_logprob: f64,
    pub substituted_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub source: Sentence,
    pub negatives: Vec<Negative>,
}

impl NegativeSet {
    pub fn mean_lm_logprob(&self) -> f64 {
        if self.negatives.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.negatives.iter().map(|n| n.lm_logprob).sum::<f64>() / self.negatives.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub keep_k: usize,
    pub p_sub: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_samples: 30,
            keep_k: 5,
            p_sub: 0.3,
        }
    }
}

/// Draws one corruption: each confusable position flips with probability
/// `p_sub`, redrawn until at least one position changes.
pub(crate) fn corrupt<R: Rng>(
    sentence: &Sentence,
    table: &ConfusionTable,
    confusable: &[usize],
    p_sub: f64,
    rng: &mut R,
) -> (Sentence, Vec<usize>) {
    loop {
        let mut tokens = sentence.tokens().to_vec();
        let mut positions = Vec::new();
        for &pos in confusable {
            if rng.random_bool(p_sub) {
                let cands = table.candidates(&sentence.tokens()[pos]);
                tokens[pos] = cands[rng.random_range(0..cands.len())].clone();
                positions.push(pos);
            }
        }
        if !positions.is_empty() {
            return (Sentence::new(tokens).expect("substitutes are valid tokens"), positions);
        }
    }
}

/// Samples `n_samples` corruptions, deduplicates them, and keeps the `keep_k`
/// the language model likes best (ties broken lexicographically).
pub fn sample_negatives(
    sentence: &Sentence,
    table: &ConfusionTable,
    lm: &NGramModel,
    config: &SamplerConfig,
    seed: u64,
) -> Result<NegativeSet> {
    if config.keep_k == 0 || config.keep_k > config.n_samples {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= keep_k <= n_samples, got keep_k={} n_samples={}",
            config.keep_k, config.n_samples
        )));
    }
    if !(config.p_sub > 0.0 && config.p_sub <= 1.0) {
        return Err(Error::InvalidArgument(format!("p_sub must be in (0, 1], got {}", config.p_sub)));
    }
    let confusable: Vec<usize> = (0..sentence.len())
        .filter(|&i| !table.candidates(&sentence.tokens()[i]).is_empty())
        .collect();
    if confusable.is_empty() {
        return Err(Error::NoConfusablePosition);
    }
    let mut rng = util::seeded_rng(seed, 0x4E45);
    let mut seen: HashMap<Sentence, Vec<usize>> = HashMap::new();
    for _ in 0..config.n_samples {
        let (s, positions) = corrupt(sentence, table, &confusable, config.p_sub, &mut rng);
        seen.entry(s).or_insert(positions);
    }
    let mut negatives: Vec<Negative> = seen
        .into_iter()
        .map(|(tokens, substituted_positions)| Negative {
            lm_logprob: lm.score_sentence(&tokens),
            tokens,
            substituted_positions,
        })
        .collect();
    negatives.sort_by(|a, b| {
        b.lm_logprob
            .total_cmp(&a.lm_logprob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    negatives.truncate(config.keep_k);
    Ok(NegativeSet {
        source: sentence.clone(),
        negatives,
    })
}

/// Keeps the `top_m` sentences whose negatives have the highest mean n-gram
/// log-probability. Returns the kept indices in rank order.
pub fn rank_by_negative_quality(negsets: &[NegativeSet], top_m: usize) -> Result<Vec<usize>> {
    if top_m == 0 {
        return Err(Error::InvalidArgument("top_m must be positive".into()));
    }
    let means: Vec<f64> = negsets.iter().map(NegativeSet::mean_lm_logprob).collect();
    let mut order: Vec<usize> = (0..negsets.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(top_m);
    Ok(order)
}

pub fn filter_corpus_by_negative_quality(
    corpus: &Corpus,
    negsets: &[NegativeSet],
    top_m: usize,
) -> Result<Corpus> {
    if negsets.len() != corpus.len() {
        return Err(Error::InvalidArgument("negative sets are not aligned with corpus".into()));
    }
    let kept = rank_by_negative_quality(negsets, top_m)?;
    Corpus::new(
        kept.into_iter().map(|i| corpus.sentences[i].clone()).collect(),
        corpus.source_path.clone(),
    )
}

/// JSON-lines record for one sentence's negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeRecord {
    pub source_id: usize,
    pub source: Sentence,
    pub source_lm_logprob: f64,
    pub negatives: Vec<Negative>,
}
