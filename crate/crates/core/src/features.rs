//! Sentence-level features other than the recurrent representation, each
//! quantized into the bin index that keys its embedding table.

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::kb::{Field, KbIndex, WordPairTable};

pub const COOCCURRENCE_BINS: usize = 10;
pub const FREQUENCY_BINS: usize = 100;
pub const NPMI_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureBundle {
    pub ngram_negative_logprob: f64,
    pub cooccurrence_bin: usize,
    pub artist_freq_bin: usize,
    pub song_freq_bin: usize,
    pub cross_npmi_bin: usize,
    pub intra_npmi_bin: usize,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("cooccurrence_bin", self.cooccurrence_bin, COOCCURRENCE_BINS),
            ("artist_freq_bin", self.artist_freq_bin, FREQUENCY_BINS),
            ("song_freq_bin", self.song_freq_bin, FREQUENCY_BINS),
            ("cross_npmi_bin", self.cross_npmi_bin, NPMI_BINS),
            ("intra_npmi_bin", self.intra_npmi_bin, NPMI_BINS),
        ];
        for (name, v, n) in checks {
            if v >= n {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, {n})")));
            }
        }
        if !(self.ngram_negative_logprob >= 0.0) || !self.ngram_negative_logprob.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ngram feature must be finite and >= 0, got {}",
                self.ngram_negative_logprob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpmiMode {
    Cross,
    Intra,
}

pub fn ngram_feature(lm_logprob: f64) -> Result<f64> {
    if lm_logprob > 0.0 || lm_logprob.is_nan() {
        return Err(Error::InvalidArgument(format!("log-probability must be <= 0, got {lm_logprob}")));
    }
    Ok(-lm_logprob)
}

/// Number of (earlier span, later span) pairs of non-overlapping spans in a
/// sentence of length `l`: choose `i1 <= j1 < i2 <= j2`, i.e. `C(l+2, 4)`.
pub fn span_pair_count(l: usize) -> u64 {
    if l < 2 {
        return 0;
    }
    let n = (l + 2) as u64;
    n * (n - 1) * (n - 2) * (n - 3) / 24
}

/// Sum of KB co-occurrence counts over non-overlapping span pairs in both
/// role assignments (earlier span as artist and later as song, and the
/// reverse).
pub fn cooccurrence_total(sentence: &Sentence, index: &KbIndex) -> u64 {
    let toks = sentence.tokens();
    let l = toks.len();
    let mut spans = Vec::new();
    for i in 0..l {
        for j in i..l {
            let a = index.phrase_id(&toks[i..=j], Field::Artist);
            let s = index.phrase_id(&toks[i..=j], Field::Song);
            if a.is_some() || s.is_some() {
                spans.push((i, j, a, s));
            }
        }
    }
    let mut total = 0u64;
    for &(_, j1, a1, s1) in &spans {
        for &(i2, _, a2, s2) in &spans {
            if i2 <= j1 {
                continue;
            }
            if let (Some(a), Some(s)) = (a1, s2) {
                total += index.cooccurrence_by_id(a, s) as u64;
            }
            if let (Some(s), Some(a)) = (s1, a2) {
                total += index.cooccurrence_by_id(a, s) as u64;
            }
        }
    }
    total
}

/// Log-scale bin of `total` against the largest total the sentence length
/// could reach. Zero only for a zero total.
pub fn cooccurrence_bin_from_total(total: u64, max_cooccurrence: u32, len: usize) -> usize {
    if total == 0 {
        return 0;
    }
    let max_possible = (max_cooccurrence as u64 * 2 * span_pair_count(len)).max(total) as f64;
    let raw = (10.0 * (total as f64).ln_1p() / max_possible.ln_1p()).floor() as usize;
    raw.clamp(1, COOCCURRENCE_BINS - 1)
}

pub fn cooccurrence_bin(sentence: &Sentence, index: &KbIndex) -> usize {
    cooccurrence_bin_from_total(
        cooccurrence_total(sentence, index),
        index.max_cooccurrence(),
        sentence.len(),
    )
}

/// `floor(min(max(50 f, 0), 99))` with `f = ln(1 + S)`.
pub fn frequency_bin_from_sum(s: f64) -> usize {
    frequency_bin_from_log(s.max(0.0).ln_1p())
}

pub fn frequency_bin_from_log(f: f64) -> usize {
    (50.0 * f).clamp(0.0, 99.0).floor() as usize
}

/// Sum over all spans `x[i..=j]` of their KB frequency in `field`.
pub fn span_frequency_sum(sentence: &Sentence, index: &KbIndex, field: Field) -> f64 {
    let toks = sentence.tokens();
    let mut s = 0.0;
    for i in 0..toks.len() {
        for j in i..toks.len() {
            s += index.phrase_frequency(&toks[i..=j], field);
        }
    }
    s
}

pub fn kb_frequency_bin(sentence: &Sentence, index: &KbIndex, field: Field) -> usize {
    frequency_bin_from_sum(span_frequency_sum(sentence, index, field))
}

/// Mean NPMI over unordered word pairs, clamped to `[-1, 1]`; `None` for
/// sentences with fewer than two words.
pub fn mean_npmi(sentence: &Sentence, table: &WordPairTable) -> Option<f64> {
    let toks = sentence.tokens();
    let l = toks.len();
    if l < 2 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..l {
        for j in i + 1..l {
            sum += table.npmi(&toks[i], &toks[j]);
        }
    }
    let pairs = (l * (l - 1) / 2) as f64;
    Some((sum / pairs).clamp(-1.0, 1.0))
}

pub fn npmi_bin_from_value(v: f64) -> usize {
    let v = v.clamp(-1.0, 1.0);
    ((100.0 * (v + 1.0) / 2.0).floor() as usize).min(NPMI_BINS - 1)
}

pub fn npmi_bin_with_table(sentence: &Sentence, table: &WordPairTable) -> usize {
    mean_npmi(sentence, table).map_or(NPMI_BINS / 2, npmi_bin_from_value)
}

pub fn npmi_bin(sentence: &Sentence, index: &KbIndex, mode: NpmiMode) -> usize {
    let table = match mode {
        NpmiMode::Cross => index.cross_table(),
        NpmiMode::Intra => index.intra_table(),
    };
    npmi_bin_with_table(sentence, table)
}

pub fn extract_features(sentence: &Sentence, lm_logprob: f64, index: &KbIndex) -> Result<FeatureBundle> {
    let bundle = FeatureBundle {
        ngram_negative_logprob: ngram_feature(lm_logprob)?,
        cooccurrence_bin: cooccurrence_bin(sentence, index),
        artist_freq_bin: kb_frequency_bin(sentence, index, Field::Artist),
        song_freq_bin: kb_frequency_bin(sentence, index, Field::Song),
        cross_npmi_bin: npmi_bin(sentence, index, NpmiMode::Cross),
        intra_npmi_bin: npmi_bin(sentence, index, NpmiMode::Intra),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Debug dump record: one line per (sentence, hypothesis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub split: String,
    pub sentence_id: String,
    pub hypothesis_id: usize,
    pub tokens: Sentence,
    #[serde(flatten)]
    pub bundle: FeatureBundle,
}
