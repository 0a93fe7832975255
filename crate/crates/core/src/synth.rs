//! Synthetic music world: a KB, a templated query corpus and simulated
//! first-pass n-best lists whose errors are phonetic confusions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::eval::{nbest_to_jsonl, Hypothesis, NBestList};
use crate::kb::{kb_to_tsv, KbEntry};
use crate::negsampler::{corrupt, ConfusionTable};
use crate::util;

pub const ARTIST_SLOT: &str = "<artist>";
pub const SONG_SLOT: &str = "<song>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    #[serde(skip)]
    pub seed: u64,
    pub n_artists: usize,
    pub n_songs_per_artist: usize,
    /// Number of distinct pseudo-words available for entity names.
    pub word_inventory: usize,
    pub templates: Vec<String>,
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_test: usize,
    pub n_hypotheses: usize,
    /// Fraction of utterances whose top first-pass hypothesis is wrong.
    pub noise_rate: f64,
    /// Fraction of utterances whose n-best list lacks the reference.
    pub noise_unreachable_rate: f64,
    pub zipf_exponent: f64,
    /// Per-position substitution probability when corrupting references.
    pub p_sub: f64,
    /// Share of held-out and test queries whose entity is drawn uniformly
    /// from the KB instead of by popularity.
    pub eval_uniform_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_artists: 400,
            n_songs_per_artist: 5,
            word_inventory: 1200,
            templates: [
                "play <song> by <artist>",
                "play <song>",
                "download <song>",
                "download <song> by <artist>",
                "play something by <artist>",
                "put on <artist>",
                "i want to hear <song> by <artist>",
                "play the song <song>",
            ]
            .map(String::from)
            .to_vec(),
            n_train: 20_000,
            n_heldout: 1_000,
            n_test: 1_000,
            n_hypotheses: 5,
            noise_rate: 0.3,
            noise_unreachable_rate: 0.0,
            zipf_exponent: 1.1,
            p_sub: 0.3,
            eval_uniform_share: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("n_artists", self.n_artists),
            ("n_songs_per_artist", self.n_songs_per_artist),
            ("word_inventory", self.word_inventory),
            ("n_train", self.n_train),
            ("n_heldout", self.n_heldout),
            ("n_test", self.n_test),
            ("n_hypotheses", self.n_hypotheses),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.templates.is_empty() {
            return bad("at least one template required".into());
        }
        for t in &self.templates {
            let toks: Vec<&str> = t.split_whitespace().collect();
            if toks.is_empty() {
                return bad("empty template".into());
            }
            for tok in toks {
                if tok.starts_with('<') && tok != ARTIST_SLOT && tok != SONG_SLOT {
                    return bad(format!("template {t:?} uses undefined slot {tok}"));
                }
            }
        }
        for (name, v) in [
            ("noise_rate", self.noise_rate),
            ("noise_unreachable_rate", self.noise_unreachable_rate),
            ("eval_uniform_share", self.eval_uniform_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        if !(self.p_sub > 0.0 && self.p_sub <= 1.0) {
            return bad("p_sub must be in (0, 1]".into());
        }
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub kb: Vec<KbEntry>,
    pub train: Corpus,
    pub heldout: Vec<NBestList>,
    pub test: Vec<NBestList>,
}

pub const KB_FILE: &str = "kb.tsv";
pub const TRAIN_FILE: &str = "train.txt";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

impl SynthWorld {
    pub fn write(&self, dir: &Path) -> Result<()> {
        util::write_file(&dir.join(KB_FILE), kb_to_tsv(&self.kb))?;
        util::write_file(&dir.join(TRAIN_FILE), self.train.to_text())?;
        util::write_file(&dir.join(HELDOUT_FILE), nbest_to_jsonl(&self.heldout))?;
        util::write_file(&dir.join(TEST_FILE), nbest_to_jsonl(&self.test))
    }
}

const ONSETS: [&str; 16] = ["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "f", "ch", "j"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// All two- and three-syllable CV words, in a fixed order.
fn syllable_words() -> Vec<String> {
    let syl: Vec<String> = ONSETS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut words = Vec::new();
    for a in &syl {
        for b in &syl {
            words.push(format!("{a}{b}"));
        }
    }
    for a in &syl {
        for b in &syl {
            for c in &syl {
                words.push(format!("{a}{b}{c}"));
            }
        }
    }
    words
}

/// Zipf weights `1 / rank^s` for `n` ranks.
fn zipf_cdf(n: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    let mut acc = 0.0;
    let cdf = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    (p, cdf)
}

fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c < r).min(cdf.len() - 1)
}

fn fill(template: &str, e: &KbEntry) -> Sentence {
    let mut toks = Vec::new();
    for t in template.split_whitespace() {
        match t {
            ARTIST_SLOT => toks.extend(e.artist.iter().cloned()),
            SONG_SLOT => toks.extend(e.song.iter().cloned()),
            w => toks.push(w.to_lowercase()),
        }
    }
    Sentence::new(toks).expect("templates and names are non-empty")
}

/// Builds one simulated n-best list for `reference`.
fn nbest<R: Rng>(
    id: String,
    reference: &Sentence,
    table: &ConfusionTable,
    config: &SynthConfig,
    rng: &mut R,
) -> NBestList {
    let confusable: Vec<usize> = (0..reference.len())
        .filter(|&i| !table.candidates(&reference.tokens()[i]).is_empty())
        .collect();
    let mut wrong: Vec<Sentence> = Vec::new();
    let mut seen = BTreeSet::from([reference.clone()]);
    if !confusable.is_empty() {
        let want = config.n_hypotheses;
        let mut attempts = 0;
        while wrong.len() < want && attempts < 50 * want {
            attempts += 1;
            let (s, _) = corrupt(reference, table, &confusable, config.p_sub, rng);
            if seen.insert(s.clone()) {
                wrong.push(s);
            }
        }
    }
    let reachable = wrong.is_empty() || !rng.random_bool(config.noise_unreachable_rate);
    let mut hyps: Vec<Sentence> = if reachable {
        let mut h = vec![reference.clone()];
        h.extend(wrong.into_iter().take(config.n_hypotheses - 1));
        h
    } else {
        wrong.into_iter().take(config.n_hypotheses).collect()
    };
    // Ranks: the reference goes first unless a first-pass error is injected.
    if reachable && hyps.len() > 1 && rng.random_bool(config.noise_rate) {
        let to = rng.random_range(1..hyps.len());
        hyps.swap(0, to);
    } else if reachable {
        // Keep the reference on top; order the rest randomly.
        hyps[1..].shuffle(rng);
    }
    let mut score = 0.0;
    let hypotheses = hyps
        .into_iter()
        .map(|tokens| {
            let h = Hypothesis { tokens, first_pass_score: score };
            score -= rng.random_range(0.05..1.0);
            h
        })
        .collect();
    NBestList {
        id,
        reference: Some(reference.clone()),
        hypotheses,
    }
}

/// Generates the whole world deterministically from `config.seed`.
pub fn generate_world(config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut words = syllable_words();
    let n_entries = config.n_artists * config.n_songs_per_artist;
    if config.word_inventory > words.len() {
        return Err(Error::InvalidArgument(format!(
            "word inventory of {} exceeds the {} available pseudo-words",
            config.word_inventory,
            words.len()
        )));
    }
    // Two words per artist name must leave room for distinct names.
    if config.word_inventory * config.word_inventory < config.n_artists {
        return Err(Error::InvalidArgument("word inventory too small for the artist count".into()));
    }
    if config.word_inventory.pow(3) < config.n_songs_per_artist {
        return Err(Error::InvalidArgument("word inventory too small for the song count".into()));
    }
    let mut rng = util::seeded_rng(config.seed, 0x5E);
    words.shuffle(&mut rng);
    words.truncate(config.word_inventory);

    let (_, word_cdf) = zipf_cdf(words.len(), 1.0);
    let pick_word = |rng: &mut ChaCha8Rng| words[draw(&word_cdf, rng)].clone();

    let mut artists: Vec<Vec<String>> = Vec::new();
    let mut artist_seen = BTreeSet::new();
    while artists.len() < config.n_artists {
        let name = vec![pick_word(&mut rng), pick_word(&mut rng)];
        if name[0] != name[1] && artist_seen.insert(name.clone()) {
            artists.push(name);
        }
    }
    let mut kb = Vec::with_capacity(n_entries);
    for artist in &artists {
        let mut titles = BTreeSet::new();
        let mut attempts = 0;
        while titles.len() < config.n_songs_per_artist {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArgument("word inventory too small for distinct song titles".into()));
            }
            let len = rng.random_range(1..=3);
            let title: Vec<String> = (0..len).map(|_| pick_word(&mut rng)).collect();
            titles.insert(title);
        }
        let mut titles: Vec<_> = titles.into_iter().collect();
        titles.shuffle(&mut rng);
        for song in titles {
            kb.push(KbEntry {
                artist: artist.clone(),
                song,
                frequency: 0.0,
            });
        }
    }
    // Popularity: a random Zipf rank per entry.
    let mut ranks: Vec<usize> = (0..kb.len()).collect();
    ranks.shuffle(&mut rng);
    let (p, _) = zipf_cdf(kb.len(), config.zipf_exponent);
    for (e, &r) in kb.iter_mut().zip(&ranks) {
        e.frequency = (1000.0 * p[r] * 1e6).round() / 1e6;
    }
    let mut by_rank = vec![0; kb.len()];
    for (i, &r) in ranks.iter().enumerate() {
        by_rank[r] = i;
    }
    let (_, entry_cdf) = zipf_cdf(kb.len(), config.zipf_exponent);

    let sample_query = |rng: &mut ChaCha8Rng, uniform_share: f64| {
        let e = if uniform_share > 0.0 && rng.random_bool(uniform_share) {
            &kb[rng.random_range(0..kb.len())]
        } else {
            &kb[by_rank[draw(&entry_cdf, rng)]]
        };
        let t = &config.templates[rng.random_range(0..config.templates.len())];
        fill(t, e)
    };
    let train_sentences: Vec<Sentence> = (0..config.n_train).map(|_| sample_query(&mut rng, 0.0)).collect();
    let share = config.eval_uniform_share;
    let heldout_refs: Vec<Sentence> = (0..config.n_heldout).map(|_| sample_query(&mut rng, share)).collect();
    let test_refs: Vec<Sentence> = (0..config.n_test).map(|_| sample_query(&mut rng, share)).collect();

    // Recognition errors confuse entity words with each other; the carrier
    // words of the templates are never misrecognized.
    let table = ConfusionTable::from_words(words.iter().map(String::as_str));
    let heldout = heldout_refs
        .iter()
        .enumerate()
        .map(|(i, r)| nbest(format!("heldout-{i:05}"), r, &table, config, &mut rng))
        .collect();
    let test = test_refs
        .iter()
        .enumerate()
        .map(|(i, r)| nbest(format!("test-{i:05}"), r, &table, config, &mut rng))
        .collect();
    Ok(SynthWorld {
        kb,
        train: Corpus::new(train_sentences, TRAIN_FILE)?,
        heldout,
        test,
    })
}
