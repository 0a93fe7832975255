//! Knowledge-base entries (artist, song, usage frequency) and the indexes the
//! KB-derived features read from.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{self, BinReader, BinWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Artist,
    Song,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub artist: Vec<String>,
    pub song: Vec<String>,
    pub frequency: f64,
}

fn phrase(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn key(words: &[String]) -> String {
    words.join(" ")
}

/// Parses `artist<TAB>song<TAB>frequency` lines.
pub fn parse_kb(text: &str) -> Result<Vec<KbEntry>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let malformed = |reason: &str| Error::Malformed {
            line: line_no,
            reason: reason.to_string(),
        };
        if cols.len() != 3 {
            return Err(malformed("expected 3 tab-separated fields"));
        }
        let artist = phrase(cols[0]);
        let song = phrase(cols[1]);
        if artist.is_empty() || song.is_empty() {
            return Err(malformed("empty artist or song"));
        }
        let frequency: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| malformed("frequency is not a number"))?;
        if !frequency.is_finite() {
            return Err(malformed("frequency is not finite"));
        }
        if frequency < 0.0 {
            return Err(Error::NegativeFrequency { line: line_no });
        }
        entries.push(KbEntry {
            artist,
            song,
            frequency,
        });
    }
    Ok(entries)
}

pub fn load_kb(path: &Path) -> Result<Vec<KbEntry>> {
    parse_kb(&util::read_to_string(path)?)
}

pub fn kb_to_tsv(entries: &[KbEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            key(&e.artist),
            key(&e.song),
            e.frequency
        ));
    }
    out
}

/// Symmetric word co-occurrence counts with optional add-one smoothing over
/// the table's observed vocabulary.
///
/// Each observed pair `(a, b)` is counted in both orientations, so the joint
/// is symmetric and its row sums are the marginals.
#[derive(Debug, Clone, Default)]
pub struct WordPairTable {
    ids: HashMap<String, u32>,
    joint: HashMap<(u32, u32), f64>,
    row: Vec<f64>,
    total: f64,
    smoothing: bool,
}

impl WordPairTable {
    pub fn new(vocabulary: impl IntoIterator<Item = String>, smoothing: bool) -> Self {
        let mut t = WordPairTable {
            smoothing,
            ..Default::default()
        };
        for w in vocabulary {
            t.intern(&w);
        }
        t
    }

    fn intern(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.row.len() as u32;
        self.ids.insert(w.to_string(), id);
        self.row.push(0.0);
        id
    }

    /// Adds one observation of the unordered pair `{a, b}`.
    pub fn observe(&mut self, a: &str, b: &str) {
        let ia = self.intern(a);
        let ib = self.intern(b);
        *self.joint.entry((ia, ib)).or_default() += 1.0;
        *self.joint.entry((ib, ia)).or_default() += 1.0;
        self.row[ia as usize] += 1.0;
        self.row[ib as usize] += 1.0;
        self.total += 2.0;
    }

    pub fn vocab_size(&self) -> usize {
        self.row.len()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }

    fn denom(&self) -> f64 {
        let w = self.row.len() as f64;
        if self.smoothing {
            self.total + w * w
        } else {
            self.total
        }
    }

    fn smooth(&self) -> f64 {
        if self.smoothing {
            1.0
        } else {
            0.0
        }
    }

    /// `p(a, b)`, or `None` if either word is outside the table.
    pub fn joint(&self, a: &str, b: &str) -> Option<f64> {
        let ia = *self.ids.get(a)?;
        let ib = *self.ids.get(b)?;
        let d = self.denom();
        if d == 0.0 {
            return Some(0.0);
        }
        let c = self.joint.get(&(ia, ib)).copied().unwrap_or(0.0);
        Some((c + self.smooth()) / d)
    }

    pub fn marginal(&self, w: &str) -> Option<f64> {
        let i = *self.ids.get(w)?;
        let d = self.denom();
        if d == 0.0 {
            return Some(0.0);
        }
        let smoothed = self.smooth() * self.row.len() as f64;
        Some((self.row[i as usize] + smoothed) / d)
    }

    /// Normalized PMI in `[-1, 1]`; unseen words and zero joints give −1.
    pub fn npmi(&self, a: &str, b: &str) -> f64 {
        match (self.joint(a, b), self.marginal(a), self.marginal(b)) {
            (Some(pab), Some(pa), Some(pb)) => npmi_from_probs(pab, pa, pb),
            _ => -1.0,
        }
    }
}

/// `log(p(a,b) / (p(a) p(b))) / −log p(a,b)`, with the limits at the ends.
pub fn npmi_from_probs(p_ab: f64, p_a: f64, p_b: f64) -> f64 {
    if !(p_ab > 0.0) || !(p_a > 0.0) || !(p_b > 0.0) {
        return -1.0;
    }
    if p_ab >= 1.0 {
        return 1.0;
    }
    let v = (p_ab / (p_a * p_b)).ln() / -p_ab.ln();
    v.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Default)]
struct PhraseInfo {
    id: u32,
    entries: Vec<usize>,
    frequency: f64,
}

#[derive(Debug, Clone)]
pub struct KbIndex {
    entries: Vec<KbEntry>,
    artists: HashMap<String, PhraseInfo>,
    songs: HashMap<String, PhraseInfo>,
    pairs: HashMap<(u32, u32), u32>,
    max_cooccurrence: u32,
    cross: WordPairTable,
    intra: WordPairTable,
}

const CACHE_MAGIC: &[u8; 8] = b"KBRRKB\0\0";
const CACHE_VERSION: u32 = 1;

impl KbIndex {
    pub fn build(entries: Vec<KbEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyKb);
        }
        Ok(Self::build_unchecked(entries))
    }

    /// Index over an empty KB: every lookup misses.
    pub fn empty() -> Self {
        Self::build_unchecked(Vec::new())
    }

    fn build_unchecked(entries: Vec<KbEntry>) -> Self {
        let mut artists: HashMap<String, PhraseInfo> = HashMap::new();
        let mut songs: HashMap<String, PhraseInfo> = HashMap::new();
        let mut pairs: HashMap<(u32, u32), u32> = HashMap::new();

        let mut kb_words: Vec<String> = entries
            .iter()
            .flat_map(|e| e.artist.iter().chain(&e.song).cloned())
            .collect();
        kb_words.sort();
        kb_words.dedup();
        let mut cross = WordPairTable::new(kb_words.iter().cloned(), true);
        let mut intra = WordPairTable::new(kb_words, true);

        for (i, e) in entries.iter().enumerate() {
            let n = artists.len() as u32;
            let a = artists.entry(key(&e.artist)).or_insert_with(|| PhraseInfo {
                id: n,
                ..Default::default()
            });
            a.entries.push(i);
            a.frequency += e.frequency;
            let aid = a.id;
            let n = songs.len() as u32;
            let s = songs.entry(key(&e.song)).or_insert_with(|| PhraseInfo {
                id: n,
                ..Default::default()
            });
            s.entries.push(i);
            s.frequency += e.frequency;
            *pairs.entry((aid, s.id)).or_default() += 1;

            for aw in &e.artist {
                for sw in &e.song {
                    cross.observe(aw, sw);
                }
            }
            for field in [&e.artist, &e.song] {
                for i in 0..field.len() {
                    for j in i + 1..field.len() {
                        intra.observe(&field[i], &field[j]);
                    }
                }
            }
        }
        let max_cooccurrence = pairs.values().copied().max().unwrap_or(0);
        KbIndex {
            entries,
            artists,
            songs,
            pairs,
            max_cooccurrence,
            cross,
            intra,
        }
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn max_cooccurrence(&self) -> u32 {
        self.max_cooccurrence
    }

    fn field_map(&self, field: Field) -> &HashMap<String, PhraseInfo> {
        match field {
            Field::Artist => &self.artists,
            Field::Song => &self.songs,
        }
    }

    /// Summed frequency of entries whose `field` equals `phrase` exactly.
    pub fn phrase_frequency(&self, phrase: &[String], field: Field) -> f64 {
        self.field_map(field)
            .get(&key(phrase))
            .map_or(0.0, |p| p.frequency)
    }

    /// Phrase id within `field`, used by the co-occurrence lookup.
    pub fn phrase_id(&self, phrase: &[String], field: Field) -> Option<u32> {
        self.field_map(field).get(&key(phrase)).map(|p| p.id)
    }

    pub fn cooccurrence_by_id(&self, artist: u32, song: u32) -> u32 {
        self.pairs.get(&(artist, song)).copied().unwrap_or(0)
    }

    /// Number of entries with exactly this artist and song.
    pub fn cooccurrence(&self, artist: &[String], song: &[String]) -> u32 {
        match (
            self.phrase_id(artist, Field::Artist),
            self.phrase_id(song, Field::Song),
        ) {
            (Some(a), Some(s)) => self.cooccurrence_by_id(a, s),
            _ => 0,
        }
    }

    /// Word pairs across the artist and song fields of an entry.
    pub fn cross_table(&self) -> &WordPairTable {
        &self.cross
    }

    /// Word pairs within one field of an entry.
    pub fn intra_table(&self) -> &WordPairTable {
        &self.intra
    }

    /// Versioned binary cache. Stores the entries; indexes are rebuilt on load.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(CACHE_MAGIC, CACHE_VERSION);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.str(&key(&e.artist));
            w.str(&key(&e.song));
            w.f64(e.frequency);
        }
        w.finish()
    }

    pub fn from_cache_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = BinReader::new(bytes, path, CACHE_MAGIC, CACHE_VERSION)?;
        let n = r.len()?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(KbEntry {
                artist: phrase(&r.str()?),
                song: phrase(&r.str()?),
                frequency: r.f64()?,
            });
        }
        r.finish()?;
        KbIndex::build(entries)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        util::write_file(path, self.to_cache_bytes())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes, path)
    }
}
