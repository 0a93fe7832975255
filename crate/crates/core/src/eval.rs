//! Word error rate, n-best reranking under each scorer, oracle selection and
//! the summary report.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hypothesis {
    pub tokens: Sentence,
    pub first_pass_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestList {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Sentence>,
    pub hypotheses: Vec<Hypothesis>,
}

pub fn parse_nbest(text: &str, path: &Path) -> Result<Vec<NBestList>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let list: NBestList = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if list.hypotheses.is_empty() {
            return Err(Error::format(path, format!("line {}: no hypotheses", n + 1)));
        }
        out.push(list);
    }
    Ok(out)
}

pub fn load_nbest(path: &Path) -> Result<Vec<NBestList>> {
    parse_nbest(&util::read_to_string(path)?, path)
}

pub fn nbest_to_jsonl(lists: &[NBestList]) -> String {
    let mut out = String::new();
    for l in lists {
        out.push_str(&serde_json::to_string(l).expect("n-best list serializes"));
        out.push('\n');
    }
    out
}

/// Edit counts of one alignment against `ref_words` reference words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }

    fn add(&mut self, o: &WerCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Minimum-edit alignment over words with unit costs. Among minimal
/// alignments, fewer insertions win, then fewer deletions.
pub fn wer(reference: &[String], hypothesis: &[String]) -> Result<WerCounts> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    // Cost tuples (errors, insertions, deletions), compared lexicographically.
    type Cost = (usize, usize, usize);
    let (n, m) = (reference.len(), hypothesis.len());
    let mut dp: Vec<Vec<Cost>> = vec![vec![(0, 0, 0); m + 1]; n + 1];
    for i in 1..=n {
        dp[i][0] = (i, 0, i);
    }
    for j in 1..=m {
        dp[0][j] = (j, j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (e, ins, del) = dp[i - 1][j - 1];
            let diag = (e + usize::from(reference[i - 1] != hypothesis[j - 1]), ins, del);
            let (e, ins, del) = dp[i][j - 1];
            let insert = (e + 1, ins + 1, del);
            let (e, ins, del) = dp[i - 1][j];
            let delete = (e + 1, ins, del + 1);
            dp[i][j] = diag.min(insert).min(delete);
        }
    }
    let (errors, insertions, deletions) = dp[n][m];
    Ok(WerCounts {
        substitutions: errors - insertions - deletions,
        deletions,
        insertions,
        ref_words: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerMode {
    FirstPass,
    Ngram,
    Lstm,
    Reranker,
    RerankerLstm,
}

impl ScorerMode {
    pub const ALL: [ScorerMode; 5] = [
        ScorerMode::FirstPass,
        ScorerMode::Ngram,
        ScorerMode::Lstm,
        ScorerMode::Reranker,
        ScorerMode::RerankerLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerMode::FirstPass => "first-pass",
            ScorerMode::Ngram => "ngram",
            ScorerMode::Lstm => "lstm",
            ScorerMode::Reranker => "reranker",
            ScorerMode::RerankerLstm => "reranker+lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ScorerMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scorer {s:?}")))
    }
}

impl fmt::Display for ScorerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Second-pass model scores for one hypothesis. Higher is better for all.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisScores {
    pub ngram: Option<f64>,
    pub lstm: Option<f64>,
    pub reranker: Option<f64>,
}

/// Interpolation weights of the model scores added to the first-pass score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub ngram: f64,
    pub lstm: f64,
    pub reranker: f64,
}

fn require(v: Option<f64>, mode: ScorerMode) -> Result<f64> {
    v.ok_or_else(|| Error::MissingModel(mode.name().to_string()))
}

/// `first_pass + Σ weight · model score` for the models the mode uses.
pub fn total_score(
    first_pass: f64,
    scores: &HypothesisScores,
    mode: ScorerMode,
    w: &Weights,
) -> Result<f64> {
    Ok(first_pass
        + match mode {
            ScorerMode::FirstPass => 0.0,
            ScorerMode::Ngram => w.ngram * require(scores.ngram, mode)?,
            ScorerMode::Lstm => w.lstm * require(scores.lstm, mode)?,
            ScorerMode::Reranker => w.reranker * require(scores.reranker, mode)?,
            ScorerMode::RerankerLstm => {
                w.reranker * require(scores.reranker, mode)? + w.lstm * require(scores.lstm, mode)?
            }
        })
}

/// First index of the maximum.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the chosen hypothesis; ties go to the earliest.
pub fn rerank(
    list: &NBestList,
    scores: &[HypothesisScores],
    mode: ScorerMode,
    weights: &Weights,
) -> Result<usize> {
    if scores.len() != list.hypotheses.len() {
        return Err(Error::InvalidArgument("scores are not aligned with hypotheses".into()));
    }
    let totals = list
        .hypotheses
        .iter()
        .zip(scores)
        .map(|(h, s)| total_score(h.first_pass_score, s, mode, weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax_first(&totals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub chosen: usize,
    #[serde(flatten)]
    pub counts: WerCounts,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WerReport {
    pub totals: WerCounts,
    pub utterances: Vec<UtteranceResult>,
}

impl WerReport {
    pub fn wer(&self) -> f64 {
        self.totals.wer()
    }

    fn push(&mut self, r: UtteranceResult) {
        self.totals.add(&r.counts);
        self.utterances.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,chosen,substitutions,deletions,insertions,ref_words,wer\n");
        for u in &self.utterances {
            let c = &u.counts;
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6}\n",
                u.id,
                u.chosen,
                c.substitutions,
                c.deletions,
                c.insertions,
                c.ref_words,
                c.wer()
            ));
        }
        out
    }
}

fn reference(list: &NBestList) -> Result<&Sentence> {
    list.reference.as_ref().ok_or(Error::ReferencesRequired)
}

/// Picks, per utterance, the hypothesis with the fewest errors (ties first).
pub fn oracle_wer(dataset: &[NBestList]) -> Result<WerReport> {
    let mut report = WerReport::default();
    for list in dataset {
        let r = reference(list)?;
        let mut best: Option<(usize, WerCounts)> = None;
        for (i, h) in list.hypotheses.iter().enumerate() {
            let c = wer(r.tokens(), h.tokens.tokens())?;
            if best.is_none_or(|(_, b)| c.errors() < b.errors()) {
                best = Some((i, c));
            }
        }
        let (chosen, counts) = best.ok_or_else(|| Error::InvalidArgument("empty n-best list".into()))?;
        report.push(UtteranceResult {
            id: list.id.clone(),
            chosen,
            counts,
        });
    }
    Ok(report)
}

/// Reranks every utterance and aggregates micro-averaged WER.
pub fn evaluate(
    dataset: &[NBestList],
    scores: &[Vec<HypothesisScores>],
    mode: ScorerMode,
    weights: &Weights,
) -> Result<WerReport> {
    if scores.len() != dataset.len() {
        return Err(Error::InvalidArgument("scores are not aligned with dataset".into()));
    }
    let mut report = WerReport::default();
    for (list, s) in dataset.iter().zip(scores) {
        let r = reference(list)?;
        let chosen = rerank(list, s, mode, weights)?;
        report.push(UtteranceResult {
            id: list.id.clone(),
            chosen,
            counts: wer(r.tokens(), list.hypotheses[chosen].tokens.tokens())?,
        });
    }
    Ok(report)
}

/// Default interpolation grid for model weights.
pub const WEIGHT_GRID: [f64; 19] = [
    0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0,
];

/// Grid search of the mode's weights on a development set. Ties keep the
/// earliest grid point.
pub fn tune_weights(
    dataset: &[NBestList],
    scores: &[Vec<HypothesisScores>],
    mode: ScorerMode,
    grid: &[f64],
) -> Result<(Weights, WerReport)> {
    let mut candidates: Vec<Weights> = Vec::new();
    match mode {
        ScorerMode::FirstPass => candidates.push(Weights::default()),
        ScorerMode::Ngram => candidates.extend(grid.iter().map(|&g| Weights { ngram: g, ..Default::default() })),
        ScorerMode::Lstm => candidates.extend(grid.iter().map(|&g| Weights { lstm: g, ..Default::default() })),
        ScorerMode::Reranker => {
            candidates.extend(grid.iter().map(|&g| Weights { reranker: g, ..Default::default() }))
        }
        ScorerMode::RerankerLstm => {
            for &r in grid {
                for &l in grid {
                    candidates.push(Weights { reranker: r, lstm: l, ngram: 0.0 });
                }
            }
        }
    }
    let mut best: Option<(Weights, WerReport)> = None;
    for w in candidates {
        let rep = evaluate(dataset, scores, mode, &w)?;
        if best.as_ref().is_none_or(|(_, b)| rep.totals.errors() < b.totals.errors()) {
            best = Some((w, rep));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty weight grid".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub heldout_wer: f64,
    pub test_wer: f64,
    pub weights: Weights,
}

/// WER table with one row per scorer plus the oracle, in percent.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<26} | {:>8} | {:>8}\n", "Model", "heldout", "Test"));
    out.push_str(&format!("{:-<26}-+-{:->8}-+-{:->8}\n", "", "", ""));
    for r in rows {
        out.push_str(&format!(
            "{:<26} | {:>8.2} | {:>8.2}\n",
            r.model,
            100.0 * r.heldout_wer,
            100.0 * r.test_wer
        ));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("model,heldout_wer,test_wer,w_ngram,w_lstm,w_reranker\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{}\n",
            r.model, r.heldout_wer, r.test_wer, r.weights.ngram, r.weights.lstm, r.weights.reranker
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn sent(s: &str) -> Sentence {
        Sentence::parse(s).unwrap()
    }

    #[test]
    fn wer_examples() {
        let c = wer(&w("a b c"), &w("a b c")).unwrap();
        assert_eq!((c.errors(), c.ref_words), (0, 3));
        let c = wer(&w("a b c"), &w("a x c")).unwrap();
        assert_eq!(c.substitutions, 1);
        assert!((c.wer() - 1.0 / 3.0).abs() < 1e-15);
        let c = wer(&w("a b c"), &w("a c")).unwrap();
        assert_eq!((c.deletions, c.errors()), (1, 1));
        assert!(wer(&[], &w("a")).is_err());
    }

    fn list(id: &str, reference: Option<&str>, hyps: &[(&str, f64)]) -> NBestList {
        NBestList {
            id: id.into(),
            reference: reference.map(sent),
            hypotheses: hyps
                .iter()
                .map(|(t, s)| Hypothesis { tokens: sent(t), first_pass_score: *s })
                .collect(),
        }
    }

    #[test]
    fn rerank_examples() {
        let l = list("u", Some("a b"), &[("a c", -1.0), ("a b", -0.5), ("a b", -0.5)]);
        let none = vec![HypothesisScores::default(); 3];
        assert_eq!(rerank(&l, &none, ScorerMode::FirstPass, &Weights::default()).unwrap(), 1);
        let scores: Vec<HypothesisScores> = [-3.0, -9.0, -2.0]
            .iter()
            .map(|&n| HypothesisScores { ngram: Some(n), ..Default::default() })
            .collect();
        let zero = Weights::default();
        assert_eq!(rerank(&l, &scores, ScorerMode::Ngram, &zero).unwrap(), 1);
        let one = Weights { ngram: 1.0, ..zero };
        assert_eq!(rerank(&l, &scores, ScorerMode::Ngram, &one).unwrap(), 2);
        assert!(matches!(
            rerank(&l, &scores, ScorerMode::Lstm, &one),
            Err(Error::MissingModel(_))
        ));
    }

    #[test]
    fn oracle_examples() {
        let data = vec![
            list("1", Some("a b"), &[("a c", 0.0), ("a b", -1.0)]),
            list("2", Some("x y z"), &[("x y z", 0.0)]),
        ];
        assert_eq!(oracle_wer(&data).unwrap().wer(), 0.0);
        let blind = vec![list("1", None, &[("a", 0.0)])];
        assert_eq!(oracle_wer(&blind).unwrap_err().to_string(), "references required");
    }

    #[test]
    fn report_identity() {
        let data = vec![
            list("1", Some("a b c d"), &[("a x c", 0.0), ("a b c d", -1.0)]),
            list("2", Some("x y"), &[("x y q", 0.0)]),
        ];
        let scores = vec![vec![HypothesisScores::default(); 2], vec![HypothesisScores::default(); 1]];
        let rep = evaluate(&data, &scores, ScorerMode::FirstPass, &Weights::default()).unwrap();
        let t = rep.totals;
        assert_eq!(rep.wer(), (t.substitutions + t.deletions + t.insertions) as f64 / t.ref_words as f64);
        assert_eq!(t.errors(), 3);
        assert_eq!(t.ref_words, 6);
    }

    #[test]
    fn jsonl_round_trip() {
        let data = vec![
            list("1", Some("a b"), &[("a c", -0.25), ("a b", -1.5)]),
            list("2", None, &[("x", 0.0)]),
        ];
        let text = nbest_to_jsonl(&data);
        assert!(!text.lines().nth(1).unwrap().contains("reference"));
        assert_eq!(parse_nbest(&text, Path::new("n")).unwrap(), data);
        assert!(parse_nbest("{\"id\":\"1\",\"hypotheses\":[]}", Path::new("n")).is_err());
    }

    #[test]
    fn tuning_prefers_smallest_tied_weight() {
        let data = vec![list("1", Some("a b"), &[("a c", 0.0), ("a b", -1.0)])];
        let scores = vec![vec![
            HypothesisScores { reranker: Some(0.0), ..Default::default() },
            HypothesisScores { reranker: Some(2.0), ..Default::default() },
        ]];
        let (w, rep) = tune_weights(&data, &scores, ScorerMode::Reranker, &WEIGHT_GRID).unwrap();
        assert_eq!(rep.wer(), 0.0);
        assert_eq!(w.reranker, 0.75);
    }
}
