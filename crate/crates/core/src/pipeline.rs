//! File-backed pipeline stages shared by the command line and the tests.
//! Every stage reads its inputs from, and writes its outputs to, the
//! configured output directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::corpus::{Corpus, FoldAssignment, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, HypothesisScores, NBestList, ScorerMode, SummaryRow, Weights};
use crate::features::{extract_features, FeatureRecord};
use crate::kb::{load_kb, KbIndex};
use crate::negsampler::{self, ConfusionTable, NegativeRecord, NegativeSet};
use crate::neural::reranker::{self, ModelCard, RerankerParams};
use crate::ngram::{self, NGramModel};
use crate::synth;
use crate::trainer::{self, Candidate, HeldoutSet, LstmLm, TrainingInstance};
use crate::util;

/// Names of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn vocab(&self) -> PathBuf {
        self.file("vocab.tsv")
    }
    pub fn kb_index(&self) -> PathBuf {
        self.file("kb.idx")
    }
    pub fn ngram(&self) -> PathBuf {
        self.file("ngram.bin")
    }
    pub fn folds(&self) -> PathBuf {
        self.file("folds.tsv")
    }
    pub fn negatives(&self) -> PathBuf {
        self.file("negatives.jsonl")
    }
    pub fn features(&self) -> PathBuf {
        self.file("features.jsonl")
    }
    pub fn reranker(&self) -> PathBuf {
        self.file("reranker.bin")
    }
    pub fn train_log(&self) -> PathBuf {
        self.file("train_log.csv")
    }
    pub fn lstm_lm(&self) -> PathBuf {
        self.file("lstm_lm.bin")
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.file("summary.txt")
    }
    pub fn utterances(&self, mode: ScorerMode) -> PathBuf {
        self.file(&format!("test_{}.csv", mode.name()))
    }
}

/// Resolved input files: explicit paths or the synthetic world's.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub corpus: PathBuf,
    pub kb: PathBuf,
    pub heldout: PathBuf,
    pub test: PathBuf,
}

impl Inputs {
    pub fn resolve(cfg: &PipelineConfig) -> Self {
        let dir = &cfg.paths.out_dir;
        let pick = |p: &Option<PathBuf>, default: &str| p.clone().unwrap_or_else(|| dir.join(default));
        Inputs {
            corpus: pick(&cfg.paths.corpus, synth::TRAIN_FILE),
            kb: pick(&cfg.paths.kb, synth::KB_FILE),
            heldout: pick(&cfg.paths.heldout, synth::HELDOUT_FILE),
            test: pick(&cfg.paths.test, synth::TEST_FILE),
        }
    }

    /// True when no input path was given, so the synthetic world is used.
    pub fn synthetic(cfg: &PipelineConfig) -> bool {
        let p = &cfg.paths;
        p.corpus.is_none() && p.kb.is_none() && p.heldout.is_none() && p.test.is_none()
    }
}

fn artifacts(cfg: &PipelineConfig) -> Artifacts {
    Artifacts::new(&cfg.paths.out_dir)
}

fn check_vocab(artifact_hash: &str, vocab: &Vocabulary) -> Result<()> {
    let data = vocab.hash();
    if artifact_hash != data {
        return Err(Error::VocabMismatch {
            artifact: artifact_hash.to_string(),
            data,
        });
    }
    Ok(())
}

pub fn synth_world(cfg: &PipelineConfig) -> Result<synth::SynthWorld> {
    let world = synth::generate_world(&cfg.synth)?;
    world.write(&cfg.paths.out_dir)?;
    Ok(world)
}

pub fn build_vocab(cfg: &PipelineConfig) -> Result<Vocabulary> {
    let corpus = Corpus::load(&Inputs::resolve(cfg).corpus)?;
    let vocab = Vocabulary::build(&corpus, cfg.vocab.min_count)?;
    vocab.save(&artifacts(cfg).vocab())?;
    Ok(vocab)
}

pub fn build_kb_index(cfg: &PipelineConfig) -> Result<KbIndex> {
    let index = KbIndex::build(load_kb(&Inputs::resolve(cfg).kb)?)?;
    index.save_cache(&artifacts(cfg).kb_index())?;
    Ok(index)
}

fn load_vocab(cfg: &PipelineConfig) -> Result<Vocabulary> {
    Vocabulary::load(&artifacts(cfg).vocab())
}

fn fold_assignment(cfg: &PipelineConfig, corpus: &Corpus) -> Result<FoldAssignment> {
    FoldAssignment::assign(corpus, cfg.ngram.folds, cfg.seed)
}

/// Full-data n-gram model; also records the jackknife fold assignment.
pub fn train_ngram(cfg: &PipelineConfig) -> Result<NGramModel> {
    let corpus = Corpus::load(&Inputs::resolve(cfg).corpus)?;
    let vocab = load_vocab(cfg)?;
    let model = NGramModel::train(&corpus, &vocab, cfg.ngram.order, None, None)?;
    let out = artifacts(cfg);
    model.save(&out.ngram())?;
    util::write_file(&out.folds(), fold_assignment(cfg, &corpus)?.to_tsv())?;
    Ok(model)
}

fn load_ngram(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<NGramModel> {
    let model = NGramModel::load(&artifacts(cfg).ngram())?;
    check_vocab(model.vocab_hash(), vocab)?;
    Ok(model)
}

/// Per-sentence sampler seed derived from the global seed.
fn sentence_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Samples negatives for every training sentence under its jackknife model,
/// then keeps the `top_m` sentences with the most plausible negatives.
/// Sentences without a confusable position are skipped.
pub fn gen_negatives(cfg: &PipelineConfig) -> Result<Vec<NegativeRecord>> {
    let corpus = Corpus::load(&Inputs::resolve(cfg).corpus)?;
    let vocab = load_vocab(cfg)?;
    let folds = fold_assignment(cfg, &corpus)?;
    let models = ngram::train_jackknife_models(&corpus, &vocab, &folds, cfg.ngram.order)?;
    let table = ConfusionTable::build(&vocab);
    let sampler = cfg.negatives.sampler();
    let sets: Vec<Option<(usize, f64, NegativeSet)>> = corpus
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let lm = &models[folds.fold_of(i)];
            match negsampler::sample_negatives(s, &table, lm, &sampler, sentence_seed(cfg.seed, i)) {
                Ok(set) => Ok(Some((i, lm.score_sentence(s), set))),
                Err(Error::NoConfusablePosition) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let sets: Vec<(usize, f64, NegativeSet)> = sets.into_iter().flatten().collect();
    let negsets: Vec<NegativeSet> = sets.iter().map(|(_, _, n)| n.clone()).collect();
    let keep = match cfg.negatives.top_m {
        Some(m) => {
            let mut k = negsampler::rank_by_negative_quality(&negsets, m)?;
            k.sort_unstable();
            k
        }
        None => (0..sets.len()).collect(),
    };
    let records: Vec<NegativeRecord> = keep
        .into_iter()
        .map(|k| {
            let (i, lp, set) = &sets[k];
            NegativeRecord {
                source_id: *i,
                source: set.source.clone(),
                source_lm_logprob: *lp,
                negatives: set.negatives.clone(),
            }
        })
        .collect();
    let out = artifacts(cfg);
    util::write_file(&out.folds(), folds.to_tsv())?;
    util::write_file(&out.negatives(), to_jsonl(&records))?;
    Ok(records)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("record serializes"));
        s.push('\n');
    }
    s
}

fn from_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    util::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1))))
        .collect()
}

pub fn load_negatives(cfg: &PipelineConfig) -> Result<Vec<NegativeRecord>> {
    from_jsonl(&artifacts(cfg).negatives())
}

fn load_index(cfg: &PipelineConfig) -> Result<KbIndex> {
    KbIndex::load_cache(&artifacts(cfg).kb_index())
}

/// Feature bundles of a training record: the source first, then each
/// negative, all with their jackknife n-gram scores.
fn record_candidates(rec: &NegativeRecord, vocab: &Vocabulary, index: &KbIndex) -> Result<Vec<(Sentence, Candidate)>> {
    let mut out = Vec::with_capacity(rec.negatives.len() + 1);
    let mut push = |s: &Sentence, lp: f64| -> Result<()> {
        let bundle = extract_features(s, lp, index)?;
        out.push((s.clone(), Candidate { ids: vocab.encode(s), bundle }));
        Ok(())
    };
    push(&rec.source, rec.source_lm_logprob)?;
    for n in &rec.negatives {
        push(&n.tokens, n.lm_logprob)?;
    }
    Ok(out)
}

/// Candidates of each n-best hypothesis, scored by the full-data model.
fn list_candidates(
    lists: &[NBestList],
    vocab: &Vocabulary,
    index: &KbIndex,
    ngram: &NGramModel,
) -> Result<Vec<Vec<Candidate>>> {
    lists
        .par_iter()
        .map(|l| {
            l.hypotheses
                .iter()
                .map(|h| {
                    let bundle = extract_features(&h.tokens, ngram.score_sentence(&h.tokens), index)?;
                    Ok(Candidate { ids: vocab.encode(&h.tokens), bundle })
                })
                .collect()
        })
        .collect()
}

/// Dumps every feature bundle (training candidates, held-out and test
/// hypotheses) for inspection.
pub fn extract_features_stage(cfg: &PipelineConfig) -> Result<Vec<FeatureRecord>> {
    let inputs = Inputs::resolve(cfg);
    let vocab = load_vocab(cfg)?;
    let index = load_index(cfg)?;
    let ngram = load_ngram(cfg, &vocab)?;
    let mut records = Vec::new();
    for rec in load_negatives(cfg)? {
        for (h, (tokens, c)) in record_candidates(&rec, &vocab, &index)?.into_iter().enumerate() {
            records.push(FeatureRecord {
                split: "train".into(),
                sentence_id: rec.source_id.to_string(),
                hypothesis_id: h,
                tokens,
                bundle: c.bundle,
            });
        }
    }
    for (split, path) in [("heldout", &inputs.heldout), ("test", &inputs.test)] {
        let lists = eval::load_nbest(path)?;
        let cands = list_candidates(&lists, &vocab, &index, &ngram)?;
        for (l, cs) in lists.iter().zip(cands) {
            for (h, (hyp, c)) in l.hypotheses.iter().zip(cs).enumerate() {
                records.push(FeatureRecord {
                    split: split.into(),
                    sentence_id: l.id.clone(),
                    hypothesis_id: h,
                    tokens: hyp.tokens.clone(),
                    bundle: c.bundle,
                });
            }
        }
    }
    util::write_file(&artifacts(cfg).features(), to_jsonl(&records))?;
    Ok(records)
}

pub fn train_reranker(cfg: &PipelineConfig) -> Result<trainer::TrainOutcome> {
    cfg.validate()?;
    let inputs = Inputs::resolve(cfg);
    let vocab = load_vocab(cfg)?;
    let index = load_index(cfg)?;
    let ngram = load_ngram(cfg, &vocab)?;
    let instances = load_negatives(cfg)?
        .par_iter()
        .map(|rec| {
            let mut cands = record_candidates(rec, &vocab, &index)?.into_iter().map(|(_, c)| c);
            let correct = cands.next().expect("source candidate");
            TrainingInstance::new(correct, cands.collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let lists = eval::load_nbest(&inputs.heldout)?;
    let cands = list_candidates(&lists, &vocab, &index, &ngram)?;
    let heldout = HeldoutSet::new(lists, cands)?;
    let init = RerankerParams::init(cfg.reranker, vocab.size(), &mut util::seeded_rng(cfg.seed, 0x1217));
    let outcome = trainer::train_reranker(&instances, &heldout, init, &cfg.train, &cfg.eval.weight_grid)?;
    let card = ModelCard {
        dims: cfg.reranker,
        vocab_size: vocab.size(),
        vocab_hash: vocab.hash(),
        dropout: cfg.train.dropout,
        dropout_mode: "inverted".into(),
        trained_epochs: outcome.best_epoch,
        heldout_wer: Some(outcome.best_wer),
    };
    let out = artifacts(cfg);
    reranker::save_checkpoint(&out.reranker(), &outcome.params, &card)?;
    util::write_file(&out.train_log(), trainer::training_log_csv(&outcome.log))?;
    Ok(outcome)
}

pub fn train_lstm_lm(cfg: &PipelineConfig) -> Result<LstmLm> {
    let corpus = Corpus::load(&Inputs::resolve(cfg).corpus)?;
    let vocab = load_vocab(cfg)?;
    let lm = trainer::train_lstm_lm(&corpus, &vocab, &cfg.lstm_lm)?;
    lm.save(&artifacts(cfg).lstm_lm())?;
    Ok(lm)
}

/// Everything needed to score n-best lists under every scorer mode.
pub struct Scorers {
    pub vocab: Vocabulary,
    pub index: KbIndex,
    pub ngram: NGramModel,
    pub reranker: Option<RerankerParams>,
    pub lstm: Option<LstmLm>,
}

impl Scorers {
    /// Loads the artifacts; absent optional models are left out.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let out = artifacts(cfg);
        let vocab = load_vocab(cfg)?;
        let index = load_index(cfg)?;
        let ngram = load_ngram(cfg, &vocab)?;
        let reranker = if out.reranker().exists() {
            let (params, card) = reranker::load_checkpoint(&out.reranker())?;
            check_vocab(&card.vocab_hash, &vocab)?;
            Some(params)
        } else {
            None
        };
        let lstm = if out.lstm_lm().exists() {
            let lm = LstmLm::load(&out.lstm_lm())?;
            check_vocab(&lm.vocab_hash, &vocab)?;
            Some(lm)
        } else {
            None
        };
        Ok(Scorers { vocab, index, ngram, reranker, lstm })
    }

    pub fn score(&self, lists: &[NBestList]) -> Result<Vec<Vec<HypothesisScores>>> {
        let cands = list_candidates(lists, &self.vocab, &self.index, &self.ngram)?;
        let u = match &self.reranker {
            Some(p) => Some(trainer::score_candidates(p, &cands)?),
            None => None,
        };
        lists
            .par_iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(l.hypotheses
                    .iter()
                    .enumerate()
                    .map(|(j, _)| {
                        let ids = &cands[i][j].ids;
                        HypothesisScores {
                            ngram: Some(-cands[i][j].bundle.ngram_negative_logprob),
                            lstm: self.lstm.as_ref().map(|lm| lm.params.logprob(ids)),
                            reranker: u.as_ref().map(|u| u[i][j]),
                        }
                    })
                    .collect())
            })
            .collect()
    }
}

fn available(mode: ScorerMode, s: &Scorers) -> bool {
    match mode {
        ScorerMode::FirstPass | ScorerMode::Ngram => true,
        ScorerMode::Lstm => s.lstm.is_some(),
        ScorerMode::Reranker => s.reranker.is_some(),
        ScorerMode::RerankerLstm => s.reranker.is_some() && s.lstm.is_some(),
    }
}

/// Tunes each available mode's weights on held-out data, evaluates on test
/// and writes the summary table, its CSV and per-utterance CSVs.
pub fn evaluate(cfg: &PipelineConfig) -> Result<Vec<SummaryRow>> {
    let inputs = Inputs::resolve(cfg);
    let heldout = eval::load_nbest(&inputs.heldout)?;
    let test = eval::load_nbest(&inputs.test)?;
    if heldout.iter().chain(&test).any(|l| l.reference.is_none()) {
        return Err(Error::ReferencesRequired);
    }
    let scorers = Scorers::load(cfg)?;
    let h_scores = scorers.score(&heldout)?;
    let t_scores = scorers.score(&test)?;
    let out = artifacts(cfg);
    let mut rows = Vec::new();
    for mode in ScorerMode::ALL {
        if !available(mode, &scorers) {
            continue;
        }
        let (weights, h_rep) = eval::tune_weights(&heldout, &h_scores, mode, &cfg.eval.weight_grid)?;
        let t_rep = eval::evaluate(&test, &t_scores, mode, &weights)?;
        util::write_file(&out.utterances(mode), t_rep.to_csv())?;
        rows.push(SummaryRow {
            model: mode.name().to_string(),
            heldout_wer: h_rep.wer(),
            test_wer: t_rep.wer(),
            weights,
        });
    }
    rows.push(SummaryRow {
        model: "oracle".into(),
        heldout_wer: eval::oracle_wer(&heldout)?.wer(),
        test_wer: eval::oracle_wer(&test)?.wer(),
        weights: Weights::default(),
    });
    util::write_file(&out.report(), eval::summary_csv(&rows))?;
    util::write_file(&out.summary(), eval::summary_table(&rows))?;
    Ok(rows)
}

/// One reranked utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutput {
    pub id: String,
    pub chosen: usize,
    pub tokens: Sentence,
}

/// Reranks `input` under `mode`, with weights tuned on the held-out set.
pub fn rerank(cfg: &PipelineConfig, input: &Path, mode: ScorerMode) -> Result<Vec<RerankOutput>> {
    let heldout = eval::load_nbest(&Inputs::resolve(cfg).heldout)?;
    let lists = eval::load_nbest(input)?;
    let scorers = Scorers::load(cfg)?;
    if !available(mode, &scorers) {
        return Err(Error::MissingModel(mode.name().to_string()));
    }
    let (weights, _) = eval::tune_weights(&heldout, &scorers.score(&heldout)?, mode, &cfg.eval.weight_grid)?;
    let scores = scorers.score(&lists)?;
    lists
        .iter()
        .zip(&scores)
        .map(|(l, s)| {
            let chosen = eval::rerank(l, s, mode, &weights)?;
            Ok(RerankOutput {
                id: l.id.clone(),
                chosen,
                tokens: l.hypotheses[chosen].tokens.clone(),
            })
        })
        .collect()
}

pub fn rerank_to_jsonl(out: &[RerankOutput]) -> String {
    to_jsonl(out)
}

/// Runs every stage in order, generating the synthetic world first when no
/// input paths are configured.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    if Inputs::synthetic(cfg) {
        synth_world(cfg)?;
    }
    build_vocab(cfg)?;
    build_kb_index(cfg)?;
    train_ngram(cfg)?;
    gen_negatives(cfg)?;
    extract_features_stage(cfg)?;
    train_reranker(cfg)?;
    train_lstm_lm(cfg)?;
    util::write_file(&cfg.paths.out_dir.join("config.toml"), cfg.to_toml())?;
    evaluate(cfg)
}
