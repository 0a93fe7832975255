//! Contrastive-estimation training of the reranker, and the standalone LSTM
//! language model used as a second-pass baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, HypothesisScores, NBestList, ScorerMode, Weights};
use crate::features::FeatureBundle;
use crate::neural::lstm::{self, LstmParams};
use crate::neural::optim::{ParamSet, Sgd};
use crate::neural::reranker::{self, Dropout, RerankerParams};
use crate::neural::tensor::{axpy, log_softmax_at, sigmoid, softmax, Tensor};
use crate::util::{self, BinReader, BinWriter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// L2 coefficient λ.
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.0,
            momentum: 0.9,
            lr_decay: 0.5,
            l2: 1e-6,
            dropout: 0.2,
            batch_size: 64,
            max_epochs: 20,
            patience: 3,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be >= 1");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }
}

fn clip(c: f64) -> Option<f64> {
    (c > 0.0).then_some(c)
}

/// One candidate: encoded word ids and its feature bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub ids: Vec<u32>,
    pub bundle: FeatureBundle,
}

/// A training sentence (candidate 0) and its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub candidates: Vec<Candidate>,
}

impl TrainingInstance {
    pub fn new(correct: Candidate, negatives: Vec<Candidate>) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::InvalidArgument("training instance has no negatives".into()));
        }
        let mut candidates = vec![correct];
        candidates.extend(negatives);
        Ok(TrainingInstance { candidates })
    }
}

/// Held-out n-best lists with everything needed to evaluate WER per epoch.
#[derive(Debug, Clone)]
pub struct HeldoutSet {
    pub lists: Vec<NBestList>,
    /// Encoded candidates aligned with each list's hypotheses.
    pub candidates: Vec<Vec<Candidate>>,
}

impl HeldoutSet {
    pub fn new(lists: Vec<NBestList>, candidates: Vec<Vec<Candidate>>) -> Result<Self> {
        if lists.len() != candidates.len()
            || lists.iter().zip(&candidates).any(|(l, c)| l.hypotheses.len() != c.len())
        {
            return Err(Error::InvalidArgument("held-out candidates are not aligned".into()));
        }
        if lists.iter().any(|l| l.reference.is_none()) {
            return Err(Error::ReferencesRequired);
        }
        Ok(HeldoutSet { lists, candidates })
    }
}

/// Inference-mode `u` for every held-out hypothesis.
pub fn score_candidates(params: &RerankerParams, cands: &[Vec<Candidate>]) -> Result<Vec<Vec<f64>>> {
    cands
        .par_iter()
        .map(|list| {
            list.iter()
                .map(|c| reranker::score_u(params, &c.ids, &c.bundle))
                .collect()
        })
        .collect()
}

/// Held-out WER of the reranker with its interpolation weight tuned on the
/// same held-out set.
pub fn heldout_wer(params: &RerankerParams, heldout: &HeldoutSet, grid: &[f64]) -> Result<(f64, Weights)> {
    let u = score_candidates(params, &heldout.candidates)?;
    let scores: Vec<Vec<HypothesisScores>> = u
        .into_iter()
        .map(|l| {
            l.into_iter()
                .map(|r| HypothesisScores { reranker: Some(r), ..Default::default() })
                .collect()
        })
        .collect();
    let (w, rep) = eval::tune_weights(&heldout.lists, &scores, ScorerMode::Reranker, grid)?;
    Ok((rep.wer(), w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_wer: f64,
    pub lr: f64,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,heldout_wer,lr\n");
    for e in log {
        out.push_str(&format!("{},{:.9},{:.6},{}\n", e.epoch, e.mean_loss, e.heldout_wer, e.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest held-out WER.
    pub params: RerankerParams,
    pub best_epoch: usize,
    pub best_wer: f64,
    pub log: Vec<EpochLog>,
}

/// Mean contrastive loss of one instance and its gradient, accumulated into
/// `grad`.
pub fn instance_loss_grad<R: Rng>(
    params: &RerankerParams,
    inst: &TrainingInstance,
    dropout: f64,
    rng: &mut R,
    grad: &mut RerankerParams,
) -> Result<f64> {
    let scores = inst
        .candidates
        .iter()
        .map(|c| {
            let d = (dropout > 0.0).then_some(Dropout { p: dropout, rng: &mut *rng });
            reranker::score(params, &c.ids, &c.bundle, d)
        })
        .collect::<Result<Vec<_>>>()?;
    let us: Vec<f64> = scores.iter().map(|s| s.u).collect();
    let (loss, du) = reranker::contrastive_loss(&us, 0)?;
    for (sc, d) in scores.iter().zip(du) {
        reranker::backward(params, sc, d, grad);
    }
    Ok(loss)
}

/// Training objective without dropout: mean `−log P(x | N(x))` plus
/// `λ/2 · ‖θ‖²` (the penalty whose gradient is `λθ`).
pub fn objective(params: &RerankerParams, instances: &[TrainingInstance], l2: f64) -> Result<f64> {
    let mut total = 0.0;
    for inst in instances {
        let us = inst
            .candidates
            .iter()
            .map(|c| reranker::score_u(params, &c.ids, &c.bundle))
            .collect::<Result<Vec<_>>>()?;
        total += reranker::contrastive_loss(&us, 0)?.0;
    }
    Ok(total / instances.len() as f64 + 0.5 * l2 * params.sq_norm())
}

/// Minibatch SGD with momentum over the contrastive objective, halving the
/// learning rate whenever held-out WER fails to improve and stopping after
/// `patience` such epochs.
pub fn train_reranker(
    instances: &[TrainingInstance],
    heldout: &HeldoutSet,
    mut params: RerankerParams,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<TrainOutcome> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::InvalidArgument("no training instances".into()));
    }
    if let Some(i) = instances.iter().position(|i| i.candidates.len() < 2) {
        return Err(Error::InvalidArgument(format!("instance {i} has no negatives")));
    }
    let mut opt = Sgd::new(&params, config.lr, config.momentum, config.l2, clip(config.clip_norm));
    let mut grad = params.zeros_like();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(RerankerParams, usize, f64)> = None;
    let mut bad_epochs = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut util::seeded_rng(config.seed, epoch as u64));
        let mut drop_rng = util::seeded_rng(config.seed, (1 << 32) + epoch as u64);
        let lr = opt.lr;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.zero();
            for &i in batch {
                let loss = instance_loss_grad(&params, &instances[i], config.dropout, &mut drop_rng, &mut grad)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, instance {i}")));
                }
                loss_sum += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grad.tensors_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            opt.step(&mut params, &mut grad);
        }
        let (wer, _) = heldout_wer(&params, heldout, grid)?;
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / instances.len() as f64,
            heldout_wer: wer,
            lr,
        });
        if best.as_ref().is_none_or(|b| wer < b.2) {
            best = Some((params.clone(), epoch, wer));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            opt.decay(config.lr_decay);
            if bad_epochs >= config.patience {
                break;
            }
        }
    }
    let (params, best_epoch, best_wer) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_wer,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmMode {
    FullSoftmax,
    Nce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmLmConfig {
    pub mode: LmMode,
    pub nce_samples: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub train: TrainConfig,
}

impl Default for LstmLmConfig {
    fn default() -> Self {
        LstmLmConfig {
            mode: LmMode::FullSoftmax,
            nce_samples: 100,
            d_emb: 200,
            hidden: 1000,
            init_scale: 0.08,
            train: TrainConfig::default(),
        }
    }
}

/// Recurrent LM `p(x_i | h_{i−1}) = softmax(W h_{i−1} + b)`, with `h_0 = 0`.
/// Outputs are vocabulary ids plus end-of-sentence (the last id).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLmParams {
    pub emb: Tensor,
    pub lstm: LstmParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ParamSet for LstmLmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.emb];
        v.extend(self.lstm.tensors());
        v.extend([&self.out_w, &self.out_b]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.emb];
        v.extend(self.lstm.tensors_mut());
        v.extend([&mut self.out_w, &mut self.out_b]);
        v
    }
}

impl LstmLmParams {
    pub fn zeros(vocab_size: usize, d_emb: usize, hidden: usize) -> Self {
        LstmLmParams {
            emb: Tensor::zeros(vocab_size, d_emb),
            lstm: LstmParams::zeros(d_emb, hidden),
            out_w: Tensor::zeros(vocab_size + 1, hidden),
            out_b: Tensor::zeros(vocab_size + 1, 1),
        }
    }

    /// Random embedding and recurrent weights; zero output weights and
    /// output bias `−ln N` for `N` output events, so the untrained model is
    /// exactly uniform.
    pub fn init<R: Rng>(vocab_size: usize, d_emb: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let n_out = vocab_size + 1;
        let mut out_b = Tensor::zeros(n_out, 1);
        out_b.fill(-(n_out as f64).ln());
        LstmLmParams {
            emb: Tensor::uniform(vocab_size, d_emb, scale, rng),
            lstm: LstmParams::init(d_emb, hidden, scale, rng),
            out_w: Tensor::zeros(n_out, hidden),
            out_b,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.emb.rows()
    }

    pub fn num_outputs(&self) -> usize {
        self.out_b.rows()
    }

    pub fn eos(&self) -> usize {
        self.num_outputs() - 1
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.emb.cols(), self.lstm.hidden())
    }

    /// Hidden states `h_0 .. h_l` (with `h_0 = 0`) and the step caches.
    fn states(&self, ids: &[u32]) -> (Vec<Vec<f64>>, Vec<lstm::StepCache>) {
        let steps = lstm::forward_seq(&self.lstm, ids.iter().map(|&i| self.emb.row(i as usize)));
        let mut hs = vec![vec![0.0; self.lstm.hidden()]];
        hs.extend(steps.iter().map(|s| s.h.clone()));
        (hs, steps)
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.out_b.data().to_vec();
        self.out_w.matvec_acc(h, &mut z);
        z
    }

    /// Next-event distribution after the prefix `ids`.
    pub fn next_distribution(&self, ids: &[u32]) -> Vec<f64> {
        let (hs, _) = self.states(ids);
        softmax(&self.logits(hs.last().unwrap()))
    }

    /// `Σ ln p(x_i | h_{i−1})` including end-of-sentence.
    pub fn logprob(&self, ids: &[u32]) -> f64 {
        let (hs, _) = self.states(ids);
        let targets = ids.iter().map(|&i| i as usize).chain([self.eos()]);
        hs.iter()
            .zip(targets)
            .map(|(h, t)| log_softmax_at(&self.logits(h), t))
            .sum()
    }

    /// Loss and gradient for one sentence. `noise` switches to the binary
    /// NCE objective against the given samples from `noise_probs`.
    fn sentence_loss_grad<R: Rng>(
        &self,
        ids: &[u32],
        dropout: f64,
        rng: &mut R,
        noise: Option<(&[usize], &[f64])>,
        grad: &mut LstmLmParams,
    ) -> f64 {
        let (hs, steps) = self.states(ids);
        let hid = self.lstm.hidden();
        let targets: Vec<usize> = ids.iter().map(|&i| i as usize).chain([self.eos()]).collect();
        let mut dh_out = vec![vec![0.0; hid]; steps.len()];
        let mut loss = 0.0;
        for (t, h) in hs.iter().enumerate() {
            let (h_used, mask) = if dropout > 0.0 {
                let keep = 1.0 - dropout;
                let m: Vec<f64> = (0..hid)
                    .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                (h.iter().zip(&m).map(|(a, b)| a * b).collect::<Vec<f64>>(), Some(m))
            } else {
                (h.clone(), None)
            };
            let mut dh = vec![0.0; hid];
            match noise {
                None => {
                    let logits = self.logits(&h_used);
                    let mut p = softmax(&logits);
                    loss -= log_softmax_at(&logits, targets[t]);
                    p[targets[t]] -= 1.0;
                    grad.out_w.outer_acc(&p, &h_used);
                    axpy(1.0, &p, grad.out_b.data_mut());
                    self.out_w.matvec_t_acc(&p, &mut dh);
                }
                Some((samples, q)) => {
                    let k = samples.len() as f64;
                    let mut term = |w: usize, positive: bool, dh: &mut Vec<f64>| {
                        let s = crate::neural::tensor::dot(self.out_w.row(w), &h_used) + self.out_b.data()[w];
                        let delta = s - (k * q[w]).ln();
                        let sg = sigmoid(delta);
                        let (l, d) = if positive {
                            (-(sg.max(1e-300)).ln(), sg - 1.0)
                        } else {
                            (-((1.0 - sg).max(1e-300)).ln(), sg)
                        };
                        axpy(d, &h_used, grad.out_w.row_mut(w));
                        grad.out_b.data_mut()[w] += d;
                        axpy(d, self.out_w.row(w), dh);
                        l
                    };
                    loss += term(targets[t], true, &mut dh);
                    for &n in samples {
                        loss += term(n, false, &mut dh);
                    }
                }
            }
            if let Some(m) = mask {
                for (d, k) in dh.iter_mut().zip(&m) {
                    *d *= k;
                }
            }
            if t > 0 {
                dh_out[t - 1] = dh;
            }
        }
        let dxs = lstm::backward_seq(&self.lstm, &steps, &dh_out, &mut grad.lstm);
        for (t, dx) in dxs.iter().enumerate() {
            axpy(1.0, dx, grad.emb.row_mut(ids[t] as usize));
        }
        loss
    }
}

/// LSTM LM plus the vocabulary hash it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLm {
    pub params: LstmLmParams,
    pub mode: LmMode,
    pub vocab_hash: String,
    pub loss_log: Vec<f64>,
}

impl LstmLm {
    pub fn logprob(&self, vocab: &Vocabulary, sentence: &crate::corpus::Sentence) -> f64 {
        self.params.logprob(&vocab.encode(sentence))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LmCard {
    vocab_size: usize,
    d_emb: usize,
    hidden: usize,
    mode: LmMode,
    vocab_hash: String,
    loss_log: Vec<f64>,
}

const LM_MAGIC: &[u8; 8] = b"KBRRLSTM";
const LM_VERSION: u32 = 1;

impl LstmLm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let card = LmCard {
            vocab_size: self.params.vocab_size(),
            d_emb: self.params.emb.cols(),
            hidden: self.params.lstm.hidden(),
            mode: self.mode,
            vocab_hash: self.vocab_hash.clone(),
            loss_log: self.loss_log.clone(),
        };
        let mut w = BinWriter::new(LM_MAGIC, LM_VERSION);
        w.str(&serde_json::to_string(&card).expect("card serializes"));
        for t in self.params.tensors() {
            w.f64s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = BinReader::new(bytes, path, LM_MAGIC, LM_VERSION)?;
        let card: LmCard = serde_json::from_str(&r.str()?)?;
        let mut params = LstmLmParams::zeros(card.vocab_size, card.d_emb, card.hidden);
        for t in params.tensors_mut() {
            let data = r.f64s()?;
            if data.len() != t.data().len() {
                return Err(Error::format(path, "tensor length mismatch"));
            }
            t.data_mut().copy_from_slice(&data);
        }
        r.finish()?;
        Ok(LstmLm {
            params,
            mode: card.mode,
            vocab_hash: card.vocab_hash,
            loss_log: card.loss_log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Trains the LSTM LM with minibatches of sentences. The learning rate is
/// halved whenever the epoch's mean per-token training loss fails to improve.
pub fn train_lstm_lm(corpus: &Corpus, vocab: &Vocabulary, config: &LstmLmConfig) -> Result<LstmLm> {
    let tc = &config.train;
    tc.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.mode == LmMode::Nce && config.nce_samples == 0 {
        return Err(Error::InvalidArgument("nce_samples must be >= 1".into()));
    }
    let data: Vec<Vec<u32>> = corpus.sentences.iter().map(|s| vocab.encode(s)).collect();
    let mut init_rng = util::seeded_rng(tc.seed, 0x1A);
    let mut params = LstmLmParams::init(vocab.size(), config.d_emb, config.hidden, config.init_scale, &mut init_rng);

    // Unigram noise distribution over output events (add-one smoothed).
    let n_out = params.num_outputs();
    let mut counts = vec![1.0; n_out];
    for s in &data {
        for &i in s {
            counts[i as usize] += 1.0;
        }
        counts[n_out - 1] += 1.0;
    }
    let z: f64 = counts.iter().sum();
    let q: Vec<f64> = counts.iter().map(|c| c / z).collect();
    let mut cdf = Vec::with_capacity(n_out);
    let mut acc = 0.0;
    for p in &q {
        acc += p;
        cdf.push(acc);
    }

    let mut opt = Sgd::new(&params, tc.lr, tc.momentum, tc.l2, clip(tc.clip_norm));
    let mut grad = params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_log = Vec::new();
    let mut best = f64::INFINITY;
    let mut bad = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut util::seeded_rng(tc.seed, 0x1B00 + epoch as u64));
        let mut rng = util::seeded_rng(tc.seed, (2 << 32) + epoch as u64);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let samples: Vec<usize> = match config.mode {
                LmMode::FullSoftmax => Vec::new(),
                LmMode::Nce => (0..config.nce_samples)
                    .map(|_| {
                        let r: f64 = rng.random();
                        cdf.partition_point(|&c| c < r).min(n_out - 1)
                    })
                    .collect(),
            };
            grad.zero();
            let mut batch_tokens = 0;
            for &i in batch {
                let noise = (config.mode == LmMode::Nce).then_some((samples.as_slice(), q.as_slice()));
                loss_sum += params.sentence_loss_grad(&data[i], tc.dropout, &mut rng, noise, &mut grad);
                batch_tokens += data[i].len() + 1;
            }
            tokens += batch_tokens;
            let scale = 1.0 / batch_tokens as f64;
            for t in grad.tensors_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            opt.step(&mut params, &mut grad);
        }
        let mean = loss_sum / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("LSTM LM loss at epoch {epoch}")));
        }
        loss_log.push(mean);
        if mean < best {
            best = mean;
            bad = 0;
        } else {
            bad += 1;
            opt.decay(tc.lr_decay);
            if bad >= tc.patience {
                break;
            }
        }
    }
    Ok(LstmLm {
        params,
        mode: config.mode,
        vocab_hash: vocab.hash(),
        loss_log,
    })
}
