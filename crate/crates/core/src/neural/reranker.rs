//! The trainable sentence scorer.
//!
//! ```text
//! φ = [h_fwd_last; h_bwd_first; γ[co]; μ[artist]; ν[song]; η[cross]; κ[intra]]
//! s = ω · relu(Hᵀ φ)
//! u = α₁ s + α₂ φ_ngram
//! ```
//!
//! Dropout is inverted dropout on `φ` at training time: kept units are
//! scaled by `1 / (1 − p)` and inference uses `φ` unchanged.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{self, LstmParams, StepCache};
use super::optim::ParamSet;
use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, COOCCURRENCE_BINS, FREQUENCY_BINS, NPMI_BINS};
use crate::util::{self, BinReader, BinWriter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankerDims {
    pub d_emb: usize,
    pub lstm_dim: usize,
    pub d_m: usize,
    pub d_f: usize,
    pub d_xp: usize,
    pub d_ip: usize,
    pub d_hidden: usize,
    pub init_scale: f64,
    pub alpha_init: [f64; 2],
}

impl Default for RerankerDims {
    fn default() -> Self {
        RerankerDims {
            d_emb: 200,
            lstm_dim: 500,
            d_m: 10,
            d_f: 50,
            d_xp: 50,
            d_ip: 50,
            d_hidden: 256,
            init_scale: 0.08,
            alpha_init: [0.5, 0.5],
        }
    }
}

impl RerankerDims {
    pub fn phi_dim(&self) -> usize {
        2 * self.lstm_dim + self.d_m + 2 * self.d_f + self.d_xp + self.d_ip
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    pub dims: RerankerDims,
    pub vocab_size: usize,
    /// Word embeddings `E`, `V × d_emb`.
    pub emb: Tensor,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// Co-occurrence bin embeddings `γ`.
    pub gamma: Tensor,
    /// Artist-frequency bin embeddings `μ`.
    pub mu: Tensor,
    /// Song-frequency bin embeddings `ν`.
    pub nu: Tensor,
    /// Cross-entity NPMI bin embeddings `η`.
    pub eta: Tensor,
    /// Intra-entity NPMI bin embeddings `κ`.
    pub kappa: Tensor,
    /// Hidden layer `H`, `phi_dim × d_hidden`.
    pub hidden: Tensor,
    /// Output vector `ω`.
    pub omega: Tensor,
    /// Interpolation weights `[α₁, α₂]`.
    pub alpha: Tensor,
}

pub const TENSOR_NAMES: [&str; 15] = [
    "E",
    "fwd.w_x",
    "fwd.w_h",
    "fwd.b",
    "bwd.w_x",
    "bwd.w_h",
    "bwd.b",
    "gamma",
    "mu",
    "nu",
    "eta",
    "kappa",
    "H",
    "omega",
    "alpha",
];

impl ParamSet for RerankerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.emb];
        v.extend(self.fwd.tensors());
        v.extend(self.bwd.tensors());
        v.extend([
            &self.gamma,
            &self.mu,
            &self.nu,
            &self.eta,
            &self.kappa,
            &self.hidden,
            &self.omega,
            &self.alpha,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.emb];
        v.extend(self.fwd.tensors_mut());
        v.extend(self.bwd.tensors_mut());
        v.extend([
            &mut self.gamma,
            &mut self.mu,
            &mut self.nu,
            &mut self.eta,
            &mut self.kappa,
            &mut self.hidden,
            &mut self.omega,
            &mut self.alpha,
        ]);
        v
    }
}

impl RerankerParams {
    pub fn zeros(dims: RerankerDims, vocab_size: usize) -> Self {
        let d = &dims;
        RerankerParams {
            emb: Tensor::zeros(vocab_size, d.d_emb),
            fwd: LstmParams::zeros(d.d_emb, d.lstm_dim),
            bwd: LstmParams::zeros(d.d_emb, d.lstm_dim),
            gamma: Tensor::zeros(COOCCURRENCE_BINS, d.d_m),
            mu: Tensor::zeros(FREQUENCY_BINS, d.d_f),
            nu: Tensor::zeros(FREQUENCY_BINS, d.d_f),
            eta: Tensor::zeros(NPMI_BINS, d.d_xp),
            kappa: Tensor::zeros(NPMI_BINS, d.d_ip),
            hidden: Tensor::zeros(d.phi_dim(), d.d_hidden),
            omega: Tensor::zeros(d.d_hidden, 1),
            alpha: Tensor::zeros(2, 1),
            dims,
            vocab_size,
        }
    }

    pub fn init<R: Rng>(dims: RerankerDims, vocab_size: usize, rng: &mut R) -> Self {
        let d = &dims;
        let s = d.init_scale;
        RerankerParams {
            emb: Tensor::uniform(vocab_size, d.d_emb, s, rng),
            fwd: LstmParams::init(d.d_emb, d.lstm_dim, s, rng),
            bwd: LstmParams::init(d.d_emb, d.lstm_dim, s, rng),
            gamma: Tensor::uniform(COOCCURRENCE_BINS, d.d_m, s, rng),
            mu: Tensor::uniform(FREQUENCY_BINS, d.d_f, s, rng),
            nu: Tensor::uniform(FREQUENCY_BINS, d.d_f, s, rng),
            eta: Tensor::uniform(NPMI_BINS, d.d_xp, s, rng),
            kappa: Tensor::uniform(NPMI_BINS, d.d_ip, s, rng),
            hidden: Tensor::uniform(d.phi_dim(), d.d_hidden, s, rng),
            omega: Tensor::uniform(d.d_hidden, 1, s, rng),
            alpha: Tensor::from_vec(2, 1, d.alpha_init.to_vec()),
            dims,
            vocab_size,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims, self.vocab_size)
    }
}

/// Cached activations of one scored sentence.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    ids: Vec<u32>,
    bundle: FeatureBundle,
    fwd_steps: Vec<StepCache>,
    bwd_steps: Vec<StepCache>,
    /// Dropout multipliers on `φ`, if dropout was applied.
    mask: Option<Vec<f64>>,
    phi: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SentenceScore {
    /// Deep score `s`.
    pub s: f64,
    /// Interpolated score `u`.
    pub u: f64,
    pub cache: ScoreCache,
}

/// Dropout on `φ` for one forward pass.
pub struct Dropout<'a, R: Rng> {
    pub p: f64,
    pub rng: &'a mut R,
}

/// Concatenated final states `[h_fwd(x_l); h_bwd(x_1)]`.
pub fn sentence_representation(params: &RerankerParams, ids: &[u32]) -> Result<Vec<f64>> {
    check_ids(params, ids)?;
    let (f, b) = run_bilstm(params, ids);
    let mut out = f.last().unwrap().h.clone();
    out.extend_from_slice(&b.last().unwrap().h);
    Ok(out)
}

fn check_ids(params: &RerankerParams, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty sentence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= params.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "word id {bad} outside vocabulary of size {}",
            params.vocab_size
        )));
    }
    Ok(())
}

fn run_bilstm(params: &RerankerParams, ids: &[u32]) -> (Vec<StepCache>, Vec<StepCache>) {
    let f = lstm::forward_seq(&params.fwd, ids.iter().map(|&i| params.emb.row(i as usize)));
    let b = lstm::forward_seq(&params.bwd, ids.iter().rev().map(|&i| params.emb.row(i as usize)));
    (f, b)
}

pub fn score<R: Rng>(
    params: &RerankerParams,
    ids: &[u32],
    bundle: &FeatureBundle,
    dropout: Option<Dropout<'_, R>>,
) -> Result<SentenceScore> {
    check_ids(params, ids)?;
    bundle.validate()?;
    let (fwd_steps, bwd_steps) = run_bilstm(params, ids);
    let mut phi = Vec::with_capacity(params.dims.phi_dim());
    phi.extend_from_slice(&fwd_steps.last().unwrap().h);
    phi.extend_from_slice(&bwd_steps.last().unwrap().h);
    phi.extend_from_slice(params.gamma.row(bundle.cooccurrence_bin));
    phi.extend_from_slice(params.mu.row(bundle.artist_freq_bin));
    phi.extend_from_slice(params.nu.row(bundle.song_freq_bin));
    phi.extend_from_slice(params.eta.row(bundle.cross_npmi_bin));
    phi.extend_from_slice(params.kappa.row(bundle.intra_npmi_bin));

    let mask = match dropout {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let m: Vec<f64> = (0..phi.len())
                .map(|_| if d.rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            for (x, k) in phi.iter_mut().zip(&m) {
                *x *= k;
            }
            Some(m)
        }
        _ => None,
    };

    let dh = params.dims.d_hidden;
    let mut pre = vec![0.0; dh];
    params.hidden.matvec_t_acc(&phi, &mut pre);
    let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
    let s = dot(params.omega.data(), &act);
    let a = params.alpha.data();
    let u = a[0] * s + a[1] * bundle.ngram_negative_logprob;
    if !u.is_finite() {
        return Err(Error::NonFinite(format!("score {u}")));
    }
    Ok(SentenceScore {
        s,
        u,
        cache: ScoreCache {
            ids: ids.to_vec(),
            bundle: *bundle,
            fwd_steps,
            bwd_steps,
            mask,
            phi,
            pre,
            act,
        },
    })
}

/// Inference-mode score `u`.
pub fn score_u(params: &RerankerParams, ids: &[u32], bundle: &FeatureBundle) -> Result<f64> {
    Ok(score::<rand_chacha::ChaCha8Rng>(params, ids, bundle, None)?.u)
}

/// Accumulates `du · ∂u/∂θ` into `grad`. The n-gram feature is a constant.
pub fn backward(params: &RerankerParams, sc: &SentenceScore, du: f64, grad: &mut RerankerParams) {
    let c = &sc.cache;
    let a = params.alpha.data();
    grad.alpha.data_mut()[0] += sc.s * du;
    grad.alpha.data_mut()[1] += c.bundle.ngram_negative_logprob * du;
    let ds = a[0] * du;
    axpy(ds, &c.act, grad.omega.data_mut());
    let dpre: Vec<f64> = c
        .pre
        .iter()
        .zip(params.omega.data())
        .map(|(&z, &w)| if z > 0.0 { w * ds } else { 0.0 })
        .collect();
    grad.hidden.outer_acc(&c.phi, &dpre);
    let mut dphi = vec![0.0; c.phi.len()];
    params.hidden.matvec_acc(&dpre, &mut dphi);
    if let Some(mask) = &c.mask {
        for (d, m) in dphi.iter_mut().zip(mask) {
            *d *= m;
        }
    }

    let d = &params.dims;
    let h = d.lstm_dim;
    let mut off = 2 * h;
    let b = &c.bundle;
    for (table, row, width) in [
        (&mut grad.gamma, b.cooccurrence_bin, d.d_m),
        (&mut grad.mu, b.artist_freq_bin, d.d_f),
        (&mut grad.nu, b.song_freq_bin, d.d_f),
        (&mut grad.eta, b.cross_npmi_bin, d.d_xp),
        (&mut grad.kappa, b.intra_npmi_bin, d.d_ip),
    ] {
        axpy(1.0, &dphi[off..off + width], table.row_mut(row));
        off += width;
    }

    let dx_f = lstm::backward_final(&params.fwd, &c.fwd_steps, &dphi[..h], &mut grad.fwd);
    let dx_b = lstm::backward_final(&params.bwd, &c.bwd_steps, &dphi[h..2 * h], &mut grad.bwd);
    let l = c.ids.len();
    for t in 0..l {
        axpy(1.0, &dx_f[t], grad.emb.row_mut(c.ids[t] as usize));
        axpy(1.0, &dx_b[t], grad.emb.row_mut(c.ids[l - 1 - t] as usize));
    }
}

/// `−log softmax(scores)[correct]` and its gradient `p − onehot(correct)`.
pub fn contrastive_loss(scores: &[f64], correct: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("need the correct candidate and at least one negative".into()));
    }
    if correct >= scores.len() {
        return Err(Error::InvalidArgument(format!("correct index {correct} out of range")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("candidate score {bad}")));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(scores[correct] - m - z.ln());
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[correct] -= 1.0;
    Ok((loss, grad))
}

/// Metadata stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub dims: RerankerDims,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub dropout: f64,
    pub dropout_mode: String,
    pub trained_epochs: usize,
    pub heldout_wer: Option<f64>,
}

const MAGIC: &[u8; 8] = b"KBRRRRNK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &RerankerParams, card: &ModelCard) -> Result<()> {
    util::write_file(path, checkpoint_bytes(params, card))
}

pub fn checkpoint_bytes(params: &RerankerParams, card: &ModelCard) -> Vec<u8> {
    let mut w = BinWriter::new(MAGIC, VERSION);
    w.str(&serde_json::to_string(card).expect("model card serializes"));
    for t in params.tensors() {
        w.u64(t.rows() as u64);
        w.u64(t.cols() as u64);
        w.f64s(t.data());
    }
    w.finish()
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<(RerankerParams, ModelCard)> {
    let mut r = BinReader::new(bytes, path, MAGIC, VERSION)?;
    let card: ModelCard = serde_json::from_str(&r.str()?)?;
    let mut params = RerankerParams::zeros(card.dims, card.vocab_size);
    for t in params.tensors_mut() {
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        if (rows, cols) != t.shape() {
            return Err(Error::format(
                path,
                format!("tensor shape {rows}x{cols}, expected {:?}", t.shape()),
            ));
        }
        let data = r.f64s()?;
        if data.len() != rows * cols {
            return Err(Error::format(path, "tensor length mismatch"));
        }
        t.data_mut().copy_from_slice(&data);
    }
    r.finish()?;
    Ok((params, card))
}

pub fn load_checkpoint(path: &Path) -> Result<(RerankerParams, ModelCard)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}
