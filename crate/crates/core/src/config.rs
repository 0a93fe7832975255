//! Versioned pipeline configuration: TOML with every module default
//! overridable, plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negsampler::SamplerConfig;
use crate::neural::reranker::RerankerDims;
use crate::synth::SynthConfig;
use crate::trainer::{LstmLmConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Training corpus; defaults to the synthetic one under the output dir.
    pub corpus: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Words occurring at most this often map to the unknown word.
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_count: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramConfig {
    pub order: usize,
    pub folds: usize,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig { order: 3, folds: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativesConfig {
    pub n_samples: usize,
    pub keep_k: usize,
    pub p_sub: f64,
    /// Keep only the sentences with the most plausible negatives.
    pub top_m: Option<usize>,
}

impl Default for NegativesConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        NegativesConfig {
            n_samples: s.n_samples,
            keep_k: s.keep_k,
            p_sub: s.p_sub,
            top_m: None,
        }
    }
}

impl NegativesConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_samples: self.n_samples,
            keep_k: self.keep_k,
            p_sub: self.p_sub,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub weight_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            weight_grid: crate::eval::WEIGHT_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub vocab: VocabConfig,
    pub ngram: NgramConfig,
    pub negatives: NegativesConfig,
    pub reranker: RerankerDims,
    pub train: TrainConfig,
    pub lstm_lm: LstmLmConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = PipelineConfig {
            seed: 1,
            paths: PathsConfig {
                out_dir: PathBuf::from("out"),
                ..Default::default()
            },
            vocab: VocabConfig::default(),
            ngram: NgramConfig::default(),
            negatives: NegativesConfig::default(),
            reranker: RerankerDims::default(),
            train: TrainConfig::default(),
            lstm_lm: LstmLmConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        };
        c.propagate_seed();
        c
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.propagate_seed();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::util::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling
    /// back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let mut updated: PipelineConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.propagate_seed();
        *self = updated;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    /// Derives the per-module seeds from the global one.
    fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.lstm_lm.train.seed = self.seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        if self.ngram.folds < 2 {
            return Err(Error::Config("ngram.folds must be >= 2".into()));
        }
        if self.eval.weight_grid.is_empty() {
            return Err(Error::Config("eval.weight_grid must not be empty".into()));
        }
        if self.negatives.top_m == Some(0) {
            return Err(Error::Config("negatives.top_m must be >= 1".into()));
        }
        self.train.validate()?;
        self.lstm_lm.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.negatives.top_m = Some(100);
        c.paths.corpus = Some("corpus.txt".into());
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[train]\nlearning_rate = 1.0").is_err());
        assert!(PipelineConfig::from_toml("[train]\nlr = 0.5").is_ok());
        let mut c = PipelineConfig::default();
        assert!(c.set("train.learning_rate=2").is_err());
        assert!(c.set("nonsense").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = PipelineConfig::default();
        c.set("train.lr=0.25").unwrap();
        c.set("reranker.d_emb = 16").unwrap();
        c.set("paths.out_dir=/tmp/x").unwrap();
        c.set("negatives.top_m=50").unwrap();
        c.set("lstm_lm.mode=nce").unwrap();
        c.set("seed=9").unwrap();
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.reranker.d_emb, 16);
        assert_eq!(c.paths.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.negatives.top_m, Some(50));
        assert_eq!(c.lstm_lm.mode, crate::trainer::LmMode::Nce);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.synth.seed, 9);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = PipelineConfig::from_toml("seed = 4\n[ngram]\norder = 4\n").unwrap();
        assert_eq!(c.ngram.order, 4);
        assert_eq!(c.ngram.folds, 10);
        assert_eq!(c.synth.seed, 4);
        assert_eq!(c.train, TrainConfig { seed: 4, ..Default::default() });
    }
}
