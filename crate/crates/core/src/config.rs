//! Experiment configuration as TOML.
//!
//! ```toml
//! seed = 1
//!
//! [corpus]
//! num_speakers = 64
//! channel_noise = 2.5
//!
//! [pooling]
//! use_attention = true
//!
//! [model]
//! deep_dim = 32
//!
//! [train]
//! epochs = 20
//!
//! [eval]
//! p_target = 0.05
//! ```
//!
//! Every key is optional and falls back to its default; unknown keys are
//! rejected. The single top-level `seed` drives corpus generation, model
//! initialization and batch sampling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::embednet::ModelDims;
use crate::error::{Error, Result};
use crate::evalkit::DcfParams;
use crate::pooling::PoolingConfig;
use crate::trainer::TrainConfig;

/// Scoring and held-out evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Cosine scoring when set, raw inner products otherwise.
    pub length_normalize: bool,
    /// Held-out speakers generated after the training speakers.
    pub speakers: usize,
    pub segments_per_speaker: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let dcf = DcfParams::default();
        Self {
            p_target: dcf.p_target,
            c_miss: dcf.c_miss,
            c_fa: dcf.c_fa,
            length_normalize: true,
            speakers: 16,
            segments_per_speaker: 8,
        }
    }
}

impl EvalConfig {
    pub fn dcf(&self) -> DcfParams {
        DcfParams {
            p_target: self.p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dcf().validate()?;
        if self.speakers < 2 {
            return Err(Error::Config("eval: speakers must be at least 2".into()));
        }
        if self.segments_per_speaker < 2 {
            return Err(Error::Config("eval: segments_per_speaker must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: SyntheticSpec,
    pub pooling: PoolingConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::medium(1)
    }
}

impl ExperimentConfig {
    /// Medium corpus, attentive SoCov pooling.
    pub fn medium(seed: u64) -> Self {
        Self {
            seed,
            corpus: SyntheticSpec::medium(seed),
            pooling: PoolingConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// Easy corpus: well separated speakers, quick to train.
    pub fn easy(seed: u64) -> Self {
        Self {
            corpus: SyntheticSpec::easy(seed),
            ..Self::medium(seed)
        }
    }

    /// Sets the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Corpus spec of the held-out evaluation speakers.
    pub fn eval_corpus_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_speakers: self.eval.speakers,
            segments_per_speaker: self.eval.segments_per_speaker,
            ..self.corpus.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pooling.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.input_dim != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "model.input_dim ({}) must equal corpus.feature_dim ({})",
                self.model.input_dim, self.corpus.feature_dim
            )));
        }
        Ok(())
    }

    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot render config: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
