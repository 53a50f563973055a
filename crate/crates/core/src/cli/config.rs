//! Run configuration file.
//!
//! ```toml
//! seed = 7                # governs every random choice of the run
//! data_dir = "data"       # optional; --data-dir overrides
//! out = "runs/a"          # optional; --out overrides
//!
//! [model]                 # vocabulary sizes and grid geometry come from the data
//! layers = 2
//! heads = 4
//! d_model = 32
//! d_k = 8
//! d_v = 8
//! d_ff = 64
//! p_drop_visual = 0.5
//! p_drop_residual = 0.0
//! max_len = 100
//!
//! [train]                 # see TrainConfig
//! epochs = 40
//! warmup_steps = 4000
//! lr_factor = 4.0
//!
//! [synthetic]             # see SyntheticConfig
//! n_objects = 8
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Float;
use crate::training::TrainConfig;

/// Architecture settings that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub p_drop_visual: Float,
    pub p_drop_residual: Float,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = ModelConfig::base(1, 1);
        ModelSection {
            layers: b.layers,
            heads: b.heads,
            d_model: b.d_model,
            d_k: b.d_k,
            d_v: b.d_v,
            d_ff: b.d_ff,
            p_drop_visual: b.p_drop_visual,
            p_drop_residual: b.p_drop_residual,
            max_len: b.max_len,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, src_vocab: usize, tgt_vocab: usize, grid_len: usize, d_feat: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_k: self.d_k,
            d_v: self.d_v,
            d_ff: self.d_ff,
            src_vocab,
            tgt_vocab,
            grid_len,
            d_feat,
            p_drop_visual: self.p_drop_visual,
            p_drop_residual: self.p_drop_residual,
            max_len: self.max_len,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.set_seed(c.seed);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
        let mut c = Self::parse(&text)?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.data_dir, &mut c.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    /// `--config` when given, defaults otherwise.
    pub fn from_flag(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[model]\nlayer = 2").is_err());
        assert!(RunConfig::parse("[train]\nseed = 2").is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let c = RunConfig::parse("seed = 9\n[train]\nepochs = 3\n[model]\nd_model = 16").unwrap();
        assert_eq!((c.train.seed, c.synthetic.seed), (9, 9));
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.layers, 6);
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut c = RunConfig::parse("[train]\nselection_metric = \"perplexity\"\nclip_norm = 1.5").unwrap();
        c.set_seed(4);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
