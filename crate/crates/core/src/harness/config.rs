//! Run configuration read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{validate_ratios, DatasetHeader};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::fusion::MoEConfig;
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::temporal::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub seed: u64,
    pub d: usize,
    pub d_xlmr: usize,
    pub d_clip: usize,
    pub seq_len: usize,
    pub experts: usize,
    pub expansion: usize,
    pub heads: usize,
    pub window: usize,
    /// Defaults to half the window.
    pub stride: Option<usize>,
    pub kappa: f64,
    pub beta: f64,
    pub proto_momentum: f64,
    pub dropout: f64,
    pub n_domains: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub split: [f64; 3],
    pub transformer: bool,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_frequencies: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 64,
            d_xlmr: 32,
            d_clip: 48,
            seq_len: 12,
            experts: 4,
            expansion: 2,
            heads: 4,
            window: 8,
            stride: None,
            kappa: 0.5,
            beta: 0.9,
            proto_momentum: 0.99,
            dropout: 0.1,
            n_domains: 2,
            epochs: 30,
            batch_size: 32,
            patience: 5,
            split: [0.8, 0.1, 0.1],
            transformer: false,
            transformer_layers: 2,
            transformer_heads: 4,
            transformer_frequencies: 8,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl HyperParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dims: EncoderDims {
                d: self.d,
                d_xlmr: self.d_xlmr,
                d_clip: self.d_clip,
                heads: self.heads,
            },
            moe: MoEConfig {
                experts: self.experts,
                expansion: self.expansion,
            },
            n_domains: self.n_domains,
            window: self.window,
            stride: self.stride(),
            kappa: self.kappa,
            beta: self.beta,
            dropout: self.dropout,
            transformer: self.transformer.then_some(TransformerConfig {
                layers: self.transformer_layers,
                heads: self.transformer_heads,
                frequencies: self.transformer_frequencies,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.proto_momentum) {
            return Err(Error::Config(format!(
                "proto_momentum must lie in [0, 1), got {}",
                self.proto_momentum
            )));
        }
        if self.transformer && (self.transformer_heads == 0 || !self.d.is_multiple_of(self.transformer_heads)) {
            return Err(Error::Config(format!(
                "transformer_heads {} must divide d={}",
                self.transformer_heads, self.d
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.clip_norm >= 0.0) {
            return Err(Error::Config("optimizer.eps must be positive and clip_norm nonnegative".into()));
        }
        validate_ratios(self.split).map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        self.model_config().validate()
    }

    /// The dataset must carry the embedding sizes the model was built for.
    pub fn check_dataset(&self, header: &DatasetHeader) -> Result<()> {
        if (header.seq_len, header.d_xlmr, header.d_clip) != (self.seq_len, self.d_xlmr, self.d_clip) {
            return Err(Error::Config(format!(
                "dataset has seq_len={}, d_xlmr={}, d_clip={} but the config expects {}, {}, {}",
                header.seq_len, header.d_xlmr, header.d_clip, self.seq_len, self.d_xlmr, self.d_clip
            )));
        }
        Ok(())
    }

    /// Canonical text form, stored in checkpoints.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_canonical_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_canonical_json().as_bytes()).into()
    }
}
