//! The JSON run configuration and how command-line flags are merged into it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use prophetnet::model::LossNormalization;
use prophetnet::train::TrainConfig;
use prophetnet::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::UserError;

/// Model settings given by the user. Unset fields come from the defaults
/// (pre-training) or from the base checkpoint (fine-tuning).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub vocab_size: Option<usize>,
    pub layers_enc: Option<usize>,
    pub layers_dec: Option<usize>,
    pub hidden: Option<usize>,
    pub ffn: Option<usize>,
    pub heads: Option<usize>,
    pub ngram: Option<usize>,
    pub gamma: Option<f64>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
    pub num_buckets: Option<usize>,
    pub max_distance: Option<usize>,
    pub loss_normalization: Option<LossNormalization>,
}

impl ModelOverrides {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size.unwrap_or(base.vocab_size),
            layers_enc: self.layers_enc.unwrap_or(base.layers_enc),
            layers_dec: self.layers_dec.unwrap_or(base.layers_dec),
            hidden: self.hidden.unwrap_or(base.hidden),
            ffn: self.ffn.unwrap_or(base.ffn),
            heads: self.heads.unwrap_or(base.heads),
            ngram: self.ngram.unwrap_or(base.ngram),
            gamma: self.gamma.unwrap_or(base.gamma),
            max_len: self.max_len.unwrap_or(base.max_len),
            dropout: self.dropout.unwrap_or(base.dropout),
            num_buckets: self.num_buckets.unwrap_or(base.num_buckets),
            max_distance: self.max_distance.unwrap_or(base.max_distance),
            loss_normalization: self.loss_normalization.unwrap_or(base.loss_normalization),
        }
    }

    /// Names of fields that would change the shape of a trained model.
    pub fn architecture_changes(&self, base: &ModelConfig) -> Vec<&'static str> {
        let new = self.apply(base);
        let mut out = Vec::new();
        let checks: [(&'static str, usize, usize); 8] = [
            ("vocab_size", new.vocab_size, base.vocab_size),
            ("layers_enc", new.layers_enc, base.layers_enc),
            ("layers_dec", new.layers_dec, base.layers_dec),
            ("hidden", new.hidden, base.hidden),
            ("ffn", new.ffn, base.ffn),
            ("heads", new.heads, base.heads),
            ("max_len", new.max_len, base.max_len),
            ("num_buckets", new.num_buckets, base.num_buckets),
        ];
        for (name, a, b) in checks {
            if a != b {
                out.push(name);
            }
        }
        if new.max_distance != base.max_distance {
            out.push("max_distance");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Denoising window in tokens.
    pub window: usize,
    /// Fraction of each window that is masked.
    pub mask_ratio: f64,
    /// Evaluate teacher-forced accuracy every this many steps (0 = never).
    pub eval_every: u64,
    /// Stop once main-stream accuracy exceeds this value.
    pub target_accuracy: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            window: 64,
            mask_ratio: 0.15,
            eval_every: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    /// Base checkpoint for fine-tuning.
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        let config = serde_json::from_str(&text)
            .map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }

    /// Seed from the `PNET_SEED` environment variable, if set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("PNET_SEED") {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| UserError(format!("PNET_SEED must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }
}

/// A path that must name an existing file.
pub fn existing(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path
        .clone()
        .ok_or_else(|| UserError(format!("no {what} given")))?;
    if !path.is_file() {
        return Err(UserError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(path)
}

/// A path that will be written: its directory must exist.
pub fn writable(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path
        .clone()
        .ok_or_else(|| UserError(format!("no {what} given")))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.is_dir() {
        return Err(UserError(format!("directory {} for {what} does not exist", dir.display())).into());
    }
    Ok(path)
}

pub fn read_lines(path: &Path, what: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UserError(format!("cannot read {what} {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
