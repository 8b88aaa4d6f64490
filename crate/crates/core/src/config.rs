// SPDX-License-Identifier: Apache-2.0

//! Whole-pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSource;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::parser::ParserConfig;
use crate::seed::derive_seed;
use crate::session::SessionizerConfig;
use crate::synth::{ANOMALY_CLASSES, LINE_FORMAT};
use crate::train::TrainConfig;

pub const TOOL_NAME: &str = "logxfer";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Raw line layout, e.g. `<Label> <Timestamp> <Node> <Content>`.
    pub line_format: String,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            line_format: "<Content>".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub source: EmbeddingSource,
    /// Precomputed table, required when `source` is `file`.
    pub path: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            source: EmbeddingSource::Hashed,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub anomaly_rate: f64,
    pub source_lines: usize,
    pub target_lines: usize,
    /// Target corpus size for the low-resource study; needs enough sessions
    /// for the largest training size.
    pub lowresource_target_lines: usize,
    pub lowresource_sizes: Vec<usize>,
    pub lowresource_repeats: usize,
    pub lowresource_epochs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: ANOMALY_CLASSES[..3].iter().map(|s| s.to_string()).collect(),
            anomaly_rate: 0.05,
            source_lines: 20_000,
            target_lines: 20_000,
            lowresource_target_lines: 70_000,
            lowresource_sizes: vec![250, 500, 1000, 2500],
            lowresource_repeats: 3,
            lowresource_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every random stream is derived from it by name.
    pub seed: u64,
    pub input: InputConfig,
    pub parser: ParserConfig,
    pub sessionizer: SessionizerConfig,
    pub embedder: EmbedderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            input: InputConfig::default(),
            parser: ParserConfig::default(),
            sessionizer: SessionizerConfig::default(),
            embedder: EmbedderConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Single-core preset used by the experiment commands: d=128, one
    /// layer, synthetic line format.
    pub fn desk() -> Self {
        let model = ModelConfig {
            d: 128,
            heads: 8,
            layers: 1,
            ffn_dim: 512,
            adapter_dim: 16,
            head_hidden: 32,
            seq_len: 20,
            dropout: 0.1,
        };
        Self {
            input: InputConfig {
                line_format: LINE_FORMAT.into(),
            },
            embedder: EmbedderConfig {
                dim: model.d,
                ..EmbedderConfig::default()
            },
            train: TrainConfig {
                // The 1e-5 .. 5e-5 range barely moves a d=128 model in 30 epochs.
                max_lr: 1e-3,
                epochs: 30,
                eval_every: 2,
                early_stop_patience: None,
                ..TrainConfig::default()
            },
            model,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("pipeline config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fills derived fields. Currently the training seed, which always
    /// comes from the root seed.
    pub fn resolved(mut self) -> Self {
        self.train.seed = derive_seed(self.seed, "train");
        self
    }

    pub fn embed_seed(&self) -> u64 {
        derive_seed(self.seed, "embed")
    }

    pub fn validate(&self) -> Result<()> {
        self.parser.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        crate::parser::LineFormat::new(&self.input.line_format)?;
        if self.embedder.dim != self.model.d {
            return Err(Error::config(format!(
                "embedder.dim {} must equal model.d {}",
                self.embedder.dim, self.model.d
            )));
        }
        if self.embedder.source == EmbeddingSource::File && self.embedder.path.is_none() {
            return Err(Error::config("embedder.source=file needs embedder.path"));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::config("eval.threshold must be in (0,1)"));
        }
        if !(self.sessionizer.train_frac > 0.0 && self.sessionizer.train_frac < 1.0) {
            return Err(Error::config("sessionizer.train_frac must be in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.synth.anomaly_rate) {
            return Err(Error::config("synth.anomaly_rate must be in [0,1)"));
        }
        Ok(())
    }

    /// Writes `config.json` with the resolved config and tool version.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let doc = serde_json::json!({
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "config": self,
        });
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a config back from a `config.json` written by [`echo`](Self::echo)
    /// or from a bare config document.
    pub fn load_any(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        match v.get("config") {
            Some(inner) if v.get("tool").is_some() => {
                serde_json::from_value(inner.clone()).map_err(|e| Error::config(format!("pipeline config: {e}")))
            }
            _ => Self::from_json(&text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"model": {"depth": 3}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"train": {"batch": 3}}"#).is_err());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = PipelineConfig::from_json(r#"{"model": {"layers": 2}, "seed": 3}"#).unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.model.d, 768);
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = PipelineConfig::desk().resolved();
        c.validate().unwrap();
        c.echo(dir.path()).unwrap();
        assert_eq!(PipelineConfig::load_any(&dir.path().join("config.json")).unwrap(), c);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let mut c = PipelineConfig::desk();
        c.embedder.dim = 64;
        assert_eq!(c.validate().unwrap_err().kind(), "config");
    }
}
