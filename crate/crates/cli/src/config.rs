//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use corelation::encoder::EncoderConfig;
use corelation::model::{Ablations, ModelConfig};
use corelation::training::{TrainConfig, TrainMode};

use crate::CliError;

/// Every recognized key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("train", ""),
    ("valid", ""),
    ("test", ""),
    ("codes", ""),
    ("ontology", ""),
    ("descriptions", ""),
    ("embeddings", ""),
    ("output_dir", "run"),
    ("embed_dim", "100"),
    ("hidden_dim", "512"),
    ("bidirectional", "true"),
    ("output_dim", "512"),
    ("max_note_len", "4000"),
    ("max_synonym_len", "32"),
    ("attention_dim", "256"),
    ("graph_dim", "256"),
    ("edge_dim", "64"),
    ("ffn_dim", "1024"),
    ("graph_layers", "1"),
    ("dropout", "0.2"),
    ("synonyms", "4"),
    ("edge_cap", "6"),
    ("epochs", "30"),
    ("top_k", "300"),
    ("k_s", "1000"),
    ("lambda", "0.01"),
    ("rho", "5.0"),
    ("lr", "0.0005"),
    ("batch_size", "1"),
    ("seed", "0"),
    ("mode", "full"),
    ("patience", "5"),
    ("no_relation", "false"),
    ("no_context", "false"),
    ("no_saa", "false"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_pair(text: &str, line: usize) -> Result<(String, String), CliError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("line {line}: expected `key = value`, got `{text}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = parse_pair(o, 0)?;
            cfg.set(&k, &v)?;
        }
        cfg.typed()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = parse_pair(line, i + 1)?;
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("bad value `{v}` for `{key}`")))
    }

    /// Path for `key`, or an error naming the key when unset.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.optional_path(key)
            .ok_or_else(|| CliError::Config(format!("`{key}` is not set")))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            encoder: EncoderConfig {
                embed_dim: self.parse("embed_dim")?,
                hidden_dim: self.parse("hidden_dim")?,
                bidirectional: self.parse("bidirectional")?,
                output_dim: self.parse("output_dim")?,
                max_note_len: self.parse("max_note_len")?,
                max_synonym_len: self.parse("max_synonym_len")?,
            },
            attention_dim: self.parse("attention_dim")?,
            graph_dim: self.parse("graph_dim")?,
            edge_dim: self.parse("edge_dim")?,
            ffn_dim: self.parse("ffn_dim")?,
            graph_layers: self.parse("graph_layers")?,
            top_k: self.parse("top_k")?,
            dropout: self.parse("dropout")?,
        })
    }

    pub fn training(&self) -> Result<TrainConfig, CliError> {
        let mode = match self.get("mode") {
            "full" => TrainMode::Full,
            "selective" => TrainMode::Selective,
            other => return Err(CliError::Config(format!("mode must be full or selective, got `{other}`"))),
        };
        Ok(TrainConfig {
            epochs: self.parse("epochs")?,
            top_k: self.parse("top_k")?,
            k_s: self.parse("k_s")?,
            lambda: self.parse("lambda")?,
            rho: self.parse("rho")?,
            base_lr: self.parse("lr")?,
            batch_size: self.parse("batch_size")?,
            seed: self.parse("seed")?,
            mode,
            ablations: Ablations {
                no_relation: self.parse("no_relation")?,
                no_context: self.parse("no_context")?,
                no_saa: self.parse("no_saa")?,
            },
            patience: self.parse("patience")?,
        })
    }

    pub fn synonyms(&self) -> Result<usize, CliError> {
        self.parse("synonyms")
    }

    pub fn edge_cap(&self) -> Result<usize, CliError> {
        self.parse("edge_cap")
    }

    fn typed(&self) -> Result<(), CliError> {
        self.model()?;
        self.training()?;
        self.synonyms()?;
        self.edge_cap()?;
        Ok(())
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
