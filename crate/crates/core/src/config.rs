//! Run configuration: one TOML document, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, Manifest};
use crate::error::{Error, Result};
use crate::model::NetConfig;
use crate::recursion::RecursionSchedule;
use crate::train::TrainConfig;

/// Environment variable that relative output directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "TRM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `manifest.json` and the split files.
    pub dir: PathBuf,
    pub train_split: String,
    pub test_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_split: "train".into(),
            test_split: "test".into(),
        }
    }
}

/// Everything that, together with the seed, determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub schedule: RecursionSchedule,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// The configuration without its output location, which never affects results.
    pub fn canonical(&self) -> RunConfig {
        RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.canonical()).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.schedule.validate()?;
        self.train.validate()
    }

    /// The output directory, resolved against the output-root variable when relative.
    pub fn resolved_output(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Network fields that follow from a dataset.
const DATA_FIELDS: [&str; 3] = ["seq_len", "vocab_size", "puzzle_ids"];

/// Names of the dataset-derived `[net]` fields a TOML document sets explicitly.
pub fn pinned_net_fields(text: &str) -> Result<Vec<String>> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let net = doc.get("net").and_then(|v| v.as_table());
    Ok(DATA_FIELDS
        .iter()
        .filter(|k| net.is_some_and(|t| t.contains_key(**k)))
        .map(|k| k.to_string())
        .collect())
}

impl RunConfig {
    /// Copies the dataset's sequence length, vocabulary and puzzle-id count
    /// into the network unless `pinned` names them; pinned values must fit.
    pub fn fit_to_data(&mut self, m: &Manifest, pinned: &[String]) -> Result<()> {
        let is_pinned = |k: &str| pinned.iter().any(|p| p == k);
        let net = &mut self.net;
        if is_pinned("seq_len") {
            if net.seq_len != m.seq_len {
                return Err(Error::Vocab(format!(
                    "config sequence length {} but dataset has {}",
                    net.seq_len, m.seq_len
                )));
            }
        } else {
            net.seq_len = m.seq_len;
        }
        if is_pinned("vocab_size") {
            if net.vocab_size < m.vocab_size {
                return Err(Error::Vocab(format!(
                    "config vocab {} but dataset uses {}",
                    net.vocab_size, m.vocab_size
                )));
            }
        } else {
            net.vocab_size = m.vocab_size;
        }
        if !is_pinned("puzzle_ids") {
            net.puzzle_ids = m.num_puzzle_ids.max(1);
        }
        Ok(())
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recursion::Variant;

    #[test]
    fn toml_round_trip_and_partial_documents() {
        let mut c = RunConfig::default();
        c.schedule.variant = Variant::Hrm;
        c.net.n_layers = 4;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial = RunConfig::from_toml("[schedule]\nvariant = \"multi_z\"\nn = 3\nT = 2\n").unwrap();
        assert_eq!(partial.schedule.variant, Variant::MultiZ);
        assert_eq!(
            (partial.schedule.n, partial.schedule.t, partial.schedule.n_sup),
            (3, 2, 16)
        );
        assert_eq!(partial.train.batch_size, 768);
        assert!(RunConfig::from_toml("[schedule]\nvariant = \"nope\"").is_err());
    }

    #[test]
    fn fitting_respects_pinned_fields() {
        let m = Manifest {
            task: crate::data::Task::Sudoku,
            seed: 0,
            seq_len: 16,
            vocab_size: 6,
            num_puzzle_ids: 1,
            grid_shape: (4, 4),
            splits: Vec::new(),
            config_hash: String::new(),
        };
        let text = "[net]\nvocab_size = 12\nhidden_d = 64\n";
        let pinned = pinned_net_fields(text).unwrap();
        assert_eq!(pinned, vec!["vocab_size".to_string()]);
        let mut c = RunConfig::from_toml(text).unwrap();
        c.fit_to_data(&m, &pinned).unwrap();
        assert_eq!((c.net.seq_len, c.net.vocab_size, c.net.puzzle_ids), (16, 12, 1));
        let text = "[net]\nvocab_size = 4\n";
        let mut c = RunConfig::from_toml(text).unwrap();
        let err = c.fit_to_data(&m, &pinned_net_fields(text).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
