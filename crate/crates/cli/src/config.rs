//! Run configuration: one JSON document, every key optional.
//!
//! Precedence is flags, then the config file, then built-in defaults. The
//! run seed is copied into every component seed when the config is
//! resolved, so the echoed `config.json` shows the values actually used.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flexsel_core::flops::FlopsQuery;
use flexsel_core::pipeline::{Budget, SelectionConfig};
use flexsel_core::probe::PlantedTask;
use flexsel_core::selector::{SelectorConfig, TrainConfig};
use flexsel_core::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    #[default]
    Planted,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Planted,
    Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub start: u64,
    pub count: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            start: 0,
            count: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub source: ProfileSource,
    pub haystack_index: u64,
    /// Defaults to the number of needle tokens.
    pub k: Option<usize>,
    pub reference: ModelConfig,
    /// Reference weights; freshly initialised from the seed when absent.
    pub weights: Option<PathBuf>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            source: ProfileSource::Planted,
            haystack_index: 0,
            k: None,
            reference: ModelConfig {
                max_len: 256,
                ..ModelConfig::default()
            },
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    /// Frames in the haystack being selected from.
    pub frames: usize,
    pub haystack_index: u64,
    pub selection: SelectionConfig,
    pub scorer: ScorerKind,
    pub weights: Option<PathBuf>,
    /// Repetitions per timed stage when `--timing` is given.
    pub timing_reps: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            haystack_index: 0,
            selection: SelectionConfig {
                budget: Budget::Ratio(0.0625),
                max_frames_per_set: 16,
            },
            scorer: ScorerKind::Planted,
            weights: None,
            timing_reps: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub samples: u64,
    pub holdout: u64,
    pub optimizer: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            holdout: 200,
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub weights: Option<PathBuf>,
    /// First haystack index; kept clear of the training range.
    pub start: u64,
    pub count: u64,
    pub frames: usize,
    pub selection: SelectionConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            weights: None,
            start: 1_000_000,
            count: 20,
            frames: 64,
            selection: SelectConfig::default().selection,
        }
    }
}

fn default_flops() -> FlopsQuery {
    FlopsQuery {
        layers: 28,
        reference_layer: 19,
        heads: 28,
        hidden: 3584,
        ffn: 18944,
        tokens: 10_000,
        selected: 625,
        sets: 8,
        selector_layers: 2,
        selector_hidden: 32,
        selector_ffn: 64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: PlantedTask,
    pub gen: GenConfig,
    pub profile: ProfileConfig,
    pub select: SelectConfig,
    pub selector: SelectorConfig,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
    pub flops: FlopsQuery,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: PlantedTask::default(),
            gen: GenConfig::default(),
            profile: ProfileConfig::default(),
            select: SelectConfig::default(),
            selector: SelectorConfig::default(),
            train: TrainRunConfig::default(),
            eval: EvalConfig::default(),
            flops: default_flops(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Applies the run seed to every component and aligns dimensions that
    /// must agree across components.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        self.task.haystack.seed = s;
        self.task.teacher_seed = s;
        self.selector.seed = s;
        self.train.optimizer.seed = s;
        self.profile.reference.seed = s;
        self.selector.visual_dim = self.task.haystack.feature_dim;
        self.profile.reference.visual_dim = self.task.haystack.feature_dim;
        self
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "gen": {"count": 2}}"#).unwrap();
        assert_eq!(cfg.gen.count, 2);
        assert_eq!(cfg.gen.start, 0);
        assert_eq!(cfg.flops, default_flops());
    }

    #[test]
    fn flag_seed_wins_and_propagates() {
        let cfg = RunConfig {
            seed: 3,
            ..Default::default()
        }
        .resolve(Some(9));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.task.teacher_seed, 9);
        assert_eq!(cfg.selector.seed, 9);
        let unchanged = RunConfig {
            seed: 3,
            ..Default::default()
        }
        .resolve(None);
        assert_eq!(unchanged.seed, 3);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default().resolve(Some(1));
        let b = RunConfig::default().resolve(Some(2));
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
