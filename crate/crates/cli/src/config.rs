//! Run configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::Context;
use mdda::blocks::ShortcutSource;
use mdda::data::DegradeSpec;
use mdda::network::{Layout, ModelConfig};
use mdda::train::{AdamW, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation, the batch stream and synthetic data.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

/// A preset, optionally with individual fields replaced. Without a preset
/// every architecture field must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub base_dim: Option<usize>,
    pub mdab_counts: Option<[usize; 6]>,
    pub etb_count: Option<usize>,
    pub layout: Option<Layout>,
    pub expansion: Option<f64>,
    pub heads: Option<usize>,
    pub ffn_shortcut_source: Option<ShortcutSource>,
}

impl ModelSection {
    pub fn preset(name: &str) -> Self {
        ModelSection {
            preset: Some(name.to_string()),
            ..Default::default()
        }
    }

    pub fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = match &self.preset {
            Some(name) => ModelConfig::preset(name).map_err(|e| Usage(e.to_string()))?,
            None => {
                let (Some(base_dim), Some(mdab_counts), Some(etb_count)) = (self.base_dim, self.mdab_counts, self.etb_count)
                else {
                    return Err(Usage("[model] needs either `preset` or all of base_dim, mdab_counts and etb_count".into()).into());
                };
                ModelConfig {
                    base_dim,
                    mdab_counts,
                    etb_count,
                    ..ModelConfig::tiny()
                }
            }
        };
        if let Some(v) = self.base_dim {
            cfg.base_dim = v;
        }
        if let Some(v) = self.mdab_counts {
            cfg.mdab_counts = v;
        }
        if let Some(v) = self.etb_count {
            cfg.etb_count = v;
        }
        if let Some(v) = self.layout {
            cfg.layout = v;
        }
        if let Some(v) = self.expansion {
            cfg.expansion = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.ffn_shortcut_source {
            cfg.ffn_shortcut_source = v;
        }
        cfg.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Every field spelled out, so the section no longer depends on presets.
    pub fn explicit(cfg: &ModelConfig) -> Self {
        ModelSection {
            preset: None,
            base_dim: Some(cfg.base_dim),
            mdab_counts: Some(cfg.mdab_counts),
            etb_count: Some(cfg.etb_count),
            layout: Some(cfg.layout),
            expansion: Some(cfg.expansion),
            heads: Some(cfg.heads),
            ffn_shortcut_source: Some(cfg.ffn_shortcut_source),
        }
    }
}

/// Optimisation settings; the seed comes from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub adamw: AdamW,
    pub augment: bool,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(1000, 4, 0);
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            lr_init: t.lr_init,
            lr_min: t.lr_min,
            adamw: t.adamw,
            augment: t.augment,
            eval_every: t.eval_every,
            checkpoint_every: 100,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            seed,
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            adamw: self.adamw,
            augment: self.augment,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

/// Where training pairs come from. With `train_dir` unset, pairs are cut
/// from synthetic scenes and degraded with `degradation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory with `degraded/` and `clean/` holding same-named images,
    /// as written by `make-data`.
    pub train_dir: Option<PathBuf>,
    /// Same layout as `train_dir`, used for evaluation.
    pub eval_dir: Option<PathBuf>,
    pub patches: usize,
    pub patch_size: usize,
    pub eval_patches: usize,
    pub degradation: DegradeSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_dir: None,
            eval_dir: None,
            patches: 64,
            patch_size: 32,
            eval_patches: 8,
            degradation: DegradeSpec::noise(25.0, 0),
        }
    }
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Self {
        RunConfig {
            seed: 0,
            run_dir: default_run_dir(),
            model: ModelSection::preset(name),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// The configuration with the model spelled out, as written to the run
    /// directory.
    pub fn effective(&self) -> anyhow::Result<Self> {
        let model = self.model.resolve()?;
        self.data.degradation.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(RunConfig {
            model: ModelSection::explicit(&model),
            ..self.clone()
        })
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serialising the effective config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_override() {
        let cfg = RunConfig::parse("[model]\npreset = \"small\"\nlayout = \"C-T-C\"\n").unwrap();
        let m = cfg.model.resolve().unwrap();
        assert_eq!(m, ModelConfig::small().with_layout("C-T-C").unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 3\n").is_err());
        assert!(RunConfig::parse("[train]\nstep = 3\n").is_err());
        assert!(RunConfig::parse("[model]\npreset = \"tiny\"\ndepth = 3\n").is_err());
    }

    #[test]
    fn incomplete_model_is_a_usage_error() {
        let cfg = RunConfig::parse("[model]\nbase_dim = 8\n").unwrap();
        let err = cfg.model.resolve().unwrap_err();
        assert!(err.is::<Usage>());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::with_preset("tiny");
        cfg.seed = 17;
        cfg.data.degradation = DegradeSpec::rain(3);
        let eff = cfg.effective().unwrap();
        let text = eff.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, eff);
        assert_eq!(back.model.resolve().unwrap(), ModelConfig::tiny());
    }
}
