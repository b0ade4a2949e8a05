//! Run configuration: one TOML file with a flat table per concern.
//!
//! ```toml
//! [model]   # ModelConfig
//! [train]   # TrainConfig
//! [synth]   # JointRecipe
//! [data]    # where training/evaluation pairs come from
//! [ablate]  # variant list and seeds for `daiam ablate`
//! ```
//!
//! Precedence, lowest first: built-in defaults, `--preset`, `--config`
//! file, `--set section.key=value`, dedicated flags such as `--variant`.
//! Every command writes the resolved result as `config.toml` next to its
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::ModelConfig;
use crate::dataset::{procedural_cleans, read_dataset, Dataset, JointRecipe, Split};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::optim::LrDecay;
use crate::raingen::SamplePair;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset written by `daiam synth`. Unset selects procedural scenes
    /// rendered with the `[synth]` recipe.
    pub dir: Option<PathBuf>,
    pub procedural_count: usize,
    pub procedural_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            procedural_count: 50,
            procedural_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Largest single-seed inversion still accepted, in dB.
    pub tolerance_db: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: vec![
                Variant::DamZero,
                Variant::DamOdd,
                Variant::DamDual,
                Variant::Daiam,
                Variant::Ddaiam(2),
            ],
            seeds: vec![0, 1, 2],
            tolerance_db: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: JointRecipe,
    pub data: DataConfig,
    pub ablate: AblateConfig,
}

/// Named starting points for `--preset`.
pub const PRESETS: [&str; 2] = ["overfit4", "ablation"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            // Four 64x64 pairs memorised by a narrow dam_dual.
            "overfit4" => Ok(RunConfig {
                model: ModelConfig {
                    feat_ch: 8,
                    dec_ch: 16,
                    recurrence_r: 1,
                    filternet_ch: 8,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    variant: Variant::DamDual,
                    batch_size: 4,
                    crop: 64,
                    lr_start: 2e-3,
                    max_iters: 2000,
                    flip: false,
                    checkpoint_every: 1000,
                    ..TrainConfig::default()
                },
                synth: JointRecipe {
                    levels: 1,
                    ..JointRecipe::default()
                },
                data: DataConfig {
                    dir: None,
                    procedural_count: 4,
                    procedural_size: 64,
                },
                ablate: AblateConfig::default(),
            }),
            // Desk-scale ablation: 200 training pairs, equal budgets, about 50 min
            // per seed on one core.
            "ablation" => Ok(RunConfig {
                model: ModelConfig {
                    feat_ch: 8,
                    dec_ch: 16,
                    recurrence_r: 1,
                    filternet_ch: 8,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    batch_size: 4,
                    crop: 32,
                    lr_start: 1e-3,
                    lr_end: 1e-5,
                    lr_decay: LrDecay::Step,
                    lr_milestones: vec![1500, 2125],
                    max_iters: 2500,
                    checkpoint_every: 0,
                    ..TrainConfig::default()
                },
                synth: JointRecipe {
                    levels: 4,
                    test_fraction: 0.2,
                    ..JointRecipe::default()
                },
                data: DataConfig {
                    dir: None,
                    procedural_count: 71,
                    procedural_size: 64,
                },
                ablate: AblateConfig::default(),
            }),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (valid: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Write `config.toml` into `dir`, creating it if needed.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        self.save(&path)?;
        Ok(path)
    }

    /// Apply `section.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string, so `train.variant=daiam` works unquoted.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected section.key=value, got `{assignment}`")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("expected section.key, got `{}`", key.trim())))?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let table = root
            .get_mut(section)
            .and_then(|s| s.as_table_mut())
            .ok_or_else(|| Error::config(format!("unknown config section `{section}`")))?;
        table.insert(field.to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.dir.is_none() && (self.data.procedural_count == 0 || self.data.procedural_size == 0) {
            return Err(Error::config("data: procedural_count and procedural_size must be > 0"));
        }
        Ok(())
    }

    /// The dataset named by `[data]`: read from disk, or rendered from
    /// procedural scenes with the `[synth]` recipe.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.dir {
            Some(dir) => read_dataset(dir),
            None => {
                let size = self.data.procedural_size;
                self.synth.synthesize(&procedural_cleans(
                    self.data.procedural_count,
                    size,
                    size,
                    self.synth.seed,
                ))
            }
        }
    }
}

/// Training pairs; a dataset without a test split trains on everything.
pub fn train_pairs(ds: &Dataset) -> Vec<SamplePair> {
    ds.split(Split::Train).into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_defaults_and_presets() {
        let mut all = vec![RunConfig::default()];
        all.extend(PRESETS.iter().map(|p| RunConfig::preset(p).unwrap()));
        let mut custom = RunConfig::default();
        custom.data.dir = Some("data/jrsrd".into());
        custom.ablate.variants = vec![Variant::Ddaiam(3)];
        all.push(custom);
        for c in all {
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlr = 1.0\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("model.width=3").is_err());
        assert!(c.set("nothing.width=3").is_err());
        assert!(c.set("model").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("[model]\nfeat_ch = 16\n").unwrap();
        assert_eq!(c.model.feat_ch, 16);
        assert_eq!(c.model.dec_ch, ModelConfig::default().dec_ch);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn set_overrides_values() {
        let mut c = RunConfig::preset("overfit4").unwrap();
        c.set("train.variant=ddaiam(3)").unwrap();
        c.set("train.lr_start = 5e-4").unwrap();
        c.set("model.recurrence_R=2").unwrap();
        c.set("ablate.seeds=[4, 5]").unwrap();
        c.set("data.dir=out/data").unwrap();
        assert_eq!(c.train.variant, Variant::Ddaiam(3));
        assert_eq!(c.train.lr_start, 5e-4);
        assert_eq!(c.model.recurrence_r, 2);
        assert_eq!(c.ablate.seeds, vec![4, 5]);
        assert_eq!(c.data.dir, Some(PathBuf::from("out/data")));
        assert!(c.set("train.batch_size=many").is_err());
    }

    #[test]
    fn resolved_file_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::preset("ablation").unwrap();
        let path = c.write_resolved(&dir.path().join("run")).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn procedural_dataset_size() {
        let c = RunConfig::preset("overfit4").unwrap();
        let ds = c.dataset().unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.pairs[0].clean.dims(), (64, 64, 3));
        assert_eq!(train_pairs(&ds).len(), 4);
    }
}
