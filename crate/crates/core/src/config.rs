//! Declarative run configuration shared by every CLI subcommand, one schema
//! with per-command sections. The file format (TOML) is handled by the CLI;
//! this module owns the schema, defaults, and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, VariantConfig};
use crate::curation::CurationConfig;
use crate::degrade::{CorruptionRecipe, MenuEntry};
use crate::error::{Error, Result};
use crate::trainer::{Phase, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub pretrain: Option<PretrainSection>,
    pub finetune: Option<FinetuneSection>,
    pub curate: Option<CurateSection>,
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    pub gamma: Option<f64>,
    pub heads: Option<[usize; 4]>,
    pub prompt_components: Option<usize>,
    pub prompt_dims: Option<[usize; 3]>,
    pub prompt_sizes: Option<[usize; 3]>,
    /// Reuse schedules for the named variants; the presets are the default.
    pub reuse_l: Option<[usize; 4]>,
    pub reuse_s: Option<[usize; 4]>,
}

fn default_base_channels() -> usize {
    48
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            base_channels: 48,
            gamma: None,
            heads: None,
            prompt_components: None,
            prompt_dims: None,
            prompt_sizes: None,
            reuse_l: None,
            reuse_s: None,
        }
    }
}

impl ModelSection {
    pub fn arch(&self) -> Result<ArchConfig> {
        let mut arch = ArchConfig::with_base_channels(self.base_channels);
        if let Some(g) = self.gamma {
            arch.gamma = g;
        }
        if let Some(h) = self.heads {
            arch.heads = h;
        }
        if let Some(k) = self.prompt_components {
            arch.prompt.components = k;
        }
        if let Some(d) = self.prompt_dims {
            arch.prompt.dims = d;
        }
        if let Some(s) = self.prompt_sizes {
            arch.prompt.sizes = s;
        }
        arch.validate()?;
        Ok(arch)
    }

    /// Resolve a `--variant` flag against this section.
    pub fn variant(&self, which: &str) -> Result<VariantConfig> {
        let c = self.base_channels;
        let v = match which {
            "L" => match self.reuse_l {
                Some(f) => VariantConfig::custom("DyNet-L", f, c),
                None => VariantConfig::dynet_l(c),
            },
            "S" => match self.reuse_s {
                Some(f) => VariantConfig::custom("DyNet-S", f, c),
                None => VariantConfig::dynet_s(c),
            },
            other => {
                // custom:<f1>,<f2>,<f3>,<f4>
                let Some(spec) = other.strip_prefix("custom:") else {
                    return Err(Error::config(
                        "variant",
                        format!("expected L, S, or custom:<f1,f2,f3,f4>, got `{other}`"),
                    ));
                };
                let parts: Vec<usize> = spec
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::config("variant", format!("bad reuse list: {e}")))?;
                if parts.len() != 4 {
                    return Err(Error::config("variant", "custom variant needs 4 frequencies"));
                }
                VariantConfig::custom("custom", [parts[0], parts[1], parts[2], parts[3]], c)
            }
        };
        v.validate()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeSection {
    #[serde(default = "default_degrade_fraction")]
    pub degrade_fraction: f64,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "default_mask_unit")]
    pub mask_unit: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_sigma_range")]
    pub gaussian_sigma: (f64, f64),
    #[serde(default = "default_amplitude_range")]
    pub random_amplitude: (f64, f64),
    #[serde(default = "default_jpeg_range")]
    pub jpeg_quality: (u8, u8),
}

fn default_degrade_fraction() -> f64 {
    0.5
}
fn default_mask_fraction() -> f64 {
    0.3
}
fn default_mask_unit() -> usize {
    16
}
fn default_crop() -> usize {
    128
}
fn default_sigma_range() -> (f64, f64) {
    (5.0, 50.0)
}
fn default_amplitude_range() -> (f64, f64) {
    (10.0, 50.0)
}
fn default_jpeg_range() -> (u8, u8) {
    (30, 90)
}

impl Default for RecipeSection {
    fn default() -> Self {
        RecipeSection {
            degrade_fraction: default_degrade_fraction(),
            mask_fraction: default_mask_fraction(),
            mask_unit: default_mask_unit(),
            crop: default_crop(),
            gaussian_sigma: default_sigma_range(),
            random_amplitude: default_amplitude_range(),
            jpeg_quality: default_jpeg_range(),
        }
    }
}

impl RecipeSection {
    pub fn recipe(&self, seed: u64) -> Result<CorruptionRecipe> {
        let recipe = CorruptionRecipe {
            degrade_fraction: self.degrade_fraction,
            mask_fraction: self.mask_fraction,
            mask_unit: self.mask_unit,
            crop: self.crop,
            menu: vec![
                MenuEntry::GaussianNoise {
                    sigma: self.gaussian_sigma,
                },
                MenuEntry::RandomNoise {
                    amplitude: self.random_amplitude,
                },
                MenuEntry::Jpeg {
                    quality: self.jpeg_quality,
                },
            ],
            seed,
        };
        recipe.validate()?;
        Ok(recipe)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSection {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_variant_probability")]
    pub variant_probability: f64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub recipe: RecipeSection,
    /// Resume training from this checkpoint.
    pub resume: Option<PathBuf>,
}

fn default_iterations() -> u64 {
    1_000_000
}
fn default_pretrain_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_variant_probability() -> f64 {
    0.5
}

impl PretrainSection {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            phase: Phase::Pretrain,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            iterations: self.iterations,
            epochs: 0,
            variant_probability: self.variant_probability,
            fixed_variant: None,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            crop: self.recipe.crop,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSection {
    /// Line-delimited manifest of (task, degraded, clean) triples.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Weights to start from (a pre-training checkpoint).
    pub init_checkpoint: Option<PathBuf>,
    /// "all_in_one" or "single".
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Tasks that must be present in the manifest.
    #[serde(default)]
    pub tasks: Vec<String>,
    /// Fixed variant for single-task mode.
    pub fixed_variant: Option<String>,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_finetune_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_variant_probability")]
    pub variant_probability: f64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_finetune_crop")]
    pub crop: usize,
}

fn default_mode() -> String {
    "all_in_one".to_string()
}
fn default_epochs() -> u64 {
    120
}
fn default_finetune_batch() -> usize {
    8
}
fn default_finetune_crop() -> usize {
    128
}

impl FinetuneSection {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let phase = match self.mode.as_str() {
            "all_in_one" => Phase::FinetuneAllInOne,
            "single" => Phase::FinetuneSingle,
            other => {
                return Err(Error::config(
                    "finetune.mode",
                    format!("expected all_in_one or single, got `{other}`"),
                ))
            }
        };
        let cfg = TrainConfig {
            phase,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            iterations: 0,
            epochs: self.epochs,
            variant_probability: self.variant_probability,
            fixed_variant: self.fixed_variant.clone(),
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            crop: self.crop,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CurateSection {
    pub niqe_threshold: Option<f64>,
    pub brisque_threshold: Option<f64>,
    pub nima_threshold: Option<f64>,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_flat_cell")]
    pub flat_cell: usize,
    #[serde(default = "default_flat_tau")]
    pub flat_tau: f64,
    #[serde(default = "default_flat_max_fraction")]
    pub flat_max_fraction: f64,
    /// Directory of pristine images used to fit the metric models; the
    /// deterministic synthetic fit is used when absent.
    pub pristine_dir: Option<PathBuf>,
}

fn default_patch_size() -> usize {
    512
}
fn default_flat_cell() -> usize {
    16
}
fn default_flat_tau() -> f64 {
    2.0
}
fn default_flat_max_fraction() -> f64 {
    0.5
}

impl CurateSection {
    pub fn curation_config(&self) -> CurationConfig {
        CurationConfig {
            thresholds: crate::curation::QualityThresholds {
                niqe: self.niqe_threshold,
                brisque: self.brisque_threshold,
                nima: self.nima_threshold,
            },
            patch_size: self.patch_size,
            flat_cell: self.flat_cell,
            flat_tau: self.flat_tau,
            flat_max_fraction: self.flat_max_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSection {
    pub manifest: PathBuf,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub gwa: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_a_valid_arch() {
        let m = ModelSection::default();
        let arch = m.arch().unwrap();
        assert_eq!(arch.base_channels, 48);
        assert_eq!(m.variant("L").unwrap().reuse_freqs, [4, 6, 6, 8]);
        assert_eq!(m.variant("S").unwrap().reuse_freqs, [2, 3, 3, 4]);
        let v = m.variant("custom:1,2,3,4").unwrap();
        assert_eq!(v.reuse_freqs, [1, 2, 3, 4]);
        assert!(m.variant("Q").is_err());
    }

    #[test]
    fn invalid_schedule_is_named() {
        let m = ModelSection {
            reuse_l: Some([0, 1, 1, 1]),
            ..ModelSection::default()
        };
        let err = m.variant("L").unwrap_err();
        assert!(err.to_string().contains("reuse_freqs"), "{err}");
    }

    #[test]
    fn recipe_section_round_trip() {
        let r = RecipeSection::default();
        let recipe = r.recipe(7).unwrap();
        assert_eq!(recipe.degrade_fraction, 0.5);
        assert_eq!(recipe.mask_fraction, 0.3);
        assert_eq!(recipe.crop, 128);
        assert_eq!(recipe.menu.len(), 3);
    }
}
