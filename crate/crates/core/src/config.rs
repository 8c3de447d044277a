//! Run configuration: one TOML file with nested sections, optionally
//! overridden by `dotted.key=value` pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::phantom::PhantomConfig;
use crate::preprocess::PreprocessConfig;
use crate::segnets::{LossConfig, NetworkConfig};
use crate::synthesis::SynthesisConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Where the images come from. Either `cohort` (a directory written by the
/// phantom generator) or explicit file lists. Relative paths resolve
/// against the configuration file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub cohort: Option<PathBuf>,
    /// Registration target; defaults to the cohort template.
    pub template: Option<PathBuf>,
    pub source_images: Vec<PathBuf>,
    pub source_labels: Vec<PathBuf>,
    pub target_images: Vec<PathBuf>,
    /// Optional; used only for evaluation.
    pub target_labels: Vec<PathBuf>,
    /// Separate cohort (same layout as `cohort`) whose B images are
    /// segmented and scored instead of the training targets.
    pub test_cohort: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    /// Crop to the fixed ROI; otherwise the whole template grid is used.
    pub crop: bool,
    /// Translate the source images before segmentation training.
    pub synthesis: bool,
    /// Keep only the largest VS component after fusion.
    pub postprocess: bool,
    /// Apply each model's augmentation during segmentation training; when
    /// off, every model trains on unaltered pairs.
    pub augmentation: bool,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            crop: true,
            synthesis: true,
            postprocess: true,
            augmentation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub network: NetworkConfig,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
}

/// The four ensemble members: 2.5D with each gamma range, 3D with and
/// without attention.
pub fn default_models() -> Vec<ModelSpec> {
    let aug = |gamma: [f64; 2]| AugmentationSpec {
        gamma_range: gamma,
        ..Default::default()
    };
    vec![
        ModelSpec {
            name: "net25d_gamma2".into(),
            network: NetworkConfig::net25d(),
            augmentation: aug([0.5, 2.0]),
        },
        ModelSpec {
            name: "net25d_gamma1_5".into(),
            network: NetworkConfig::net25d(),
            augmentation: aug([0.5, 1.5]),
        },
        ModelSpec {
            name: "net3d_attention".into(),
            network: NetworkConfig::net3d(true),
            augmentation: aug([0.5, 2.0]),
        },
        ModelSpec {
            name: "net3d".into(),
            network: NetworkConfig::net3d(false),
            augmentation: aug([0.5, 2.0]),
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub stages: StagesConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    /// Used by the `phantom` subcommand and `pipeline` when no cohort
    /// exists yet at `data.cohort`.
    #[serde(default)]
    pub phantom: Option<PhantomSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub subjects: usize,
    #[serde(default)]
    pub config: PhantomConfig,
    /// Optional held-out cohort with its own appearance settings.
    #[serde(default)]
    pub test_subjects: usize,
    #[serde(default)]
    pub test_config: Option<PhantomConfig>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.synthesis.validate()?;
        self.train.validate()?;
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model names must be unique".into()));
        }
        for m in &self.models {
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("model name {:?} is not a valid directory name", m.name)));
            }
            m.network.validate()?;
            m.augmentation.validate()?;
        }
        let d = &self.data;
        if d.cohort.is_none() && d.source_images.is_empty() {
            return Err(Error::Config("data needs either `cohort` or `source_images`".into()));
        }
        if d.cohort.is_none() {
            if d.source_images.len() != d.source_labels.len() {
                return Err(Error::Config("data.source_images and data.source_labels differ in length".into()));
            }
            if d.target_images.is_empty() {
                return Err(Error::Config("data.target_images is empty".into()));
            }
            if !d.target_labels.is_empty() && d.target_labels.len() != d.target_images.len() {
                return Err(Error::Config("data.target_labels must be empty or match data.target_images".into()));
            }
            if d.template.is_none() {
                return Err(Error::Config("data.template is required without a cohort".into()));
            }
        }
        Ok(())
    }

    /// Makes every relative data path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.cohort.iter_mut().for_each(fix);
        d.template.iter_mut().for_each(fix);
        d.test_cohort.iter_mut().for_each(fix);
        for list in [&mut d.source_images, &mut d.source_labels, &mut d.target_images, &mut d.target_labels] {
            list.iter_mut().for_each(fix);
        }
    }
}

/// Parses `value` as a TOML value; bare words fall back to strings.
fn parse_value(value: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct W {
        v: toml::Value,
    }
    toml::from_str::<W>(&format!("v = {value}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(value.to_string()))
}

/// Sets `key` (dot-separated, numeric segments index arrays) in `root`,
/// creating tables as needed.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), parse_value(value));
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {part:?} is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{key}: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = parse_value(value);
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{key}: {part:?} is not inside a table"))),
        };
    }
    Ok(())
}

/// Splits `a.b=c` into key and value.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} must look like key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Reads a TOML document, applies overrides and deserializes it.
pub fn load_toml_with<T: serde::de::DeserializeOwned>(text: &str, overrides: &[(String, String)]) -> Result<(T, toml::Value)> {
    let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        set_dotted(&mut value, k, v)?;
    }
    let parsed = value.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok((parsed, value))
}

/// Loads a pipeline configuration file; relative data paths resolve
/// against its directory. Returns the config and the effective TOML.
pub fn load_pipeline_config(path: &Path, overrides: &[(String, String)]) -> Result<(PipelineConfig, toml::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut cfg, value): (PipelineConfig, _) =
        load_toml_with(&text, overrides).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok((cfg, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut v: toml::Value = toml::from_str("[train]\nmax_epochs = 3\n[[models]]\nname = \"a\"").unwrap();
        set_dotted(&mut v, "train.max_epochs", "7").unwrap();
        set_dotted(&mut v, "train.optimizer.beta1", "0.5").unwrap();
        set_dotted(&mut v, "models.0.name", "b").unwrap();
        set_dotted(&mut v, "data.cohort", "some/dir").unwrap();
        assert_eq!(v["train"]["max_epochs"].as_integer(), Some(7));
        assert_eq!(v["train"]["optimizer"]["beta1"].as_float(), Some(0.5));
        assert_eq!(v["models"][0]["name"].as_str(), Some("b"));
        assert_eq!(v["data"]["cohort"].as_str(), Some("some/dir"));
        assert!(set_dotted(&mut v, "models.3.name", "x").is_err());
        assert!(set_dotted(&mut v, "train..x", "1").is_err());
    }

    #[test]
    fn missing_max_epochs_is_named() {
        let err = load_toml_with::<PipelineConfig>("[data]\ncohort = \"x\"\n[train]\nbatch_size = 2", &[]).unwrap_err();
        assert!(err.to_string().contains("max_epochs"), "{err}");
    }

    #[test]
    fn defaults_have_four_models() {
        let (c, _) = load_toml_with::<PipelineConfig>("[data]\ncohort = \"x\"\n[train]\nmax_epochs = 1", &[]).unwrap();
        assert_eq!(c.models.len(), 4);
        c.validate().unwrap();
    }
}
