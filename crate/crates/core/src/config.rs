//! Run configuration: one TOML document with a table per stage, plus
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::{AblationConfig, AblationSetup, EvalConfig};
use crate::model::ModelConfig;
use crate::sampling::SampleConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// One master seed for data, initialization, training noise and sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
    }

    /// Apply `section.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string; unknown keys and type mismatches are
    /// errors.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Table::try_from(&*self).expect("config serializes");
        let parts: Vec<&str> = key.split('.').collect();
        let unknown = || Error::Config(format!("unknown config key `{key}`"));
        let mut table = &mut root;
        for p in &parts[..parts.len() - 1] {
            table = table.get_mut(*p).and_then(toml::Value::as_table_mut).ok_or_else(unknown)?;
        }
        // Absent keys are unset optionals; deserialization rejects the rest.
        table.insert(parts[parts.len() - 1].to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {}", e.message())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        let m = &self.model;
        let r = &self.dataset.render;
        if self.dataset.views != m.views {
            return Err(Error::Config(format!(
                "dataset.views = {} but model.views = {}",
                self.dataset.views, m.views
            )));
        }
        if r.width != m.image_size || r.height != m.image_size {
            return Err(Error::Config(format!(
                "render size {}x{} does not match model.image_size = {}",
                r.width, r.height, m.image_size
            )));
        }
        Ok(())
    }

    pub fn ablation_setup(&self) -> AblationSetup {
        AblationSetup {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            sample: self.sample,
            eval: self.eval,
            ablation: self.ablation.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_toml_str("[train]\nsteps = 5\n").unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nstepz = 5\n").is_err());
        assert!(RunConfig::from_toml_str("[nope]\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_override("train.stepz=5").is_err());
        assert!(c.apply_override("nope.steps=5").is_err());
        assert!(c.apply_override("train.steps").is_err());
        assert!(c.apply_override("train.steps=abc").is_err());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut c = RunConfig::default();
        c.apply_override("train.lr=0.01").unwrap();
        c.apply_override("dataset.render.radius=3.0").unwrap();
        c.apply_override("sample.conditions=text").unwrap();
        c.apply_override("train.freeze_base_after=10").unwrap();
        c.apply_override("ablation.variants=[\"full\"]").unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.dataset.render.radius, 3.0);
        assert_eq!(c.sample.conditions, crate::sampling::Conditions::Text);
        assert_eq!(c.train.freeze_base_after, Some(10));
        assert_eq!(c.ablation.variants, vec!["full".to_string()]);
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        assert_eq!((c.dataset.seed, c.train.seed, c.sample.seed), (42, 42, 42));
    }

    #[test]
    fn mismatched_views_fail_validation() {
        let mut c = RunConfig::default();
        c.model.views = 6;
        assert!(c.validate().is_err());
    }
}
