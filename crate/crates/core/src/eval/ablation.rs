use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, EvalReport};
use crate::dataset::{generate_dataset, DatasetConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::sampling::{Generated, SampleConfig};
use crate::training::{PreparedSample, StepLog, TrainConfig, Trainer};

/// Model variants compared by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Every image block gets its own positions in sequence order.
    NoSharedPe,
    /// Pointmap tokens may attend to text.
    NoTextAgnostic,
    NoDomainLora,
    /// Point-map blocks removed from target and conditions.
    NoPointmap,
    /// Full model trained with this many condition views.
    Views(usize),
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoSharedPe,
        Variant::NoTextAgnostic,
        Variant::NoDomainLora,
        Variant::NoPointmap,
        Variant::Views(4),
        Variant::Views(6),
        Variant::Views(8),
    ];

    /// `base` with exactly this variant's mechanism changed.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match *self {
            Variant::Full => {}
            Variant::NoSharedPe => c.shared_positions = false,
            Variant::NoTextAgnostic => c.text_agnostic_mask = false,
            Variant::NoDomainLora => c.domain_lora = false,
            Variant::NoPointmap => c.pointmap = false,
            Variant::Views(n) => c.views = n,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::NoSharedPe => write!(f, "no-shared-pe"),
            Variant::NoTextAgnostic => write!(f, "no-text-agnostic"),
            Variant::NoDomainLora => write!(f, "no-domain-lora"),
            Variant::NoPointmap => write!(f, "no-pointmap"),
            Variant::Views(n) => write!(f, "views-{n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no-shared-pe" => Variant::NoSharedPe,
            "no-text-agnostic" => Variant::NoTextAgnostic,
            "no-domain-lora" => Variant::NoDomainLora,
            "no-pointmap" => Variant::NoPointmap,
            _ => match s.strip_prefix("views-").and_then(|n| n.parse().ok()) {
                Some(n) if n >= 1 => Variant::Views(n),
                _ => return Err(Error::UnknownVariant(s.to_string())),
            },
        })
    }
}

/// Top-level keys whose values differ between two model configs.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let ta = toml::Table::try_from(a).expect("config serializes");
    let tb = toml::Table::try_from(b).expect("config serializes");
    let mut keys: Vec<String> = ta.keys().chain(tb.keys()).filter(|k| ta.get(*k) != tb.get(*k)).cloned().collect();
    keys.sort();
    keys.dedup();
    keys
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    /// Training steps per variant.
    pub steps: usize,
    pub train_samples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.iter().map(|v| v.to_string()).collect(),
            steps: 200,
            train_samples: 8,
        }
    }
}

/// Everything shared by the variants of one ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

pub struct AblationResult {
    pub variant: Variant,
    pub model_config: ModelConfig,
    pub model: Model,
    pub log: Vec<StepLog>,
    pub report: EvalReport,
    pub eval_samples: Vec<TrainingSample>,
    pub generated: Vec<Generated>,
}

/// Train `variant` with the shared seed and budget, then evaluate it on
/// held-out poses of the training assets.
pub fn run_ablation(variant: Variant, setup: &AblationSetup, on_step: impl FnMut(&StepLog)) -> Result<AblationResult> {
    let model_config = variant.apply(&setup.model);
    let data_cfg = DatasetConfig {
        views: model_config.views,
        count: setup.ablation.train_samples,
        render: crate::geometry::RenderConfig {
            width: model_config.image_size,
            height: model_config.image_size,
            ..setup.dataset.render
        },
        ..setup.dataset.clone()
    };
    let train_set = generate_dataset(&data_cfg)?;
    let held_out = generate_dataset(&DatasetConfig {
        count: setup.eval.samples,
        pose_salt: data_cfg.pose_salt.wrapping_add(1),
        ..data_cfg.clone()
    })?;
    let prepared = train_set
        .iter()
        .map(|s| PreparedSample::new(s, model_config.patch))
        .collect::<Result<Vec<_>>>()?;
    let model = Model::new(model_config.clone(), setup.train.seed)?;
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            steps: setup.ablation.steps,
            ..setup.train.clone()
        },
    )?;
    let log = trainer.run(&prepared, None, on_step)?;
    let (report, generated) = evaluate(&variant.to_string(), &trainer.model, &held_out, &setup.sample, &setup.eval)?;
    Ok(AblationResult {
        variant,
        model_config,
        model: trainer.model,
        log,
        report,
        eval_samples: held_out,
        generated,
    })
}

/// One row per variant with mean metrics; missing metrics are left empty.
pub fn comparison_csv(reports: &[&EvalReport]) -> String {
    let opt = |a: Option<super::Aggregate>| a.map(|a| format!("{:.6}", a.mean)).unwrap_or_default();
    let mut s = String::from("variant,samples,rgb_mse,pm_mse,alignment,correspondences\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.rows.len(),
            opt(r.rgb_mse()),
            opt(r.pm_mse()),
            opt(r.alignment()),
            opt(r.correspondences())
        ));
    }
    s
}
