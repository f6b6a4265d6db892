//! Desk-scale metrics (masked errors, geometry/texture alignment,
//! patch correspondences), evaluation reports and the ablation harness.

mod ablation;
mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{comparison_csv, config_diff, run_ablation, AblationConfig, AblationResult, AblationSetup, Variant};
pub use metrics::{
    alignment_against, alignment_score, best_matches, canonical_color_field, color_distance, correspondence_count,
    gradient_probes, masked_mse, PatchMatch, PATCH,
};

use crate::dataset::TrainingSample;
use crate::error::{Error, Result};
use crate::geometry::{write_rgb_png, Image};
use crate::model::viewset_patches;
use crate::sampling::{euler_sample, Generated, SampleConfig, VelocityField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out samples evaluated per run.
    pub samples: usize,
    pub probes: usize,
    pub ncc_threshold: f64,
    pub color_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            probes: 64,
            ncc_threshold: 0.9,
            color_threshold: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub asset_id: u64,
    pub caption: u32,
    pub rgb_mse: f64,
    pub pm_mse: Option<f64>,
    /// 0 when the generated point map has no foreground.
    pub alignment: Option<f64>,
    /// Best count over the condition views.
    pub correspondences: usize,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Mean and median of one metric column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl EvalReport {
    fn column(&self, f: impl Fn(&EvalRow) -> Option<f64>) -> Option<Aggregate> {
        let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| Aggregate {
            mean: mean(&v),
            median: median(&v),
        })
    }

    pub fn rgb_mse(&self) -> Option<Aggregate> {
        self.column(|r| Some(r.rgb_mse))
    }

    pub fn pm_mse(&self) -> Option<Aggregate> {
        self.column(|r| r.pm_mse)
    }

    pub fn alignment(&self) -> Option<Aggregate> {
        self.column(|r| r.alignment)
    }

    pub fn correspondences(&self) -> Option<Aggregate> {
        self.column(|r| Some(r.correspondences as f64))
    }

    /// Per-sample rows followed by `mean` and `median` rows. Missing metrics
    /// are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("sample,asset_id,caption,rgb_mse,pm_mse,alignment,correspondences,probes\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{},{},{},{}",
                r.index,
                r.asset_id,
                r.caption,
                r.rgb_mse,
                opt(r.pm_mse),
                opt(r.alignment),
                r.correspondences,
                r.probes
            );
        }
        for (name, pick) in [("mean", 0), ("median", 1)] {
            let get = |a: Option<Aggregate>| a.map(|a| if pick == 0 { a.mean } else { a.median });
            let _ = writeln!(
                s,
                "{name},,,{},{},{},{},",
                opt(get(self.rgb_mse())),
                opt(get(self.pm_mse())),
                opt(get(self.alignment())),
                opt(get(self.correspondences()))
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            r.rgb_mse.is_finite()
                && r.pm_mse.is_none_or(f64::is_finite)
                && r.alignment.is_none_or(f64::is_finite)
                && r.correspondences <= r.probes
        })
    }
}

/// Score one generated pair against its ground-truth sample.
pub fn evaluate_generated(index: usize, sample: &TrainingSample, gen: &Generated, cfg: &EvalConfig) -> Result<EvalRow> {
    let rgb_mse = masked_mse(&gen.rgb, &sample.target_rgb, &sample.target_mask);
    let (pm_mse, alignment) = match &gen.pointmap {
        Some(pm) => {
            let a = match alignment_score(&gen.rgb, pm, &sample.views, cfg.color_threshold) {
                Ok(a) => a,
                Err(Error::EmptyForeground) => 0.0,
                Err(e) => return Err(e),
            };
            (Some(masked_mse(pm, &sample.target_pointmap, &sample.target_mask)), Some(a))
        }
        None => (None, None),
    };
    let probes = gradient_probes(&gen.rgb, cfg.probes).len();
    let correspondences = sample
        .views
        .views
        .iter()
        .map(|v| correspondence_count(&gen.rgb, &v.rgb, cfg.probes, cfg.ncc_threshold))
        .max()
        .unwrap_or(0);
    Ok(EvalRow {
        index,
        asset_id: sample.asset_id,
        caption: sample.caption_id,
        rgb_mse,
        pm_mse,
        alignment,
        correspondences,
        probes,
    })
}

/// Generate every sample's target with `field` and score it.
pub fn evaluate(
    label: &str,
    field: &impl VelocityField,
    samples: &[TrainingSample],
    sample_cfg: &SampleConfig,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Generated>)> {
    let patch = field.shape().patch;
    let mut rows = Vec::with_capacity(samples.len());
    let mut gens = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let views = viewset_patches(&s.views, patch)?;
        let sc = SampleConfig {
            seed: sample_cfg.seed.wrapping_add(i as u64),
            ..*sample_cfg
        };
        let gen = euler_sample(field, &views, s.caption_id, &sc)?;
        rows.push(evaluate_generated(i, s, &gen, cfg)?);
        gens.push(gen);
    }
    Ok((
        EvalReport {
            label: label.to_string(),
            rows,
        },
        gens,
    ))
}

/// Tile rows of equally sized images with a 2-pixel white gutter.
pub fn contact_sheet(rows: &[Vec<&Image>]) -> Result<Image> {
    const GAP: usize = 2;
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidArgument("contact sheet needs at least one image".into()))?;
    let (tw, th) = (first.width, first.height);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let w = cols * tw + (cols + 1) * GAP;
    let h = rows.len() * th + (rows.len() + 1) * GAP;
    let mut sheet = Image::filled(w, h, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.width != tw || img.height != th {
                return Err(Error::InvalidArgument("contact sheet tiles differ in size".into()));
            }
            let (ox, oy) = (GAP + c * (tw + GAP), GAP + r * (th + GAP));
            for y in 0..th {
                for x in 0..tw {
                    sheet.set_pixel(ox + x, oy + y, img.pixel(x, y));
                }
            }
        }
    }
    Ok(sheet)
}

/// One row per sample: first condition view, target rgb, generated rgb,
/// target point map, generated point map.
pub fn write_contact_sheet(path: &Path, samples: &[TrainingSample], gens: &[Generated]) -> Result<()> {
    let rows: Vec<Vec<&Image>> = samples
        .iter()
        .zip(gens)
        .map(|(s, g)| {
            let mut row = Vec::new();
            if let Some(v) = s.views.views.first() {
                row.push(&v.rgb);
            }
            row.extend([&s.target_rgb, &g.rgb, &s.target_pointmap]);
            row.extend(g.pointmap.as_ref());
            row
        })
        .collect();
    let sheet = contact_sheet(&rows)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_rgb_png(path, &sheet)
}

#[cfg(test)]
mod tests;
