use serde::{Deserialize, Serialize};

use super::assets::Asset;
use super::scene::compose_scene;
use super::TrainingSample;
use crate::geometry::{Camera, Image, Pose};

/// Acceptance thresholds for generated samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub iou_threshold: f64,
    /// Upper bound on the masked RMSE between target and re-render.
    pub appearance_threshold: f64,
    /// Reject targets whose object covers more than this fraction of the frame.
    pub max_area_ratio: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.9,
            appearance_threshold: 0.3,
            max_area_ratio: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub iou: f32,
    pub distance: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    EmptyMask,
    AreaRatio,
    Iou,
    Appearance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterOutcome {
    pub metrics: FilterMetrics,
    pub rejection: Option<Rejection>,
}

impl FilterOutcome {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Intersection over union of two masks; two empty masks count as identical.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// RMSE over all channels of the pixels covered by either mask.
pub fn masked_rmse(a: &Image, b: &Image, mask_a: &[bool], mask_b: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..a.num_pixels() {
        if mask_a[i] || mask_b[i] {
            let (p, q) = (a.at(i), b.at(i));
            for c in 0..3 {
                sum += ((p[c] - q[c]) as f64).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Re-render `asset` at the sample's stored pose and compare against the
/// stored target.
pub fn filter_sample(sample: &TrainingSample, asset: &Asset, camera: &Camera, cfg: &FilterConfig) -> FilterOutcome {
    filter_at_pose(sample, asset, camera, &sample.pose, cfg)
}

/// [`filter_sample`] with the re-render done at an explicit `pose`.
pub fn filter_at_pose(
    sample: &TrainingSample,
    asset: &Asset,
    camera: &Camera,
    pose: &Pose,
    cfg: &FilterConfig,
) -> FilterOutcome {
    let area = sample.target_mask.iter().filter(|m| **m).count();
    let ratio = area as f64 / sample.target_mask.len().max(1) as f64;
    let rerender = compose_scene(asset, pose, sample.style(), camera);
    let metrics = match &rerender {
        Ok(r) => FilterMetrics {
            iou: mask_iou(&sample.target_mask, &r.mask) as f32,
            distance: masked_rmse(&sample.target_rgb, &r.rgb, &sample.target_mask, &r.mask) as f32,
        },
        Err(_) => FilterMetrics { iou: 0.0, distance: f32::INFINITY },
    };
    let rejection = if area == 0 || rerender.is_err() {
        Some(Rejection::EmptyMask)
    } else if ratio > cfg.max_area_ratio {
        Some(Rejection::AreaRatio)
    } else if (metrics.iou as f64) < cfg.iou_threshold {
        Some(Rejection::Iou)
    } else if metrics.distance as f64 > cfg.appearance_threshold {
        Some(Rejection::Appearance)
    } else {
        None
    };
    FilterOutcome { metrics, rejection }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_edge_cases() {
        assert_eq!(mask_iou(&[false; 4], &[false; 4]), 1.0);
        assert_eq!(mask_iou(&[true, true, false, false], &[false, true, true, false]), 1.0 / 3.0);
    }
}
