use crate::error::{Error, Result};
use crate::geometry::{Image, ViewSet};
use crate::sampling::pointmap_to_coords;

/// Distance between two colors after dividing each by its brightest
/// channel. Headlight shading scales a surface color uniformly, so the same
/// surface point seen from different views compares as equal.
pub fn color_distance(a: [f32; 3], b: [f32; 3]) -> f64 {
    let norm = |c: [f32; 3]| {
        let m = c.iter().cloned().fold(0.0f32, f32::max).max(1e-3) as f64;
        c.map(|v| v as f64 / m)
    };
    let (a, b) = (norm(a), norm(b));
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Condition pixels as (canonical coordinate, color) pairs.
pub fn canonical_color_field(views: &ViewSet) -> Vec<([f64; 3], [f32; 3])> {
    views
        .views
        .iter()
        .flat_map(|v| pointmap_to_coords(&v.pointmap).into_iter().map(move |(i, c)| (c, v.rgb.at(i))))
        .collect()
}

/// Fraction of generated foreground pixels whose color is within
/// `threshold` of the condition pixel nearest in canonical space.
pub fn alignment_score(rgb: &Image, pointmap: &Image, views: &ViewSet, threshold: f64) -> Result<f64> {
    let field = canonical_color_field(views);
    alignment_against(rgb, pointmap, &field, threshold)
}

pub fn alignment_against(rgb: &Image, pointmap: &Image, field: &[([f64; 3], [f32; 3])], threshold: f64) -> Result<f64> {
    let fg = pointmap_to_coords(pointmap);
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if field.is_empty() {
        return Err(Error::InvalidArgument("condition views have no foreground".into()));
    }
    let mut hits = 0usize;
    for (i, c) in &fg {
        let mut best = (f64::INFINITY, [0.0f32; 3]);
        for (q, color) in field {
            let d = (c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2) + (c[2] - q[2]).powi(2);
            if d < best.0 {
                best = (d, *color);
            }
        }
        if color_distance(rgb.at(*i), best.1) < threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / fg.len() as f64)
}

/// Mean squared error over the pixels where `mask` is set (all channels).
pub fn masked_mse(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..a.num_pixels() {
        if mask[i] {
            let (p, q) = (a.at(i), b.at(i));
            sum += (0..3).map(|c| ((p[c] - q[c]) as f64).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Correlation patch side for [`correspondence_count`].
pub const PATCH: usize = 7;

fn gray(img: &Image) -> Vec<f64> {
    (0..img.num_pixels())
        .map(|i| {
            let p = img.at(i);
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        })
        .collect()
}

/// Zero-mean, unit-norm patch centered at `(x, y)`; `None` when flat.
fn patch(g: &[f64], w: usize, x: usize, y: usize) -> Option<Vec<f64>> {
    let r = PATCH / 2;
    let mut v = Vec::with_capacity(PATCH * PATCH);
    for yy in y - r..=y + r {
        v.extend_from_slice(&g[yy * w + x - r..=yy * w + x + r]);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= mean);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    v.iter_mut().for_each(|a| *a /= norm);
    Some(v)
}

fn centers(w: usize, h: usize) -> Vec<(usize, usize)> {
    let r = PATCH / 2;
    if w < PATCH || h < PATCH {
        return vec![];
    }
    (r..h - r).flat_map(|y| (r..w - r).map(move |x| (x, y))).collect()
}

/// The `k` patch centers with the largest gradient magnitude (ties broken by
/// raster order).
pub fn gradient_probes(img: &Image, k: usize) -> Vec<(usize, usize)> {
    let g = gray(img);
    let w = img.width;
    let mut scored: Vec<((usize, usize), f64)> = centers(img.width, img.height)
        .into_iter()
        .map(|(x, y)| {
            let gx = g[y * w + x + 1] - g[y * w + x - 1];
            let gy = g[(y + 1) * w + x] - g[(y - 1) * w + x];
            ((x, y), gx * gx + gy * gy)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then((a.0 .1, a.0 .0).cmp(&(b.0 .1, b.0 .0))));
    scored.into_iter().take(k).map(|(p, _)| p).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchMatch {
    pub probe: (usize, usize),
    pub best: (usize, usize),
    pub ncc: f64,
}

/// Exhaustive normalized cross-correlation search for every probe.
pub fn best_matches(query: &Image, target: &Image, probes: &[(usize, usize)]) -> Vec<PatchMatch> {
    let (gq, gt) = (gray(query), gray(target));
    let cands: Vec<((usize, usize), Vec<f64>)> = centers(target.width, target.height)
        .into_iter()
        .filter_map(|(x, y)| patch(&gt, target.width, x, y).map(|p| ((x, y), p)))
        .collect();
    probes
        .iter()
        .map(|&(x, y)| {
            let mut best = PatchMatch {
                probe: (x, y),
                best: (x, y),
                ncc: -1.0,
            };
            if let Some(p) = patch(&gq, query.width, x, y) {
                for (pos, c) in &cands {
                    let ncc: f64 = p.iter().zip(c).map(|(a, b)| a * b).sum();
                    if ncc > best.ncc {
                        best.ncc = ncc;
                        best.best = *pos;
                    }
                }
            }
            best
        })
        .collect()
}

/// Number of the `k` highest-gradient patches of `generated` whose best
/// correlation against `condition` exceeds `threshold`.
pub fn correspondence_count(generated: &Image, condition: &Image, k: usize, threshold: f64) -> usize {
    let probes = gradient_probes(generated, k);
    best_matches(generated, condition, &probes).iter().filter(|m| m.ncc > threshold).count()
}
