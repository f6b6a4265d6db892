//! Euler integration of the learned flow with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_coord, Image};
use crate::model::{unpatchify, Model, ModelInput, ViewPatches};
use crate::numerics::{Tape, Tensor};
use crate::training::gaussian_like;

/// Conditions the guided (conditional) pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditions {
    Both,
    Text,
    Reference,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub conditions: Conditions,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 3.0,
            seed: 0,
            conditions: Conditions::Both,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Extents of the images a velocity field works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldShape {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub views: usize,
    pub pointmap: bool,
}

impl FieldShape {
    pub fn tokens(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Anything that predicts target velocities from a model input.
pub trait VelocityField {
    fn shape(&self) -> FieldShape;
    fn velocity(&self, input: &ModelInput<'_>) -> Result<(Tensor, Option<Tensor>)>;
}

impl VelocityField for Model {
    fn shape(&self) -> FieldShape {
        FieldShape {
            width: self.cfg.image_size,
            height: self.cfg.image_size,
            patch: self.cfg.patch,
            views: self.cfg.views,
            pointmap: self.cfg.pointmap,
        }
    }

    fn velocity(&self, input: &ModelInput<'_>) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let out = self.forward(&mut tape, &bound, input)?;
        let rgb = tape.value(out.rgb).clone();
        let pm = out.pointmap.map(|v| tape.value(v).clone());
        if !rgb.all_finite() || pm.as_ref().is_some_and(|p| !p.all_finite()) {
            return Err(Error::NonFinite { op: "velocity" });
        }
        Ok((rgb, pm))
    }
}

/// Generated pair, clamped to `[0, 1]`, plus the raw patch-space result.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub rgb: Image,
    pub pointmap: Option<Image>,
    pub rgb_patches: Tensor,
    pub pm_patches: Option<Tensor>,
}

fn axpy(x: &mut Tensor, a: f32, v: &Tensor) {
    x.data_mut().iter_mut().zip(v.data()).for_each(|(x, v)| *x += a * v);
}

fn guide(u: Tensor, c: Tensor, s: f32) -> Tensor {
    let mut out = u;
    out.data_mut().iter_mut().zip(c.data()).for_each(|(u, c)| *u += s * (c - *u));
    out
}

/// Integrate from `t = 1` (Gaussian noise in both domains) to `t = 0` in
/// `cfg.steps` uniform Euler steps with guided velocity
/// `v_u + s (v_c - v_u)`. The unconditional pass drops text and views; a
/// scale of 0 or 1 evaluates only the pass it selects.
pub fn euler_sample(
    field: &impl VelocityField,
    views: &[ViewPatches],
    caption: u32,
    cfg: &SampleConfig,
) -> Result<Generated> {
    cfg.validate()?;
    let shape = field.shape();
    if views.len() != shape.views {
        return Err(Error::ViewCount {
            expected: shape.views,
            found: views.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = [shape.tokens(), shape.patch_dim()];
    let mut x_rgb = gaussian_like(&mut rng, &dims);
    let mut x_pm = shape.pointmap.then(|| gaussian_like(&mut rng, &dims));
    let use_text = matches!(cfg.conditions, Conditions::Both | Conditions::Text);
    let use_ref = matches!(cfg.conditions, Conditions::Both | Conditions::Reference);
    let s = cfg.cfg_scale as f32;
    let n = cfg.steps;
    for k in 0..n {
        let t = 1.0 - k as f32 / n as f32;
        let t_next = 1.0 - (k + 1) as f32 / n as f32;
        let pass = |cond: bool| -> Result<(Tensor, Option<Tensor>)> {
            field.velocity(&ModelInput {
                target_rgb: &x_rgb,
                target_pm: x_pm.as_ref(),
                views: (cond && use_ref).then_some(views),
                caption: (cond && use_text).then_some(caption),
                t,
            })
        };
        let (v_rgb, v_pm) = if s == 0.0 {
            pass(false)?
        } else if s == 1.0 {
            pass(true)?
        } else {
            let (u_rgb, u_pm) = pass(false)?;
            let (c_rgb, c_pm) = pass(true)?;
            (guide(u_rgb, c_rgb, s), u_pm.zip(c_pm).map(|(u, c)| guide(u, c, s)))
        };
        let dt = t_next - t;
        axpy(&mut x_rgb, dt, &v_rgb);
        if let (Some(x), Some(v)) = (x_pm.as_mut(), v_pm.as_ref()) {
            axpy(x, dt, v);
        }
    }
    let to_image = |t: &Tensor| -> Result<Image> {
        let mut img = unpatchify(t, shape.width, shape.height, shape.patch)?;
        img.clamp01();
        Ok(img)
    };
    Ok(Generated {
        rgb: to_image(&x_rgb)?,
        pointmap: x_pm.as_ref().map(to_image).transpose()?,
        rgb_patches: x_rgb,
        pm_patches: x_pm,
    })
}

/// A pixel is foreground only when every channel reaches this value, half
/// the smallest stored foreground channel. Residual noise in generated maps
/// rarely lifts all three background channels at once.
pub const BACKGROUND_CUTOFF: f32 = 0.025;

/// Foreground pixels of a point map with their canonical coordinates.
pub fn pointmap_to_coords(pointmap: &Image) -> Vec<(usize, [f64; 3])> {
    (0..pointmap.num_pixels())
        .filter_map(|i| {
            let v = pointmap.at(i);
            if v.iter().any(|c| *c < BACKGROUND_CUTOFF) {
                None
            } else {
                Some((i, v.map(decode_coord)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::encode_coord;

    #[test]
    fn storage_mapping_inverts() {
        let mut img = Image::filled(3, 1, 0.0);
        img.set_pixel(0, 0, [0.5, 0.5, 0.5]);
        img.set_pixel(2, 0, [encode_coord(-0.5), encode_coord(0.25), encode_coord(0.1)]);
        // One channel above the cutoff is not enough.
        img.set_pixel(1, 0, [0.07, 0.0, 0.0]);
        let c = pointmap_to_coords(&img);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].0, c[1].0), (0, 2));
        for (got, want) in c[0].1.iter().chain(&c[1].1).zip([0.0, 0.0, 0.0, -0.5, 0.25, 0.1]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SampleConfig { steps: 0, ..SampleConfig::default() }.validate().is_err());
        assert!(SampleConfig { cfg_scale: -1.0, ..SampleConfig::default() }.validate().is_err());
    }
}
