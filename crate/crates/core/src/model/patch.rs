use crate::error::{Error, Result};
use crate::geometry::{Image, ViewSet};
use crate::numerics::Tensor;

/// Split an image into `p x p` patches, one row per patch in raster order,
/// values mapped from `[0, 1]` to `[-1, 1]`. Row layout is `(dy, dx, channel)`.
pub fn patchify(img: &Image, p: usize) -> Result<Tensor> {
    let (w, h) = (img.width, img.height);
    if p == 0 || w % p != 0 || h % p != 0 {
        return Err(Error::shape("patchify", format!("{w}x{h} image with patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(w * h * 3);
    for gi in 0..gh {
        for gj in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let px = img.pixel(gj * p + dx, gi * p + dy);
                    data.extend(px.iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
    }
    Tensor::new([gh * gw, p * p * 3], data)
}

/// Inverse of [`patchify`] (no clamping).
pub fn unpatchify(t: &Tensor, width: usize, height: usize, p: usize) -> Result<Image> {
    if p == 0 || width % p != 0 || height % p != 0 || t.shape() != [(width / p) * (height / p), p * p * 3] {
        return Err(Error::shape("unpatchify", format!("{:?} into {width}x{height}, patch {p}", t.shape())));
    }
    let gw = width / p;
    let mut img = Image::filled(width, height, 0.0);
    for (k, row) in t.data().chunks_exact(p * p * 3).enumerate() {
        let (gi, gj) = (k / gw, k % gw);
        for dy in 0..p {
            for dx in 0..p {
                let o = (dy * p + dx) * 3;
                img.set_pixel(gj * p + dx, gi * p + dy, [0, 1, 2].map(|c| (row[o + c] + 1.0) * 0.5));
            }
        }
    }
    Ok(img)
}

/// Patch-space tensors of one condition view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPatches {
    pub rgb: Tensor,
    pub pointmap: Tensor,
}

pub fn viewset_patches(views: &ViewSet, p: usize) -> Result<Vec<ViewPatches>> {
    views
        .views
        .iter()
        .map(|v| {
            Ok(ViewPatches {
                rgb: patchify(&v.rgb, p)?,
                pointmap: patchify(&v.pointmap, p)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let img = Image::filled(32, 32, 0.25);
        let t = patchify(&img, 4).unwrap();
        assert_eq!(t.shape(), &[64, 48]);
        // constant image -> identical rows
        assert!(t.data().iter().all(|v| *v == -0.5));
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn unpatchify_inverts() {
        let img = Image::new(8, 4, (0..96).map(|i| i as f32 / 96.0).collect()).unwrap();
        let back = unpatchify(&patchify(&img, 2).unwrap(), 8, 4, 2).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
