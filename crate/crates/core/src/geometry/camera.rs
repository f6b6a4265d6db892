use nalgebra::{Matrix3, Rotation3};

use super::Vec3;
use crate::error::{Error, Result};

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Build from a raw matrix, which must be orthonormal with det +1
    /// (tolerance 1e-6).
    pub fn from_matrix(m: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "not a rotation: |R^T R - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(m),
            translation,
        })
    }

    /// Yaw about +y, then pitch about +x, then roll about +z (degrees).
    pub fn from_angles(yaw_deg: f64, pitch_deg: f64, roll_deg: f64, translation: Vec3) -> Self {
        let ry = Rotation3::from_axis_angle(&Vec3::y_axis(), yaw_deg.to_radians());
        let rx = Rotation3::from_axis_angle(&Vec3::x_axis(), pitch_deg.to_radians());
        let rz = Rotation3::from_axis_angle(&Vec3::z_axis(), roll_deg.to_radians());
        Self {
            rotation: rz * rx * ry,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    /// The 12 pose numbers, rotation row-major then translation.
    pub fn to_array(&self) -> [f64; 12] {
        let m = self.rotation.matrix();
        let t = self.translation;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        let m = Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Self::from_matrix(m, Vec3::new(a[9], a[10], a[11]))
    }
}

/// Pinhole camera. The extrinsic maps world points into camera space with
/// +x right, +y down and +z forward; pixel `(col, row)` covers
/// `[col, col + 1) x [row, row + 1)` in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: Pose,
}

impl Camera {
    pub fn new(focal: f64, width: usize, height: usize, extrinsic: Pose) -> Result<Self> {
        if !(focal > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "camera focal {focal}, extents {height}x{width}"
            )));
        }
        Ok(Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            extrinsic,
        })
    }

    /// Camera at `eye` looking at `target` with a vertical field of view.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("camera eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("camera up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = Rotation3::from_matrix_unchecked(r);
        let extrinsic = Pose::new(rotation, -(rotation * eye));
        let focal = (height as f64 / 2.0) / (fov_y_deg.to_radians() / 2.0).tan();
        Self::new(focal, width, height, extrinsic)
    }

    pub fn position(&self) -> Vec3 {
        self.extrinsic.inverse().translation
    }

    /// Unit viewing direction in world space.
    pub fn forward(&self) -> Vec3 {
        self.extrinsic.rotation.inverse() * Vec3::z()
    }

    /// Project a camera-space point to image coordinates; `None` behind the camera.
    pub fn project_camera_space(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.focal * p.x / p.z + self.cx, self.focal * p.y / p.z + self.cy))
    }

    pub fn project(&self, world: &Vec3) -> Option<(f64, f64)> {
        self.project_camera_space(&self.extrinsic.apply(world))
    }

    /// Camera-space direction (z = 1) through an image point.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0)
    }
}

/// `n` cameras on a ring around the origin at azimuths `360 k / n` degrees,
/// all at the same elevation and distance, looking at the origin.
pub fn sample_views(
    n: usize,
    elevation_deg: f64,
    radius: f64,
    fov_y_deg: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::InvalidArgument("view count must be at least 1".into()));
    }
    let el = elevation_deg.to_radians();
    (0..n)
        .map(|k| {
            let az = (360.0 * k as f64 / n as f64).to_radians();
            let eye = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
            Camera::look_at(eye, Vec3::zeros(), Vec3::y(), fov_y_deg, width, height)
        })
        .collect()
}
