use serde::{Deserialize, Serialize};

use super::camera::{sample_views, Camera, Pose};
use super::image::Image;
use super::mesh::Mesh;
use super::{Vec3, BACKGROUND, POINTMAP_HI, POINTMAP_LO};
use crate::error::Result;

const NEAR: f64 = 1e-3;
const AMBIENT: f64 = 0.3;
// Inclusive edge test, so pixel centers exactly on a shared edge are never dropped.
const EDGE_EPS: f64 = 1e-9;

/// Map a canonical coordinate in `[-0.5, 0.5]` to its stored point-map value.
pub fn encode_coord(c: f64) -> f32 {
    let c = c.clamp(-0.5, 0.5);
    (POINTMAP_LO as f64 + (POINTMAP_HI - POINTMAP_LO) as f64 * (c + 0.5)) as f32
}

/// Inverse of [`encode_coord`].
pub fn decode_coord(v: f32) -> f64 {
    (v as f64 - POINTMAP_LO as f64) / (POINTMAP_HI - POINTMAP_LO) as f64 - 0.5
}

/// Camera defaults for condition views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            fov_y_deg: 40.0,
            elevation_deg: 20.0,
            radius: 2.2,
        }
    }
}

impl RenderConfig {
    pub fn cameras(&self, n: usize) -> Result<Vec<Camera>> {
        sample_views(n, self.elevation_deg, self.radius, self.fov_y_deg, self.width, self.height)
    }
}

/// Pixel-aligned render of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Stored canonical coordinates; exactly [`BACKGROUND`] where `mask` is false.
    pub pointmap: Image,
    pub mask: Vec<bool>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Condition views of one asset.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<RenderOutput>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffered, perspective-correct rasterization of `mesh` placed in the
/// world by `pose` and seen through `camera`.
///
/// Covered pixels store the interpolated canonical coordinate of the
/// visible surface point and its vertex color under headlight shading
/// `max(0.3, n . view)`. Triangles are visited in index order and a pixel
/// keeps the first fragment at the nearest depth.
pub fn rasterize(mesh: &Mesh, camera: &Camera, pose: &Pose) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let to_cam = camera.extrinsic.compose(pose);
    let cam_pts: Vec<Vec3> = mesh.vertices.iter().map(|v| to_cam.apply(v)).collect();

    let mut depth = vec![f64::INFINITY; w * h];
    let mut rgb = Image::filled(w, h, 0.0);
    let mut pointmap = Image::filled(w, h, BACKGROUND);
    let mut mask = vec![false; w * h];

    for tri in &mesh.triangles {
        let idx = tri.map(|i| i as usize);
        let p = idx.map(|i| cam_pts[i]);
        if p.iter().any(|q| q.z < NEAR) {
            continue;
        }
        let s = p.map(|q| camera.project_camera_space(&q).expect("in front of camera"));
        let area = edge(s[0], s[1], s[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let Some(normal) = (p[1] - p[0]).cross(&(p[2] - p[0])).try_normalize(1e-15) else {
            continue;
        };

        let (umin, umax) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q.0), b.max(q.0)));
        let (vmin, vmax) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q.1), b.max(q.1)));
        let x0 = (umin - 0.5).ceil().max(0.0) as usize;
        let y0 = (vmin - 0.5).ceil().max(0.0) as usize;
        let x1 = (umax - 0.5).floor().min(w as f64 - 1.0);
        let y1 = (vmax - 0.5).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);

        for py in y0..=y1 {
            for px in x0..=x1 {
                let q = (px as f64 + 0.5, py as f64 + 0.5);
                let b = [
                    edge(s[1], s[2], q) / area,
                    edge(s[2], s[0], q) / area,
                    edge(s[0], s[1], q) / area,
                ];
                if b.iter().any(|v| *v < -EDGE_EPS) {
                    continue;
                }
                let inv_z = b[0] / p[0].z + b[1] / p[1].z + b[2] / p[2].z;
                let z = 1.0 / inv_z;
                let pix = py * w + px;
                if !(z < depth[pix]) {
                    continue;
                }
                depth[pix] = z;
                // perspective-correct weights
                let pc = [b[0] / p[0].z * z, b[1] / p[1].z * z, b[2] / p[2].z * z];
                let canon = mesh.vertices[idx[0]] * pc[0] + mesh.vertices[idx[1]] * pc[1] + mesh.vertices[idx[2]] * pc[2];
                let surface = p[0] * pc[0] + p[1] * pc[1] + p[2] * pc[2];
                let view = -surface.normalize();
                let shade = normal.dot(&view).clamp(AMBIENT, 1.0);
                let mut color = [0.0f32; 3];
                for (c, out) in color.iter_mut().enumerate() {
                    let v: f64 = (0..3).map(|k| pc[k] * mesh.colors[idx[k]][c] as f64).sum();
                    *out = (v * shade).clamp(0.0, 1.0) as f32;
                }
                rgb.set_pixel(px, py, color);
                pointmap.set_pixel(px, py, [encode_coord(canon.x), encode_coord(canon.y), encode_coord(canon.z)]);
                mask[pix] = true;
            }
        }
    }
    RenderOutput { rgb, pointmap, mask }
}

/// Render `n` ring views of a normalized mesh at identity object pose.
pub fn render_viewset(mesh: &Mesh, n: usize, cfg: &RenderConfig) -> Result<ViewSet> {
    let pose = Pose::identity();
    let views = cfg.cameras(n)?.iter().map(|c| rasterize(mesh, c, &pose)).collect();
    Ok(ViewSet { views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::tests::cuboid;
    use crate::geometry::normalize_mesh;

    const FACE_COLORS: [[f32; 3]; 6] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
    ];

    fn unit_cube() -> Mesh {
        cuboid(Vec3::repeat(-0.5), Vec3::repeat(0.5), FACE_COLORS)
    }

    fn front_camera(size: usize) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, 2.5), Vec3::zeros(), Vec3::y(), 40.0, size, size).unwrap()
    }

    #[test]
    fn coordinate_mapping_round_trip() {
        assert_eq!(encode_coord(-0.5), 0.05);
        assert_eq!(encode_coord(0.5), 0.95);
        assert!((encode_coord(0.0) - 0.5).abs() < 1e-7);
        for i in 0..=100 {
            let c = -0.5 + i as f64 / 100.0;
            assert!((decode_coord(encode_coord(c)) - c).abs() < 1e-6);
        }
    }

    #[test]
    fn background_is_exact_zero() {
        let out = rasterize(&unit_cube(), &front_camera(32), &Pose::identity());
        assert!(!out.mask[0]);
        assert_eq!(out.pointmap.pixel(0, 0), [0.0; 3]);
        for (i, m) in out.mask.iter().enumerate() {
            let pm = out.pointmap.at(i);
            if *m {
                assert!(pm.iter().all(|v| (POINTMAP_LO..=POINTMAP_HI).contains(v)));
            } else {
                assert_eq!(pm, [0.0; 3]);
                assert_eq!(out.rgb.at(i), [0.0; 3]);
            }
        }
    }

    #[test]
    fn off_screen_object_gives_empty_mask() {
        let pose = Pose::new(nalgebra::Rotation3::identity(), Vec3::new(50.0, 0.0, 0.0));
        let out = rasterize(&unit_cube(), &front_camera(16), &pose);
        assert_eq!(out.coverage(), 0);
        let behind = Pose::new(nalgebra::Rotation3::identity(), Vec3::new(0.0, 0.0, 10.0));
        assert_eq!(rasterize(&unit_cube(), &front_camera(16), &behind).coverage(), 0);
    }

    #[test]
    fn nearer_triangle_wins() {
        // Far red triangle drawn first, near blue second, then the reverse order.
        let tri = |z: f64| vec![Vec3::new(-0.5, -0.5, z), Vec3::new(0.5, -0.5, z), Vec3::new(0.0, 0.5, z)];
        for near_first in [false, true] {
            let (mut v, mut c) = (vec![], vec![]);
            let order = if near_first { [0.2, -0.2] } else { [-0.2, 0.2] };
            for z in order {
                v.extend(tri(z));
                let col = if z > 0.0 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
                c.extend([col; 3]);
            }
            let mesh = Mesh::new(v, vec![[0, 1, 2], [3, 4, 5]], c).unwrap();
            let out = rasterize(&mesh, &front_camera(32), &Pose::identity());
            let center = out.rgb.pixel(16, 16);
            assert!(center[2] > 0.0 && center[0] == 0.0, "near (blue) triangle must win: {center:?}");
            let z = decode_coord(out.pointmap.pixel(16, 16)[2]);
            assert!((z - 0.2).abs() < 1e-5);
        }
    }

    #[test]
    fn front_face_color_and_shading() {
        let out = rasterize(&unit_cube(), &front_camera(32), &Pose::identity());
        // +z face is cyan; seen head-on the headlight factor is close to 1
        let c = out.rgb.pixel(16, 16);
        assert_eq!(c[0], 0.0);
        assert!(c[1] > 0.95 && c[2] > 0.95);
    }

    #[test]
    fn viewset_is_deterministic_and_covered() {
        let (mesh, _) = normalize_mesh(&unit_cube()).unwrap();
        let cfg = RenderConfig::default();
        let a = render_viewset(&mesh, 8, &cfg).unwrap();
        let b = render_viewset(&mesh, 8, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.views.iter().all(|v| v.coverage() > 0));
    }
}
