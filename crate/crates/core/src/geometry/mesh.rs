use super::Vec3;
use crate::error::{Error, Result};

/// Triangle mesh with per-vertex colors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// RGB in `[0, 1]`, one per vertex.
    pub colors: Vec<[f32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, colors: Vec<[f32; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            colors,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.vertices.len() {
            return Err(Error::InvalidArgument(format!(
                "{} colors for {} vertices",
                self.colors.len(),
                self.vertices.len()
            )));
        }
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    /// Append another mesh, re-basing its indices.
    pub fn merge(&mut self, other: &Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.colors.extend_from_slice(&other.colors);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

/// Uniform scale followed by translation: `p -> scale * p + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub offset: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.offset
    }
}

/// Center the tight bounding box at the origin and scale its largest
/// extent to exactly 1, so every vertex lies in `[-0.5, 0.5]^3`.
pub fn normalize_mesh(mesh: &Mesh) -> Result<(Mesh, Affine)> {
    mesh.validate()?;
    if !mesh.triangles.iter().any(|t| mesh.triangle_area(t) > 0.0) {
        return Err(Error::DegenerateMesh("no triangle with nonzero area".into()));
    }
    let (lo, hi) = mesh.bounds().expect("mesh with a triangle has vertices");
    let extent = (hi - lo).max();
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::DegenerateMesh(format!("extent {extent}")));
    }
    let center = (lo + hi) * 0.5;
    let scale = 1.0 / extent;
    let transform = Affine {
        scale,
        offset: -center * scale,
    };
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| ((v - center) * scale).map(|c| c.clamp(-0.5, 0.5)))
        .collect();
    Ok((
        Mesh {
            vertices,
            triangles: mesh.triangles.clone(),
            colors: mesh.colors.clone(),
        },
        transform,
    ))
}
