use std::f64::consts::PI;

use nalgebra::Rotation3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{normalize_mesh, Mesh, Vec3};

/// A procedural 3D asset: the reference object every sample is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Asset {
    pub id: u64,
    pub seed: u64,
    /// Normalized into the canonical cube.
    pub mesh: Mesh,
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Box,
    Sphere,
    Cylinder,
    Cone,
}

fn push_quad(m: &mut Mesh, a: u32, b: u32, c: u32, d: u32) {
    m.triangles.push([a, b, c]);
    m.triangles.push([a, c, d]);
}

/// Unit-sized primitive centered at the origin with outward winding.
fn primitive_mesh(kind: Primitive) -> Mesh {
    let mut m = Mesh {
        vertices: vec![],
        triangles: vec![],
        colors: vec![],
    };
    const SEG: usize = 12;
    match kind {
        Primitive::Box => {
            let c = |i: usize| if i == 1 { 0.5 } else { -0.5 };
            for i in 0..8 {
                m.vertices.push(Vec3::new(c(i & 1), c((i >> 1) & 1), c((i >> 2) & 1)));
            }
            for [a, b, cc, d] in [
                [1, 3, 7, 5],
                [0, 4, 6, 2],
                [2, 6, 7, 3],
                [0, 1, 5, 4],
                [4, 5, 7, 6],
                [0, 2, 3, 1],
            ] {
                push_quad(&mut m, a, b, cc, d);
            }
        }
        Primitive::Sphere => {
            const RINGS: usize = 8;
            m.vertices.push(Vec3::new(0.0, 0.5, 0.0));
            for r in 1..RINGS {
                let th = PI * r as f64 / RINGS as f64;
                for s in 0..SEG {
                    let ph = 2.0 * PI * s as f64 / SEG as f64;
                    m.vertices.push(Vec3::new(th.sin() * ph.sin(), th.cos(), th.sin() * ph.cos()) * 0.5);
                }
            }
            m.vertices.push(Vec3::new(0.0, -0.5, 0.0));
            let ring = |r: usize, s: usize| (1 + (r - 1) * SEG + s % SEG) as u32;
            let bottom = m.vertices.len() as u32 - 1;
            for s in 0..SEG {
                m.triangles.push([0, ring(1, s), ring(1, s + 1)]);
                m.triangles.push([bottom, ring(RINGS - 1, s + 1), ring(RINGS - 1, s)]);
            }
            for r in 1..RINGS - 1 {
                for s in 0..SEG {
                    push_quad(&mut m, ring(r, s), ring(r + 1, s), ring(r + 1, s + 1), ring(r, s + 1));
                }
            }
        }
        Primitive::Cylinder | Primitive::Cone => {
            let top_r = if matches!(kind, Primitive::Cone) { 0.0 } else { 0.5 };
            for s in 0..SEG {
                let ph = 2.0 * PI * s as f64 / SEG as f64;
                m.vertices.push(Vec3::new(0.5 * ph.sin(), -0.5, 0.5 * ph.cos()));
                m.vertices.push(Vec3::new(top_r * ph.sin(), 0.5, top_r * ph.cos()));
            }
            let bc = m.vertices.len() as u32;
            m.vertices.push(Vec3::new(0.0, -0.5, 0.0));
            m.vertices.push(Vec3::new(0.0, 0.5, 0.0));
            let lo = |s: usize| (2 * (s % SEG)) as u32;
            let hi = |s: usize| (2 * (s % SEG) + 1) as u32;
            for s in 0..SEG {
                m.triangles.push([bc, lo(s + 1), lo(s)]);
                if top_r > 0.0 {
                    push_quad(&mut m, lo(s), lo(s + 1), hi(s + 1), hi(s));
                    m.triangles.push([bc + 1, hi(s), hi(s + 1)]);
                } else {
                    m.triangles.push([lo(s), lo(s + 1), hi(s)]);
                }
            }
        }
    }
    m.colors = vec![[0.0; 3]; m.vertices.len()];
    m
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // keep away from black so every surface stays visible under ambient light
    [0, 1, 2].map(|_| rng.random_range(0.15f32..1.0))
}

/// Build a composite asset of 2-5 colored primitives from `seed`,
/// normalized into the canonical cube.
pub fn gen_asset(seed: u64) -> Result<Asset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(2..=5usize);
    let mut mesh = Mesh {
        vertices: vec![],
        triangles: vec![],
        colors: vec![],
    };
    for _ in 0..count {
        let kind = match rng.random_range(0..4u32) {
            0 => Primitive::Box,
            1 => Primitive::Sphere,
            2 => Primitive::Cylinder,
            _ => Primitive::Cone,
        };
        let mut part = primitive_mesh(kind);
        let size = Vec3::new(rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::new(axis.try_normalize(1e-9).unwrap_or(Vec3::y()) * rng.random_range(0.0..PI));
        let offset = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        // two-tone pattern: blend along a random local direction
        let (ca, cb) = (random_color(&mut rng), random_color(&mut rng));
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .try_normalize(1e-9)
            .unwrap_or(Vec3::x());
        for (v, c) in part.vertices.iter_mut().zip(part.colors.iter_mut()) {
            let t = (v.dot(&dir) + 0.5).clamp(0.0, 1.0) as f32;
            *c = [0, 1, 2].map(|k| ca[k] + (cb[k] - ca[k]) * t);
            *v = rot * v.component_mul(&size) + offset;
        }
        mesh.merge(&part);
    }
    let (mesh, _) = normalize_mesh(&mesh)?;
    Ok(Asset { id: seed, seed, mesh })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_asset() {
        assert_eq!(gen_asset(0).unwrap(), gen_asset(0).unwrap());
        assert_ne!(gen_asset(0).unwrap().mesh, gen_asset(1).unwrap().mesh);
    }

    #[test]
    fn hundred_assets_in_canonical_cube() {
        for seed in 0..100 {
            let a = gen_asset(seed).unwrap();
            let (lo, hi) = a.mesh.bounds().unwrap();
            assert!(lo.iter().all(|v| *v >= -0.5) && hi.iter().all(|v| *v <= 0.5));
            assert!(((hi - lo).max() - 1.0).abs() < 1e-9);
            assert!(((hi + lo) * 0.5).norm() < 1e-9);
        }
    }

    #[test]
    fn assets_are_visually_distinct() {
        let means: Vec<[f64; 3]> = (0..100)
            .map(|s| {
                let m = gen_asset(s).unwrap().mesh;
                let n = m.colors.len() as f64;
                [0, 1, 2].map(|c| m.colors.iter().map(|v| v[c] as f64).sum::<f64>() / n)
            })
            .collect();
        let mut distinct = 0;
        let mut total = 0;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                total += 1;
                let d: f64 = (0..3).map(|c| (means[i][c] - means[j][c]).powi(2)).sum::<f64>().sqrt();
                if d > 0.0 {
                    distinct += 1;
                }
            }
        }
        assert!(distinct as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn primitives_are_outward_wound() {
        for kind in [Primitive::Box, Primitive::Sphere, Primitive::Cylinder, Primitive::Cone] {
            let m = primitive_mesh(kind);
            for t in &m.triangles {
                let [a, b, c] = t.map(|i| m.vertices[i as usize]);
                let n = (b - a).cross(&(c - a));
                let centroid = (a + b + c) / 3.0;
                assert!(n.dot(&centroid) > 0.0, "{kind:?} triangle {t:?} faces inward");
            }
        }
    }
}
