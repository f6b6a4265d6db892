//! Wavefront OBJ restricted to `v` and `f` records, with optional vertex
//! colors as the common `v x y z r g b` extension.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mesh::Mesh;
use super::Vec3;
use crate::error::{Error, Result};

const DEFAULT_COLOR: [f32; 3] = [0.8, 0.8, 0.8];

pub fn parse(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        detail: format!("line {}: {detail}", line + 1),
    };
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|s| s.parse::<f64>().map_err(|e| err(ln, format!("{s}: {e}"))))
                    .collect::<Result<_>>()?;
                match nums.len() {
                    3 => colors.push(DEFAULT_COLOR),
                    6 => colors.push([nums[3] as f32, nums[4] as f32, nums[5] as f32]),
                    n => return Err(err(ln, format!("vertex with {n} values"))),
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or(s);
                        let i: i64 = head.parse().map_err(|e| err(ln, format!("{s}: {e}")))?;
                        // negative indices count back from the latest vertex
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        u32::try_from(resolved).map_err(|_| err(ln, format!("face index {i}")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(ln, "face with fewer than 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles, colors)
}

pub fn read(path: &Path) -> Result<Mesh> {
    parse(&fs::read_to_string(path)?, path)
}

pub fn to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
        let _ = writeln!(s, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn write(path: &Path, mesh: &Mesh) -> Result<()> {
    fs::write(path, to_string(mesh))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_colors_quads_and_slashes() {
        let text = "# quad\nv 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 1 1 0\nv 0 1 0 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1 -1\n";
        let m = parse(text, Path::new("q.obj")).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.colors[2], DEFAULT_COLOR);
        assert_eq!(m.colors[3], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn write_then_parse_is_lossless() {
        let m = Mesh::new(
            vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.0 / 3.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 1e-9)],
            vec![[0, 1, 2]],
            vec![[0.25, 0.5, 0.75]; 3],
        )
        .unwrap();
        assert_eq!(parse(&to_string(&m), Path::new("m.obj")).unwrap(), m);
    }

    #[test]
    fn bad_records_are_errors() {
        assert!(parse("v 0 0\n", Path::new("x")).is_err());
        assert!(parse("v 0 0 0\nf 1 2 3\n", Path::new("x")).is_err());
    }
}
