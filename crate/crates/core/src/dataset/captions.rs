use serde::{Deserialize, Serialize};

/// Procedural background drawn behind the object in a target scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    /// Vertical blend from `top` to `bottom`.
    Gradient { top: [f32; 3], bottom: [f32; 3] },
    Checker { a: [f32; 3], b: [f32; 3], cell: usize },
    /// Hash noise around a base color; `salt` decorrelates styles.
    Noise { base: [f32; 3], amplitude: f32, salt: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTemplate {
    pub id: u32,
    pub style: u32,
    pub phrase: String,
}

const PHRASES: [(&str, Background); 16] = [
    ("an object against a clear blue sky", Background::Gradient { top: [0.35, 0.55, 0.95], bottom: [0.85, 0.9, 1.0] }),
    ("an object at sunset", Background::Gradient { top: [0.95, 0.55, 0.25], bottom: [0.4, 0.15, 0.35] }),
    ("an object in a foggy field", Background::Gradient { top: [0.8, 0.82, 0.8], bottom: [0.35, 0.5, 0.3] }),
    ("an object in a dark studio", Background::Gradient { top: [0.05, 0.05, 0.08], bottom: [0.25, 0.25, 0.3] }),
    ("an object on a black and white checkerboard floor", Background::Checker { a: [0.05; 3], b: [0.95; 3], cell: 4 }),
    ("an object on red and cream tiles", Background::Checker { a: [0.7, 0.1, 0.1], b: [0.95, 0.9, 0.75], cell: 4 }),
    ("an object on a green picnic blanket", Background::Checker { a: [0.1, 0.5, 0.2], b: [0.85, 0.95, 0.85], cell: 8 }),
    ("an object on blue bathroom tiles", Background::Checker { a: [0.2, 0.35, 0.7], b: [0.8, 0.85, 0.95], cell: 2 }),
    ("an object on a sandy beach", Background::Noise { base: [0.85, 0.75, 0.5], amplitude: 0.08, salt: 1 }),
    ("an object on grass", Background::Noise { base: [0.25, 0.55, 0.2], amplitude: 0.15, salt: 2 }),
    ("an object on a gravel road", Background::Noise { base: [0.5, 0.5, 0.48], amplitude: 0.25, salt: 3 }),
    ("an object in the snow", Background::Noise { base: [0.92, 0.94, 0.97], amplitude: 0.05, salt: 4 }),
    ("an object on a wooden table", Background::Gradient { top: [0.55, 0.35, 0.2], bottom: [0.35, 0.2, 0.1] }),
    ("an object under water", Background::Gradient { top: [0.1, 0.45, 0.6], bottom: [0.02, 0.12, 0.25] }),
    ("an object on a purple carpet", Background::Noise { base: [0.45, 0.2, 0.55], amplitude: 0.1, salt: 5 }),
    ("an object on a chessboard", Background::Checker { a: [0.45, 0.3, 0.15], b: [0.9, 0.8, 0.6], cell: 4 }),
];

/// Number of caption templates (and background styles).
pub const NUM_CAPTIONS: usize = PHRASES.len();

/// The fixed caption table; ids are dense from 0 and template `k` uses
/// background style `k`.
pub fn caption_table() -> Vec<CaptionTemplate> {
    PHRASES
        .iter()
        .enumerate()
        .map(|(i, (p, _))| CaptionTemplate {
            id: i as u32,
            style: i as u32,
            phrase: (*p).to_string(),
        })
        .collect()
}

pub fn background_style(style: u32) -> Option<Background> {
    PHRASES.get(style as usize).map(|(_, b)| *b)
}

fn hash2(x: u32, y: u32, salt: u32) -> u32 {
    let mut h = x.wrapping_mul(0x9E37_79B1) ^ y.wrapping_mul(0x85EB_CA77) ^ salt.wrapping_mul(0xC2B2_AE3D);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    h = h.wrapping_mul(0x297A_2D39);
    h ^ (h >> 15)
}

impl Background {
    /// Color of pixel `(x, y)` in a `height`-row image; depends on nothing else.
    pub fn color(&self, x: usize, y: usize, height: usize) -> [f32; 3] {
        match *self {
            Background::Gradient { top, bottom } => {
                let t = (y as f32 + 0.5) / height.max(1) as f32;
                [0, 1, 2].map(|c| top[c] + (bottom[c] - top[c]) * t)
            }
            Background::Checker { a, b, cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
            Background::Noise { base, amplitude, salt } => {
                let n = hash2(x as u32, y as u32, salt) as f32 / u32::MAX as f32 - 0.5;
                base.map(|c| (c + 2.0 * amplitude * n).clamp(0.0, 1.0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_ids_are_dense() {
        let t = caption_table();
        assert_eq!(t.len(), 16);
        for (i, c) in t.iter().enumerate() {
            assert_eq!(c.id as usize, i);
            assert!(background_style(c.style).is_some());
        }
        assert!(background_style(16).is_none());
    }
}
