//! On-disk dataset layout.
//!
//! `manifest.toml` holds the header (version, extents, view count, sample
//! count, record size, render settings, caption table). `samples.bin` is a
//! sequence of fixed-stride little-endian blocks, one per sample:
//!
//! ```text
//! asset_id u64 | caption_id u32 | pose 12 x f64 (row-major R, then t)
//! iou f32 | distance f32
//! per condition view: rgb h*w*3 f32 | pointmap h*w*3 f32 | mask h*w u8
//! target rgb h*w*3 f32 | target pointmap h*w*3 f32 | target mask h*w u8
//! crc32 u32 over every preceding byte of the block
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::captions::{caption_table, CaptionTemplate};
use super::filter::FilterMetrics;
use super::TrainingSample;
use crate::error::{Error, Result};
use crate::geometry::{Image, Pose, RenderConfig, RenderOutput, ViewSet};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SAMPLES_FILE: &str = "samples.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub views: usize,
    pub count: usize,
    pub record_bytes: usize,
    pub render: RenderConfig,
    pub captions: Vec<CaptionTemplate>,
}

impl Manifest {
    pub fn record_bytes(height: usize, width: usize, views: usize) -> usize {
        let hw = height * width;
        8 + 4 + 12 * 8 + 8 + (views + 1) * (hw * 24 + hw) + 4
    }
}

fn put_image(buf: &mut Vec<u8>, img: &Image) {
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_mask(buf: &mut Vec<u8>, mask: &[bool]) {
    buf.extend(mask.iter().map(|m| *m as u8));
}

fn encode_sample(s: &TrainingSample) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&s.asset_id.to_le_bytes());
    buf.extend_from_slice(&s.caption_id.to_le_bytes());
    for v in s.pose.to_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&s.metrics.iou.to_le_bytes());
    buf.extend_from_slice(&s.metrics.distance.to_le_bytes());
    for v in &s.views.views {
        put_image(&mut buf, &v.rgb);
        put_image(&mut buf, &v.pointmap);
        put_mask(&mut buf, &v.mask);
    }
    put_image(&mut buf, &s.target_rgb);
    put_image(&mut buf, &s.target_pointmap);
    put_mask(&mut buf, &s.target_mask);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().expect("slice length");
        self.pos += N;
        out
    }

    fn image(&mut self, w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|_| f32::from_le_bytes(self.take())).collect();
        Image::new(w, h, data).expect("extent")
    }

    fn mask(&mut self, n: usize) -> Vec<bool> {
        let out = self.buf[self.pos..self.pos + n].iter().map(|b| *b != 0).collect();
        self.pos += n;
        out
    }
}

fn decode_sample(block: &[u8], m: &Manifest, index: usize, path: &Path) -> Result<TrainingSample> {
    let (body, tail) = block.split_at(block.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum { index });
    }
    let (w, h) = (m.width, m.height);
    let mut r = Reader { buf: body, pos: 0 };
    let asset_id = u64::from_le_bytes(r.take());
    let caption_id = u32::from_le_bytes(r.take());
    let mut pose = [0.0; 12];
    for p in &mut pose {
        *p = f64::from_le_bytes(r.take());
    }
    let pose = Pose::from_array(&pose).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("sample {index}: {e}"),
    })?;
    let metrics = FilterMetrics {
        iou: f32::from_le_bytes(r.take()),
        distance: f32::from_le_bytes(r.take()),
    };
    let mut views = Vec::with_capacity(m.views);
    for _ in 0..m.views {
        let rgb = r.image(w, h);
        let pointmap = r.image(w, h);
        let mask = r.mask(w * h);
        views.push(RenderOutput { rgb, pointmap, mask });
    }
    let target_rgb = r.image(w, h);
    let target_pointmap = r.image(w, h);
    let target_mask = r.mask(w * h);
    Ok(TrainingSample {
        asset_id,
        views: ViewSet { views },
        target_rgb,
        target_pointmap,
        target_mask,
        pose,
        caption_id,
        metrics,
    })
}

/// Write `samples` under `dir` (created if missing). All samples must share
/// the extents and view count of the first one.
pub fn write_dataset(dir: &Path, samples: &[TrainingSample], render: &RenderConfig) -> Result<Manifest> {
    let (width, height, views) = match samples.first() {
        Some(s) => (s.target_rgb.width, s.target_rgb.height, s.views.len()),
        None => (render.width, render.height, 0),
    };
    let record_bytes = Manifest::record_bytes(height, width, views);
    let mut bin = Vec::with_capacity(record_bytes * samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.views.len() != views || s.target_rgb.width != width || s.target_rgb.height != height {
            return Err(Error::InvalidArgument(format!("sample {i} does not match the extents of sample 0")));
        }
        bin.extend_from_slice(&encode_sample(s));
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        height,
        width,
        views,
        count: samples.len(),
        record_bytes,
        render: *render,
        captions: caption_table(),
    };
    fs::create_dir_all(dir)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(SAMPLES_FILE), bin)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let format_err = |detail: String| Error::Format { path: path.clone(), detail };
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| format_err(e.to_string()))?;
    let version = table
        .get("version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| format_err("missing version".into()))?;
    if version != FORMAT_VERSION as i64 {
        return Err(Error::Version {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let m: Manifest = toml::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    if m.record_bytes != Manifest::record_bytes(m.height, m.width, m.views) {
        return Err(format_err(format!("record_bytes {} inconsistent with extents", m.record_bytes)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<TrainingSample>)> {
    let m = read_manifest(dir)?;
    let path = dir.join(SAMPLES_FILE);
    let bin = fs::read(&path)?;
    let want = m.count * m.record_bytes;
    if bin.len() != want {
        return Err(Error::Truncated {
            path,
            detail: format!("expected {want} bytes for {} samples, found {}", m.count, bin.len()),
        });
    }
    let samples = bin
        .chunks_exact(m.record_bytes.max(1))
        .take(m.count)
        .enumerate()
        .map(|(i, block)| decode_sample(block, &m, i, &path))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}
