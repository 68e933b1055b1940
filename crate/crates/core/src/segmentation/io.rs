//! Mask-set files: a JSON header next to an `ICEM` run-length sidecar.
//!
//! Sidecar layout (little-endian): magic `ICEM`, u32 version, u32 width,
//! u32 height, u32 mask count, then per mask: u32 mask id, u32 run count and
//! that many u32 run lengths alternating off/on, starting with off.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use super::{MaskOrigin, MaskSet, RegionMask};
use crate::error::{Error, Result};
use crate::image::Bitmap;

const MAGIC: &[u8; 4] = b"ICEM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    view_id: String,
    width: usize,
    height: usize,
    count: usize,
    masks: Vec<MaskEntry>,
    bitmaps: String,
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    mask_id: u32,
    area: usize,
    origin: MaskOrigin,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("rle")
}

pub fn write_mask_set(path: &Path, set: &MaskSet) -> Result<()> {
    let sidecar = sidecar_path(path);
    let header = Header {
        view_id: set.view_id.clone(),
        width: set.width,
        height: set.height,
        count: set.masks.len(),
        masks: set.masks.iter().map(|m| MaskEntry { mask_id: m.mask_id, area: m.area, origin: m.origin }).collect(),
        bitmaps: sidecar.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    };
    let mut bin = Vec::new();
    bin.extend_from_slice(MAGIC);
    for v in [VERSION, set.width as u32, set.height as u32, set.masks.len() as u32] {
        bin.extend_from_slice(&v.to_le_bytes());
    }
    for m in &set.masks {
        let runs = encode_runs(m.bitmap.bits());
        bin.extend_from_slice(&m.mask_id.to_le_bytes());
        bin.extend_from_slice(&(runs.len() as u32).to_le_bytes());
        for r in runs {
            bin.extend_from_slice(&r.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&sidecar, bin)?;
    std::fs::write(path, serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_mask_set(path: &Path) -> Result<MaskSet> {
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let header: Header = serde_json::from_slice(&std::fs::read(path)?)?;
    let sidecar = path.with_file_name(&header.bitmaps);
    let bin = std::fs::read(&sidecar)?;
    let mut cur = Reader { bytes: &bin, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated sidecar".into()))? != MAGIC {
        return Err(bad("sidecar magic mismatch".into()));
    }
    let mut next = || cur.u32().ok_or_else(|| bad("truncated sidecar".into()));
    let version = next()?;
    if version != VERSION {
        return Err(bad(format!("unsupported sidecar version {version}")));
    }
    let (w, h, count) = (next()? as usize, next()? as usize, next()? as usize);
    if (w, h, count) != (header.width, header.height, header.count) || count != header.masks.len() {
        return Err(bad("header and sidecar disagree".into()));
    }
    let mut masks = Vec::with_capacity(count);
    for entry in &header.masks {
        let id = next()?;
        if id != entry.mask_id {
            return Err(bad(format!("mask id {id} out of order")));
        }
        let n = next()? as usize;
        let runs = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let bits = decode_runs(&runs, w * h).ok_or_else(|| bad(format!("mask {id} runs do not fill the image")))?;
        let mask = RegionMask::new(id, Bitmap::from_bits(w, h, bits)?, entry.origin);
        if mask.area != entry.area {
            return Err(bad(format!("mask {id} area mismatch")));
        }
        masks.push(mask);
    }
    Ok(MaskSet::from_masks(header.view_id, w, h, masks))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn encode_runs(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut state = false;
    let mut len = 0u32;
    for &b in bits {
        if b != state {
            runs.push(len);
            state = b;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[u32], total: usize) -> Option<Vec<bool>> {
    let mut bits = Vec::with_capacity(total);
    for (i, &r) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    (bits.len() == total).then_some(bits)
}

/// Grayscale PNG whose pixel value is the owning mask id (16-bit when ids
/// exceed 255). Uncovered pixels get the maximum value.
pub fn label_map_png(set: &MaskSet) -> Result<Vec<u8>> {
    let labels = set.label_map();
    let (w, h) = (set.width as u32, set.height as u32);
    let mut out = Cursor::new(Vec::new());
    let wide = set.masks.iter().any(|m| m.mask_id > 255);
    let res = if wide {
        let buf: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(w, h, labels.iter().map(|&l| l.min(u16::MAX as u32) as u16).collect::<Vec<u16>>())
                .ok_or_else(|| Error::param("label map dimensions overflow"))?;
        buf.write_to(&mut out, ImageFormat::Png)
    } else {
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(w, h, labels.iter().map(|&l| l.min(255) as u8).collect::<Vec<u8>>())
                .ok_or_else(|| Error::param("label map dimensions overflow"))?;
        buf.write_to(&mut out, ImageFormat::Png)
    };
    res.map_err(|e| Error::Validation(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Decodes a label-map PNG into per-pixel labels.
pub(crate) fn decode_label_map(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::ImageRead { path: "<label map>".into(), msg: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.to_luma16().into_raw();
    let scale = if img.color().bits_per_pixel() / u16::from(img.color().channel_count()) <= 8 { 257 } else { 1 };
    Ok((w, h, labels.into_iter().map(|v| u32::from(v) / scale).collect()))
}
