//! `ICEG` checkpoints.
//!
//! Layout (little-endian): magic `ICEG`, u32 version, u32 stage, u64 iteration,
//! u32 gaussian count, u32 field count, then per field a u16 name length, the
//! UTF-8 name and a u64 element count. The f32 blocks follow in table order and
//! a CRC32 of everything before it closes the file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::GaussianSet;

const MAGIC: &[u8; 4] = b"ICEG";
const VERSION: u32 = 1;
const BASE_FIELDS: [&str; 5] = ["position", "log_scale", "rotation", "opacity_logit", "color_logit"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStage {
    Base = 0,
    Texture = 1,
    Color = 2,
}

impl TrainingStage {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Self::Base),
            1 => Some(Self::Texture),
            2 => Some(Self::Color),
            _ => None,
        }
    }
}

impl fmt::Display for TrainingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Texture => "texture",
            Self::Color => "color",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub gaussians: GaussianSet,
    pub stage: TrainingStage,
    pub iter: u64,
    /// Additional named f32 blocks, e.g. optimizer moments.
    pub extra: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(gaussians: GaussianSet, stage: TrainingStage, iter: u64) -> Self {
        Self { gaussians, stage, iter, extra: Vec::new() }
    }

    pub fn extra(&self, name: &str) -> Option<&[f32]> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let g = &ckpt.gaussians;
    g.validate()?;
    let blocks: Vec<(&str, Vec<f32>)> = vec![
        ("position", g.positions.iter().flatten().copied().collect()),
        ("log_scale", g.log_scales.iter().flatten().copied().collect()),
        ("rotation", g.rotations.iter().flatten().copied().collect()),
        ("opacity_logit", g.opacity_logits.clone()),
        ("color_logit", g.color_logits.iter().flatten().copied().collect()),
    ];
    let extra = ckpt.extra.iter().map(|(n, v)| (n.as_str(), v.clone()));
    let blocks: Vec<(&str, Vec<f32>)> = blocks.into_iter().chain(extra).collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.stage as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.iter.to_le_bytes());
    out.extend_from_slice(&(g.len() as u32).to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, data) in &blocks {
        let len = u16::try_from(name.len()).map_err(|_| Error::param("checkpoint field name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    }
    for (_, data) in &blocks {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: &str| Error::Integrity(format!("checkpoint {msg}"));
    if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("magic bytes missing"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Cursor { bytes: body, pos: 4 };
    let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let stage = r.u32().and_then(TrainingStage::from_code).ok_or_else(|| corrupt("has an unknown stage"))?;
    let iter = r.u64().ok_or_else(|| corrupt("truncated"))?;
    let n = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
    let fields = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
    let mut table = Vec::with_capacity(fields.min(1024));
    for _ in 0..fields {
        let len = r.u16().ok_or_else(|| corrupt("truncated"))? as usize;
        let name = r.take(len).ok_or_else(|| corrupt("truncated"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("has a non-UTF-8 field name"))?;
        let count = r.u64().ok_or_else(|| corrupt("truncated"))? as usize;
        table.push((name, count));
    }
    let mut blocks = Vec::with_capacity(table.len());
    for (name, count) in table {
        let raw = r.take(count.checked_mul(4).ok_or_else(|| corrupt("field too large"))?).ok_or_else(|| corrupt("truncated"))?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        blocks.push((name, values));
    }
    if r.pos != body.len() {
        return Err(corrupt("has trailing data"));
    }
    if blocks.len() < BASE_FIELDS.len() || blocks.iter().zip(BASE_FIELDS).any(|((a, _), b)| a != b) {
        return Err(corrupt("field table is missing gaussian parameters"));
    }
    let widths = [3, 3, 4, 1, 3];
    for ((name, data), w) in blocks.iter().zip(widths) {
        if data.len() != n * w {
            return Err(Error::Integrity(format!("checkpoint field {name} has {} values for {n} gaussians", data.len())));
        }
    }
    let mut it = blocks.into_iter();
    let mut next = || it.next().unwrap().1;
    let positions = next().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let log_scales = next().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let rotations = next().chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let opacity_logits = next();
    let color_logits = next().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let gaussians = GaussianSet { positions, log_scales, rotations, opacity_logits, color_logits };
    gaussians.validate().map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(Checkpoint { gaussians, stage, iter, extra: it.collect() })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Writes atomically through a temporary file in the same directory.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, &bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Integrity(msg) => Error::Integrity(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// `checkpoints/{tag-}{stage}-{iter:06}.ckpt` under `root`.
pub fn checkpoint_path(root: &Path, tag: &str, stage: TrainingStage, iter: u64) -> PathBuf {
    let prefix = if tag.is_empty() { String::new() } else { format!("{tag}-") };
    root.join("checkpoints").join(format!("{prefix}{stage}-{iter:06}.ckpt"))
}

/// Saves under the project root and returns the written path.
pub fn save_checkpoint(root: &Path, tag: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let path = checkpoint_path(root, tag, ckpt.stage, ckpt.iter);
    write_checkpoint(&path, ckpt)?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(GaussianSet, TrainingStage, u64)> {
    let c = read_checkpoint(path)?;
    Ok((c.gaussians, c.stage, c.iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, seed: u64) -> GaussianSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = GaussianSet::new();
        for _ in 0..n {
            g.push(Gaussian {
                position: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                scale: [rng.random_range(0.01..0.2), rng.random_range(0.01..0.2), rng.random_range(0.01..0.2)],
                rotation: [rng.random(), rng.random(), rng.random(), rng.random::<f64>() + 0.1],
                opacity: rng.random(),
                color: [rng.random(), rng.random(), rng.random()],
            });
        }
        g
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(random_set(500, 1), TrainingStage::Texture, 1500);
        ck.extra.push(("adam_m".into(), vec![0.5, -0.25, f32::MIN_POSITIVE]));
        let path = save_checkpoint(dir.path(), "job", &ck).unwrap();
        assert!(path.ends_with("checkpoints/job-texture-001500.ckpt"));
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let (g, stage, iter) = load_checkpoint(&path).unwrap();
        assert_eq!((g, stage, iter), (ck.gaussians, TrainingStage::Texture, 1500));
    }

    #[test]
    fn truncation_and_bit_flips_are_integrity_errors() {
        let bytes = encode_checkpoint(&Checkpoint::new(random_set(10, 2), TrainingStage::Base, 0)).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 7]), Err(Error::Integrity(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Integrity(_))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Integrity(_))));
    }

    #[test]
    fn distinct_iterations_get_distinct_paths() {
        let dir = tempfile::tempdir().unwrap();
        let g = random_set(3, 3);
        let a = save_checkpoint(dir.path(), "", &Checkpoint::new(g.clone(), TrainingStage::Color, 500)).unwrap();
        let b = save_checkpoint(dir.path(), "", &Checkpoint::new(g, TrainingStage::Color, 1000)).unwrap();
        assert_ne!(a, b);
        assert_eq!(read_checkpoint(&a).unwrap().iter, 500);
        assert_eq!(read_checkpoint(&b).unwrap().iter, 1000);
    }
}
