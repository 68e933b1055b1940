//! Dense per-cell image features and region matching in feature space.

mod descriptor;
mod external;
mod matching;

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub use descriptor::PatchDescriptor;
pub use external::CommandFeatureProvider;
pub use matching::{
    describe_region, match_regions, region_distance, MatchAssignment, MatchEntry, Normalization, RegionDescriptor,
};

/// Feature grid of `rows × cols` cells with `channels` values each. Cell
/// `(r, c)` covers image pixels `[r·stride, (r+1)·stride) × [c·stride, (c+1)·stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub stride: usize,
    pub data: Vec<f64>,
    pub source_view: String,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, channels: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || stride == 0 {
            return Err(Error::param("feature maps need at least one channel and a positive stride"));
        }
        if data.len() != rows * cols * channels {
            return Err(Error::param(format!(
                "feature buffer has {} values, expected {rows}x{cols}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature map contains non-finite values".into()));
        }
        Ok(Self { rows, cols, channels, stride, data, source_view: String::new() })
    }

    pub fn with_source(mut self, view: impl Into<String>) -> Self {
        self.source_view = view.into();
        self
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    /// Whether the grid covers an image of this size.
    pub fn covers(&self, width: usize, height: usize) -> bool {
        self.cols * self.stride >= width && self.rows * self.stride >= height
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { data: self.data.iter().map(|v| v * factor).collect(), ..self.clone() }
    }
}

/// Source of dense features for matching and for the NNFM loss.
pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;
    fn channels(&self) -> usize;
    fn extract(&self, image: &Image<f64>) -> Result<FeatureMap>;

    /// Providers that can back-propagate through `extract` return themselves here.
    fn differentiable(&self) -> Option<&dyn DifferentiableFeatures> {
        None
    }
}

pub trait DifferentiableFeatures: Send + Sync {
    /// Vector-Jacobian product: `∂L/∂image` given `∂L/∂features` laid out like [`FeatureMap::data`].
    fn backward(&self, image: &Image<f64>, grad_features: &[f64]) -> Result<Image<f64>>;
}

/// Validates provider output against the image it was computed from.
pub fn extract_features(image: &Image<f64>, provider: &dyn FeatureProvider) -> Result<FeatureMap> {
    if image.pixel_count() == 0 {
        return Err(Error::param("cannot extract features from an empty image"));
    }
    let map = provider.extract(image).map_err(|e| match e {
        Error::Backend { .. } => e,
        other => Error::backend(provider.name(), other.to_string()),
    })?;
    if !map.covers(image.width(), image.height()) || map.channels != provider.channels() {
        return Err(Error::backend(
            provider.name(),
            format!("feature grid {}x{}x{} (stride {}) does not cover the image", map.rows, map.cols, map.channels, map.stride),
        ));
    }
    Ok(map)
}

const ICEF_MAGIC: &[u8; 4] = b"ICEF";
const ICEF_VERSION: u32 = 1;

/// Writes the `ICEF` precomputed-feature format: magic, version, rows, cols,
/// channels, stride (all u32 LE), then row-major f32 LE values.
pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + map.data.len() * 4);
    buf.extend_from_slice(ICEF_MAGIC);
    for v in [ICEF_VERSION, map.rows as u32, map.cols as u32, map.channels as u32, map.stride as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &map.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.into() };
    if bytes.len() < 24 || &bytes[..4] != ICEF_MAGIC {
        return Err(bad("not an ICEF feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap()) as usize;
    if word(0) != ICEF_VERSION as usize {
        return Err(bad("unsupported ICEF version"));
    }
    let (rows, cols, channels, stride) = (word(1), word(2), word(3), word(4));
    let expect = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(channels))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| bad("header overflow"))?;
    if bytes.len() - 24 != expect {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[24..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
    FeatureMap::new(rows, cols, channels, stride, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icef_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| f64::from(i as f32 * 0.25 - 1.0)).collect();
        let map = FeatureMap::new(2, 3, 4, 8, data).unwrap();
        let path = dir.path().join("f.icef");
        write_feature_map(&path, &map).unwrap();
        let back = read_feature_map(&path).unwrap();
        assert_eq!(back, map);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"ICEF");
        assert_eq!(raw.len(), 24 + 24 * 4);
    }

    #[test]
    fn truncated_icef_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.icef");
        let map = FeatureMap::new(1, 1, 2, 8, vec![1.0, 2.0]).unwrap();
        write_feature_map(&path, &map).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 1]).unwrap();
        assert!(matches!(read_feature_map(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_features_are_rejected() {
        assert!(FeatureMap::new(1, 1, 1, 1, vec![f64::INFINITY]).is_err());
    }
}
