use super::{read_feature_map, FeatureMap, FeatureProvider};
use crate::error::Result;
use crate::external;
use crate::image::Image;

/// Feature provider backed by an external program (e.g. a DINO extractor)
/// that reads a PNG and writes an `ICEF` feature file.
#[derive(Clone, Debug)]
pub struct CommandFeatureProvider {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
    pub channels: usize,
}

impl FeatureProvider for CommandFeatureProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &Image<f64>) -> Result<FeatureMap> {
        let dir = external::scratch_dir(&self.name)?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("features.icef");
        image.to_f32().save_png(&input)?;
        external::run(&self.name, &self.program, &self.args, &[&input, &output])?;
        read_feature_map(&output)
    }
}
