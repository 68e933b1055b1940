use std::collections::BTreeSet;

use super::io::decode_label_map;
use super::{MaskOrigin, PromptGrid, RegionMask, SegmenterBackend};
use crate::error::{Error, Result};
use crate::external;
use crate::image::{Bitmap, Image};

/// Segmenter backed by an external program (e.g. a SAM wrapper). It is called
/// as `program [args..] --grid <side> <input.png> <labels.png>` and writes a
/// label-map PNG; each distinct label becomes one raw mask.
#[derive(Clone, Debug)]
pub struct CommandSegmenter {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
    pub exclusive: bool,
}

impl SegmenterBackend for CommandSegmenter {
    fn name(&self) -> &str {
        &self.name
    }

    fn exclusive(&self) -> bool {
        self.exclusive
    }

    fn segment(&self, image: &Image<f32>, prompts: &PromptGrid) -> Result<Vec<RegionMask>> {
        let dir = external::scratch_dir(&self.name)?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("labels.png");
        image.save_png(&input)?;
        let mut args = self.args.clone();
        args.extend(["--grid".to_string(), prompts.side.to_string()]);
        external::run(&self.name, &self.program, &args, &[&input, &output])?;
        let bytes = std::fs::read(&output).map_err(|e| Error::backend(&self.name, format!("no label map: {e}")))?;
        let (w, h, labels) = decode_label_map(&bytes)?;
        if (w, h) != (image.width(), image.height()) {
            return Err(Error::backend(&self.name, format!("label map is {w}x{h}")));
        }
        let ids: BTreeSet<u32> = labels.iter().copied().collect();
        Ok(ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let bits = labels.iter().map(|&l| l == id).collect();
                RegionMask::new(i as u32, Bitmap::from_bits(w, h, bits).expect("sized"), MaskOrigin::Raw(i))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::segment_view;

    #[test]
    fn failure_names_the_backend() {
        let seg = CommandSegmenter {
            name: "sam".into(),
            program: "/nonexistent/iceg-sam".into(),
            args: vec![],
            exclusive: true,
        };
        let err = segment_view(&Image::filled(8, 8, [0.0; 3]), &seg, 4).unwrap_err();
        assert!(matches!(err, Error::Backend { ref backend, .. } if backend == "sam"));
    }
}
