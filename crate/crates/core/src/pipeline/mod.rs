//! Edit jobs: view sampling, segmentation, matching, 2D edits and the two
//! finetuning stages, persisted so that an interrupted job can be resumed.

mod job;
mod run;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{extract_features, match_regions, CommandFeatureProvider, FeatureMap, FeatureProvider, MatchAssignment, PatchDescriptor};
use crate::image::Image;
use crate::scene::{Project, ProjectConfig, SceneDataset, ViewImage};
use crate::segmentation::{segment_and_consolidate, CommandSegmenter, KMeansSegmenter, MaskSet, SegmenterBackend};
use crate::splat::NnfmTarget;
use crate::style::{render_edited_view, CommandTextureReformer, EditPlan, PlanInputs, QuiltParams, Quilter, TextureSynthesizer};

pub use job::{validate_id, EditJob, JobOverrides, JobState, JobStore, LogEvent, PlanSpec, StageCheckpoint};
pub use run::{create_job, execute_job, resume_edit_job, run_edit_job, JobHooks};

/// View id given to the edit image's mask set.
pub const EDIT_VIEW_ID: &str = "edit";

/// Resolved segmentation, feature and texture backends.
pub struct Backends {
    pub segmenter: Box<dyn SegmenterBackend>,
    pub features: Box<dyn FeatureProvider>,
    pub synthesizer: Box<dyn TextureSynthesizer>,
    external_features: bool,
    fallback_features: PatchDescriptor,
}

fn command_name(program: &str) -> String {
    Path::new(program).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| program.to_string())
}

impl Backends {
    /// Configured external programs, with the built-in implementations for
    /// anything left unset.
    pub fn from_config(config: &ProjectConfig) -> Result<Self> {
        let b = &config.backends;
        let segmenter: Box<dyn SegmenterBackend> = match &b.segmenter {
            Some(c) => Box::new(CommandSegmenter {
                name: command_name(&c.program),
                program: c.program.clone(),
                args: c.args.clone(),
                exclusive: true,
            }),
            None => Box::new(KMeansSegmenter::with_seed(config.seed)),
        };
        let features: Box<dyn FeatureProvider> = match &b.features {
            Some(c) => Box::new(CommandFeatureProvider {
                name: command_name(&c.program),
                program: c.program.clone(),
                args: c.args.clone(),
                channels: c.channels.ok_or_else(|| Error::param("external feature backend needs `channels`"))?,
            }),
            None => Box::new(PatchDescriptor::default()),
        };
        let synthesizer: Box<dyn TextureSynthesizer> = match &b.texture {
            Some(c) => Box::new(CommandTextureReformer {
                name: command_name(&c.program),
                program: c.program.clone(),
                args: c.args.clone(),
            }),
            None => Box::new(Quilter(QuiltParams { seed: config.seed, ..QuiltParams::default() })),
        };
        Ok(Self {
            segmenter,
            features,
            synthesizer,
            external_features: b.features.is_some(),
            fallback_features: PatchDescriptor::default(),
        })
    }

    /// Provider for the NNFM objective; non-differentiable providers are
    /// replaced by the built-in descriptor.
    pub fn nnfm_provider(&self) -> &dyn FeatureProvider {
        if self.features.differentiable().is_some() {
            self.features.as_ref()
        } else {
            &self.fallback_features
        }
    }

    fn parallel(&self) -> bool {
        !self.segmenter.exclusive() && !self.external_features
    }
}

/// A project opened with an effective configuration and its backends.
pub struct Session {
    pub project: Project,
    pub dataset: SceneDataset,
    pub config: ProjectConfig,
    pub backends: Backends,
}

impl Session {
    pub fn open(root: &Path, overrides: &JobOverrides) -> Result<Self> {
        let project = Project::open(root)?;
        let config = overrides.apply(&project.config)?;
        Self::with_config(project, config)
    }

    pub fn with_config(project: Project, config: ProjectConfig) -> Result<Self> {
        config.validate()?;
        let dataset = project.load_dataset()?;
        let backends = Backends::from_config(&config)?;
        Ok(Self { project, dataset, config, backends })
    }

    pub fn view(&self, view_id: &str) -> Result<&ViewImage> {
        Ok(&self.dataset.find(view_id)?.0)
    }

    /// `view:<id>` names a dataset view; anything else is a project-relative path.
    pub fn load_edit_image(&self, reference: &str) -> Result<Image<f32>> {
        match reference.strip_prefix("view:") {
            Some(id) => Ok(self.view(id)?.pixels.clone()),
            None => {
                let path = self.project.resolve(reference);
                if !path.is_file() {
                    return Err(Error::NotFound(format!("edit image {reference}")));
                }
                Image::load(&path)
            }
        }
    }

    pub fn segment_image(&self, view_id: &str, image: &Image<f32>) -> Result<MaskSet> {
        segment_and_consolidate(
            view_id,
            image,
            self.backends.segmenter.as_ref(),
            self.config.grid_side,
            self.config.max_masks,
        )
    }

    pub fn segment_view(&self, view_id: &str) -> Result<MaskSet> {
        self.segment_image(view_id, &self.view(view_id)?.pixels)
    }

    pub fn segment_views(&self, view_ids: &[String]) -> Result<Vec<MaskSet>> {
        if self.backends.parallel() {
            view_ids.par_iter().map(|v| self.segment_view(v)).collect()
        } else {
            view_ids.iter().map(|v| self.segment_view(v)).collect()
        }
    }

    /// Segments the edit image and validates the directives against its regions.
    pub fn edit_masks(&self, spec: &PlanSpec) -> Result<(Image<f32>, MaskSet)> {
        let image = self.load_edit_image(&spec.edit_image)?;
        let masks = self.segment_image(EDIT_VIEW_ID, &image)?;
        spec.style.validate(&masks)?;
        Ok((image, masks))
    }

    pub fn build_plan(&self, spec: &PlanSpec) -> Result<EditPlan> {
        let (image, masks) = self.edit_masks(spec)?;
        self.build_plan_with(spec, image, masks)
    }

    pub fn build_plan_with(&self, spec: &PlanSpec, image: Image<f32>, masks: MaskSet) -> Result<EditPlan> {
        let inputs = PlanInputs {
            provider: self.backends.features.as_ref(),
            synthesizer: self.backends.synthesizer.as_ref(),
            canvas_size: self.config.canvas_size,
            base_dir: &self.project.root,
        };
        EditPlan::build(image, masks, spec.style.clone(), &inputs)
    }

    /// Matches the regions of one view against the plan's edit regions.
    pub fn match_view(&self, plan: &EditPlan, masks: &MaskSet) -> Result<MatchAssignment> {
        let view = self.view(&masks.view_id)?;
        let featmap = extract_features(&view.pixels.to_f64(), self.backends.features.as_ref())?.with_source(&view.view_id);
        match_regions(masks, &featmap, &plan.descriptors, self.config.normalization)
    }

    pub fn match_views(&self, plan: &EditPlan, masks: &[MaskSet]) -> Result<Vec<MatchAssignment>> {
        if self.backends.parallel() {
            masks.par_iter().map(|m| self.match_view(plan, m)).collect()
        } else {
            masks.iter().map(|m| self.match_view(plan, m)).collect()
        }
    }

    pub fn edit_view(&self, plan: &EditPlan, masks: &MaskSet, assignment: &MatchAssignment) -> Result<ViewImage> {
        render_edited_view(self.view(&masks.view_id)?, plan, masks, assignment)
    }

    /// PNG of one view edited in 2D, without creating a job. The bytes equal
    /// the 2D edit a job writes for the same view and plan.
    pub fn preview(&self, view_id: &str, spec: &PlanSpec) -> Result<Vec<u8>> {
        let plan = self.build_plan(spec)?;
        let masks = self.segment_view(view_id)?;
        let assignment = self.match_view(&plan, &masks)?;
        self.edit_view(&plan, &masks, &assignment)?.pixels.encode_png()
    }

    /// Style features of every texture canvas, for the NNFM objective.
    pub fn style_features(&self, plan: &EditPlan) -> Result<BTreeMap<u32, FeatureMap>> {
        let p = self.backends.nnfm_provider();
        plan.canvases.iter().map(|(&id, c)| Ok((id, extract_features(&c.pixels.to_f64(), p)?))).collect()
    }
}

/// NNFM terms for one view: each texture-directed edit region contributes its
/// style features over the cells that are at least half covered by the view
/// regions matched to it.
pub fn nnfm_targets(
    masks: &MaskSet,
    assignment: &MatchAssignment,
    style: &BTreeMap<u32, FeatureMap>,
    grid: (usize, usize, usize),
) -> Result<Vec<NnfmTarget>> {
    let (rows, cols, stride) = grid;
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for part in &masks.masks {
        let entry = assignment.get(part.mask_id).ok_or_else(|| {
            Error::Consistency(format!("view {} mask {} has no matched edit region", masks.view_id, part.mask_id))
        })?;
        if !style.contains_key(&entry.edit_mask_id) {
            continue;
        }
        let c = counts.entry(entry.edit_mask_id).or_insert_with(|| vec![0; rows * cols]);
        for (x, y) in part.bitmap.iter_set() {
            c[(y / stride) * cols + x / stride] += 1;
        }
    }
    let mut out = Vec::new();
    for (id, c) in counts {
        let cells: Vec<usize> = (0..rows * cols)
            .filter(|&i| {
                let (r, col) = (i / cols, i % cols);
                let h = ((r + 1) * stride).min(masks.height) - r * stride;
                let w = ((col + 1) * stride).min(masks.width) - col * stride;
                2 * c[i] >= w * h && c[i] > 0
            })
            .collect();
        if !cells.is_empty() {
            out.push(NnfmTarget { cells: Some(cells), style: style[&id].clone() });
        }
    }
    Ok(out)
}
