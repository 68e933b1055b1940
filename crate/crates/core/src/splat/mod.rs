//! Gaussian-splat scene, differentiable rasterizer, losses and finetuning.

mod camera;
mod gaussians;
mod loss;
mod raster;
mod ssim;
mod train;

pub use camera::Camera;
pub use gaussians::{logit, sigmoid, Gaussian, GaussianSet, ParamClass, SplatParams, PARAMS_PER_GAUSSIAN};
pub use loss::{
    l1, loss_gs, loss_gs_grad, loss_gs_with, loss_nnfm, loss_nnfm_grad, loss_nnfm_targets, loss_texture, loss_texture_grad,
    LossConfig, NnfmTarget,
};
pub use raster::{rasterize, render, render_backward, RenderOutput, RenderSettings};
pub use ssim::{ssim, ssim_grad, ssim_with, SsimParams};
pub use train::{finetune_color, finetune_texture, Objective, TrainConfig, TrainState, TrainView, Trainer};

use crate::error::Result;
use crate::image::Image;

/// A renderable scene representation the editing pipeline can target.
/// Gaussian splats are the only implementation; a NeRF backend would plug in here.
pub trait RadianceField: Send + Sync {
    fn backend_name(&self) -> &str;
    fn render_view(&self, camera: &Camera, settings: &RenderSettings) -> Result<Image<f64>>;
    fn parameter_count(&self) -> usize;
}

impl RadianceField for GaussianSet {
    fn backend_name(&self) -> &str {
        "gaussian-splat"
    }

    fn render_view(&self, camera: &Camera, settings: &RenderSettings) -> Result<Image<f64>> {
        self.validate()?;
        Ok(render(&self.to_params(), camera, settings)?.image)
    }

    fn parameter_count(&self) -> usize {
        self.len() * PARAMS_PER_GAUSSIAN
    }
}
