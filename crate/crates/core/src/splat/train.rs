//! Finetuning loops: one randomly chosen view per iteration, Adam updates on
//! the trainable parameter classes, state kept in `f32` after every step so a
//! checkpointed run resumes bit-exactly.

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::Camera;
use super::gaussians::{GaussianSet, ParamClass, PARAMS_PER_GAUSSIAN};
use super::loss::{loss_gs_grad, loss_gs_with, loss_nnfm_targets, loss_texture_grad, LossConfig, NnfmTarget};
use super::raster::{render, render_backward, RenderSettings};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureProvider};
use crate::image::Image;
use crate::scene::TrainingStage;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr_color: f64,
    pub lr_other: f64,
    pub adam_eps: f64,
    pub trainable: Vec<ParamClass>,
    pub seed: u64,
    pub loss: LossConfig,
    pub render: RenderSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_color: 2.5e-3,
            lr_other: 1e-3,
            adam_eps: 1e-8,
            trainable: vec![ParamClass::Color],
            seed: 0,
            loss: LossConfig::default(),
            render: RenderSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn lr(&self, class: ParamClass) -> Option<f64> {
        self.trainable.contains(&class).then_some(if class == ParamClass::Color { self.lr_color } else { self.lr_other })
    }
}

/// A supervised view: camera, target image and optional NNFM terms.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub view_id: String,
    pub camera: Camera,
    pub target: Image<f64>,
    pub nnfm: Vec<NnfmTarget>,
}

#[derive(Clone, Copy)]
pub enum Objective<'a> {
    Color,
    Texture(&'a dyn FeatureProvider),
}

impl Objective<'_> {
    pub fn stage(&self) -> TrainingStage {
        match self {
            Objective::Color => TrainingStage::Color,
            Objective::Texture(_) => TrainingStage::Texture,
        }
    }
}

/// Parameters plus optimizer moments and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub gaussians: GaussianSet,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub iter: u64,
    pub stage: TrainingStage,
}

impl TrainState {
    pub fn new(gaussians: GaussianSet, stage: TrainingStage) -> Self {
        let n = gaussians.len() * PARAMS_PER_GAUSSIAN;
        Self { gaussians, adam_m: vec![0.0; n], adam_v: vec![0.0; n], iter: 0, stage }
    }
}

pub struct Trainer<'a> {
    pub views: &'a [TrainView],
    pub config: &'a TrainConfig,
    pub objective: Objective<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(views: &'a [TrainView], config: &'a TrainConfig, objective: Objective<'a>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::param("training needs at least one view"));
        }
        config.loss.validate()?;
        if let Objective::Texture(p) = objective {
            if p.differentiable().is_none() {
                return Err(Error::param(format!("feature provider `{}` cannot drive NNFM training", p.name())));
            }
        }
        Ok(Self { views, config, objective })
    }

    /// View used at `iter`; depends only on the seed, stage and iteration.
    pub fn view_index(&self, iter: u64) -> usize {
        let stage = self.objective.stage() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (stage << 56));
        rng.set_stream(iter);
        rng.random_range(0..self.views.len())
    }

    fn loss_and_grad(&self, rendered: &Image<f64>, view: &TrainView) -> Result<(f64, Image<f64>)> {
        match self.objective {
            Objective::Color => loss_gs_grad(rendered, &view.target, &self.config.loss),
            Objective::Texture(p) => loss_texture_grad(rendered, &view.target, &view.nnfm, p, &self.config.loss),
        }
    }

    /// One optimizer step. On a non-finite loss or gradient the state is left untouched.
    pub fn step(&self, state: &mut TrainState) -> Result<f64> {
        let view = &self.views[self.view_index(state.iter)];
        let mut params = state.gaussians.to_params();
        let out = render(&params, &view.camera, &self.config.render)?;
        let (loss, grad_img) = self.loss_and_grad(&out.image, view)?;
        let diverged = |loss| Error::Diverged { stage: state.stage.to_string(), iter: state.iter as usize, loss };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let grad = render_backward(&params, &view.camera, &self.config.render, &grad_img)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(f64::NAN));
        }

        let t = (state.iter + 1) as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let lrs: Vec<Option<f64>> = (0..PARAMS_PER_GAUSSIAN).map(|k| self.config.lr(ParamClass::of_offset(k))).collect();
        let mut m = state.adam_m.clone();
        let mut v = state.adam_v.clone();
        for (i, g) in grad.iter().enumerate() {
            let Some(lr) = lrs[i % PARAMS_PER_GAUSSIAN] else { continue };
            m[i] = (BETA1 * f64::from(m[i]) + (1.0 - BETA1) * g) as f32;
            v[i] = (BETA2 * f64::from(v[i]) + (1.0 - BETA2) * g * g) as f32;
            let mhat = f64::from(m[i]) / bc1;
            let vhat = f64::from(v[i]) / bc2;
            params.values[i] -= lr * mhat / (vhat.sqrt() + self.config.adam_eps);
        }
        let mut next = GaussianSet::from_params(&params);
        if self.config.trainable.contains(&ParamClass::Rotation) {
            next.renormalize_rotations();
        }
        if next.validate().is_err() {
            return Err(diverged(loss));
        }
        state.gaussians = next;
        state.adam_m = m;
        state.adam_v = v;
        state.iter += 1;
        Ok(loss)
    }

    /// Steps until `state.iter == until`, calling `on_checkpoint` every
    /// `every` iterations (and at the end). Returns early if the hook breaks.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: u64,
        every: u64,
        mut on_step: impl FnMut(&TrainState, f64),
        mut on_checkpoint: impl FnMut(&TrainState) -> Result<ControlFlow<()>>,
    ) -> Result<ControlFlow<()>> {
        if state.adam_m.len() != state.gaussians.len() * PARAMS_PER_GAUSSIAN || state.adam_v.len() != state.adam_m.len() {
            return Err(Error::Validation("optimizer state does not match the gaussian count".into()));
        }
        while state.iter < until {
            let loss = self.step(state)?;
            on_step(state, loss);
            if (every > 0 && state.iter % every == 0) || state.iter == until {
                if on_checkpoint(state)?.is_break() {
                    return Ok(ControlFlow::Break(()));
                }
            }
        }
        Ok(ControlFlow::Continue(()))
    }

    /// Mean objective over all views.
    pub fn mean_loss(&self, gaussians: &GaussianSet) -> Result<f64> {
        let params = gaussians.to_params();
        let mut total = 0.0;
        for view in self.views {
            let img = render(&params, &view.camera, &self.config.render)?.image;
            total += match self.objective {
                Objective::Color => loss_gs_with(&img, &view.target, &self.config.loss)?,
                Objective::Texture(p) => {
                    let f = extract_features(&img, p)?;
                    let mut l = loss_nnfm_targets(&f, &view.nnfm)?;
                    if self.config.loss.alpha > 0.0 {
                        l += self.config.loss.alpha * loss_gs_with(&img, &view.target, &self.config.loss)?;
                    }
                    l
                }
            };
        }
        Ok(total / self.views.len() as f64)
    }
}

fn finetune(gaussians: &GaussianSet, views: &[TrainView], iters: u64, config: &TrainConfig, objective: Objective) -> Result<GaussianSet> {
    let trainer = Trainer::new(views, config, objective)?;
    let mut state = TrainState::new(gaussians.clone(), objective.stage());
    let _ = trainer.run(&mut state, iters, 0, |_, _| {}, |_| Ok(ControlFlow::Continue(())))?;
    Ok(state.gaussians)
}

/// Minimizes the photometric loss against edited views.
pub fn finetune_color(gaussians: &GaussianSet, views: &[TrainView], iters: u64, config: &TrainConfig) -> Result<GaussianSet> {
    finetune(gaussians, views, iters, config, Objective::Color)
}

/// Minimizes NNFM plus the weighted photometric regularizer.
pub fn finetune_texture(
    gaussians: &GaussianSet,
    views: &[TrainView],
    provider: &dyn FeatureProvider,
    iters: u64,
    config: &TrainConfig,
) -> Result<GaussianSet> {
    finetune(gaussians, views, iters, config, Objective::Texture(provider))
}
