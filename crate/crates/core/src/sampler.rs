//! Deterministic DDIM sampling (η = 0) with classifier-free guidance.
//!
//! The noise schedule is a fixed linear β ramp from 0.00085 to 0.012 over
//! 1000 training steps. Inference timesteps are `k · (1000 / steps) + 1`
//! for `k = steps-1 … 0`, and the final step denoises to ᾱ = 1.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    BiasRequest, Branch, ControlScale, DenoisingBackbone, LayerId, SiteId, StepContext, StepHooks,
    TextEmbedding,
};
use crate::condition::ConditionInput;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Feature, Resolution};

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
}

fn default_steps() -> usize {
    50
}

fn default_guidance() -> f32 {
    7.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            guidance_scale: default_guidance(),
            seed: 0,
            schedule: Schedule::Linear,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > TRAIN_TIMESTEPS {
            return Err(Error::InvalidConfig(format!(
                "steps must be in 1..={TRAIN_TIMESTEPS}, got {}",
                self.steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "guidance_scale must be finite and non-negative, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DdimSchedule {
    alphas_cumprod: Vec<f64>,
    timesteps: Vec<usize>,
}

impl DdimSchedule {
    pub fn new(config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        let Schedule::Linear = config.schedule;
        let n = TRAIN_TIMESTEPS;
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut prod = 1.0;
        for i in 0..n {
            let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (n - 1) as f64;
            prod *= 1.0 - beta;
            alphas_cumprod.push(prod);
        }
        let ratio = n / config.steps;
        let timesteps = (0..config.steps).rev().map(|k| k * ratio + 1).collect();
        Ok(Self {
            alphas_cumprod,
            timesteps,
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alphas_cumprod[t.min(TRAIN_TIMESTEPS - 1)]
    }

    /// One η = 0 update from step `index` to the next.
    pub fn step(&self, index: usize, latent: &Feature, eps: &Feature) -> Result<Feature> {
        if !latent.same_shape(eps) {
            return Err(Error::shape(latent.shape_string(), eps.shape_string()));
        }
        let a_t = self.alpha_cumprod(self.timesteps[index]);
        let a_prev = self
            .timesteps
            .get(index + 1)
            .map_or(1.0, |&t| self.alpha_cumprod(t));
        let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        let mut out = latent.clone();
        for (x, &e) in out.data_mut().iter_mut().zip(eps.data()) {
            let (xv, ev) = (f64::from(*x), f64::from(e));
            let x0 = (xv - sb * ev) / sa;
            *x = (pa * x0 + pb * ev) as f32;
        }
        Ok(out)
    }
}

/// `ε_u + g·(ε_c − ε_u)`, evaluated in f64 and rounded once.
pub fn cfg_combine(eps_cond: &Feature, eps_uncond: &Feature, guidance: f32) -> Result<Feature> {
    if !eps_cond.same_shape(eps_uncond) {
        return Err(Error::shape(
            eps_cond.shape_string(),
            eps_uncond.shape_string(),
        ));
    }
    let g = f64::from(guidance);
    let mut out = eps_uncond.clone();
    for (u, &c) in out.data_mut().iter_mut().zip(eps_cond.data()) {
        let uv = f64::from(*u);
        *u = (uv + g * (f64::from(c) - uv)) as f32;
    }
    Ok(out)
}

/// View of the run's hooks for the unconditional branch: control scales
/// pass through, attention bias and observation do not.
struct UncondView<'a>(&'a dyn StepHooks);

impl StepHooks for UncondView<'_> {
    fn control_scale(&self, step: usize, layer: LayerId) -> ControlScale<'_> {
        self.0.control_scale(step, layer)
    }

    fn attention_bias(&self, _step: usize, _site: SiteId) -> Option<BiasRequest<'_>> {
        None
    }
}

/// Noise estimate for one branch.
pub fn branch_noise(
    backbone: &dyn DenoisingBackbone,
    latent: &Feature,
    step: StepContext,
    text: &TextEmbedding,
    condition: &ConditionInput,
    branch: Branch,
    hooks: &mut dyn StepHooks,
) -> Result<Feature> {
    match branch {
        Branch::Conditional => backbone.predict_noise(latent, step, text, condition, hooks),
        Branch::Unconditional => {
            backbone.predict_noise(latent, step, text, condition, &mut UncondView(hooks))
        }
    }
}

/// Guided noise estimate: conditional branch first (with hooks), then the
/// unconditional branch.
#[allow(clippy::too_many_arguments)]
pub fn cfg_step(
    backbone: &dyn DenoisingBackbone,
    latent: &Feature,
    step: StepContext,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    guidance: f32,
    condition: &ConditionInput,
    hooks: &mut dyn StepHooks,
) -> Result<Feature> {
    let eps_c = branch_noise(
        backbone,
        latent,
        step,
        cond,
        condition,
        Branch::Conditional,
        hooks,
    )?;
    let eps_u = branch_noise(
        backbone,
        latent,
        step,
        uncond,
        condition,
        Branch::Unconditional,
        hooks,
    )?;
    cfg_combine(&eps_c, &eps_u, guidance)
}

/// Seeded standard-normal starting latent.
pub fn initial_noise(seed: u64, channels: usize, res: Resolution) -> Feature {
    let data = rng::normal_vec(seed, rng::INIT_NOISE, channels * res.area(), 1.0);
    Feature::new(channels, res, data).expect("sized")
}

/// Runs `config.steps` guided DDIM updates from `init`.
pub fn ddim_sample(
    backbone: &dyn DenoisingBackbone,
    config: &SamplerConfig,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    condition: &ConditionInput,
    init: &Feature,
    hooks: &mut dyn StepHooks,
) -> Result<Feature> {
    let schedule = DdimSchedule::new(config)?;
    let desc = backbone.descriptor();
    if init.channels() != desc.latent_channels || init.resolution() != desc.latent_resolution {
        return Err(Error::shape(
            format!("{}x{}", desc.latent_channels, desc.latent_resolution),
            init.shape_string(),
        ));
    }
    let mut latent = init.clone();
    for (index, &t) in schedule.timesteps().iter().enumerate() {
        let ctx = StepContext {
            index,
            timestep: t as f32,
        };
        let eps = cfg_step(
            backbone,
            &latent,
            ctx,
            cond,
            uncond,
            config.guidance_scale,
            condition,
            hooks,
        )?;
        latent = schedule.step(index, &latent, &eps)?;
    }
    Ok(latent)
}
