//! The two-pass procedure and its baselines.
//!
//! `semantic_control` runs the surrogate prompt to completion at full
//! control scale while recording attention, turns the recorded maps into
//! control-scale masks and attention biases, then samples the target prompt
//! from the same initial noise with both applied.

use std::collections::BTreeSet;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::attention::{capture_pass, AttentionArchive};
use crate::backbone::{
    BiasRequest, BiasSpace, ControlScale, DenoisingBackbone, LayerId, NoHooks, SiteId, StepHooks,
};
use crate::bias::BiasStack;
use crate::condition::ConditionInput;
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::mask::{build_control_stack, ControlScaleStack, MaskTimePooling};
use crate::modulation::fixed_scale_mask;
use crate::prompt::{resolve_token_roles, PromptSpec, TokenRoleMap};
use crate::rng;
use crate::sampler::{ddim_sample, SamplerConfig};
use crate::tensor::{hash_bytes, hash_f32, Feature};

/// Which pipeline variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Surrogate-pass masks plus attention bias.
    #[default]
    SemanticControl,
    /// Plain ControlNet with one constant control scale.
    ControlnetFixed(f32),
    /// Surrogate-pass masks without the attention bias.
    NoBiasAblation,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::SemanticControl => f.write_str("semantic_control"),
            Mode::ControlnetFixed(a) => write!(f, "controlnet_fixed_{a}"),
            Mode::NoBiasAblation => f.write_str("no_bias_ablation"),
        }
    }
}

/// The modes compared in the ablation table.
pub fn default_ablation_modes() -> Vec<Mode> {
    vec![
        Mode::SemanticControl,
        Mode::NoBiasAblation,
        Mode::ControlnetFixed(1.0),
        Mode::ControlnetFixed(0.4),
    ]
}

pub const DEFAULT_LAMBDA: f32 = 3.0;

/// One fully resolved generation task.
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub id: String,
    pub prompt: PromptSpec,
    pub condition: ConditionInput,
    pub sampler: SamplerConfig,
    pub lambda: f32,
    pub mask_time_pooling: MaskTimePooling,
    pub bias_space: BiasSpace,
    pub mode: Mode,
    /// Auxiliary and target passes start from the same noise.
    pub share_initial_noise: bool,
    /// Replaces every estimated mask by this constant (diagnostics).
    pub force_alpha: Option<f32>,
}

impl JobSpec {
    pub fn new(id: impl Into<String>, prompt: PromptSpec, condition: ConditionInput) -> Self {
        Self {
            id: id.into(),
            prompt,
            condition,
            sampler: SamplerConfig::default(),
            lambda: DEFAULT_LAMBDA,
            mask_time_pooling: MaskTimePooling::Matched,
            bias_space: BiasSpace::Prob,
            mode: Mode::SemanticControl,
            share_initial_noise: true,
            force_alpha: None,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::ValueOutOfRange {
                name: "lambda",
                value: f64::from(self.lambda),
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        for a in self.force_alpha.into_iter().chain(match self.mode {
            Mode::ControlnetFixed(a) => Some(a),
            _ => None,
        }) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::ValueOutOfRange {
                    name: "control scale",
                    value: f64::from(a),
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        Ok(())
    }
}

/// Everything recorded about one run, echoed to `metadata.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub job_id: String,
    pub mode: Mode,
    pub mode_label: String,
    pub backbone: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f32,
    pub lambda: f32,
    pub mask_time_pooling: MaskTimePooling,
    pub bias_space: BiasSpace,
    pub share_initial_noise: bool,
    pub force_alpha: Option<f32>,
    pub prompt: PromptSpec,
    pub non_conflicting_indices: Vec<usize>,
    pub conflicting_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub fallback_layers: Vec<LayerId>,
    pub initial_noise_hash: String,
    pub auxiliary_noise_hash: Option<String>,
    /// Hash of the final latent's f32 bytes.
    pub output_hash: String,
    /// Hash of the decoded RGB bytes.
    pub image_hash: String,
    pub archive_hash: Option<String>,
    pub control_stack_hash: Option<String>,
    pub bias_stack_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub latent: Feature,
    pub image: RgbImage,
    pub archive: Option<AttentionArchive>,
    pub control_stack: Option<ControlScaleStack>,
    pub bias_stack: Option<BiasStack>,
    pub roles: TokenRoleMap,
    pub metadata: RunMetadata,
}

/// Hooks for the target pass.
pub struct TargetHooks<'a> {
    pub masks: Option<&'a ControlScaleStack>,
    pub fixed_scale: f32,
    pub bias: Option<&'a BiasStack>,
    pub target_indices: &'a BTreeSet<usize>,
    pub bias_space: BiasSpace,
}

impl StepHooks for TargetHooks<'_> {
    fn control_scale(&self, step: usize, layer: LayerId) -> ControlScale<'_> {
        match self.masks.and_then(|m| m.get(step, layer)) {
            Some(mask) => ControlScale::Mask(mask),
            None => ControlScale::Scalar(self.fixed_scale),
        }
    }

    fn attention_bias(&self, step: usize, site: SiteId) -> Option<BiasRequest<'_>> {
        let grid = self.bias?.get(step, site)?;
        Some(BiasRequest {
            grid,
            target_indices: self.target_indices,
            space: self.bias_space,
        })
    }
}

fn check_stack_coverage(
    stack: &ControlScaleStack,
    backbone: &dyn DenoisingBackbone,
    steps: usize,
) -> Result<()> {
    for step in 0..steps {
        for slot in &backbone.descriptor().control_slots {
            match stack.get(step, slot.layer) {
                Some(g) if g.resolution() == slot.resolution => {}
                Some(g) => return Err(Error::shape(slot.resolution, g.resolution())),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "no control mask for step {step}, layer {}",
                        slot.layer
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Replaces every mask with the constant `alpha`.
fn forced_stack(stack: &ControlScaleStack, alpha: f32) -> Result<ControlScaleStack> {
    let mut out = ControlScaleStack::new();
    for (&(step, layer), g) in stack.masks() {
        out.insert(step, layer, fixed_scale_mask(alpha, g.resolution())?);
    }
    for &l in stack.fallback_layers() {
        out.mark_fallback(l);
    }
    Ok(out)
}

/// Runs one job in its configured mode.
pub fn generate(job: &JobSpec, backbone: &dyn DenoisingBackbone) -> Result<GenerationResult> {
    job.validate().map_err(|e| e.in_stage("validate"))?;
    let desc = backbone.descriptor();
    let roles =
        resolve_token_roles(&job.prompt, backbone.tokenizer()).map_err(|e| e.in_stage("roles"))?;

    let embed = |text: &str| backbone.embed_prompt(text).map_err(|e| e.in_stage("embed"));
    let target_emb = embed(&job.prompt.target_prompt)?;
    let uncond_emb = embed("")?;

    let seed = job.sampler.seed;
    let noise = crate::sampler::initial_noise(seed, desc.latent_channels, desc.latent_resolution);
    let initial_noise_hash = hash_f32(noise.data());

    let mut archive = None;
    let mut control_stack = None;
    let mut bias_stack = None;
    let mut auxiliary_noise_hash = None;

    if matches!(job.mode, Mode::SemanticControl | Mode::NoBiasAblation) {
        let aux_noise = if job.share_initial_noise {
            noise.clone()
        } else {
            let data = rng::normal_vec(
                seed,
                "aux-init-noise",
                desc.latent_channels * desc.latent_resolution.area(),
                1.0,
            );
            Feature::new(desc.latent_channels, desc.latent_resolution, data)?
        };
        auxiliary_noise_hash = Some(hash_f32(aux_noise.data()));
        let surrogate_emb = embed(&job.prompt.surrogate_prompt)?;
        let (arch, _) = capture_pass(
            backbone,
            &job.sampler,
            &surrogate_emb,
            &uncond_emb,
            &job.condition,
            roles.special_indices_surrogate.clone(),
            &aux_noise,
        )
        .map_err(|e| e.in_stage("capture"))?;

        let mut stack = build_control_stack(
            &arch,
            &roles.non_conflicting_indices,
            &desc.control_slots,
            job.mask_time_pooling,
        )
        .map_err(|e| e.in_stage("masks"))?;
        if let Some(alpha) = job.force_alpha {
            stack = forced_stack(&stack, alpha).map_err(|e| e.in_stage("masks"))?;
        }
        check_stack_coverage(&stack, backbone, job.sampler.steps)
            .map_err(|e| e.in_stage("masks"))?;

        if job.mode == Mode::SemanticControl {
            bias_stack = Some(
                BiasStack::build(&arch, &roles.conflicting_indices, job.lambda, roles.n_tar())
                    .map_err(|e| e.in_stage("bias"))?,
            );
        }
        control_stack = Some(stack);
        archive = Some(arch);
    }

    let fixed_scale = match job.mode {
        Mode::ControlnetFixed(a) => a,
        _ => 1.0,
    };
    let mut hooks = TargetHooks {
        masks: control_stack.as_ref(),
        fixed_scale,
        bias: bias_stack.as_ref(),
        target_indices: &roles.target_indices,
        bias_space: job.bias_space,
    };
    let latent = ddim_sample(
        backbone,
        &job.sampler,
        &target_emb,
        &uncond_emb,
        &job.condition,
        &noise,
        &mut hooks,
    )
    .map_err(|e| e.in_stage("target"))?;
    let image = backbone
        .decode_latent(&latent)
        .map_err(|e| e.in_stage("decode"))?;

    let metadata = RunMetadata {
        job_id: job.id.clone(),
        mode: job.mode,
        mode_label: job.mode.to_string(),
        backbone: desc.name.clone(),
        seed,
        steps: job.sampler.steps,
        guidance_scale: job.sampler.guidance_scale,
        lambda: job.lambda,
        mask_time_pooling: job.mask_time_pooling,
        bias_space: job.bias_space,
        share_initial_noise: job.share_initial_noise,
        force_alpha: job.force_alpha,
        prompt: job.prompt.clone(),
        non_conflicting_indices: roles.non_conflicting_indices.iter().copied().collect(),
        conflicting_indices: roles.conflicting_indices.iter().copied().collect(),
        target_indices: roles.target_indices.iter().copied().collect(),
        fallback_layers: control_stack
            .as_ref()
            .map(|s| s.fallback_layers().iter().copied().collect())
            .unwrap_or_default(),
        initial_noise_hash,
        auxiliary_noise_hash,
        output_hash: hash_f32(latent.data()),
        image_hash: hash_bytes(&image.data),
        archive_hash: archive.as_ref().map(AttentionArchive::content_hash),
        control_stack_hash: control_stack.as_ref().map(ControlScaleStack::content_hash),
        bias_stack_hash: bias_stack.as_ref().map(BiasStack::content_hash),
    };

    Ok(GenerationResult {
        latent,
        image,
        archive,
        control_stack,
        bias_stack,
        roles,
        metadata,
    })
}

/// Plain sampling with no hooks at all, for transparency comparisons.
pub fn sample_unhooked(job: &JobSpec, backbone: &dyn DenoisingBackbone) -> Result<Feature> {
    let desc = backbone.descriptor();
    let cond = backbone.embed_prompt(&job.prompt.target_prompt)?;
    let uncond = backbone.embed_prompt("")?;
    let noise = crate::sampler::initial_noise(
        job.sampler.seed,
        desc.latent_channels,
        desc.latent_resolution,
    );
    ddim_sample(
        backbone,
        &job.sampler,
        &cond,
        &uncond,
        &job.condition,
        &noise,
        &mut NoHooks,
    )
}

#[derive(Debug)]
pub struct AblationRow {
    pub mode: Mode,
    pub result: Result<GenerationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub mode: Mode,
    pub mode_label: String,
    pub seed: u64,
    pub ok: bool,
    pub output_hash: Option<String>,
    pub image_hash: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationManifest {
    pub job_id: String,
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub job_id: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn manifest(&self) -> AblationManifest {
        AblationManifest {
            job_id: self.job_id.clone(),
            seed: self.seed,
            rows: self
                .rows
                .iter()
                .map(|row| {
                    let (ok, out, img, err) = match &row.result {
                        Ok(r) => (
                            true,
                            Some(r.metadata.output_hash.clone()),
                            Some(r.metadata.image_hash.clone()),
                            None,
                        ),
                        Err(e) => (false, None, None, Some(e.to_string())),
                    };
                    ManifestRow {
                        mode: row.mode,
                        mode_label: row.mode.to_string(),
                        seed: self.seed,
                        ok,
                        output_hash: out,
                        image_hash: img,
                        error: err,
                    }
                })
                .collect(),
        }
    }
}

/// Runs `job` once per mode with a shared seed; a failing mode does not
/// stop the others.
pub fn run_ablation_suite(
    job: &JobSpec,
    modes: &[Mode],
    backbone: &dyn DenoisingBackbone,
) -> AblationTable {
    let rows = modes
        .iter()
        .map(|&mode| {
            let variant = job.with_mode(mode);
            let result = catch_unwind(AssertUnwindSafe(|| generate(&variant, backbone)))
                .unwrap_or_else(|_| {
                    Err(Error::InvalidConfig(format!("mode {mode} panicked")).in_stage("generate"))
                });
            AblationRow { mode, result }
        })
        .collect();
    AblationTable {
        job_id: job.id.clone(),
        seed: job.sampler.seed,
        rows,
    }
}
