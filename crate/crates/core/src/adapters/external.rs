//! Adapter skeleton for a pretrained latent-diffusion UNet with ControlNet.
//!
//! The Rust side owns geometry, naming and shape checks; the numerical work
//! is delegated to an [`ExternalRuntime`] that binds whatever inference
//! engine holds the weights. A runtime must:
//!
//! * install attention processors on every `attn2` (cross-attention) module
//!   listed by [`SD15_SITE_PATHS`] and, per call, query
//!   [`StepHooks::attention_bias`] with the site id from
//!   [`site_for_module_path`]: add logit-space biases before the softmax,
//!   report the head-averaged softmax as [`AttnStage::Softmax`], add
//!   probability-space biases to the requested columns only and report the
//!   result as [`AttnStage::Applied`];
//! * scale the ControlNet mid-block residual by the middle-block control
//!   scale, and the skip residuals feeding decoder block `l` by that block's
//!   scale (masks are broadcast over channels);
//! * keep no per-run state outside the hooks, so one instance can serve
//!   concurrent runs.
//!
//! No weights are bundled. The optional integration tests look for
//! [`WEIGHTS_ENV`] and are ignored by default.

use std::path::PathBuf;

use crate::backbone::{
    AttnStage, BackboneDescriptor, ControlSlotInfo, DenoisingBackbone, LayerId, SiteId, SiteInfo,
    StepContext, StepHooks, TextEmbedding,
};
use crate::condition::ConditionInput;
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::prompt::Tokenizer;
use crate::tensor::{Feature, Resolution};

/// Directory holding user-supplied pretrained weights.
pub const WEIGHTS_ENV: &str = "SEMCTL_EXTERNAL_WEIGHTS";

/// Cross-attention module paths of a Stable-Diffusion-1.x UNet decoder side,
/// paired with their site ids.
pub const SD15_SITE_PATHS: [(&str, u32, u32); 10] = [
    ("mid_block.attentions.0.transformer_blocks.0.attn2", 0, 1),
    ("up_blocks.1.attentions.0.transformer_blocks.0.attn2", 2, 1),
    ("up_blocks.1.attentions.1.transformer_blocks.0.attn2", 2, 2),
    ("up_blocks.1.attentions.2.transformer_blocks.0.attn2", 2, 3),
    ("up_blocks.2.attentions.0.transformer_blocks.0.attn2", 3, 1),
    ("up_blocks.2.attentions.1.transformer_blocks.0.attn2", 3, 2),
    ("up_blocks.2.attentions.2.transformer_blocks.0.attn2", 3, 3),
    ("up_blocks.3.attentions.0.transformer_blocks.0.attn2", 4, 1),
    ("up_blocks.3.attentions.1.transformer_blocks.0.attn2", 4, 2),
    ("up_blocks.3.attentions.2.transformer_blocks.0.attn2", 4, 3),
];

pub fn site_for_module_path(path: &str) -> Option<SiteId> {
    SD15_SITE_PATHS
        .iter()
        .find(|(p, _, _)| *p == path)
        .map(|&(_, layer, module)| SiteId {
            layer: LayerId(layer),
            module,
        })
}

/// Geometry of a 512×512 SD-1.x pipeline: 64×64×4 latent, 77×768 text
/// tokens; `up_blocks.0` has no cross-attention and shares the middle
/// block's 8×8 input.
pub fn sd15_descriptor() -> BackboneDescriptor {
    let res = |s: usize| Resolution::new(s, s);
    let layer_res = |layer: u32| match layer {
        0 | 1 => res(8),
        2 => res(16),
        3 => res(32),
        _ => res(64),
    };
    BackboneDescriptor {
        name: "sd15-controlnet-external".into(),
        latent_channels: 4,
        latent_resolution: res(64),
        token_count: 77,
        token_dim: 768,
        condition_resolution: res(512),
        sites: SD15_SITE_PATHS
            .iter()
            .map(|&(_, layer, module)| SiteInfo {
                site: SiteId {
                    layer: LayerId(layer),
                    module,
                },
                resolution: layer_res(layer),
            })
            .collect(),
        control_slots: (0..=4)
            .map(|layer| ControlSlotInfo {
                layer: LayerId(layer),
                resolution: layer_res(layer),
                has_cross_attention: layer != 1,
            })
            .collect(),
    }
}

/// The engine-specific half of the adapter.
pub trait ExternalRuntime: Send + Sync {
    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Text-encoder output for a prompt, `[tokens × dim]` row-major.
    fn encode_text(&self, text: &str) -> Result<Vec<f32>>;

    /// One UNet + ControlNet evaluation honouring the hooks as described in
    /// the module docs.
    fn unet_forward(
        &self,
        latent: &Feature,
        timestep: f32,
        step: usize,
        text: &TextEmbedding,
        condition: &ConditionInput,
        hooks: &mut dyn StepHooks,
    ) -> Result<Feature>;

    fn vae_decode(&self, latent: &Feature) -> Result<RgbImage>;
}

pub struct ExternalAdapter<R> {
    runtime: R,
    descriptor: BackboneDescriptor,
}

impl<R: ExternalRuntime> ExternalAdapter<R> {
    pub fn new(runtime: R) -> Self {
        Self::with_descriptor(runtime, sd15_descriptor())
    }

    pub fn with_descriptor(runtime: R, descriptor: BackboneDescriptor) -> Self {
        Self {
            runtime,
            descriptor,
        }
    }

    pub fn runtime(&self) -> &R {
        &self.runtime
    }
}

/// Weights directory named by [`WEIGHTS_ENV`], if set and present.
pub fn weights_dir_from_env() -> Result<PathBuf> {
    let dir = std::env::var_os(WEIGHTS_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::InvalidConfig(format!("{WEIGHTS_ENV} is not set")))?;
    if !dir.is_dir() {
        return Err(Error::InvalidConfig(format!(
            "{WEIGHTS_ENV} does not name a directory: {}",
            dir.display()
        )));
    }
    Ok(dir)
}

impl<R: ExternalRuntime> DenoisingBackbone for ExternalAdapter<R> {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self.runtime.tokenizer()
    }

    fn embed_prompt(&self, text: &str) -> Result<TextEmbedding> {
        let d = &self.descriptor;
        let data = self.runtime.encode_text(text)?;
        if data.len() != d.token_count * d.token_dim {
            return Err(Error::shape(
                format!("{}x{}", d.token_count, d.token_dim),
                format!("{} values", data.len()),
            ));
        }
        Ok(TextEmbedding {
            tokens: d.token_count,
            dim: d.token_dim,
            data,
        })
    }

    fn predict_noise(
        &self,
        latent: &Feature,
        step: StepContext,
        text: &TextEmbedding,
        condition: &ConditionInput,
        hooks: &mut dyn StepHooks,
    ) -> Result<Feature> {
        let d = &self.descriptor;
        if latent.channels() != d.latent_channels || latent.resolution() != d.latent_resolution {
            return Err(Error::shape(
                format!("{}x{}", d.latent_channels, d.latent_resolution),
                latent.shape_string(),
            ));
        }
        let mut guard = SiteGuard {
            inner: hooks,
            descriptor: d,
        };
        let eps = self.runtime.unet_forward(
            latent,
            step.timestep,
            step.index,
            text,
            condition,
            &mut guard,
        )?;
        if !eps.same_shape(latent) {
            return Err(Error::shape(latent.shape_string(), eps.shape_string()));
        }
        Ok(eps)
    }

    fn decode_latent(&self, latent: &Feature) -> Result<RgbImage> {
        self.runtime.vae_decode(latent)
    }
}

/// Drops observations from sites the descriptor does not declare, so a
/// runtime that hooks extra modules cannot pollute an archive.
struct SiteGuard<'a> {
    inner: &'a mut dyn StepHooks,
    descriptor: &'a BackboneDescriptor,
}

impl StepHooks for SiteGuard<'_> {
    fn control_scale(&self, step: usize, layer: LayerId) -> crate::backbone::ControlScale<'_> {
        self.inner.control_scale(step, layer)
    }

    fn attention_bias(
        &self,
        step: usize,
        site: SiteId,
    ) -> Option<crate::backbone::BiasRequest<'_>> {
        self.inner.attention_bias(step, site)
    }

    fn wants_attention(&self) -> bool {
        self.inner.wants_attention()
    }

    fn observe_attention(
        &mut self,
        step: usize,
        site: SiteId,
        stage: AttnStage,
        probs: &crate::tensor::AttnMatrix,
    ) {
        if self.descriptor.site_resolution(site).is_some() {
            self.inner.observe_attention(step, site, stage, probs);
        }
    }
}
