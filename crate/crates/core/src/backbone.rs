//! The contract between the guidance pipeline and a denoising backbone.
//!
//! A backbone is an ε-predicting UNet with a ControlNet branch. It exposes
//! its cross-attention sites and control-merge points, and calls back into
//! a [`StepHooks`] implementation at each of them during a forward pass.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::condition::ConditionInput;
use crate::error::Result;
use crate::image_io::RgbImage;
use crate::prompt::Tokenizer;
use crate::tensor::{AttnMatrix, Feature, Grid, Resolution};

/// A UNet block that can receive a control scale or host cross-attention.
///
/// `0` is the middle block; `1..=N` are decoder blocks in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u32);

impl LayerId {
    pub const MIDDLE: LayerId = LayerId(0);

    pub fn decoder(index: u32) -> Self {
        assert!(index > 0, "decoder blocks are numbered from 1");
        LayerId(index)
    }

    pub fn is_middle(self) -> bool {
        self.0 == 0
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_middle() {
            f.write_str("mid")
        } else {
            write!(f, "dec{}", self.0)
        }
    }
}

/// One cross-attention module: `module` is 1-based within its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: LayerId,
    pub module: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub site: SiteId,
    pub resolution: Resolution,
}

/// A point where ControlNet features are merged into the UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSlotInfo {
    pub layer: LayerId,
    pub resolution: Resolution,
    pub has_cross_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    pub latent_channels: usize,
    pub latent_resolution: Resolution,
    pub token_count: usize,
    pub token_dim: usize,
    /// Condition raster size the backbone expects.
    pub condition_resolution: Resolution,
    /// Cross-attention sites in execution order.
    pub sites: Vec<SiteInfo>,
    /// Control merge points in execution order (middle block first).
    pub control_slots: Vec<ControlSlotInfo>,
}

impl BackboneDescriptor {
    pub fn site_resolution(&self, site: SiteId) -> Option<Resolution> {
        self.sites
            .iter()
            .find(|s| s.site == site)
            .map(|s| s.resolution)
    }

    pub fn attention_layers(&self) -> BTreeSet<LayerId> {
        self.sites.iter().map(|s| s.site.layer).collect()
    }
}

/// How strongly ControlNet features enter at a merge point.
#[derive(Debug, Clone, Copy)]
pub enum ControlScale<'a> {
    /// One multiplier for every location.
    Scalar(f32),
    /// A spatial mask at the slot's resolution, broadcast over channels.
    Mask(&'a Grid),
    /// The ControlNet output is replaced by zeros.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSpace {
    /// Added to post-softmax probabilities; rows are not renormalized.
    #[default]
    Prob,
    /// Added to pre-softmax logits.
    Logit,
}

/// An additive bias on the target-token columns of one attention site.
#[derive(Debug, Clone, Copy)]
pub struct BiasRequest<'a> {
    pub grid: &'a Grid,
    pub target_indices: &'a BTreeSet<usize>,
    pub space: BiasSpace,
}

/// Which head-averaged attention tensor an observation carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnStage {
    /// Softmax output before any probability-space edit.
    Softmax,
    /// Probabilities actually used to mix values.
    Applied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    /// Position in the sampling schedule, `0..steps`.
    pub index: usize,
    /// Diffusion timestep fed to the denoiser.
    pub timestep: f32,
}

/// Callbacks fired by a backbone during one forward pass.
///
/// Within a pass, a block first merges control features (querying
/// [`control_scale`](Self::control_scale)); each attention site then computes
/// logits, applies a logit-space bias, takes the softmax, reports the
/// [`AttnStage::Softmax`] probabilities, applies a probability-space bias and
/// finally reports the [`AttnStage::Applied`] probabilities.
pub trait StepHooks {
    fn control_scale(&self, _step: usize, _layer: LayerId) -> ControlScale<'_> {
        ControlScale::Scalar(1.0)
    }

    fn attention_bias(&self, _step: usize, _site: SiteId) -> Option<BiasRequest<'_>> {
        None
    }

    /// Backbones skip head averaging when this is `false`.
    fn wants_attention(&self) -> bool {
        false
    }

    fn observe_attention(
        &mut self,
        _step: usize,
        _site: SiteId,
        _stage: AttnStage,
        _probs: &AttnMatrix,
    ) {
    }
}

/// Hooks that leave the backbone untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl StepHooks for NoHooks {}

/// A prompt embedded for cross-attention, `[tokens × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TextEmbedding {
    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// An ε-predicting denoiser with a ControlNet branch.
///
/// Implementations must be shareable read-only across concurrent runs; all
/// per-run state lives in the hooks and the latent.
pub trait DenoisingBackbone: Send + Sync {
    fn descriptor(&self) -> &BackboneDescriptor;

    fn tokenizer(&self) -> &dyn Tokenizer;

    fn embed_prompt(&self, text: &str) -> Result<TextEmbedding>;

    fn predict_noise(
        &self,
        latent: &Feature,
        step: StepContext,
        text: &TextEmbedding,
        condition: &ConditionInput,
        hooks: &mut dyn StepHooks,
    ) -> Result<Feature>;

    fn decode_latent(&self, latent: &Feature) -> Result<RgbImage>;
}
