//! Cross-attention capture during the auxiliary (surrogate-prompt) pass.

use std::collections::{BTreeMap, BTreeSet};

use crate::backbone::{
    AttnStage, BackboneDescriptor, DenoisingBackbone, LayerId, SiteId, StepHooks, TextEmbedding,
};
use crate::condition::ConditionInput;
use crate::error::{Error, Result};
use crate::sampler::{ddim_sample, SamplerConfig};
use crate::tensor::{AttnMatrix, Feature, Resolution};

/// Zeroes the special-token columns and rescales each row to sum to one.
///
/// Equivalent to a softmax taken over the non-special logits only.
pub fn exclude_and_renormalize(raw: &AttnMatrix, special: &BTreeSet<usize>) -> Result<AttnMatrix> {
    let cols = raw.cols();
    if let Some(&bad) = special.iter().find(|&&i| i >= cols) {
        return Err(Error::TargetIndexOutOfRange {
            index: bad,
            len: cols,
        });
    }
    if special.is_empty() {
        return Ok(raw.clone());
    }
    if special.len() == cols {
        return Err(Error::AllTokensSpecial);
    }
    let mut out = raw.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for &i in special {
            row[i] = 0.0;
        }
        let kept: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if kept <= 0.0 {
            // every remaining probability underflowed; fall back to uniform
            let share = 1.0 / (cols - special.len()) as f32;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if special.contains(&j) { 0.0 } else { share };
            }
            continue;
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / kept) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchiveKey {
    pub step: usize,
    pub layer: LayerId,
    pub module: u32,
}

impl ArchiveKey {
    pub fn new(step: usize, layer: LayerId, module: u32) -> Self {
        Self {
            step,
            layer,
            module,
        }
    }

    pub fn site(&self) -> SiteId {
        SiteId {
            layer: self.layer,
            module: self.module,
        }
    }
}

/// Renormalized token-wise attention maps keyed by (step, layer, module).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionArchive {
    entries: BTreeMap<ArchiveKey, AttnMatrix>,
    layer_resolutions: BTreeMap<LayerId, Resolution>,
    modules_per_layer: BTreeMap<LayerId, u32>,
    token_count: usize,
}

impl AttentionArchive {
    pub fn new(
        layer_resolutions: BTreeMap<LayerId, Resolution>,
        modules_per_layer: BTreeMap<LayerId, u32>,
        token_count: usize,
    ) -> Result<Self> {
        if layer_resolutions.keys().ne(modules_per_layer.keys()) {
            return Err(Error::InvalidConfig(
                "resolution and module tables cover different layers".into(),
            ));
        }
        Ok(Self {
            entries: BTreeMap::new(),
            layer_resolutions,
            modules_per_layer,
            token_count,
        })
    }

    /// An empty archive shaped after a backbone's attention sites.
    pub fn for_backbone(desc: &BackboneDescriptor) -> Result<Self> {
        if desc.sites.is_empty() {
            return Err(Error::NoAttentionSites);
        }
        let mut res = BTreeMap::new();
        let mut modules = BTreeMap::new();
        for s in &desc.sites {
            res.insert(s.site.layer, s.resolution);
            let m = modules.entry(s.site.layer).or_insert(0u32);
            *m = (*m).max(s.site.module);
        }
        Self::new(res, modules, desc.token_count)
    }

    pub fn insert(&mut self, key: ArchiveKey, map: AttnMatrix) -> Result<()> {
        let res = self.resolution(key.layer)?;
        let modules = self.modules_per_layer[&key.layer];
        if key.module == 0 || key.module > modules {
            return Err(Error::InvalidConfig(format!(
                "module {} outside 1..={modules} for layer {}",
                key.module, key.layer
            )));
        }
        if map.rows() != res.area() || map.cols() != self.token_count {
            return Err(Error::shape(
                format!("{}x{}", res.area(), self.token_count),
                format!("{}x{}", map.rows(), map.cols()),
            ));
        }
        self.entries.insert(key, map);
        Ok(())
    }

    pub fn get(&self, key: ArchiveKey) -> Result<&AttnMatrix> {
        self.entries.get(&key).ok_or(Error::MissingArchiveEntry {
            step: key.step,
            layer: key.layer.0,
            module: key.module,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ArchiveKey, &AttnMatrix)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = ArchiveKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolution(&self, layer: LayerId) -> Result<Resolution> {
        self.layer_resolutions
            .get(&layer)
            .copied()
            .ok_or(Error::MissingArchiveEntry {
                step: 0,
                layer: layer.0,
                module: 0,
            })
    }

    /// Number of cross-attention modules `A` in `layer`.
    pub fn modules(&self, layer: LayerId) -> Result<u32> {
        self.modules_per_layer
            .get(&layer)
            .copied()
            .ok_or(Error::MissingArchiveEntry {
                step: 0,
                layer: layer.0,
                module: 0,
            })
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.layer_resolutions.keys().copied()
    }

    pub fn layer_resolutions(&self) -> &BTreeMap<LayerId, Resolution> {
        &self.layer_resolutions
    }

    pub fn modules_per_layer(&self) -> &BTreeMap<LayerId, u32> {
        &self.modules_per_layer
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// Distinct step indices present, ascending.
    pub fn steps(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.entries.keys().map(|k| k.step).collect();
        set.into_iter().collect()
    }

    /// Content hash over every key and value, in key order.
    pub fn content_hash(&self) -> String {
        let mut flat = Vec::new();
        for (k, m) in &self.entries {
            flat.extend([k.step as f32, k.layer.0 as f32, k.module as f32]);
            flat.extend_from_slice(m.data());
        }
        crate::tensor::hash_f32(&flat)
    }
}

/// Records conditional-branch attention into an [`AttentionArchive`].
///
/// A detached recorder ignores every observation.
#[derive(Debug)]
pub struct Recorder {
    archive: AttentionArchive,
    special: BTreeSet<usize>,
    active: bool,
    error: Option<Error>,
}

/// Binds a recorder to a backbone's cross-attention sites.
pub fn attach_recorder(
    backbone: &dyn DenoisingBackbone,
    special_indices: BTreeSet<usize>,
) -> Result<Recorder> {
    Ok(Recorder {
        archive: AttentionArchive::for_backbone(backbone.descriptor())?,
        special: special_indices,
        active: true,
        error: None,
    })
}

impl Recorder {
    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn detach(&mut self) {
        self.active = false;
    }

    pub fn archive(&self) -> &AttentionArchive {
        &self.archive
    }

    pub fn finish(self) -> Result<AttentionArchive> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.archive),
        }
    }
}

impl StepHooks for Recorder {
    fn wants_attention(&self) -> bool {
        self.active
    }

    fn observe_attention(
        &mut self,
        step: usize,
        site: SiteId,
        stage: AttnStage,
        probs: &AttnMatrix,
    ) {
        if !self.active || stage != AttnStage::Softmax || self.error.is_some() {
            return;
        }
        let result = exclude_and_renormalize(probs, &self.special).and_then(|m| {
            self.archive
                .insert(ArchiveKey::new(step, site.layer, site.module), m)
        });
        if let Err(e) = result {
            self.error = Some(e);
        }
    }
}

/// Runs a full sampling pass at control scale 1 and archives the
/// conditional-branch attention of every site at every step.
pub fn capture_pass(
    backbone: &dyn DenoisingBackbone,
    sampler: &SamplerConfig,
    prompt_embedding: &TextEmbedding,
    uncond_embedding: &TextEmbedding,
    condition: &ConditionInput,
    special_indices: BTreeSet<usize>,
    initial_noise: &Feature,
) -> Result<(AttentionArchive, Feature)> {
    let mut recorder = attach_recorder(backbone, special_indices)?;
    let latent = ddim_sample(
        backbone,
        sampler,
        prompt_embedding,
        uncond_embedding,
        condition,
        initial_noise,
        &mut recorder,
    )?;
    Ok((recorder.finish()?, latent))
}
