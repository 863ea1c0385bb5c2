//! Control-scale masks from the attention of non-conflicting tokens.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attention::{ArchiveKey, AttentionArchive};
use crate::backbone::{ControlSlotInfo, LayerId};
use crate::error::{Error, Result};
use crate::tensor::{Grid, Resolution};

/// How per-step masks map onto target-pass steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTimePooling {
    /// The mask from auxiliary step `t` is applied at target step `t`.
    #[default]
    Matched,
    /// Every step uses the mean mask over all auxiliary steps.
    Mean,
}

/// Unclamped `(1 / (N·A)) Σ_n Σ_a M_(l,a)[t_n]` for one layer and step.
pub fn aggregate_token_maps(
    archive: &AttentionArchive,
    indices: &BTreeSet<usize>,
    layer: LayerId,
    step: usize,
) -> Result<Grid> {
    if indices.is_empty() {
        return Err(Error::EmptyTokenSet);
    }
    let res = archive.resolution(layer)?;
    let modules = archive.modules(layer)?;
    let tokens = archive.token_count();
    if let Some(&bad) = indices.iter().find(|&&i| i >= tokens) {
        return Err(Error::TargetIndexOutOfRange {
            index: bad,
            len: tokens,
        });
    }
    let mut acc = vec![0f64; res.area()];
    for module in 1..=modules {
        let map = archive.get(ArchiveKey::new(step, layer, module))?;
        for (p, slot) in acc.iter_mut().enumerate() {
            let row = map.row(p);
            *slot += indices.iter().map(|&t| f64::from(row[t])).sum::<f64>();
        }
    }
    let norm = (indices.len() * modules as usize) as f64;
    Grid::new(res, acc.into_iter().map(|v| (v / norm) as f32).collect())
}

/// Control-scale mask `α_l` for one layer and step, clamped to `[0, 1]`.
pub fn compute_control_scale(
    archive: &AttentionArchive,
    non_conflicting: &BTreeSet<usize>,
    layer: LayerId,
    step: usize,
) -> Result<Grid> {
    let mut grid = aggregate_token_maps(archive, non_conflicting, layer, step)?;
    grid.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(grid)
}

/// Bilinear resize with half-pixel centers (align-corners off).
///
/// Source coordinates below zero are clamped to the first texel, as in the
/// common tensor-library convention.
pub fn resize_mask(mask: &Grid, target: Resolution) -> Result<Grid> {
    if target.height == 0 || target.width == 0 {
        return Err(Error::ZeroTargetDimension);
    }
    let src = mask.resolution();
    if src == target {
        return Ok(mask.clone());
    }
    let axis = |out: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let scale = src_len as f32 / dst_len as f32;
        let x = ((out as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, x - i0 as f32)
    };
    let mut out = Vec::with_capacity(target.area());
    for y in 0..target.height {
        let (y0, y1, fy) = axis(y, src.height, target.height);
        for x in 0..target.width {
            let (x0, x1, fx) = axis(x, src.width, target.width);
            let top = lerp(mask.get(y0, x0), mask.get(y0, x1), fx);
            let bottom = lerp(mask.get(y1, x0), mask.get(y1, x1), fx);
            out.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
        }
    }
    Grid::new(target, out)
}

// `a + (b - a)·t` reproduces constants exactly.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Per-step, per-layer control-scale masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlScaleStack {
    masks: BTreeMap<(usize, LayerId), Grid>,
    fallback_layers: BTreeSet<LayerId>,
}

impl ControlScaleStack {
    pub fn new() -> Self {
        Self {
            masks: BTreeMap::new(),
            fallback_layers: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, step: usize, layer: LayerId, mask: Grid) {
        self.masks.insert((step, layer), mask);
    }

    pub fn mark_fallback(&mut self, layer: LayerId) {
        self.fallback_layers.insert(layer);
    }

    pub fn get(&self, step: usize, layer: LayerId) -> Option<&Grid> {
        self.masks.get(&(step, layer))
    }

    pub fn masks(&self) -> &BTreeMap<(usize, LayerId), Grid> {
        &self.masks
    }

    /// Layers whose mask was borrowed from the middle block.
    pub fn fallback_layers(&self) -> &BTreeSet<LayerId> {
        &self.fallback_layers
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn content_hash(&self) -> String {
        let mut flat = Vec::new();
        for ((step, layer), g) in &self.masks {
            flat.extend([*step as f32, layer.0 as f32]);
            flat.extend_from_slice(g.data());
        }
        flat.extend(self.fallback_layers.iter().map(|l| -(l.0 as f32)));
        crate::tensor::hash_f32(&flat)
    }
}

impl Default for ControlScaleStack {
    fn default() -> Self {
        Self::new()
    }
}

/// Mask for a block without cross-attention: the middle-block mask of the
/// same step, resized to `target`.
pub fn fallback_mask(stack: &ControlScaleStack, step: usize, target: Resolution) -> Result<Grid> {
    let mid = stack
        .get(step, LayerId::MIDDLE)
        .ok_or(Error::MissingMiddleBlockMask(step))?;
    resize_mask(mid, target)
}

/// Builds masks for every control slot at every archived step.
///
/// Slots with cross-attention use their own maps; the others fall back to
/// the middle block.
pub fn build_control_stack(
    archive: &AttentionArchive,
    non_conflicting: &BTreeSet<usize>,
    slots: &[ControlSlotInfo],
    pooling: MaskTimePooling,
) -> Result<ControlScaleStack> {
    let steps = archive.steps();
    let mut stack = ControlScaleStack::new();
    for &step in &steps {
        for slot in slots.iter().filter(|s| s.has_cross_attention) {
            let mask = compute_control_scale(archive, non_conflicting, slot.layer, step)?;
            stack.insert(step, slot.layer, resize_mask(&mask, slot.resolution)?);
        }
        for slot in slots.iter().filter(|s| !s.has_cross_attention) {
            let mask = fallback_mask(&stack, step, slot.resolution)?;
            stack.insert(step, slot.layer, mask);
            stack.mark_fallback(slot.layer);
        }
    }
    if pooling == MaskTimePooling::Mean && !steps.is_empty() {
        let mut pooled = ControlScaleStack::new();
        pooled.fallback_layers = stack.fallback_layers.clone();
        for slot in slots {
            let mut acc = vec![0f64; slot.resolution.area()];
            for &step in &steps {
                let g = &stack.masks[&(step, slot.layer)];
                acc.iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &v)| *a += f64::from(v));
            }
            let mean = Grid::new(
                slot.resolution,
                acc.into_iter()
                    .map(|v| (v / steps.len() as f64) as f32)
                    .collect(),
            )?;
            for &step in &steps {
                pooled.insert(step, slot.layer, mean.clone());
            }
        }
        stack = pooled;
    }
    Ok(stack)
}
