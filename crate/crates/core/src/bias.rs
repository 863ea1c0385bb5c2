//! Cross-attention bias from conflicting-token attention.

use std::collections::{BTreeMap, BTreeSet};

use crate::attention::{ArchiveKey, AttentionArchive};
use crate::backbone::{LayerId, SiteId};
use crate::error::{Error, Result};
use crate::tensor::{AttnMatrix, Grid};

/// `β_(l,a) = (λ / N_tar) Σ_n M_(l,a)[t_n]` over the conflicting tokens.
///
/// Returns a zero grid when `conflicting` is empty.
pub fn compute_bias(
    archive: &AttentionArchive,
    conflicting: &BTreeSet<usize>,
    lambda: f32,
    n_tar: usize,
    site: SiteId,
    step: usize,
) -> Result<Grid> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::ValueOutOfRange {
            name: "lambda",
            value: f64::from(lambda),
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    let map = archive.get(ArchiveKey::new(step, site.layer, site.module))?;
    let res = archive.resolution(site.layer)?;
    if conflicting.is_empty() {
        return Ok(Grid::zeros(res));
    }
    if n_tar == 0 {
        return Err(Error::NonPositiveNTar);
    }
    if let Some(&bad) = conflicting.iter().find(|&&i| i >= map.cols()) {
        return Err(Error::TargetIndexOutOfRange {
            index: bad,
            len: map.cols(),
        });
    }
    let factor = f64::from(lambda) / n_tar as f64;
    let values = (0..map.rows())
        .map(|p| {
            let row = map.row(p);
            let sum: f64 = conflicting.iter().map(|&t| f64::from(row[t])).sum();
            (sum * factor) as f32
        })
        .collect();
    Grid::new(res, values)
}

/// Adds `bias` to every target column of `attention` in place.
///
/// Works on probabilities or logits alike; rows are never renormalized.
pub fn apply_bias_in_place(
    attention: &mut AttnMatrix,
    bias: &Grid,
    target_indices: &BTreeSet<usize>,
) -> Result<()> {
    if bias.data().len() != attention.rows() {
        return Err(Error::shape(attention.rows(), bias.data().len()));
    }
    if let Some(&bad) = target_indices.iter().find(|&&j| j >= attention.cols()) {
        return Err(Error::TargetIndexOutOfRange {
            index: bad,
            len: attention.cols(),
        });
    }
    for (r, &b) in bias.data().iter().enumerate() {
        let row = attention.row_mut(r);
        for &j in target_indices {
            row[j] += b;
        }
    }
    Ok(())
}

pub fn apply_bias(
    attention: &AttnMatrix,
    bias: &Grid,
    target_indices: &BTreeSet<usize>,
) -> Result<AttnMatrix> {
    let mut out = attention.clone();
    apply_bias_in_place(&mut out, bias, target_indices)?;
    Ok(out)
}

/// Per-(step, layer, module) biases with the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasStack {
    biases: BTreeMap<ArchiveKey, Grid>,
    lambda: f32,
    n_tar: usize,
}

impl BiasStack {
    pub fn from_parts(biases: BTreeMap<ArchiveKey, Grid>, lambda: f32, n_tar: usize) -> Self {
        Self {
            biases,
            lambda,
            n_tar,
        }
    }

    /// Computes a bias for every archived (step, site).
    pub fn build(
        archive: &AttentionArchive,
        conflicting: &BTreeSet<usize>,
        lambda: f32,
        n_tar: usize,
    ) -> Result<Self> {
        let mut biases = BTreeMap::new();
        for key in archive.keys() {
            let grid = compute_bias(archive, conflicting, lambda, n_tar, key.site(), key.step)?;
            biases.insert(key, grid);
        }
        let n_tar = if conflicting.is_empty() { 0 } else { n_tar };
        Ok(Self::from_parts(biases, lambda, n_tar))
    }

    pub fn get(&self, step: usize, site: SiteId) -> Option<&Grid> {
        self.biases
            .get(&ArchiveKey::new(step, site.layer, site.module))
    }

    pub fn biases(&self) -> &BTreeMap<ArchiveKey, Grid> {
        &self.biases
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn n_tar(&self) -> usize {
        self.n_tar
    }

    pub fn layers(&self) -> BTreeSet<LayerId> {
        self.biases.keys().map(|k| k.layer).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.biases
            .values()
            .all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn content_hash(&self) -> String {
        let mut flat = vec![self.lambda, self.n_tar as f32];
        for (k, g) in &self.biases {
            flat.extend([k.step as f32, k.layer.0 as f32, k.module as f32]);
            flat.extend_from_slice(g.data());
        }
        crate::tensor::hash_f32(&flat)
    }
}
