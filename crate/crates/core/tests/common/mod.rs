#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semctl::attention::{ArchiveKey, AttentionArchive};
use semctl::backbone::{DenoisingBackbone, LayerId};
use semctl::condition::{ConditionInput, ConditionKind};
use semctl::pipeline::JobSpec;
use semctl::prompt::PromptSpec;
use semctl::tensor::{AttnMatrix, Grid, Resolution};
use semctl::toy::{build_backbone, BackboneConfig, ToyBackbone};

pub fn toy() -> &'static ToyBackbone {
    static TOY: OnceLock<ToyBackbone> = OnceLock::new();
    TOY.get_or_init(|| build_backbone(&BackboneConfig::default()).unwrap())
}

pub fn guitar_prompt() -> PromptSpec {
    PromptSpec {
        target_prompt: "a dog plushie is holding the guitar".into(),
        surrogate_prompt: "a man is holding the guitar".into(),
        non_conflicting_words: vec!["holding".into(), "guitar".into()],
        conflicting_words: vec!["man".into()],
        target_words: vec!["dog".into(), "plushie".into()],
    }
}

pub fn figure_condition() -> ConditionInput {
    let mut c = ConditionInput::synthetic_figure(toy().descriptor().condition_resolution);
    c.kind = ConditionKind::Pose;
    c
}

pub fn guitar_job(steps: usize) -> JobSpec {
    let mut job = JobSpec::new("guitar", guitar_prompt(), figure_condition());
    job.sampler.steps = steps;
    job.sampler.seed = 7;
    job
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A probability row from random logits.
pub fn random_simplex_row(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    let z: Vec<f64> = (0..len).map(|_| rng.gen_range(-4.0..4.0)).collect();
    softmax(&z).into_iter().map(|v| v as f32).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub struct RandomArchive {
    pub archive: AttentionArchive,
    pub layer: LayerId,
    pub res: Resolution,
    pub modules: u32,
    pub tokens: usize,
    pub steps: usize,
}

/// One layer, `steps` steps, simplex rows.
pub fn random_archive(
    rng: &mut impl Rng,
    max_tokens: usize,
    max_modules: u32,
    max_side: usize,
) -> RandomArchive {
    let tokens = rng.gen_range(1..=max_tokens);
    let modules = rng.gen_range(1..=max_modules);
    let res = Resolution::new(rng.gen_range(1..=max_side), rng.gen_range(1..=max_side));
    let steps = rng.gen_range(1..=2);
    let layer = LayerId::decoder(rng.gen_range(2..=3));
    let mut archive = AttentionArchive::new(
        BTreeMap::from([(layer, res)]),
        BTreeMap::from([(layer, modules)]),
        tokens,
    )
    .unwrap();
    for step in 0..steps {
        for module in 1..=modules {
            let data: Vec<f32> = (0..res.area())
                .flat_map(|_| random_simplex_row(rng, tokens))
                .collect();
            archive
                .insert(
                    ArchiveKey::new(step, layer, module),
                    AttnMatrix::new(res.area(), tokens, data).unwrap(),
                )
                .unwrap();
        }
    }
    RandomArchive {
        archive,
        layer,
        res,
        modules,
        tokens,
        steps,
    }
}

/// Non-empty random subset of `0..n`.
pub fn random_subset(rng: &mut impl Rng, n: usize) -> BTreeSet<usize> {
    loop {
        let s: BTreeSet<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        if !s.is_empty() {
            return s;
        }
    }
}

/// Five nested loops over (y, x, n, a) reading raw entry data.
pub fn oracle_alpha(
    archive: &AttentionArchive,
    tokens: &[usize],
    layer: LayerId,
    step: usize,
) -> Vec<f64> {
    let res = archive.resolution(layer).unwrap();
    let modules = archive.modules(layer).unwrap();
    let cols = archive.token_count();
    let mut out = vec![0.0; res.area()];
    for y in 0..res.height {
        for x in 0..res.width {
            let mut sum = 0.0f64;
            for &t in tokens {
                for a in 1..=modules {
                    let m = archive.get(ArchiveKey::new(step, layer, a)).unwrap();
                    sum += f64::from(m.data()[(y * res.width + x) * cols + t]);
                }
            }
            let v = sum / (tokens.len() as f64 * f64::from(modules));
            out[y * res.width + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

pub fn oracle_beta(
    archive: &AttentionArchive,
    tokens: &[usize],
    lambda: f64,
    n_tar: usize,
    key: ArchiveKey,
) -> Vec<f64> {
    let m = archive.get(key).unwrap();
    let cols = m.cols();
    (0..m.rows())
        .map(|p| {
            let s: f64 = tokens
                .iter()
                .map(|&t| f64::from(m.data()[p * cols + t]))
                .sum();
            lambda * s / n_tar as f64
        })
        .collect()
}

/// Half-pixel bilinear sampling written from the textbook formula.
pub fn oracle_bilinear(src: &Grid, th: usize, tw: usize) -> Vec<f64> {
    let (sh, sw) = (src.height(), src.width());
    let at = |y: usize, x: usize| f64::from(src.data()[y * sw + x]);
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        for j in 0..tw {
            let fy = ((i as f64 + 0.5) * sh as f64 / th as f64 - 0.5).max(0.0);
            let fx = ((j as f64 + 0.5) * sw as f64 / tw as f64 - 0.5).max(0.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - y).abs())
        .fold(0.0, f64::max)
}
