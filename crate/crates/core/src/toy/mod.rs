//! A miniature, untrained latent-diffusion stack: hash-seeded text
//! embedder, UNet-style denoiser with cross-attention and a ControlNet-style
//! branch, all deterministic from a single weight seed.
//!
//! Layout for `N = channels.len()` levels:
//!
//! ```text
//! encoder   level 0 … N-1, downsampling between levels, skip s_i per level
//! middle    res → cross-attn × A → res            (+ α_mid ⊙ cn_mid)
//! decoder   D_l for l = 1 … N at level N-l:
//!           h ← D_l(h + s + α_l ⊙ cn), D_1 has no cross-attention,
//!           upsample after every block but the last
//! ```

mod ops;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    AttnStage, BackboneDescriptor, BiasSpace, ControlSlotInfo, DenoisingBackbone, LayerId, SiteId,
    SiteInfo, StepContext, StepHooks, TextEmbedding,
};
use crate::bias::apply_bias_in_place;
use crate::condition::ConditionInput;
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::modulation::merge;
use crate::prompt::{Tokenizer, ToyTokenizer};
use crate::rng;
use crate::tensor::{AttnMatrix, Feature, Resolution};

use ops::{Conv3, Linear};

fn default_latent_channels() -> usize {
    4
}
fn default_latent_size() -> [usize; 2] {
    [32, 32]
}
fn default_channels() -> Vec<usize> {
    vec![16, 24, 32]
}
fn default_one() -> usize {
    1
}
fn default_heads() -> usize {
    2
}
fn default_head_dim() -> usize {
    8
}
fn default_token_dim() -> usize {
    32
}
fn default_context_len() -> usize {
    24
}
fn default_piece_len() -> usize {
    5
}
fn default_time_dim() -> usize {
    32
}
fn default_upscale() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    /// `[height, width]` of the latent.
    #[serde(default = "default_latent_size")]
    pub latent_size: [usize; 2],
    /// Channel width per level; its length is the decoder block count `N`.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Cross-attention modules per attention layer (`A`).
    #[serde(default = "default_one")]
    pub attention_modules: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_token_dim")]
    pub token_dim: usize,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    #[serde(default = "default_piece_len")]
    pub max_piece_len: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default)]
    pub weight_seed: u64,
    /// Nearest-neighbour upscale applied when decoding latents to RGB.
    #[serde(default = "default_upscale")]
    pub image_upscale: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let n = self.channels.len();
        if n < 2 {
            return bad(format!("need at least 2 decoder blocks, got {n}"));
        }
        if self.channels.contains(&0) || self.latent_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.attention_modules == 0 {
            return bad("attention_modules must be at least 1".into());
        }
        if self.heads == 0 || self.head_dim == 0 || self.token_dim == 0 {
            return bad("heads, head_dim and token_dim must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even and at least 2".into());
        }
        if self.image_upscale == 0 {
            return bad("image_upscale must be positive".into());
        }
        let div = 1 << (n - 1);
        let [h, w] = self.latent_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return bad(format!(
                "latent size {h}x{w} must be positive multiples of {div}"
            ));
        }
        ToyTokenizer::new(self.context_len, self.max_piece_len)?;
        Ok(())
    }

    pub fn decoder_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn latent_resolution(&self) -> Resolution {
        Resolution::new(self.latent_size[0], self.latent_size[1])
    }

    /// Spatial size at encoder level `i`.
    pub fn level_resolution(&self, level: usize) -> Resolution {
        let [h, w] = self.latent_size;
        Resolution::new(h >> level, w >> level)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv3,
    conv2: Conv3,
    time: Linear,
    shortcut: Option<Linear>,
}

impl ResBlock {
    fn seeded(seed: u64, name: &str, in_ch: usize, out_ch: usize, time_dim: usize) -> Self {
        Self {
            conv1: Conv3::seeded(seed, &format!("{name}/conv1"), in_ch, out_ch, 1.0),
            conv2: Conv3::seeded(seed, &format!("{name}/conv2"), out_ch, out_ch, 0.5),
            time: Linear::seeded(seed, &format!("{name}/time"), time_dim, out_ch, 0.5),
            shortcut: (in_ch != out_ch)
                .then(|| Linear::seeded(seed, &format!("{name}/skip"), in_ch, out_ch, 1.0)),
        }
    }

    fn forward(&self, x: &Feature, temb: &[f32]) -> Feature {
        let mut h = self.conv1.forward(&ops::silu_feature(&ops::pixel_norm(x)));
        let t = self.time.forward(temb);
        for (c, &shift) in t.iter().enumerate() {
            h.plane_mut(c).iter_mut().for_each(|v| *v += shift);
        }
        let h = self.conv2.forward(&ops::silu_feature(&ops::pixel_norm(&h)));
        let mut out = match &self.shortcut {
            Some(s) => s.forward_pixels(x),
            None => x.clone(),
        };
        ops::add_assign(&mut out, &h);
        out
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    site: SiteId,
    heads: usize,
    head_dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    fn seeded(seed: u64, site: SiteId, channels: usize, config: &BackboneConfig) -> Self {
        let name = format!("attn/{}/{}", site.layer, site.module);
        let inner = config.heads * config.head_dim;
        Self {
            site,
            heads: config.heads,
            head_dim: config.head_dim,
            q: Linear::seeded(seed, &format!("{name}/q"), channels, inner, 1.0),
            // sharper-than-uniform attention at init
            k: Linear::seeded(seed, &format!("{name}/k"), config.token_dim, inner, 2.0),
            v: Linear::seeded(seed, &format!("{name}/v"), config.token_dim, inner, 1.0),
            out: Linear::seeded(seed, &format!("{name}/o"), inner, channels, 0.5),
        }
    }

    fn forward(
        &self,
        x: &Feature,
        text: &TextEmbedding,
        step: usize,
        hooks: &mut dyn StepHooks,
    ) -> Result<Feature> {
        let res = x.resolution();
        let n = res.area();
        let tokens = text.tokens;
        let inner = self.heads * self.head_dim;
        let q = self.q.forward_pixels(&ops::pixel_norm(x));
        let keys: Vec<Vec<f32>> = (0..tokens).map(|j| self.k.forward(text.token(j))).collect();
        let values: Vec<Vec<f32>> = (0..tokens).map(|j| self.v.forward(text.token(j))).collect();

        // owned copy: observation below needs `hooks` mutably
        let bias = hooks
            .attention_bias(step, self.site)
            .map(|b| (b.grid.clone(), b.target_indices.clone(), b.space));
        let observe = hooks.wants_attention();
        let scale = 1.0 / (self.head_dim as f32).sqrt();

        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let lo = head * self.head_dim;
            let mut m = AttnMatrix::zeros(n, tokens);
            for p in 0..n {
                let row = m.row_mut(p);
                for (j, key) in keys.iter().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..self.head_dim {
                        dot += q.plane(lo + d)[p] * key[lo + d];
                    }
                    row[j] = dot * scale;
                }
            }
            if let Some((grid, targets, BiasSpace::Logit)) = &bias {
                apply_bias_in_place(&mut m, grid, targets)?;
            }
            for p in 0..n {
                softmax_in_place(m.row_mut(p));
            }
            probs.push(m);
        }
        if observe {
            hooks.observe_attention(step, self.site, AttnStage::Softmax, &head_mean(&probs));
        }
        if let Some((grid, targets, BiasSpace::Prob)) = &bias {
            for m in &mut probs {
                apply_bias_in_place(m, grid, targets)?;
            }
        }
        if observe {
            hooks.observe_attention(step, self.site, AttnStage::Applied, &head_mean(&probs));
        }

        let mut mixed = Feature::zeros(inner, res);
        for (head, m) in probs.iter().enumerate() {
            for d in 0..self.head_dim {
                let ch = head * self.head_dim + d;
                let plane = mixed.plane_mut(ch);
                for (p, slot) in plane.iter_mut().enumerate() {
                    *slot = m.row(p).iter().zip(&values).map(|(&w, v)| w * v[ch]).sum();
                }
            }
        }
        let mut out = x.clone();
        ops::add_assign(&mut out, &self.out.forward_pixels(&mixed));
        Ok(out)
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn head_mean(probs: &[AttnMatrix]) -> AttnMatrix {
    let mut out = probs[0].clone();
    for m in &probs[1..] {
        out.data_mut()
            .iter_mut()
            .zip(m.data())
            .for_each(|(a, &b)| *a += b);
    }
    let k = 1.0 / probs.len() as f32;
    out.data_mut().iter_mut().for_each(|v| *v *= k);
    out
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    layer: LayerId,
    level: usize,
    res: ResBlock,
    attention: Vec<CrossAttention>,
    up: Option<Linear>,
}

#[derive(Debug, Clone)]
struct ControlBranch {
    hint1: Conv3,
    hint2: Conv3,
    conv_in: Conv3,
    levels: Vec<ResBlock>,
    zero_convs: Vec<Linear>,
    mid: ResBlock,
    mid_zero: Linear,
}

/// Control features: one per encoder level plus the middle-block residual.
struct ControlFeatures {
    levels: Vec<Feature>,
    mid: Feature,
}

/// The toy denoiser. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: BackboneConfig,
    descriptor: BackboneDescriptor,
    tokenizer: ToyTokenizer,
    time1: Linear,
    time2: Linear,
    conv_in: Conv3,
    encoder: Vec<ResBlock>,
    mid_res1: ResBlock,
    mid_attention: Vec<CrossAttention>,
    mid_res2: ResBlock,
    decoder: Vec<DecoderBlock>,
    conv_out: Conv3,
    control: ControlBranch,
    rgb: Vec<f32>,
}

/// Builds the toy backbone with weights drawn from `config.weight_seed`.
pub fn build_backbone(config: &BackboneConfig) -> Result<ToyBackbone> {
    config.validate()?;
    let seed = config.weight_seed;
    let ch = &config.channels;
    let n = ch.len();
    let td = config.time_dim;
    let a = config.attention_modules as u32;
    let deepest = n - 1;

    let encoder = (0..n)
        .map(|i| {
            let in_ch = if i == 0 { ch[0] } else { ch[i - 1] };
            ResBlock::seeded(seed, &format!("enc/{i}"), in_ch, ch[i], td)
        })
        .collect();

    let mid_site = |m: u32| SiteId {
        layer: LayerId::MIDDLE,
        module: m,
    };
    let mid_attention = (1..=a)
        .map(|m| CrossAttention::seeded(seed, mid_site(m), ch[deepest], config))
        .collect();

    let decoder = (1..=n)
        .map(|l| {
            let level = n - l;
            let layer = LayerId::decoder(l as u32);
            let attention = if l == 1 {
                Vec::new()
            } else {
                (1..=a)
                    .map(|m| {
                        CrossAttention::seeded(seed, SiteId { layer, module: m }, ch[level], config)
                    })
                    .collect()
            };
            DecoderBlock {
                layer,
                level,
                res: ResBlock::seeded(seed, &format!("dec/{l}"), ch[level], ch[level], td),
                attention,
                up: (level > 0).then(|| {
                    Linear::seeded(seed, &format!("dec/{l}/up"), ch[level], ch[level - 1], 1.0)
                }),
            }
        })
        .collect::<Vec<_>>();

    let control = ControlBranch {
        hint1: Conv3::seeded(seed, "cn/hint1", 3, ch[0], 1.0),
        hint2: Conv3::seeded(seed, "cn/hint2", ch[0], ch[0], 1.0),
        conv_in: Conv3::seeded(seed, "cn/conv_in", config.latent_channels, ch[0], 1.0),
        levels: (0..n)
            .map(|i| {
                let in_ch = if i == 0 { ch[0] } else { ch[i - 1] };
                ResBlock::seeded(seed, &format!("cn/enc/{i}"), in_ch, ch[i], td)
            })
            .collect(),
        zero_convs: (0..n)
            .map(|i| Linear::seeded(seed, &format!("cn/zero/{i}"), ch[i], ch[i], 0.5))
            .collect(),
        mid: ResBlock::seeded(seed, "cn/mid", ch[deepest], ch[deepest], td),
        mid_zero: Linear::seeded(seed, "cn/mid_zero", ch[deepest], ch[deepest], 0.5),
    };

    let mut sites = Vec::new();
    let mut slots = Vec::new();
    let deep_res = config.level_resolution(deepest);
    for m in 1..=a {
        sites.push(SiteInfo {
            site: mid_site(m),
            resolution: deep_res,
        });
    }
    slots.push(ControlSlotInfo {
        layer: LayerId::MIDDLE,
        resolution: deep_res,
        has_cross_attention: true,
    });
    for block in &decoder {
        let res = config.level_resolution(block.level);
        for att in &block.attention {
            sites.push(SiteInfo {
                site: att.site,
                resolution: res,
            });
        }
        slots.push(ControlSlotInfo {
            layer: block.layer,
            resolution: res,
            has_cross_attention: !block.attention.is_empty(),
        });
    }

    let descriptor = BackboneDescriptor {
        name: "toy-unet-controlnet".into(),
        latent_channels: config.latent_channels,
        latent_resolution: config.latent_resolution(),
        token_count: config.context_len,
        token_dim: config.token_dim,
        condition_resolution: Resolution::new(
            config.latent_size[0] * config.image_upscale,
            config.latent_size[1] * config.image_upscale,
        ),
        sites,
        control_slots: slots,
    };

    Ok(ToyBackbone {
        tokenizer: ToyTokenizer::new(config.context_len, config.max_piece_len)?,
        time1: Linear::seeded(seed, "time/1", td, td, 1.0),
        time2: Linear::seeded(seed, "time/2", td, td, 1.0),
        conv_in: Conv3::seeded(seed, "conv_in", config.latent_channels, ch[0], 1.0),
        encoder,
        mid_res1: ResBlock::seeded(seed, "mid/res1", ch[deepest], ch[deepest], td),
        mid_attention,
        mid_res2: ResBlock::seeded(seed, "mid/res2", ch[deepest], ch[deepest], td),
        decoder,
        conv_out: Conv3::seeded(seed, "conv_out", ch[0], config.latent_channels, 0.3),
        control,
        rgb: rng::normal_vec(
            seed,
            "decode/rgb",
            3 * config.latent_channels,
            1.0 / (config.latent_channels as f32).sqrt(),
        ),
        descriptor,
        config: config.clone(),
    })
}

impl ToyBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn time_embedding(&self, t: f32) -> Vec<f32> {
        let e = ops::timestep_embedding(t, self.config.time_dim);
        let h: Vec<f32> = self.time1.forward(&e).into_iter().map(ops::silu).collect();
        self.time2.forward(&h).into_iter().map(ops::silu).collect()
    }

    /// ControlNet outputs for every encoder level, then the middle block.
    pub fn control_branch_outputs(
        &self,
        latent: &Feature,
        condition: &ConditionInput,
        timestep: f32,
    ) -> Result<Vec<Feature>> {
        let temb = self.time_embedding(timestep);
        let cn = self.control_features(latent, condition, &temb)?;
        let mut out = cn.levels;
        out.push(cn.mid);
        Ok(out)
    }

    fn control_features(
        &self,
        latent: &Feature,
        condition: &ConditionInput,
        temb: &[f32],
    ) -> Result<ControlFeatures> {
        let (fy, fx) = condition.factor_for(self.config.latent_resolution())?;
        let hint = ops::avg_pool(&condition.image, fy, fx);
        let hint = self
            .control
            .hint2
            .forward(&ops::silu_feature(&self.control.hint1.forward(&hint)));
        let mut h = self.control.conv_in.forward(latent);
        ops::add_assign(&mut h, &hint);
        let last = self.control.levels.len() - 1;
        let mut levels = Vec::with_capacity(last + 1);
        for (i, block) in self.control.levels.iter().enumerate() {
            if i > 0 {
                h = ops::downsample(&h);
            }
            h = block.forward(&h, temb);
            levels.push(self.control.zero_convs[i].forward_pixels(&h));
        }
        let mid = self
            .control
            .mid_zero
            .forward_pixels(&self.control.mid.forward(&h, temb));
        Ok(ControlFeatures { levels, mid })
    }

    /// Projects a latent to RGB through a fixed linear map.
    fn rgb_decode(&self, latent: &Feature) -> Result<RgbImage> {
        let c = self.config.latent_channels;
        if latent.channels() != c {
            return Err(Error::shape(c, latent.channels()));
        }
        let res = latent.resolution();
        let mut img = RgbImage::new(res.width, res.height, [0; 3]);
        for p in 0..res.area() {
            let px = [0, 1, 2].map(|k| {
                let v: f32 = (0..c)
                    .map(|ch| self.rgb[k * c + ch] * latent.plane(ch)[p])
                    .sum();
                (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put(p % res.width, p / res.width, px);
        }
        Ok(img.upscale_nearest(self.config.image_upscale))
    }
}

impl DenoisingBackbone for ToyBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    /// Each token id maps to a hash-seeded vector; positions add a second
    /// seeded vector.
    fn embed_prompt(&self, text: &str) -> Result<TextEmbedding> {
        let enc = self.tokenizer.encode(text);
        let dim = self.config.token_dim;
        let seed = self.config.weight_seed;
        let mut data = Vec::with_capacity(enc.len() * dim);
        for (pos, id) in enc.ids.iter().enumerate() {
            let tok = rng::normal_vec(seed, &format!("embed/token/{id}"), dim, 1.0);
            let posv = rng::normal_vec(seed, &format!("embed/pos/{pos}"), dim, 0.3);
            data.extend(tok.iter().zip(&posv).map(|(a, b)| a + b));
        }
        Ok(TextEmbedding {
            tokens: enc.len(),
            dim,
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
        let desc = &self.descriptor;
        if latent.channels() != desc.latent_channels
            || latent.resolution() != desc.latent_resolution
        {
            return Err(Error::shape(
                format!("{}x{}", desc.latent_channels, desc.latent_resolution),
                latent.shape_string(),
            ));
        }
        if text.tokens != desc.token_count || text.dim != desc.token_dim {
            return Err(Error::shape(
                format!("{}x{}", desc.token_count, desc.token_dim),
                format!("{}x{}", text.tokens, text.dim),
            ));
        }
        let t = step.index;
        let temb = self.time_embedding(step.timestep);
        let cn = self.control_features(latent, condition, &temb)?;

        let mut h = self.conv_in.forward(latent);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = ops::downsample(&h);
            }
            h = block.forward(&h, temb.as_slice());
            skips.push(h.clone());
        }

        h = self.mid_res1.forward(&h, &temb);
        for att in &self.mid_attention {
            h = att.forward(&h, text, t, hooks)?;
        }
        h = self.mid_res2.forward(&h, &temb);
        h = merge_with(&h, None, &cn.mid, hooks, t, LayerId::MIDDLE)?;

        for block in &self.decoder {
            let level = block.level;
            h = merge_with(
                &h,
                Some(&skips[level]),
                &cn.levels[level],
                hooks,
                t,
                block.layer,
            )?;
            h = block.res.forward(&h, &temb);
            for att in &block.attention {
                h = att.forward(&h, text, t, hooks)?;
            }
            if let Some(up) = &block.up {
                h = up.forward_pixels(&ops::upsample(&h));
            }
        }
        Ok(self
            .conv_out
            .forward(&ops::silu_feature(&ops::pixel_norm(&h))))
    }

    fn decode_latent(&self, latent: &Feature) -> Result<RgbImage> {
        self.rgb_decode(latent)
    }
}

fn merge_with(
    h: &Feature,
    skip: Option<&Feature>,
    control: &Feature,
    hooks: &dyn StepHooks,
    step: usize,
    layer: LayerId,
) -> Result<Feature> {
    merge(h, skip, control, hooks.control_scale(step, layer))
}

/// Layers of the toy backbone that carry cross-attention.
pub fn attention_layers(config: &BackboneConfig) -> BTreeSet<LayerId> {
    std::iter::once(LayerId::MIDDLE)
        .chain((2..=config.decoder_blocks() as u32).map(LayerId::decoder))
        .collect()
}
