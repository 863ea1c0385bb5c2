//! Small dense building blocks for the toy backbone.

use crate::rng;
use crate::tensor::{Feature, Resolution};

/// Dense layer, `y = W x + b` with `W` stored `[out × in]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    pub fn seeded(seed: u64, name: &str, in_dim: usize, out_dim: usize, gain: f32) -> Self {
        let scale = gain / (in_dim as f32).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: rng::normal_vec(seed, &format!("{name}/w"), in_dim * out_dim, scale),
            bias: rng::normal_vec(seed, &format!("{name}/b"), out_dim, 0.02),
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>())
            .collect()
    }

    /// Applies the layer at every pixel of a `[in × H × W]` feature.
    pub fn forward_pixels(&self, x: &Feature) -> Feature {
        debug_assert_eq!(x.channels(), self.in_dim);
        let res = x.resolution();
        let n = res.area();
        let mut out = Feature::zeros(self.out_dim, res);
        for o in 0..self.out_dim {
            let plane = out.plane_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_dim {
                let w = self.weight[o * self.in_dim + i];
                let src = x.plane(i);
                for p in 0..n {
                    plane[p] += w * src[p];
                }
            }
        }
        out
    }
}

/// 3×3 convolution with zero padding, weights `[out × in × 3 × 3]`.
#[derive(Debug, Clone)]
pub(crate) struct Conv3 {
    in_ch: usize,
    out_ch: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv3 {
    pub fn seeded(seed: u64, name: &str, in_ch: usize, out_ch: usize, gain: f32) -> Self {
        let scale = gain / ((in_ch * 9) as f32).sqrt();
        Self {
            in_ch,
            out_ch,
            weight: rng::normal_vec(seed, &format!("{name}/w"), out_ch * in_ch * 9, scale),
            bias: rng::normal_vec(seed, &format!("{name}/b"), out_ch, 0.02),
        }
    }

    pub fn forward(&self, x: &Feature) -> Feature {
        debug_assert_eq!(x.channels(), self.in_ch);
        let Resolution { height, width } = x.resolution();
        let pw = width + 2;
        let mut padded = vec![0f32; self.in_ch * (height + 2) * pw];
        for i in 0..self.in_ch {
            let src = x.plane(i);
            let dst = &mut padded[i * (height + 2) * pw..(i + 1) * (height + 2) * pw];
            for y in 0..height {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + width]
                    .copy_from_slice(&src[y * width..(y + 1) * width]);
            }
        }
        let mut out = Feature::zeros(self.out_ch, x.resolution());
        for o in 0..self.out_ch {
            let plane = out.plane_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let pad = &padded[i * (height + 2) * pw..(i + 1) * (height + 2) * pw];
                let k = &self.weight[(o * self.in_ch + i) * 9..(o * self.in_ch + i + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = k[ky * 3 + kx];
                        for y in 0..height {
                            let row = &mut plane[y * width..(y + 1) * width];
                            let src = &pad[(y + ky) * pw + kx..(y + ky) * pw + kx + width];
                            row.iter_mut().zip(src).for_each(|(r, &s)| *r += w * s);
                        }
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_feature(x: &Feature) -> Feature {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    out
}

/// Normalizes each pixel's channel vector to zero mean, unit variance.
pub(crate) fn pixel_norm(x: &Feature) -> Feature {
    let c = x.channels();
    let n = x.resolution().area();
    let mut out = x.clone();
    let data = out.data_mut();
    for p in 0..n {
        let mean = (0..c).map(|ch| data[ch * n + p]).sum::<f32>() / c as f32;
        let var = (0..c)
            .map(|ch| (data[ch * n + p] - mean).powi(2))
            .sum::<f32>()
            / c as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for ch in 0..c {
            data[ch * n + p] = (data[ch * n + p] - mean) * inv;
        }
    }
    out
}

/// 2×2 average pooling.
pub(crate) fn downsample(x: &Feature) -> Feature {
    avg_pool(x, 2, 2)
}

pub(crate) fn avg_pool(x: &Feature, fy: usize, fx: usize) -> Feature {
    let res = x.resolution();
    let out_res = Resolution::new(res.height / fy, res.width / fx);
    let mut out = Feature::zeros(x.channels(), out_res);
    let norm = 1.0 / (fy * fx) as f32;
    for c in 0..x.channels() {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..out_res.height {
            for xx in 0..out_res.width {
                let mut s = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += src[(y * fy + dy) * res.width + xx * fx + dx];
                    }
                }
                dst[y * out_res.width + xx] = s * norm;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample(x: &Feature) -> Feature {
    let res = x.resolution();
    let out_res = Resolution::new(res.height * 2, res.width * 2);
    let mut out = Feature::zeros(x.channels(), out_res);
    for c in 0..x.channels() {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..out_res.height {
            for xx in 0..out_res.width {
                dst[y * out_res.width + xx] = src[(y / 2) * res.width + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn add_assign(x: &mut Feature, other: &Feature) {
    x.data_mut()
        .iter_mut()
        .zip(other.data())
        .for_each(|(a, &b)| *a += b);
}

/// Sinusoidal timestep embedding, `[cos(t·f_k) | sin(t·f_k)]`.
pub(crate) fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = f64::from(t) * freq;
        out[k] = arg.cos() as f32;
        out[half + k] = arg.sin() as f32;
    }
    out
}
