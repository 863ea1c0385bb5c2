//! Visual conditions (depth, edge and pose rasters).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::tensor::{Feature, Resolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    #[default]
    Depth,
    Edge,
    Pose,
    Other,
}

/// A three-channel condition raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub kind: ConditionKind,
    pub image: Feature,
}

impl ConditionInput {
    pub fn from_rgb(kind: ConditionKind, img: &RgbImage) -> Result<Self> {
        if img.width == 0 || img.height == 0 {
            return Err(Error::InvalidCondition("empty image".into()));
        }
        let res = Resolution::new(img.height, img.width);
        let n = res.area();
        let mut data = vec![0.0; 3 * n];
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = f32::from(px[c]) / 255.0;
            }
        }
        Ok(Self {
            kind,
            image: Feature::new(3, res, data)?,
        })
    }

    pub fn load_png(kind: ConditionKind, path: &Path) -> Result<Self> {
        Self::from_rgb(kind, &RgbImage::load_png(path)?)
    }

    pub fn to_rgb(&self) -> RgbImage {
        let res = self.image.resolution();
        let mut img = RgbImage::new(res.width, res.height, [0; 3]);
        let n = res.area();
        for i in 0..n {
            let px = [0, 1, 2]
                .map(|c| (self.image.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put(i % res.width, i / res.width, px);
        }
        img
    }

    /// An all-zero condition of the given size.
    pub fn blank(kind: ConditionKind, res: Resolution) -> Self {
        Self {
            kind,
            image: Feature::zeros(3, res),
        }
    }

    /// Integer downsampling factors onto `latent`, if the sizes divide.
    pub fn factor_for(&self, latent: Resolution) -> Result<(usize, usize)> {
        let res = self.image.resolution();
        if !res.height.is_multiple_of(latent.height) || !res.width.is_multiple_of(latent.width) {
            return Err(Error::InvalidCondition(format!(
                "condition {res} is not a multiple of latent {latent}"
            )));
        }
        Ok((res.height / latent.height, res.width / latent.width))
    }

    /// A stick figure holding a bar, drawn as a pose-like raster.
    pub fn synthetic_figure(res: Resolution) -> Self {
        let (h, w) = (res.height as f32, res.width as f32);
        let segments = [
            // torso, legs, arms, held object
            ((0.50, 0.30), (0.50, 0.62)),
            ((0.50, 0.62), (0.38, 0.92)),
            ((0.50, 0.62), (0.62, 0.92)),
            ((0.50, 0.38), (0.30, 0.52)),
            ((0.50, 0.38), (0.70, 0.50)),
            ((0.22, 0.60), (0.80, 0.42)),
        ];
        let head = ((0.50, 0.18), 0.09);
        let thickness = 0.035;
        let n = res.area();
        let mut data = vec![0.0; 3 * n];
        for y in 0..res.height {
            for x in 0..res.width {
                let p = ((x as f32 + 0.5) / w, (y as f32 + 0.5) / h);
                let d_head = dist(p, head.0) - head.1;
                let d_seg = segments
                    .iter()
                    .map(|&(a, b)| seg_dist(p, a, b))
                    .fold(f32::INFINITY, f32::min);
                let i = y * res.width + x;
                if d_head <= 0.0 {
                    data[i] = 1.0;
                    data[n + i] = 0.8;
                    data[2 * n + i] = 0.2;
                } else if d_seg <= thickness {
                    // warm limbs, cool object
                    data[i] = 0.9;
                    data[n + i] = 0.3;
                    data[2 * n + i] = 0.6;
                }
            }
        }
        Self {
            kind: ConditionKind::Pose,
            image: Feature::new(3, res, data).expect("sized"),
        }
    }

    /// A depth-like raster: a bright near blob over a vertical ramp.
    pub fn synthetic_depth(res: Resolution) -> Self {
        let n = res.area();
        let mut plane = vec![0.0; n];
        for y in 0..res.height {
            for x in 0..res.width {
                let p = (
                    (x as f32 + 0.5) / res.width as f32,
                    (y as f32 + 0.5) / res.height as f32,
                );
                let ramp = 0.15 + 0.25 * p.1;
                let blob = (1.0 - dist(p, (0.45, 0.55)) / 0.3).max(0.0);
                plane[y * res.width + x] = (ramp + 0.7 * blob).min(1.0);
            }
        }
        let data = plane.repeat(3);
        Self {
            kind: ConditionKind::Depth,
            image: Feature::new(3, res, data).expect("sized"),
        }
    }
}

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn seg_dist(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0);
    dist(p, (a.0 + t * ab.0, a.1 + t * ab.1))
}
