//! Spatial modulation of ControlNet features before the decoder merge.

use crate::backbone::ControlScale;
use crate::error::{Error, Result};
use crate::tensor::{Feature, Grid, Resolution};

/// Inputs to one decoder block: previous output, encoder skip and the
/// ControlNet feature for the same level.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub decoder_input: Feature,
    pub skip: Feature,
    pub control_feature: Feature,
}

/// `h + s + mask ⊙ h_cn`, with the mask broadcast over channels.
pub fn modulate_and_merge(bundle: &FeatureBundle, mask: &Grid) -> Result<Feature> {
    merge(
        &bundle.decoder_input,
        Some(&bundle.skip),
        &bundle.control_feature,
        ControlScale::Mask(mask),
    )
}

/// `h + s + c · h_cn` for a scalar `c`.
pub fn merge_scaled(bundle: &FeatureBundle, scale: f32) -> Result<Feature> {
    merge(
        &bundle.decoder_input,
        Some(&bundle.skip),
        &bundle.control_feature,
        ControlScale::Scalar(scale),
    )
}

/// Shared merge used by backbones: `h (+ s) + scale ⊙ h_cn`.
///
/// [`ControlScale::Disabled`] adds a zero control feature.
pub fn merge(
    h: &Feature,
    skip: Option<&Feature>,
    control: &Feature,
    scale: ControlScale<'_>,
) -> Result<Feature> {
    if !h.same_shape(control) {
        return Err(Error::shape(h.shape_string(), control.shape_string()));
    }
    if let Some(s) = skip {
        if !h.same_shape(s) {
            return Err(Error::shape(h.shape_string(), s.shape_string()));
        }
    }
    let res = h.resolution();
    if let ControlScale::Mask(m) = scale {
        if m.resolution() != res {
            return Err(Error::shape(res, m.resolution()));
        }
    }
    let n = res.area();
    let mut out = h.clone();
    for c in 0..h.channels() {
        let plane = out.plane_mut(c);
        if let Some(s) = skip {
            plane.iter_mut().zip(s.plane(c)).for_each(|(o, &v)| *o += v);
        }
        let cn = control.plane(c);
        match scale {
            ControlScale::Scalar(k) => {
                plane.iter_mut().zip(cn).for_each(|(o, &v)| *o += k * v);
            }
            ControlScale::Mask(m) => {
                for i in 0..n {
                    plane[i] += m.data()[i] * cn[i];
                }
            }
            ControlScale::Disabled => plane.iter_mut().for_each(|o| *o += 0.0),
        }
    }
    Ok(out)
}

/// A constant control-scale grid, as used by fixed-scale baselines.
pub fn fixed_scale_mask(value: f32, res: Resolution) -> Result<Grid> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::ValueOutOfRange {
            name: "control scale",
            value: f64::from(value),
            min: 0.0,
            max: 1.0,
        });
    }
    Ok(Grid::filled(res, value))
}
