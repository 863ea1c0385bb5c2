//! Pluggable image–prompt scoring.
//!
//! Metric models are not bundled; [`MeanIntensityScorer`] is a
//! deterministic stand-in that exercises the interface.

use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::image_io::RgbImage;

pub trait Scorer {
    fn name(&self) -> &str;

    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64, String>;
}

/// Mean pixel intensity in `[0, 1]`; ignores the prompt.
#[derive(Debug, Default, Clone, Copy)]
pub struct MeanIntensityScorer;

impl Scorer for MeanIntensityScorer {
    fn name(&self) -> &str {
        "mean_intensity"
    }

    fn score(&self, image: &RgbImage, _prompt: &str) -> Result<f64, String> {
        if image.data.is_empty() {
            return Err("empty image".into());
        }
        let sum: u64 = image.data.iter().map(|&b| u64::from(b)).sum();
        Ok(sum as f64 / (image.data.len() as f64 * 255.0))
    }
}

pub struct ScoreInput<'a> {
    pub job_id: &'a str,
    pub mode: &'a str,
    pub prompt: &'a str,
    pub image: &'a RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub job_id: String,
    pub mode: String,
    pub scorer: String,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Scores every input; a failing or panicking plugin call only marks its
/// own row.
pub fn score_results(inputs: &[ScoreInput<'_>], scorer: &dyn Scorer) -> Vec<ScoreRow> {
    inputs
        .iter()
        .map(|input| {
            let outcome =
                catch_unwind(AssertUnwindSafe(|| scorer.score(input.image, input.prompt)))
                    .unwrap_or_else(|_| Err("scorer panicked".into()));
            let (score, error) = match outcome {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e)),
            };
            ScoreRow {
                job_id: input.job_id.to_string(),
                mode: input.mode.to_string(),
                scorer: scorer.name().to_string(),
                score,
                error,
            }
        })
        .collect()
}
