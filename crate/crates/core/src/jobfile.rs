//! Versioned JSON job files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "jobs": [{
//!     "id": "guitar",
//!     "target_prompt": "a dog plushie is holding the guitar",
//!     "surrogate_prompt": "a man is holding the guitar",
//!     "conflicting_words": ["man"],
//!     "target_words": ["dog", "plushie"],
//!     "condition": { "path": "pose.png", "kind": "pose" },
//!     "sampler": { "steps": 50, "guidance_scale": 7.5, "seed": 7 },
//!     "lambda": 3.0,
//!     "mode": "semantic_control"
//!   }]
//! }
//! ```
//!
//! Unknown fields are rejected. `non_conflicting_words` may be omitted, in
//! which case it is derived from the surrogate prompt by dropping
//! stopwords, `unrelated_words` and the conflicting words.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BiasSpace;
use crate::condition::{ConditionInput, ConditionKind};
use crate::error::{Error, Result};
use crate::mask::MaskTimePooling;
use crate::pipeline::{JobSpec, Mode, DEFAULT_LAMBDA};
use crate::prompt::{default_stopwords, derive_non_conflicting_words, PromptSpec};
use crate::sampler::SamplerConfig;

pub const JOBFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    /// PNG path, relative to the job file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub kind: ConditionKind,
}

fn default_lambda() -> f32 {
    DEFAULT_LAMBDA
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobEntry {
    pub id: String,
    pub target_prompt: String,
    pub surrogate_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_conflicting_words: Option<Vec<String>>,
    #[serde(default)]
    pub conflicting_words: Vec<String>,
    #[serde(default)]
    pub target_words: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unrelated_words: Vec<String>,
    /// Overrides the built-in stopword list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopwords: Option<Vec<String>>,
    pub condition: ConditionSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default)]
    pub mask_time_pooling: MaskTimePooling,
    #[serde(default)]
    pub bias_space: BiasSpace,
    #[serde(default)]
    pub mode: Mode,
    /// Modes for `ablate`; defaults to the full comparison set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation_modes: Option<Vec<Mode>>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub share_initial_noise: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_alpha: Option<f32>,
    /// Output directory, relative to the job file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobFile {
    pub version: u32,
    pub jobs: Vec<JobEntry>,
}

impl JobFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: JobFile = serde_json::from_str(text)?;
        if file.version != JOBFILE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported job file version {} (expected {JOBFILE_VERSION})",
                file.version
            )));
        }
        let mut ids = HashSet::new();
        for job in &file.jobs {
            if job.id.is_empty() || job.id.contains(['/', '\\']) || job.id.starts_with('.') {
                return Err(Error::InvalidConfig(format!("invalid job id `{}`", job.id)));
            }
            if !ids.insert(job.id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate job id `{}`",
                    job.id
                )));
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl JobEntry {
    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        let non_conflicting_words = match &self.non_conflicting_words {
            Some(words) => words.clone(),
            None => {
                let stop = match &self.stopwords {
                    Some(list) => list.iter().map(|s| s.to_ascii_lowercase()).collect(),
                    None => default_stopwords(),
                };
                derive_non_conflicting_words(
                    &self.surrogate_prompt,
                    &stop,
                    &self.conflicting_words,
                    &self.unrelated_words,
                )?
            }
        };
        Ok(PromptSpec {
            target_prompt: self.target_prompt.clone(),
            surrogate_prompt: self.surrogate_prompt.clone(),
            non_conflicting_words,
            conflicting_words: self.conflicting_words.clone(),
            target_words: self.target_words.clone(),
        })
    }

    pub fn condition_path(&self, base_dir: &Path) -> PathBuf {
        base_dir.join(&self.condition.path)
    }

    /// Loads the condition image and resolves every default.
    pub fn to_job_spec(&self, base_dir: &Path) -> Result<JobSpec> {
        let condition =
            ConditionInput::load_png(self.condition.kind, &self.condition_path(base_dir))?;
        let mut job = JobSpec::new(self.id.clone(), self.prompt_spec()?, condition);
        job.sampler = self.sampler.clone();
        job.lambda = self.lambda;
        job.mask_time_pooling = self.mask_time_pooling;
        job.bias_space = self.bias_space;
        job.mode = self.mode;
        job.share_initial_noise = self.share_initial_noise;
        job.force_alpha = self.force_alpha;
        job.validate()?;
        Ok(job)
    }

    pub fn output_dir(&self, base_dir: &Path, override_dir: Option<&Path>) -> PathBuf {
        match (override_dir, &self.output_dir) {
            (Some(root), _) => root.join(&self.id),
            (None, Some(dir)) => base_dir.join(dir),
            (None, None) => base_dir.join("out").join(&self.id),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "version": 1,
        "jobs": [{
            "id": "g",
            "target_prompt": "a dog plushie is holding the guitar",
            "surrogate_prompt": "a man is holding the guitar",
            "conflicting_words": ["man"],
            "target_words": ["dog", "plushie"],
            "condition": {"path": "pose.png", "kind": "pose"}
        }]
    }"#;

    #[test]
    fn defaults_are_filled_in() {
        let f = JobFile::parse(MINIMAL).unwrap();
        let j = &f.jobs[0];
        assert_eq!(j.sampler.steps, 50);
        assert_eq!(j.sampler.guidance_scale, 7.5);
        assert_eq!(j.lambda, 3.0);
        assert_eq!(j.mode, Mode::SemanticControl);
        assert!(j.share_initial_noise);
        assert_eq!(
            j.prompt_spec().unwrap().non_conflicting_words,
            vec!["holding".to_string(), "guitar".to_string()]
        );
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = MINIMAL
            .replace("\"lambda_typo\"", "")
            .replace("\"id\": \"g\",", "\"id\": \"g\", \"lamda\": 2.0,");
        assert!(matches!(JobFile::parse(&bad), Err(Error::Json(_))));
        let bad = MINIMAL.replace("\"kind\": \"pose\"", "\"kind\": \"pose\", \"extra\": 1");
        assert!(JobFile::parse(&bad).is_err());
        let bad = MINIMAL.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(JobFile::parse(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn modes_parse() {
        let text = MINIMAL.replace(
            "\"target_words\"",
            "\"ablation_modes\": [\"semantic_control\", {\"controlnet_fixed\": 0.4}, \"no_bias_ablation\"], \"target_words\"",
        );
        let f = JobFile::parse(&text).unwrap();
        assert_eq!(
            f.jobs[0].ablation_modes.as_deref().unwrap(),
            &[
                Mode::SemanticControl,
                Mode::ControlnetFixed(0.4),
                Mode::NoBiasAblation
            ]
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = JobFile::parse(MINIMAL).unwrap();
        let mut twice = f.clone();
        twice.jobs.push(f.jobs[0].clone());
        assert!(JobFile::parse(&twice.to_json().unwrap()).is_err());
    }
}
