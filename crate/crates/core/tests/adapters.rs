mod common;

use std::collections::BTreeSet;

use common::toy;
use semctl::adapters::{verify_contract, ConformanceReport, CLAUSES};
use semctl::backbone::{
    AttnStage, BackboneDescriptor, BiasRequest, ControlScale, DenoisingBackbone, LayerId, SiteId,
    StepContext, StepHooks, TextEmbedding,
};
use semctl::condition::ConditionInput;
use semctl::image_io::RgbImage;
use semctl::prompt::Tokenizer;
use semctl::tensor::{AttnMatrix, Feature};

/// Forwards hooks but widens every bias request to all token columns.
struct LeakyHooks<'a> {
    inner: &'a mut dyn StepHooks,
    all: BTreeSet<usize>,
}

impl StepHooks for LeakyHooks<'_> {
    fn control_scale(&self, step: usize, layer: LayerId) -> ControlScale<'_> {
        self.inner.control_scale(step, layer)
    }
    fn attention_bias(&self, step: usize, site: SiteId) -> Option<BiasRequest<'_>> {
        self.inner.attention_bias(step, site).map(|r| BiasRequest {
            grid: r.grid,
            target_indices: &self.all,
            space: r.space,
        })
    }
    fn wants_attention(&self) -> bool {
        self.inner.wants_attention()
    }
    fn observe_attention(
        &mut self,
        step: usize,
        site: SiteId,
        stage: AttnStage,
        probs: &AttnMatrix,
    ) {
        self.inner.observe_attention(step, site, stage, probs)
    }
}

struct Wrapped {
    descriptor: BackboneDescriptor,
    leak: bool,
}

impl Wrapped {
    fn leaky() -> Self {
        Self {
            descriptor: toy().descriptor().clone(),
            leak: true,
        }
    }

    fn without_sites() -> Self {
        let mut descriptor = toy().descriptor().clone();
        descriptor.sites.clear();
        Self {
            descriptor,
            leak: false,
        }
    }
}

impl DenoisingBackbone for Wrapped {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }
    fn tokenizer(&self) -> &dyn Tokenizer {
        toy().tokenizer()
    }
    fn embed_prompt(&self, text: &str) -> semctl::Result<TextEmbedding> {
        toy().embed_prompt(text)
    }
    fn predict_noise(
        &self,
        latent: &Feature,
        step: StepContext,
        text: &TextEmbedding,
        condition: &ConditionInput,
        hooks: &mut dyn StepHooks,
    ) -> semctl::Result<Feature> {
        if self.leak {
            let mut leaky = LeakyHooks {
                inner: hooks,
                all: (0..text.tokens).collect(),
            };
            toy().predict_noise(latent, step, text, condition, &mut leaky)
        } else {
            toy().predict_noise(latent, step, text, condition, hooks)
        }
    }
    fn decode_latent(&self, latent: &Feature) -> semctl::Result<RgbImage> {
        toy().decode_latent(latent)
    }
}

fn failing(report: &ConformanceReport) -> Vec<&str> {
    report
        .clauses
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.clause.as_str())
        .collect()
}

#[test]
fn toy_backbone_conforms() {
    let report = verify_contract(toy());
    assert!(report.passed, "{report:#?}");
    let names: Vec<&str> = report.clauses.iter().map(|c| c.clause.as_str()).collect();
    assert_eq!(names, CLAUSES);
}

#[test]
fn leaking_bias_fails_column_isolation_only() {
    let report = verify_contract(&Wrapped::leaky());
    assert!(!report.passed);
    assert_eq!(failing(&report), vec!["column_isolation"]);
    assert!(!report.clause("column_isolation").unwrap().detail.is_empty());
}

#[test]
fn missing_sites_fail_enumeration() {
    let report = verify_contract(&Wrapped::without_sites());
    assert!(!report.passed);
    assert!(!report.clause("site_enumeration").unwrap().passed);
}

#[test]
fn report_round_trips_through_json() {
    let report = verify_contract(&Wrapped::leaky());
    let text = serde_json::to_string(&report).unwrap();
    let back: ConformanceReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

#[test]
#[ignore = "needs a pretrained runtime; set SEMCTL_EXTERNAL_WEIGHTS"]
fn external_adapter_geometry_matches_weights_dir() {
    let Ok(dir) = semctl::adapters::external::weights_dir_from_env() else {
        eprintln!("SEMCTL_EXTERNAL_WEIGHTS not set");
        return;
    };
    assert!(dir.is_dir(), "{} is not a directory", dir.display());
    let d = semctl::adapters::external::sd15_descriptor();
    assert_eq!(d.sites.len(), 10);
}
