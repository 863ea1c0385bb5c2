//! Conformance checks for [`DenoisingBackbone`] implementations.
//!
//! [`verify_contract`] drives a backbone through single forward passes with
//! probe hooks and reports each clause separately. The toy backbone passes
//! every clause; [`external`] sketches an adapter for a pretrained pipeline.

pub mod external;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::backbone::{
    AttnStage, BiasRequest, BiasSpace, ControlScale, DenoisingBackbone, LayerId, NoHooks, SiteId,
    StepContext, StepHooks, TextEmbedding,
};
use crate::condition::ConditionInput;
use crate::sampler::initial_noise;
use crate::tensor::{AttnMatrix, Feature, Grid};

pub const PROBE_PROMPT: &str = "a probe prompt";
pub const PROBE_BIAS: f32 = 0.125;
const PROBE_TIMESTEP: f32 = 501.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub clause: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub backbone: String,
    pub passed: bool,
    pub clauses: Vec<ClauseResult>,
}

impl ConformanceReport {
    pub fn clause(&self, name: &str) -> Option<&ClauseResult> {
        self.clauses.iter().find(|c| c.clause == name)
    }
}

pub const CLAUSES: [&str; 6] = [
    "site_enumeration",
    "shapes",
    "determinism",
    "identity_hooks",
    "column_isolation",
    "control_merge",
];

type ClauseOutcome = Result<String, String>;
type ClauseCheck = fn(&dyn DenoisingBackbone, &ProbeInputs) -> ClauseOutcome;

/// Runs every clause; failures become report entries, never errors.
pub fn verify_contract(backbone: &dyn DenoisingBackbone) -> ConformanceReport {
    let probe = ProbeInputs::new(backbone);
    let checks: [(&str, ClauseCheck); 6] = [
        (CLAUSES[0], site_enumeration),
        (CLAUSES[1], shapes),
        (CLAUSES[2], determinism),
        (CLAUSES[3], identity_hooks),
        (CLAUSES[4], column_isolation),
        (CLAUSES[5], control_merge),
    ];
    let clauses: Vec<ClauseResult> = checks
        .iter()
        .map(|(name, check)| {
            let outcome = match &probe {
                Ok(p) => catch_unwind(AssertUnwindSafe(|| check(backbone, p)))
                    .unwrap_or_else(|_| Err("backbone panicked".into())),
                Err(e) => Err(format!("probe setup failed: {e}")),
            };
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            ClauseResult {
                clause: name.to_string(),
                passed,
                detail,
            }
        })
        .collect();
    ConformanceReport {
        backbone: backbone.descriptor().name.clone(),
        passed: clauses.iter().all(|c| c.passed),
        clauses,
    }
}

struct ProbeInputs {
    latent: Feature,
    text: TextEmbedding,
    condition: ConditionInput,
}

type Probe = Result<ProbeInputs, String>;

impl ProbeInputs {
    fn new(backbone: &dyn DenoisingBackbone) -> Probe {
        let desc = backbone.descriptor();
        let text = backbone
            .embed_prompt(PROBE_PROMPT)
            .map_err(|e| e.to_string())?;
        Ok(ProbeInputs {
            latent: initial_noise(0, desc.latent_channels, desc.latent_resolution),
            text,
            condition: ConditionInput::synthetic_figure(desc.condition_resolution),
        })
    }
}

fn forward(
    backbone: &dyn DenoisingBackbone,
    p: &ProbeInputs,
    hooks: &mut dyn StepHooks,
) -> Result<Feature, String> {
    let ctx = StepContext {
        index: 0,
        timestep: PROBE_TIMESTEP,
    };
    backbone
        .predict_noise(&p.latent, ctx, &p.text, &p.condition, hooks)
        .map_err(|e| e.to_string())
}

fn same_bits(a: &Feature, b: &Feature) -> bool {
    a.same_shape(b)
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Records every observation and optionally biases one token column.
#[derive(Default)]
struct ObservingHooks {
    bias: Option<(BTreeMap<SiteId, Grid>, BTreeSet<usize>)>,
    seen: BTreeMap<(SiteId, u8), AttnMatrix>,
    order: Vec<(SiteId, AttnStage)>,
}

fn stage_tag(stage: AttnStage) -> u8 {
    match stage {
        AttnStage::Softmax => 0,
        AttnStage::Applied => 1,
    }
}

impl StepHooks for ObservingHooks {
    fn attention_bias(&self, _step: usize, site: SiteId) -> Option<BiasRequest<'_>> {
        let (grids, targets) = self.bias.as_ref()?;
        Some(BiasRequest {
            grid: grids.get(&site)?,
            target_indices: targets,
            space: BiasSpace::Prob,
        })
    }

    fn wants_attention(&self) -> bool {
        true
    }

    fn observe_attention(
        &mut self,
        _step: usize,
        site: SiteId,
        stage: AttnStage,
        probs: &AttnMatrix,
    ) {
        self.order.push((site, stage));
        self.seen.insert((site, stage_tag(stage)), probs.clone());
    }
}

enum ScaleMode {
    Scalar(f32),
    Masks(BTreeMap<LayerId, Grid>),
    Disabled,
}

struct ScaleHooks(ScaleMode);

impl StepHooks for ScaleHooks {
    fn control_scale(&self, _step: usize, layer: LayerId) -> ControlScale<'_> {
        match &self.0 {
            ScaleMode::Scalar(v) => ControlScale::Scalar(*v),
            ScaleMode::Masks(m) => m
                .get(&layer)
                .map_or(ControlScale::Disabled, ControlScale::Mask),
            ScaleMode::Disabled => ControlScale::Disabled,
        }
    }
}

fn site_enumeration(backbone: &dyn DenoisingBackbone, p: &ProbeInputs) -> ClauseOutcome {
    let desc = backbone.descriptor();
    if desc.sites.is_empty() {
        return Err("no cross-attention sites declared".into());
    }
    if backbone.descriptor() != desc {
        return Err("descriptor changed between calls".into());
    }
    let declared: BTreeSet<SiteId> = desc.sites.iter().map(|s| s.site).collect();
    if declared.len() != desc.sites.len() {
        return Err("duplicate site ids".into());
    }
    if desc.control_slots.first().map(|s| s.layer) != Some(LayerId::MIDDLE) {
        return Err("first control slot is not the middle block".into());
    }
    let mut hooks = ObservingHooks::default();
    forward(backbone, p, &mut hooks)?;
    let observed: Vec<SiteId> = hooks
        .order
        .iter()
        .filter(|(_, st)| *st == AttnStage::Softmax)
        .map(|(s, _)| *s)
        .collect();
    let declared_order: Vec<SiteId> = desc.sites.iter().map(|s| s.site).collect();
    if observed != declared_order {
        return Err(format!(
            "observed sites {observed:?} differ from declared {declared_order:?}"
        ));
    }
    if hooks.order.len() != 2 * declared.len() {
        return Err(format!(
            "expected {} observations, got {}",
            2 * declared.len(),
            hooks.order.len()
        ));
    }
    let mut again = ObservingHooks::default();
    forward(backbone, p, &mut again)?;
    if again.order != hooks.order {
        return Err("site order changed between passes".into());
    }
    Ok(format!(
        "{} sites observed in declared order",
        declared.len()
    ))
}

fn shapes(backbone: &dyn DenoisingBackbone, p: &ProbeInputs) -> ClauseOutcome {
    let desc = backbone.descriptor();
    if p.text.tokens != desc.token_count || p.text.dim != desc.token_dim {
        return Err(format!(
            "embedding {}x{} != declared {}x{}",
            p.text.tokens, p.text.dim, desc.token_count, desc.token_dim
        ));
    }
    if backbone.tokenizer().encode(PROBE_PROMPT).len() != desc.token_count {
        return Err("tokenizer length differs from token_count".into());
    }
    let mut hooks = ObservingHooks::default();
    let eps = forward(backbone, p, &mut hooks)?;
    if !eps.same_shape(&p.latent) {
        return Err(format!(
            "noise {} != latent {}",
            eps.shape_string(),
            p.latent.shape_string()
        ));
    }
    if eps.data().iter().any(|v| !v.is_finite()) {
        return Err("non-finite noise estimate".into());
    }
    for info in &desc.sites {
        let m = hooks
            .seen
            .get(&(info.site, 0))
            .ok_or_else(|| format!("site {:?} not observed", info.site))?;
        if m.rows() != info.resolution.area() || m.cols() != desc.token_count {
            return Err(format!(
                "site {}/{}: attention {}x{}, declared {}x{}",
                info.site.layer,
                info.site.module,
                m.rows(),
                m.cols(),
                info.resolution.area(),
                desc.token_count
            ));
        }
        for r in 0..m.rows() {
            let s: f64 = m.row(r).iter().map(|&v| f64::from(v)).sum();
            if (s - 1.0).abs() > 1e-4 || m.row(r).iter().any(|&v| v < 0.0) {
                return Err(format!(
                    "site {:?} row {r} is not a distribution",
                    info.site
                ));
            }
        }
    }
    let img = backbone
        .decode_latent(&p.latent)
        .map_err(|e| e.to_string())?;
    if img.width == 0 || img.height == 0 {
        return Err("decoded image is empty".into());
    }
    Ok(format!(
        "latent {} and {} attention maps conform",
        p.latent.shape_string(),
        desc.sites.len()
    ))
}

fn determinism(backbone: &dyn DenoisingBackbone, p: &ProbeInputs) -> ClauseOutcome {
    let again = backbone
        .embed_prompt(PROBE_PROMPT)
        .map_err(|e| e.to_string())?;
    if again != p.text {
        return Err("prompt embedding is not deterministic".into());
    }
    let a = forward(backbone, p, &mut NoHooks)?;
    let b = forward(backbone, p, &mut NoHooks)?;
    if !same_bits(&a, &b) {
        return Err("repeated forward passes differ".into());
    }
    let ia = backbone
        .decode_latent(&p.latent)
        .map_err(|e| e.to_string())?;
    let ib = backbone
        .decode_latent(&p.latent)
        .map_err(|e| e.to_string())?;
    if ia != ib {
        return Err("decoding is not deterministic".into());
    }
    Ok("repeated passes are bit-identical".into())
}

fn identity_hooks(backbone: &dyn DenoisingBackbone, p: &ProbeInputs) -> ClauseOutcome {
    let desc = backbone.descriptor();
    let base = forward(backbone, p, &mut NoHooks)?;
    let mut observing = ObservingHooks::default();
    if !same_bits(&base, &forward(backbone, p, &mut observing)?) {
        return Err("observing attention changed the output".into());
    }
    if !same_bits(
        &base,
        &forward(backbone, p, &mut ScaleHooks(ScaleMode::Scalar(1.0)))?,
    ) {
        return Err("explicit unit control scale changed the output".into());
    }
    let ones = desc
        .control_slots
        .iter()
        .map(|s| (s.layer, Grid::filled(s.resolution, 1.0)))
        .collect();
    if !same_bits(
        &base,
        &forward(backbone, p, &mut ScaleHooks(ScaleMode::Masks(ones)))?,
    ) {
        return Err("all-ones control mask changed the output".into());
    }
    let zero_bias = desc
        .sites
        .iter()
        .map(|s| (s.site, Grid::zeros(s.resolution)))
        .collect();
    let targets = (0..desc.token_count).collect();
    let mut zero = ObservingHooks {
        bias: Some((zero_bias, targets)),
        ..Default::default()
    };
    if !same_bits(&base, &forward(backbone, p, &mut zero)?) {
        return Err("zero attention bias changed the output".into());
    }
    Ok("recording, unit scales and zero bias are transparent".into())
}

fn column_isolation(backbone: &dyn DenoisingBackbone, p: &ProbeInputs) -> ClauseOutcome {
    let desc = backbone.descriptor();
    let enc = backbone.tokenizer().encode(PROBE_PROMPT);
    let target = (0..enc.len())
        .find(|&i| !enc.special[i])
        .ok_or("probe prompt has no content tokens")?;
    let grids = desc
        .sites
        .iter()
        .map(|s| (s.site, Grid::filled(s.resolution, PROBE_BIAS)))
        .collect();
    let mut hooks = ObservingHooks {
        bias: Some((grids, BTreeSet::from([target]))),
        ..Default::default()
    };
    forward(backbone, p, &mut hooks)?;
    for info in &desc.sites {
        let before = hooks.seen.get(&(info.site, 0));
        let after = hooks.seen.get(&(info.site, 1));
        let (Some(before), Some(after)) = (before, after) else {
            return Err(format!("site {:?} missing an observation", info.site));
        };
        for r in 0..before.rows() {
            for c in 0..before.cols() {
                let (b, a) = (before.get(r, c), after.get(r, c));
                if c == target {
                    if ((a - b) - PROBE_BIAS).abs() > 1e-6 {
                        return Err(format!(
                            "site {}/{}: target column moved by {} instead of {PROBE_BIAS}",
                            info.site.layer,
                            info.site.module,
                            a - b
                        ));
                    }
                } else if a.to_bits() != b.to_bits() {
                    return Err(format!(
                        "site {}/{}: bias leaked into column {c} (row {r})",
                        info.site.layer, info.site.module
                    ));
                }
            }
        }
    }
    Ok(format!("bias confined to column {target} at every site"))
}

fn control_merge(backbone: &dyn DenoisingBackbone, p: &ProbeInputs) -> ClauseOutcome {
    let desc = backbone.descriptor();
    let masks = |v: f32| {
        ScaleMode::Masks(
            desc.control_slots
                .iter()
                .map(|s| (s.layer, Grid::filled(s.resolution, v)))
                .collect(),
        )
    };
    let disabled = forward(backbone, p, &mut ScaleHooks(ScaleMode::Disabled))?;
    if !same_bits(
        &disabled,
        &forward(backbone, p, &mut ScaleHooks(masks(0.0)))?,
    ) {
        return Err("zero mask differs from a disabled control branch".into());
    }
    let scalar = forward(backbone, p, &mut ScaleHooks(ScaleMode::Scalar(0.4)))?;
    if !same_bits(&scalar, &forward(backbone, p, &mut ScaleHooks(masks(0.4)))?) {
        return Err("constant 0.4 mask differs from scalar 0.4".into());
    }
    if same_bits(&disabled, &forward(backbone, p, &mut NoHooks)?) {
        return Err("control branch has no effect".into());
    }
    Ok("mask merge matches scalar and disabled wiring".into())
}
