mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use common::*;
use semctl::attention::{attach_recorder, capture_pass, ArchiveKey};
use semctl::backbone::{
    BackboneDescriptor, ControlScale, DenoisingBackbone, LayerId, NoHooks, StepContext, StepHooks,
    TextEmbedding,
};
use semctl::bias::BiasStack;
use semctl::condition::{ConditionInput, ConditionKind};
use semctl::container::{archive_from_container, archive_to_container, Container};
use semctl::image_io::RgbImage;
use semctl::mask::{build_control_stack, resize_mask, MaskTimePooling};
use semctl::pipeline::{generate, run_ablation_suite, sample_unhooked, Mode};
use semctl::prompt::Tokenizer;
use semctl::sampler::{ddim_sample, initial_noise, SamplerConfig};
use semctl::tensor::{Feature, Grid, Resolution};
use semctl::toy::{build_backbone, BackboneConfig};
use semctl::Error;

fn sampler(steps: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps,
        seed,
        ..Default::default()
    }
}

fn surrogate_capture(steps: usize, seed: u64) -> semctl::attention::AttentionArchive {
    let b = toy();
    let d = b.descriptor();
    let surr = b.embed_prompt("a man is holding the guitar").unwrap();
    let uncond = b.embed_prompt("").unwrap();
    let special = b
        .tokenizer()
        .encode("a man is holding the guitar")
        .special_indices();
    let noise = initial_noise(seed, d.latent_channels, d.latent_resolution);
    capture_pass(
        b,
        &sampler(steps, seed),
        &surr,
        &uncond,
        &figure_condition(),
        special,
        &noise,
    )
    .unwrap()
    .0
}

#[test]
fn toy_enumerates_mid_plus_decoder_sites() {
    let d = toy().descriptor();
    let sites: Vec<(u32, u32)> = d
        .sites
        .iter()
        .map(|s| (s.site.layer.0, s.site.module))
        .collect();
    assert_eq!(sites, vec![(0, 1), (2, 1), (3, 1)]);
    assert_eq!(
        d.sites.iter().filter(|s| !s.site.layer.is_middle()).count(),
        2
    );
    let slots: Vec<(u32, bool)> = d
        .control_slots
        .iter()
        .map(|s| (s.layer.0, s.has_cross_attention))
        .collect();
    assert_eq!(slots, vec![(0, true), (1, false), (2, true), (3, true)]);
    assert_eq!(d.control_slots[0].resolution, d.control_slots[1].resolution);
    assert_eq!(
        d.site_resolution(d.sites[0].site),
        Some(Resolution::new(8, 8))
    );
    assert_eq!(
        d.site_resolution(d.sites[2].site),
        Some(Resolution::new(32, 32))
    );
}

#[test]
fn more_modules_and_blocks_enumerate_accordingly() {
    let cfg = BackboneConfig {
        channels: vec![8, 8, 8, 8],
        attention_modules: 2,
        latent_size: [16, 16],
        ..Default::default()
    };
    let b = build_backbone(&cfg).unwrap();
    assert_eq!(b.descriptor().sites.len(), 2 * 4);
    assert!(build_backbone(&BackboneConfig {
        channels: vec![8],
        ..Default::default()
    })
    .is_err());
}

#[test]
fn backbone_is_deterministic_and_rebuildable() {
    let again = build_backbone(&BackboneConfig::default()).unwrap();
    let d = toy().descriptor();
    let latent = initial_noise(3, d.latent_channels, d.latent_resolution);
    let text = toy().embed_prompt("a red kite").unwrap();
    let ctx = StepContext {
        index: 0,
        timestep: 400.0,
    };
    let a = toy()
        .predict_noise(&latent, ctx, &text, &figure_condition(), &mut NoHooks)
        .unwrap();
    let b = again
        .predict_noise(&latent, ctx, &text, &figure_condition(), &mut NoHooks)
        .unwrap();
    assert_eq!(a, b);
    let other = build_backbone(&BackboneConfig {
        weight_seed: 1,
        ..Default::default()
    })
    .unwrap();
    let c = other
        .predict_noise(&latent, ctx, &text, &figure_condition(), &mut NoHooks)
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn control_branch_consumes_the_condition() {
    let d = toy().descriptor();
    let latent = initial_noise(0, d.latent_channels, d.latent_resolution);
    let blank = ConditionInput::blank(ConditionKind::Pose, d.condition_resolution);
    let with = toy()
        .control_branch_outputs(&latent, &figure_condition(), 500.0)
        .unwrap();
    let without = toy()
        .control_branch_outputs(&latent, &blank, 500.0)
        .unwrap();
    assert_eq!(with.len(), without.len());
    for (a, b) in with.iter().zip(&without) {
        assert!(a.same_shape(b));
        assert_ne!(a.data(), b.data());
    }
}

struct Counting<'a> {
    inner: &'a dyn DenoisingBackbone,
    calls: AtomicUsize,
}

impl DenoisingBackbone for Counting<'_> {
    fn descriptor(&self) -> &BackboneDescriptor {
        self.inner.descriptor()
    }
    fn tokenizer(&self) -> &dyn Tokenizer {
        self.inner.tokenizer()
    }
    fn embed_prompt(&self, text: &str) -> semctl::Result<TextEmbedding> {
        self.inner.embed_prompt(text)
    }
    fn predict_noise(
        &self,
        latent: &Feature,
        step: StepContext,
        text: &TextEmbedding,
        condition: &ConditionInput,
        hooks: &mut dyn StepHooks,
    ) -> semctl::Result<Feature> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner
            .predict_noise(latent, step, text, condition, hooks)
    }
    fn decode_latent(&self, latent: &Feature) -> semctl::Result<RgbImage> {
        self.inner.decode_latent(latent)
    }
}

#[test]
fn one_step_is_one_invocation_pair() {
    let counting = Counting {
        inner: toy(),
        calls: AtomicUsize::new(0),
    };
    let job = guitar_job(1);
    sample_unhooked(&job, &counting).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 2);
    counting.calls.store(0, Ordering::SeqCst);
    generate(&job.with_mode(Mode::ControlnetFixed(1.0)), &counting).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 2);
    counting.calls.store(0, Ordering::SeqCst);
    generate(&job, &counting).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 4);
}

#[test]
fn capture_enumerates_every_step_and_site() {
    let archive = surrogate_capture(4, 0);
    assert_eq!(archive.len(), 12);
    let keys: BTreeSet<(usize, u32, u32)> = archive
        .keys()
        .map(|k| (k.step, k.layer.0, k.module))
        .collect();
    let want: BTreeSet<(usize, u32, u32)> = (0..4)
        .flat_map(|t| [0u32, 2, 3].map(|l| (t, l, 1)))
        .collect();
    assert_eq!(keys, want);
    let one = surrogate_capture(1, 0);
    assert_eq!(one.steps(), vec![0]);
    assert_eq!(one.len(), 3);
}

#[test]
fn archive_rows_are_distributions_without_special_columns() {
    let archive = surrogate_capture(2, 0);
    let special = toy()
        .tokenizer()
        .encode("a man is holding the guitar")
        .special_indices();
    for (key, map) in archive.entries() {
        assert_eq!(map.rows(), archive.resolution(key.layer).unwrap().area());
        for r in 0..map.rows() {
            let row = map.row(r);
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((sum - 1.0).abs() < 1e-5, "{key:?} row {r} sums to {sum}");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for &s in &special {
                assert_eq!(row[s], 0.0);
            }
        }
    }
}

#[test]
fn captures_are_deterministic_and_seed_dependent() {
    let a = surrogate_capture(2, 5);
    assert_eq!(a, surrogate_capture(2, 5));
    assert_ne!(a, surrogate_capture(2, 6));
}

#[test]
fn recorder_is_transparent() {
    let job = guitar_job(3);
    let b = toy();
    let d = b.descriptor();
    let cond = b.embed_prompt(&job.prompt.target_prompt).unwrap();
    let uncond = b.embed_prompt("").unwrap();
    let noise = initial_noise(7, d.latent_channels, d.latent_resolution);
    let plain = sample_unhooked(&job, b).unwrap();

    let mut rec = attach_recorder(b, BTreeSet::from([0])).unwrap();
    let recorded = ddim_sample(
        b,
        &job.sampler,
        &cond,
        &uncond,
        &job.condition,
        &noise,
        &mut rec,
    )
    .unwrap();
    assert_eq!(plain, recorded);
    assert_eq!(rec.finish().unwrap().len(), 9);

    let mut detached = attach_recorder(b, BTreeSet::new()).unwrap();
    detached.detach();
    let out = ddim_sample(
        b,
        &job.sampler,
        &cond,
        &uncond,
        &job.condition,
        &noise,
        &mut detached,
    )
    .unwrap();
    assert_eq!(plain, out);
    assert!(detached.finish().unwrap().is_empty());
}

#[test]
fn zero_site_backbone_cannot_be_recorded() {
    let mut d = toy().descriptor().clone();
    d.sites.clear();
    assert!(matches!(
        semctl::attention::AttentionArchive::for_backbone(&d),
        Err(Error::NoAttentionSites)
    ));
}

struct Scales(ControlScaleKind);

enum ControlScaleKind {
    Mask(Vec<(LayerId, Grid)>),
    Scalar(f32),
    Disabled,
}

impl StepHooks for Scales {
    fn control_scale(&self, _step: usize, layer: LayerId) -> ControlScale<'_> {
        match &self.0 {
            ControlScaleKind::Mask(m) => {
                ControlScale::Mask(&m.iter().find(|(l, _)| *l == layer).unwrap().1)
            }
            ControlScaleKind::Scalar(v) => ControlScale::Scalar(*v),
            ControlScaleKind::Disabled => ControlScale::Disabled,
        }
    }
}

fn constant_masks(v: f32) -> ControlScaleKind {
    ControlScaleKind::Mask(
        toy()
            .descriptor()
            .control_slots
            .iter()
            .map(|s| (s.layer, Grid::filled(s.resolution, v)))
            .collect(),
    )
}

fn run_with(hooks: &mut dyn StepHooks) -> Feature {
    let job = guitar_job(4);
    let b = toy();
    let d = b.descriptor();
    let cond = b.embed_prompt(&job.prompt.target_prompt).unwrap();
    let uncond = b.embed_prompt("").unwrap();
    let noise = initial_noise(7, d.latent_channels, d.latent_resolution);
    ddim_sample(
        b,
        &job.sampler,
        &cond,
        &uncond,
        &job.condition,
        &noise,
        hooks,
    )
    .unwrap()
}

#[test]
fn constant_masks_match_scalar_wiring() {
    assert_eq!(
        run_with(&mut Scales(constant_masks(0.0))),
        run_with(&mut Scales(ControlScaleKind::Disabled))
    );
    assert_eq!(
        run_with(&mut Scales(constant_masks(0.4))),
        run_with(&mut Scales(ControlScaleKind::Scalar(0.4)))
    );
    assert_eq!(
        run_with(&mut Scales(constant_masks(1.0))),
        run_with(&mut NoHooks)
    );
    assert_ne!(
        run_with(&mut Scales(constant_masks(0.4))),
        run_with(&mut NoHooks)
    );
}

#[test]
fn control_stack_covers_every_slot_and_falls_back_to_middle() {
    let archive = surrogate_capture(3, 0);
    let d = toy().descriptor();
    let nc = BTreeSet::from([4, 5, 7, 8]);
    let stack =
        build_control_stack(&archive, &nc, &d.control_slots, MaskTimePooling::Matched).unwrap();
    assert_eq!(stack.len(), 3 * d.control_slots.len());
    assert_eq!(
        stack.fallback_layers().iter().copied().collect::<Vec<_>>(),
        vec![LayerId(1)]
    );
    for step in 0..3 {
        let mid = stack.get(step, LayerId::MIDDLE).unwrap();
        assert_eq!(stack.get(step, LayerId(1)).unwrap(), mid);
        for slot in &d.control_slots {
            let g = stack.get(step, slot.layer).unwrap();
            assert_eq!(g.resolution(), slot.resolution);
            assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    let pooled =
        build_control_stack(&archive, &nc, &d.control_slots, MaskTimePooling::Mean).unwrap();
    for slot in &d.control_slots {
        let first = pooled.get(0, slot.layer).unwrap();
        for step in 1..3 {
            assert_eq!(pooled.get(step, slot.layer).unwrap(), first);
        }
        let manual: Vec<f64> = (0..slot.resolution.area())
            .map(|p| {
                (0..3)
                    .map(|t| f64::from(stack.get(t, slot.layer).unwrap().data()[p]))
                    .sum::<f64>()
                    / 3.0
            })
            .collect();
        assert!(max_abs_diff(first.data(), &manual) < 1e-6);
    }
}

#[test]
fn fallback_resizes_to_a_larger_block() {
    let archive = surrogate_capture(1, 0);
    let mut slots = toy().descriptor().control_slots.clone();
    slots[1].resolution = Resolution::new(16, 16);
    let stack = build_control_stack(
        &archive,
        &BTreeSet::from([4, 5, 7, 8]),
        &slots,
        MaskTimePooling::Matched,
    )
    .unwrap();
    let mid = stack.get(0, LayerId::MIDDLE).unwrap();
    let up = stack.get(0, LayerId(1)).unwrap();
    assert_eq!(up.resolution(), Resolution::new(16, 16));
    assert!(max_abs_diff(up.data(), &oracle_bilinear(mid, 16, 16)) < 1e-6);
    assert_eq!(up, &resize_mask(mid, Resolution::new(16, 16)).unwrap());
}

#[test]
fn stacks_recompute_bit_exactly_from_serialized_archive() {
    let job = guitar_job(3);
    let result = generate(&job, toy()).unwrap();
    let archive = result.archive.as_ref().unwrap();
    let bytes = archive_to_container(archive).unwrap().to_bytes().unwrap();
    let restored = archive_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    let d = toy().descriptor();
    let control = build_control_stack(
        &restored,
        &result.roles.non_conflicting_indices,
        &d.control_slots,
        job.mask_time_pooling,
    )
    .unwrap();
    let bias = BiasStack::build(
        &restored,
        &result.roles.conflicting_indices,
        job.lambda,
        result.roles.n_tar(),
    )
    .unwrap();
    assert_eq!(&control, result.control_stack.as_ref().unwrap());
    assert_eq!(&bias, result.bias_stack.as_ref().unwrap());
    assert_eq!(
        control.content_hash(),
        result.metadata.control_stack_hash.clone().unwrap()
    );
}

#[test]
fn runs_are_deterministic() {
    let job = guitar_job(3);
    let a = generate(&job, toy()).unwrap();
    let b = generate(&job, toy()).unwrap();
    assert_eq!(a.metadata, b.metadata);
    assert_eq!(a.archive, b.archive);
    assert_eq!(a.control_stack, b.control_stack);
    assert_eq!(a.bias_stack, b.bias_stack);
    assert_eq!(a.image, b.image);
}

#[test]
fn runs_are_independent_of_thread_placement() {
    let job = guitar_job(2);
    let serial = generate(&job, toy()).unwrap().metadata.output_hash;
    let hashes: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3)
            .map(|_| s.spawn(|| generate(&job, toy()).unwrap().metadata.output_hash))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(hashes.iter().all(|h| *h == serial));
}

#[test]
fn passes_share_initial_noise_unless_decoupled() {
    let mut job = guitar_job(2);
    let shared = generate(&job, toy()).unwrap();
    assert_eq!(
        shared.metadata.auxiliary_noise_hash.as_deref(),
        Some(shared.metadata.initial_noise_hash.as_str())
    );
    job.share_initial_noise = false;
    let split = generate(&job, toy()).unwrap();
    assert_eq!(
        split.metadata.initial_noise_hash,
        shared.metadata.initial_noise_hash
    );
    assert_ne!(
        split.metadata.auxiliary_noise_hash,
        shared.metadata.auxiliary_noise_hash
    );
    assert_ne!(split.archive, shared.archive);
}

#[test]
fn mode_lattice_holds() {
    let job = guitar_job(4);
    let fixed = generate(&job.with_mode(Mode::ControlnetFixed(1.0)), toy()).unwrap();
    let mut forced = job.clone();
    forced.lambda = 0.0;
    forced.force_alpha = Some(1.0);
    let forced = generate(&forced, toy()).unwrap();
    assert_eq!(forced.metadata.image_hash, fixed.metadata.image_hash);
    assert_eq!(forced.metadata.output_hash, fixed.metadata.output_hash);

    let mut no_lambda = job.clone();
    no_lambda.lambda = 0.0;
    let sc0 = generate(&no_lambda, toy()).unwrap();
    let ablation = generate(&job.with_mode(Mode::NoBiasAblation), toy()).unwrap();
    assert_eq!(sc0.metadata.output_hash, ablation.metadata.output_hash);
    assert!(sc0.bias_stack.unwrap().is_zero());

    let mut forced_ablation = job.with_mode(Mode::NoBiasAblation);
    forced_ablation.force_alpha = Some(1.0);
    assert_eq!(
        generate(&forced_ablation, toy())
            .unwrap()
            .metadata
            .output_hash,
        fixed.metadata.output_hash
    );

    let mut forced_04 = no_lambda.clone();
    forced_04.force_alpha = Some(0.4);
    let fixed_04 = generate(&job.with_mode(Mode::ControlnetFixed(0.4)), toy()).unwrap();
    assert_eq!(
        generate(&forced_04, toy()).unwrap().metadata.output_hash,
        fixed_04.metadata.output_hash
    );
}

#[test]
fn mechanism_changes_the_output() {
    let job = guitar_job(4);
    let sc = generate(&job, toy()).unwrap();
    let fixed = generate(&job.with_mode(Mode::ControlnetFixed(1.0)), toy()).unwrap();
    let ablation = generate(&job.with_mode(Mode::NoBiasAblation), toy()).unwrap();
    assert_ne!(sc.metadata.output_hash, fixed.metadata.output_hash);
    assert_ne!(sc.metadata.output_hash, ablation.metadata.output_hash);
    assert_ne!(ablation.metadata.output_hash, fixed.metadata.output_hash);
    for g in sc.control_stack.unwrap().masks().values() {
        assert!(g.max() - g.min() > 1e-3);
    }
    assert!(!sc.bias_stack.unwrap().is_zero());
}

#[test]
fn bias_space_is_switchable() {
    let job = guitar_job(3);
    let prob = generate(&job, toy()).unwrap();
    let mut logit = job.clone();
    logit.bias_space = semctl::backbone::BiasSpace::Logit;
    let logit_run = generate(&logit, toy()).unwrap();
    assert_ne!(prob.metadata.output_hash, logit_run.metadata.output_hash);
    logit.lambda = 0.0;
    let ablation = generate(&job.with_mode(Mode::NoBiasAblation), toy()).unwrap();
    assert_eq!(
        generate(&logit, toy()).unwrap().metadata.output_hash,
        ablation.metadata.output_hash
    );
}

#[test]
fn identical_prompts_give_zero_bias() {
    let mut job = guitar_job(2);
    job.prompt.target_prompt = job.prompt.surrogate_prompt.clone();
    job.prompt.conflicting_words.clear();
    job.prompt.target_words.clear();
    let r = generate(&job, toy()).unwrap();
    assert!(r.roles.conflicting_indices.is_empty() && r.roles.target_indices.is_empty());
    assert!(r.bias_stack.as_ref().unwrap().is_zero());
    let ablation = generate(&job.with_mode(Mode::NoBiasAblation), toy()).unwrap();
    assert_eq!(r.metadata.output_hash, ablation.metadata.output_hash);
}

#[test]
fn failures_name_their_stage() {
    let mut job = guitar_job(2);
    job.prompt.conflicting_words = vec!["woman".into()];
    let err = generate(&job, toy()).unwrap_err();
    assert_eq!(err.stage(), Some("roles"));
    assert_eq!(err.kind(), "RoleWordNotFound");

    let mut job = guitar_job(2);
    job.sampler.steps = 0;
    assert_eq!(generate(&job, toy()).unwrap_err().stage(), Some("validate"));

    let mut job = guitar_job(2);
    job.condition = ConditionInput::blank(ConditionKind::Depth, Resolution::new(100, 100));
    let err = generate(&job, toy()).unwrap_err();
    assert_eq!(err.stage(), Some("capture"));
}

#[test]
fn ablation_suite_isolates_failures_and_records_seed() {
    let job = guitar_job(2);
    let modes = [
        Mode::SemanticControl,
        Mode::ControlnetFixed(1.5),
        Mode::NoBiasAblation,
    ];
    let table = run_ablation_suite(&job, &modes, toy());
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows[0].result.is_ok());
    assert!(table.rows[1].result.is_err());
    assert!(table.rows[2].result.is_ok());
    let manifest = table.manifest();
    assert!(manifest.rows.iter().all(|r| r.seed == 7));
    assert!(!manifest.rows[1].ok && manifest.rows[1].error.is_some());
    for row in &table.rows {
        if let Ok(r) = &row.result {
            assert_eq!(r.metadata.seed, 7);
        }
    }
    assert!(run_ablation_suite(&job, &[], toy()).rows.is_empty());
}

#[test]
fn ablation_manifests_are_reproducible() {
    let job = guitar_job(2);
    let modes = semctl::pipeline::default_ablation_modes();
    let a = run_ablation_suite(&job, &modes, toy()).manifest();
    let b = run_ablation_suite(&job, &modes, toy()).manifest();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    let fixed = &a.rows[2];
    assert_eq!(fixed.mode_label, "controlnet_fixed_1");
}

#[test]
fn archive_keys_follow_schedule_indices() {
    let archive = surrogate_capture(2, 0);
    assert!(archive.get(ArchiveKey::new(2, LayerId(2), 1)).is_err());
    assert!(archive.get(ArchiveKey::new(1, LayerId(1), 1)).is_err());
    assert!(archive.get(ArchiveKey::new(1, LayerId(3), 1)).is_ok());
}
