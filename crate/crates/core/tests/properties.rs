mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use semctl::attention::{exclude_and_renormalize, ArchiveKey};
use semctl::backbone::SiteId;
use semctl::bias::{apply_bias, compute_bias, BiasStack};
use semctl::container::{archive_from_container, archive_to_container, Container, Entry, Tag};
use semctl::mask::{aggregate_token_maps, compute_control_scale, resize_mask};
use semctl::modulation::{merge_scaled, modulate_and_merge, FeatureBundle};
use semctl::prompt::{resolve_token_roles, PromptSpec, Tokenizer, ToyTokenizer};
use semctl::sampler::cfg_combine;
use semctl::tensor::{AttnMatrix, Feature, Grid, Resolution};

fn logits_and_special() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (3usize..=16).prop_flat_map(|n| {
        (
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(any::<bool>(), n)
                .prop_filter("at least one kept token", |s| s.iter().any(|&b| !b)),
        )
    })
}

fn dyadic(bits: u32) -> impl Strategy<Value = f32> {
    (0u32..(1 << bits)).prop_map(move |k| k as f32 / (1u32 << bits) as f32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn renormalized_softmax_is_subset_softmax((z, special) in logits_and_special()) {
        let n = z.len();
        let probs: Vec<f32> = softmax(&z).into_iter().map(|v| v as f32).collect();
        let special_set: BTreeSet<usize> = (0..n).filter(|&i| special[i]).collect();
        let out = exclude_and_renormalize(&AttnMatrix::new(1, n, probs).unwrap(), &special_set).unwrap();
        let kept: Vec<usize> = (0..n).filter(|i| !special_set.contains(i)).collect();
        let sub = softmax(&kept.iter().map(|&i| z[i]).collect::<Vec<_>>());
        for (k, &i) in kept.iter().enumerate() {
            prop_assert!((f64::from(out.get(0, i)) - sub[k]).abs() < 1e-6);
        }
        for &i in &special_set {
            prop_assert_eq!(out.get(0, i), 0.0);
        }
        let sum: f64 = out.row(0).iter().map(|&v| f64::from(v)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn control_scale_matches_nested_loop_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let set = random_subset(&mut r, ra.tokens);
        let toks: Vec<usize> = set.iter().copied().collect();
        for step in 0..ra.steps {
            let got = compute_control_scale(&ra.archive, &set, ra.layer, step).unwrap();
            prop_assert_eq!(got.resolution(), ra.res);
            let want = oracle_alpha(&ra.archive, &toks, ra.layer, step);
            prop_assert!(max_abs_diff(got.data(), &want) < 1e-6);
        }
    }

    #[test]
    fn control_scale_range_and_clamp_noop(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let set = random_subset(&mut r, ra.tokens);
        for step in 0..ra.steps {
            let raw = aggregate_token_maps(&ra.archive, &set, ra.layer, step).unwrap();
            let clamped = compute_control_scale(&ra.archive, &set, ra.layer, step).unwrap();
            for (&a, &c) in raw.data().iter().zip(clamped.data()) {
                prop_assert!((0.0..=1.0).contains(&c));
                prop_assert!((a - c).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn control_scale_ignores_token_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let set = random_subset(&mut r, ra.tokens);
        let mut shuffled: Vec<usize> = set.iter().copied().collect();
        shuffled.shuffle(&mut r);
        let reordered: BTreeSet<usize> = shuffled.iter().copied().collect();
        let a = compute_control_scale(&ra.archive, &set, ra.layer, 0).unwrap();
        let b = compute_control_scale(&ra.archive, &reordered, ra.layer, 0).unwrap();
        prop_assert_eq!(a.data(), b.data());
        let oracle = oracle_alpha(&ra.archive, &shuffled, ra.layer, 0);
        prop_assert!(max_abs_diff(a.data(), &oracle) < 1e-6);
    }

    /// Dropping a token whose map is pointwise the smallest in the set never
    /// lowers the average.
    #[test]
    fn removing_pointwise_smallest_token_never_lowers_alpha(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut ra = random_archive(&mut r, 4, 3, 8);
        prop_assume!(ra.tokens >= 2);
        let set = random_subset(&mut r, ra.tokens);
        prop_assume!(set.len() >= 2);
        let members: Vec<usize> = set.iter().copied().collect();
        let low = members[r.gen_range(0..members.len())];
        let keys: Vec<ArchiveKey> = ra.archive.keys().collect();
        for key in keys {
            let m = ra.archive.get(key).unwrap().clone();
            let mut data = m.data().to_vec();
            for row in data.chunks_mut(m.cols()) {
                let floor = members.iter().map(|&t| row[t]).fold(f32::INFINITY, f32::min);
                row[low] = floor * r.gen_range(0.0f32..=1.0);
            }
            ra.archive.insert(key, AttnMatrix::new(m.rows(), m.cols(), data).unwrap()).unwrap();
        }
        let rest: BTreeSet<usize> = set.iter().copied().filter(|&t| t != low).collect();
        for step in 0..ra.steps {
            let with = compute_control_scale(&ra.archive, &set, ra.layer, step).unwrap();
            let without = compute_control_scale(&ra.archive, &rest, ra.layer, step).unwrap();
            for (&w, &wo) in with.data().iter().zip(without.data()) {
                prop_assert!(wo >= w - 1e-7, "{} < {}", wo, w);
            }
        }
    }

    #[test]
    fn bias_matches_summation_oracle(seed in any::<u64>(), lambda in 0.0f32..6.0, n_tar in 1usize..5) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let set = random_subset(&mut r, ra.tokens);
        let toks: Vec<usize> = set.iter().copied().collect();
        for key in ra.archive.keys() {
            let got = compute_bias(&ra.archive, &set, lambda, n_tar, key.site(), key.step).unwrap();
            let want: Vec<f64> = oracle_beta(&ra.archive, &toks, f64::from(lambda), n_tar, key)
                .into_iter()
                .map(|v| f64::from(v as f32))
                .collect();
            prop_assert!(max_abs_diff(got.data(), &want) < 1e-7);
            prop_assert!(got.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bias_is_linear_in_lambda(seed in any::<u64>(), lambda in 0.0f32..6.0, k in 0.0f32..4.0) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let set = random_subset(&mut r, ra.tokens);
        let n_tar = r.gen_range(1..4);
        let site = SiteId { layer: ra.layer, module: 1 };
        let base = compute_bias(&ra.archive, &set, lambda, n_tar, site, 0).unwrap();
        let doubled = compute_bias(&ra.archive, &set, 2.0 * lambda, n_tar, site, 0).unwrap();
        for (&b, &d) in base.data().iter().zip(doubled.data()) {
            prop_assert_eq!(d, 2.0 * b);
        }
        // k·λ, the base value and the result each round once in f32
        let scaled = compute_bias(&ra.archive, &set, k * lambda, n_tar, site, 0).unwrap();
        for (&b, &s) in base.data().iter().zip(scaled.data()) {
            let want = f64::from(k) * f64::from(b);
            let tol = 4.0 * f64::from(f32::EPSILON) * want.abs().max(f64::from(f32::MIN_POSITIVE));
            prop_assert!((f64::from(s) - want).abs() <= tol);
        }
    }

    #[test]
    fn empty_conflicting_set_gives_zero_stack(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let stack = BiasStack::build(&ra.archive, &BTreeSet::new(), 3.0, 2).unwrap();
        prop_assert!(stack.is_zero());
        prop_assert_eq!(stack.n_tar(), 0);
        prop_assert_eq!(stack.biases().len(), ra.archive.len());
    }

    #[test]
    fn apply_bias_touches_only_targets(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows = r.gen_range(1..20);
        let cols = r.gen_range(1..10);
        let attn = AttnMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let bias = Grid::new(Resolution::new(rows, 1), (0..rows).map(|_| r.gen_range(0.0..2.0)).collect()).unwrap();
        let targets = random_subset(&mut r, cols);
        let out = apply_bias(&attn, &bias, &targets).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                if targets.contains(&j) {
                    prop_assert_eq!(out.get(i, j), attn.get(i, j) + bias.data()[i]);
                } else {
                    prop_assert_eq!(out.get(i, j).to_bits(), attn.get(i, j).to_bits());
                }
            }
        }
    }

    /// On dyadic values every operation is exact, so the delta doubles
    /// bit-for-bit with the bias.
    #[test]
    fn apply_bias_delta_doubles_with_bias(
        probs in prop::collection::vec(dyadic(10), 12),
        bias in prop::collection::vec(dyadic(8), 3),
        target in 0usize..4,
    ) {
        let attn = AttnMatrix::new(3, 4, probs).unwrap();
        let b1 = Grid::new(Resolution::new(3, 1), bias.clone()).unwrap();
        let b2 = Grid::new(Resolution::new(3, 1), bias.iter().map(|v| 2.0 * v).collect()).unwrap();
        let t = BTreeSet::from([target]);
        let o1 = apply_bias(&attn, &b1, &t).unwrap();
        let o2 = apply_bias(&attn, &b2, &t).unwrap();
        for ((a, x1), x2) in attn.data().iter().zip(o1.data()).zip(o2.data()) {
            prop_assert_eq!(x2 - a, 2.0 * (x1 - a));
        }
    }

    #[test]
    fn resize_matches_independent_bilinear(
        seed in any::<u64>(),
        th in 1usize..17,
        tw in 1usize..17,
    ) {
        let mut r = rng(seed);
        let res = Resolution::new(r.gen_range(1..9), r.gen_range(1..9));
        let src = Grid::new(res, (0..res.area()).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
        let out = resize_mask(&src, Resolution::new(th, tw)).unwrap();
        prop_assert!(max_abs_diff(out.data(), &oracle_bilinear(&src, th, tw)) < 1e-6);
        let (lo, hi) = (src.min(), src.max());
        prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn resize_preserves_constants(c in 0.0f32..=1.0, sh in 1usize..9, sw in 1usize..9, th in 1usize..33, tw in 1usize..33) {
        let out = resize_mask(&Grid::filled(Resolution::new(sh, sw), c), Resolution::new(th, tw)).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == c));
    }

    /// Exact on dyadic inputs small enough that no sum rounds.
    #[test]
    fn merge_is_linear_in_the_mask(
        h in prop::collection::vec(dyadic(6), 18),
        s in prop::collection::vec(dyadic(6), 18),
        cn in prop::collection::vec(dyadic(6), 18),
        m1 in prop::collection::vec(dyadic(4), 9),
        m2 in prop::collection::vec(dyadic(4), 9),
    ) {
        let res = Resolution::new(3, 3);
        let f = |v: Vec<f32>| Feature::new(2, res, v).unwrap();
        let bundle = FeatureBundle { decoder_input: f(h), skip: f(s), control_feature: f(cn.clone()) };
        let sum: Vec<f32> = m1.iter().zip(&m2).map(|(a, b)| a + b).collect();
        let both = modulate_and_merge(&bundle, &Grid::new(res, sum).unwrap()).unwrap();
        let first = modulate_and_merge(&bundle, &Grid::new(res, m1).unwrap()).unwrap();
        for c in 0..2 {
            for p in 0..9 {
                let extra = m2[p] * cn[c * 9 + p];
                prop_assert_eq!(both.plane(c)[p], first.plane(c)[p] + extra);
            }
        }
    }

    #[test]
    fn constant_mask_equals_scalar(seed in any::<u64>(), c in 0.0f32..=1.0) {
        let mut r = rng(seed);
        let res = Resolution::new(4, 5);
        let mut f = || Feature::new(3, res, (0..60).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let bundle = FeatureBundle { decoder_input: f(), skip: f(), control_feature: f() };
        let a = modulate_and_merge(&bundle, &Grid::filled(res, c)).unwrap();
        let b = merge_scaled(&bundle, c).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cfg_matches_affine_oracle(seed in any::<u64>(), g in 0.0f32..20.0) {
        let mut r = rng(seed);
        let res = Resolution::new(4, 4);
        let mut f = || Feature::new(2, res, (0..32).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let (c, u) = (f(), f());
        let out = cfg_combine(&c, &u, g).unwrap();
        for ((&o, &cv), &uv) in out.data().iter().zip(c.data()).zip(u.data()) {
            let want = f64::from(uv) + f64::from(g) * (f64::from(cv) - f64::from(uv));
            prop_assert!((f64::from(o) - want).abs() <= 1e-7 * want.abs().max(1.0));
        }
        prop_assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u.clone());
        prop_assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c.clone());
    }

    #[test]
    fn archive_container_round_trips_bit_exactly(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ra = random_archive(&mut r, 4, 3, 8);
        let bytes = archive_to_container(&ra.archive).unwrap().to_bytes().unwrap();
        let back = archive_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(&back, &ra.archive);
        prop_assert_eq!(archive_to_container(&back).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn raw_container_preserves_float_bits(bits in prop::collection::vec(any::<u32>(), 0..40), step in any::<u32>()) {
        let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let c = Container {
            meta: serde_json::json!({"kind": "raw"}),
            entries: vec![Entry { tag: Tag::Bias, step, layer: 2, module: 1, rows: 1, cols: values.len() as u32, values }],
        };
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let got: Vec<u32> = back.entries[0].values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
        prop_assert_eq!(back.entries[0].step, step);
    }
}

const VOCAB: [&str; 12] = [
    "cat",
    "holding",
    "umbrella",
    "extraordinarily",
    "red",
    "kite",
    "wanderer",
    "on",
    "hill",
    "lamp",
    "quietly",
    "moonlit",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Distinct random words; roles drawn from disjoint slices.
    #[test]
    fn role_indices_partition_and_decode(order in Just(VOCAB.to_vec()).prop_shuffle(), n_words in 4usize..7, n_nc in 1usize..3, n_c in 0usize..2) {
        let words = &order[..n_words];
        let prompt = words.join(" ");
        let nc: Vec<String> = words[..n_nc].iter().map(|s| s.to_string()).collect();
        let c: Vec<String> = words[n_nc..n_nc + n_c].iter().map(|s| s.to_string()).collect();
        let t: Vec<String> = if n_c > 0 { vec![words[n_words - 1].to_string()] } else { vec![] };
        let spec = PromptSpec {
            target_prompt: prompt.clone(),
            surrogate_prompt: prompt.clone(),
            non_conflicting_words: nc.clone(),
            conflicting_words: c.clone(),
            target_words: t.clone(),
        };
        let tok = ToyTokenizer::new(24, 5).unwrap();
        let roles = resolve_token_roles(&spec, &tok).unwrap();
        prop_assert_eq!(&roles, &resolve_token_roles(&spec, &tok).unwrap());
        prop_assert!(roles.non_conflicting_indices.is_disjoint(&roles.conflicting_indices));
        prop_assert!(roles.non_conflicting_indices.is_disjoint(&roles.special_indices_surrogate));
        prop_assert!(roles.conflicting_indices.is_disjoint(&roles.special_indices_surrogate));
        prop_assert!(roles.target_indices.is_disjoint(&roles.special_indices_target));
        let decode = |idx: &BTreeSet<usize>| {
            let ids: Vec<u32> = idx.iter().map(|&i| roles.surrogate_token_ids[i]).collect();
            tok.decode(&ids)
        };
        prop_assert_eq!(decode(&roles.non_conflicting_indices), nc.join(" "));
        prop_assert_eq!(decode(&roles.conflicting_indices), c.join(" "));
        prop_assert_eq!(roles.n_tar(), tok.encode_words(&t.join(" ")).len());
    }
}
