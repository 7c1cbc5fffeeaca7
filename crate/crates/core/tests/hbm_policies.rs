use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tierlm::hbm::{HbmPolicy, LayerCacheUnit};
use tierlm::model::{ClassId, ModelSpec, PrecisionClass};
use tierlm::precision::{partition_by_score, PrecisionPlan};
use tierlm::trace::{ActivationTrace, SyntheticTraceParams};

const CLASS_BYTES: [u64; 3] = [64, 32, 16];

fn spec(ffn: u32, k: u32) -> ModelSpec {
    ModelSpec {
        num_layers: 2,
        d_model: 16,
        ffn_neurons_per_layer: ffn,
        active_per_layer: k,
        ..ModelSpec::default()
    }
}

/// Random required sets with distinct indices, sorted by index.
fn required_sets(ffn: u32, k: usize, steps: usize) -> impl Strategy<Value = Vec<Vec<(u32, ClassId)>>> {
    let set = proptest::sample::subsequence((0..ffn).collect::<Vec<_>>(), 0..=k)
        .prop_flat_map(|idx| {
            let n = idx.len();
            (Just(idx), proptest::collection::vec(0u8..3, n))
        })
        .prop_map(|(idx, cls)| idx.into_iter().zip(cls.into_iter().map(ClassId)).collect::<Vec<_>>());
    proptest::collection::vec(set, 1..=steps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// ATU keeps exactly the previous required set, so a neuron hits iff it was
    /// required last step at the same precision.
    #[test]
    fn atu_matches_from_scratch_diff(steps in required_sets(40, 12, 20)) {
        let mut unit = LayerCacheUnit::new(0, 12);
        let mut previous: HashSet<(u32, ClassId)> = HashSet::new();
        for required in &steps {
            let out = unit.atu_update(required, &CLASS_BYTES).unwrap();
            let expected_misses: Vec<(u32, ClassId)> = required.iter().copied().filter(|e| !previous.contains(e)).collect();
            let mut got: Vec<(u32, ClassId)> = out.misses.iter().map(|(n, c)| (n.index, *c)).collect();
            got.sort_unstable();
            prop_assert_eq!(&got, &expected_misses);
            prop_assert_eq!(out.hits.len() + out.misses.len(), required.len());
            let bytes: u64 = expected_misses.iter().map(|(_, c)| CLASS_BYTES[c.index()]).sum();
            prop_assert_eq!(out.bytes_to_load, bytes);
            let resident: HashSet<(u32, ClassId)> = unit.entries().iter().map(|e| (e.neuron.index, e.class)).collect();
            previous = required.iter().copied().collect();
            prop_assert_eq!(&resident, &previous);
        }
    }

    /// LRU never holds more than its slots, always holds the current set, and
    /// reports a hit only for an entry already resident at the right precision.
    #[test]
    fn lru_invariants(steps in required_sets(30, 8, 30), slack in 0u32..10) {
        let mut unit = LayerCacheUnit::for_policy(0, 8, HbmPolicy::Lru { slack });
        for required in &steps {
            let before: HashSet<(u32, ClassId)> = unit.entries().iter().map(|e| (e.neuron.index, e.class)).collect();
            let out = unit.lru_update(required, &CLASS_BYTES).unwrap();
            prop_assert!(unit.len() <= (8 + slack) as usize);
            let after: HashSet<(u32, ClassId)> = unit.entries().iter().map(|e| (e.neuron.index, e.class)).collect();
            for e in required {
                prop_assert!(after.contains(e));
            }
            for h in &out.hits {
                prop_assert!(before.contains(&(h.neuron.index, h.class)));
            }
            for (n, c) in &out.misses {
                prop_assert!(!before.contains(&(n.index, *c)));
            }
        }
    }
}

fn full_coverage_plan(rng: &mut ChaCha8Rng) -> PrecisionPlan {
    let a = rng.gen_range(0..=4) as f64 / 4.0;
    let b = rng.gen_range(0..=(4 - (a * 4.0) as u32)) as f64 / 4.0;
    PrecisionPlan::new(vec![
        (PrecisionClass::fp16(), a),
        (PrecisionClass::int8(), b),
        (PrecisionClass::int4(), 1.0 - a - b),
    ])
    .unwrap()
}

#[test]
fn lru_without_slack_equals_atu_under_full_coverage() {
    let s = spec(64, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for instance in 0..100u64 {
        let p = rng.gen_range(0.0..=1.0);
        let trace = ActivationTrace::generate(
            &s,
            &SyntheticTraceParams {
                num_tokens: 30,
                overlap: p,
                seed: instance,
                ..Default::default()
            },
        )
        .unwrap();
        let plan = full_coverage_plan(&mut rng);
        for layer in 0..s.num_layers {
            let mut atu = LayerCacheUnit::for_policy(layer, 16, HbmPolicy::Atu);
            let mut lru = LayerCacheUnit::for_policy(layer, 16, HbmPolicy::Lru { slack: 0 });
            for t in 0..trace.num_tokens() {
                let required = partition_by_score(trace.record(t, layer), &plan, &s)
                    .unwrap()
                    .required_by_index();
                let a = atu.atu_update(&required, &CLASS_BYTES).unwrap();
                let l = lru.lru_update(&required, &CLASS_BYTES).unwrap();
                let mut am: Vec<_> = a.misses.clone();
                let mut lm: Vec<_> = l.misses.clone();
                am.sort_unstable();
                lm.sort_unstable();
                assert_eq!(am, lm, "instance {instance}, layer {layer}, token {t}");
                assert_eq!(a.bytes_to_load, l.bytes_to_load);
            }
            assert_eq!(atu.hit_stats(), lru.hit_stats());
        }
    }
}

#[test]
fn lru_with_room_for_every_neuron_stops_evicting() {
    let (ffn, k) = (64u32, 16u32);
    let s = spec(ffn, k);
    let plan = PrecisionPlan::single(PrecisionClass::fp16());
    let trace = ActivationTrace::generate(
        &s,
        &SyntheticTraceParams {
            num_tokens: 80,
            overlap: 0.3,
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let mut unit = LayerCacheUnit::for_policy(0, k, HbmPolicy::Lru { slack: ffn - k });
    let mut seen = HashSet::new();
    let mut late_hits = 0;
    for t in 0..trace.num_tokens() {
        let required = partition_by_score(trace.record(t, 0), &plan, &s)
            .unwrap()
            .required_by_index();
        let warm = required.iter().all(|(i, _)| seen.contains(i));
        let out = unit.lru_update(&required, &CLASS_BYTES).unwrap();
        assert!(out.evictions.is_empty(), "token {t} evicted");
        if warm {
            assert!(out.misses.is_empty());
            late_hits += 1;
        }
        seen.extend(required.iter().map(|&(i, _)| i));
    }
    assert!(late_hits > 0);
}

#[test]
fn streaming_never_hits() {
    let mut unit = LayerCacheUnit::for_policy(0, 4, HbmPolicy::Off);
    let required = [(1, ClassId(0)), (2, ClassId(1))];
    for _ in 0..3 {
        let out = unit.stream_update(&required, &CLASS_BYTES).unwrap();
        assert!(out.hits.is_empty());
        assert_eq!(out.bytes_to_load, 96);
    }
}
