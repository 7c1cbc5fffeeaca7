//! End-to-end timing checks against closed-form schedules.

use tierlm::carbon::{ns_to_seconds, CarbonParams, Tiers};
use tierlm::engine::{
    simulate_decode, simulate_decode_with_store, ComputeCost, EngineConfig, LinkId, Purpose, SimOutput,
};
use tierlm::hbm::HbmPolicy;
use tierlm::host::{write_model_image, FileSsd, HostConfig, HostMode};
use tierlm::model::{ModelSpec, PrecisionClass};
use tierlm::precision::PrecisionPlan;
use tierlm::trace::{ActivationTrace, SyntheticTraceParams};

fn spec(layers: u32) -> ModelSpec {
    ModelSpec {
        num_layers: layers,
        d_model: 16,
        ffn_neurons_per_layer: 64,
        attention_params_per_layer: 1024,
        other_params: 0,
        active_per_layer: 16,
        ..ModelSpec::default()
    }
}

fn trace(spec: &ModelSpec, tokens: u32, seed: u64) -> ActivationTrace {
    ActivationTrace::generate(
        spec,
        &SyntheticTraceParams {
            num_tokens: tokens,
            overlap: 0.8,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

fn fp16() -> PrecisionPlan {
    PrecisionPlan::single(PrecisionClass::fp16())
}

fn run(spec: &ModelSpec, trace: &ActivationTrace, tiers: &Tiers, cfg: &EngineConfig) -> SimOutput {
    simulate_decode(spec, trace, tiers, cfg, &CarbonParams::default()).unwrap()
}

/// A DRAM->HBM link where loading one layer's active neurons takes `x_ns`.
fn tiers_with_layer_load(spec: &ModelSpec, x_ns: u64) -> Tiers {
    let mut tiers = Tiers::default();
    let bytes = spec.active_per_layer as u64 * spec.class_bytes(spec.storage_class());
    tiers.dram.latency = 0.0;
    tiers.dram.bandwidth = bytes as f64 / ns_to_seconds(x_ns);
    assert_eq!(tiers.dram.transfer_ns(bytes), x_ns);
    tiers
}

#[test]
fn resident_ttft_is_layers_times_compute_and_scales_linearly() {
    let cfg = EngineConfig {
        policy: HbmPolicy::Resident,
        plan: fp16(),
        compute_seconds: ComputeCost::Uniform(0.002),
        prefill_seconds: 0.05,
        ..EngineConfig::default()
    };
    let tiers = Tiers::default();
    let s8 = spec(8);
    let s16 = spec(16);
    let t8 = run(&s8, &trace(&s8, 4, 1), &tiers, &cfg).metrics;
    let t16 = run(&s16, &trace(&s16, 4, 1), &tiers, &cfg).metrics;
    assert!((t8.time_to_first_token_seconds - (0.05 + 8.0 * 0.002)).abs() < 1e-12);
    let decode8 = t8.time_to_first_token_seconds - 0.05;
    let decode16 = t16.time_to_first_token_seconds - 0.05;
    assert!((decode16 - 2.0 * decode8).abs() < 1e-12);
    assert!((t8.tokens_per_second - 1.0 / (8.0 * 0.002)).abs() < 1e-6);
}

#[test]
fn cold_first_token_when_compute_bound() {
    // Loads run one layer ahead, so only the first load is exposed.
    let s = spec(6);
    let (x, c) = (300_000u64, 1_000_000u64);
    let cfg = EngineConfig {
        policy: HbmPolicy::Off,
        plan: fp16(),
        compute_seconds: ComputeCost::Uniform(ns_to_seconds(c)),
        ..EngineConfig::default()
    };
    let out = run(&s, &trace(&s, 3, 2), &tiers_with_layer_load(&s, x), &cfg);
    let first_end = out
        .timeline
        .steps
        .iter()
        .filter(|r| r.token == 0)
        .map(|r| r.end)
        .max()
        .unwrap();
    assert_eq!(first_end, x + 6 * c);
    assert!((out.metrics.time_to_first_token_seconds - ns_to_seconds(first_end)).abs() < 1e-12);
}

#[test]
fn cold_first_token_when_transfer_bound() {
    let s = spec(6);
    let (x, c) = (1_000_000u64, 200_000u64);
    let cfg = EngineConfig {
        policy: HbmPolicy::Off,
        plan: fp16(),
        compute_seconds: ComputeCost::Uniform(ns_to_seconds(c)),
        ..EngineConfig::default()
    };
    let out = run(&s, &trace(&s, 3, 2), &tiers_with_layer_load(&s, x), &cfg);
    let first_end = out
        .timeline
        .steps
        .iter()
        .filter(|r| r.token == 0)
        .map(|r| r.end)
        .max()
        .unwrap();
    assert_eq!(first_end, 6 * x + c);
    let total_stall: u64 = out.timeline.steps.iter().map(|r| r.dram_wait).sum();
    assert_eq!(out.timeline.end_ns, 3 * 6 * c + total_stall);
}

fn tiered_rig(lookahead: u32, layers: u32) -> (ModelSpec, Tiers, EngineConfig) {
    let s = spec(layers);
    let mut tiers = Tiers::default();
    tiers.ssd.latency = 0.0;
    tiers.ssd.bandwidth = s.full_layer_bytes() as f64 / 0.020;
    tiers.ssd.lanes = 2;
    tiers.dram.latency = 0.0;
    tiers.dram.bandwidth = 1e18;
    let cfg = EngineConfig {
        policy: HbmPolicy::Off,
        plan: fp16(),
        lookahead,
        compute_seconds: ComputeCost::Uniform(0.010),
        host: HostConfig {
            mode: HostMode::Tiered,
            fixed_layers: None,
            dynamic_layers: 3,
        },
        ..EngineConfig::default()
    };
    (s, tiers, cfg)
}

#[test]
fn preloads_hide_behind_two_layers_of_compute() {
    let (s, tiers, cfg) = tiered_rig(2, 6);
    let out = run(&s, &trace(&s, 8, 3), &tiers, &cfg);
    let late_stall: u64 = out.timeline.steps_from(1).map(|r| r.stall()).sum();
    assert_eq!(late_stall, 0);
    assert!(out.metrics.transfers.preloads > 0);
    assert!((out.metrics.tokens_per_second - 1.0 / (6.0 * 0.010)).abs() < 1e-6);

    let (s, tiers, cfg) = tiered_rig(1, 6);
    let out = run(&s, &trace(&s, 8, 3), &tiers, &cfg);
    let late_stall: u64 = out.timeline.steps_from(1).map(|r| r.stall()).sum();
    assert!(late_stall > 0, "one layer of lookahead cannot hide a 20 ms load");
}

#[test]
fn fixed_layers_never_touch_the_ssd() {
    let (s, tiers, cfg) = tiered_rig(2, 8);
    let out = run(&s, &trace(&s, 6, 4), &tiers, &cfg);
    let fixed = cfg.fixed_layers(&s);
    assert_eq!(fixed, 2);
    let ssd: Vec<_> = out
        .timeline
        .transfers
        .iter()
        .filter(|t| t.link == LinkId::SsdToDram)
        .collect();
    assert!(!ssd.is_empty());
    assert!(ssd.iter().all(|t| t.layer >= fixed));
    assert!(ssd.iter().any(|t| t.purpose == Purpose::Preload));
    assert!(out.metrics.peak_dram_cache_bytes <= cfg.dram_footprint_bytes(&s, &tiers));
}

#[test]
fn file_backed_ssd_matches_the_latency_model() {
    let (s, tiers, cfg) = tiered_rig(2, 6);
    let tr = trace(&s, 6, 5);
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("model.img");
    let written = write_model_image(&image, &s).unwrap();
    assert!(written >= s.full_model_ffn_bytes());
    let mut store = FileSsd::open(&image, &s).unwrap();
    let from_file = simulate_decode_with_store(&s, &tr, &tiers, &cfg, &CarbonParams::default(), &mut store).unwrap();
    let modelled = run(&s, &tr, &tiers, &cfg);
    assert_eq!(from_file.timeline, modelled.timeline);
    let ssd_bytes = modelled.metrics.bytes.ssd_to_dram_demand + modelled.metrics.bytes.ssd_to_dram_preload;
    assert!(store.bytes_read() >= ssd_bytes);
}

#[test]
fn ssd_demand_mode_reads_every_miss_from_ssd() {
    let s = spec(4);
    let cfg = EngineConfig {
        policy: HbmPolicy::Off,
        plan: fp16(),
        host: HostConfig {
            mode: HostMode::SsdDemand,
            ..HostConfig::default()
        },
        ..EngineConfig::default()
    };
    let out = run(&s, &trace(&s, 3, 6), &Tiers::default(), &cfg);
    assert_eq!(out.metrics.dram_footprint_bytes, 0);
    assert_eq!(out.metrics.bytes.ssd_to_dram_preload, 0);
    assert_eq!(out.metrics.bytes.ssd_to_dram_demand, out.metrics.bytes.dram_to_hbm);
}
