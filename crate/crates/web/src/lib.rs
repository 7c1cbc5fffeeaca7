//! Browser front end: three small simulations behind JSON-in, JSON-out calls.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use tierlm::carbon::{ns_to_seconds, CarbonParams, Tiers};
use tierlm::engine::{simulate_decode, ComputeCost, EngineConfig, LinkId, Purpose};
use tierlm::error::Result;
use tierlm::hbm::HbmPolicy;
use tierlm::host::{HostConfig, HostMode};
use tierlm::model::{ModelSpec, PrecisionClass};
use tierlm::precision::{search_ratio, PrecisionPlan, RatioSearchParams, SearchReport, SyntheticSurface};
use tierlm::trace::{ActivationTrace, SyntheticTraceParams};

fn demo_spec(layers: u32, ffn: u32, k: u32) -> ModelSpec {
    ModelSpec {
        num_layers: layers,
        d_model: 64,
        ffn_neurons_per_layer: ffn,
        attention_params_per_layer: 4 * 64 * 64,
        other_params: 0,
        active_per_layer: k,
        ..ModelSpec::default()
    }
}

fn synthetic(spec: &ModelSpec, tokens: u32, overlap: f64, seed: u64) -> Result<ActivationTrace> {
    ActivationTrace::generate(
        spec,
        &SyntheticTraceParams {
            num_tokens: tokens,
            overlap,
            seed,
            ..Default::default()
        },
    )
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct HitRatioParams {
    pub overlap: f64,
    pub tokens: u32,
    pub layers: u32,
    pub ffn: u32,
    pub k: u32,
    /// FP16, INT8 and INT4 fractions of the active neurons.
    pub fractions: [f64; 3],
    pub policy: HbmPolicy,
    pub seed: u64,
}

impl Default for HitRatioParams {
    fn default() -> Self {
        Self {
            overlap: 0.8,
            tokens: 32,
            layers: 4,
            ffn: 2048,
            k: 256,
            fractions: [0.25, 0.25, 0.5],
            policy: HbmPolicy::Atu,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HitRatioResult {
    pub per_token: Vec<f64>,
    pub bytes_per_token: Vec<u64>,
    pub hit_ratio: f64,
    pub mean_overlap: f64,
}

/// HBM hit ratio per token for a synthetic trace at the given overlap.
pub fn hit_ratio(p: &HitRatioParams) -> Result<HitRatioResult> {
    let spec = demo_spec(p.layers, p.ffn, p.k);
    let trace = synthetic(&spec, p.tokens, p.overlap, p.seed)?;
    let plan = PrecisionPlan::new(vec![
        (PrecisionClass::fp16(), p.fractions[0]),
        (PrecisionClass::int8(), p.fractions[1]),
        (PrecisionClass::int4(), p.fractions[2]),
    ])?;
    let cfg = EngineConfig {
        policy: p.policy,
        plan,
        ..EngineConfig::default()
    };
    let out = simulate_decode(&spec, &trace, &Tiers::default(), &cfg, &CarbonParams::default())?;
    let mut hits = vec![0u64; p.tokens as usize];
    let mut accesses = vec![0u64; p.tokens as usize];
    let mut bytes = vec![0u64; p.tokens as usize];
    for h in &out.timeline.hits {
        let t = h.token as usize;
        hits[t] += h.hits as u64;
        accesses[t] += (h.hits + h.misses) as u64;
        bytes[t] += h.bytes;
    }
    let per_token = hits
        .iter()
        .zip(&accesses)
        .map(|(&h, &a)| if a == 0 { 0.0 } else { h as f64 / a as f64 })
        .collect();
    Ok(HitRatioResult {
        per_token,
        bytes_per_token: bytes,
        hit_ratio: out.metrics.hbm_hit_ratio,
        mean_overlap: trace.mean_overlap(),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct PreloadParams {
    pub layers: u32,
    pub tokens: u32,
    pub lookahead: u32,
    pub compute_ms: f64,
    /// Time for one whole-layer read from SSD.
    pub load_ms: f64,
    pub lanes: u32,
    pub dynamic_layers: u32,
    pub seed: u64,
}

impl Default for PreloadParams {
    fn default() -> Self {
        Self {
            layers: 8,
            tokens: 3,
            lookahead: 2,
            compute_ms: 10.0,
            load_ms: 20.0,
            lanes: 2,
            dynamic_layers: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Bar {
    pub row: String,
    pub kind: &'static str,
    pub start_ms: f64,
    pub end_ms: f64,
    pub label: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreloadResult {
    pub bars: Vec<Bar>,
    pub rows: Vec<String>,
    pub end_ms: f64,
    pub stall_ms: f64,
    pub tokens_per_second: f64,
}

fn ms(ns: u64) -> f64 {
    ns_to_seconds(ns) * 1e3
}

/// Compute, stall and SSD transfer intervals of a tiered run that streams
/// every active neuron from DRAM.
pub fn preload_timeline(p: &PreloadParams) -> Result<PreloadResult> {
    let spec = demo_spec(p.layers, 256, 32);
    let trace = synthetic(&spec, p.tokens, 0.8, p.seed)?;
    let mut tiers = Tiers::default();
    tiers.ssd.latency = 0.0;
    tiers.ssd.bandwidth = spec.full_layer_bytes() as f64 / (p.load_ms / 1e3);
    tiers.ssd.lanes = p.lanes;
    tiers.dram.latency = 0.0;
    tiers.dram.bandwidth = 1e18;
    let cfg = EngineConfig {
        policy: HbmPolicy::Off,
        plan: PrecisionPlan::single(PrecisionClass::fp16()),
        lookahead: p.lookahead,
        compute_seconds: ComputeCost::Uniform(p.compute_ms / 1e3),
        host: HostConfig {
            mode: HostMode::Tiered,
            fixed_layers: None,
            dynamic_layers: p.dynamic_layers,
        },
        ..EngineConfig::default()
    };
    let out = simulate_decode(&spec, &trace, &tiers, &cfg, &CarbonParams::default())?;

    let mut rows = vec!["compute".to_string()];
    rows.extend((0..p.lanes).map(|l| format!("ssd lane {l}")));
    let mut bars = Vec::new();
    for s in &out.timeline.steps {
        let label = format!("t{} L{}", s.token, s.layer);
        if s.stall() > 0 {
            bars.push(Bar {
                row: rows[0].clone(),
                kind: "stall",
                start_ms: ms(s.start - s.stall()),
                end_ms: ms(s.start),
                label: label.clone(),
            });
        }
        bars.push(Bar {
            row: rows[0].clone(),
            kind: "compute",
            start_ms: ms(s.start),
            end_ms: ms(s.end),
            label,
        });
    }
    for t in out.timeline.transfers.iter().filter(|t| t.link == LinkId::SsdToDram) {
        bars.push(Bar {
            row: format!("ssd lane {}", t.lane),
            kind: match t.purpose {
                Purpose::Preload => "preload",
                Purpose::Demand => "demand",
            },
            start_ms: ms(t.start),
            end_ms: ms(t.end),
            label: format!("L{}", t.layer),
        });
    }
    let stalls = &out.metrics.stalls;
    Ok(PreloadResult {
        bars,
        rows,
        end_ms: ms(out.timeline.end_ns),
        stall_ms: (stalls.dram_wait_seconds + stalls.ssd_wait_seconds) * 1e3,
        tokens_per_second: out.metrics.tokens_per_second,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    /// Where the synthetic uncertainty surface bottoms out.
    pub optimum: [f64; 2],
    pub step: f64,
    pub r_low_init: f64,
    pub bit_ratio: u32,
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            optimum: [0.15, 0.4],
            step: 0.05,
            r_low_init: 1.0,
            bit_ratio: 4,
            sharpness: 4.0,
            seed: 0,
        }
    }
}

/// The step search over a synthetic entropy surface.
pub fn ratio_search(p: &SearchParams) -> Result<SearchReport> {
    let mut surface = SyntheticSurface::new(p.optimum.to_vec(), p.seed);
    surface.sharpness = p.sharpness;
    let params = RatioSearchParams {
        r_low_init: p.r_low_init,
        step: p.step,
        bit_ratio: p.bit_ratio,
        evaluate_clamped_endpoint: false,
    };
    search_ratio(&mut surface, &params)
}

fn call<P, R>(params: &str, f: impl FnOnce(&P) -> Result<R>) -> std::result::Result<String, JsError>
where
    P: for<'de> Deserialize<'de>,
    R: Serialize,
{
    let p: P = serde_json::from_str(params).map_err(|e| JsError::new(&format!("bad parameters: {e}")))?;
    let r = f(&p).map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = hitRatio)]
pub fn hit_ratio_js(params: &str) -> std::result::Result<String, JsError> {
    call(params, hit_ratio)
}

#[wasm_bindgen(js_name = preloadTimeline)]
pub fn preload_timeline_js(params: &str) -> std::result::Result<String, JsError> {
    call(params, preload_timeline)
}

#[wasm_bindgen(js_name = ratioSearch)]
pub fn ratio_search_js(params: &str) -> std::result::Result<String, JsError> {
    call(params, ratio_search)
}
