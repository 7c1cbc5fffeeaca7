//! Discrete-event decode simulation in integer-nanosecond virtual time.
//!
//! Decode runs as a sequence of global steps `g = token * L + layer`. When step
//! `g` starts computing, the preloader is asked for step `g + d` and the cache
//! misses of step `g + 1` are resolved and queued, so transfers for the next
//! layer overlap the current one. Each link serves its demand queue before its
//! preload queue, one transfer per lane at a time.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::carbon::{
    ns_to_seconds, seconds_to_ns, CarbonParams, CarbonReport, EnergyBreakdown, EnergyLedger, TierSpec, TierUsage, Tiers,
};
use crate::error::{Error, Result};
use crate::hbm::{HbmPolicy, HitStats, LayerCacheUnit};
use crate::host::{DramCache, DramCacheConfig, HostConfig, HostMode, LatencySsd, PreloadSchedule, SsdStore};
use crate::model::{ClassId, ModelSpec};
use crate::precision::{partition_with_ids, PrecisionPlan};
use crate::trace::{predict_with_lookahead, ActivationTrace, LookaheadAccuracy};

/// Per-layer compute time: one value for every layer, or one per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComputeCost {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl ComputeCost {
    fn per_layer_ns(&self, layers: u32) -> Result<Vec<u64>> {
        let secs = match self {
            ComputeCost::Uniform(s) => vec![*s; layers as usize],
            ComputeCost::PerLayer(v) => {
                if v.len() != layers as usize {
                    return Err(Error::config(
                        "engine.compute_seconds",
                        format!("expected {layers} entries, got {}", v.len()),
                    ));
                }
                v.clone()
            }
        };
        secs.iter()
            .enumerate()
            .map(|(i, &s)| {
                let ns = if s.is_finite() { seconds_to_ns(s) } else { 0 };
                if !(s > 0.0) || ns == 0 {
                    Err(Error::config(
                        format!("engine.compute_seconds[{i}]"),
                        "must be positive",
                    ))
                } else {
                    Ok(ns)
                }
            })
            .collect()
    }
}

fn default_lookahead() -> u32 {
    2
}

fn default_compute() -> ComputeCost {
    ComputeCost::Uniform(1e-4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub policy: HbmPolicy,
    #[serde(default = "PrecisionPlan::standard_mixed")]
    pub plan: PrecisionPlan,
    /// Preload lookahead `d`, in layers.
    #[serde(default = "default_lookahead")]
    pub lookahead: u32,
    /// Preload only the predicted active neurons instead of whole layers.
    #[serde(default)]
    pub neuron_level_preload: bool,
    #[serde(default)]
    pub accuracy: LookaheadAccuracy,
    #[serde(default)]
    pub prediction_seed: u64,
    #[serde(default = "default_compute")]
    pub compute_seconds: ComputeCost,
    #[serde(default)]
    pub prefill_seconds: f64,
    /// Token-boundary overhead, charged after every token.
    #[serde(default)]
    pub sampling_seconds: f64,
    #[serde(default)]
    pub host: HostConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: HbmPolicy::default(),
            plan: PrecisionPlan::standard_mixed(),
            lookahead: default_lookahead(),
            neuron_level_preload: false,
            accuracy: LookaheadAccuracy::default(),
            prediction_seed: 0,
            compute_seconds: default_compute(),
            prefill_seconds: 0.0,
            sampling_seconds: 0.0,
            host: HostConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn fixed_layers(&self, spec: &ModelSpec) -> u32 {
        self.host.fixed_layers.unwrap_or(self.lookahead).min(spec.num_layers)
    }

    pub fn dram_cache_config(&self, spec: &ModelSpec, tiers: &Tiers) -> DramCacheConfig {
        DramCacheConfig {
            fixed_layers: self.fixed_layers(spec),
            dynamic_capacity_layers: self.host.dynamic_layers,
            capacity_bytes: tiers.dram.capacity,
        }
    }

    /// HBM bytes reserved by the cache units (or the whole model when resident).
    pub fn hbm_footprint_bytes(&self, spec: &ModelSpec) -> Result<u64> {
        Ok(match self.policy {
            HbmPolicy::Resident => spec.full_model_ffn_bytes(),
            HbmPolicy::Lru { slack } => {
                spec.num_layers as u64
                    * (spec.layer_resident_bytes(&self.plan)? + slack as u64 * spec.class_bytes(spec.storage_class()))
            }
            HbmPolicy::Atu | HbmPolicy::Off => spec.num_layers as u64 * spec.layer_resident_bytes(&self.plan)?,
        })
    }

    /// DRAM bytes held for the whole run.
    pub fn dram_footprint_bytes(&self, spec: &ModelSpec, tiers: &Tiers) -> u64 {
        match self.host.mode {
            HostMode::DramResident => spec.full_model_ffn_bytes(),
            HostMode::SsdDemand => 0,
            HostMode::Tiered => self.dram_cache_config(spec, tiers).footprint_bytes(spec),
        }
    }

    pub fn validate(&self, spec: &ModelSpec, tiers: &Tiers) -> Result<()> {
        spec.validate()?;
        tiers.validate()?;
        self.plan.check_against(spec)?;
        if self.lookahead == 0 {
            return Err(Error::config("engine.lookahead", "must be >= 1"));
        }
        self.compute_seconds.per_layer_ns(spec.num_layers)?;
        for (name, v) in [
            ("prefill_seconds", self.prefill_seconds),
            ("sampling_seconds", self.sampling_seconds),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("engine.{name}"), "must be >= 0"));
            }
        }
        self.accuracy.validate()?;
        let hbm = self.hbm_footprint_bytes(spec)?;
        if hbm > tiers.hbm.capacity {
            return Err(Error::config(
                "engine.plan",
                format!("HBM needs {hbm} bytes but capacity is {}", tiers.hbm.capacity),
            ));
        }
        match self.host.mode {
            HostMode::DramResident => {
                if spec.full_model_ffn_bytes() > tiers.dram.capacity {
                    return Err(Error::config(
                        "tiers.dram.capacity",
                        format!("model needs {} bytes of DRAM", spec.full_model_ffn_bytes()),
                    ));
                }
            }
            HostMode::Tiered => self.dram_cache_config(spec, tiers).validate(spec)?,
            HostMode::SsdDemand => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkId {
    SsdToDram,
    DramToHbm,
}

impl LinkId {
    pub fn label(self) -> &'static str {
        match self {
            LinkId::SsdToDram => "ssd->dram",
            LinkId::DramToHbm => "dram->hbm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Demand,
    Preload,
}

impl Purpose {
    pub fn label(self) -> &'static str {
        match self {
            Purpose::Demand => "demand",
            Purpose::Preload => "preload",
        }
    }
}

/// One transfer as served by a link lane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub link: LinkId,
    pub lane: u32,
    pub start: u64,
    pub end: u64,
    pub bytes: u64,
    pub purpose: Purpose,
    pub layer: u32,
    /// The global step this data serves.
    pub step: u64,
}

/// Timing of one layer's compute. All times in nanoseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: u32,
    pub layer: u32,
    /// When compute could have started had its data been ready.
    pub earliest: u64,
    pub start: u64,
    pub end: u64,
    pub dram_wait: u64,
    pub ssd_wait: u64,
}

impl StepRecord {
    pub fn stall(&self) -> u64 {
        self.start - self.earliest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitRecord {
    pub token: u32,
    pub layer: u32,
    pub hits: u32,
    pub misses: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub prefill_ns: u64,
    pub sampling_ns: u64,
    pub end_ns: u64,
    pub transfers: Vec<TransferEvent>,
    pub steps: Vec<StepRecord>,
    pub hits: Vec<HitRecord>,
}

impl Timeline {
    /// `link,lane,start,end,bytes,purpose,layer,step`, times in ns.
    pub fn transfers_csv(&self) -> String {
        let mut out = String::from("link,lane,start,end,bytes,purpose,layer,step\n");
        for t in &self.transfers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.link.label(),
                t.lane,
                t.start,
                t.end,
                t.bytes,
                t.purpose.label(),
                t.layer,
                t.step
            );
        }
        out
    }

    pub fn hits_csv(&self) -> String {
        let mut out = String::from("token,layer,hits,misses,bytes\n");
        for h in &self.hits {
            let _ = writeln!(out, "{},{},{},{},{}", h.token, h.layer, h.hits, h.misses, h.bytes);
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("token,layer,earliest,start,end,dram_wait,ssd_wait\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.token, s.layer, s.earliest, s.start, s.end, s.dram_wait, s.ssd_wait
            );
        }
        out
    }

    /// Steps from token `from_token` on.
    pub fn steps_from(&self, from_token: u32) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.token >= from_token)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkBytes {
    pub dram_to_hbm: u64,
    pub ssd_to_dram_demand: u64,
    pub ssd_to_dram_preload: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferCounts {
    pub hbm_loads: u64,
    pub demand_ssd_fetches: u64,
    pub preloads: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stalls {
    pub dram_wait_seconds: f64,
    pub ssd_wait_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tokens: u32,
    pub layers: u32,
    pub tokens_per_second: f64,
    pub time_to_first_token_seconds: f64,
    pub total_seconds: f64,
    pub decode_seconds: f64,
    pub prefill_seconds: f64,
    pub compute_seconds: f64,
    pub per_layer_compute_seconds: Vec<f64>,
    pub stalls: Stalls,
    pub sampling_seconds: f64,
    pub hbm: HitStats,
    pub hbm_hit_ratio: f64,
    pub per_layer_hbm: Vec<HitStats>,
    /// HBM-missed neurons found in DRAM.
    pub dram: HitStats,
    pub dram_hit_ratio: f64,
    pub bytes: LinkBytes,
    pub transfers: TransferCounts,
    pub hbm_footprint_bytes: u64,
    pub dram_footprint_bytes: u64,
    pub peak_dram_cache_bytes: u64,
    pub energy: EnergyLedger,
    pub energy_breakdown: EnergyBreakdown,
    pub carbon: CarbonReport,
}

/// Prefill plus the first decode pass.
pub fn time_to_first_token(metrics: &Metrics) -> f64 {
    metrics.time_to_first_token_seconds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub metrics: Metrics,
    pub timeline: Timeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    TransferDone { id: usize, lane: u32 },
    ComputeDone { step: u64 },
    Wake,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Kind {
    Hop { step: u64 },
    SsdDemand,
    Preload { neurons: Vec<u32> },
}

#[derive(Debug)]
struct Transfer {
    link: LinkId,
    bytes: u64,
    purpose: Purpose,
    layer: u32,
    step: u64,
    waiting: u32,
    dependents: Vec<usize>,
    kind: Kind,
}

#[derive(Debug)]
struct Link {
    spec: TierSpec,
    busy: Vec<bool>,
    demand: VecDeque<usize>,
    preload: VecDeque<usize>,
}

impl Link {
    fn new(spec: &TierSpec) -> Self {
        Self {
            spec: spec.clone(),
            busy: vec![false; spec.lanes as usize],
            demand: VecDeque::new(),
            preload: VecDeque::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepState {
    resolved: bool,
    outstanding: u32,
    ssd_ready: Option<u64>,
}

struct Sim<'a> {
    spec: &'a ModelSpec,
    trace: &'a ActivationTrace,
    cfg: &'a EngineConfig,
    store: &'a mut dyn SsdStore,
    class_ids: Vec<ClassId>,
    class_bytes: Vec<u64>,
    compute_ns: Vec<u64>,
    sampling_ns: u64,
    layers: u32,
    total: u64,

    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Event)>>,
    links: [Link; 2],
    transfers: Vec<Transfer>,

    units: Vec<LayerCacheUnit>,
    layer_hits: Vec<HitStats>,
    dram_hits: HitStats,
    dram: Option<DramCache>,
    schedule: Option<PreloadSchedule>,
    inflight: HashMap<u32, usize>,
    pins: HashMap<u32, u32>,
    parked: VecDeque<usize>,

    steps: Vec<StepState>,
    next_step: u64,
    computing: Option<u64>,
    earliest: u64,

    timeline: Timeline,
    bytes: LinkBytes,
    counts: TransferCounts,
}

impl<'a> Sim<'a> {
    fn link_index(id: LinkId) -> usize {
        match id {
            LinkId::SsdToDram => 0,
            LinkId::DramToHbm => 1,
        }
    }

    fn push(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn new_transfer(&mut self, link: LinkId, bytes: u64, purpose: Purpose, layer: u32, step: u64, kind: Kind) -> usize {
        self.transfers.push(Transfer {
            link,
            bytes,
            purpose,
            layer,
            step,
            waiting: 0,
            dependents: Vec::new(),
            kind,
        });
        self.transfers.len() - 1
    }

    fn depend(&mut self, before: usize, after: usize) {
        self.transfers[before].dependents.push(after);
        self.transfers[after].waiting += 1;
    }

    fn enqueue(&mut self, id: usize) {
        let t = &self.transfers[id];
        let link = &mut self.links[Self::link_index(t.link)];
        match t.purpose {
            Purpose::Demand => link.demand.push_back(id),
            Purpose::Preload => link.preload.push_back(id),
        }
        self.dispatch(t.link);
    }

    fn dispatch(&mut self, link_id: LinkId) {
        let li = Self::link_index(link_id);
        loop {
            let Some(lane) = self.links[li].busy.iter().position(|b| !b) else {
                return;
            };
            let link = &mut self.links[li];
            let Some(id) = link.demand.pop_front().or_else(|| link.preload.pop_front()) else {
                return;
            };
            link.busy[lane] = true;
            let t = &self.transfers[id];
            let end = self.now + link.spec.transfer_ns(t.bytes);
            self.timeline.transfers.push(TransferEvent {
                link: t.link,
                lane: lane as u32,
                start: self.now,
                end,
                bytes: t.bytes,
                purpose: t.purpose,
                layer: t.layer,
                step: t.step,
            });
            self.push(end, Event::TransferDone { id, lane: lane as u32 });
        }
    }

    fn step_of(&self, g: u64) -> (u32, u32) {
        ((g / self.layers as u64) as u32, (g % self.layers as u64) as u32)
    }

    fn window_protects(&self, layer: u32) -> bool {
        let gc = self.computing.unwrap_or(self.next_step);
        let l = self.layers as u64;
        (0..=self.cfg.lookahead as u64).any(|j| ((gc + j) % l) as u32 == layer && gc + j < self.total)
    }

    fn pin(&mut self, layer: u32) {
        *self.pins.entry(layer).or_default() += 1;
    }

    fn unpin(&mut self, layer: u32) {
        if let Some(n) = self.pins.get_mut(&layer) {
            *n -= 1;
            if *n == 0 {
                self.pins.remove(&layer);
            }
        }
    }

    fn resolve(&mut self, g: u64) -> Result<()> {
        let (token, layer) = self.step_of(g);
        let record = self.trace.record(token, layer);
        let assignment = partition_with_ids(record, &self.cfg.plan, &self.class_ids);
        let required = assignment.required_by_index();
        self.steps[g as usize].resolved = true;

        if self.cfg.policy == HbmPolicy::Resident {
            let n = required.len() as u32;
            self.layer_hits[layer as usize].accesses += n as u64;
            self.layer_hits[layer as usize].hits += n as u64;
            self.timeline.hits.push(HitRecord {
                token,
                layer,
                hits: n,
                misses: 0,
                bytes: 0,
            });
            return Ok(());
        }

        let outcome = self.units[layer as usize].update(self.cfg.policy, &required, &self.class_bytes)?;
        let ls = &mut self.layer_hits[layer as usize];
        ls.accesses += required.len() as u64;
        ls.hits += outcome.hits.len() as u64;
        self.timeline.hits.push(HitRecord {
            token,
            layer,
            hits: outcome.hits.len() as u32,
            misses: outcome.misses.len() as u32,
            bytes: outcome.bytes_to_load,
        });
        if outcome.misses.is_empty() {
            return Ok(());
        }
        let missing: Vec<u32> = outcome.misses.iter().map(|(n, _)| n.index).collect();
        self.dram_hits.accesses += missing.len() as u64;

        let hop = self.new_transfer(
            LinkId::DramToHbm,
            outcome.bytes_to_load,
            Purpose::Demand,
            layer,
            g,
            Kind::Hop { step: g },
        );
        self.steps[g as usize].outstanding += 1;

        let from_ssd: Vec<u32> = match self.cfg.host.mode {
            HostMode::DramResident => {
                self.dram_hits.hits += missing.len() as u64;
                Vec::new()
            }
            HostMode::SsdDemand => missing,
            HostMode::Tiered => {
                let dram = self.dram.as_ref().expect("tiered mode has a DRAM cache");
                let lookup = dram.lookup(layer, &missing);
                let mut absent = Vec::new();
                let mut via_preload = 0u64;
                if let Some(&pid) = self.inflight.get(&layer) {
                    let Kind::Preload { neurons } = &self.transfers[pid].kind else {
                        return Err(Error::Invariant("in-flight map points at a non-preload".into()));
                    };
                    for &i in &lookup.missing {
                        if neurons.binary_search(&i).is_ok() {
                            via_preload += 1;
                        } else {
                            absent.push(i);
                        }
                    }
                    if via_preload > 0 {
                        self.depend(pid, hop);
                    }
                } else {
                    absent = lookup.missing;
                }
                self.dram_hits.hits += lookup.present.len() as u64 + via_preload;
                if !lookup.present.is_empty() || via_preload > 0 {
                    self.pin(layer);
                }
                absent
            }
        };

        if !from_ssd.is_empty() {
            let read = self.store.read(layer, &from_ssd)?;
            let id = self.new_transfer(
                LinkId::SsdToDram,
                read.bytes,
                Purpose::Demand,
                layer,
                g,
                Kind::SsdDemand,
            );
            self.depend(id, hop);
            self.counts.demand_ssd_fetches += 1;
            self.bytes.ssd_to_dram_demand += read.bytes;
            self.enqueue(id);
        }
        if self.transfers[hop].waiting == 0 {
            self.enqueue(hop);
        }
        Ok(())
    }

    fn issue_preload(&mut self, g: u64) -> Result<()> {
        if self.cfg.host.mode != HostMode::Tiered {
            return Ok(());
        }
        let target = g + self.cfg.lookahead as u64;
        let predicted = if self.cfg.neuron_level_preload && target < self.total {
            let (token, layer) = self.step_of(target);
            Some(predict_with_lookahead(
                self.trace,
                token,
                layer,
                self.cfg.lookahead,
                &self.cfg.accuracy,
                self.cfg.prediction_seed,
            )?)
        } else {
            None
        };
        let schedule = self.schedule.as_mut().expect("tiered mode has a schedule");
        let dram = self.dram.as_ref().expect("tiered mode has a DRAM cache");
        let requests = schedule.schedule(g, self.layers, self.total, dram, predicted.as_deref());
        for req in requests {
            let read = self.store.read(req.layer, &req.neurons)?;
            let id = self.new_transfer(
                LinkId::SsdToDram,
                read.bytes,
                Purpose::Preload,
                req.layer,
                req.target_step,
                Kind::Preload { neurons: req.neurons },
            );
            self.inflight.insert(req.layer, id);
            self.counts.preloads += 1;
            self.bytes.ssd_to_dram_preload += read.bytes;
            self.enqueue(id);
        }
        Ok(())
    }

    /// Move a finished preload into its DRAM frame, if a frame can be had.
    fn try_materialize(&mut self, id: usize, force: bool) -> Result<bool> {
        let layer = self.transfers[id].layer;
        let has_frame = self.dram.as_ref().expect("tiered").frame(layer).is_some();
        if !has_frame {
            let dram = self.dram.as_ref().expect("tiered");
            if !dram.has_room() {
                let victim =
                    dram.eviction_candidate(|l| self.pins.contains_key(&l) || l == layer || self.window_protects(l));
                let victim = match victim {
                    Some(v) => Some(v),
                    None if force => dram.eviction_candidate(|l| self.pins.contains_key(&l) || l == layer),
                    None => None,
                };
                match victim {
                    Some(v) => self.dram.as_mut().expect("tiered").evict(v)?,
                    None if force => {
                        return Err(Error::Invariant(format!(
                            "no DRAM frame can be freed for layer {layer}"
                        )));
                    }
                    None => return Ok(false),
                }
            }
        }
        let Kind::Preload { neurons } = std::mem::replace(&mut self.transfers[id].kind, Kind::SsdDemand) else {
            return Err(Error::Invariant("materializing a non-preload transfer".into()));
        };
        self.dram.as_mut().expect("tiered").admit(layer, &neurons)?;
        self.transfers[id].kind = Kind::Preload { neurons };
        self.inflight.remove(&layer);
        self.schedule.as_mut().expect("tiered").complete(layer);
        self.release(id);
        Ok(true)
    }

    fn retry_parked(&mut self, force: bool) -> Result<()> {
        while let Some(&id) = self.parked.front() {
            if self.try_materialize(id, force)? {
                self.parked.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }

    /// Notify everything waiting on transfer `id`.
    fn release(&mut self, id: usize) {
        let is_ssd = self.transfers[id].link == LinkId::SsdToDram;
        let deps = std::mem::take(&mut self.transfers[id].dependents);
        for d in deps {
            if is_ssd {
                let step = self.transfers[d].step as usize;
                let r = &mut self.steps[step].ssd_ready;
                *r = Some(r.map_or(self.now, |t| t.max(self.now)));
            }
            self.transfers[d].waiting -= 1;
            if self.transfers[d].waiting == 0 {
                self.enqueue(d);
            }
        }
    }

    fn on_transfer_done(&mut self, id: usize, lane: u32) -> Result<()> {
        let link = self.transfers[id].link;
        self.links[Self::link_index(link)].busy[lane as usize] = false;
        match self.transfers[id].kind {
            Kind::Hop { step } => {
                self.bytes.dram_to_hbm += self.transfers[id].bytes;
                self.counts.hbm_loads += 1;
                if self.cfg.host.mode == HostMode::Tiered {
                    let layer = self.transfers[id].layer;
                    self.unpin(layer);
                }
                self.steps[step as usize].outstanding -= 1;
            }
            Kind::SsdDemand => self.release(id),
            Kind::Preload { .. } => {
                if !self.try_materialize(id, false)? {
                    self.parked.push_back(id);
                }
            }
        }
        self.dispatch(link);
        Ok(())
    }

    fn try_start(&mut self) -> Result<()> {
        if self.computing.is_some() || self.next_step >= self.total || self.now < self.earliest {
            return Ok(());
        }
        let g = self.next_step;
        let st = self.steps[g as usize];
        if !st.resolved || st.outstanding > 0 {
            return Ok(());
        }
        let (token, layer) = self.step_of(g);
        let stall = self.now - self.earliest;
        let ssd_wait = st.ssd_ready.map_or(0, |t| t.saturating_sub(self.earliest).min(stall));
        let end = self.now + self.compute_ns[layer as usize];
        self.timeline.steps.push(StepRecord {
            token,
            layer,
            earliest: self.earliest,
            start: self.now,
            end,
            dram_wait: stall - ssd_wait,
            ssd_wait,
        });
        self.computing = Some(g);
        self.issue_preload(g)?;
        if g + 1 < self.total {
            self.resolve(g + 1)?;
        }
        self.push(end, Event::ComputeDone { step: g });
        Ok(())
    }

    fn on_compute_done(&mut self, g: u64) -> Result<()> {
        self.computing = None;
        self.next_step = g + 1;
        self.earliest = self.now;
        if (g + 1).is_multiple_of(self.layers as u64) {
            self.earliest += self.sampling_ns;
            self.timeline.sampling_ns += self.sampling_ns;
        }
        if self.next_step == self.total {
            self.timeline.end_ns = self.earliest;
        } else if self.earliest > self.now {
            self.push(self.earliest, Event::Wake);
        }
        Ok(())
    }

    fn check_occupancy(&self) -> Result<()> {
        if let Some(d) = &self.dram {
            if d.occupancy_bytes() > d.config().capacity_bytes {
                return Err(Error::Invariant(format!(
                    "DRAM occupancy {} exceeds capacity at t = {} ns",
                    d.occupancy_bytes(),
                    self.now
                )));
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        self.now = self.timeline.prefill_ns;
        self.earliest = self.now;
        self.resolve(0)?;
        self.try_start()?;
        loop {
            while let Some(Reverse((at, _, ev))) = self.heap.pop() {
                self.now = at;
                match ev {
                    Event::TransferDone { id, lane } => self.on_transfer_done(id, lane)?,
                    Event::ComputeDone { step } => self.on_compute_done(step)?,
                    Event::Wake => {}
                }
                self.retry_parked(false)?;
                self.check_occupancy()?;
                self.try_start()?;
            }
            if self.next_step >= self.total {
                break;
            }
            if self.parked.is_empty() {
                return Err(Error::Invariant(format!(
                    "simulation stalled before step {}",
                    self.next_step
                )));
            }
            self.retry_parked(true)?;
            self.check_occupancy()?;
            self.try_start()?;
        }
        if !self.parked.is_empty() {
            // preloads targeting steps past the last one are harmless leftovers
            self.parked.clear();
        }
        Ok(())
    }
}

/// Run the decode pass over `trace` with a cost-model SSD.
pub fn simulate_decode(
    spec: &ModelSpec,
    trace: &ActivationTrace,
    tiers: &Tiers,
    cfg: &EngineConfig,
    carbon: &CarbonParams,
) -> Result<SimOutput> {
    let mut store = LatencySsd::new(spec);
    simulate_decode_with_store(spec, trace, tiers, cfg, carbon, &mut store)
}

pub fn simulate_decode_with_store(
    spec: &ModelSpec,
    trace: &ActivationTrace,
    tiers: &Tiers,
    cfg: &EngineConfig,
    carbon: &CarbonParams,
    store: &mut dyn SsdStore,
) -> Result<SimOutput> {
    cfg.validate(spec, tiers)?;
    carbon.validate()?;
    trace.matches(spec)?;
    if trace.num_tokens() == 0 {
        return Err(Error::config("trace.num_tokens", "must be >= 1"));
    }
    let class_ids = cfg.plan.check_against(spec)?;
    let layers = spec.num_layers;
    let total = trace.num_tokens() as u64 * layers as u64;
    let (dram, schedule) = if cfg.host.mode == HostMode::Tiered {
        (
            Some(DramCache::new(cfg.dram_cache_config(spec, tiers), spec)?),
            Some(PreloadSchedule::new(cfg.lookahead)?),
        )
    } else {
        (None, None)
    };
    let units = (0..layers)
        .map(|l| LayerCacheUnit::for_policy(l, spec.active_per_layer, cfg.policy))
        .collect();

    let mut sim = Sim {
        spec,
        trace,
        cfg,
        store,
        class_ids,
        class_bytes: spec.class_bytes_table(),
        compute_ns: cfg.compute_seconds.per_layer_ns(layers)?,
        sampling_ns: seconds_to_ns(cfg.sampling_seconds),
        layers,
        total,
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        links: [Link::new(tiers.ssd_to_dram()), Link::new(tiers.dram_to_hbm())],
        transfers: Vec::new(),
        units,
        layer_hits: vec![HitStats::default(); layers as usize],
        dram_hits: HitStats::default(),
        dram,
        schedule,
        inflight: HashMap::new(),
        pins: HashMap::new(),
        parked: VecDeque::new(),
        steps: vec![StepState::default(); total as usize],
        next_step: 0,
        computing: None,
        earliest: 0,
        timeline: Timeline {
            prefill_ns: seconds_to_ns(cfg.prefill_seconds),
            ..Timeline::default()
        },
        bytes: LinkBytes::default(),
        counts: TransferCounts::default(),
    };
    sim.run()?;

    let peak = sim.dram.as_ref().map_or(0, |d| d.peak_occupancy_bytes());
    let timeline = std::mem::take(&mut sim.timeline);
    let metrics = build_metrics(&sim, &timeline, tiers, carbon, peak)?;
    audit(spec, cfg, tiers, &timeline, &metrics, &sim.compute_ns)?;
    Ok(SimOutput { metrics, timeline })
}

fn build_metrics(sim: &Sim<'_>, tl: &Timeline, tiers: &Tiers, carbon: &CarbonParams, peak: u64) -> Result<Metrics> {
    let spec = sim.spec;
    let cfg = sim.cfg;
    let layers = sim.layers;
    let mut per_layer_ns = vec![0u64; layers as usize];
    let (mut dram_wait, mut ssd_wait) = (0u64, 0u64);
    for s in &tl.steps {
        per_layer_ns[s.layer as usize] += s.end - s.start;
        dram_wait += s.dram_wait;
        ssd_wait += s.ssd_wait;
    }
    let compute_ns: u64 = per_layer_ns.iter().sum();
    let total_s = ns_to_seconds(tl.end_ns);
    let decode_s = ns_to_seconds(tl.end_ns - tl.prefill_ns);
    let first_pass_end = tl.steps.get(layers as usize - 1).map_or(tl.end_ns, |s| s.end);
    let mut hbm = HitStats::default();
    for h in &sim.layer_hits {
        hbm.merge(h);
    }

    let hbm_fp = cfg.hbm_footprint_bytes(spec)?;
    let dram_fp = cfg.dram_footprint_bytes(spec, tiers);
    let ssd_used = cfg.host.mode != HostMode::DramResident;
    let energy = EnergyLedger {
        tiers: vec![
            TierUsage {
                tier: tiers.hbm.name.clone(),
                resident_byte_seconds: hbm_fp as f64 * total_s,
                active_seconds: total_s,
                bytes_read: 0,
            },
            TierUsage {
                tier: tiers.dram.name.clone(),
                resident_byte_seconds: dram_fp as f64 * total_s,
                active_seconds: if dram_fp > 0 { total_s } else { 0.0 },
                bytes_read: sim.bytes.dram_to_hbm,
            },
            TierUsage {
                tier: tiers.ssd.name.clone(),
                resident_byte_seconds: if ssd_used {
                    spec.full_model_ffn_bytes() as f64 * total_s
                } else {
                    0.0
                },
                active_seconds: if ssd_used { total_s } else { 0.0 },
                bytes_read: sim.bytes.ssd_to_dram_demand + sim.bytes.ssd_to_dram_preload,
            },
        ],
        compute_busy_seconds: ns_to_seconds(compute_ns + tl.prefill_ns),
        runtime_seconds: total_s,
    };
    let tier_list = tiers.list();
    let energy_breakdown = crate::carbon::energy(&energy, &tier_list, carbon.gpu_power_watts)?;
    let carbon_report = carbon.report(&energy, &tier_list)?;

    Ok(Metrics {
        tokens: sim.trace.num_tokens(),
        layers,
        tokens_per_second: if decode_s > 0.0 {
            sim.trace.num_tokens() as f64 / decode_s
        } else {
            0.0
        },
        time_to_first_token_seconds: ns_to_seconds(first_pass_end),
        total_seconds: total_s,
        decode_seconds: decode_s,
        prefill_seconds: ns_to_seconds(tl.prefill_ns),
        compute_seconds: ns_to_seconds(compute_ns),
        per_layer_compute_seconds: per_layer_ns.iter().map(|&n| ns_to_seconds(n)).collect(),
        stalls: Stalls {
            dram_wait_seconds: ns_to_seconds(dram_wait),
            ssd_wait_seconds: ns_to_seconds(ssd_wait),
        },
        sampling_seconds: ns_to_seconds(tl.sampling_ns),
        hbm,
        hbm_hit_ratio: hbm.hit_ratio(),
        per_layer_hbm: sim.layer_hits.clone(),
        dram: sim.dram_hits,
        dram_hit_ratio: sim.dram_hits.hit_ratio(),
        bytes: sim.bytes,
        transfers: sim.counts,
        hbm_footprint_bytes: hbm_fp,
        dram_footprint_bytes: dram_fp,
        peak_dram_cache_bytes: peak,
        energy,
        energy_breakdown,
        carbon: carbon_report,
    })
}

/// Recheck a finished run against its own event log.
fn audit(
    spec: &ModelSpec,
    cfg: &EngineConfig,
    tiers: &Tiers,
    tl: &Timeline,
    m: &Metrics,
    compute_ns: &[u64],
) -> Result<()> {
    let fail = |msg: String| Err(Error::Invariant(msg));

    let mut lanes: BTreeMap<(LinkId, u32), Vec<&TransferEvent>> = BTreeMap::new();
    for t in &tl.transfers {
        let link = match t.link {
            LinkId::SsdToDram => tiers.ssd_to_dram(),
            LinkId::DramToHbm => tiers.dram_to_hbm(),
        };
        if t.end != t.start + link.transfer_ns(t.bytes) {
            return fail(format!(
                "transfer on {} lasts {} ns for {} bytes",
                t.link.label(),
                t.end - t.start,
                t.bytes
            ));
        }
        lanes.entry((t.link, t.lane)).or_default().push(t);
    }
    for ((link, lane), events) in &lanes {
        for w in events.windows(2) {
            if w[1].start < w[0].end {
                return fail(format!("overlapping transfers on {} lane {lane}", link.label()));
            }
        }
    }

    let mut hop_end: HashMap<u64, u64> = HashMap::new();
    let (mut hop_bytes, mut demand_bytes, mut preload_bytes) = (0u64, 0u64, 0u64);
    for t in &tl.transfers {
        match (t.link, t.purpose) {
            (LinkId::DramToHbm, _) => {
                hop_bytes += t.bytes;
                let e = hop_end.entry(t.step).or_default();
                *e = (*e).max(t.end);
            }
            (LinkId::SsdToDram, Purpose::Demand) => demand_bytes += t.bytes,
            (LinkId::SsdToDram, Purpose::Preload) => preload_bytes += t.bytes,
        }
        if cfg.host.mode == HostMode::Tiered && t.link == LinkId::SsdToDram && t.layer < cfg.fixed_layers(spec) {
            return fail(format!("SSD traffic for fixed layer {}", t.layer));
        }
    }
    let loaded: u64 = tl.hits.iter().map(|h| h.bytes).sum();
    if hop_bytes != loaded || hop_bytes != m.bytes.dram_to_hbm {
        return fail(format!("HBM byte conservation: link {hop_bytes}, cache {loaded}"));
    }
    if demand_bytes != m.bytes.ssd_to_dram_demand || preload_bytes != m.bytes.ssd_to_dram_preload {
        return fail("DRAM byte conservation".into());
    }

    let layers = spec.num_layers as u64;
    let mut prev_end = tl.prefill_ns;
    let (mut compute, mut stalls) = (0u64, 0u64);
    for (g, s) in tl.steps.iter().enumerate() {
        let g = g as u64;
        if (s.token as u64 * layers + s.layer as u64) != g {
            return fail(format!("step {g} out of order"));
        }
        if let Some(&e) = hop_end.get(&g) {
            if s.start < e {
                return fail(format!("step {g} starts at {} before its load ends at {e}", s.start));
            }
        }
        if s.earliest < prev_end || s.start < s.earliest || s.end - s.start != compute_ns[s.layer as usize] {
            return fail(format!("step {g} timing is inconsistent"));
        }
        if s.dram_wait + s.ssd_wait != s.stall() {
            return fail(format!("step {g} stall attribution is incomplete"));
        }
        prev_end = s.end;
        compute += s.end - s.start;
        stalls += s.stall();
    }
    if tl.steps.len() as u64 != m.tokens as u64 * layers {
        return fail("missing step records".into());
    }
    if tl.end_ns - tl.prefill_ns != compute + stalls + tl.sampling_ns {
        return fail(format!(
            "time identity: {} ns elapsed but compute {compute} + stalls {stalls} + sampling {}",
            tl.end_ns - tl.prefill_ns,
            tl.sampling_ns
        ));
    }
    Ok(())
}

/// One configuration of the four-step ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config: EngineConfig,
    pub metrics: Metrics,
}

pub const ABLATION_VARIANTS: [&str; 4] = ["baseline", "+mp", "+cache", "+ssd"];

/// Engine configs for each ablation variant, derived from `base`.
///
/// The baseline streams every active neuron at storage precision from DRAM;
/// `+mp` applies `base.plan`; `+cache` turns on the HBM policy (ATU unless
/// `base` names LRU); `+ssd` replaces full DRAM residency with the tiered host.
pub fn ablation_configs(spec: &ModelSpec, base: &EngineConfig) -> Vec<(String, EngineConfig)> {
    let baseline = EngineConfig {
        plan: PrecisionPlan::single(spec.class(spec.storage_class()).clone()),
        policy: HbmPolicy::Off,
        host: HostConfig {
            mode: HostMode::DramResident,
            ..base.host.clone()
        },
        ..base.clone()
    };
    let mp = EngineConfig {
        plan: base.plan.clone(),
        ..baseline.clone()
    };
    let cache = EngineConfig {
        policy: match base.policy {
            p @ HbmPolicy::Lru { .. } => p,
            _ => HbmPolicy::Atu,
        },
        ..mp.clone()
    };
    let ssd = EngineConfig {
        host: HostConfig {
            mode: HostMode::Tiered,
            ..base.host.clone()
        },
        ..cache.clone()
    };
    ABLATION_VARIANTS
        .iter()
        .map(|s| s.to_string())
        .zip([baseline, mp, cache, ssd])
        .collect()
}

pub fn run_ablation(
    spec: &ModelSpec,
    trace: &ActivationTrace,
    tiers: &Tiers,
    base: &EngineConfig,
    carbon: &CarbonParams,
) -> Result<Vec<AblationRow>> {
    ablation_configs(spec, base)
        .into_iter()
        .map(|(variant, config)| {
            let out = simulate_decode(spec, trace, tiers, &config, carbon)?;
            Ok(AblationRow {
                variant,
                config,
                metrics: out.metrics,
            })
        })
        .collect()
}
