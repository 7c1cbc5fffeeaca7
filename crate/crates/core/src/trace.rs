//! Per-token, per-layer activation traces.
//!
//! Synthetic traces follow a one-parameter Markov model: each active neuron of
//! token `t` survives into token `t + 1` with probability `p`, and the set is
//! refilled to `k` by uniform sampling from the neurons that did not survive.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Active neurons of one layer for one token, sorted by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub token: u32,
    pub layer: u32,
    pub active: Vec<(u32, f32)>,
}

impl ActivationRecord {
    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.active.iter().map(|&(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    spec_fingerprint: String,
    num_layers: u32,
    num_tokens: u32,
    k: u32,
    ffn: u32,
    /// Token-major: `records[t * num_layers + l]`.
    records: Vec<ActivationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTraceParams {
    pub num_tokens: u32,
    /// Retention probability between consecutive tokens.
    pub overlap: f64,
    /// Optional per-layer override of `overlap`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_by_layer: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Retained neurons keep their previous score instead of drawing a new one.
    #[serde(default)]
    pub sticky_scores: bool,
}

impl Default for SyntheticTraceParams {
    fn default() -> Self {
        Self {
            num_tokens: 64,
            overlap: 0.8,
            overlap_by_layer: None,
            seed: 0,
            sticky_scores: false,
        }
    }
}

/// SplitMix64 finaliser, used to derive independent per-stream seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn sort_by_score(active: &mut [(u32, f32)]) {
    active.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Draw `count` distinct indices in `[0, universe)` whose `taken` stamp differs
/// from `stamp`, marking them as taken.
fn sample_excluding(
    rng: &mut ChaCha8Rng,
    universe: u32,
    count: usize,
    taken: &mut [u32],
    stamp: u32,
    out: &mut Vec<u32>,
) {
    let free = taken.iter().filter(|&&s| s != stamp).count();
    debug_assert!(count <= free);
    if count * 4 <= free {
        while out.len() < count {
            let i = rng.gen_range(0..universe);
            if taken[i as usize] != stamp {
                taken[i as usize] = stamp;
                out.push(i);
            }
        }
    } else {
        let pool: Vec<u32> = (0..universe).filter(|&i| taken[i as usize] != stamp).collect();
        for j in index::sample(rng, pool.len(), count) {
            let i = pool[j];
            taken[i as usize] = stamp;
            out.push(i);
        }
    }
}

impl ActivationTrace {
    pub fn generate(spec: &ModelSpec, params: &SyntheticTraceParams) -> Result<Self> {
        spec.validate()?;
        let k = spec.active_per_layer;
        let ffn = spec.ffn_neurons_per_layer;
        if k > ffn {
            return Err(Error::config("model.active_per_layer", "k exceeds F"));
        }
        let overlaps: Vec<f64> = match &params.overlap_by_layer {
            Some(v) => {
                if v.len() != spec.num_layers as usize {
                    return Err(Error::config(
                        "trace.overlap_by_layer",
                        format!("expected {} entries, got {}", spec.num_layers, v.len()),
                    ));
                }
                v.clone()
            }
            None => vec![params.overlap; spec.num_layers as usize],
        };
        for (l, p) in overlaps.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config(
                    format!("trace.overlap_by_layer[{l}]"),
                    format!("retention probability must lie in [0, 1], got {p}"),
                ));
            }
        }

        let layers = spec.num_layers as usize;
        let tokens = params.num_tokens as usize;
        let mut per_layer: Vec<Vec<Vec<(u32, f32)>>> = Vec::with_capacity(layers);
        for (l, &p) in overlaps.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[params.seed, l as u64]));
            let mut taken = vec![0u32; ffn as usize];
            let mut stamp = 0u32;
            let mut seq: Vec<Vec<(u32, f32)>> = Vec::with_capacity(tokens);
            let mut fresh = Vec::with_capacity(k as usize);
            for t in 0..tokens {
                stamp += 1;
                fresh.clear();
                let mut active: Vec<(u32, f32)> = Vec::with_capacity(k as usize);
                if t > 0 {
                    for &(i, s) in &seq[t - 1] {
                        if rng.gen_bool(p) {
                            taken[i as usize] = stamp;
                            active.push((i, s));
                        }
                    }
                }
                let need = k as usize - active.len();
                sample_excluding(&mut rng, ffn, need, &mut taken, stamp, &mut fresh);
                for entry in active.iter_mut() {
                    if !params.sticky_scores {
                        entry.1 = rng.gen::<f32>();
                    }
                }
                active.extend(fresh.iter().map(|&i| (i, 0.0)));
                let retained = k as usize - need;
                for entry in active[retained..].iter_mut() {
                    entry.1 = rng.gen::<f32>();
                }
                sort_by_score(&mut active);
                seq.push(active);
            }
            per_layer.push(seq);
        }

        let mut records = Vec::with_capacity(tokens * layers);
        let mut iters: Vec<_> = per_layer.into_iter().map(|v| v.into_iter()).collect();
        for t in 0..tokens {
            for (l, it) in iters.iter_mut().enumerate() {
                records.push(ActivationRecord {
                    token: t as u32,
                    layer: l as u32,
                    active: it.next().expect("one record per token"),
                });
            }
        }
        Ok(Self {
            spec_fingerprint: spec.fingerprint(),
            num_layers: spec.num_layers,
            num_tokens: params.num_tokens,
            k,
            ffn,
            records,
        })
    }

    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }

    pub fn num_tokens(&self) -> u32 {
        self.num_tokens
    }

    pub fn active_per_layer(&self) -> u32 {
        self.k
    }

    pub fn ffn_neurons(&self) -> u32 {
        self.ffn
    }

    pub fn fingerprint(&self) -> &str {
        &self.spec_fingerprint
    }

    pub fn record(&self, token: u32, layer: u32) -> &ActivationRecord {
        &self.records[(token * self.num_layers + layer) as usize]
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn matches(&self, spec: &ModelSpec) -> Result<()> {
        if self.spec_fingerprint != spec.fingerprint() {
            return Err(Error::TraceLoad(format!(
                "trace fingerprint {} does not match model fingerprint {} ({} layers in trace, {} in model)",
                self.spec_fingerprint,
                spec.fingerprint(),
                self.num_layers,
                spec.num_layers
            )));
        }
        Ok(())
    }

    /// Mean of `|A_t ∩ A_{t+1}| / k` over all consecutive token pairs and layers.
    pub fn mean_overlap(&self) -> f64 {
        if self.num_tokens < 2 || self.k == 0 {
            return 0.0;
        }
        let mut marks = vec![u32::MAX; self.ffn as usize];
        let mut total = 0u64;
        let mut pairs = 0u64;
        for l in 0..self.num_layers {
            for t in 0..self.num_tokens - 1 {
                let stamp = t * self.num_layers + l;
                for i in self.record(t, l).indices() {
                    marks[i as usize] = stamp;
                }
                total += self
                    .record(t + 1, l)
                    .indices()
                    .filter(|&i| marks[i as usize] == stamp)
                    .count() as u64;
                pairs += 1;
            }
        }
        total as f64 / (pairs as f64 * self.k as f64)
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = BufWriter::new(writer);
        let header = TraceHeader {
            version: TRACE_FORMAT_VERSION,
            num_layers: self.num_layers,
            num_tokens: self.num_tokens,
            k: self.k,
            ffn: self.ffn,
            fingerprint: self.spec_fingerprint.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(
                &mut out,
                &TraceLine {
                    t: r.token,
                    l: r.layer,
                    n: r.active.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        self.save(File::create(path)?)
    }

    /// Parse a JSONL trace and check it against `spec`.
    ///
    /// A final line cut off mid-record is treated as absent, so a truncated
    /// file reports the first missing `(token, layer)`.
    pub fn load<R: Read>(reader: R, spec: &ModelSpec) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(reader).read_to_string(&mut text)?;
        let ends_clean = text.ends_with('\n');
        let mut lines = text.lines().enumerate().peekable();

        let header: TraceHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(line).map_err(|e| Error::TraceLoad(format!("bad header: {e}")))?,
            None => return Err(Error::TraceLoad("empty trace file".into())),
        };
        if header.version != TRACE_FORMAT_VERSION {
            return Err(Error::TraceLoad(format!(
                "unsupported trace version {}",
                header.version
            )));
        }
        if header.fingerprint != spec.fingerprint() {
            return Err(Error::TraceLoad(format!(
                "fingerprint mismatch: trace {} ({} layers) vs model {} ({} layers)",
                header.fingerprint,
                header.num_layers,
                spec.fingerprint(),
                spec.num_layers
            )));
        }
        if header.num_layers != spec.num_layers
            || header.k != spec.active_per_layer
            || header.ffn != spec.ffn_neurons_per_layer
        {
            return Err(Error::TraceLoad("header shape disagrees with model".into()));
        }

        let layers = header.num_layers as usize;
        let slots = header.num_tokens as usize * layers;
        let mut records: Vec<Option<ActivationRecord>> = vec![None; slots];
        let mut seen = vec![u32::MAX; header.ffn as usize];
        while let Some((lineno, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = match serde_json::from_str(line) {
                Ok(p) => p,
                Err(_) if lines.peek().is_none() && !ends_clean => break,
                Err(e) => return Err(Error::TraceLoad(format!("line {}: {e}", lineno + 1))),
            };
            if parsed.t >= header.num_tokens || parsed.l >= header.num_layers {
                return Err(Error::TraceLoad(format!(
                    "line {}: record ({}, {}) out of range",
                    lineno + 1,
                    parsed.t,
                    parsed.l
                )));
            }
            if parsed.n.len() != header.k as usize {
                return Err(Error::TraceLoad(format!(
                    "record ({}, {}) has {} neurons, expected {}",
                    parsed.t,
                    parsed.l,
                    parsed.n.len(),
                    header.k
                )));
            }
            let slot = parsed.t as usize * layers + parsed.l as usize;
            let stamp = slot as u32;
            for &(i, s) in &parsed.n {
                if i >= header.ffn || !s.is_finite() {
                    return Err(Error::TraceLoad(format!(
                        "record ({}, {}): invalid entry ({i}, {s})",
                        parsed.t, parsed.l
                    )));
                }
                if seen[i as usize] == stamp {
                    return Err(Error::TraceLoad(format!(
                        "record ({}, {}): duplicate neuron {i}",
                        parsed.t, parsed.l
                    )));
                }
                seen[i as usize] = stamp;
            }
            if records[slot].is_some() {
                return Err(Error::TraceLoad(format!(
                    "duplicate record ({}, {})",
                    parsed.t, parsed.l
                )));
            }
            records[slot] = Some(ActivationRecord {
                token: parsed.t,
                layer: parsed.l,
                active: parsed.n,
            });
        }

        let mut dense = Vec::with_capacity(slots);
        for (slot, r) in records.into_iter().enumerate() {
            match r {
                Some(r) => dense.push(r),
                None => {
                    return Err(Error::TraceLoad(format!(
                        "missing record for token {}, layer {}",
                        slot / layers,
                        slot % layers
                    )))
                }
            }
        }
        Ok(Self {
            spec_fingerprint: header.fingerprint,
            num_layers: header.num_layers,
            num_tokens: header.num_tokens,
            k: header.k,
            ffn: header.ffn,
            records: dense,
        })
    }

    pub fn load_from_path(path: &Path, spec: &ModelSpec) -> Result<Self> {
        Self::load(File::open(path)?, spec)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    version: u32,
    num_layers: u32,
    num_tokens: u32,
    k: u32,
    #[serde(rename = "F")]
    ffn: u32,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    t: u32,
    l: u32,
    n: Vec<(u32, f32)>,
}

/// Recall of a predictor that looks `d` layers ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LookaheadAccuracy {
    /// Entry `d - 1` is the recall at distance `d`; the last entry extends.
    by_distance: Vec<f64>,
}

impl Default for LookaheadAccuracy {
    fn default() -> Self {
        Self {
            by_distance: vec![1.0, 0.8],
        }
    }
}

impl LookaheadAccuracy {
    pub fn new(by_distance: Vec<f64>) -> Result<Self> {
        if by_distance.is_empty() {
            return Err(Error::config("engine.accuracy", "at least one entry required"));
        }
        for (i, a) in by_distance.iter().enumerate() {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::config(format!("engine.accuracy[{i}]"), "must lie in [0, 1]"));
            }
            if i > 0 && *a > by_distance[i - 1] {
                return Err(Error::config(
                    format!("engine.accuracy[{i}]"),
                    "must be non-increasing in distance",
                ));
            }
        }
        Ok(Self { by_distance })
    }

    pub fn perfect() -> Self {
        Self { by_distance: vec![1.0] }
    }

    pub fn accuracy(&self, distance: u32) -> f64 {
        let i = (distance.max(1) as usize - 1).min(self.by_distance.len() - 1);
        self.by_distance[i]
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.by_distance.clone()).map(|_| ())
    }
}

/// Predicted active set for `(token, layer)` as seen from `distance` layers
/// earlier: each true neuron kept with probability `accuracy(distance)`, then
/// refilled to `k` from the neurons not yet chosen. Sorted by index.
pub fn predict_with_lookahead(
    trace: &ActivationTrace,
    token: u32,
    layer: u32,
    distance: u32,
    accuracy: &LookaheadAccuracy,
    seed: u64,
) -> Result<Vec<u32>> {
    if distance < 1 {
        return Err(Error::Domain("lookahead distance must be >= 1".into()));
    }
    if token >= trace.num_tokens || layer >= trace.num_layers {
        return Err(Error::Domain(format!("no record for token {token}, layer {layer}")));
    }
    let acc = accuracy.accuracy(distance);
    let record = trace.record(token, layer);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, token as u64, layer as u64, distance as u64]));
    let mut taken = vec![0u32; trace.ffn as usize];
    let mut out: Vec<u32> = Vec::with_capacity(trace.k as usize);
    for i in record.indices() {
        if rng.gen_bool(acc) {
            taken[i as usize] = 1;
            out.push(i);
        }
    }
    let need = trace.k as usize - out.len();
    let mut fill = Vec::with_capacity(need);
    sample_excluding(&mut rng, trace.ffn, need, &mut taken, 1, &mut fill);
    out.extend(fill);
    out.sort_unstable();
    Ok(out)
}
