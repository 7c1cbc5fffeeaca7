//! Host-side tiers: the DRAM frame cache and the SSD backing store.
//!
//! DRAM holds neurons at storage precision in per-layer frames. The first
//! `fixed_layers` frames are loaded once and never leave; the rest share a
//! FIFO dynamic area refilled by whole-layer preloads.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostMode {
    /// The whole model sits in DRAM; the SSD is unused.
    DramResident,
    /// No DRAM cache: every HBM miss is read from SSD on demand.
    SsdDemand,
    /// Fixed and dynamic DRAM areas fed by the preloader.
    Tiered,
}

fn default_dynamic_layers() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    pub mode: HostMode,
    /// Defaults to the preload lookahead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_layers: Option<u32>,
    #[serde(default = "default_dynamic_layers")]
    pub dynamic_layers: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            mode: HostMode::DramResident,
            fixed_layers: None,
            dynamic_layers: default_dynamic_layers(),
        }
    }
}

impl HostConfig {
    pub fn tiered() -> Self {
        Self {
            mode: HostMode::Tiered,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DramCacheConfig {
    pub fixed_layers: u32,
    pub dynamic_capacity_layers: u32,
    pub capacity_bytes: u64,
}

impl DramCacheConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.fixed_layers > spec.num_layers {
            return Err(Error::config(
                "host.fixed_layers",
                format!("{} exceeds the model's {} layers", self.fixed_layers, spec.num_layers),
            ));
        }
        if self.dynamic_capacity_layers == 0 {
            return Err(Error::config("host.dynamic_layers", "must be >= 1"));
        }
        let need = (self.fixed_layers as u64 + self.dynamic_capacity_layers as u64) * spec.full_layer_bytes();
        if self.capacity_bytes < need {
            return Err(Error::config(
                "tiers.dram.capacity",
                format!(
                    "{} bytes cannot hold {} fixed + {} dynamic layers ({} bytes)",
                    self.capacity_bytes, self.fixed_layers, self.dynamic_capacity_layers, need
                ),
            ));
        }
        Ok(())
    }

    /// Bytes the DRAM cache reserves: every fixed and dynamic frame at full size.
    pub fn footprint_bytes(&self, spec: &ModelSpec) -> u64 {
        (self.fixed_layers as u64 + self.dynamic_capacity_layers as u64) * spec.full_layer_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFrame {
    pub layer: u32,
    resident: Vec<bool>,
    count: u32,
}

impl LayerFrame {
    fn empty(layer: u32, ffn: u32) -> Self {
        Self {
            layer,
            resident: vec![false; ffn as usize],
            count: 0,
        }
    }

    fn full(layer: u32, ffn: u32) -> Self {
        Self {
            layer,
            resident: vec![true; ffn as usize],
            count: ffn,
        }
    }

    pub fn contains(&self, index: u32) -> bool {
        self.resident.get(index as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> u32 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn complete(&self) -> bool {
        self.count as usize == self.resident.len()
    }

    pub fn resident_neurons(&self) -> impl Iterator<Item = u32> + '_ {
        self.resident
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| i as u32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lookup {
    pub present: Vec<u32>,
    pub missing: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct DramCache {
    config: DramCacheConfig,
    ffn: u32,
    neuron_bytes: u64,
    frames: BTreeMap<u32, LayerFrame>,
    fifo: VecDeque<u32>,
    occupancy: u64,
    peak: u64,
}

impl DramCache {
    /// Fixed-area frames start complete; the dynamic area starts empty.
    pub fn new(config: DramCacheConfig, spec: &ModelSpec) -> Result<Self> {
        config.validate(spec)?;
        let neuron_bytes = spec.class_bytes(spec.storage_class());
        let ffn = spec.ffn_neurons_per_layer;
        let mut frames = BTreeMap::new();
        for l in 0..config.fixed_layers {
            frames.insert(l, LayerFrame::full(l, ffn));
        }
        let occupancy = config.fixed_layers as u64 * ffn as u64 * neuron_bytes;
        Ok(Self {
            config,
            ffn,
            neuron_bytes,
            frames,
            fifo: VecDeque::new(),
            occupancy,
            peak: occupancy,
        })
    }

    pub fn config(&self) -> &DramCacheConfig {
        &self.config
    }

    pub fn is_fixed(&self, layer: u32) -> bool {
        layer < self.config.fixed_layers
    }

    pub fn frame(&self, layer: u32) -> Option<&LayerFrame> {
        self.frames.get(&layer)
    }

    /// Dynamic frames, oldest first.
    pub fn dynamic_frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.fifo.iter().copied()
    }

    pub fn occupancy_bytes(&self) -> u64 {
        self.occupancy
    }

    pub fn peak_occupancy_bytes(&self) -> u64 {
        self.peak
    }

    pub fn lookup(&self, layer: u32, required: &[u32]) -> Lookup {
        let frame = self.frames.get(&layer);
        let (present, missing) = required.iter().partition(|&&i| frame.is_some_and(|f| f.contains(i)));
        Lookup { present, missing }
    }

    /// Neurons of `layer` not yet in DRAM, ascending.
    pub fn missing_in_layer(&self, layer: u32) -> Vec<u32> {
        match self.frames.get(&layer) {
            Some(f) => (0..self.ffn).filter(|&i| !f.contains(i)).collect(),
            None => (0..self.ffn).collect(),
        }
    }

    pub fn has_room(&self) -> bool {
        self.fifo.len() < self.config.dynamic_capacity_layers as usize
    }

    /// Oldest dynamic frame for which `protected` is false.
    pub fn eviction_candidate(&self, protected: impl Fn(u32) -> bool) -> Option<u32> {
        self.fifo.iter().copied().find(|&l| !protected(l))
    }

    pub fn evict(&mut self, layer: u32) -> Result<()> {
        if self.is_fixed(layer) {
            return Err(Error::Invariant(format!("attempted to evict fixed-area layer {layer}")));
        }
        let frame = self
            .frames
            .remove(&layer)
            .ok_or_else(|| Error::Invariant(format!("evicting absent DRAM frame {layer}")))?;
        self.fifo.retain(|&l| l != layer);
        self.occupancy -= frame.count as u64 * self.neuron_bytes;
        Ok(())
    }

    /// Evict the oldest unprotected frame if the dynamic area is full.
    pub fn make_room(&mut self, protected: impl Fn(u32) -> bool) -> Result<Option<u32>> {
        if self.has_room() {
            return Ok(None);
        }
        match self.eviction_candidate(protected) {
            Some(l) => {
                self.evict(l)?;
                Ok(Some(l))
            }
            None => Err(Error::Capacity("every dynamic DRAM frame is protected".into())),
        }
    }

    /// Add `neurons` to `layer`'s frame, creating it if there is room.
    /// Returns how many were new.
    pub fn admit(&mut self, layer: u32, neurons: &[u32]) -> Result<u32> {
        if !self.frames.contains_key(&layer) {
            if !self.has_room() {
                return Err(Error::Capacity(format!("no dynamic DRAM frame free for layer {layer}")));
            }
            self.frames.insert(layer, LayerFrame::empty(layer, self.ffn));
            self.fifo.push_back(layer);
        }
        let frame = self.frames.get_mut(&layer).expect("frame just ensured");
        let mut added = 0;
        for &i in neurons {
            let slot = frame
                .resident
                .get_mut(i as usize)
                .ok_or_else(|| Error::Invariant(format!("neuron {i} outside layer {layer}")))?;
            if !*slot {
                *slot = true;
                added += 1;
            }
        }
        frame.count += added;
        self.occupancy += added as u64 * self.neuron_bytes;
        self.peak = self.peak.max(self.occupancy);
        if self.occupancy > self.config.capacity_bytes {
            return Err(Error::Invariant(format!(
                "DRAM occupancy {} exceeds capacity {}",
                self.occupancy, self.config.capacity_bytes
            )));
        }
        Ok(added)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreloadRequest {
    pub layer: u32,
    /// Global step whose compute start triggered the request.
    pub issued_at_step: u64,
    /// Global step the data is meant for.
    pub target_step: u64,
    pub neurons: Vec<u32>,
}

/// Lookahead preloader state: which layers have an SSD read in flight.
#[derive(Debug, Clone)]
pub struct PreloadSchedule {
    pub lookahead: u32,
    inflight: BTreeSet<u32>,
}

impl PreloadSchedule {
    pub fn new(lookahead: u32) -> Result<Self> {
        if lookahead == 0 {
            return Err(Error::config("engine.lookahead", "must be >= 1"));
        }
        Ok(Self {
            lookahead,
            inflight: BTreeSet::new(),
        })
    }

    pub fn in_flight(&self, layer: u32) -> bool {
        self.inflight.contains(&layer)
    }

    pub fn complete(&mut self, layer: u32) {
        self.inflight.remove(&layer);
    }

    /// Request for the step `lookahead` ahead of `step`, wrapping into the
    /// next token. `predicted` narrows a whole-layer request to a neuron set.
    pub fn schedule(
        &mut self,
        step: u64,
        num_layers: u32,
        total_steps: u64,
        cache: &DramCache,
        predicted: Option<&[u32]>,
    ) -> Vec<PreloadRequest> {
        let target_step = step + self.lookahead as u64;
        if target_step >= total_steps {
            return Vec::new();
        }
        let layer = (target_step % num_layers as u64) as u32;
        if cache.is_fixed(layer) || self.inflight.contains(&layer) {
            return Vec::new();
        }
        let neurons = match predicted {
            Some(p) => cache.lookup(layer, p).missing,
            None => cache.missing_in_layer(layer),
        };
        if neurons.is_empty() {
            return Vec::new();
        }
        self.inflight.insert(layer);
        vec![PreloadRequest {
            layer,
            issued_at_step: step,
            target_step,
            neurons,
        }]
    }
}

/// What a store read costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsdRead {
    pub bytes: u64,
    /// Contiguous runs touched.
    pub extents: u32,
}

/// A backing store holding every neuron of every layer at storage precision.
pub trait SsdStore {
    fn read(&mut self, layer: u32, neurons: &[u32]) -> Result<SsdRead>;
}

fn count_runs(sorted: &[u32]) -> u32 {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[1] != w[0] + 1).count() as u32
}

/// Pure cost model: bytes are neuron count times storage size.
#[derive(Debug, Clone)]
pub struct LatencySsd {
    neuron_bytes: u64,
    num_layers: u32,
    ffn: u32,
}

impl LatencySsd {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            neuron_bytes: spec.class_bytes(spec.storage_class()),
            num_layers: spec.num_layers,
            ffn: spec.ffn_neurons_per_layer,
        }
    }
}

impl SsdStore for LatencySsd {
    fn read(&mut self, layer: u32, neurons: &[u32]) -> Result<SsdRead> {
        if layer >= self.num_layers || neurons.iter().any(|&i| i >= self.ffn) {
            return Err(Error::Invariant(format!("SSD read outside the model at layer {layer}")));
        }
        let mut sorted = neurons.to_vec();
        sorted.sort_unstable();
        Ok(SsdRead {
            bytes: neurons.len() as u64 * self.neuron_bytes,
            extents: count_runs(&sorted),
        })
    }
}

pub const IMAGE_MAGIC: [u8; 8] = *b"TLMIMG\0\x01";
pub const IMAGE_VERSION: u32 = 1;
const IMAGE_HEADER_BYTES: u64 = 8 + 4 + 4 + 4 + 8;
const RECORD_PREFIX_BYTES: u64 = 8;

fn payload_byte(layer: u32, index: u32, j: u64) -> u8 {
    (layer as u64)
        .wrapping_mul(131)
        .wrapping_add((index as u64).wrapping_mul(31))
        .wrapping_add(j) as u8
}

/// Write a packed model image: a header, then one fixed-width record per
/// neuron in layer-major, index-minor order. Each record is the layer and
/// index as little-endian `u32` followed by the storage-precision payload.
pub fn write_model_image(path: &Path, spec: &ModelSpec) -> Result<u64> {
    spec.validate()?;
    let payload = spec.class_bytes(spec.storage_class());
    let record = RECORD_PREFIX_BYTES + payload;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IMAGE_MAGIC)?;
    out.write_all(&IMAGE_VERSION.to_le_bytes())?;
    out.write_all(&spec.num_layers.to_le_bytes())?;
    out.write_all(&spec.ffn_neurons_per_layer.to_le_bytes())?;
    out.write_all(&record.to_le_bytes())?;
    let mut buf = vec![0u8; payload as usize];
    for l in 0..spec.num_layers {
        for i in 0..spec.ffn_neurons_per_layer {
            out.write_all(&l.to_le_bytes())?;
            out.write_all(&i.to_le_bytes())?;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = payload_byte(l, i, j as u64);
            }
            out.write_all(&buf)?;
        }
    }
    out.flush()?;
    Ok(IMAGE_HEADER_BYTES + spec.num_layers as u64 * spec.ffn_neurons_per_layer as u64 * record)
}

/// Reads neuron records from a packed model image, one read per contiguous run.
#[derive(Debug)]
pub struct FileSsd {
    file: File,
    num_layers: u32,
    ffn: u32,
    record_bytes: u64,
    buf: Vec<u8>,
    bytes_read: u64,
}

impl FileSsd {
    pub fn open(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut header = [0u8; IMAGE_HEADER_BYTES as usize];
        file.read_exact(&mut header)
            .map_err(|e| Error::Validation(format!("model image header: {e}")))?;
        if header[..8] != IMAGE_MAGIC {
            return Err(Error::Validation("not a model image".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        let num_layers = u32_at(12);
        let ffn = u32_at(16);
        let record_bytes = u64::from_le_bytes(header[20..28].try_into().expect("8 bytes"));
        if version != IMAGE_VERSION {
            return Err(Error::Validation(format!("unsupported model image version {version}")));
        }
        let payload = spec.class_bytes(spec.storage_class());
        if num_layers != spec.num_layers
            || ffn != spec.ffn_neurons_per_layer
            || record_bytes != RECORD_PREFIX_BYTES + payload
        {
            return Err(Error::Validation("model image shape does not match the model".into()));
        }
        let expected = IMAGE_HEADER_BYTES + num_layers as u64 * ffn as u64 * record_bytes;
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(Error::Validation(format!(
                "model image is {actual} bytes, expected {expected}"
            )));
        }
        Ok(Self {
            file,
            num_layers,
            ffn,
            record_bytes,
            buf: Vec::new(),
            bytes_read: 0,
        })
    }

    /// Payload bytes read so far.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }
}

impl SsdStore for FileSsd {
    fn read(&mut self, layer: u32, neurons: &[u32]) -> Result<SsdRead> {
        if layer >= self.num_layers {
            return Err(Error::Invariant(format!("SSD read of layer {layer} outside the image")));
        }
        let mut sorted = neurons.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.last().is_some_and(|&i| i >= self.ffn) {
            return Err(Error::Invariant(format!("SSD read outside layer {layer}")));
        }
        let payload = self.record_bytes - RECORD_PREFIX_BYTES;
        let mut extents = 0;
        let mut start = 0;
        while start < sorted.len() {
            let mut end = start + 1;
            while end < sorted.len() && sorted[end] == sorted[end - 1] + 1 {
                end += 1;
            }
            let first = sorted[start];
            let offset = IMAGE_HEADER_BYTES + (layer as u64 * self.ffn as u64 + first as u64) * self.record_bytes;
            self.buf.resize((end - start) * self.record_bytes as usize, 0);
            self.file.seek(SeekFrom::Start(offset))?;
            self.file.read_exact(&mut self.buf)?;
            for (n, rec) in self.buf.chunks_exact(self.record_bytes as usize).enumerate() {
                let l = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
                let i = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
                if l != layer || i != first + n as u32 {
                    return Err(Error::Validation(format!(
                        "model image record at offset {offset} holds ({l}, {i}), expected ({layer}, {})",
                        first + n as u32
                    )));
                }
            }
            extents += 1;
            start = end;
        }
        let bytes = sorted.len() as u64 * payload;
        self.bytes_read += bytes;
        Ok(SsdRead { bytes, extents })
    }
}
