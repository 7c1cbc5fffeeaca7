//! Layer-isolated HBM cache units.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassId, NeuronId};

/// How a layer's HBM unit treats the neurons of consecutive tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HbmPolicy {
    /// Keep exactly the current token's required set.
    #[default]
    Atu,
    /// Least-recently-used over `k + slack` slots.
    Lru {
        #[serde(default)]
        slack: u32,
    },
    /// No reuse: every required neuron is loaded for every token.
    Off,
    /// The whole model lives in HBM; no transfers at all.
    Resident,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CacheEntry {
    pub neuron: NeuronId,
    pub class: ClassId,
    pub slot: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub hits: Vec<CacheEntry>,
    pub misses: Vec<(NeuronId, ClassId)>,
    pub evictions: Vec<CacheEntry>,
    pub bytes_to_load: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitStats {
    pub accesses: u64,
    pub hits: u64,
}

impl HitStats {
    /// `hits / accesses`, or 0 before the first access.
    pub fn hit_ratio(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }

    pub fn merge(&mut self, other: &HitStats) {
        self.accesses += other.accesses;
        self.hits += other.hits;
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    index: u32,
    class: ClassId,
    last_use: u64,
}

#[derive(Debug, Clone)]
pub struct LayerCacheUnit {
    layer: u32,
    capacity_slots: u32,
    slots: Vec<Option<Slot>>,
    by_index: HashMap<u32, u32>,
    free: BTreeSet<u32>,
    recency: BTreeSet<(u64, u32)>,
    clock: u64,
    stats: HitStats,
}

impl LayerCacheUnit {
    pub fn new(layer: u32, capacity_slots: u32) -> Self {
        Self {
            layer,
            capacity_slots,
            slots: vec![None; capacity_slots as usize],
            by_index: HashMap::with_capacity(capacity_slots as usize),
            free: (0..capacity_slots).collect(),
            recency: BTreeSet::new(),
            clock: 0,
            stats: HitStats::default(),
        }
    }

    /// A unit sized for `policy` given `k` active neurons per token.
    pub fn for_policy(layer: u32, k: u32, policy: HbmPolicy) -> Self {
        match policy {
            HbmPolicy::Lru { slack } => Self::new(layer, k + slack),
            _ => Self::new(layer, k),
        }
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn capacity_slots(&self) -> u32 {
        self.capacity_slots
    }

    /// Always true: a unit models one contiguous allocation.
    pub fn contiguous(&self) -> bool {
        true
    }

    pub fn len(&self) -> usize {
        self.by_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }

    pub fn hit_stats(&self) -> HitStats {
        self.stats
    }

    /// Resident entries in ascending slot order.
    pub fn entries(&self) -> Vec<CacheEntry> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(s, e)| e.map(|e| self.entry(s as u32, e)))
            .collect()
    }

    pub fn lookup(&self, index: u32) -> Option<CacheEntry> {
        self.by_index
            .get(&index)
            .map(|&s| self.entry(s, self.slots[s as usize].expect("indexed slot is occupied")))
    }

    fn entry(&self, slot: u32, e: Slot) -> CacheEntry {
        CacheEntry {
            neuron: NeuronId::new(self.layer, e.index),
            class: e.class,
            slot,
        }
    }

    fn check_required(&self, required: &[(u32, ClassId)]) -> Result<()> {
        if required.len() > self.capacity_slots as usize {
            return Err(Error::Capacity(format!(
                "layer {} requires {} neurons but its unit holds {}",
                self.layer,
                required.len(),
                self.capacity_slots
            )));
        }
        Ok(())
    }

    fn remove(&mut self, slot: u32) -> CacheEntry {
        let e = self.slots[slot as usize].take().expect("evicting an empty slot");
        self.by_index.remove(&e.index);
        self.recency.remove(&(e.last_use, slot));
        self.free.insert(slot);
        self.entry(slot, e)
    }

    fn place(&mut self, slot: u32, index: u32, class: ClassId) {
        self.free.remove(&slot);
        self.slots[slot as usize] = Some(Slot {
            index,
            class,
            last_use: self.clock,
        });
        self.recency.insert((self.clock, slot));
        self.by_index.insert(index, slot);
    }

    fn touch(&mut self, slot: u32) {
        let e = self.slots[slot as usize].as_mut().expect("touching an empty slot");
        self.recency.remove(&(e.last_use, slot));
        e.last_use = self.clock;
        self.recency.insert((self.clock, slot));
    }

    fn finish(&mut self, mut out: UpdateOutcome, required: usize, class_bytes: &[u64]) -> UpdateOutcome {
        out.bytes_to_load = out.misses.iter().map(|&(_, c)| class_bytes[c.index()]).sum();
        self.stats.accesses += required as u64;
        self.stats.hits += out.hits.len() as u64;
        out
    }

    /// Adjacent-token update: the resident set becomes exactly `required`.
    ///
    /// A resident neuron held at a different precision is evicted and missed.
    /// Freed slots go to misses in ascending slot order.
    pub fn atu_update(&mut self, required: &[(u32, ClassId)], class_bytes: &[u64]) -> Result<UpdateOutcome> {
        self.check_required(required)?;
        self.clock += 1;
        let wanted: HashMap<u32, ClassId> = required.iter().copied().collect();
        if wanted.len() != required.len() {
            return Err(Error::Invariant(format!(
                "duplicate neuron in layer {} required set",
                self.layer
            )));
        }
        let mut out = UpdateOutcome::default();
        for slot in 0..self.capacity_slots {
            let Some(e) = self.slots[slot as usize] else { continue };
            if wanted.get(&e.index) == Some(&e.class) {
                self.touch(slot);
                out.hits.push(self.entry(slot, e));
            } else {
                out.evictions.push(self.remove(slot));
            }
        }
        for &(index, class) in required {
            if !self.by_index.contains_key(&index) {
                let slot = *self.free.first().expect("capacity checked");
                self.place(slot, index, class);
                out.misses.push((NeuronId::new(self.layer, index), class));
            }
        }
        Ok(self.finish(out, required.len(), class_bytes))
    }

    /// Standard LRU: hits are refreshed, misses take a free slot or the least
    /// recently used entry outside `required`.
    pub fn lru_update(&mut self, required: &[(u32, ClassId)], class_bytes: &[u64]) -> Result<UpdateOutcome> {
        self.check_required(required)?;
        self.clock += 1;
        let mut out = UpdateOutcome::default();
        let mut pending = Vec::new();
        for &(index, class) in required {
            match self.by_index.get(&index).copied() {
                Some(slot) if self.slots[slot as usize].expect("indexed").class == class => {
                    self.touch(slot);
                    out.hits.push(self.lookup(index).expect("resident"));
                }
                Some(slot) => {
                    out.evictions.push(self.remove(slot));
                    pending.push((index, class));
                }
                None => pending.push((index, class)),
            }
        }
        for (index, class) in pending {
            let slot = match self.free.first() {
                Some(&s) => s,
                None => {
                    let &(stamp, victim) = self.recency.first().expect("full unit has entries");
                    if stamp == self.clock {
                        return Err(Error::Invariant(format!(
                            "layer {} LRU unit has no evictable entry",
                            self.layer
                        )));
                    }
                    out.evictions.push(self.remove(victim));
                    victim
                }
            };
            self.place(slot, index, class);
            out.misses.push((NeuronId::new(self.layer, index), class));
        }
        Ok(self.finish(out, required.len(), class_bytes))
    }

    /// No reuse: everything resident is dropped and every required neuron loads.
    pub fn stream_update(&mut self, required: &[(u32, ClassId)], class_bytes: &[u64]) -> Result<UpdateOutcome> {
        self.check_required(required)?;
        self.clock += 1;
        let mut out = UpdateOutcome::default();
        for slot in 0..self.capacity_slots {
            if self.slots[slot as usize].is_some() {
                out.evictions.push(self.remove(slot));
            }
        }
        for &(index, class) in required {
            let slot = *self.free.first().expect("capacity checked");
            self.place(slot, index, class);
            out.misses.push((NeuronId::new(self.layer, index), class));
        }
        Ok(self.finish(out, required.len(), class_bytes))
    }

    pub fn update(
        &mut self,
        policy: HbmPolicy,
        required: &[(u32, ClassId)],
        class_bytes: &[u64],
    ) -> Result<UpdateOutcome> {
        match policy {
            HbmPolicy::Atu => self.atu_update(required, class_bytes),
            HbmPolicy::Lru { .. } => self.lru_update(required, class_bytes),
            HbmPolicy::Off => self.stream_update(required, class_bytes),
            HbmPolicy::Resident => Err(Error::Invariant("resident policy has no cache unit".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BYTES: [u64; 3] = [16, 8, 4];
    const HI: ClassId = ClassId(0);
    const LO: ClassId = ClassId(2);

    fn req(ids: &[u32]) -> Vec<(u32, ClassId)> {
        ids.iter().map(|&i| (i, HI)).collect()
    }

    fn resident(u: &LayerCacheUnit) -> Vec<u32> {
        let mut v: Vec<u32> = u.entries().iter().map(|e| e.neuron.index).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn atu_set_difference_example() {
        let mut u = LayerCacheUnit::new(0, 4);
        u.atu_update(&req(&[1, 2, 3, 4]), &BYTES).unwrap();
        let out = u.atu_update(&req(&[1, 2, 3, 5]), &BYTES).unwrap();
        assert_eq!(out.hits.len(), 3);
        assert_eq!(out.misses, vec![(NeuronId::new(0, 5), HI)]);
        assert_eq!(out.evictions.len(), 1);
        assert_eq!(out.evictions[0].neuron.index, 4);
        assert_eq!(out.bytes_to_load, 16);
        assert_eq!(u.lookup(5).unwrap().slot, 3);
    }

    #[test]
    fn cold_unit_misses_everything() {
        let mut u = LayerCacheUnit::new(2, 5);
        let out = u.atu_update(&req(&[9, 8, 7, 6, 5]), &BYTES).unwrap();
        assert!(out.hits.is_empty());
        assert_eq!(out.misses.len(), 5);
        assert!(out.evictions.is_empty());
        assert_eq!(out.bytes_to_load, 80);
        assert!(out.misses.iter().all(|(n, _)| n.layer == 2));
    }

    #[test]
    fn oversized_request_is_a_capacity_error() {
        let mut u = LayerCacheUnit::new(0, 2);
        assert!(matches!(
            u.atu_update(&req(&[1, 2, 3]), &BYTES),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            u.lru_update(&req(&[1, 2, 3]), &BYTES),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn precision_change_is_one_miss_and_one_eviction() {
        let mut u = LayerCacheUnit::new(0, 3);
        u.atu_update(&[(1, HI), (2, HI), (3, LO)], &BYTES).unwrap();
        let out = u.atu_update(&[(1, HI), (2, LO), (3, LO)], &BYTES).unwrap();
        assert_eq!(out.misses, vec![(NeuronId::new(0, 2), LO)]);
        assert_eq!(out.evictions.len(), 1);
        assert_eq!(out.evictions[0].class, HI);
        assert_eq!(out.bytes_to_load, 4);
    }

    #[test]
    fn lru_recency_order() {
        let mut u = LayerCacheUnit::new(0, 3);
        for i in [1, 2, 3] {
            u.lru_update(&req(&[i]), &BYTES).unwrap();
        }
        let out = u.lru_update(&req(&[4]), &BYTES).unwrap();
        assert_eq!(out.evictions.len(), 1);
        assert_eq!(out.evictions[0].neuron.index, 1);
        assert_eq!(resident(&u), vec![2, 3, 4]);
    }

    #[test]
    fn lru_keeps_superset_when_slack_allows() {
        let mut u = LayerCacheUnit::for_policy(0, 2, HbmPolicy::Lru { slack: 2 });
        u.lru_update(&req(&[1, 2]), &BYTES).unwrap();
        let out = u.lru_update(&req(&[3, 4]), &BYTES).unwrap();
        assert!(out.evictions.is_empty());
        let out = u.lru_update(&req(&[1, 2]), &BYTES).unwrap();
        assert_eq!(out.hits.len(), 2);
        assert_eq!(resident(&u), vec![1, 2, 3, 4]);
    }

    #[test]
    fn stream_update_never_hits() {
        let mut u = LayerCacheUnit::new(0, 3);
        u.stream_update(&req(&[1, 2, 3]), &BYTES).unwrap();
        let out = u.stream_update(&req(&[1, 2, 3]), &BYTES).unwrap();
        assert!(out.hits.is_empty());
        assert_eq!(out.evictions.len(), 3);
        assert_eq!(out.bytes_to_load, 48);
    }

    #[test]
    fn hit_stats_convention_and_identity() {
        let mut u = LayerCacheUnit::new(0, 3);
        assert_eq!(u.hit_stats().hit_ratio(), 0.0);
        for _ in 0..10 {
            u.atu_update(&req(&[4, 5, 6]), &BYTES).unwrap();
        }
        let s = u.hit_stats();
        assert_eq!((s.accesses, s.hits), (30, 27));
    }

    #[test]
    fn policy_serde_forms() {
        let p: HbmPolicy = serde_json::from_str(r#"{"kind":"lru","slack":8}"#).unwrap();
        assert_eq!(p, HbmPolicy::Lru { slack: 8 });
        let p: HbmPolicy = serde_json::from_str(r#"{"kind":"atu"}"#).unwrap();
        assert_eq!(p, HbmPolicy::Atu);
    }

    fn required_strategy() -> impl Strategy<Value = Vec<Vec<(u32, u8)>>> {
        proptest::collection::vec(
            proptest::sample::subsequence((0u32..24).collect::<Vec<_>>(), 0..=8)
                .prop_flat_map(|ids| {
                    let n = ids.len();
                    (Just(ids), proptest::collection::vec(0u8..3, n))
                })
                .prop_map(|(ids, cs)| ids.into_iter().zip(cs).collect()),
            1..30,
        )
    }

    proptest! {
        #[test]
        fn atu_hits_keep_their_slot(steps in required_strategy()) {
            let mut u = LayerCacheUnit::new(0, 8);
            for step in steps {
                let r: Vec<(u32, ClassId)> = step.iter().map(|&(i, c)| (i, ClassId(c))).collect();
                let before: HashMap<u32, u32> = u.entries().iter().map(|e| (e.neuron.index, e.slot)).collect();
                let was_full = u.len() == 8;
                let out = u.atu_update(&r, &BYTES).unwrap();
                for h in &out.hits {
                    prop_assert_eq!(before[&h.neuron.index], h.slot);
                }
                let mut got: Vec<(u32, ClassId)> = u.entries().iter().map(|e| (e.neuron.index, e.class)).collect();
                let mut want = r.clone();
                got.sort_unstable();
                want.sort_unstable();
                prop_assert_eq!(got, want);
                prop_assert_eq!(out.hits.len() + out.misses.len(), r.len());
                if was_full && r.len() == 8 {
                    prop_assert_eq!(out.evictions.len(), out.misses.len());
                }
                let bytes: u64 = out.misses.iter().map(|(_, c)| BYTES[c.index()]).sum();
                prop_assert_eq!(out.bytes_to_load, bytes);
            }
        }

        #[test]
        fn lru_never_exceeds_capacity(steps in required_strategy(), slack in 0u32..6) {
            let mut u = LayerCacheUnit::for_policy(0, 8, HbmPolicy::Lru { slack });
            for step in steps {
                let r: Vec<(u32, ClassId)> = step.iter().map(|&(i, c)| (i, ClassId(c))).collect();
                let out = u.lru_update(&r, &BYTES).unwrap();
                prop_assert!(u.len() <= (8 + slack) as usize);
                for &(i, c) in &r {
                    prop_assert_eq!(u.lookup(i).map(|e| e.class), Some(c));
                }
                prop_assert_eq!(out.hits.len() + out.misses.len(), r.len());
            }
        }
    }
}
