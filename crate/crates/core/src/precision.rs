//! Precision planning: score-ranked class assignment, the decode-entropy
//! uncertainty estimate, and the step search over precision ratios.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassId, ModelSpec, PrecisionClass};
use crate::trace::ActivationRecord;

const FRACTION_EPS: f64 = 1e-9;

/// Fraction of active neurons held at each precision, widest class first.
/// Neurons beyond the total coverage are dropped for that token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanFile", into = "PlanFile")]
pub struct PrecisionPlan {
    fractions: Vec<(PrecisionClass, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub name: String,
    pub bits: u32,
    pub fraction: f64,
}

/// On-disk and config form of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub fractions: Vec<PlanEntry>,
}

impl TryFrom<PlanFile> for PrecisionPlan {
    type Error = Error;

    fn try_from(file: PlanFile) -> Result<Self> {
        PrecisionPlan::new(
            file.fractions
                .into_iter()
                .map(|e| (PrecisionClass::new(e.name, e.bits), e.fraction))
                .collect(),
        )
    }
}

impl From<PrecisionPlan> for PlanFile {
    fn from(plan: PrecisionPlan) -> Self {
        PlanFile {
            fractions: plan
                .fractions
                .into_iter()
                .map(|(c, f)| PlanEntry {
                    name: c.name,
                    bits: c.bits,
                    fraction: f,
                })
                .collect(),
        }
    }
}

impl PrecisionPlan {
    pub fn new(fractions: Vec<(PrecisionClass, f64)>) -> Result<Self> {
        if fractions.is_empty() {
            return Err(Error::config("plan.fractions", "at least one class required"));
        }
        for (i, (class, r)) in fractions.iter().enumerate() {
            if !r.is_finite() || *r < 0.0 || *r > 1.0 + FRACTION_EPS {
                return Err(Error::config(
                    format!("plan.fractions[{i}].fraction"),
                    format!("must lie in [0, 1], got {r}"),
                ));
            }
            if i > 0 && class.bits >= fractions[i - 1].0.bits {
                return Err(Error::config(
                    format!("plan.fractions[{i}].bits"),
                    "classes must be listed widest first with distinct widths",
                ));
            }
        }
        let plan = Self { fractions };
        if plan.coverage() > 1.0 + FRACTION_EPS {
            return Err(Error::config(
                "plan.fractions",
                format!("coverage {} exceeds 1", plan.coverage()),
            ));
        }
        Ok(plan)
    }

    pub fn single(class: PrecisionClass) -> Self {
        Self {
            fractions: vec![(class, 1.0)],
        }
    }

    /// 25% FP16, 25% INT8, 50% INT4.
    pub fn standard_mixed() -> Self {
        Self {
            fractions: vec![
                (PrecisionClass::fp16(), 0.25),
                (PrecisionClass::int8(), 0.25),
                (PrecisionClass::int4(), 0.5),
            ],
        }
    }

    pub fn fractions(&self) -> &[(PrecisionClass, f64)] {
        &self.fractions
    }

    pub fn coverage(&self) -> f64 {
        self.fractions.iter().map(|(_, r)| r).sum()
    }

    /// Average bits per active neuron, `sum r_i * bits_i`.
    pub fn mean_bits(&self) -> f64 {
        self.fractions.iter().map(|(c, r)| r * c.bits as f64).sum()
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<Vec<ClassId>> {
        self.fractions.iter().map(|(c, _)| spec.class_id(c)).collect()
    }

    /// Neurons per class for an active set of size `k`: `floor(k * r_i)` each,
    /// with the rest of `floor(k * coverage)` going to the narrowest listed class.
    pub fn class_counts(&self, spec: &ModelSpec, k: u32) -> Result<Vec<(ClassId, u32)>> {
        let ids = self.check_against(spec)?;
        Ok(self.counts_for(&ids, k))
    }

    fn counts_for(&self, ids: &[ClassId], k: u32) -> Vec<(ClassId, u32)> {
        let k_f = k as f64;
        let mut counts: Vec<(ClassId, u32)> = self
            .fractions
            .iter()
            .zip(ids)
            .map(|((_, r), &id)| (id, (k_f * r + FRACTION_EPS).floor() as u32))
            .collect();
        let covered = ((k_f * self.coverage() + FRACTION_EPS).floor() as u32).min(k);
        let assigned: u32 = counts.iter().map(|c| c.1).sum();
        if let Some(last) = counts.last_mut() {
            last.1 += covered.saturating_sub(assigned);
        }
        counts
    }
}

/// Per-neuron precision assignment for one activation record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub layer: u32,
    /// `(neuron index, class)` in descending score order.
    pub assigned: Vec<(u32, ClassId)>,
    pub dropped: Vec<u32>,
}

impl Assignment {
    /// Assigned neurons sorted by index, the form cache units consume.
    pub fn required_by_index(&self) -> Vec<(u32, ClassId)> {
        let mut v = self.assigned.clone();
        v.sort_unstable_by_key(|&(n, _)| n);
        v
    }
}

/// Rank by score (descending, ties by ascending index) and slice the ranking
/// into classes according to the plan.
pub fn partition_by_score(record: &ActivationRecord, plan: &PrecisionPlan, spec: &ModelSpec) -> Result<Assignment> {
    let ids = plan.check_against(spec)?;
    Ok(partition_with_ids(record, plan, &ids))
}

pub(crate) fn partition_with_ids(record: &ActivationRecord, plan: &PrecisionPlan, ids: &[ClassId]) -> Assignment {
    let mut ranked: Vec<(u32, f32)> = record.active.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let counts = plan.counts_for(ids, ranked.len() as u32);
    let mut assigned = Vec::with_capacity(ranked.len());
    let mut it = ranked.iter();
    for (id, n) in counts {
        for &(neuron, _) in it.by_ref().take(n as usize) {
            assigned.push((neuron, id));
        }
    }
    let dropped = it.map(|&(n, _)| n).collect();
    Assignment {
        layer: record.layer,
        assigned,
        dropped,
    }
}

/// Per-position token distributions from one decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeLog {
    /// Prompt length (j).
    pub prompt_len: usize,
    /// Prompt plus generated length (N).
    pub total_len: usize,
    pub vocab: usize,
    /// One distribution per generated position `i` in `(j, N]`.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DecodeLogHeader {
    j: usize,
    #[serde(rename = "N")]
    n: usize,
    vocab: usize,
}

impl DecodeLog {
    pub fn validate(&self) -> Result<()> {
        if self.total_len <= self.prompt_len {
            return Err(Error::Validation(format!(
                "total length {} must exceed prompt length {}",
                self.total_len, self.prompt_len
            )));
        }
        let expected = self.total_len - self.prompt_len;
        if self.probs.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} generated positions, found {}",
                self.probs.len()
            )));
        }
        for (i, p) in self.probs.iter().enumerate() {
            if p.len() != self.vocab {
                return Err(Error::Validation(format!(
                    "position {i}: vector has {} entries, vocab is {}",
                    p.len(),
                    self.vocab
                )));
            }
            if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::Validation(format!("position {i}: invalid probability {bad}")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("position {i}: probabilities sum to {sum}")));
            }
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header: DecodeLogHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Validation(format!("{}: empty decode log", path.display()))),
        };
        let mut probs = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            probs.push(serde_json::from_str::<Vec<f64>>(&line)?);
        }
        let log = DecodeLog {
            prompt_len: header.j,
            total_len: header.n,
            vocab: header.vocab,
            probs,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut out,
            &DecodeLogHeader {
                j: self.prompt_len,
                n: self.total_len,
                vocab: self.vocab,
            },
        )?;
        out.write_all(b"\n")?;
        for p in &self.probs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Summed Shannon entropy (nats) over the generated positions.
pub fn uq_entropy(log: &DecodeLog) -> Result<f64> {
    log.validate()?;
    Ok(log
        .probs
        .iter()
        .map(|p| p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum::<f64>())
        .sum())
}

/// Scores a precision mix; lower is better. Fractions are widest class first.
pub trait UncertaintyOracle {
    fn score(&mut self, fractions: &[f64]) -> std::result::Result<f64, String>;
}

impl<F> UncertaintyOracle for F
where
    F: FnMut(&[f64]) -> std::result::Result<f64, String>,
{
    fn score(&mut self, fractions: &[f64]) -> std::result::Result<f64, String> {
        self(fractions)
    }
}

fn evaluate(oracle: &mut dyn UncertaintyOracle, fractions: &[f64]) -> Result<f64> {
    let score = oracle.score(fractions).map_err(|message| Error::Oracle {
        fractions: fractions.to_vec(),
        message,
    })?;
    if score.is_nan() {
        return Err(Error::Oracle {
            fractions: fractions.to_vec(),
            message: "oracle returned NaN".into(),
        });
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioSearchParams {
    pub r_low_init: f64,
    pub step: f64,
    /// `bits(high) / bits(low)`.
    pub bit_ratio: u32,
    /// Also score `(r_low = 0, r_high)` when the last decrement overshoots zero.
    #[serde(default)]
    pub evaluate_clamped_endpoint: bool,
}

impl Default for RatioSearchParams {
    fn default() -> Self {
        Self {
            r_low_init: 1.0,
            step: 0.05,
            bit_ratio: 4,
            evaluate_clamped_endpoint: false,
        }
    }
}

impl RatioSearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("search.step", "must be > 0"));
        }
        if self.bit_ratio == 0 {
            return Err(Error::config("search.bit_ratio", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.r_low_init) {
            return Err(Error::config("search.r_low_init", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Step index `m`; `r_high = m * s`, `r_low = r_low_init - m * n * s`.
    pub step: u32,
    pub r_low: f64,
    pub r_high: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trajectory: Vec<TrajectoryPoint>,
    pub best: TrajectoryPoint,
}

impl SearchReport {
    pub fn plan(&self, high: PrecisionClass, low: PrecisionClass) -> Result<PrecisionPlan> {
        PrecisionPlan::new(vec![(high, self.best.r_high), (low, self.best.r_low)])
    }
}

/// The step search: raise `r_high` by `s` and lower `r_low` by `s * n` while
/// `r_low` stays non-negative, keeping the first strictly-best score.
///
/// Ratios are formed as integer multiples of the step so the trajectory does
/// not accumulate rounding.
pub fn search_ratio(oracle: &mut dyn UncertaintyOracle, params: &RatioSearchParams) -> Result<SearchReport> {
    params.validate()?;
    let s = params.step;
    let n = params.bit_ratio as f64;
    let low_at = |m: u32| {
        let v = params.r_low_init - m as f64 * n * s;
        if v.abs() < FRACTION_EPS {
            0.0
        } else {
            v
        }
    };

    let mut trajectory = Vec::new();
    let mut best: Option<TrajectoryPoint> = None;
    let mut m = 0u32;
    while low_at(m) >= 0.0 {
        m += 1;
        let r_high = m as f64 * s;
        let mut r_low = low_at(m);
        let mut clamped = false;
        if r_low < 0.0 {
            if !params.evaluate_clamped_endpoint {
                break;
            }
            r_low = 0.0;
            clamped = true;
        }
        let score = evaluate(oracle, &[r_high, r_low])?;
        let point = TrajectoryPoint {
            step: m,
            r_low,
            r_high,
            score,
            clamped,
        };
        trajectory.push(point);
        if best.is_none_or(|b| score < b.score) {
            best = Some(point);
        }
        if clamped {
            break;
        }
    }
    let best = best.ok_or_else(|| {
        Error::config(
            "search",
            "no feasible grid point: r_low_init is smaller than one step of s * n",
        )
    })?;
    Ok(SearchReport { trajectory, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub fractions: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub classes: Vec<PrecisionClass>,
    pub evaluated: Vec<GridPoint>,
    pub best: GridPoint,
}

impl GridSearchReport {
    pub fn plan(&self) -> Result<PrecisionPlan> {
        PrecisionPlan::new(
            self.classes
                .iter()
                .cloned()
                .zip(self.best.fractions.iter().copied())
                .collect(),
        )
    }
}

/// Exhaustive search over step-grid fraction tuples whose mean bit width equals
/// `budget_bits`. Points are visited in descending lexicographic order (more
/// high-precision first) and only strict improvements replace the best.
pub fn search_ratio_kclass(
    oracle: &mut dyn UncertaintyOracle,
    classes: &[PrecisionClass],
    step: f64,
    budget_bits: f64,
) -> Result<GridSearchReport> {
    if classes.len() < 2 {
        return Err(Error::config("search.classes", "need at least two classes"));
    }
    if classes.windows(2).any(|w| w[1].bits >= w[0].bits) {
        return Err(Error::config(
            "search.classes",
            "classes must be widest first with distinct widths",
        ));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config("search.step", "must lie in (0, 1]"));
    }
    let units_f = 1.0 / step;
    let units = units_f.round();
    if (units_f - units).abs() > 1e-6 {
        return Err(Error::config("search.step", "step must divide 1 evenly"));
    }
    let target_f = budget_bits / step;
    let target = target_f.round();
    if (target_f - target).abs() > 1e-6 || target < 0.0 {
        return Err(Error::config(
            "search.budget_bits",
            "budget is not reachable on the step grid",
        ));
    }
    let units = units as u64;
    let target = target as u64;
    let bits: Vec<u64> = classes.iter().map(|c| c.bits as u64).collect();

    let mut feasible = Vec::new();
    let mut current = vec![0u64; bits.len()];
    enumerate_grid(&bits, units, target, 0, &mut current, &mut feasible);
    if feasible.is_empty() {
        return Err(Error::config("search", "empty feasible grid"));
    }

    let mut evaluated = Vec::with_capacity(feasible.len());
    let mut best: Option<GridPoint> = None;
    for u in feasible {
        let fractions: Vec<f64> = u.iter().map(|&x| x as f64 * step).collect();
        let score = evaluate(oracle, &fractions)?;
        let point = GridPoint { fractions, score };
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(point.clone());
        }
        evaluated.push(point);
    }
    Ok(GridSearchReport {
        classes: classes.to_vec(),
        evaluated,
        best: best.expect("non-empty grid"),
    })
}

fn enumerate_grid(
    bits: &[u64],
    units_left: u64,
    target_left: u64,
    i: usize,
    current: &mut Vec<u64>,
    out: &mut Vec<Vec<u64>>,
) {
    if i == bits.len() {
        if target_left == 0 {
            out.push(current.clone());
        }
        return;
    }
    let max_u = units_left.min(target_left / bits[i]);
    for u in (0..=max_u).rev() {
        current[i] = u;
        enumerate_grid(bits, units_left - u, target_left - u * bits[i], i + 1, current, out);
    }
    current[i] = 0;
}

/// A desk-scale stand-in for running a real model: decode logs whose logits are
/// fixed by `seed` and whose softmax temperature grows with the distance of the
/// queried fractions from `optimum`. Entropy therefore bottoms out at the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSurface {
    pub optimum: Vec<f64>,
    #[serde(default = "SyntheticSurface::default_vocab")]
    pub vocab: usize,
    #[serde(default = "SyntheticSurface::default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "SyntheticSurface::default_generated")]
    pub generated: usize,
    #[serde(default = "SyntheticSurface::default_base_temperature")]
    pub base_temperature: f64,
    #[serde(default = "SyntheticSurface::default_sharpness")]
    pub sharpness: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSurface {
    fn default_vocab() -> usize {
        64
    }
    fn default_prompt_len() -> usize {
        8
    }
    fn default_generated() -> usize {
        16
    }
    fn default_base_temperature() -> f64 {
        0.5
    }
    fn default_sharpness() -> f64 {
        4.0
    }

    pub fn new(optimum: Vec<f64>, seed: u64) -> Self {
        Self {
            optimum,
            vocab: Self::default_vocab(),
            prompt_len: Self::default_prompt_len(),
            generated: Self::default_generated(),
            base_temperature: Self::default_base_temperature(),
            sharpness: Self::default_sharpness(),
            seed,
        }
    }

    pub fn decode_log(&self, fractions: &[f64]) -> DecodeLog {
        let dist = fractions
            .iter()
            .zip(self.optimum.iter().chain(std::iter::repeat(&0.0)))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let temperature = self.base_temperature + self.sharpness * dist;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let probs = (0..self.generated)
            .map(|_| {
                let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / total).collect()
            })
            .collect();
        DecodeLog {
            prompt_len: self.prompt_len,
            total_len: self.prompt_len + self.generated,
            vocab: self.vocab,
            probs,
        }
    }
}

impl UncertaintyOracle for SyntheticSurface {
    fn score(&mut self, fractions: &[f64]) -> std::result::Result<f64, String> {
        uq_entropy(&self.decode_log(fractions)).map_err(|e| e.to_string())
    }
}

/// Scores ratios from recorded decode logs, one file per grid point, named by
/// the fractions at four decimals joined with `_` (e.g. `0.2500_0.0000.jsonl`).
#[derive(Debug, Clone)]
pub struct DecodeLogDir {
    pub dir: PathBuf,
}

impl DecodeLogDir {
    pub fn file_for(&self, fractions: &[f64]) -> PathBuf {
        let name: Vec<String> = fractions.iter().map(|f| format!("{f:.4}")).collect();
        self.dir.join(format!("{}.jsonl", name.join("_")))
    }
}

impl UncertaintyOracle for DecodeLogDir {
    fn score(&mut self, fractions: &[f64]) -> std::result::Result<f64, String> {
        let path = self.file_for(fractions);
        let log = DecodeLog::read_jsonl(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        uq_entropy(&log).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn record(scores: &[(u32, f32)]) -> ActivationRecord {
        ActivationRecord {
            token: 0,
            layer: 0,
            active: scores.to_vec(),
        }
    }

    fn small_spec(k: u32) -> ModelSpec {
        ModelSpec {
            num_layers: 1,
            d_model: 8,
            ffn_neurons_per_layer: 2000,
            active_per_layer: k,
            ..ModelSpec::default()
        }
    }

    /// Independent oracle: rank with a plain selection sort, then slice.
    fn brute_force_partition(active: &[(u32, f32)], counts: &[usize]) -> (Vec<Vec<u32>>, Vec<u32>) {
        let mut pool = active.to_vec();
        let mut ranked = Vec::new();
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let (bi, bs) = pool[best];
                let (ci, cs) = pool[i];
                if cs > bs || (cs == bs && ci < bi) {
                    best = i;
                }
            }
            ranked.push(pool.remove(best).0);
        }
        let mut classes = Vec::new();
        let mut pos = 0;
        for &c in counts {
            classes.push(ranked[pos..pos + c].to_vec());
            pos += c;
        }
        (classes, ranked[pos..].to_vec())
    }

    #[test]
    fn single_class_keeps_everything() {
        let spec = small_spec(4);
        let rec = record(&[(3, 0.1), (9, 0.9), (4, 0.5), (1, 0.5)]);
        let a = partition_by_score(&rec, &PrecisionPlan::single(PrecisionClass::fp16()), &spec).unwrap();
        assert_eq!(a.assigned.len(), 4);
        assert!(a.dropped.is_empty());
        // ties broken by ascending index
        assert_eq!(a.assigned.iter().map(|x| x.0).collect::<Vec<_>>(), vec![9, 1, 4, 3]);
    }

    #[test]
    fn standard_mix_splits_by_rank() {
        let spec = small_spec(1000);
        let active: Vec<(u32, f32)> = (0..1000).map(|i| (i, (i as f32 * 0.37) % 1.0)).collect();
        let a = partition_by_score(&record(&active), &PrecisionPlan::standard_mixed(), &spec).unwrap();
        let per_class = |c: u8| a.assigned.iter().filter(|x| x.1 == ClassId(c)).count();
        assert_eq!((per_class(0), per_class(1), per_class(2)), (250, 250, 500));
        let bytes: u64 = a.assigned.iter().map(|&(_, c)| spec.class_bytes(c)).sum();
        let full: u64 = 1000 * spec.class_bytes(ClassId(0));
        assert_eq!(bytes * 2, full);
    }

    #[test]
    fn half_int4_drops_bottom_half() {
        let spec = small_spec(10);
        let active: Vec<(u32, f32)> = [7u32, 2, 15, 4, 11, 0, 9, 3, 12, 5]
            .iter()
            .zip([0.3f32, 0.9, 0.1, 0.9, 0.55, 0.2, 0.8, 0.05, 0.6, 0.4])
            .map(|(&i, s)| (i, s))
            .collect();
        let plan = PrecisionPlan::new(vec![(PrecisionClass::int4(), 0.5)]).unwrap();
        let a = partition_by_score(&record(&active), &plan, &spec).unwrap();
        let (classes, dropped) = brute_force_partition(&active, &[5]);
        assert_eq!(a.assigned.iter().map(|x| x.0).collect::<Vec<_>>(), classes[0]);
        assert!(a.assigned.iter().all(|x| x.1 == ClassId(2)));
        assert_eq!(a.dropped, dropped);
    }

    #[test]
    fn zero_active_neurons_occupy_nothing() {
        let spec = ModelSpec {
            active_per_layer: 0,
            ..ModelSpec::default()
        };
        assert_eq!(spec.layer_resident_bytes(&PrecisionPlan::standard_mixed()).unwrap(), 0);
    }

    #[test]
    fn remainder_goes_to_narrowest_class() {
        let spec = small_spec(10);
        let plan = PrecisionPlan::new(vec![(PrecisionClass::fp16(), 0.33), (PrecisionClass::int4(), 0.33)]).unwrap();
        let counts = plan.class_counts(&spec, 10).unwrap();
        assert_eq!(counts, vec![(ClassId(0), 3), (ClassId(2), 3)]);
        let plan = PrecisionPlan::new(vec![(PrecisionClass::fp16(), 0.35), (PrecisionClass::int4(), 0.35)]).unwrap();
        // floor(3.5) + floor(3.5) = 6 but floor(7.0) = 7 are covered
        assert_eq!(
            plan.class_counts(&spec, 10).unwrap(),
            vec![(ClassId(0), 3), (ClassId(2), 4)]
        );
    }

    #[test]
    fn plan_rejects_bad_input() {
        assert!(PrecisionPlan::new(vec![(PrecisionClass::fp16(), 0.7), (PrecisionClass::int4(), 0.7)]).is_err());
        assert!(PrecisionPlan::new(vec![(PrecisionClass::int4(), 0.5), (PrecisionClass::fp16(), 0.5)]).is_err());
        assert!(PrecisionPlan::new(vec![(PrecisionClass::fp16(), -0.1)]).is_err());
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = PrecisionPlan::standard_mixed();
        let text = serde_json::to_string(&plan).unwrap();
        let back: PrecisionPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(plan, back);
        let bad = r#"{"fractions":[{"name":"fp16","bits":16,"fraction":0.9},{"name":"int4","bits":4,"fraction":0.9}]}"#;
        assert!(serde_json::from_str::<PrecisionPlan>(bad).is_err());
    }

    proptest! {
        #[test]
        fn class_sizes_ignore_scores(scores in proptest::collection::vec(0.0f32..1.0, 40), r0 in 0.0f64..0.4, r1 in 0.0f64..0.3) {
            let spec = small_spec(40);
            let plan = PrecisionPlan::new(vec![(PrecisionClass::fp16(), r0), (PrecisionClass::int8(), r1), (PrecisionClass::int4(), 0.25)]).unwrap();
            let active: Vec<(u32, f32)> = scores.iter().enumerate().map(|(i, &s)| (i as u32 * 3, s)).collect();
            let flat: Vec<(u32, f32)> = active.iter().map(|&(i, _)| (i, 0.5)).collect();
            let a = partition_by_score(&record(&active), &plan, &spec).unwrap();
            let b = partition_by_score(&record(&flat), &plan, &spec).unwrap();
            let sizes = |x: &Assignment| (0..3).map(|c| x.assigned.iter().filter(|y| y.1 == ClassId(c)).count()).collect::<Vec<_>>();
            prop_assert_eq!(sizes(&a), sizes(&b));
            prop_assert_eq!(a.dropped.len(), b.dropped.len());
        }

        #[test]
        fn resident_bytes_follow_mean_bits(
            (u0, u1, u2) in (0u32..=20).prop_flat_map(|a| (Just(a), 0..=20 - a)).prop_flat_map(|(a, b)| (Just(a), Just(b), 0..=20 - a - b)),
            k in 1u32..2000,
        ) {
            let plan = PrecisionPlan::new(vec![
                (PrecisionClass::fp16(), u0 as f64 / 20.0),
                (PrecisionClass::int8(), u1 as f64 / 20.0),
                (PrecisionClass::int4(), u2 as f64 / 20.0),
            ]).unwrap();
            let spec = small_spec(k);
            let got = spec.layer_resident_bytes(&plan).unwrap() as f64;
            let full = spec.layer_resident_bytes(&PrecisionPlan::single(PrecisionClass::fp16())).unwrap() as f64;
            let expect = plan.mean_bits() / 16.0 * full;
            // one neuron of rounding per class
            let slack = 3.0 * spec.class_bytes(ClassId(0)) as f64;
            prop_assert!((got - expect).abs() <= slack, "got {} expect {}", got, expect);
        }
    }

    fn double_loop_entropy(log: &DecodeLog) -> f64 {
        let mut total = 0.0;
        for i in 0..log.probs.len() {
            for k in 0..log.vocab {
                let p = log.probs[i][k];
                if p > 0.0 {
                    total -= p * p.ln();
                }
            }
        }
        total
    }

    #[test]
    fn entropy_analytic_cases() {
        let uniform = DecodeLog {
            prompt_len: 3,
            total_len: 4,
            vocab: 4,
            probs: vec![vec![0.25; 4]],
        };
        assert!((uq_entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-15);
        let onehot = DecodeLog {
            prompt_len: 0,
            total_len: 2,
            vocab: 3,
            probs: vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]],
        };
        assert_eq!(uq_entropy(&onehot).unwrap(), 0.0);
    }

    #[test]
    fn entropy_matches_double_loop_on_random_logs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let vocab = rng.gen_range(2..50);
            let probs: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    let raw: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>()).collect();
                    let t: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / t).collect()
                })
                .collect();
            let log = DecodeLog {
                prompt_len: 2,
                total_len: 7,
                vocab,
                probs,
            };
            assert!((uq_entropy(&log).unwrap() - double_loop_entropy(&log)).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_logs_rejected() {
        let neg = DecodeLog {
            prompt_len: 0,
            total_len: 1,
            vocab: 2,
            probs: vec![vec![1.5, -0.5]],
        };
        assert!(matches!(uq_entropy(&neg), Err(Error::Validation(_))));
        let off = DecodeLog {
            prompt_len: 0,
            total_len: 1,
            vocab: 2,
            probs: vec![vec![0.5, 0.4]],
        };
        assert!(matches!(uq_entropy(&off), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(raw in proptest::collection::vec(0.001f64..1.0, 2..20), rot in 0usize..20) {
            let t: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / t).collect();
            let mut q = p.clone();
            let r = rot % q.len();
            q.rotate_left(r);
            let mk = |v: Vec<f64>| DecodeLog { prompt_len: 1, total_len: 2, vocab: v.len(), probs: vec![v] };
            let a = uq_entropy(&mk(p)).unwrap();
            let b = uq_entropy(&mk(q)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn params() -> RatioSearchParams {
        RatioSearchParams {
            r_low_init: 1.0,
            step: 0.05,
            bit_ratio: 4,
            evaluate_clamped_endpoint: false,
        }
    }

    #[test]
    fn search_hits_grid_optimum() {
        let mut oracle = |r: &[f64]| Ok((r[0] - 0.25).abs());
        let rep = search_ratio(&mut oracle, &params()).unwrap();
        assert_eq!(rep.trajectory.len(), 5);
        assert!((rep.best.r_high - 0.25).abs() < 1e-12);
        assert_eq!(rep.best.r_low, 0.0);
    }

    #[test]
    fn constant_oracle_keeps_first_point() {
        let mut oracle = |_: &[f64]| Ok(1.0);
        let rep = search_ratio(&mut oracle, &params()).unwrap();
        assert_eq!(rep.best.step, 1);
        assert!((rep.best.r_high - 0.05).abs() < 1e-12);
        assert!((rep.best.r_low - 0.8).abs() < 1e-12);
    }

    #[test]
    fn decreasing_oracle_takes_last_point() {
        let mut oracle = |r: &[f64]| Ok(-r[0]);
        let rep = search_ratio(&mut oracle, &params()).unwrap();
        let last = *rep.trajectory.last().unwrap();
        assert_eq!(rep.best, last);
    }

    #[test]
    fn clamped_endpoint_is_opt_in() {
        let p = RatioSearchParams {
            r_low_init: 0.9,
            ..params()
        };
        let mut oracle = |_: &[f64]| Ok(0.0);
        assert_eq!(search_ratio(&mut oracle, &p).unwrap().trajectory.len(), 4);
        let p = RatioSearchParams {
            evaluate_clamped_endpoint: true,
            ..p
        };
        let rep = search_ratio(&mut oracle, &p).unwrap();
        assert_eq!(rep.trajectory.len(), 5);
        let last = rep.trajectory.last().unwrap();
        assert!(last.clamped && last.r_low == 0.0);
    }

    #[test]
    fn oracle_errors_carry_the_ratio() {
        let mut oracle = |r: &[f64]| if r[0] > 0.12 { Err("boom".to_string()) } else { Ok(0.0) };
        match search_ratio(&mut oracle, &params()) {
            Err(Error::Oracle { fractions, message }) => {
                assert!((fractions[0] - 0.15).abs() < 1e-12);
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kclass_reduces_to_two_class_search() {
        let mut a = |r: &[f64]| Ok((r[0] - 0.15).abs());
        let two = search_ratio(&mut a, &params()).unwrap();
        let mut b = |r: &[f64]| Ok((r[0] - 0.15).abs());
        let grid = search_ratio_kclass(&mut b, &[PrecisionClass::fp16(), PrecisionClass::int4()], 0.05, 4.0).unwrap();
        assert!((grid.best.fractions[0] - two.best.r_high).abs() < 1e-12);
        assert!((grid.best.fractions[1] - two.best.r_low).abs() < 1e-12);
    }

    #[test]
    fn three_class_grid_contains_standard_mix() {
        let classes = [PrecisionClass::fp16(), PrecisionClass::int8(), PrecisionClass::int4()];
        let mut oracle = |r: &[f64]| Ok((r[0] - 0.25).powi(2) + (r[1] - 0.25).powi(2) + (r[2] - 0.5).powi(2));
        let rep = search_ratio_kclass(&mut oracle, &classes, 0.25, 8.0).unwrap();
        assert!(rep.evaluated.iter().any(|p| p.fractions == vec![0.25, 0.25, 0.5]));
        assert_eq!(rep.best.fractions, vec![0.25, 0.25, 0.5]);
        for p in &rep.evaluated {
            let bits: f64 = p.fractions.iter().zip([16.0, 8.0, 4.0]).map(|(r, b)| r * b).sum();
            assert!((bits - 8.0).abs() < 1e-12);
            assert!(p.fractions.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn kclass_errors() {
        let mut oracle = |_: &[f64]| Ok(0.0);
        let classes = [PrecisionClass::fp16(), PrecisionClass::int4()];
        assert!(search_ratio_kclass(&mut oracle, &classes, 0.3, 4.0).is_err());
        assert!(search_ratio_kclass(&mut oracle, &classes, 0.25, 40.0).is_err());
        assert!(search_ratio_kclass(&mut oracle, &classes[..1], 0.25, 4.0).is_err());
    }

    #[test]
    fn synthetic_surface_bottoms_out_at_plant() {
        let mut surface = SyntheticSurface::new(vec![0.2, 0.2], 3);
        let at = surface.score(&[0.2, 0.2]).unwrap();
        let near = surface.score(&[0.25, 0.0]).unwrap();
        let far = surface.score(&[0.0, 1.0]).unwrap();
        assert!(at < near && near < far);
    }

    #[test]
    fn decode_log_dir_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let src = DecodeLogDir { dir: dir.path().into() };
        let log = DecodeLog {
            prompt_len: 1,
            total_len: 2,
            vocab: 2,
            probs: vec![vec![0.5, 0.5]],
        };
        log.write_jsonl(&src.file_for(&[0.25, 0.0])).unwrap();
        let mut oracle = src.clone();
        assert!((oracle.score(&[0.25, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(oracle.score(&[0.3, 0.0]).is_err());
    }
}
