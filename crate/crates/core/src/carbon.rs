//! Transfer cost, energy and carbon accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOULES_PER_KWH: f64 = 3.6e6;
pub const SECONDS_PER_YEAR: f64 = 31_557_600.0;

/// One memory tier and the link that reads from it into the next faster tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub name: String,
    pub capacity: u64,
    /// Read bandwidth toward the faster tier, bytes per second.
    pub bandwidth: f64,
    /// Fixed cost per transfer, seconds.
    pub latency: f64,
    /// Resident power, watts per byte held.
    #[serde(default)]
    pub power_per_byte: f64,
    /// Flat device power while the tier is in use, watts.
    #[serde(default)]
    pub static_power_watts: f64,
    #[serde(default)]
    pub transfer_energy_per_byte: f64,
    /// Independent channels on the outbound link.
    #[serde(default = "one")]
    pub lanes: u32,
}

fn one() -> u32 {
    1
}

impl TierSpec {
    /// 24 GB of device memory; transfers within HBM are not modelled.
    pub fn hbm_default() -> Self {
        Self {
            name: "hbm".into(),
            capacity: 24_000_000_000,
            bandwidth: 936e9,
            latency: 0.0,
            power_per_byte: 0.0,
            static_power_watts: 0.0,
            transfer_energy_per_byte: 0.0,
            lanes: 1,
        }
    }

    /// 64 GB host DRAM behind a 12 GB/s effective PCIe link, 26 W per 256 GB.
    pub fn dram_default() -> Self {
        Self {
            name: "dram".into(),
            capacity: 64_000_000_000,
            bandwidth: 12e9,
            latency: 50e-6,
            power_per_byte: 26.0 / 256e9,
            static_power_watts: 0.0,
            transfer_energy_per_byte: 0.0,
            lanes: 1,
        }
    }

    /// NVMe SSD at 3 GB/s per lane, 2 W flat.
    pub fn ssd_default() -> Self {
        Self {
            name: "ssd".into(),
            capacity: 2_000_000_000_000,
            bandwidth: 3e9,
            latency: 100e-6,
            power_per_byte: 0.0,
            static_power_watts: 2.0,
            transfer_energy_per_byte: 0.0,
            lanes: 2,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::config(
                format!("{path}.bandwidth"),
                "must be a positive finite number",
            ));
        }
        if !(self.latency >= 0.0) || !self.latency.is_finite() {
            return Err(Error::config(format!("{path}.latency"), "must be >= 0"));
        }
        for (field, v) in [
            ("power_per_byte", self.power_per_byte),
            ("static_power_watts", self.static_power_watts),
            ("transfer_energy_per_byte", self.transfer_energy_per_byte),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{path}.{field}"), "must be >= 0"));
            }
        }
        if self.lanes == 0 {
            return Err(Error::config(format!("{path}.lanes"), "must be >= 1"));
        }
        Ok(())
    }

    /// Seconds to move `bytes` over this tier's link: `latency + bytes / bandwidth`.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        transfer_time(bytes, self)
    }

    /// [`transfer_time`] rounded to whole nanoseconds of virtual time.
    pub fn transfer_ns(&self, bytes: u64) -> u64 {
        seconds_to_ns(self.transfer_time(bytes))
    }
}

/// The three tiers of the hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tiers {
    #[serde(default = "TierSpec::hbm_default")]
    pub hbm: TierSpec,
    #[serde(default = "TierSpec::dram_default")]
    pub dram: TierSpec,
    #[serde(default = "TierSpec::ssd_default")]
    pub ssd: TierSpec,
}

impl Default for Tiers {
    fn default() -> Self {
        Self {
            hbm: TierSpec::hbm_default(),
            dram: TierSpec::dram_default(),
            ssd: TierSpec::ssd_default(),
        }
    }
}

impl Tiers {
    pub fn validate(&self) -> Result<()> {
        self.hbm.validate("tiers.hbm")?;
        self.dram.validate("tiers.dram")?;
        self.ssd.validate("tiers.ssd")
    }

    /// Tier specs in hierarchy order.
    pub fn list(&self) -> [TierSpec; 3] {
        [self.hbm.clone(), self.dram.clone(), self.ssd.clone()]
    }

    /// The HBM tier's own link is unused.
    pub fn dram_to_hbm(&self) -> &TierSpec {
        &self.dram
    }

    pub fn ssd_to_dram(&self) -> &TierSpec {
        &self.ssd
    }
}

pub fn transfer_time(bytes: u64, link: &TierSpec) -> f64 {
    link.latency + bytes as f64 / link.bandwidth
}

pub fn seconds_to_ns(s: f64) -> u64 {
    (s * 1e9).round() as u64
}

pub fn ns_to_seconds(ns: u64) -> f64 {
    ns as f64 * 1e-9
}

/// Manufacturing carbon of a device and the lifetime it is amortized over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEmbodied {
    /// grams CO2
    pub total_embodied: f64,
    /// seconds
    pub lifetime: f64,
}

impl Default for DeviceEmbodied {
    /// 150 kg CO2 over five years.
    fn default() -> Self {
        Self {
            total_embodied: 150_000.0,
            lifetime: 5.0 * SECONDS_PER_YEAR,
        }
    }
}

impl DeviceEmbodied {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lifetime > 0.0) || !self.lifetime.is_finite() {
            return Err(Error::config(format!("{path}.lifetime"), "must be > 0"));
        }
        if !(self.total_embodied >= 0.0) {
            return Err(Error::config(format!("{path}.total_embodied"), "must be >= 0"));
        }
        Ok(())
    }
}

/// Usage of one tier over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierUsage {
    pub tier: String,
    pub resident_byte_seconds: f64,
    /// Seconds the device draws its static power.
    pub active_seconds: f64,
    /// Bytes read out of the tier over its link.
    pub bytes_read: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub tiers: Vec<TierUsage>,
    pub compute_busy_seconds: f64,
    pub runtime_seconds: f64,
}

impl EnergyLedger {
    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(v >= 0.0) || !v.is_finite();
        if bad(self.compute_busy_seconds) || bad(self.runtime_seconds) {
            return Err(Error::Validation("ledger times must be nonnegative".into()));
        }
        if self.compute_busy_seconds > self.runtime_seconds * (1.0 + 1e-12) {
            return Err(Error::Validation("compute busy time exceeds runtime".into()));
        }
        for t in &self.tiers {
            if bad(t.resident_byte_seconds) || bad(t.active_seconds) {
                return Err(Error::Validation(format!("tier {} has negative usage", t.tier)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Joules per tier, in ledger order.
    pub tiers: Vec<(String, f64)>,
    pub compute_joules: f64,
    pub total_joules: f64,
}

/// Joules per tier plus GPU compute energy.
pub fn energy(ledger: &EnergyLedger, tiers: &[TierSpec], gpu_power_watts: f64) -> Result<EnergyBreakdown> {
    ledger.validate()?;
    if !(gpu_power_watts >= 0.0) {
        return Err(Error::Validation("GPU power must be nonnegative".into()));
    }
    let mut per_tier = Vec::with_capacity(ledger.tiers.len());
    for usage in &ledger.tiers {
        let spec = tiers
            .iter()
            .find(|t| t.name == usage.tier)
            .ok_or_else(|| Error::Validation(format!("ledger names unknown tier {}", usage.tier)))?;
        let j = usage.resident_byte_seconds * spec.power_per_byte
            + usage.active_seconds * spec.static_power_watts
            + usage.bytes_read as f64 * spec.transfer_energy_per_byte;
        per_tier.push((usage.tier.clone(), j));
    }
    let compute_joules = ledger.compute_busy_seconds * gpu_power_watts;
    let total_joules = per_tier.iter().map(|(_, j)| j).sum::<f64>() + compute_joules;
    Ok(EnergyBreakdown {
        tiers: per_tier,
        compute_joules,
        total_joules,
    })
}

/// grams CO2 = energy in kWh times `intensity` (gCO2/kWh).
pub fn operational_carbon(
    ledger: &EnergyLedger,
    tiers: &[TierSpec],
    gpu_power_watts: f64,
    intensity: f64,
) -> Result<f64> {
    if !(intensity >= 0.0) {
        return Err(Error::Validation("carbon intensity must be nonnegative".into()));
    }
    Ok(energy(ledger, tiers, gpu_power_watts)?.total_joules / JOULES_PER_KWH * intensity)
}

/// `total_embodied * runtime / lifetime`.
pub fn embodied_carbon(runtime_seconds: f64, device: &DeviceEmbodied) -> f64 {
    device.total_embodied * runtime_seconds / device.lifetime
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarbonReport {
    pub oce: f64,
    pub ece: f64,
    pub cf: f64,
    pub intensity: f64,
}

pub fn total_footprint(oce: f64, ece: f64, intensity: f64) -> CarbonReport {
    CarbonReport {
        oce,
        ece,
        cf: oce + ece,
        intensity,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarbonParams {
    /// gCO2 per kWh.
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    #[serde(default = "default_gpu_power")]
    pub gpu_power_watts: f64,
    #[serde(default)]
    pub device: DeviceEmbodied,
}

fn default_intensity() -> f64 {
    820.0
}

fn default_gpu_power() -> f64 {
    350.0
}

impl Default for CarbonParams {
    fn default() -> Self {
        Self {
            intensity: default_intensity(),
            gpu_power_watts: default_gpu_power(),
            device: DeviceEmbodied::default(),
        }
    }
}

impl CarbonParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(Error::config("carbon.intensity", "must be >= 0"));
        }
        if !(self.gpu_power_watts >= 0.0) || !self.gpu_power_watts.is_finite() {
            return Err(Error::config("carbon.gpu_power_watts", "must be >= 0"));
        }
        self.device.validate("carbon.device")
    }

    pub fn report(&self, ledger: &EnergyLedger, tiers: &[TierSpec]) -> Result<CarbonReport> {
        let oce = operational_carbon(ledger, tiers, self.gpu_power_watts, self.intensity)?;
        let ece = embodied_carbon(ledger.runtime_seconds, &self.device);
        Ok(total_footprint(oce, ece, self.intensity))
    }
}
