//! JSON reports and CSV tables written by the command line.
//!
//! Everything in a report is a pure function of the resolved config and the
//! trace except `generated_at`, which the caller supplies.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::engine::{AblationRow, Metrics};
use crate::error::Result;
use crate::precision::{GridSearchReport, PrecisionPlan, SearchReport};
use crate::trace::ActivationTrace;

pub const TOOL: &str = concat!("tierlm ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    pub generated_at: String,
    pub tool: &'static str,
    pub command: &'static str,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &'static str, generated_at: impl Into<String>, body: T) -> Self {
        Self {
            generated_at: generated_at.into(),
            tool: TOOL,
            command,
            body,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub tokens: u32,
    pub layers: u32,
    pub active_per_layer: u32,
    pub ffn_neurons: u32,
    pub mean_overlap: f64,
    pub fingerprint: String,
}

impl TraceSummary {
    pub fn of(trace: &ActivationTrace) -> Self {
        Self {
            tokens: trace.num_tokens(),
            layers: trace.num_layers(),
            active_per_layer: trace.active_per_layer(),
            ffn_neurons: trace.ffn_neurons(),
            mean_overlap: trace.mean_overlap(),
            fingerprint: trace.fingerprint().to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationBody<'a> {
    pub config: &'a RunConfig,
    pub trace: TraceSummary,
    pub metrics: &'a Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationBody<'a> {
    pub config: &'a RunConfig,
    pub trace: TraceSummary,
    pub rows: &'a [AblationRow],
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum SearchOutcome {
    TwoClass(SearchReport),
    KClass(GridSearchReport),
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchBody<'a> {
    pub config: &'a RunConfig,
    pub search: &'a SearchOutcome,
    pub plan: &'a PrecisionPlan,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub trace: TraceSummary,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepBody<'a> {
    pub config: &'a RunConfig,
    pub points: &'a [SweepPoint],
}

const SUMMARY_HEADER: &str = "tokens_per_second,ttft_seconds,hbm_hit_ratio,dram_to_hbm_bytes,ssd_to_dram_bytes,hbm_footprint_bytes,dram_footprint_bytes,energy_joules,oce_g,ece_g,cf_g";

fn summary_fields(m: &Metrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        m.tokens_per_second,
        m.time_to_first_token_seconds,
        m.hbm_hit_ratio,
        m.bytes.dram_to_hbm,
        m.bytes.ssd_to_dram_demand + m.bytes.ssd_to_dram_preload,
        m.hbm_footprint_bytes,
        m.dram_footprint_bytes,
        m.energy_breakdown.total_joules,
        m.carbon.oce,
        m.carbon.ece,
        m.carbon.cf
    )
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,{SUMMARY_HEADER}\n");
    for row in rows {
        let _ = writeln!(out, "{},{}", quote(&row.variant), summary_fields(&row.metrics));
    }
    out
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("point,{SUMMARY_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{}", quote(&p.label), summary_fields(&p.metrics));
    }
    out
}

/// `step,r_high,r_low,score` for the two-class search; one fraction column per
/// class for the grid search.
pub fn trajectory_csv(outcome: &SearchOutcome) -> String {
    match outcome {
        SearchOutcome::TwoClass(r) => {
            let mut out = String::from("step,r_high,r_low,score,clamped\n");
            for p in &r.trajectory {
                let _ = writeln!(out, "{},{},{},{},{}", p.step, p.r_high, p.r_low, p.score, p.clamped);
            }
            out
        }
        SearchOutcome::KClass(r) => {
            let names: Vec<&str> = r.classes.iter().map(|c| c.name.as_str()).collect();
            let mut out = format!("{},score\n", names.join(","));
            for p in &r.evaluated {
                let fr: Vec<String> = p.fractions.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{},{}", fr.join(","), p.score);
            }
            out
        }
    }
}

/// A few human-readable lines for the terminal.
pub fn metrics_summary(m: &Metrics) -> String {
    format!(
        "tokens/s {:.3}  ttft {:.6} s  hbm hit {:.4}  dram->hbm {} B  ssd->dram {} B\n\
         stalls: dram {:.6} s  ssd {:.6} s\n\
         footprint: hbm {} B  dram {} B\n\
         carbon: oce {:.6} g  ece {:.6} g  cf {:.6} g",
        m.tokens_per_second,
        m.time_to_first_token_seconds,
        m.hbm_hit_ratio,
        m.bytes.dram_to_hbm,
        m.bytes.ssd_to_dram_demand + m.bytes.ssd_to_dram_preload,
        m.stalls.dram_wait_seconds,
        m.stalls.ssd_wait_seconds,
        m.hbm_footprint_bytes,
        m.dram_footprint_bytes,
        m.carbon.oce,
        m.carbon.ece,
        m.carbon.cf
    )
}
