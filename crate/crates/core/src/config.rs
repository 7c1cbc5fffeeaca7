//! Run configuration shared by the command line and the browser demo.
//!
//! Files are TOML or JSON. Both are parsed into a JSON value first so that
//! deserialisation errors carry the dotted path of the offending field, and so
//! sweep points can be applied as JSON merge patches.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::carbon::{CarbonParams, Tiers};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, PrecisionClass};
use crate::precision::{DecodeLogDir, PrecisionPlan, RatioSearchParams, SyntheticSurface, UncertaintyOracle};
use crate::trace::{ActivationTrace, SyntheticTraceParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub tiers: Tiers,
    pub engine: EngineConfig,
    pub carbon: CarbonParams,
    pub trace: TraceSource,
    /// Plan file written by `search-ratio`; replaces `engine.plan` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_file: Option<PathBuf>,
    pub search: SearchConfig,
    pub output: OutputConfig,
    /// Merge patches applied to this config, one simulation per entry.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<Value>,
}

/// Exactly one of `file` and `synthetic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTraceParams>,
}

impl Default for TraceSource {
    fn default() -> Self {
        Self {
            file: None,
            synthetic: Some(SyntheticTraceParams::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Class names from `model.precisions` for the two-class search.
    pub high: String,
    pub low: String,
    pub params: RatioSearchParams,
    /// Switches to the exhaustive grid over every class in `model.precisions`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kclass: Option<KClassSearch>,
    pub oracle: OracleSource,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            high: "fp16".into(),
            low: "int4".into(),
            params: RatioSearchParams::default(),
            kclass: None,
            oracle: OracleSource::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KClassSearch {
    pub step: f64,
    pub budget_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSource {
    Synthetic(SyntheticSurface),
    /// One decode log per grid point, see [`DecodeLogDir`].
    DecodeLogs {
        dir: PathBuf,
    },
}

impl Default for OracleSource {
    fn default() -> Self {
        OracleSource::Synthetic(SyntheticSurface::new(vec![0.15, 0.4], 0))
    }
}

impl OracleSource {
    pub fn build(&self) -> Box<dyn UncertaintyOracle> {
        match self {
            OracleSource::Synthetic(s) => Box::new(s.clone()),
            OracleSource::DecodeLogs { dir } => Box::new(DecodeLogDir { dir: dir.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_timeline: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            emit_timeline: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    /// By extension, falling back to sniffing for a leading `{`.
    pub fn detect(path: Option<&Path>, text: &str) -> Format {
        match path.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            Some("toml") => Format::Toml,
            _ if text.trim_start().starts_with('{') => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn to_value(text: &str, format: Format) -> Result<Value> {
    match format {
        Format::Json => serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string())),
        Format::Toml => toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string().trim_end().to_string())),
    }
}

fn from_value(value: Value, prefix: &str) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let path = match (prefix.is_empty(), path.as_str()) {
            (true, _) => path,
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{path}"),
        };
        Error::config(path, e.inner().to_string())
    })
}

/// RFC 7386 JSON merge patch: objects merge recursively, `null` deletes,
/// anything else replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    let Value::Object(fields) = patch else {
        *target = patch.clone();
        return;
    };
    if !target.is_object() {
        *target = Value::Object(Map::new());
    }
    let obj = target.as_object_mut().expect("object");
    for (k, v) in fields {
        if v.is_null() {
            obj.remove(k);
        } else {
            merge_patch(obj.entry(k.clone()).or_insert(Value::Null), v);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, format: Format) -> Result<Self> {
        let cfg = from_value(to_value(text, format)?, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a file. Relative paths inside it resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = from_value(to_value(&text, Format::detect(Some(path), &text))?, "")?;
        if let Some(base) = path.parent() {
            cfg.rebase_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.trace.file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.plan_file.as_mut() {
            fix(p);
        }
        if let OracleSource::DecodeLogs { dir } = &mut self.search.oracle {
            fix(dir);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Validation(format!("cannot render TOML: {e}")))
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).expect("config is always representable as JSON")
    }

    /// One seed for every random stream in the run.
    pub fn apply_seed(&mut self, seed: u64) {
        if let Some(s) = self.trace.synthetic.as_mut() {
            s.seed = seed;
        }
        self.engine.prediction_seed = seed;
        if let OracleSource::Synthetic(s) = &mut self.search.oracle {
            s.seed = seed;
        }
    }

    pub fn use_trace_file(&mut self, path: PathBuf) {
        self.trace = TraceSource {
            file: Some(path),
            synthetic: None,
        };
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tiers.validate()?;
        self.carbon.validate()?;
        match (&self.trace.file, &self.trace.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("trace", "set either `file` or `synthetic`, not both")),
            (None, None) => return Err(Error::config("trace", "one of `file` or `synthetic` is required")),
            (None, Some(p)) => validate_synthetic(p, &self.model)?,
            (Some(_), None) => {}
        }
        if self.plan_file.is_none() {
            self.engine.validate(&self.model, &self.tiers)?;
        }
        self.search.params.validate()?;
        let high = self.search_class(&self.search.high, "search.high")?;
        let low = self.search_class(&self.search.low, "search.low")?;
        if high.bits != self.search.params.bit_ratio * low.bits {
            return Err(Error::config(
                "search.params.bit_ratio",
                format!(
                    "{} bits / {} bits is not {}",
                    high.bits, low.bits, self.search.params.bit_ratio
                ),
            ));
        }
        for (i, point) in self.sweep.iter().enumerate() {
            if !point.is_object() {
                return Err(Error::config(format!("sweep[{i}]"), "each sweep point must be a table"));
            }
        }
        Ok(())
    }

    fn search_class(&self, name: &str, path: &str) -> Result<PrecisionClass> {
        self.model
            .precisions
            .iter()
            .find(|c| c.name == name)
            .cloned()
            .ok_or_else(|| Error::config(path, format!("no precision class named `{name}` in model.precisions")))
    }

    pub fn search_classes(&self) -> Result<(PrecisionClass, PrecisionClass)> {
        Ok((
            self.search_class(&self.search.high, "search.high")?,
            self.search_class(&self.search.low, "search.low")?,
        ))
    }

    /// Reads `plan_file` into `engine.plan` and validates the result.
    pub fn resolve_plan(&mut self) -> Result<()> {
        if let Some(path) = self.plan_file.take() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::config("plan_file", format!("{}: {e}", path.display())))?;
            self.engine.plan = serde_json::from_str::<PrecisionPlan>(&text)
                .map_err(|e| Error::config("plan_file", format!("{}: {e}", path.display())))?;
            self.engine.validate(&self.model, &self.tiers)?;
        }
        Ok(())
    }

    pub fn load_trace(&self) -> Result<ActivationTrace> {
        match (&self.trace.file, &self.trace.synthetic) {
            (Some(path), _) => ActivationTrace::load_from_path(path, &self.model),
            (None, Some(params)) => ActivationTrace::generate(&self.model, params),
            (None, None) => Err(Error::config("trace", "no trace source")),
        }
    }

    /// The config for each sweep point, labelled by its compact patch text.
    pub fn sweep_points(&self) -> Result<Vec<(String, RunConfig)>> {
        if self.sweep.is_empty() {
            return Err(Error::config("sweep", "no sweep points configured"));
        }
        let mut base = self.to_json_value();
        base.as_object_mut().expect("object").remove("sweep");
        self.sweep
            .iter()
            .enumerate()
            .map(|(i, patch)| {
                let mut value = base.clone();
                merge_patch(&mut value, patch);
                let cfg = from_value(value, &format!("sweep[{i}]"))?;
                cfg.validate().map_err(|e| match e {
                    Error::Config { path, message } => Error::config(format!("sweep[{i}].{path}"), message),
                    other => other,
                })?;
                Ok((serde_json::to_string(patch)?, cfg))
            })
            .collect()
    }
}

fn validate_synthetic(p: &SyntheticTraceParams, spec: &ModelSpec) -> Result<()> {
    if p.num_tokens == 0 {
        return Err(Error::config("trace.synthetic.num_tokens", "must be >= 1"));
    }
    if !(0.0..=1.0).contains(&p.overlap) {
        return Err(Error::config("trace.synthetic.overlap", "must lie in [0, 1]"));
    }
    if let Some(v) = &p.overlap_by_layer {
        if v.len() != spec.num_layers as usize {
            return Err(Error::config(
                "trace.synthetic.overlap_by_layer",
                format!("expected {} entries, got {}", spec.num_layers, v.len()),
            ));
        }
        if let Some(i) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::config(
                format!("trace.synthetic.overlap_by_layer[{i}]"),
                "must lie in [0, 1]",
            ));
        }
    }
    Ok(())
}
