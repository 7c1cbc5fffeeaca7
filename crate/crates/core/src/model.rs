//! Model shape and byte accounting.
//!
//! A neuron is one row of the FFN up-projection plus the matching column of the
//! down-projection, so it carries `neuron_multiplier * d_model` weights
//! (multiplier 2 by default, 3 to fold in the gate matrix of gated FFNs).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::precision::PrecisionPlan;

/// A numeric storage width for neuron weights.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionClass {
    pub name: String,
    pub bits: u32,
}

impl PrecisionClass {
    pub fn new(name: impl Into<String>, bits: u32) -> Self {
        Self {
            name: name.into(),
            bits,
        }
    }

    pub fn fp16() -> Self {
        Self::new("fp16", 16)
    }

    pub fn int8() -> Self {
        Self::new("int8", 8)
    }

    pub fn int4() -> Self {
        Self::new("int4", 4)
    }
}

/// Index of a precision class within [`ModelSpec::precisions`]; 0 is the widest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u8);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: u32,
    pub index: u32,
}

impl NeuronId {
    pub fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }
}

fn default_multiplier() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub d_model: u64,
    /// FFN neurons per layer (F).
    pub ffn_neurons_per_layer: u32,
    pub attention_params_per_layer: u64,
    /// Embedding, norm and head parameters, counted once.
    #[serde(default)]
    pub other_params: u64,
    /// Weights per neuron in units of `d_model`.
    #[serde(default = "default_multiplier")]
    pub neuron_multiplier: u32,
    /// Strictly decreasing in bits; the first entry is the storage precision.
    pub precisions: Vec<PrecisionClass>,
    /// Activated neurons per layer per token (k).
    pub active_per_layer: u32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::llama_7b_like()
    }
}

impl ModelSpec {
    /// 32 layers, d_model 4096, F = 11008, k = 1000, FP16/INT8/INT4.
    pub fn llama_7b_like() -> Self {
        Self {
            num_layers: 32,
            d_model: 4096,
            ffn_neurons_per_layer: 11008,
            attention_params_per_layer: 4 * 4096 * 4096,
            other_params: 2 * 32000 * 4096,
            neuron_multiplier: 2,
            precisions: vec![PrecisionClass::fp16(), PrecisionClass::int8(), PrecisionClass::int4()],
            active_per_layer: 1000,
        }
    }

    /// 80 layers, d_model 8192, F = 28672 with full multi-head attention.
    pub fn llama_70b_like() -> Self {
        Self {
            num_layers: 80,
            d_model: 8192,
            ffn_neurons_per_layer: 28672,
            attention_params_per_layer: 4 * 8192 * 8192,
            other_params: 2 * 32000 * 8192,
            neuron_multiplier: 2,
            precisions: vec![PrecisionClass::fp16(), PrecisionClass::int8(), PrecisionClass::int4()],
            active_per_layer: 2600,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("model.num_layers", "must be >= 1"));
        }
        if self.d_model == 0 {
            return Err(Error::config("model.d_model", "must be >= 1"));
        }
        if self.neuron_multiplier == 0 {
            return Err(Error::config("model.neuron_multiplier", "must be >= 1"));
        }
        if self.active_per_layer == 0 || self.active_per_layer > self.ffn_neurons_per_layer {
            return Err(Error::config(
                "model.active_per_layer",
                format!(
                    "need 0 < k <= F, got k = {} with F = {}",
                    self.active_per_layer, self.ffn_neurons_per_layer
                ),
            ));
        }
        if self.precisions.is_empty() {
            return Err(Error::config("model.precisions", "at least one class required"));
        }
        if self.precisions.len() > u8::MAX as usize {
            return Err(Error::config("model.precisions", "too many classes"));
        }
        for (i, p) in self.precisions.iter().enumerate() {
            if p.bits == 0 {
                return Err(Error::config(format!("model.precisions[{i}].bits"), "must be > 0"));
            }
            if i > 0 && p.bits >= self.precisions[i - 1].bits {
                return Err(Error::config(
                    format!("model.precisions[{i}].bits"),
                    "bit widths must be distinct and strictly decreasing",
                ));
            }
        }
        Ok(())
    }

    pub fn class_id(&self, class: &PrecisionClass) -> Result<ClassId> {
        self.precisions
            .iter()
            .position(|p| p == class)
            .map(|i| ClassId(i as u8))
            .ok_or_else(|| {
                Error::config(
                    "plan",
                    format!(
                        "precision class {}/{} is not declared by the model",
                        class.name, class.bits
                    ),
                )
            })
    }

    pub fn class(&self, id: ClassId) -> &PrecisionClass {
        &self.precisions[id.index()]
    }

    /// The widest class; DRAM and SSD keep neurons at this precision.
    pub fn storage_class(&self) -> ClassId {
        ClassId(0)
    }

    /// `ceil(multiplier * d_model * bits / 8)`.
    pub fn neuron_bytes(&self, class: &PrecisionClass) -> Result<u64> {
        let id = self.class_id(class)?;
        Ok(self.class_bytes(id))
    }

    pub fn class_bytes(&self, id: ClassId) -> u64 {
        let bits = self.neuron_multiplier as u64 * self.d_model * self.precisions[id.index()].bits as u64;
        bits.div_ceil(8)
    }

    /// Per-class neuron sizes, indexed by `ClassId`.
    pub fn class_bytes_table(&self) -> Vec<u64> {
        (0..self.precisions.len())
            .map(|i| self.class_bytes(ClassId(i as u8)))
            .collect()
    }

    /// Bytes of one complete FFN layer at storage precision.
    pub fn full_layer_bytes(&self) -> u64 {
        self.ffn_neurons_per_layer as u64 * self.class_bytes(self.storage_class())
    }

    pub fn full_model_ffn_bytes(&self) -> u64 {
        self.num_layers as u64 * self.full_layer_bytes()
    }

    pub fn ffn_params(&self) -> u64 {
        self.num_layers as u64 * self.neuron_multiplier as u64 * self.d_model * self.ffn_neurons_per_layer as u64
    }

    pub fn ffn_param_fraction(&self) -> Result<f64> {
        let ffn = self.ffn_params() as f64;
        let total = ffn + self.num_layers as f64 * self.attention_params_per_layer as f64 + self.other_params as f64;
        if total == 0.0 {
            return Err(Error::Domain("model has zero parameters".into()));
        }
        Ok(ffn / total)
    }

    /// HBM bytes of one layer's active set under `plan` (the `n * m` unit size).
    pub fn layer_resident_bytes(&self, plan: &PrecisionPlan) -> Result<u64> {
        let counts = plan.class_counts(self, self.active_per_layer)?;
        Ok(counts.iter().map(|&(id, n)| n as u64 * self.class_bytes(id)).sum())
    }

    /// Stable digest of every field that shapes a trace or a byte count.
    pub fn fingerprint(&self) -> String {
        let mut canon = format!(
            "v1|{}|{}|{}|{}|{}|{}|{}",
            self.num_layers,
            self.d_model,
            self.ffn_neurons_per_layer,
            self.attention_params_per_layer,
            self.other_params,
            self.neuron_multiplier,
            self.active_per_layer
        );
        for p in &self.precisions {
            canon.push_str(&format!("|{}:{}", p.name, p.bits));
        }
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
