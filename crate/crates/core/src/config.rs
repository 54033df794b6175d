//! Pipeline configuration, read from a single JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Result, VosError};
use crate::memory::{SamplingPolicy, TopKConfig};
use crate::postprocess::{BoundaryConfig, ZoomConfig};
use crate::propagation::PropagationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub capacity: usize,
    pub policy: SamplingPolicy,
    pub topk: TopKConfig,
    /// Softmax temperature on top of `1/√C`.
    pub temperature: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        let p = PropagationConfig::default();
        Self { capacity: p.memory_capacity, policy: p.policy, topk: p.topk, temperature: p.temperature }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Average,
    Max,
    KeypointVote,
}

impl std::str::FromStr for FusionMode {
    type Err = VosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            "keypoint-vote" => Ok(Self::KeypointVote),
            other => Err(VosError::config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryStage {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: BoundaryConfig,
}

impl Default for BoundaryStage {
    fn default() -> Self {
        Self { enabled: true, params: BoundaryConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoomStage {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: ZoomConfig,
}

impl Default for ZoomStage {
    fn default() -> Self {
        Self { enabled: true, params: ZoomConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub attention_variant: AttentionVariant,
    pub memory: MemoryConfig,
    /// Integer downsampling applied before propagation.
    pub stride: usize,
    pub id_dim: Option<usize>,
    /// Resize factors relative to the input resolution.
    pub scales: Vec<f64>,
    /// Also run every scale on horizontally flipped frames.
    pub flip: bool,
    pub fusion: FusionMode,
    pub boundary: BoundaryStage,
    pub zoom: ZoomStage,
    /// Boundary tolerance in pixels; `None` derives it from the frame diagonal.
    pub tolerance: Option<usize>,
    pub seen_ids: Vec<u8>,
    pub unseen_ids: Vec<u8>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            attention_variant: AttentionVariant::default(),
            memory: MemoryConfig::default(),
            stride: 1,
            id_dim: None,
            scales: vec![1.2, 1.3, 1.4],
            flip: true,
            fusion: FusionMode::default(),
            boundary: BoundaryStage::default(),
            zoom: ZoomStage::default(),
            tolerance: None,
            seen_ids: Vec::new(),
            unseen_ids: Vec::new(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| VosError::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VosError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(VosError::config("at least one scale is required"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(VosError::config(format!("scale {s} must be positive")));
        }
        if self.memory.capacity < 1 {
            return Err(VosError::config("memory capacity must be at least 1"));
        }
        if !(self.memory.temperature > 0.0 && self.memory.temperature.is_finite()) {
            return Err(VosError::config("temperature must be positive"));
        }
        if self.stride < 1 {
            return Err(VosError::config("stride must be at least 1"));
        }
        if self.zoom.params.zoom < 1 {
            return Err(VosError::config("zoom factor must be at least 1"));
        }
        if self.boundary.params.patch_size < 3 {
            return Err(VosError::config("boundary patch size must be at least 3"));
        }
        if let Some(id) = self.seen_ids.iter().find(|id| self.unseen_ids.contains(id)) {
            return Err(VosError::config(format!("object {id} is both seen and unseen")));
        }
        Ok(())
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            variant: self.attention_variant,
            memory_capacity: self.memory.capacity,
            policy: self.memory.policy,
            topk: self.memory.topk,
            temperature: self.memory.temperature,
            stride: self.stride,
            id_dim: self.id_dim,
            seed: self.seed,
        }
    }
}
