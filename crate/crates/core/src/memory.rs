//! External memory of past frames.
//!
//! A bank stores `(keys, values, identity)` triplets per retained frame and
//! answers attention reads for a query frame. The first annotated frame is
//! pinned and never evicted. Reads optionally keep only the `k` best-scoring
//! memory tokens per query row before the softmax.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_kernel, gated_memory, AttentionVariant, EmbeddingMatrix, IdentityEmbedding, KernelOptions,
    LayerProjections,
};
use crate::error::{Result, VosError};
use crate::io::tensor::{read_tensor, write_tensor, RawTensor};

/// One retained frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    frame_index: usize,
    keys: EmbeddingMatrix,
    values: EmbeddingMatrix,
    identity: IdentityEmbedding,
}

impl MemoryEntry {
    pub fn new(
        frame_index: usize,
        keys: EmbeddingMatrix,
        values: EmbeddingMatrix,
        identity: IdentityEmbedding,
    ) -> Result<Self> {
        if keys.rows() != values.rows() || keys.rows() != identity.tokens() {
            return Err(VosError::shape(format!(
                "memory entry token counts differ: keys {}, values {}, identity {}",
                keys.rows(),
                values.rows(),
                identity.tokens()
            )));
        }
        Ok(Self { frame_index, keys, values, identity })
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn keys(&self) -> &EmbeddingMatrix {
        &self.keys
    }

    pub fn values(&self) -> &EmbeddingMatrix {
        &self.values
    }

    pub fn identity(&self) -> &IdentityEmbedding {
        &self.identity
    }

    pub fn tokens(&self) -> usize {
        self.keys.rows()
    }
}

/// Which frames enter the bank and which leave it when full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingPolicy {
    /// Admit every frame; when full, drop the oldest unpinned frame.
    KeepAll,
    /// Admit frames whose offset from the first frame is a multiple of `stride`;
    /// when full, drop the interior frame whose neighbours are closest together.
    Stride { stride: usize },
    /// Keep everything for videos no longer than the capacity, otherwise the
    /// first frame plus every `ceil(video_len / capacity)`-th frame.
    FirstPlusStride { video_len: usize },
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy::KeepAll
    }
}

impl SamplingPolicy {
    /// Admission stride for this policy under `capacity`.
    pub fn stride(&self, capacity: usize) -> usize {
        match *self {
            SamplingPolicy::KeepAll => 1,
            SamplingPolicy::Stride { stride } => stride.max(1),
            SamplingPolicy::FirstPlusStride { video_len } => {
                if video_len <= capacity {
                    1
                } else {
                    video_len.div_ceil(capacity)
                }
            }
        }
    }
}

/// Top-k read filter. Disabled by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopKConfig {
    pub k: usize,
    pub enabled: bool,
}

impl TopKConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn keep(k: usize) -> Self {
        Self { k, enabled: true }
    }
}

/// Parameters of a single memory read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadConfig {
    pub variant: AttentionVariant,
    pub topk: TopKConfig,
    /// Divides the `1/√C`-scaled scores; values below 1 sharpen the softmax.
    pub temperature: f64,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self { variant: AttentionVariant::default(), topk: TopKConfig::disabled(), temperature: 1.0 }
    }
}

/// What happened to an appended frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Admitted { evicted: Option<usize> },
    /// Off-stride frame, or no room for anything but the pinned first frame.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    policy: SamplingPolicy,
    /// Highest frame index offered so far, admitted or not.
    last_seen: usize,
}

impl MemoryBank {
    /// Seeds a bank with the annotated first frame, which stays pinned.
    pub fn init(first: MemoryEntry, capacity: usize, policy: SamplingPolicy) -> Result<Self> {
        if capacity < 1 {
            return Err(VosError::config("memory capacity must be at least 1"));
        }
        if let SamplingPolicy::Stride { stride: 0 } = policy {
            return Err(VosError::config("memory stride must be at least 1"));
        }
        let last_seen = first.frame_index;
        Ok(Self { entries: vec![first], capacity, policy, last_seen })
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> SamplingPolicy {
        self.policy
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(MemoryEntry::frame_index).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(MemoryEntry::tokens).sum()
    }

    pub fn append(&mut self, entry: MemoryEntry) -> Result<AppendOutcome> {
        if entry.frame_index <= self.last_seen {
            return Err(VosError::Ordering { last: self.last_seen, got: entry.frame_index });
        }
        if let Some(first) = self.entries.first() {
            if entry.keys.cols() != first.keys.cols()
                || entry.values.cols() != first.values.cols()
                || entry.identity.dim() != first.identity.dim()
            {
                return Err(VosError::shape("memory entry channel dimensions differ from the bank"));
            }
        }
        self.last_seen = entry.frame_index;
        let origin = self.entries[0].frame_index;
        if (entry.frame_index - origin) % self.policy.stride(self.capacity) != 0 {
            return Ok(AppendOutcome::Skipped);
        }
        if self.capacity == 1 {
            return Ok(AppendOutcome::Skipped);
        }
        self.entries.push(entry);
        if self.entries.len() <= self.capacity {
            return Ok(AppendOutcome::Admitted { evicted: None });
        }
        let victim = self.eviction_candidate();
        let removed = self.entries.remove(victim);
        Ok(AppendOutcome::Admitted { evicted: Some(removed.frame_index) })
    }

    /// Position of the entry to drop. Never 0 (pinned) and never the newest.
    fn eviction_candidate(&self) -> usize {
        let last = self.entries.len() - 1;
        match self.policy {
            SamplingPolicy::KeepAll => 1,
            SamplingPolicy::Stride { .. } | SamplingPolicy::FirstPlusStride { .. } => (1..last)
                .min_by_key(|&i| self.entries[i + 1].frame_index - self.entries[i - 1].frame_index)
                .unwrap_or(1),
        }
    }

    /// Concatenates every entry's tokens and attends from `q`.
    pub fn read(
        &self,
        q: &EmbeddingMatrix,
        config: &ReadConfig,
        proj: Option<&LayerProjections>,
    ) -> Result<EmbeddingMatrix> {
        if self.entries.is_empty() {
            return Err(VosError::State("read from an empty memory bank".into()));
        }
        let keys = EmbeddingMatrix::vstack(self.entries.iter().map(|e| &e.keys))?;
        let values = EmbeddingMatrix::vstack(self.entries.iter().map(|e| &e.values))?;
        let topk = if config.topk.enabled {
            if config.topk.k == 0 || config.topk.k > keys.rows() {
                return Err(VosError::config(format!(
                    "top-k of {} with {} memory tokens",
                    config.topk.k,
                    keys.rows()
                )));
            }
            Some(config.topk.k)
        } else {
            None
        };
        let opts = KernelOptions { temperature: config.temperature, topk };
        match config.variant {
            AttentionVariant::Plain => attention_kernel(q, &keys, &values, opts),
            AttentionVariant::Identity => {
                let identity = self.stacked_identity()?;
                attention_kernel(q, &keys, &values.add(identity.as_matrix())?, opts)
            }
            AttentionVariant::Gated => {
                let proj = proj.ok_or_else(|| VosError::config("gated read needs layer projections"))?;
                let identity = self.stacked_identity()?;
                let (gated, augmented) = gated_memory(&keys, &values, &identity, proj)?;
                attention_kernel(q, &gated, &augmented, opts)
            }
        }
    }

    fn stacked_identity(&self) -> Result<IdentityEmbedding> {
        EmbeddingMatrix::vstack(self.entries.iter().map(|e| e.identity.as_matrix())).map(IdentityEmbedding::new)
    }

    /// Writes the bank to `dir` as a JSON manifest plus one tensor file per block.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| VosError::io(dir, e))?;
        let manifest = BankManifest {
            capacity: self.capacity,
            policy: self.policy,
            last_seen: self.last_seen,
            frames: self.frame_indices(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| VosError::Format(e.to_string()))?;
        let path = dir.join("bank.json");
        fs::write(&path, json).map_err(|e| VosError::io(&path, e))?;
        for entry in &self.entries {
            for (name, m) in [
                ("keys", &entry.keys),
                ("values", &entry.values),
                ("identity", entry.identity.as_matrix()),
            ] {
                let tensor = RawTensor::f64(vec![m.rows(), m.cols()], m.data().to_vec())?;
                write_tensor(&dir.join(format!("{:05}_{name}.vosp", entry.frame_index)), &tensor)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bank.json");
        let text = fs::read_to_string(&path).map_err(|e| VosError::io(&path, e))?;
        let manifest: BankManifest = serde_json::from_str(&text).map_err(|e| VosError::Format(e.to_string()))?;
        let load = |frame: usize, name: &str| -> Result<EmbeddingMatrix> {
            let tensor = read_tensor(&dir.join(format!("{frame:05}_{name}.vosp")))?;
            match tensor.dims() {
                [rows, cols] => EmbeddingMatrix::new(*rows, *cols, tensor.into_f64()?),
                other => Err(VosError::Format(format!("expected a rank-2 tensor, got dims {other:?}"))),
            }
        };
        let mut entries = Vec::with_capacity(manifest.frames.len());
        for &frame in &manifest.frames {
            entries.push(MemoryEntry::new(
                frame,
                load(frame, "keys")?,
                load(frame, "values")?,
                IdentityEmbedding::new(load(frame, "identity")?),
            )?);
        }
        if entries.is_empty() {
            return Err(VosError::Format("memory bank manifest lists no frames".into()));
        }
        Ok(Self { entries, capacity: manifest.capacity, policy: manifest.policy, last_seen: manifest.last_seen })
    }
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    capacity: usize,
    policy: SamplingPolicy,
    last_seen: usize,
    frames: Vec<usize>,
}
