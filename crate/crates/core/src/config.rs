//! Input documents and their validated, normalized forms.
//!
//! Three JSON documents drive every run: `model.json` (the transformer shape
//! and workload), `hardware.json` (one GPU plus the cluster fabric) and
//! `run.json` (parallelism mapping, faults, execution mode and study
//! parameters). Unknown fields are rejected everywhere.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology;

/// Environment variable that overrides the run document's `rng_seed`.
pub const SEED_ENV_VAR: &str = "RAPIDSIM_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{doc}: parse error at `{path}`: {message}")]
    Parse {
        doc: &'static str,
        path: String,
        message: String,
    },
    #[error("validation error [{invariant}]: {detail}")]
    Validation { invariant: String, detail: String },
    #[error("unknown topology preset `{0}`")]
    UnknownPreset(String),
    #[error("preset `{preset}` expects {expected} node count(s), got {got}")]
    PresetArity {
        preset: String,
        expected: usize,
        got: usize,
    },
}

impl ConfigError {
    pub(crate) fn invalid(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        ConfigError::Validation {
            invariant: invariant.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn parse_doc<'de, T: Deserialize<'de>>(doc: &'static str, text: &'de str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Parse {
            doc,
            path,
            message: e.into_inner().to_string(),
        }
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Fp32,
    Fp16,
    Bf16,
}

impl DType {
    pub fn bytes(self) -> u64 {
        match self {
            DType::Fp32 => 4,
            DType::Fp16 | DType::Bf16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp32,
    MixedFp16,
    MixedBf16,
}

impl Precision {
    /// Datatype of weights, activations and GEMM operands.
    pub fn compute_dtype(self) -> DType {
        match self {
            Precision::Fp32 => DType::Fp32,
            Precision::MixedFp16 => DType::Fp16,
            Precision::MixedBf16 => DType::Bf16,
        }
    }

    pub fn bytes_per_elem(self) -> u64 {
        self.compute_dtype().bytes()
    }

    pub fn is_mixed(self) -> bool {
        !matches!(self, Precision::Fp32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u64>,
    pub ffn_dim: u64,
    pub vocab_size: u64,
    pub seq_len: u64,
    pub batch_size: u64,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_len: Option<u64>,
    pub precision: Precision,
    /// Gated (SwiGLU-style) MLP with fused gate+up projection.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gated_ffn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelSpec {
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    pub vocab_size: u64,
    pub seq_len: u64,
    pub batch_size: u64,
    pub phase: Phase,
    pub prefill_len: u64,
    pub decode_len: u64,
    pub precision: Precision,
    pub gated_ffn: bool,
}

impl ModelSpec {
    pub fn from_doc(doc: ModelDoc) -> Result<Self> {
        let counts = [
            ("num_layers", doc.num_layers),
            ("hidden_dim", doc.hidden_dim),
            ("num_heads", doc.num_heads),
            ("ffn_dim", doc.ffn_dim),
            ("vocab_size", doc.vocab_size),
            ("seq_len", doc.seq_len),
            ("batch_size", doc.batch_size),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(ConfigError::invalid("counts >= 1", format!("{name} = {v}")));
            }
        }
        if !doc.hidden_dim.is_multiple_of(doc.num_heads) {
            return Err(ConfigError::invalid(
                "hidden_dim divisible by num_heads",
                format!("{} % {} != 0", doc.hidden_dim, doc.num_heads),
            ));
        }
        let derived = doc.hidden_dim / doc.num_heads;
        let head_dim = match doc.head_dim {
            Some(h) if h != derived => {
                return Err(ConfigError::invalid(
                    "head_dim = hidden_dim / num_heads",
                    format!("stated {h}, derived {derived}"),
                ))
            }
            _ => derived,
        };
        let (prefill_len, decode_len) = match doc.phase {
            Phase::Inference => {
                let p = doc.prefill_len.unwrap_or(0);
                if p < 1 {
                    return Err(ConfigError::invalid(
                        "inference prefill_len >= 1",
                        format!("prefill_len = {p}"),
                    ));
                }
                (p, doc.decode_len.unwrap_or(0))
            }
            Phase::Train => (doc.prefill_len.unwrap_or(0), doc.decode_len.unwrap_or(0)),
        };
        Ok(ModelSpec {
            num_layers: doc.num_layers,
            hidden_dim: doc.hidden_dim,
            num_heads: doc.num_heads,
            head_dim,
            ffn_dim: doc.ffn_dim,
            vocab_size: doc.vocab_size,
            seq_len: doc.seq_len,
            batch_size: doc.batch_size,
            phase: doc.phase,
            prefill_len,
            decode_len,
            precision: doc.precision,
            gated_ffn: doc.gated_ffn,
        })
    }

    pub fn to_doc(&self) -> ModelDoc {
        let inference = self.phase == Phase::Inference;
        ModelDoc {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            head_dim: Some(self.head_dim),
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            phase: self.phase,
            prefill_len: (inference || self.prefill_len > 0).then_some(self.prefill_len),
            decode_len: (inference || self.decode_len > 0).then_some(self.decode_len),
            precision: self.precision,
            gated_ffn: self.gated_ffn,
        }
    }

    /// Weight count of one transformer layer (attention, MLP, two norms).
    pub fn layer_params(&self) -> u64 {
        let h = self.hidden_dim;
        let mlp_in = if self.gated_ffn { 2 } else { 1 };
        4 * h * h + (mlp_in + 1) * h * self.ffn_dim + 2 * h
    }

    pub fn embedding_params(&self) -> u64 {
        self.vocab_size * self.hidden_dim
    }

    /// Untied LM head plus the final norm.
    pub fn head_params(&self) -> u64 {
        self.vocab_size * self.hidden_dim + self.hidden_dim
    }

    pub fn total_params(&self) -> u64 {
        self.num_layers * self.layer_params() + self.embedding_params() + self.head_params()
    }
}

// ---------------------------------------------------------------------------
// Hardware
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub peak_flops: BTreeMap<DType, f64>,
    pub num_sms: u64,
    pub sram_per_sm: u64,
    pub sram_bw: f64,
    pub l2_capacity: u64,
    pub l2_bw: f64,
    pub hbm_capacity: u64,
    pub hbm_bw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_derate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_derate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_overhead: Option<f64>,
    pub topology: TopologyDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareSpec {
    pub name: String,
    pub peak_flops: BTreeMap<DType, f64>,
    pub num_sms: u64,
    pub sram_per_sm: u64,
    pub sram_bw: f64,
    pub l2_capacity: u64,
    pub l2_bw: f64,
    pub hbm_capacity: u64,
    pub hbm_bw: f64,
    pub compute_derate: f64,
    pub mem_derate: f64,
    pub overlap_factor: f64,
    /// Multiplier on the summed memory footprint (allocator/fragmentation).
    pub memory_overhead: f64,
}

impl HardwareSpec {
    pub fn from_doc(doc: &HardwareDoc) -> Result<Self> {
        let mut peak = doc.peak_flops.clone();
        let tensor_peak = peak.get(&DType::Fp16).or(peak.get(&DType::Bf16)).copied();
        if let Some(tp) = tensor_peak {
            peak.entry(DType::Fp16).or_insert(tp);
            peak.entry(DType::Bf16).or_insert(tp);
            peak.entry(DType::Fp32).or_insert(tp / 2.0);
        }
        if peak.is_empty() {
            return Err(ConfigError::invalid("peak_flops non-empty", "no dtype given"));
        }
        let hw = HardwareSpec {
            name: doc.name.clone().unwrap_or_else(|| "gpu".to_string()),
            peak_flops: peak,
            num_sms: doc.num_sms,
            sram_per_sm: doc.sram_per_sm,
            sram_bw: doc.sram_bw,
            l2_capacity: doc.l2_capacity,
            l2_bw: doc.l2_bw,
            hbm_capacity: doc.hbm_capacity,
            hbm_bw: doc.hbm_bw,
            compute_derate: doc.compute_derate.unwrap_or(1.0),
            mem_derate: doc.mem_derate.unwrap_or(1.0),
            overlap_factor: doc.overlap_factor.unwrap_or(0.0),
            memory_overhead: doc.memory_overhead.unwrap_or(1.0),
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        for (dt, v) in &self.peak_flops {
            if !(v.is_finite() && *v > 0.0) {
                return Err(ConfigError::invalid(
                    "peak_flops > 0",
                    format!("{dt:?} = {v}"),
                ));
            }
        }
        if self.num_sms < 1 || self.sram_per_sm < 1 {
            return Err(ConfigError::invalid("counts >= 1", "num_sms and sram_per_sm must be >= 1"));
        }
        for (name, v) in [("sram_bw", self.sram_bw), ("l2_bw", self.l2_bw), ("hbm_bw", self.hbm_bw)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::invalid("bandwidth > 0", format!("{name} = {v}")));
            }
        }
        if !(self.sram_bw > self.l2_bw && self.l2_bw > self.hbm_bw) {
            return Err(ConfigError::invalid(
                "bandwidth ordering",
                format!(
                    "need sram_bw > l2_bw > hbm_bw, got {} / {} / {}",
                    self.sram_bw, self.l2_bw, self.hbm_bw
                ),
            ));
        }
        let sram_total = self.sram_per_sm * self.num_sms;
        if !(sram_total < self.l2_capacity && self.l2_capacity < self.hbm_capacity) {
            return Err(ConfigError::invalid(
                "capacity ordering",
                format!(
                    "need sram_total < l2_capacity < hbm_capacity, got {} / {} / {}",
                    sram_total, self.l2_capacity, self.hbm_capacity
                ),
            ));
        }
        for (name, v) in [("compute_derate", self.compute_derate), ("mem_derate", self.mem_derate)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::invalid("derate in (0,1]", format!("{name} = {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_factor) {
            return Err(ConfigError::invalid(
                "overlap_factor in [0,1]",
                format!("overlap_factor = {}", self.overlap_factor),
            ));
        }
        if !(self.memory_overhead >= 1.0 && self.memory_overhead.is_finite()) {
            return Err(ConfigError::invalid(
                "memory_overhead >= 1",
                format!("memory_overhead = {}", self.memory_overhead),
            ));
        }
        Ok(())
    }

    /// Peak FLOP/s for a datatype before derating.
    pub fn peak(&self, dtype: DType) -> f64 {
        self.peak_flops
            .get(&dtype)
            .copied()
            .unwrap_or_else(|| self.peak_flops.values().copied().fold(0.0, f64::max))
    }

    fn to_doc(&self, topology: &TopologySpec) -> HardwareDoc {
        HardwareDoc {
            name: Some(self.name.clone()),
            peak_flops: self.peak_flops.clone(),
            num_sms: self.num_sms,
            sram_per_sm: self.sram_per_sm,
            sram_bw: self.sram_bw,
            l2_capacity: self.l2_capacity,
            l2_bw: self.l2_bw,
            hbm_capacity: self.hbm_capacity,
            hbm_bw: self.hbm_bw,
            compute_derate: Some(self.compute_derate),
            mem_derate: Some(self.mem_derate),
            overlap_factor: Some(self.overlap_factor),
            memory_overhead: Some(self.memory_overhead),
            topology: TopologyDoc::Explicit {
                dims: topology.dims.clone(),
                kingmesh: topology.kingmesh,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseTopology {
    #[serde(alias = "Ring")]
    Ring,
    #[serde(alias = "FullyConnected")]
    FullyConnected,
    #[serde(alias = "Switch")]
    Switch,
    #[serde(alias = "Mesh1D", alias = "mesh")]
    Mesh1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionSpec {
    pub base: BaseTopology,
    pub node_count: u64,
    pub link_bw: f64,
    pub link_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologySpec {
    pub dims: Vec<DimensionSpec>,
    /// Dimensions 0 and 1 form a king's-move mesh (Mesh2D plus diagonals).
    pub kingmesh: bool,
}

impl TopologySpec {
    pub fn num_gpus(&self) -> u64 {
        self.dims.iter().map(|d| d.node_count).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(ConfigError::invalid("at least one dimension", "dims is empty"));
        }
        for (i, d) in self.dims.iter().enumerate() {
            if d.node_count < 2 {
                return Err(ConfigError::invalid(
                    "node_count >= 2 per dimension",
                    format!("dim {i} has {} nodes", d.node_count),
                ));
            }
            if !(d.link_bw.is_finite() && d.link_bw > 0.0) {
                return Err(ConfigError::invalid("link_bw > 0", format!("dim {i}: {}", d.link_bw)));
            }
            if !(d.link_latency.is_finite() && d.link_latency >= 0.0) {
                return Err(ConfigError::invalid(
                    "link_latency >= 0",
                    format!("dim {i}: {}", d.link_latency),
                ));
            }
        }
        if self.kingmesh
            && (self.dims.len() < 2
                || self.dims[0].base != BaseTopology::Mesh1d
                || self.dims[1].base != BaseTopology::Mesh1d)
        {
            return Err(ConfigError::invalid(
                "kingmesh requires Mesh1D dims 0 and 1",
                format!("{:?}", self.dims.iter().map(|d| d.base).collect::<Vec<_>>()),
            ));
        }
        Ok(())
    }
}

/// Scalar applied to every dimension, or one value per preset dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDim {
    One(f64),
    Many(Vec<f64>),
}

impl PerDim {
    fn get(&self, i: usize) -> f64 {
        match self {
            PerDim::One(v) => *v,
            PerDim::Many(vs) => vs[i],
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            PerDim::One(_) => None,
            PerDim::Many(vs) => Some(vs.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyDoc {
    Preset {
        preset: String,
        node_counts: Vec<u64>,
        link_bw: PerDim,
        link_latency: PerDim,
    },
    Explicit {
        dims: Vec<DimensionSpec>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        kingmesh: bool,
    },
}

impl TopologyDoc {
    pub fn resolve(&self) -> Result<TopologySpec> {
        let spec = match self {
            TopologyDoc::Preset {
                preset,
                node_counts,
                link_bw,
                link_latency,
            } => resolve_topology_preset(preset, node_counts, link_bw, link_latency)?,
            TopologyDoc::Explicit { dims, kingmesh } => TopologySpec {
                dims: dims.clone(),
                kingmesh: *kingmesh,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Expand a named topology preset into its dimension stack.
///
/// Supported: `Ring`, `FullyConnected`, `Switch`, `Mesh`, `Mesh2D`, `Mesh3D`,
/// `Torus2D`, `Torus3D`, `KingMesh2D` and `HyperCube` (node count must be a
/// power of two; expands to one `Ring(2)` per bit).
pub fn resolve_topology_preset(
    name: &str,
    node_counts: &[u64],
    link_bw: &PerDim,
    link_latency: &PerDim,
) -> Result<TopologySpec> {
    use BaseTopology::*;
    let (bases, kingmesh): (Vec<BaseTopology>, bool) = match name {
        "Ring" => (vec![Ring], false),
        "FullyConnected" => (vec![FullyConnected], false),
        "Switch" => (vec![Switch], false),
        "Mesh" | "Mesh1D" => (vec![Mesh1d], false),
        "Mesh2D" => (vec![Mesh1d, Mesh1d], false),
        "Mesh3D" => (vec![Mesh1d, Mesh1d, Mesh1d], false),
        "Torus2D" => (vec![Ring, Ring], false),
        "Torus3D" => (vec![Ring, Ring, Ring], false),
        "KingMesh2D" => (vec![Mesh1d, Mesh1d], true),
        "HyperCube" => (vec![Ring], false),
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    };
    if node_counts.len() != bases.len() {
        return Err(ConfigError::PresetArity {
            preset: name.to_string(),
            expected: bases.len(),
            got: node_counts.len(),
        });
    }
    for p in [link_bw, link_latency] {
        if let Some(n) = p.len() {
            if n != bases.len() {
                return Err(ConfigError::PresetArity {
                    preset: name.to_string(),
                    expected: bases.len(),
                    got: n,
                });
            }
        }
    }
    let dims = if name == "HyperCube" {
        let n = node_counts[0];
        if n < 2 || !n.is_power_of_two() {
            return Err(ConfigError::invalid(
                "hypercube node count is a power of two >= 2",
                format!("got {n}"),
            ));
        }
        (0..n.trailing_zeros())
            .map(|_| DimensionSpec {
                base: Ring,
                node_count: 2,
                link_bw: link_bw.get(0),
                link_latency: link_latency.get(0),
            })
            .collect()
    } else {
        bases
            .iter()
            .zip(node_counts)
            .enumerate()
            .map(|(i, (&base, &node_count))| DimensionSpec {
                base,
                node_count,
                link_bw: link_bw.get(i),
                link_latency: link_latency.get(i),
            })
            .collect()
    };
    let spec = TopologySpec { dims, kingmesh };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Parallelism
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroStage {
    None,
    Z1,
    Z2,
    Z3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recompute {
    None,
    Selective,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Dp,
    Tp,
    Pp,
    Cp,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Dp => "dp",
            Axis::Tp => "tp",
            Axis::Pp => "pp",
            Axis::Cp => "cp",
        })
    }
}

pub const DEFAULT_AXIS_ORDER: [Axis; 4] = [Axis::Tp, Axis::Cp, Axis::Dp, Axis::Pp];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismDoc {
    #[serde(default = "one")]
    pub dp: u64,
    #[serde(default = "one")]
    pub tp: u64,
    #[serde(default = "one")]
    pub pp: u64,
    #[serde(default = "one")]
    pub cp: u64,
    #[serde(default)]
    pub sp_enabled: bool,
    #[serde(default = "one")]
    pub num_microbatches: u64,
    #[serde(default = "zero_none")]
    pub zero_stage: ZeroStage,
    #[serde(default = "recompute_none")]
    pub recompute: Recompute,
    /// Axes from innermost (stride 1) to outermost rank stride.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_order: Option<Vec<Axis>>,
}

fn one() -> u64 {
    1
}
fn zero_none() -> ZeroStage {
    ZeroStage::None
}
fn recompute_none() -> Recompute {
    Recompute::None
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ParallelismConfig {
    pub dp: u64,
    pub tp: u64,
    pub pp: u64,
    pub cp: u64,
    pub sp_enabled: bool,
    pub num_microbatches: u64,
    pub zero_stage: ZeroStage,
    pub recompute: Recompute,
    pub axis_order: [Axis; 4],
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        ParallelismConfig {
            dp: 1,
            tp: 1,
            pp: 1,
            cp: 1,
            sp_enabled: false,
            num_microbatches: 1,
            zero_stage: ZeroStage::None,
            recompute: Recompute::None,
            axis_order: DEFAULT_AXIS_ORDER,
        }
    }
}

impl ParallelismConfig {
    pub fn from_doc(doc: &ParallelismDoc) -> Result<Self> {
        let axis_order = match &doc.axis_order {
            None => DEFAULT_AXIS_ORDER,
            Some(v) => {
                let mut sorted = v.clone();
                sorted.sort();
                sorted.dedup();
                if v.len() != 4 || sorted.len() != 4 {
                    return Err(ConfigError::invalid(
                        "axis_order is a permutation of dp,tp,pp,cp",
                        format!("{v:?}"),
                    ));
                }
                [v[0], v[1], v[2], v[3]]
            }
        };
        let par = ParallelismConfig {
            dp: doc.dp,
            tp: doc.tp,
            pp: doc.pp,
            cp: doc.cp,
            sp_enabled: doc.sp_enabled,
            num_microbatches: doc.num_microbatches,
            zero_stage: doc.zero_stage,
            recompute: doc.recompute,
            axis_order,
        };
        for (axis, v) in [
            ("dp", par.dp),
            ("tp", par.tp),
            ("pp", par.pp),
            ("cp", par.cp),
            ("num_microbatches", par.num_microbatches),
        ] {
            if v < 1 {
                return Err(ConfigError::invalid("degrees >= 1", format!("{axis} = {v}")));
            }
        }
        Ok(par)
    }

    pub fn to_doc(&self) -> ParallelismDoc {
        ParallelismDoc {
            dp: self.dp,
            tp: self.tp,
            pp: self.pp,
            cp: self.cp,
            sp_enabled: self.sp_enabled,
            num_microbatches: self.num_microbatches,
            zero_stage: self.zero_stage,
            recompute: self.recompute,
            axis_order: Some(self.axis_order.to_vec()),
        }
    }

    pub fn world_size(&self) -> u64 {
        self.dp * self.tp * self.pp * self.cp
    }

    pub fn degree(&self, axis: Axis) -> u64 {
        match axis {
            Axis::Dp => self.dp,
            Axis::Tp => self.tp,
            Axis::Pp => self.pp,
            Axis::Cp => self.cp,
        }
    }

    pub fn layout(&self) -> RankLayout {
        RankLayout::new(self)
    }

    /// Short identifier used in sweep and study outputs.
    pub fn id(&self) -> String {
        format!(
            "dp{}-tp{}-pp{}-cp{}{}-mb{}-{}-{}",
            self.dp,
            self.tp,
            self.pp,
            self.cp,
            if self.sp_enabled { "-sp" } else { "" },
            self.num_microbatches,
            match self.zero_stage {
                ZeroStage::None => "z0",
                ZeroStage::Z1 => "z1",
                ZeroStage::Z2 => "z2",
                ZeroStage::Z3 => "z3",
            },
            match self.recompute {
                Recompute::None => "rc-none",
                Recompute::Selective => "rc-sel",
                Recompute::Full => "rc-full",
            }
        )
    }

    /// Hierarchical mode needs every TP/CP group inside dimension 0 of the
    /// fabric, with PP and DP strides outside of it.
    pub fn check_hierarchical(&self, topo: &TopologySpec) -> Result<()> {
        let inner = self.tp * self.cp;
        let dim0 = topo.dims[0].node_count;
        if !dim0.is_multiple_of(inner) {
            return Err(ConfigError::invalid(
                "TP/SP/CP in first network dimension",
                format!(
                    "tp*cp = {inner} does not tile dimension 0 ({dim0} nodes); use flattened mode"
                ),
            ));
        }
        let mut seen_outer = false;
        for axis in self.axis_order {
            let deg = self.degree(axis);
            if deg == 1 {
                continue;
            }
            match axis {
                Axis::Tp | Axis::Cp if seen_outer => {
                    return Err(ConfigError::invalid(
                        "TP/SP/CP in first network dimension",
                        format!(
                            "axis {axis} is placed outside dp/pp in axis_order {:?}; use flattened mode",
                            self.axis_order
                        ),
                    ))
                }
                Axis::Dp | Axis::Pp => seen_outer = true,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Coordinates of one rank along the four parallelism axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AxisCoords {
    pub dp: u64,
    pub tp: u64,
    pub pp: u64,
    pub cp: u64,
}

impl AxisCoords {
    pub fn get(&self, axis: Axis) -> u64 {
        match axis {
            Axis::Dp => self.dp,
            Axis::Tp => self.tp,
            Axis::Pp => self.pp,
            Axis::Cp => self.cp,
        }
    }

    pub fn with(mut self, axis: Axis, v: u64) -> Self {
        match axis {
            Axis::Dp => self.dp = v,
            Axis::Tp => self.tp = v,
            Axis::Pp => self.pp = v,
            Axis::Cp => self.cp = v,
        }
        self
    }
}

/// Mixed-radix mapping between global rank ids and parallelism coordinates.
#[derive(Debug, Clone)]
pub struct RankLayout {
    order: [Axis; 4],
    degrees: [u64; 4],
    strides: [u64; 4],
}

impl RankLayout {
    pub fn new(par: &ParallelismConfig) -> Self {
        let degrees = par.axis_order.map(|a| par.degree(a));
        let mut strides = [1u64; 4];
        for i in 1..4 {
            strides[i] = strides[i - 1] * degrees[i - 1];
        }
        RankLayout {
            order: par.axis_order,
            degrees,
            strides,
        }
    }

    pub fn world_size(&self) -> u64 {
        self.degrees.iter().product()
    }

    pub fn stride(&self, axis: Axis) -> u64 {
        let i = self.order.iter().position(|a| *a == axis).unwrap();
        self.strides[i]
    }

    pub fn coords(&self, rank: u64) -> AxisCoords {
        let mut c = AxisCoords {
            dp: 0,
            tp: 0,
            pp: 0,
            cp: 0,
        };
        for i in 0..4 {
            c = c.with(self.order[i], (rank / self.strides[i]) % self.degrees[i]);
        }
        c
    }

    pub fn rank(&self, c: AxisCoords) -> u64 {
        (0..4).map(|i| c.get(self.order[i]) * self.strides[i]).sum()
    }

    /// Ranks that differ from `rank` only along the given axes, ascending.
    pub fn group(&self, rank: u64, axes: &[Axis]) -> Vec<u64> {
        let base = self.coords(rank);
        let mut out = vec![base];
        for &axis in axes {
            let deg = self.degrees[self.order.iter().position(|a| *a == axis).unwrap()];
            out = out
                .iter()
                .flat_map(|c| (0..deg).map(move |v| c.with(axis, v)))
                .collect();
        }
        let mut ranks: Vec<u64> = out.into_iter().map(|c| self.rank(c)).collect();
        ranks.sort_unstable();
        ranks
    }
}

// ---------------------------------------------------------------------------
// Faults
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFault {
    pub endpoint_a: u64,
    pub endpoint_b: u64,
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultGenerator {
    pub count: u64,
    pub derate_mean: f64,
    pub derate_std: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub faults: Vec<LinkFault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<FaultGenerator>,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<()> {
        for f in &self.faults {
            match (f.kind, f.derate) {
                (FaultKind::Soft, Some(d)) if d > 0.0 && d < 1.0 => {}
                (FaultKind::Soft, d) => {
                    return Err(ConfigError::invalid(
                        "soft derate in (0,1)",
                        format!("{}-{}: {d:?}", f.endpoint_a, f.endpoint_b),
                    ))
                }
                (FaultKind::Hard, Some(_)) => {
                    return Err(ConfigError::invalid(
                        "hard faults carry no derate",
                        format!("{}-{}", f.endpoint_a, f.endpoint_b),
                    ))
                }
                (FaultKind::Hard, None) => {}
            }
        }
        if let Some(g) = &self.generator {
            if !(g.derate_std >= 0.0 && g.derate_mean.is_finite()) {
                return Err(ConfigError::invalid(
                    "generator derate_std >= 0",
                    format!("mean {} std {}", g.derate_mean, g.derate_std),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Flattened,
    Hierarchical,
}

/// Candidate values per axis for a parallelism sweep. Missing lists mean
/// "every divisor of the GPU count" for degrees and the current value for
/// the rest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pp: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cp: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_microbatches: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_stage: Option<Vec<ZeroStage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recompute: Option<Vec<Recompute>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_mc_mean")]
    pub derate_mean: f64,
    #[serde(default = "default_mc_std")]
    pub derate_std: f64,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        MonteCarloSpec {
            iterations: default_iterations(),
            derate_mean: default_mc_mean(),
            derate_std: default_mc_std(),
        }
    }
}

fn default_iterations() -> u64 {
    100
}
fn default_mc_mean() -> f64 {
    0.5
}
fn default_mc_std() -> f64 {
    0.1
}

/// Named hardware override for what-if studies. Scale factors multiply the
/// base value; absolute fields replace it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareOverrides {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_flops_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sram_per_sm_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sram_bw_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_capacity_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_bw_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbm_capacity: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbm_bw_scale: Option<f64>,
    /// Sustained-bandwidth multiplier applied after `hbm_bw_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbm_bw_throttle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDoc {
    pub parallelism: ParallelismDoc,
    #[serde(default)]
    pub faults: FaultSpec,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub whatif: Vec<HardwareOverrides>,
    /// Simulate every decode step instead of geometric KV-length buckets.
    #[serde(default)]
    pub decode_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOptions {
    pub mode: Mode,
    pub rng_seed: u64,
    pub sweep: SweepGrid,
    pub monte_carlo: MonteCarloSpec,
    pub whatif: Vec<HardwareOverrides>,
    pub decode_exact: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: Mode::Flattened,
            rng_seed: 0,
            sweep: SweepGrid::default(),
            monte_carlo: MonteCarloSpec::default(),
            whatif: Vec::new(),
            decode_exact: false,
        }
    }
}

/// Everything a run needs, fully validated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Specs {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub topology: TopologySpec,
    pub parallelism: ParallelismConfig,
    pub faults: FaultSpec,
    pub run: RunOptions,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl Specs {
    /// Serialize back into the three input documents.
    pub fn to_docs(&self) -> (String, String, String) {
        let run = RunDoc {
            parallelism: self.parallelism.to_doc(),
            faults: self.faults.clone(),
            mode: self.run.mode,
            rng_seed: self.run.rng_seed,
            sweep: Some(self.run.sweep.clone()),
            monte_carlo: Some(self.run.monte_carlo.clone()),
            whatif: self.run.whatif.clone(),
            decode_exact: self.run.decode_exact,
        };
        (
            serde_json::to_string_pretty(&self.model.to_doc()).unwrap(),
            serde_json::to_string_pretty(&self.hardware.to_doc(&self.topology)).unwrap(),
            serde_json::to_string_pretty(&run).unwrap(),
        )
    }

    /// Apply a seed override (e.g. from [`SEED_ENV_VAR`]).
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.run.rng_seed = s;
            if let Some(g) = self.faults.generator.as_mut() {
                g.rng_seed = s;
            }
        }
        self
    }
}

/// Read [`SEED_ENV_VAR`], if set to an integer.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            ConfigError::invalid(SEED_ENV_VAR, format!("not an unsigned integer: {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    ModelSpec::from_doc(parse_doc("model", text)?)
}

pub fn parse_hardware(text: &str) -> Result<(HardwareSpec, TopologySpec)> {
    let doc: HardwareDoc = parse_doc("hardware", text)?;
    Ok((HardwareSpec::from_doc(&doc)?, doc.topology.resolve()?))
}

pub fn parse_run(text: &str) -> Result<RunDoc> {
    parse_doc("run", text)
}

/// Parse and cross-validate the model, hardware and run documents.
pub fn parse_specs(model_doc: &str, hardware_doc: &str, run_doc: &str) -> Result<Specs> {
    let model = parse_model(model_doc)?;
    let (hardware, topology) = parse_hardware(hardware_doc)?;
    let run: RunDoc = parse_run(run_doc)?;
    let parallelism = ParallelismConfig::from_doc(&run.parallelism)?;
    run.faults.validate()?;
    let options = RunOptions {
        mode: run.mode,
        rng_seed: run.rng_seed,
        sweep: run.sweep.unwrap_or_default(),
        monte_carlo: run.monte_carlo.unwrap_or_default(),
        whatif: run.whatif,
        decode_exact: run.decode_exact,
    };
    if options.monte_carlo.iterations < 1 {
        return Err(ConfigError::invalid("monte_carlo iterations >= 1", "got 0"));
    }
    let mut specs = Specs {
        model,
        hardware,
        topology,
        parallelism,
        faults: run.faults,
        run: options,
        warnings: Vec::new(),
    };
    specs.warnings = validate_combination(&specs)?;
    Ok(specs)
}

/// Cross-document checks; returns non-fatal warnings.
pub fn validate_combination(specs: &Specs) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let par = &specs.parallelism;
    let gpus = specs.topology.num_gpus();
    if par.world_size() != gpus {
        return Err(ConfigError::invalid(
            "dp*tp*pp*cp = total GPU count",
            format!(
                "{}*{}*{}*{} = {} but topology has {gpus} GPUs",
                par.dp,
                par.tp,
                par.pp,
                par.cp,
                par.world_size()
            ),
        ));
    }
    check_sharding(&specs.model, par)?;
    if specs.model.phase == Phase::Train && par.num_microbatches < par.pp {
        warnings.push(format!(
            "num_microbatches ({}) < pp ({}): pipeline bubbles dominate",
            par.num_microbatches, par.pp
        ));
    }
    if specs.run.mode == Mode::Hierarchical {
        par.check_hierarchical(&specs.topology)?;
    }
    let net = topology::build_network(&specs.topology)
        .map_err(|e| ConfigError::invalid("topology", e.to_string()))?;
    for f in &specs.faults.faults {
        if net.find_link(f.endpoint_a, f.endpoint_b).is_none() {
            return Err(ConfigError::invalid(
                "fault endpoints name an existing link",
                format!("no link between {} and {}", f.endpoint_a, f.endpoint_b),
            ));
        }
    }
    Ok(warnings)
}

/// Divisibility requirements of a parallel mapping for a given model.
pub fn check_sharding(model: &ModelSpec, par: &ParallelismConfig) -> Result<()> {
    let bad = |axis: &str, what: String| Err(ConfigError::invalid(format!("{axis} sharding"), what));
    if !model.num_heads.is_multiple_of(par.tp) {
        return bad("tp", format!("num_heads {} not divisible by tp {}", model.num_heads, par.tp));
    }
    if !model.ffn_dim.is_multiple_of(par.tp) {
        return bad("tp", format!("ffn_dim {} not divisible by tp {}", model.ffn_dim, par.tp));
    }
    if !model.vocab_size.is_multiple_of(par.tp) {
        return bad("tp", format!("vocab_size {} not divisible by tp {}", model.vocab_size, par.tp));
    }
    if !model.num_layers.is_multiple_of(par.pp) {
        return bad("pp", format!("num_layers {} not divisible by pp {}", model.num_layers, par.pp));
    }
    let seq = match model.phase {
        Phase::Train => model.seq_len,
        Phase::Inference => model.prefill_len,
    };
    if seq % par.cp != 0 {
        return bad("cp", format!("sequence length {seq} not divisible by cp {}", par.cp));
    }
    if par.sp_enabled && seq % (par.cp * par.tp) != 0 {
        return bad(
            "sp",
            format!("sequence length {seq} not divisible by cp*tp {}", par.cp * par.tp),
        );
    }
    if !model.batch_size.is_multiple_of(par.dp * par.num_microbatches) {
        return bad(
            "dp",
            format!(
                "batch_size {} not divisible by dp*num_microbatches {}",
                model.batch_size,
                par.dp * par.num_microbatches
            ),
        );
    }
    Ok(())
}
