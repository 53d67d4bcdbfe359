//! Per-GPU memory accounting: static training/inference state plus the
//! peak of live activations along the deterministic schedule.

use serde::Serialize;

use crate::config::{HardwareSpec, ModelSpec, ParallelismConfig, Phase, Recompute, ZeroStage};
use crate::graph::{ActClass, EdgeKind, GraphError, NodeId, OperatorGraph};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MemoryReport {
    pub params_bytes: u64,
    pub grads_bytes: u64,
    pub optimizer_bytes: u64,
    pub kv_cache_bytes: u64,
    pub peak_activation_bytes: u64,
    /// Allocator/fragmentation allowance from the hardware multiplier.
    pub overhead_bytes: u64,
    pub total_bytes: u64,
    pub feasible: bool,
    pub headroom_bytes: i64,
}

impl MemoryReport {
    fn finish(mut self, hw: &HardwareSpec) -> Self {
        let base = self.params_bytes + self.grads_bytes + self.optimizer_bytes + self.kv_cache_bytes + self.peak_activation_bytes;
        self.overhead_bytes = ((base as f64) * (hw.memory_overhead - 1.0)).round() as u64;
        self.total_bytes = base + self.overhead_bytes;
        self.headroom_bytes = hw.hbm_capacity as i64 - self.total_bytes as i64;
        self.feasible = self.total_bytes <= hw.hbm_capacity;
        self
    }
}

/// Parameters held by one rank of pipeline stage `stage`: its layers plus
/// the embedding (first stage) or LM head (last stage), sharded by tp.
pub fn local_params(model: &ModelSpec, par: &ParallelismConfig, stage: u64) -> u64 {
    let layers = model.num_layers / par.pp;
    let mut p = layers * model.layer_params();
    if stage == 0 {
        p += model.embedding_params();
    }
    if stage + 1 == par.pp {
        p += model.head_params();
    }
    p / par.tp
}

/// Static state of the most loaded pipeline stage. The activation field is
/// left at zero.
pub fn static_memory(model: &ModelSpec, par: &ParallelismConfig, hw: &HardwareSpec) -> MemoryReport {
    (0..par.pp)
        .map(|s| stage_static(model, par, hw, s))
        .max_by_key(|r| r.total_bytes)
        .unwrap_or_default()
}

pub fn stage_static(model: &ModelSpec, par: &ParallelismConfig, hw: &HardwareSpec, stage: u64) -> MemoryReport {
    let p = local_params(model, par, stage);
    let eb = model.precision.bytes_per_elem();
    let dp = par.dp;
    let mut r = MemoryReport::default();
    match model.phase {
        Phase::Train => {
            let (w, g, o) = if model.precision.is_mixed() {
                (2 * p, 2 * p, 12 * p)
            } else {
                (4 * p, 4 * p, 8 * p)
            };
            let z = par.zero_stage;
            r.optimizer_bytes = if z >= ZeroStage::Z1 { o / dp } else { o };
            r.grads_bytes = if z >= ZeroStage::Z2 { g / dp } else { g };
            r.params_bytes = if z >= ZeroStage::Z3 { w / dp } else { w };
        }
        Phase::Inference => {
            r.params_bytes = p * eb;
            r.kv_cache_bytes = kv_cache_bytes(model, par);
        }
    }
    r.finish(hw)
}

/// K and V for every local layer over the full request length.
pub fn kv_cache_bytes(model: &ModelSpec, par: &ParallelismConfig) -> u64 {
    let layers = model.num_layers / par.pp;
    let tokens = model.prefill_len + model.decode_len;
    let batch = (model.batch_size / par.dp).max(1);
    let eb = model.precision.bytes_per_elem();
    2 * layers * tokens * batch * model.hidden_dim / (par.tp * par.cp) * eb
}

fn dropped(class: ActClass, policy: Recompute) -> bool {
    match policy {
        Recompute::None => false,
        Recompute::Selective => class == ActClass::AttentionInternal,
        Recompute::Full => class != ActClass::Boundary,
    }
}

/// Live interval `[start, end]` (positions in the rank's order) of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub bytes: u64,
}

/// Tensor lifetimes on `rank` along `order` (the rank's linearized nodes).
pub fn live_intervals(graph: &OperatorGraph, order: &[NodeId], rank: u64, policy: Recompute) -> Vec<Interval> {
    let n = graph.nodes.len();
    let mut pos = vec![usize::MAX; n];
    for (i, &id) in order.iter().enumerate() {
        pos[id] = i;
    }
    let mut remat = vec![usize::MAX; n];
    for &id in order {
        if let Some(src) = graph.nodes[id].recompute_of {
            remat[src] = remat[src].min(pos[id]);
        }
    }
    let succ = graph.successors();
    let mut out = Vec::new();
    for &id in order {
        let node = &graph.nodes[id];
        let p = pos[id];
        if node.input_bytes > 0 {
            out.push(Interval {
                start: p,
                end: p,
                bytes: node.input_bytes,
            });
        }
        if node.output_bytes == 0 || !node.holds_output(rank) {
            continue;
        }
        let consumers: Vec<usize> = succ[id]
            .iter()
            .filter(|(v, k)| *k == EdgeKind::Data && pos[*v] != usize::MAX)
            .map(|(v, _)| *v)
            .collect();
        let bytes = node.output_bytes;
        let last = consumers.iter().map(|&v| pos[v]).max().unwrap_or(p).max(p);
        let is_late = |v: NodeId| graph.nodes[v].phase.is_backward() || graph.nodes[v].is_recompute();
        let late: Vec<usize> = consumers.iter().copied().filter(|&v| is_late(v)).collect();
        let can_drop = !node.phase.is_backward() && !node.is_recompute() && !late.is_empty() && dropped(node.act_class, policy);
        if !can_drop {
            out.push(Interval { start: p, end: last, bytes });
            continue;
        }
        let early_end = consumers
            .iter()
            .filter(|&&v| !is_late(v))
            .map(|&v| pos[v])
            .max()
            .unwrap_or(p)
            .max(p);
        out.push(Interval {
            start: p,
            end: early_end,
            bytes,
        });
        let first_late = late.iter().map(|&v| pos[v]).min().unwrap_or(p);
        let start = remat[id].min(first_late).max(early_end + 1);
        let end = late.iter().map(|&v| pos[v]).max().unwrap_or(p);
        if start <= end {
            out.push(Interval { start, end, bytes });
        }
    }
    out
}

/// Peak live bytes on `rank` over the deterministic schedule.
pub fn peak_activation(graph: &OperatorGraph, rank: u64, policy: Recompute) -> Result<u64, GraphError> {
    let order = graph.topo_order()?;
    let local = graph.rank_order(&order, rank);
    Ok(peak_of(&live_intervals(graph, &local, rank, policy), local.len()))
}

/// Sweep over interval endpoints.
pub fn peak_of(intervals: &[Interval], len: usize) -> u64 {
    let mut delta = vec![0i128; len + 1];
    for iv in intervals {
        delta[iv.start] += iv.bytes as i128;
        delta[iv.end + 1] -= iv.bytes as i128;
    }
    let mut cur = 0i128;
    let mut peak = 0i128;
    for d in delta.iter().take(len) {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u64
}

/// Worst peak over one representative rank of every pipeline stage.
pub fn peak_activation_by_stage(graph: &OperatorGraph, par: &ParallelismConfig, policy: Recompute) -> Result<u64, GraphError> {
    let order = graph.topo_order()?;
    let layout = par.layout();
    let mut peak = 0;
    for stage in 0..par.pp {
        let rank = layout.rank(crate::config::AxisCoords {
            dp: 0,
            tp: 0,
            pp: stage,
            cp: 0,
        });
        let local = graph.rank_order(&order, rank);
        peak = peak.max(peak_of(&live_intervals(graph, &local, rank, policy), local.len()));
    }
    Ok(peak)
}

/// Static state plus peak activation; the feasibility flag compares the
/// total to HBM capacity.
pub fn is_feasible(model: &ModelSpec, par: &ParallelismConfig, hw: &HardwareSpec, graph: &OperatorGraph) -> Result<MemoryReport, GraphError> {
    let act = peak_activation_by_stage(graph, par, par.recompute)?;
    Ok(with_activation(model, par, hw, act))
}

pub fn with_activation(model: &ModelSpec, par: &ParallelismConfig, hw: &HardwareSpec, activation: u64) -> MemoryReport {
    let mut r = static_memory(model, par, hw);
    r.peak_activation_bytes = activation;
    r.finish(hw)
}
