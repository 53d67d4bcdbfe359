//! Operator-level computation graphs for transformer training and inference
//! under hybrid parallelism.
//!
//! Every compute node lives on exactly one rank. Communication is explicit:
//! collectives are single nodes spanning their rank group, and pipeline
//! transfers are point-to-point nodes spanning `[src, dst]`. Edges are either
//! data edges (the producer's output tensor is read by the consumer) or
//! control edges (ordering only).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::config::{self, Axis, ModelSpec, ParallelismConfig, Phase, RankLayout, Recompute, ZeroStage};
use crate::memmodel;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("indivisible sharding: {0}")]
    Indivisible(String),
    #[error("dependency cycle through node {0}")]
    Cycle(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    SendRecv,
}

impl CollectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "AllReduce",
            CollectiveKind::AllGather => "AllGather",
            CollectiveKind::ReduceScatter => "ReduceScatter",
            CollectiveKind::AllToAll => "AllToAll",
            CollectiveKind::SendRecv => "SendRecv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "AllReduce" => CollectiveKind::AllReduce,
            "AllGather" => CollectiveKind::AllGather,
            "ReduceScatter" => CollectiveKind::ReduceScatter,
            "AllToAll" => CollectiveKind::AllToAll,
            "SendRecv" => CollectiveKind::SendRecv,
            _ => return None,
        })
    }
}

/// Declaration order doubles as the linearization tie-break priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Fwd,
    BwdAct,
    BwdWt,
    Prefill,
    Decode,
}

impl PhaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::Fwd => "fwd",
            PhaseTag::BwdAct => "bwd_act",
            PhaseTag::BwdWt => "bwd_wt",
            PhaseTag::Prefill => "prefill",
            PhaseTag::Decode => "decode",
        }
    }

    pub fn is_backward(self) -> bool {
        matches!(self, PhaseTag::BwdAct | PhaseTag::BwdWt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct GemmShape {
    /// Independent matrices of this shape (batched GEMM).
    pub batch: u64,
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl GemmShape {
    pub fn new(m: u64, n: u64, k: u64) -> Self {
        GemmShape { batch: 1, m, n, k }
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.batch as f64 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct AttnShape {
    pub batch: u64,
    pub heads: u64,
    pub q_len: u64,
    pub kv_len: u64,
    pub head_dim: u64,
    pub backward: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PointwiseShape {
    pub elems: u64,
    pub bytes_per_elem: u64,
    pub flops_per_elem: u64,
    pub reads: u64,
    pub writes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommSpec {
    pub kind: CollectiveKind,
    /// Full logical buffer: the per-rank buffer for AllReduce and AllToAll,
    /// the gathered output for AllGather, the unscattered input for
    /// ReduceScatter, the message for SendRecv.
    pub bytes: u64,
    pub ranks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OpKind {
    Gemm(GemmShape),
    FlashAttention(AttnShape),
    Pointwise(PointwiseShape),
    Embedding(PointwiseShape),
    /// Pre-costed composite (a whole pipeline-stage block).
    Block { duration: f64 },
    Collective(CommSpec),
    P2p(CommSpec),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Gemm(_) => "gemm",
            OpKind::FlashAttention(_) => "flash_attention",
            OpKind::Pointwise(_) => "pointwise",
            OpKind::Embedding(_) => "embedding",
            OpKind::Block { .. } => "block",
            OpKind::Collective(_) => "collective",
            OpKind::P2p(_) => "p2p",
        }
    }

    pub fn comm(&self) -> Option<&CommSpec> {
        match self {
            OpKind::Collective(c) | OpKind::P2p(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_compute(&self) -> bool {
        self.comm().is_none()
    }
}

/// Role of a node's output tensor with respect to recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActClass {
    /// Layer input/output; kept by every recompute policy.
    Boundary,
    /// Attention core outputs; dropped by selective and full recompute.
    AttentionInternal,
    /// Any other intra-layer activation; dropped by full recompute.
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorNode {
    pub id: NodeId,
    pub name: String,
    pub op: OpKind,
    /// One rank for compute nodes; the group for collectives; `[src, dst]`
    /// for point-to-point transfers.
    pub ranks: Vec<u64>,
    pub phase: PhaseTag,
    pub layer: u64,
    pub microbatch: u64,
    /// Output tensor bytes held by each rank that owns the output.
    pub output_bytes: u64,
    /// Graph-external input consumed by this node.
    pub input_bytes: u64,
    pub act_class: ActClass,
    /// Set on forward nodes re-executed before backward.
    pub recompute_of: Option<NodeId>,
}

impl OperatorNode {
    pub fn on_rank(&self, r: u64) -> bool {
        self.ranks.contains(&r)
    }

    /// Whether rank `r` holds this node's output tensor.
    pub fn holds_output(&self, r: u64) -> bool {
        match &self.op {
            OpKind::P2p(c) => c.ranks.get(1) == Some(&r),
            _ => self.on_rank(r),
        }
    }

    pub fn is_recompute(&self) -> bool {
        self.name.starts_with("recompute.")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Data,
    Control,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphMeta {
    pub phase: Phase,
    pub world_size: u64,
    pub description: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorGraph {
    pub nodes: Vec<OperatorNode>,
    pub edges: Vec<(NodeId, NodeId, EdgeKind)>,
    pub meta: GraphMeta,
}

impl OperatorGraph {
    pub fn new(meta: GraphMeta) -> Self {
        OperatorGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            meta,
        }
    }

    /// Append a node with default bookkeeping fields.
    pub fn add_node(&mut self, name: impl Into<String>, op: OpKind, ranks: Vec<u64>, phase: PhaseTag) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(OperatorNode {
            id,
            name: name.into(),
            op,
            ranks,
            phase,
            layer: 0,
            microbatch: 0,
            output_bytes: 0,
            input_bytes: 0,
            act_class: ActClass::Internal,
            recompute_of: None,
        });
        id
    }

    pub fn add_edge(&mut self, u: NodeId, v: NodeId, kind: EdgeKind) {
        self.edges.push((u, v, kind));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn successors(&self) -> Vec<Vec<(NodeId, EdgeKind)>> {
        let mut s = vec![Vec::new(); self.nodes.len()];
        for &(u, v, k) in &self.edges {
            s[u].push((v, k));
        }
        s
    }

    pub fn predecessors(&self) -> Vec<Vec<(NodeId, EdgeKind)>> {
        let mut p = vec![Vec::new(); self.nodes.len()];
        for &(u, v, k) in &self.edges {
            p[v].push((u, k));
        }
        p
    }

    /// Deterministic topological order; ready nodes are taken by
    /// (phase tag, layer, id).
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let succ = self.successors();
        for &(_, v, _) in &self.edges {
            indeg[v] += 1;
        }
        let key = |id: NodeId| {
            let nd = &self.nodes[id];
            Reverse((nd.phase, nd.layer, id))
        };
        let mut heap: BinaryHeap<_> = (0..n).filter(|&i| indeg[i] == 0).map(key).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse((_, _, u))) = heap.pop() {
            order.push(u);
            for &(v, _) in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    heap.push(key(v));
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Nodes that involve `rank`, in linearization order.
    pub fn rank_order(&self, order: &[NodeId], rank: u64) -> Vec<NodeId> {
        order
            .iter()
            .copied()
            .filter(|&id| self.nodes[id].on_rank(rank))
            .collect()
    }

    pub fn comm_nodes(&self) -> impl Iterator<Item = &OperatorNode> {
        self.nodes.iter().filter(|n| !n.op.is_compute())
    }

    /// Dependency-list text dump.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# {}", self.meta.description).unwrap();
        writeln!(s, "# nodes {} edges {}", self.nodes.len(), self.edges.len()).unwrap();
        for n in &self.nodes {
            let shape = match &n.op {
                OpKind::Gemm(g) => format!("batch={} m={} n={} k={}", g.batch, g.m, g.n, g.k),
                OpKind::FlashAttention(a) => format!(
                    "batch={} heads={} q={} kv={} d={} bwd={}",
                    a.batch, a.heads, a.q_len, a.kv_len, a.head_dim, a.backward
                ),
                OpKind::Pointwise(p) | OpKind::Embedding(p) => format!(
                    "elems={} bpe={} flops={} r={} w={}",
                    p.elems, p.bytes_per_elem, p.flops_per_elem, p.reads, p.writes
                ),
                OpKind::Block { duration } => format!("duration={duration:e}"),
                OpKind::Collective(c) | OpKind::P2p(c) => {
                    format!("{} bytes={}", c.kind.as_str(), c.bytes)
                }
            };
            let ranks: Vec<String> = n.ranks.iter().map(|r| r.to_string()).collect();
            writeln!(
                s,
                "node {} {} {} ranks={} phase={} layer={} mb={} out={} {}",
                n.id,
                n.name,
                n.op.name(),
                ranks.join(","),
                n.phase.as_str(),
                n.layer,
                n.microbatch,
                n.output_bytes,
                shape
            )
            .unwrap();
        }
        for (u, v, k) in &self.edges {
            let k = match k {
                EdgeKind::Data => "data",
                EdgeKind::Control => "control",
            };
            writeln!(s, "edge {u} {v} {k}").unwrap();
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Communication patterns
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParallelAxis {
    Dp,
    Tp,
    Pp,
    Sp,
    Cp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Fwd,
    Bwd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommPattern {
    AllGather,
    AllReduce,
    ReduceScatter,
    AllToAll,
    /// Structured block exchange (ring-style KV passing).
    BlockExchange,
    PointToPoint,
}

/// Dominant communication pattern of a parallelism axis for one direction.
pub fn comm_pattern_for(axis: ParallelAxis, direction: Direction) -> &'static [CommPattern] {
    use CommPattern::*;
    match (axis, direction) {
        (ParallelAxis::Dp, Direction::Fwd) => &[],
        (ParallelAxis::Dp, Direction::Bwd) => &[AllReduce],
        (ParallelAxis::Tp, Direction::Fwd) => &[AllGather, AllReduce],
        (ParallelAxis::Tp, Direction::Bwd) => &[AllReduce],
        (ParallelAxis::Pp, _) => &[PointToPoint],
        (ParallelAxis::Sp, _) => &[AllGather, ReduceScatter],
        (ParallelAxis::Cp, _) => &[AllToAll, BlockExchange],
    }
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

type PerRank = BTreeMap<u64, NodeId>;

/// Shape of the tokens flowing through one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCtx {
    /// Sequences per microbatch.
    pub batch: u64,
    /// Query tokens per sequence held by one rank.
    pub q_len: u64,
    /// Key/value tokens per sequence each rank attends over.
    pub kv_len: u64,
    pub tag: PhaseTag,
    /// Only the last position feeds the LM head (inference).
    pub last_token_head: bool,
}

impl BlockCtx {
    pub fn train(model: &ModelSpec, par: &ParallelismConfig) -> Self {
        BlockCtx {
            batch: microbatch_size(model, par),
            q_len: model.seq_len / par.cp,
            kv_len: model.seq_len,
            tag: PhaseTag::Fwd,
            last_token_head: false,
        }
    }

    pub fn prefill(model: &ModelSpec, par: &ParallelismConfig) -> Self {
        BlockCtx {
            batch: microbatch_size(model, par),
            q_len: model.prefill_len / par.cp,
            kv_len: model.prefill_len,
            tag: PhaseTag::Prefill,
            last_token_head: true,
        }
    }

    /// Decode step `step` (0-based) attends over prefill + step + 1 tokens,
    /// sharded across context-parallel ranks.
    pub fn decode(model: &ModelSpec, par: &ParallelismConfig, step: u64) -> Self {
        let kv = model.prefill_len + step + 1;
        BlockCtx {
            batch: microbatch_size(model, par),
            q_len: 1,
            kv_len: kv.div_ceil(par.cp),
            tag: PhaseTag::Decode,
            last_token_head: true,
        }
    }

    pub fn tokens(&self) -> u64 {
        self.batch * self.q_len
    }
}

pub fn microbatch_size(model: &ModelSpec, par: &ParallelismConfig) -> u64 {
    (model.batch_size / (par.dp * par.num_microbatches)).max(1)
}

/// Forward nodes of one layer, kept for backward data edges.
#[derive(Debug, Clone, Default)]
struct LayerFwd {
    input: PerRank,
    ln1: PerRank,
    ag1: Option<PerRank>,
    qkv: PerRank,
    kv_a2a: Option<PerRank>,
    attn: PerRank,
    resid1: PerRank,
    ln2: PerRank,
    ag2: Option<PerRank>,
    ffn_up: PerRank,
    act: PerRank,
    resid2: PerRank,
}

impl LayerFwd {
    /// (recomputed, original) pairs for tensors read by backward.
    fn pairs<'s>(&'s self, orig: &'s LayerFwd) -> Vec<(&'s PerRank, &'s PerRank)> {
        let mut v = vec![
            (&self.ln1, &orig.ln1),
            (&self.qkv, &orig.qkv),
            (&self.attn, &orig.attn),
            (&self.resid1, &orig.resid1),
            (&self.ln2, &orig.ln2),
            (&self.ffn_up, &orig.ffn_up),
            (&self.act, &orig.act),
        ];
        for (a, b) in [(&self.ag1, &orig.ag1), (&self.kv_a2a, &orig.kv_a2a), (&self.ag2, &orig.ag2)] {
            if let (Some(a), Some(b)) = (a, b) {
                v.push((a, b));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Default)]
struct HeadFwd {
    input: PerRank,
    norm_out: PerRank,
    logits: PerRank,
    loss: PerRank,
}

/// Durations of collapsed stage blocks (hierarchical mode).
pub trait BlockDurations {
    fn fwd(&self, stage: u64, ctx: &BlockCtx) -> f64;
    fn bwd(&self, stage: u64) -> f64;
}

enum Expansion<'d> {
    Operators,
    Collapsed(&'d dyn BlockDurations),
}

#[derive(Clone, Copy)]
enum FwdMode<'s> {
    Normal,
    RecomputeFull(&'s LayerFwd),
    RecomputeAttn(&'s LayerFwd),
}

struct NodeArgs {
    name: String,
    op: OpKind,
    phase: PhaseTag,
    layer: u64,
    mb: u64,
    out: u64,
    class: ActClass,
}

/// Placeholder op for collective arguments; replaced on creation.
const PENDING: OpKind = OpKind::Block { duration: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum P2pKind {
    Act,
    Grad,
    Token,
}

struct Builder<'a, 'd> {
    model: &'a ModelSpec,
    par: &'a ParallelismConfig,
    layout: RankLayout,
    g: OperatorGraph,
    eb: u64,
    expansion: Expansion<'d>,
    pending_join: HashMap<u64, Vec<NodeId>>,
    block_nodes: HashMap<u64, Vec<NodeId>>,
    has_local_succ: HashSet<(NodeId, u64)>,
    /// Inter-stage transfers keyed by (kind, key, sender rank).
    p2p: HashMap<(P2pKind, u64, u64), NodeId>,
    stash: HashMap<(u64, u64), LayerFwd>,
    head_stash: HashMap<u64, HeadFwd>,
}

impl<'a, 'd> Builder<'a, 'd> {
    fn new(model: &'a ModelSpec, par: &'a ParallelismConfig, expansion: Expansion<'d>, description: String) -> Self {
        Builder {
            model,
            par,
            layout: par.layout(),
            g: OperatorGraph::new(GraphMeta {
                phase: model.phase,
                world_size: par.world_size(),
                description,
            }),
            eb: model.precision.bytes_per_elem(),
            expansion,
            pending_join: HashMap::new(),
            block_nodes: HashMap::new(),
            has_local_succ: HashSet::new(),
            p2p: HashMap::new(),
            stash: HashMap::new(),
            head_stash: HashMap::new(),
        }
    }

    fn sp(&self) -> bool {
        self.par.sp_enabled && self.par.tp > 1
    }

    /// Tokens per rank for sequence-sharded (pointwise) regions.
    fn sp_tokens(&self, ctx: &BlockCtx) -> u64 {
        if self.sp() {
            ctx.tokens() / self.par.tp
        } else {
            ctx.tokens()
        }
    }

    fn push(&mut self, a: &NodeArgs, ranks: Vec<u64>, in_block: bool) -> NodeId {
        let id = self.g.nodes.len();
        self.g.nodes.push(OperatorNode {
            id,
            name: a.name.clone(),
            op: a.op.clone(),
            ranks: ranks.clone(),
            phase: a.phase,
            layer: a.layer,
            microbatch: a.mb,
            output_bytes: a.out,
            input_bytes: 0,
            act_class: a.class,
            recompute_of: None,
        });
        if in_block {
            for r in ranks {
                if let Some(prev) = self.pending_join.remove(&r) {
                    for p in prev {
                        self.edge(p, id, EdgeKind::Control);
                    }
                }
                self.block_nodes.entry(r).or_default().push(id);
            }
        }
        id
    }

    fn edge(&mut self, u: NodeId, v: NodeId, kind: EdgeKind) {
        self.g.edges.push((u, v, kind));
        if matches!(self.g.nodes[v].op, OpKind::P2p(_)) {
            // sends are non-blocking: they do not order the sender's program
            return;
        }
        for &r in &self.g.nodes[u].ranks {
            if self.g.nodes[v].ranks.contains(&r) {
                self.has_local_succ.insert((u, r));
            }
        }
    }

    fn gate(&mut self, gate: &PerRank, nodes: &PerRank) {
        for (r, &g) in gate {
            if let Some(&n) = nodes.get(r) {
                self.edge(g, n, EdgeKind::Control);
            }
        }
    }

    /// Close the current block on `ranks`: its sinks must finish before the
    /// next block starts on the same rank.
    fn end_block(&mut self, ranks: &[u64]) {
        for &r in ranks {
            let nodes = self.block_nodes.remove(&r).unwrap_or_default();
            let sinks: Vec<NodeId> = nodes
                .into_iter()
                .filter(|&n| !self.has_local_succ.contains(&(n, r)))
                .collect();
            self.pending_join.entry(r).or_default().extend(sinks);
        }
    }

    fn compute(&mut self, ranks: &[u64], a: NodeArgs, deps: &[&PerRank]) -> PerRank {
        let mut out = PerRank::new();
        for &r in ranks {
            let id = self.push(&a, vec![r], true);
            for d in deps {
                if let Some(&p) = d.get(&r) {
                    self.edge(p, id, EdgeKind::Data);
                }
            }
            out.insert(r, id);
        }
        out
    }

    /// One collective node per group of `axes` among `ranks`.
    #[allow(clippy::too_many_arguments)]
    fn collective(
        &mut self,
        ranks: &[u64],
        axes: &[Axis],
        kind: CollectiveKind,
        bytes: u64,
        mut a: NodeArgs,
        deps: &[&PerRank],
        dep_kind: EdgeKind,
    ) -> PerRank {
        let mut out = PerRank::new();
        for &r in ranks {
            if out.contains_key(&r) {
                continue;
            }
            let group = self.layout.group(r, axes);
            a.op = OpKind::Collective(CommSpec {
                kind,
                bytes,
                ranks: group.clone(),
            });
            let id = self.push(&a, group.clone(), true);
            for &m in &group {
                for d in deps {
                    if let Some(&p) = d.get(&m) {
                        self.edge(p, id, dep_kind);
                    }
                }
                out.insert(m, id);
            }
        }
        out
    }

    fn set_input(&mut self, nodes: &PerRank, bytes: u64) {
        for &id in nodes.values() {
            self.g.nodes[id].input_bytes = bytes;
        }
    }

    fn stage_ranks(&self, stage: u64) -> Vec<u64> {
        (0..self.layout.world_size())
            .filter(|&r| self.layout.coords(r).pp == stage)
            .collect()
    }

    fn layers_of(&self, stage: u64) -> std::ops::Range<u64> {
        let per = self.model.num_layers / self.par.pp;
        stage * per..(stage + 1) * per
    }

    /// Row-parallel output collective: ReduceScatter with sequence
    /// parallelism, AllReduce otherwise. Returns the kind and per-rank
    /// output bytes for a full buffer of `bytes`.
    fn tp_reduce(&self, bytes: u64) -> (CollectiveKind, u64) {
        if self.sp() {
            (CollectiveKind::ReduceScatter, bytes / self.par.tp)
        } else {
            (CollectiveKind::AllReduce, bytes)
        }
    }

    // ---------------------------------------------------------------- layer

    fn layer_fwd(&mut self, ranks: &[u64], x: &PerRank, ctx: &BlockCtx, layer: u64, mb: u64, mode: FwdMode) -> LayerFwd {
        let start = self.g.nodes.len();
        let f = self.layer_fwd_ops(ranks, x, ctx, layer, mb, mode);
        let orig = match mode {
            FwdMode::Normal => return f,
            FwdMode::RecomputeFull(o) | FwdMode::RecomputeAttn(o) => o,
        };
        for id in start..self.g.nodes.len() {
            let n = &mut self.g.nodes[id];
            n.output_bytes = 0;
            n.name = format!("recompute.{}", n.name);
        }
        for (re, o) in f.pairs(orig) {
            for (r, &id) in re {
                if id >= start {
                    self.g.nodes[id].recompute_of = o.get(r).copied();
                }
            }
        }
        f
    }

    fn layer_fwd_ops(&mut self, ranks: &[u64], x: &PerRank, ctx: &BlockCtx, layer: u64, mb: u64, mode: FwdMode) -> LayerFwd {
        let m = self.model;
        let (tp, cp, eb) = (self.par.tp, self.par.cp, self.eb);
        let h = m.hidden_dim;
        let t = ctx.tokens();
        let tsp = self.sp_tokens(ctx);
        let f_local = m.ffn_dim / tp;
        let f_up = if m.gated_ffn { 2 * f_local } else { f_local };
        let tag = ctx.tag;
        let args = |name: &str, op: OpKind, out: u64, class: ActClass| NodeArgs {
            name: format!("L{layer}.{name}"),
            op,
            phase: tag,
            layer,
            mb,
            out,
            class,
        };
        let mut f = LayerFwd {
            input: x.clone(),
            ..Default::default()
        };

        if let FwdMode::RecomputeAttn(o) = mode {
            f.qkv = o.qkv.clone();
        } else {
            f.ln1 = self.compute(
                ranks,
                args("ln1", pw(tsp * h, eb, 8, 1, 1), tsp * h * eb, ActClass::Internal),
                &[x],
            );
            if matches!(mode, FwdMode::Normal) && self.par.zero_stage == ZeroStage::Z3 && self.par.dp > 1 {
                let bytes = m.layer_params() / tp * eb;
                let a = args("zero3_gather", PENDING, 0, ActClass::Internal);
                let ag = self.collective(ranks, &[Axis::Dp], CollectiveKind::AllGather, bytes, a, &[x], EdgeKind::Control);
                self.gate(&ag, &f.ln1);
            }
            let mut qkv_in = f.ln1.clone();
            if self.sp() {
                let a = args("sp_gather_attn", PENDING, t * h * eb, ActClass::Internal);
                let ag = self.collective(ranks, &[Axis::Tp], CollectiveKind::AllGather, t * h * eb, a, &[&f.ln1], EdgeKind::Data);
                qkv_in = ag.clone();
                f.ag1 = Some(ag);
            }
            f.qkv = self.compute(
                ranks,
                args("qkv", OpKind::Gemm(GemmShape::new(t, 3 * h / tp, h)), t * 3 * h / tp * eb, ActClass::Internal),
                &[&qkv_in],
            );
        }

        let mut attn_deps = vec![f.qkv.clone()];
        if cp > 1 {
            let kv = 2 * t * h / tp * eb;
            let a = args("cp_kv_exchange", PENDING, kv * cp, ActClass::AttentionInternal);
            let a2a = self.collective(ranks, &[Axis::Cp], CollectiveKind::AllToAll, kv * cp, a, &[&f.qkv], EdgeKind::Data);
            attn_deps.push(a2a.clone());
            f.kv_a2a = Some(a2a);
        }
        let shape = AttnShape {
            batch: ctx.batch,
            heads: m.num_heads / tp,
            q_len: ctx.q_len,
            kv_len: ctx.kv_len,
            head_dim: m.head_dim,
            backward: false,
        };
        let deps: Vec<&PerRank> = attn_deps.iter().collect();
        f.attn = self.compute(
            ranks,
            args("attn", OpKind::FlashAttention(shape), t * h / tp * eb, ActClass::AttentionInternal),
            &deps,
        );
        if matches!(mode, FwdMode::RecomputeAttn(_)) {
            return f;
        }

        let attn_out = self.compute(
            ranks,
            args("attn_out", OpKind::Gemm(GemmShape::new(t, h, h / tp)), t * h * eb, ActClass::Internal),
            &[&f.attn],
        );
        let mut proj = attn_out.clone();
        if tp > 1 {
            let (kind, out) = self.tp_reduce(t * h * eb);
            let a = args("tp_attn_reduce", PENDING, out, ActClass::Internal);
            proj = self.collective(ranks, &[Axis::Tp], kind, t * h * eb, a, &[&attn_out], EdgeKind::Data);
        }
        f.resid1 = self.compute(
            ranks,
            args("resid1", pw(tsp * h, eb, 1, 2, 1), tsp * h * eb, ActClass::Internal),
            &[&proj, x],
        );
        f.ln2 = self.compute(
            ranks,
            args("ln2", pw(tsp * h, eb, 8, 1, 1), tsp * h * eb, ActClass::Internal),
            &[&f.resid1],
        );
        let mut up_in = f.ln2.clone();
        if self.sp() {
            let a = args("sp_gather_mlp", PENDING, t * h * eb, ActClass::Internal);
            let ag = self.collective(ranks, &[Axis::Tp], CollectiveKind::AllGather, t * h * eb, a, &[&f.ln2], EdgeKind::Data);
            up_in = ag.clone();
            f.ag2 = Some(ag);
        }
        f.ffn_up = self.compute(
            ranks,
            args("ffn_up", OpKind::Gemm(GemmShape::new(t, f_up, h)), t * f_up * eb, ActClass::Internal),
            &[&up_in],
        );
        let act_reads = if m.gated_ffn { 2 } else { 1 };
        f.act = self.compute(
            ranks,
            args("act", pw(t * f_local, eb, 8, act_reads, 1), t * f_local * eb, ActClass::Internal),
            &[&f.ffn_up],
        );
        let down = self.compute(
            ranks,
            args("ffn_down", OpKind::Gemm(GemmShape::new(t, h, f_local)), t * h * eb, ActClass::Internal),
            &[&f.act],
        );
        let mut mlp = down.clone();
        if tp > 1 {
            let (kind, out) = self.tp_reduce(t * h * eb);
            let a = args("tp_mlp_reduce", PENDING, out, ActClass::Internal);
            mlp = self.collective(ranks, &[Axis::Tp], kind, t * h * eb, a, &[&down], EdgeKind::Data);
        }
        f.resid2 = self.compute(
            ranks,
            args("resid2", pw(tsp * h, eb, 1, 2, 1), tsp * h * eb, ActClass::Boundary),
            &[&mlp, &f.resid1],
        );
        f
    }

    /// Backward pass of one layer; returns the gradient w.r.t. its input.
    fn layer_bwd(&mut self, ranks: &[u64], g: &PerRank, ctx: &BlockCtx, layer: u64, mb: u64, st: &LayerFwd) -> PerRank {
        let m = self.model;
        let (tp, cp, eb) = (self.par.tp, self.par.cp, self.eb);
        let h = m.hidden_dim;
        let t = ctx.tokens();
        let tsp = self.sp_tokens(ctx);
        let f_local = m.ffn_dim / tp;
        let f_up = if m.gated_ffn { 2 * f_local } else { f_local };
        let args = |name: &str, op: OpKind, phase: PhaseTag, out: u64| NodeArgs {
            name: format!("L{layer}.{name}"),
            op,
            phase,
            layer,
            mb,
            out,
            class: ActClass::Internal,
        };
        let act = PhaseTag::BwdAct;
        let wt = PhaseTag::BwdWt;
        let gemm = |m_: u64, n: u64, k: u64| OpKind::Gemm(GemmShape::new(m_, n, k));

        let zero3 = if self.par.zero_stage == ZeroStage::Z3 && self.par.dp > 1 {
            let bytes = m.layer_params() / tp * eb;
            let a = args("zero3_gather_bwd", PENDING, act, 0);
            Some(self.collective(ranks, &[Axis::Dp], CollectiveKind::AllGather, bytes, a, &[g], EdgeKind::Control))
        } else {
            None
        };
        let mut g_full = g.clone();
        if self.sp() {
            let a = args("sp_gather_mlp_grad", PENDING, act, t * h * eb);
            g_full = self.collective(ranks, &[Axis::Tp], CollectiveKind::AllGather, t * h * eb, a, &[g], EdgeKind::Data);
        }
        let down_d = self.compute(ranks, args("ffn_down.dgrad", gemm(t, f_local, h), act, t * f_local * eb), &[&g_full]);
        if let Some(z) = &zero3 {
            self.gate(z, &down_d);
        }
        self.compute(ranks, args("ffn_down.wgrad", gemm(f_local, h, t), wt, 0), &[&g_full, &st.act]);
        let gated = if m.gated_ffn { 2 } else { 1 };
        let act_b = self.compute(
            ranks,
            args("act.bwd", pw(t * f_local, eb, 8, 1 + gated, gated), act, t * f_up * eb),
            &[&down_d, &st.ffn_up],
        );
        let up_d = self.compute(ranks, args("ffn_up.dgrad", gemm(t, h, f_up), act, t * h * eb), &[&act_b]);
        let ln2_out = st.ag2.as_ref().unwrap_or(&st.ln2);
        self.compute(ranks, args("ffn_up.wgrad", gemm(f_up, h, t), wt, 0), &[&act_b, ln2_out]);
        let mut mlp_g = up_d.clone();
        if tp > 1 {
            let (kind, out) = self.tp_reduce(t * h * eb);
            let a = args("tp_mlp_grad_reduce", PENDING, act, out);
            mlp_g = self.collective(ranks, &[Axis::Tp], kind, t * h * eb, a, &[&up_d], EdgeKind::Data);
        }
        let ln2_b = self.compute(ranks, args("ln2.bwd", pw(tsp * h, eb, 8, 2, 1), act, tsp * h * eb), &[&mlp_g, &st.resid1]);
        let res1_b = self.compute(ranks, args("resid1.bwd", pw(tsp * h, eb, 1, 2, 1), act, tsp * h * eb), &[&ln2_b, g]);

        let mut g_attn = res1_b.clone();
        if self.sp() {
            let a = args("sp_gather_attn_grad", PENDING, act, t * h * eb);
            g_attn = self.collective(ranks, &[Axis::Tp], CollectiveKind::AllGather, t * h * eb, a, &[&res1_b], EdgeKind::Data);
        }
        let ao_d = self.compute(ranks, args("attn_out.dgrad", gemm(t, h / tp, h), act, t * h / tp * eb), &[&g_attn]);
        self.compute(ranks, args("attn_out.wgrad", gemm(h / tp, h, t), wt, 0), &[&g_attn, &st.attn]);
        let shape = AttnShape {
            batch: ctx.batch,
            heads: m.num_heads / tp,
            q_len: ctx.q_len,
            kv_len: ctx.kv_len,
            head_dim: m.head_dim,
            backward: true,
        };
        let none = PerRank::new();
        let a2a_st = st.kv_a2a.as_ref().unwrap_or(&none);
        let dkv = 2 * t * cp * h / tp * eb;
        let attn_b = self.compute(
            ranks,
            args("attn.bwd", OpKind::FlashAttention(shape), act, t * h / tp * eb + dkv),
            &[&ao_d, &st.qkv, &st.attn, a2a_st],
        );
        let mut dqkv = attn_b.clone();
        if cp > 1 {
            let a = args("cp_kv_grad_exchange", PENDING, act, 3 * t * h / tp * eb);
            dqkv = self.collective(ranks, &[Axis::Cp], CollectiveKind::AllToAll, dkv, a, &[&attn_b], EdgeKind::Data);
        }
        let qkv_d = self.compute(ranks, args("qkv.dgrad", gemm(t, h, 3 * h / tp), act, t * h * eb), &[&dqkv]);
        let ln1_out = st.ag1.as_ref().unwrap_or(&st.ln1);
        self.compute(ranks, args("qkv.wgrad", gemm(3 * h / tp, h, t), wt, 0), &[&dqkv, ln1_out]);
        let mut attn_g = qkv_d.clone();
        if tp > 1 {
            let (kind, out) = self.tp_reduce(t * h * eb);
            let a = args("tp_attn_grad_reduce", PENDING, act, out);
            attn_g = self.collective(ranks, &[Axis::Tp], kind, t * h * eb, a, &[&qkv_d], EdgeKind::Data);
        }
        let ln1_b = self.compute(ranks, args("ln1.bwd", pw(tsp * h, eb, 8, 2, 1), act, tsp * h * eb), &[&attn_g, &st.input]);
        self.compute(ranks, args("resid0.bwd", pw(tsp * h, eb, 1, 2, 1), act, tsp * h * eb), &[&ln1_b, &res1_b])
    }

    /// Recompute (per policy) then backward for one layer.
    fn layer_bwd_with_recompute(&mut self, ranks: &[u64], g: &PerRank, ctx: &BlockCtx, layer: u64, mb: u64, st: &LayerFwd) -> PerRank {
        let mode = match self.par.recompute {
            Recompute::None => None,
            Recompute::Selective => Some(FwdMode::RecomputeAttn(st)),
            Recompute::Full => Some(FwdMode::RecomputeFull(st)),
        };
        let mut gate = PerRank::new();
        if let Some(mode) = mode {
            let start = self.g.nodes.len();
            self.layer_fwd(ranks, &st.input, ctx, layer, mb, mode);
            // recompute happens once the incoming gradient is available
            for &r in ranks {
                if let Some(first) = (start..self.g.nodes.len()).find(|&i| self.g.nodes[i].on_rank(r)) {
                    if let Some(&gp) = g.get(&r) {
                        self.edge(gp, first, EdgeKind::Control);
                    }
                }
                if let Some(last) = (start..self.g.nodes.len()).rev().find(|&i| self.g.nodes[i].on_rank(r)) {
                    gate.insert(r, last);
                }
            }
        }
        let start = self.g.nodes.len();
        let out = self.layer_bwd(ranks, g, ctx, layer, mb, st);
        for (&r, &re) in &gate {
            if let Some(first) = (start..self.g.nodes.len()).find(|&i| self.g.nodes[i].on_rank(r)) {
                self.edge(re, first, EdgeKind::Control);
            }
        }
        out
    }

    // ------------------------------------------------------------- endpoints

    fn embedding_fwd(&mut self, ranks: &[u64], ctx: &BlockCtx, mb: u64, deps: &[&PerRank]) -> PerRank {
        let tsp = self.sp_tokens(ctx);
        let h = self.model.hidden_dim;
        let a = NodeArgs {
            name: "embedding".into(),
            op: OpKind::Embedding(PointwiseShape {
                elems: tsp * h,
                bytes_per_elem: self.eb,
                flops_per_elem: 0,
                reads: 1,
                writes: 1,
            }),
            phase: ctx.tag,
            layer: 0,
            mb,
            out: tsp * h * self.eb,
            class: ActClass::Boundary,
        };
        let e = self.compute(ranks, a, deps);
        self.set_input(&e, ctx.tokens() * 4);
        e
    }

    fn embedding_bwd(&mut self, ranks: &[u64], g: &PerRank, ctx: &BlockCtx, mb: u64) -> PerRank {
        let tsp = self.sp_tokens(ctx);
        let a = NodeArgs {
            name: "embedding.wgrad".into(),
            op: OpKind::Embedding(PointwiseShape {
                elems: tsp * self.model.hidden_dim,
                bytes_per_elem: self.eb,
                flops_per_elem: 1,
                reads: 2,
                writes: 1,
            }),
            phase: PhaseTag::BwdWt,
            layer: 0,
            mb,
            out: 0,
            class: ActClass::Internal,
        };
        self.compute(ranks, a, &[g])
    }

    fn head_fwd(&mut self, ranks: &[u64], x: &PerRank, ctx: &BlockCtx, mb: u64) -> HeadFwd {
        let m = self.model;
        let (tp, eb) = (self.par.tp, self.eb);
        let h = m.hidden_dim;
        let (t, tsp) = if ctx.last_token_head {
            (ctx.batch, ctx.batch)
        } else {
            (ctx.tokens(), self.sp_tokens(ctx))
        };
        let vl = m.vocab_size / tp;
        let layer = m.num_layers;
        let args = |name: &str, op: OpKind, out: u64| NodeArgs {
            name: name.to_string(),
            op,
            phase: ctx.tag,
            layer,
            mb,
            out,
            class: ActClass::Internal,
        };
        let norm = self.compute(ranks, args("final_norm", pw(tsp * h, eb, 8, 1, 1), tsp * h * eb), &[x]);
        let mut head_in = norm.clone();
        if self.sp() && !ctx.last_token_head {
            let a = args("sp_gather_head", PENDING, t * h * eb);
            head_in = self.collective(ranks, &[Axis::Tp], CollectiveKind::AllGather, t * h * eb, a, &[&norm], EdgeKind::Data);
        }
        let logits = self.compute(ranks, args("lm_head", OpKind::Gemm(GemmShape::new(t, vl, h)), t * vl * eb), &[&head_in]);
        let name = if ctx.last_token_head { "sample" } else { "loss" };
        let loss = self.compute(ranks, args(name, pw(t * vl, eb, 6, 1, 1), t * 4), &[&logits]);
        HeadFwd {
            input: x.clone(),
            norm_out: head_in,
            logits,
            loss,
        }
    }

    fn head_bwd(&mut self, ranks: &[u64], st: &HeadFwd, ctx: &BlockCtx, mb: u64) -> PerRank {
        let m = self.model;
        let (tp, eb) = (self.par.tp, self.eb);
        let h = m.hidden_dim;
        let t = ctx.tokens();
        let tsp = self.sp_tokens(ctx);
        let vl = m.vocab_size / tp;
        let layer = m.num_layers;
        let args = |name: &str, op: OpKind, phase: PhaseTag, out: u64| NodeArgs {
            name: name.to_string(),
            op,
            phase,
            layer,
            mb,
            out,
            class: ActClass::Internal,
        };
        let gl = self.compute(
            ranks,
            args("loss.bwd", pw(t * vl, eb, 4, 2, 1), PhaseTag::BwdAct, t * vl * eb),
            &[&st.loss, &st.logits],
        );
        let d = self.compute(
            ranks,
            args("lm_head.dgrad", OpKind::Gemm(GemmShape::new(t, h, vl)), PhaseTag::BwdAct, t * h * eb),
            &[&gl],
        );
        self.compute(
            ranks,
            args("lm_head.wgrad", OpKind::Gemm(GemmShape::new(vl, h, t)), PhaseTag::BwdWt, 0),
            &[&gl, &st.norm_out],
        );
        let mut g = d.clone();
        if tp > 1 {
            let (kind, out) = self.tp_reduce(t * h * eb);
            let a = args("tp_head_grad_reduce", PENDING, PhaseTag::BwdAct, out);
            g = self.collective(ranks, &[Axis::Tp], kind, t * h * eb, a, &[&d], EdgeKind::Data);
        }
        self.compute(
            ranks,
            args("final_norm.bwd", pw(tsp * h, eb, 8, 2, 1), PhaseTag::BwdAct, tsp * h * eb),
            &[&g, &st.input],
        )
    }

    // ------------------------------------------------------------ pipeline

    fn partner(&self, r: u64, stage: u64) -> u64 {
        self.layout.rank(self.layout.coords(r).with(Axis::Pp, stage))
    }

    #[allow(clippy::too_many_arguments)]
    fn make_p2p(&mut self, kind: P2pKind, key: u64, src: u64, dst: u64, bytes: u64, phase: PhaseTag, layer: u64, mb: u64) {
        let name = match kind {
            P2pKind::Act => "pp_send_act",
            P2pKind::Grad => "pp_send_grad",
            P2pKind::Token => "pp_token_feedback",
        };
        let a = NodeArgs {
            name: name.into(),
            op: OpKind::P2p(CommSpec {
                kind: CollectiveKind::SendRecv,
                bytes,
                ranks: vec![src, dst],
            }),
            phase,
            layer,
            mb,
            out: bytes,
            class: ActClass::Boundary,
        };
        let id = self.push(&a, vec![src, dst], false);
        self.p2p.insert((kind, key, src), id);
    }

    /// Transfers between adjacent stages for one microbatch (or decode key).
    fn create_stage_p2p(&mut self, key: u64, mb: u64, ctx: &BlockCtx, backward: bool) {
        let bytes = self.sp_tokens(ctx) * self.model.hidden_dim * self.eb;
        for s in 0..self.par.pp.saturating_sub(1) {
            let boundary = self.layers_of(s).end;
            for r in self.stage_ranks(s) {
                let next = self.partner(r, s + 1);
                self.make_p2p(P2pKind::Act, key, r, next, bytes, ctx.tag, boundary, mb);
                if backward {
                    self.make_p2p(P2pKind::Grad, key, next, r, bytes, PhaseTag::BwdAct, boundary, mb);
                }
            }
        }
    }

    fn recv(&self, kind: P2pKind, key: u64, ranks: &[u64], from_stage: u64) -> PerRank {
        ranks
            .iter()
            .map(|&r| (r, self.p2p[&(kind, key, self.partner(r, from_stage))]))
            .collect()
    }

    fn send(&mut self, kind: P2pKind, key: u64, from: &PerRank) {
        for (&r, &n) in from {
            let id = self.p2p[&(kind, key, r)];
            self.edge(n, id, EdgeKind::Data);
        }
    }

    /// Forward (or prefill/decode) block of one stage. `input` feeds the
    /// first stage; `token_send` forwards the last stage's output to a
    /// later decode step.
    fn fwd_block(&mut self, stage: u64, mb: u64, key: u64, ctx: &BlockCtx, input: Option<&PerRank>, token_send: Option<u64>) -> PerRank {
        let ranks = self.stage_ranks(stage);
        let last = stage + 1 == self.par.pp;
        let x = if stage == 0 {
            match self.expansion {
                Expansion::Operators => {
                    let deps: Vec<&PerRank> = input.into_iter().collect();
                    self.embedding_fwd(&ranks, ctx, mb, &deps)
                }
                Expansion::Collapsed(_) => input.cloned().unwrap_or_default(),
            }
        } else {
            self.recv(P2pKind::Act, key, &ranks, stage - 1)
        };
        let out = match self.expansion {
            Expansion::Operators => {
                let mut x = x;
                for l in self.layers_of(stage) {
                    let f = self.layer_fwd(&ranks, &x, ctx, l, mb, FwdMode::Normal);
                    x = f.resid2.clone();
                    if ctx.tag == PhaseTag::Fwd {
                        self.stash.insert((mb, l), f);
                    }
                }
                if last {
                    let hf = self.head_fwd(&ranks, &x, ctx, mb);
                    let out = hf.loss.clone();
                    if ctx.tag == PhaseTag::Fwd {
                        self.head_stash.insert(mb, hf);
                    }
                    out
                } else {
                    x
                }
            }
            Expansion::Collapsed(d) => {
                let dur = d.fwd(stage, ctx);
                self.collapsed_block(&ranks, stage, mb, ctx, ctx.tag, dur, &x)
            }
        };
        if !last {
            self.send(P2pKind::Act, key, &out);
        }
        if let Some(k) = token_send {
            self.send(P2pKind::Token, k, &out);
        }
        self.end_block(&ranks);
        out
    }

    fn bwd_block(&mut self, stage: u64, mb: u64, ctx: &BlockCtx) {
        let ranks = self.stage_ranks(stage);
        let last = stage + 1 == self.par.pp;
        let g = if last {
            match self.expansion {
                Expansion::Operators => {
                    let hf = self.head_stash.remove(&mb).expect("head forward emitted");
                    self.head_bwd(&ranks, &hf, ctx, mb)
                }
                Expansion::Collapsed(_) => PerRank::new(),
            }
        } else {
            self.recv(P2pKind::Grad, mb, &ranks, stage + 1)
        };
        let out = match self.expansion {
            Expansion::Operators => {
                let mut g = g;
                for l in self.layers_of(stage).rev() {
                    let st = self.stash.remove(&(mb, l)).expect("layer forward emitted");
                    g = self.layer_bwd_with_recompute(&ranks, &g, ctx, l, mb, &st);
                }
                if stage == 0 {
                    self.embedding_bwd(&ranks, &g, ctx, mb);
                }
                g
            }
            Expansion::Collapsed(d) => {
                let dur = d.bwd(stage);
                self.collapsed_block(&ranks, stage, mb, ctx, PhaseTag::BwdAct, dur, &g)
            }
        };
        if stage > 0 {
            self.send(P2pKind::Grad, mb, &out);
        }
        self.end_block(&ranks);
    }

    #[allow(clippy::too_many_arguments)]
    fn collapsed_block(&mut self, ranks: &[u64], stage: u64, mb: u64, ctx: &BlockCtx, tag: PhaseTag, duration: f64, input: &PerRank) -> PerRank {
        let layer = self.layers_of(stage).start;
        let zero3 = if self.par.zero_stage == ZeroStage::Z3 && self.par.dp > 1 {
            let per = self.model.num_layers / self.par.pp;
            let bytes = per * self.model.layer_params() / self.par.tp * self.eb;
            let a = NodeArgs {
                name: "zero3_gather".into(),
                op: PENDING,
                phase: tag,
                layer,
                mb,
                out: 0,
                class: ActClass::Internal,
            };
            Some(self.collective(ranks, &[Axis::Dp], CollectiveKind::AllGather, bytes, a, &[input], EdgeKind::Control))
        } else {
            None
        };
        let a = NodeArgs {
            name: format!("stage{stage}.{}", tag.as_str()),
            op: OpKind::Block { duration },
            phase: tag,
            layer,
            mb,
            out: self.sp_tokens(ctx) * self.model.hidden_dim * self.eb,
            class: ActClass::Boundary,
        };
        let out = self.compute(ranks, a, &[input]);
        if let Some(z) = zero3 {
            self.gate(&z, &out);
        }
        out
    }

    /// Gradient synchronization across data(+context)-parallel replicas and
    /// the optimizer step, after the last backward block.
    fn dp_sync(&mut self) {
        let m = self.model;
        let par = self.par;
        let eb = self.eb;
        for stage in 0..par.pp {
            let ranks = self.stage_ranks(stage);
            let params = memmodel::local_params(m, par, stage);
            let group = self.layout.group(ranks[0], &[Axis::Dp, Axis::Cp]);
            let layer = m.num_layers + 1;
            let args = |name: &str, op: OpKind| NodeArgs {
                name: name.to_string(),
                op,
                phase: PhaseTag::BwdWt,
                layer,
                mb: 0,
                out: 0,
                class: ActClass::Internal,
            };
            let shard = if par.zero_stage == ZeroStage::None { 1 } else { par.dp };
            let opt = pw(params / shard, 4, 10, 4, 4);
            if group.len() > 1 {
                let dp_axes = [Axis::Dp, Axis::Cp];
                if par.zero_stage == ZeroStage::None {
                    let ar = self.collective(&ranks, &dp_axes, CollectiveKind::AllReduce, params * eb, args("dp_grad_allreduce", PENDING), &[], EdgeKind::Control);
                    let step = self.compute(&ranks, args("optimizer", opt), &[]);
                    self.gate(&ar, &step);
                } else {
                    let rs = self.collective(&ranks, &dp_axes, CollectiveKind::ReduceScatter, params * eb, args("dp_grad_reduce_scatter", PENDING), &[], EdgeKind::Control);
                    let step = self.compute(&ranks, args("optimizer", opt), &[]);
                    self.gate(&rs, &step);
                    self.collective(&ranks, &dp_axes, CollectiveKind::AllGather, params * eb, args("dp_param_allgather", PENDING), &[&step], EdgeKind::Control);
                }
            } else {
                self.compute(&ranks, args("optimizer", opt), &[]);
            }
            self.end_block(&ranks);
        }
    }

    fn train(&mut self) {
        let par = self.par;
        let ctx = BlockCtx::train(self.model, par);
        for mb in 0..par.num_microbatches {
            self.create_stage_p2p(mb, mb, &ctx, true);
        }
        for stage in 0..par.pp {
            for (mb, fwd) in one_f_one_b(stage, par.pp, par.num_microbatches) {
                if fwd {
                    self.fwd_block(stage, mb, mb, &ctx, None, None);
                } else {
                    self.bwd_block(stage, mb, &ctx);
                }
            }
        }
        self.dp_sync();
    }

    /// Optional prefill followed by the given decode steps. Each decode
    /// block of a microbatch is fed by that microbatch's previous block.
    fn inference(&mut self, prefill: bool, steps: &[u64]) {
        let par = self.par;
        let m = self.model;
        let mbs = par.num_microbatches;
        let last = par.pp - 1;
        let mut blocks: Vec<(BlockCtx, Option<u64>)> = Vec::new();
        if prefill {
            blocks.push((BlockCtx::prefill(m, par), None));
        }
        for &t in steps {
            blocks.push((BlockCtx::decode(m, par, t), Some(t)));
        }
        let key = |step: Option<u64>, mb: u64| match step {
            None => mb,
            Some(t) => (t + 1) * mbs + mb,
        };
        for (i, (ctx, step)) in blocks.iter().enumerate() {
            for mb in 0..mbs {
                self.create_stage_p2p(key(*step, mb), mb, ctx, false);
                if par.pp > 1 && i > 0 {
                    for r in self.stage_ranks(last) {
                        let dst = self.partner(r, 0);
                        self.make_p2p(P2pKind::Token, key(*step, mb), r, dst, ctx.batch * 4, ctx.tag, m.num_layers, mb);
                    }
                }
            }
        }
        let mut last_out: HashMap<u64, PerRank> = HashMap::new();
        for stage in 0..par.pp {
            for (i, (ctx, step)) in blocks.iter().enumerate() {
                for mb in 0..mbs {
                    let k = key(*step, mb);
                    let input = if stage == 0 && i > 0 {
                        if par.pp > 1 {
                            Some(self.recv(P2pKind::Token, k, &self.stage_ranks(0), last))
                        } else {
                            last_out.get(&mb).cloned()
                        }
                    } else {
                        None
                    };
                    let token_send = if stage == last && par.pp > 1 {
                        blocks.get(i + 1).map(|(_, s)| key(*s, mb))
                    } else {
                        None
                    };
                    let o = self.fwd_block(stage, mb, k, ctx, input.as_ref(), token_send);
                    if stage == last {
                        last_out.insert(mb, o);
                    }
                }
            }
        }
    }

    fn finish(self) -> Result<OperatorGraph, GraphError> {
        self.g.topo_order()?;
        Ok(self.g)
    }
}

fn pw(elems: u64, bytes_per_elem: u64, flops_per_elem: u64, reads: u64, writes: u64) -> OpKind {
    OpKind::Pointwise(PointwiseShape {
        elems,
        bytes_per_elem,
        flops_per_elem,
        reads,
        writes,
    })
}

/// Per-stage 1F1B order: `(microbatch, is_forward)`.
pub fn one_f_one_b(stage: u64, pp: u64, microbatches: u64) -> Vec<(u64, bool)> {
    let warmup = (pp - stage - 1).min(microbatches);
    let mut out = Vec::with_capacity(2 * microbatches as usize);
    for mb in 0..warmup {
        out.push((mb, true));
    }
    for i in 0..microbatches - warmup {
        out.push((warmup + i, true));
        out.push((i, false));
    }
    for mb in microbatches - warmup..microbatches {
        out.push((mb, false));
    }
    out
}

fn check(model: &ModelSpec, par: &ParallelismConfig) -> Result<(), GraphError> {
    config::check_sharding(model, par).map_err(|e| GraphError::Indivisible(e.to_string()))
}

// ---------------------------------------------------------------------------
// Public constructors
// ---------------------------------------------------------------------------

/// One transformer layer on the first tensor/context-parallel group.
pub fn build_layer_graph(model: &ModelSpec, par: &ParallelismConfig, direction: Direction) -> Result<OperatorGraph, GraphError> {
    let ctx = match model.phase {
        Phase::Train => BlockCtx::train(model, par),
        Phase::Inference => BlockCtx::prefill(model, par),
    };
    build_layer_graph_ctx(model, par, &ctx, direction)
}

/// Single-layer graph for an explicit block shape. The backward graph
/// includes any recomputation required by the recompute policy.
pub fn build_layer_graph_ctx(model: &ModelSpec, par: &ParallelismConfig, ctx: &BlockCtx, direction: Direction) -> Result<OperatorGraph, GraphError> {
    check(model, par)?;
    let mut b = Builder::new(model, par, Expansion::Operators, format!("layer {direction:?} {}", par.id()));
    let ranks = b.layout.group(0, &[Axis::Tp, Axis::Cp]);
    let boundary = b.sp_tokens(ctx) * model.hidden_dim * b.eb;
    match direction {
        Direction::Fwd => {
            let f = b.layer_fwd(&ranks, &PerRank::new(), ctx, 0, 0, FwdMode::Normal);
            b.set_input(&f.ln1, boundary);
        }
        Direction::Bwd => {
            let stub = LayerFwd::default();
            let start = b.g.nodes.len();
            b.layer_bwd_with_recompute(&ranks, &PerRank::new(), ctx, 0, 0, &stub);
            for &r in &ranks {
                if let Some(first) = (start..b.g.nodes.len()).find(|&i| b.g.nodes[i].on_rank(r) && !b.g.nodes[i].is_recompute()) {
                    b.g.nodes[first].input_bytes = boundary;
                }
            }
        }
    }
    b.finish()
}

/// Embedding or LM-head subgraph for one microbatch on the first
/// tensor/context-parallel group.
pub fn build_endpoint_graph(model: &ModelSpec, par: &ParallelismConfig, ctx: &BlockCtx, head: bool, direction: Direction) -> Result<OperatorGraph, GraphError> {
    check(model, par)?;
    let mut b = Builder::new(model, par, Expansion::Operators, format!("endpoint head={head} {direction:?}"));
    let ranks = b.layout.group(0, &[Axis::Tp, Axis::Cp]);
    let empty = PerRank::new();
    match (head, direction) {
        (false, Direction::Fwd) => {
            b.embedding_fwd(&ranks, ctx, 0, &[]);
        }
        (false, Direction::Bwd) => {
            let e = b.embedding_bwd(&ranks, &empty, ctx, 0);
            let bytes = b.sp_tokens(ctx) * model.hidden_dim * b.eb;
            b.set_input(&e, bytes);
        }
        (true, Direction::Fwd) => {
            b.head_fwd(&ranks, &empty, ctx, 0);
        }
        (true, Direction::Bwd) => {
            b.head_bwd(&ranks, &HeadFwd::default(), ctx, 0);
            let bytes = ctx.tokens() * (model.vocab_size / par.tp) * b.eb;
            for n in &mut b.g.nodes {
                if n.name == "loss.bwd" {
                    n.input_bytes = bytes;
                }
            }
        }
    }
    b.finish()
}

/// Full training iteration or inference request over every rank.
pub fn build_full_graph(model: &ModelSpec, par: &ParallelismConfig) -> Result<OperatorGraph, GraphError> {
    check(model, par)?;
    let mut b = Builder::new(model, par, Expansion::Operators, format!("full {:?} {}", model.phase, par.id()));
    match model.phase {
        Phase::Train => b.train(),
        Phase::Inference => {
            let steps: Vec<u64> = (0..model.decode_len).collect();
            b.inference(true, &steps);
        }
    }
    b.finish()
}

/// Inference graph restricted to an optional prefill plus selected decode
/// steps.
pub fn build_inference_graph(model: &ModelSpec, par: &ParallelismConfig, prefill: bool, steps: &[u64]) -> Result<OperatorGraph, GraphError> {
    check(model, par)?;
    let mut b = Builder::new(model, par, Expansion::Operators, format!("inference prefill={prefill} steps={}", steps.len()));
    b.inference(prefill, steps);
    b.finish()
}

/// Pipeline graph whose compute nodes are whole stage blocks with the given
/// durations. Pipeline transfers, gradient synchronization and the
/// optimizer step stay explicit.
pub fn build_pipeline_graph(
    model: &ModelSpec,
    par: &ParallelismConfig,
    durations: &dyn BlockDurations,
    decode_steps: Option<(bool, &[u64])>,
) -> Result<OperatorGraph, GraphError> {
    check(model, par)?;
    let mut b = Builder::new(model, par, Expansion::Collapsed(durations), format!("pipeline {}", par.id()));
    match (model.phase, decode_steps) {
        (Phase::Train, _) => b.train(),
        (Phase::Inference, Some((prefill, steps))) => b.inference(prefill, steps),
        (Phase::Inference, None) => {
            let steps: Vec<u64> = (0..model.decode_len).collect();
            b.inference(true, &steps);
        }
    }
    b.finish()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{parse_model, ModelSpec};

    pub(crate) fn tiny_model(layers: u64, phase: &str) -> ModelSpec {
        let doc = format!(
            r#"{{"num_layers":{layers},"hidden_dim":64,"num_heads":4,
            "ffn_dim":256,"vocab_size":128,"seq_len":32,"batch_size":8,
            "precision":"mixed_bf16","phase":"{phase}","prefill_len":16,"decode_len":3}}"#
        );
        parse_model(&doc).unwrap()
    }

    pub(crate) fn par(dp: u64, tp: u64, pp: u64, cp: u64, mb: u64) -> ParallelismConfig {
        ParallelismConfig {
            dp,
            tp,
            pp,
            cp,
            num_microbatches: mb,
            ..Default::default()
        }
    }

    fn count(g: &OperatorGraph, kind: CollectiveKind, f: impl Fn(&OperatorNode) -> bool) -> usize {
        g.comm_nodes().filter(|n| n.op.comm().unwrap().kind == kind && f(n)).count()
    }

    #[test]
    fn one_f_one_b_orders() {
        assert_eq!(one_f_one_b(0, 2, 3), vec![(0, true), (1, true), (0, false), (2, true), (1, false), (2, false)]);
        assert_eq!(one_f_one_b(1, 2, 3), vec![(0, true), (0, false), (1, true), (1, false), (2, true), (2, false)]);
        assert_eq!(one_f_one_b(0, 4, 2), vec![(0, true), (1, true), (0, false), (1, false)]);
    }

    #[test]
    fn tp2_layer_has_two_allreduces_each_way() {
        let m = tiny_model(2, "train");
        let p = par(1, 2, 1, 1, 1);
        let f = build_layer_graph(&m, &p, Direction::Fwd).unwrap();
        assert_eq!(count(&f, CollectiveKind::AllReduce, |_| true), 2);
        let b = build_layer_graph(&m, &p, Direction::Bwd).unwrap();
        assert_eq!(count(&b, CollectiveKind::AllReduce, |_| true), 2);
        for n in f.comm_nodes() {
            let c = n.op.comm().unwrap();
            assert_eq!(c.ranks, vec![0, 1]);
            assert_eq!(c.bytes, 8 * 32 * 64 * 2);
        }
    }

    #[test]
    fn sp_swaps_allreduce_for_gather_scatter() {
        let m = tiny_model(2, "train");
        let mut p = par(1, 2, 1, 1, 1);
        p.sp_enabled = true;
        let f = build_layer_graph(&m, &p, Direction::Fwd).unwrap();
        assert_eq!(count(&f, CollectiveKind::AllReduce, |_| true), 0);
        assert_eq!(count(&f, CollectiveKind::AllGather, |_| true), 2);
        assert_eq!(count(&f, CollectiveKind::ReduceScatter, |_| true), 2);
    }

    #[test]
    fn pipeline_p2p_counts() {
        let m = tiny_model(4, "train");
        let p = par(1, 1, 2, 1, 4);
        let g = build_full_graph(&m, &p).unwrap();
        let fwd = g.nodes.iter().filter(|n| n.name == "pp_send_act" && n.ranks == [0, 1]).count();
        let bwd = g.nodes.iter().filter(|n| n.name == "pp_send_grad" && n.ranks == [1, 0]).count();
        assert_eq!((fwd, bwd), (4, 4));
    }

    #[test]
    fn dp_gradient_bytes_match_parameter_shard() {
        let m = tiny_model(4, "train");
        let p = par(2, 2, 2, 1, 2);
        let g = build_full_graph(&m, &p).unwrap();
        for stage in 0..2 {
            let expect = memmodel::local_params(&m, &p, stage) * 2;
            let found: Vec<_> = g
                .comm_nodes()
                .filter(|n| n.name == "dp_grad_allreduce")
                .filter(|n| p.layout().coords(n.ranks[0]).pp == stage)
                .collect();
            assert_eq!(found.len(), 2, "one per tensor-parallel rank");
            for n in found {
                assert_eq!(n.op.comm().unwrap().bytes, expect);
                assert_eq!(n.ranks.len(), 2);
            }
        }
    }

    #[test]
    fn zero_stages_use_reduce_scatter() {
        let m = tiny_model(2, "train");
        let mut p = par(2, 1, 1, 1, 1);
        p.zero_stage = ZeroStage::Z1;
        let g = build_full_graph(&m, &p).unwrap();
        assert_eq!(count(&g, CollectiveKind::ReduceScatter, |n| n.name.starts_with("dp_")), 1);
        assert_eq!(count(&g, CollectiveKind::AllGather, |n| n.name.starts_with("dp_")), 1);
        p.zero_stage = ZeroStage::Z3;
        let g = build_full_graph(&m, &p).unwrap();
        assert_eq!(count(&g, CollectiveKind::AllGather, |n| n.name.contains("zero3")), 4);
    }

    #[test]
    fn cp_adds_all_to_all() {
        let m = tiny_model(2, "train");
        let p = par(1, 1, 1, 2, 1);
        let f = build_layer_graph(&m, &p, Direction::Fwd).unwrap();
        assert_eq!(count(&f, CollectiveKind::AllToAll, |_| true), 1);
        let a = f.nodes.iter().find(|n| n.name == "L0.attn").unwrap();
        match a.op {
            OpKind::FlashAttention(s) => assert_eq!((s.q_len, s.kv_len), (16, 32)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn recompute_inserts_forward_copies() {
        let m = tiny_model(2, "train");
        let mut p = par(1, 1, 1, 1, 1);
        let base = build_full_graph(&m, &p).unwrap();
        assert!(base.nodes.iter().all(|n| !n.is_recompute()));
        p.recompute = Recompute::Selective;
        let sel = build_full_graph(&m, &p).unwrap();
        let re: Vec<_> = sel.nodes.iter().filter(|n| n.is_recompute()).collect();
        assert_eq!(re.len(), 2);
        assert!(re.iter().all(|n| n.recompute_of.is_some()));
        p.recompute = Recompute::Full;
        let full = build_full_graph(&m, &p).unwrap();
        let n_full = full.nodes.iter().filter(|n| n.is_recompute()).count();
        assert_eq!(n_full, 2 * 10);
    }

    #[test]
    fn graphs_are_acyclic_and_rank_local() {
        let m = tiny_model(4, "train");
        let mut sp = par(1, 2, 2, 2, 2);
        sp.sp_enabled = true;
        sp.recompute = Recompute::Full;
        for p in [par(2, 2, 2, 1, 4), sp, par(2, 1, 4, 1, 4)] {
            let g = build_full_graph(&m, &p).unwrap();
            let order = g.topo_order().unwrap();
            assert_eq!(order.len(), g.len());
            for n in &g.nodes {
                if n.op.is_compute() {
                    assert_eq!(n.ranks.len(), 1);
                }
            }
            for &(u, v, _) in &g.edges {
                let (a, b) = (&g.nodes[u], &g.nodes[v]);
                if a.op.is_compute() && b.op.is_compute() {
                    assert_eq!(a.ranks, b.ranks, "cross-rank compute edge {u}->{v}");
                }
            }
        }
    }

    #[test]
    fn inference_graph_has_prefill_and_decode() {
        let m = tiny_model(2, "inference");
        let p = par(1, 1, 2, 1, 1);
        let g = build_full_graph(&m, &p).unwrap();
        let decode_attn = g
            .nodes
            .iter()
            .filter(|n| n.phase == PhaseTag::Decode && matches!(n.op, OpKind::FlashAttention(_)))
            .count();
        assert_eq!(decode_attn, 3 * 2);
        let tokens = g.nodes.iter().filter(|n| n.name == "pp_token_feedback").count();
        assert_eq!(tokens, 3);
    }

    #[test]
    fn indivisible_is_rejected() {
        let m = tiny_model(3, "train");
        assert!(matches!(build_full_graph(&m, &par(1, 1, 2, 1, 1)), Err(GraphError::Indivisible(_))));
    }

    #[test]
    fn comm_patterns() {
        assert_eq!(comm_pattern_for(ParallelAxis::Tp, Direction::Fwd), &[CommPattern::AllGather, CommPattern::AllReduce]);
        assert_eq!(comm_pattern_for(ParallelAxis::Cp, Direction::Bwd), &[CommPattern::AllToAll, CommPattern::BlockExchange]);
        assert_eq!(comm_pattern_for(ParallelAxis::Pp, Direction::Bwd), &[CommPattern::PointToPoint]);
    }
}
