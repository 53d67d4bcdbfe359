//! Tile-based roofline latency model for compute operators.
//!
//! GEMMs are costed by searching a small menu of power-of-two tilings and
//! taking the fastest under a four-limb roofline (compute, SRAM, L2, HBM).
//! Compute is derated by wave quantization. HBM traffic is compulsory while
//! the co-resident operand panels fit in L2 and drifts toward the L2 stream
//! as they overflow it.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, DType, HardwareSpec};
use crate::graph::{AttnShape, GemmShape, OpKind, OperatorGraph, PointwiseShape};

const TILE_MN: [u64; 4] = [32, 64, 128, 256];
const TILE_K: [u64; 2] = [32, 64];
const ATTN_BLOCKS: [u64; 3] = [32, 64, 128];
const ACC_BYTES: u64 = 4;
/// Softmax cost per score element (max, sub, exp, sum, scale).
const SOFTMAX_FLOPS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TilingCandidate {
    pub tile_m: u64,
    pub tile_n: u64,
    pub tile_k: u64,
    pub tiles_total: u64,
    pub tiles_per_sm: u64,
    pub waves: u64,
}

impl TilingCandidate {
    pub fn new(tile_m: u64, tile_n: u64, tile_k: u64, tiles_total: u64, tiles_per_sm: u64, num_sms: u64) -> Self {
        TilingCandidate {
            tile_m,
            tile_n,
            tile_k,
            tiles_total,
            tiles_per_sm,
            waves: tiles_total.div_ceil(num_sms * tiles_per_sm),
        }
    }

    pub fn wave_efficiency(&self, num_sms: u64) -> f64 {
        self.tiles_total as f64 / (self.waves * num_sms * self.tiles_per_sm) as f64
    }

    /// Tiles running at once across the device.
    pub fn concurrent(&self, num_sms: u64) -> u64 {
        self.tiles_total.min(num_sms * self.tiles_per_sm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TrafficProfile {
    pub flops: f64,
    pub sram_bytes: f64,
    pub l2_bytes: f64,
    pub hbm_bytes: f64,
    pub l2_miss_rate: f64,
}

impl TrafficProfile {
    fn with_hbm(flops: f64, sram: f64, l2: f64, hbm: f64) -> Self {
        TrafficProfile {
            flops,
            sram_bytes: sram,
            l2_bytes: l2,
            hbm_bytes: hbm,
            l2_miss_rate: if l2 > 0.0 { hbm / l2 } else { 0.0 },
        }
    }

    fn add(&self, o: &TrafficProfile) -> Self {
        TrafficProfile::with_hbm(
            self.flops + o.flops,
            self.sram_bytes + o.sram_bytes,
            self.l2_bytes + o.l2_bytes,
            self.hbm_bytes + o.hbm_bytes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Limb {
    Compute,
    Sram,
    L2,
    Hbm,
    /// Fixed duration supplied by the caller.
    Given,
    None,
}

impl Limb {
    pub fn as_str(self) -> &'static str {
        match self {
            Limb::Compute => "compute",
            Limb::Sram => "sram",
            Limb::L2 => "l2",
            Limb::Hbm => "hbm",
            Limb::Given => "given",
            Limb::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpCost {
    pub time: f64,
    pub traffic: TrafficProfile,
    pub tile: Option<TilingCandidate>,
    pub limb: Limb,
    /// For attention: whether the fused kernel was used.
    pub fused: Option<bool>,
}

impl OpCost {
    fn zero() -> Self {
        OpCost { time: 0.0, traffic: TrafficProfile::default(), tile: None, limb: Limb::None, fused: None }
    }
}

fn next_pow2_floor32(x: u64) -> u64 {
    x.max(1).next_power_of_two().max(32)
}

fn footprint(tm: u64, tn: u64, tk: u64, eb: u64) -> u64 {
    (tm * tk + tk * tn) * eb + tm * tn * ACC_BYTES
}

/// All admissible tilings for `shape`. Tiles larger than the next power of
/// two of a dimension are pruned; the 32x32x32 tile is always present.
pub fn enumerate_tilings(shape: &GemmShape, hw: &HardwareSpec, dtype: DType) -> Vec<TilingCandidate> {
    let eb = dtype.bytes();
    let (m, n, k) = (shape.m.max(1), shape.n.max(1), shape.k.max(1));
    let batch = shape.batch.max(1);
    let mut out = Vec::new();
    for &tm in TILE_MN.iter().filter(|&&t| t <= next_pow2_floor32(m)) {
        for &tn in TILE_MN.iter().filter(|&&t| t <= next_pow2_floor32(n)) {
            for &tk in TILE_K.iter().filter(|&&t| t <= next_pow2_floor32(k)) {
                let total = m.div_ceil(tm) * n.div_ceil(tn) * batch;
                let fits = hw.sram_per_sm / footprint(tm, tn, tk, eb);
                let minimal = (tm, tn, tk) == (32, 32, 32);
                if fits == 0 && !minimal {
                    continue;
                }
                let max_tps = fits.max(1).min(total.div_ceil(hw.num_sms).max(1));
                for tps in 1..=max_tps {
                    out.push(TilingCandidate::new(tm, tn, tk, total, tps, hw.num_sms));
                }
            }
        }
    }
    out
}

/// Operand bytes of the co-resident output tiles, assuming they form a
/// near-square block of the output grid. The smaller of the two
/// orientations is used so the result is symmetric in (M, N).
fn working_set(cand: &TilingCandidate, shape: &GemmShape, hw: &HardwareSpec, eb: u64) -> f64 {
    let (m, n, k) = (shape.m.max(1), shape.n.max(1), shape.k.max(1));
    let gm = m.div_ceil(cand.tile_m);
    let gn = n.div_ceil(cand.tile_n);
    let per_matrix = gm * gn;
    let c = cand.concurrent(hw.num_sms);
    if c >= per_matrix {
        let mats = c.div_ceil(per_matrix).min(shape.batch.max(1));
        return (mats * (m * k + k * n) * eb) as f64;
    }
    let side = (c as f64).sqrt().ceil() as u64;
    let orient = |g_rows: u64, t_rows: u64, rows_dim: u64, t_cols: u64, cols_dim: u64| {
        let r = side.min(g_rows).max(1);
        let cc = c.div_ceil(r);
        ((r * t_rows).min(rows_dim) + (cc * t_cols).min(cols_dim)) * k * eb
    };
    let a = orient(gm, cand.tile_m, m, cand.tile_n, n);
    let b = orient(gn, cand.tile_n, n, cand.tile_m, m);
    a.min(b) as f64
}

fn hbm_from_overflow(compulsory: f64, l2: f64, ws: f64, l2_capacity: u64) -> f64 {
    let cap = l2_capacity as f64;
    if ws <= cap {
        compulsory
    } else {
        compulsory + (l2 - compulsory) * (ws - cap) / ws
    }
}

pub fn tile_traffic(cand: &TilingCandidate, shape: &GemmShape, dtype: DType, hw: &HardwareSpec) -> TrafficProfile {
    let eb = dtype.bytes() as f64;
    let b = shape.batch.max(1) as f64;
    let (m, n, k) = (shape.m.max(1), shape.n.max(1), shape.k.max(1));
    let (mf, nf, kf) = (m as f64, n as f64, k as f64);
    let operand_loads = b * (mf * kf * n.div_ceil(cand.tile_n) as f64 + kf * nf * m.div_ceil(cand.tile_m) as f64) * eb;
    let c_bytes = b * mf * nf * eb;
    let l2 = operand_loads + c_bytes;
    // Every L2 byte lands in shared memory and is read back once.
    let sram = 2.0 * operand_loads + c_bytes;
    let compulsory = b * (mf * kf + kf * nf + mf * nf) * eb;
    let ws = working_set(cand, shape, hw, dtype.bytes());
    let hbm = hbm_from_overflow(compulsory, l2, ws, hw.l2_capacity);
    TrafficProfile::with_hbm(shape.flops(), sram, l2, hbm)
}

/// Roofline time and the binding limb. `hw` must already be validated.
pub fn roofline_time(t: &TrafficProfile, cand: &TilingCandidate, hw: &HardwareSpec, dtype: DType) -> (f64, Limb) {
    let eff = cand.wave_efficiency(hw.num_sms);
    limbs_max(t, hw.peak(dtype) * hw.compute_derate * eff, hw)
}

fn limbs_max(t: &TrafficProfile, flops_rate: f64, hw: &HardwareSpec) -> (f64, Limb) {
    let limbs = [
        (t.flops / flops_rate, Limb::Compute),
        (t.sram_bytes / hw.sram_bw, Limb::Sram),
        (t.l2_bytes / hw.l2_bw, Limb::L2),
        (t.hbm_bytes / (hw.hbm_bw * hw.mem_derate), Limb::Hbm),
    ];
    limbs
        .into_iter()
        .fold((0.0, Limb::Compute), |acc, l| if l.0 > acc.0 { l } else { acc })
}

/// Cost of a GEMM under one fixed tiling.
pub fn candidate_cost(cand: &TilingCandidate, shape: &GemmShape, hw: &HardwareSpec, dtype: DType) -> OpCost {
    let traffic = tile_traffic(cand, shape, dtype, hw);
    let (time, limb) = roofline_time(&traffic, cand, hw, dtype);
    OpCost { time, traffic, tile: Some(*cand), limb, fused: None }
}

fn better(a: &OpCost, b: &OpCost) -> bool {
    let (ta, tb) = (a.tile.unwrap(), b.tile.unwrap());
    a.time
        .total_cmp(&b.time)
        .then(a.traffic.hbm_bytes.total_cmp(&b.traffic.hbm_bytes))
        .then(tb.tile_m.cmp(&ta.tile_m))
        .then(tb.tile_n.cmp(&ta.tile_n))
        .then(ta.tile_k.cmp(&tb.tile_k))
        .then(ta.tiles_per_sm.cmp(&tb.tiles_per_sm))
        .is_lt()
}

pub fn gemm_cost(shape: &GemmShape, hw: &HardwareSpec, dtype: DType) -> OpCost {
    let mut best: Option<OpCost> = None;
    for cand in enumerate_tilings(shape, hw, dtype) {
        let c = candidate_cost(&cand, shape, hw, dtype);
        if best.as_ref().is_none_or(|b| better(&c, b)) {
            best = Some(c);
        }
    }
    best.expect("tiling menu always contains the minimal tile")
}

pub fn gemm_latency(shape: &GemmShape, hw: &HardwareSpec, dtype: DType) -> (f64, TilingCandidate) {
    let c = gemm_cost(shape, hw, dtype);
    (c.time, c.tile.unwrap())
}

/// Bandwidth/throughput model for elementwise kernels. Arithmetic runs at
/// the fp32 (non-tensor) rate.
pub fn pointwise_cost(p: &PointwiseShape, hw: &HardwareSpec) -> OpCost {
    if p.elems == 0 {
        return OpCost::zero();
    }
    let e = p.elems as f64;
    let flops = e * p.flops_per_elem as f64;
    let bytes = e * p.bytes_per_elem as f64 * (p.reads + p.writes) as f64;
    let tc = flops / (hw.peak(DType::Fp32) * hw.compute_derate);
    let tm = bytes / (hw.hbm_bw * hw.mem_derate);
    let traffic = TrafficProfile::with_hbm(flops, bytes, bytes, bytes);
    let (time, limb) = if tc > tm { (tc, Limb::Compute) } else { (tm, Limb::Hbm) };
    OpCost { time, traffic, tile: None, limb, fused: None }
}

pub fn pointwise_latency(
    elem_count: u64,
    bytes_per_elem: u64,
    flops_per_elem: u64,
    reads: u64,
    writes: u64,
    hw: &HardwareSpec,
) -> f64 {
    pointwise_cost(
        &PointwiseShape { elems: elem_count, bytes_per_elem, flops_per_elem, reads, writes },
        hw,
    )
    .time
}

fn attn_footprint(br: u64, bc: u64, d: u64, eb: u64) -> u64 {
    br * d * eb + 2 * bc * d * eb + br * bc * ACC_BYTES + br * d * ACC_BYTES
}

/// Fused attention tiled over KV blocks with the Q tile and its output
/// accumulator resident in SRAM. `None` when no block size fits.
pub fn fused_attention_cost(a: &AttnShape, hw: &HardwareSpec, dtype: DType) -> Option<OpCost> {
    let eb = dtype.bytes();
    let ebf = eb as f64;
    let (q, kv, d) = (a.q_len.max(1), a.kv_len.max(1), a.head_dim.max(1));
    let groups = (a.batch.max(1) * a.heads.max(1)) as f64;
    let (qf, kvf, df) = (q as f64, kv as f64, d as f64);
    let scores = groups * qf * kvf;
    let (gemm_flops, pw_flops) = if a.backward {
        (10.0 * scores * df, 2.0 * SOFTMAX_FLOPS as f64 * scores)
    } else {
        (4.0 * scores * df, SOFTMAX_FLOPS as f64 * scores)
    };
    let flops = gemm_flops + pw_flops;
    let mut best: Option<OpCost> = None;
    for &br in ATTN_BLOCKS.iter().filter(|&&b| b <= next_pow2_floor32(q)) {
        for &bc in ATTN_BLOCKS.iter().filter(|&&b| b <= next_pow2_floor32(kv)) {
            let fp = attn_footprint(br, bc, d, eb);
            let fits = hw.sram_per_sm / fp;
            if fits == 0 {
                continue;
            }
            // Forward parallelizes over Q blocks, backward over KV blocks.
            let (outer_len, outer_blk) = if a.backward { (kv, bc) } else { (q, br) };
            let per_group = outer_len.div_ceil(outer_blk);
            let total = per_group * a.batch.max(1) * a.heads.max(1);
            let max_tps = fits.min(total.div_ceil(hw.num_sms).max(1));
            for tps in 1..=max_tps {
                let cand = TilingCandidate::new(br, bc, d, total, tps, hw.num_sms);
                let (compulsory, resident, streamed) = if a.backward {
                    // Q, O, dO, dQ per query; K, V, dK, dV per key.
                    (groups * (4.0 * qf + 4.0 * kvf) * df * ebf, 4.0 * kvf, 4.0 * qf)
                } else {
                    (groups * (2.0 * qf + 2.0 * kvf) * df * ebf, 2.0 * qf, 2.0 * kvf)
                };
                let l2 = groups * (resident + per_group as f64 * streamed) * df * ebf;
                let sram = 2.0 * l2 + 2.0 * scores * ACC_BYTES as f64;
                let live_groups = cand.concurrent(hw.num_sms).div_ceil(per_group) as f64;
                let ws = live_groups * streamed * df * ebf;
                let hbm = hbm_from_overflow(compulsory, l2, ws, hw.l2_capacity);
                let traffic = TrafficProfile::with_hbm(flops, sram, l2, hbm);
                let (time, limb) = roofline_time(&traffic, &cand, hw, dtype);
                let c = OpCost { time, traffic, tile: Some(cand), limb, fused: Some(true) };
                if best.as_ref().is_none_or(|b| better(&c, b)) {
                    best = Some(c);
                }
            }
        }
    }
    best
}

/// Unfused attention: score GEMM, softmax and value GEMM with the score
/// matrix materialized in HBM.
pub fn naive_attention_cost(a: &AttnShape, hw: &HardwareSpec, dtype: DType) -> OpCost {
    let eb = dtype.bytes();
    let bh = a.batch.max(1) * a.heads.max(1);
    let (q, kv, d) = (a.q_len.max(1), a.kv_len.max(1), a.head_dim.max(1));
    let g = |m, n, k| GemmShape { batch: bh, m, n, k };
    let scores = bh * q * kv;
    let (gemms, softmax) = if a.backward {
        (
            // dV = P^T dO, dP = dO V^T, dQ = dS K, dK = dS^T Q
            vec![g(kv, d, q), g(q, kv, d), g(q, d, kv), g(kv, d, q)],
            PointwiseShape { elems: scores, bytes_per_elem: eb, flops_per_elem: 2 * SOFTMAX_FLOPS, reads: 2, writes: 1 },
        )
    } else {
        (
            vec![g(q, kv, d), g(q, d, kv)],
            PointwiseShape { elems: scores, bytes_per_elem: eb, flops_per_elem: SOFTMAX_FLOPS, reads: 1, writes: 1 },
        )
    };
    let mut time = 0.0;
    let mut traffic = TrafficProfile::default();
    let mut limb = Limb::None;
    let mut worst = -1.0;
    for c in gemms.iter().map(|s| gemm_cost(s, hw, dtype)).chain([pointwise_cost(&softmax, hw)]) {
        time += c.time;
        traffic = traffic.add(&c.traffic);
        if c.time > worst {
            worst = c.time;
            limb = c.limb;
        }
    }
    OpCost { time, traffic, tile: None, limb, fused: Some(false) }
}

pub fn flash_attention_cost(a: &AttnShape, hw: &HardwareSpec, dtype: DType) -> OpCost {
    fused_attention_cost(a, hw, dtype).unwrap_or_else(|| naive_attention_cost(a, hw, dtype))
}

pub fn flash_attention_latency(a: &AttnShape, hw: &HardwareSpec, dtype: DType) -> f64 {
    flash_attention_cost(a, hw, dtype).time
}

/// Cost of one operator. Communication nodes cost nothing here; the
/// network simulator times them.
pub fn op_cost(op: &OpKind, hw: &HardwareSpec, dtype: DType) -> OpCost {
    match op {
        OpKind::Gemm(s) => gemm_cost(s, hw, dtype),
        OpKind::FlashAttention(a) => flash_attention_cost(a, hw, dtype),
        OpKind::Pointwise(p) | OpKind::Embedding(p) => pointwise_cost(p, hw),
        OpKind::Block { duration } => OpCost { time: *duration, limb: Limb::Given, ..OpCost::zero() },
        OpKind::Collective(_) | OpKind::P2p(_) => OpCost::zero(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ShapeKey {
    Gemm(GemmShape),
    Attn(AttnShape),
    Pointwise(PointwiseShape),
}

fn shape_key(op: &OpKind) -> Option<ShapeKey> {
    match op {
        OpKind::Gemm(s) => Some(ShapeKey::Gemm(*s)),
        OpKind::FlashAttention(a) => Some(ShapeKey::Attn(*a)),
        OpKind::Pointwise(p) | OpKind::Embedding(p) => Some(ShapeKey::Pointwise(*p)),
        _ => None,
    }
}

/// Costs every node of a graph. Identical shapes are costed once and the
/// distinct shapes are evaluated in parallel.
pub fn cost_graph(graph: &OperatorGraph, hw: &HardwareSpec, dtype: DType) -> Result<Vec<OpCost>, ConfigError> {
    hw.validate()?;
    let mut keys: Vec<(ShapeKey, &OpKind)> = Vec::new();
    let mut seen: HashMap<ShapeKey, usize> = HashMap::new();
    for n in &graph.nodes {
        if let Some(k) = shape_key(&n.op) {
            seen.entry(k).or_insert_with(|| {
                keys.push((k, &n.op));
                keys.len() - 1
            });
        }
    }
    let computed: Vec<OpCost> = keys.par_iter().map(|(_, op)| op_cost(op, hw, dtype)).collect();
    Ok(graph
        .nodes
        .iter()
        .map(|n| match shape_key(&n.op) {
            Some(k) => computed[seen[&k]],
            None => op_cost(&n.op, hw, dtype),
        })
        .collect())
}

/// Per-node cost table as CSV.
pub fn write_op_costs_csv<W: Write>(graph: &OperatorGraph, costs: &[OpCost], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "node", "name", "op", "rank", "time_s", "flops", "sram_bytes", "l2_bytes", "hbm_bytes",
        "l2_miss_rate", "tile_m", "tile_n", "tile_k", "tiles_per_sm", "waves", "limb", "fused",
    ])?;
    for (n, c) in graph.nodes.iter().zip(costs) {
        if !n.op.is_compute() {
            continue;
        }
        let t = c.tile;
        let opt = |f: fn(&TilingCandidate) -> u64| t.as_ref().map(f).map(|v| v.to_string()).unwrap_or_default();
        wr.write_record([
            n.id.to_string(),
            n.name.clone(),
            n.op.name().to_string(),
            n.ranks.first().map(|r| r.to_string()).unwrap_or_default(),
            format!("{:e}", c.time),
            format!("{:e}", c.traffic.flops),
            format!("{:e}", c.traffic.sram_bytes),
            format!("{:e}", c.traffic.l2_bytes),
            format!("{:e}", c.traffic.hbm_bytes),
            format!("{:.6}", c.traffic.l2_miss_rate),
            opt(|t| t.tile_m),
            opt(|t| t.tile_n),
            opt(|t| t.tile_k),
            opt(|t| t.tiles_per_sm),
            opt(|t| t.waves),
            c.limb.as_str().to_string(),
            c.fused.map(|f| f.to_string()).unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
