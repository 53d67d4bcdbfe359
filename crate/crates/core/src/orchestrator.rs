//! End-to-end runs, parallelism sweeps, fault Monte Carlo and hardware
//! what-if studies.
//!
//! A run is prepared once into a [`Plan`] (graphs built, costed and
//! linearized) and then evaluated against a network. Fault studies reuse
//! the plan across many faulted networks.
//!
//! Inference runs are split into segments: the prefill pass plus one
//! segment per simulated decode step. Unless exact decoding is requested,
//! decode steps are sampled at geometrically spaced KV lengths and the
//! remaining steps are linearly interpolated.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{
    check_sharding, ConfigError, DType, HardwareOverrides, HardwareSpec, Mode, MonteCarloSpec, Phase,
    ParallelismConfig, Recompute, Specs, ZeroStage,
};
use crate::graph::{
    build_endpoint_graph, build_full_graph, build_inference_graph, build_layer_graph_ctx, build_pipeline_graph,
    BlockCtx, BlockDurations, Direction, GraphError, OperatorGraph, PhaseTag,
};
use crate::memmodel::{self, MemoryReport};
use crate::netsim::{simulate, LinkStats, RankStats, SimError, SimOptions, SimResult};
use crate::perfmodel::cost_graph;
use crate::topology::{build_network, Network, TopologyError};
use crate::trace::{linearize, RankTrace, TraceError};

/// Bounds for Monte Carlo derate samples. The top is 1.0 so that a sample
/// at or above it is a no-op fault.
pub const MC_DERATE_MIN: f64 = 0.01;
pub const MC_DERATE_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("configuration does not fit in memory: needs {} bytes, HBM holds {} bytes", .0.total_bytes, .0.total_bytes as i64 + .0.headroom_bytes)]
    Infeasible(Box<MemoryReport>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTime {
    pub name: String,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub total_time: f64,
    pub sim: SimResult,
    pub phases: Vec<PhaseTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub config_id: String,
    pub mode: Mode,
    pub total_time: f64,
    pub sim: SimResult,
    pub memory: MemoryReport,
    pub phases: Vec<PhaseTime>,
}

fn dtype(specs: &Specs) -> DType {
    specs.model.precision.compute_dtype()
}

fn sim_opts(hw: &HardwareSpec, timeline: bool) -> SimOptions {
    SimOptions { overlap_factor: hw.overlap_factor, record_timeline: timeline }
}

/// Network with the run's explicit and generated faults applied.
pub fn faulted_network(specs: &Specs) -> Result<Network, RunError> {
    let base = build_network(&specs.topology)?;
    let seed = specs.faults.generator.as_ref().map_or(specs.run.rng_seed, |g| g.rng_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(base.apply_faults(&specs.faults, &mut rng)?)
}

fn costed_traces(graph: &OperatorGraph, hw: &HardwareSpec, dt: DType) -> Result<Vec<RankTrace>, RunError> {
    let costs: Vec<f64> = cost_graph(graph, hw, dt)?.iter().map(|c| c.time).collect();
    Ok(linearize(graph, &costs)?)
}

/// Decode steps to simulate and the weight each carries in the total.
pub fn decode_samples(decode_len: u64, exact: bool) -> Vec<(u64, f64)> {
    if decode_len == 0 {
        return Vec::new();
    }
    if exact {
        return (0..decode_len).map(|t| (t, 1.0)).collect();
    }
    let mut pts = vec![0u64];
    let mut p = 1u64;
    while p < decode_len - 1 {
        pts.push(p);
        p = 2 * p + 1;
    }
    if *pts.last().unwrap() != decode_len - 1 {
        pts.push(decode_len - 1);
    }
    let mut w = vec![0.0; pts.len()];
    w[0] += 1.0;
    for i in 0..pts.len() - 1 {
        let (a, b) = (pts[i], pts[i + 1]);
        let span = (b - a) as f64;
        for t in a + 1..=b {
            let alpha = (t - a) as f64 / span;
            w[i] += 1.0 - alpha;
            w[i + 1] += alpha;
        }
    }
    pts.into_iter().zip(w).collect()
}

/// Traces of one directional block part on the dimension-0 ranks.
struct Part {
    layer: Vec<RankTrace>,
    emb: Vec<RankTrace>,
    head: Vec<RankTrace>,
}

struct HierSegment {
    decode: Option<(bool, Vec<u64>)>,
    fwd: Vec<(BlockCtx, Part)>,
    bwd: Option<Part>,
}

enum Body {
    Flat(Vec<RankTrace>),
    Hier(Box<HierSegment>),
}

struct Segment {
    label: String,
    weight: f64,
    body: Body,
}

/// A prepared run: graphs built, costed and linearized.
pub struct Plan {
    specs: Specs,
    mode: Mode,
    segments: Vec<Segment>,
}

fn segment_specs(specs: &Specs) -> Vec<(String, f64, bool, Vec<u64>)> {
    match specs.model.phase {
        Phase::Train => vec![("step".to_string(), 1.0, true, Vec::new())],
        Phase::Inference => {
            let mut v = vec![("prefill".to_string(), 1.0, true, Vec::new())];
            for (t, w) in decode_samples(specs.model.decode_len, specs.run.decode_exact) {
                v.push((format!("decode{t}"), w, false, vec![t]));
            }
            v
        }
    }
}

/// Parallelism used for the single-layer graphs in hierarchical mode:
/// ZeRO-3 weight gathers are charged once per block in the pipeline graph.
fn layer_par(par: &ParallelismConfig) -> ParallelismConfig {
    let mut p = par.clone();
    if p.zero_stage == ZeroStage::Z3 {
        p.zero_stage = ZeroStage::Z2;
    }
    p
}

impl Plan {
    pub fn prepare(specs: &Specs, mode: Mode) -> Result<Plan, RunError> {
        let model = &specs.model;
        let par = &specs.parallelism;
        let hw = &specs.hardware;
        let dt = dtype(specs);
        if mode == Mode::Hierarchical {
            par.check_hierarchical(&specs.topology)?;
        }
        let mut segments = Vec::new();
        for (label, weight, prefill, steps) in segment_specs(specs) {
            let body = match mode {
                Mode::Flattened => {
                    let g = match model.phase {
                        Phase::Train => build_full_graph(model, par)?,
                        Phase::Inference => build_inference_graph(model, par, prefill, &steps)?,
                    };
                    Body::Flat(costed_traces(&g, hw, dt)?)
                }
                Mode::Hierarchical => {
                    let lp = layer_par(par);
                    let ctxs: Vec<BlockCtx> = match model.phase {
                        Phase::Train => vec![BlockCtx::train(model, par)],
                        Phase::Inference => {
                            let mut c = Vec::new();
                            if prefill {
                                c.push(BlockCtx::prefill(model, par));
                            }
                            c.extend(steps.iter().map(|&t| BlockCtx::decode(model, par, t)));
                            c
                        }
                    };
                    let part = |ctx: &BlockCtx, dir: Direction| -> Result<Part, RunError> {
                        Ok(Part {
                            layer: costed_traces(&build_layer_graph_ctx(model, &lp, ctx, dir)?, hw, dt)?,
                            emb: costed_traces(&build_endpoint_graph(model, &lp, ctx, false, dir)?, hw, dt)?,
                            head: costed_traces(&build_endpoint_graph(model, &lp, ctx, true, dir)?, hw, dt)?,
                        })
                    };
                    let mut fwd = Vec::new();
                    for ctx in &ctxs {
                        fwd.push((*ctx, part(ctx, Direction::Fwd)?));
                    }
                    let bwd = match model.phase {
                        Phase::Train => Some(part(&ctxs[0], Direction::Bwd)?),
                        Phase::Inference => None,
                    };
                    let decode = match model.phase {
                        Phase::Train => None,
                        Phase::Inference => Some((prefill, steps.clone())),
                    };
                    Body::Hier(Box::new(HierSegment { decode, fwd, bwd }))
                }
            };
            segments.push(Segment { label, weight, body });
        }
        Ok(Plan { specs: specs.clone(), mode, segments })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-rank traces of every flattened segment, labelled.
    pub fn flat_traces(&self) -> Vec<(&str, &[RankTrace])> {
        self.segments
            .iter()
            .filter_map(|s| match &s.body {
                Body::Flat(t) => Some((s.label.as_str(), t.as_slice())),
                Body::Hier(_) => None,
            })
            .collect()
    }

    pub fn evaluate(&self, net: &Network, timeline: bool) -> Result<Evaluation, RunError> {
        let hw = &self.specs.hardware;
        let opts = sim_opts(hw, timeline && self.segments.len() == 1);
        let mut parts: Vec<(f64, SimResult)> = Vec::new();
        let mut phases: Vec<PhaseTime> = Vec::new();
        for seg in &self.segments {
            let sim = match &seg.body {
                Body::Flat(t) => simulate(t, net, opts)?,
                Body::Hier(h) => {
                    let (sim, mut inner) = self.eval_hier(h, net, opts)?;
                    if self.segments.len() == 1 {
                        phases.append(&mut inner);
                    }
                    sim
                }
            };
            parts.push((seg.weight, sim));
        }
        match self.specs.model.phase {
            Phase::Train => phases.push(PhaseTime { name: "step".into(), time: parts[0].1.total_time }),
            Phase::Inference => {
                phases.push(PhaseTime { name: "prefill".into(), time: parts[0].1.total_time });
                let decode: f64 = parts[1..].iter().map(|(w, s)| w * s.total_time).sum();
                phases.push(PhaseTime { name: "decode".into(), time: decode });
            }
        }
        let sim = combine(&parts);
        Ok(Evaluation { total_time: sim.total_time, sim, phases })
    }

    fn eval_hier(&self, h: &HierSegment, net: &Network, opts: SimOptions) -> Result<(SimResult, Vec<PhaseTime>), RunError> {
        let specs = &self.specs;
        let quiet = SimOptions { record_timeline: false, ..opts };
        let time = |t: &[RankTrace]| -> Result<f64, RunError> { Ok(simulate(t, net, quiet)?.total_time) };
        let mut fwd = HashMap::new();
        let mut phases = Vec::new();
        for (ctx, p) in &h.fwd {
            let t = (time(&p.layer)?, time(&p.emb)?, time(&p.head)?);
            fwd.insert(ctx_key(ctx), t);
            push_parts(&mut phases, ctx.tag.as_str(), t);
        }
        let bwd = match &h.bwd {
            Some(p) => {
                let t = (time(&p.layer)?, time(&p.emb)?, time(&p.head)?);
                push_parts(&mut phases, "bwd", t);
                Some(t)
            }
            None => None,
        };
        let durations = HierDurations {
            per_stage: specs.model.num_layers / specs.parallelism.pp,
            last: specs.parallelism.pp - 1,
            fwd,
            bwd,
        };
        let decode = h.decode.as_ref().map(|(p, s)| (*p, s.as_slice()));
        let g = build_pipeline_graph(&specs.model, &specs.parallelism, &durations, decode)?;
        let traces = costed_traces(&g, &specs.hardware, dtype(specs))?;
        let sim = simulate(&traces, net, opts)?;
        phases.push(PhaseTime { name: "pipeline".into(), time: sim.total_time });
        Ok((sim, phases))
    }
}

fn push_parts(phases: &mut Vec<PhaseTime>, tag: &str, (layer, emb, head): PartTimes) {
    for (part, time) in [("layer", layer), ("embed", emb), ("head", head)] {
        phases.push(PhaseTime { name: format!("{part}_{tag}"), time });
    }
}

type CtxKey = (u64, u64, u64, PhaseTag);
/// Layer, embedding and head times of one block part.
type PartTimes = (f64, f64, f64);

fn ctx_key(c: &BlockCtx) -> CtxKey {
    (c.batch, c.q_len, c.kv_len, c.tag)
}

struct HierDurations {
    per_stage: u64,
    last: u64,
    fwd: HashMap<CtxKey, PartTimes>,
    bwd: Option<PartTimes>,
}

impl HierDurations {
    fn compose(&self, stage: u64, (layer, emb, head): PartTimes) -> f64 {
        let mut t = self.per_stage as f64 * layer;
        if stage == 0 {
            t += emb;
        }
        if stage == self.last {
            t += head;
        }
        t
    }
}

impl BlockDurations for HierDurations {
    fn fwd(&self, stage: u64, ctx: &BlockCtx) -> f64 {
        self.compose(stage, self.fwd[&ctx_key(ctx)])
    }

    fn bwd(&self, stage: u64) -> f64 {
        self.compose(stage, self.bwd.expect("backward durations in training"))
    }
}

/// Weighted sum of segment results.
fn combine(parts: &[(f64, SimResult)]) -> SimResult {
    if let [(w, s)] = parts {
        if *w == 1.0 {
            return s.clone();
        }
    }
    let mut ranks: BTreeMap<u64, RankStats> = BTreeMap::new();
    let mut links: BTreeMap<usize, LinkStats> = BTreeMap::new();
    let mut out = SimResult {
        total_time: 0.0,
        ranks: Vec::new(),
        links: Vec::new(),
        flows: 0,
        bytes_requested: 0.0,
        bytes_delivered: 0.0,
        timeline: Vec::new(),
    };
    for (w, s) in parts {
        out.total_time += w * s.total_time;
        out.flows += s.flows;
        out.bytes_requested += w * s.bytes_requested;
        out.bytes_delivered += w * s.bytes_delivered;
        for r in &s.ranks {
            let e = ranks.entry(r.rank).or_insert(RankStats { rank: r.rank, ..Default::default() });
            e.compute += w * r.compute;
            e.comm += w * r.comm;
            e.idle += w * r.idle;
        }
        for l in &s.links {
            let e = links.entry(l.link).or_insert(LinkStats { busy_time: 0.0, bytes: 0.0, max_flows: 0, ..*l });
            e.busy_time += w * l.busy_time;
            e.bytes += w * l.bytes;
            e.max_flows = e.max_flows.max(l.max_flows);
        }
    }
    out.ranks = ranks.into_values().collect();
    out.links = links.into_values().collect();
    out
}

/// Graph used for activation liveness: the full training step, or the
/// prefill plus first decode step for inference.
pub fn memory_graph(specs: &Specs) -> Result<OperatorGraph, GraphError> {
    match specs.model.phase {
        Phase::Train => build_full_graph(&specs.model, &specs.parallelism),
        Phase::Inference => {
            let steps: Vec<u64> = if specs.model.decode_len > 0 { vec![0] } else { vec![] };
            build_inference_graph(&specs.model, &specs.parallelism, true, &steps)
        }
    }
}

pub fn memory_report(specs: &Specs) -> Result<MemoryReport, RunError> {
    let g = memory_graph(specs)?;
    Ok(memmodel::is_feasible(&specs.model, &specs.parallelism, &specs.hardware, &g)?)
}

/// Predicted time without the memory gate.
pub fn predict(specs: &Specs, mode: Mode) -> Result<Evaluation, RunError> {
    let net = faulted_network(specs)?;
    Plan::prepare(specs, mode)?.evaluate(&net, false)
}

fn run_mode(specs: &Specs, mode: Mode, timeline: bool) -> Result<RunResult, RunError> {
    let memory = memory_report(specs)?;
    if !memory.feasible {
        return Err(RunError::Infeasible(Box::new(memory)));
    }
    let net = faulted_network(specs)?;
    let ev = Plan::prepare(specs, mode)?.evaluate(&net, timeline)?;
    Ok(RunResult {
        config_id: specs.parallelism.id(),
        mode,
        total_time: ev.total_time,
        sim: ev.sim,
        memory,
        phases: ev.phases,
    })
}

pub fn run_flattened(specs: &Specs) -> Result<RunResult, RunError> {
    run_mode(specs, Mode::Flattened, false)
}

pub fn run_hierarchical(specs: &Specs) -> Result<RunResult, RunError> {
    run_mode(specs, Mode::Hierarchical, false)
}

/// Single run in the mode named by the run document.
pub fn run(specs: &Specs, timeline: bool) -> Result<RunResult, RunError> {
    run_mode(specs, specs.run.mode, timeline)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub config_id: String,
    pub dp: u64,
    pub tp: u64,
    pub pp: u64,
    pub cp: u64,
    pub num_microbatches: u64,
    pub zero_stage: ZeroStage,
    pub recompute: Recompute,
    pub feasible: bool,
    pub reason: String,
    pub total_time: Option<f64>,
    pub memory_bytes: Option<u64>,
}

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Every parallel mapping named by the sweep grid whose degrees multiply
/// to the GPU count.
pub fn sweep_candidates(specs: &Specs) -> Vec<ParallelismConfig> {
    let n = specs.topology.num_gpus();
    let g = &specs.run.sweep;
    let base = &specs.parallelism;
    let deg = |v: &Option<Vec<u64>>| v.clone().unwrap_or_else(|| divisors(n));
    let mbs = g.num_microbatches.clone().unwrap_or_else(|| vec![base.num_microbatches]);
    let zs = g.zero_stage.clone().unwrap_or_else(|| vec![base.zero_stage]);
    let rcs = g.recompute.clone().unwrap_or_else(|| vec![base.recompute]);
    let mut out = Vec::new();
    for &dp in &deg(&g.dp) {
        for &tp in &deg(&g.tp) {
            for &pp in &deg(&g.pp) {
                for &cp in &deg(&g.cp) {
                    if dp * tp * pp * cp != n {
                        continue;
                    }
                    for &m in &mbs {
                        for &z in &zs {
                            for &r in &rcs {
                                out.push(ParallelismConfig {
                                    dp,
                                    tp,
                                    pp,
                                    cp,
                                    num_microbatches: m,
                                    zero_stage: z,
                                    recompute: r,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn sweep_one(specs: &Specs, par: ParallelismConfig) -> SweepRow {
    let mut row = SweepRow {
        config_id: par.id(),
        dp: par.dp,
        tp: par.tp,
        pp: par.pp,
        cp: par.cp,
        num_microbatches: par.num_microbatches,
        zero_stage: par.zero_stage,
        recompute: par.recompute,
        feasible: false,
        reason: String::new(),
        total_time: None,
        memory_bytes: None,
    };
    if let Err(e) = check_sharding(&specs.model, &par) {
        row.reason = e.to_string();
        return row;
    }
    if specs.run.mode == Mode::Hierarchical {
        if let Err(e) = par.check_hierarchical(&specs.topology) {
            row.reason = e.to_string();
            return row;
        }
    }
    let s = Specs { parallelism: par, ..specs.clone() };
    match run_mode(&s, specs.run.mode, false) {
        Ok(r) => {
            row.feasible = true;
            row.total_time = Some(r.total_time);
            row.memory_bytes = Some(r.memory.total_bytes);
        }
        Err(RunError::Infeasible(m)) => {
            row.memory_bytes = Some(m.total_bytes);
            row.reason = format!(
                "memory: needs {} bytes, HBM holds {}",
                m.total_bytes,
                s.hardware.hbm_capacity
            );
        }
        Err(e) => row.reason = format!("simulation: {e}"),
    }
    row
}

/// Evaluate every candidate. Feasible rows come first, fastest first;
/// pruned rows follow in candidate order.
pub fn sweep(specs: &Specs) -> Vec<SweepRow> {
    let cands = sweep_candidates(specs);
    let rows: Vec<SweepRow> = cands.into_par_iter().map(|p| sweep_one(specs, p)).collect();
    let (mut ok, bad): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.feasible);
    ok.sort_by(|a, b| {
        a.total_time
            .unwrap()
            .total_cmp(&b.total_time.unwrap())
            .then_with(|| a.config_id.cmp(&b.config_id))
    });
    ok.extend(bad);
    ok
}

// ---------------------------------------------------------------------------
// Fault Monte Carlo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultSample {
    pub iteration: u64,
    pub link: usize,
    pub a: u64,
    pub b: u64,
    pub derate: f64,
    pub total_time: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution1 {
    pub min: f64,
    pub p10: f64,
    pub median: f64,
    pub mean: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub config_id: String,
    pub baseline_time: f64,
    pub samples: Vec<FaultSample>,
    pub degradation: Distribution1,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn summarize(values: &[f64]) -> Distribution1 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Distribution1 {
        min: v[0],
        p10: percentile(&v, 0.10),
        median: percentile(&v, 0.5),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p90: percentile(&v, 0.90),
        p99: percentile(&v, 0.99),
        max: v[v.len() - 1],
    }
}

/// Single-link soft faults sampled per iteration.
pub fn sample_faults(net: &Network, mc: &MonteCarloSpec, seed: u64) -> Result<Vec<(usize, f64)>, RunError> {
    if mc.iterations < 1 {
        return Err(ConfigError::invalid("monte_carlo iterations >= 1", "got 0").into());
    }
    let usable: Vec<usize> = (0..net.links.len()).filter(|&l| net.links[l].usable()).collect();
    let normal = Normal::new(mc.derate_mean, mc.derate_std.max(0.0))
        .map_err(|e| ConfigError::invalid("monte_carlo derate distribution", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..mc.iterations)
        .map(|_| {
            let link = *usable.choose(&mut rng).expect("network has usable links");
            (link, normal.sample(&mut rng).clamp(MC_DERATE_MIN, MC_DERATE_MAX))
        })
        .collect())
}

pub fn fault_monte_carlo(specs: &Specs, mc: &MonteCarloSpec, seed: u64) -> Result<MonteCarloResult, RunError> {
    let net = faulted_network(specs)?;
    let draws = sample_faults(&net, mc, seed)?;
    let plan = Plan::prepare(specs, specs.run.mode)?;
    let baseline = plan.evaluate(&net, false)?.total_time;
    let samples: Vec<FaultSample> = draws
        .par_iter()
        .enumerate()
        .map(|(i, &(link, d))| {
            let mut n = net.clone();
            let l = &n.links[link];
            let current = l.effective_bw / l.nominal_bw;
            let (a, b) = (l.a, l.b);
            n.set_derate(link, current * d);
            let t = plan.evaluate(&n, false)?.total_time;
            Ok(FaultSample { iteration: i as u64, link, a, b, derate: d, total_time: t, ratio: t / baseline })
        })
        .collect::<Result<_, RunError>>()?;
    let ratios: Vec<f64> = samples.iter().map(|s| s.ratio).collect();
    Ok(MonteCarloResult {
        config_id: specs.parallelism.id(),
        baseline_time: baseline,
        degradation: summarize(&ratios),
        samples,
    })
}

// ---------------------------------------------------------------------------
// Hardware what-if
// ---------------------------------------------------------------------------

pub fn hardware_variant(base: &HardwareSpec, o: &HardwareOverrides) -> Result<HardwareSpec, ConfigError> {
    let mut hw = base.clone();
    hw.name = o.name.clone();
    let scale_u = |v: u64, s: f64| (v as f64 * s).round() as u64;
    if let Some(s) = o.peak_flops_scale {
        for v in hw.peak_flops.values_mut() {
            *v *= s;
        }
    }
    if let Some(s) = o.sram_per_sm_scale {
        hw.sram_per_sm = scale_u(hw.sram_per_sm, s);
    }
    if let Some(s) = o.sram_bw_scale {
        hw.sram_bw *= s;
    }
    if let Some(s) = o.l2_capacity_scale {
        hw.l2_capacity = scale_u(hw.l2_capacity, s);
    }
    if let Some(s) = o.l2_bw_scale {
        hw.l2_bw *= s;
    }
    if let Some(c) = o.hbm_capacity {
        hw.hbm_capacity = c;
    }
    if let Some(s) = o.hbm_bw_scale {
        hw.hbm_bw *= s;
    }
    if let Some(t) = o.hbm_bw_throttle {
        hw.hbm_bw *= t;
    }
    hw.validate()?;
    Ok(hw)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhatIfRow {
    pub name: String,
    pub feasible: bool,
    pub total_time: Option<f64>,
    pub memory_bytes: u64,
    pub speedup: Option<f64>,
    pub reason: String,
}

/// Base hardware followed by each override of the run document.
pub fn whatif(specs: &Specs) -> Result<Vec<WhatIfRow>, RunError> {
    let mut variants = vec![specs.hardware.clone()];
    for o in &specs.run.whatif {
        variants.push(hardware_variant(&specs.hardware, o)?);
    }
    let mut rows: Vec<WhatIfRow> = variants
        .into_par_iter()
        .map(|hw| {
            let s = Specs { hardware: hw.clone(), ..specs.clone() };
            match run(&s, false) {
                Ok(r) => Ok(WhatIfRow {
                    name: hw.name,
                    feasible: true,
                    total_time: Some(r.total_time),
                    memory_bytes: r.memory.total_bytes,
                    speedup: None,
                    reason: String::new(),
                }),
                Err(RunError::Infeasible(m)) => Ok(WhatIfRow {
                    name: hw.name,
                    feasible: false,
                    total_time: None,
                    memory_bytes: m.total_bytes,
                    speedup: None,
                    reason: "memory".into(),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, RunError>>()?;
    if let Some(base) = rows[0].total_time {
        for r in &mut rows {
            r.speedup = r.total_time.map(|t| base / t);
        }
    }
    Ok(rows)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::parse_specs;

    pub(crate) fn hw_doc(topo: &str, hbm: u64) -> String {
        format!(
            r#"{{"name":"a100","peak_flops":{{"fp16":312e12}},"num_sms":108,"sram_per_sm":196608,
            "sram_bw":19e12,"l2_capacity":41943040,"l2_bw":5e12,"hbm_capacity":{hbm},"hbm_bw":2.0e12,
            "topology":{topo}}}"#
        )
    }

    pub(crate) fn small_model(phase: &str) -> String {
        format!(
            r#"{{"num_layers":4,"hidden_dim":1024,"num_heads":16,"ffn_dim":4096,"vocab_size":32000,
            "seq_len":1024,"batch_size":8,"phase":"{phase}","precision":"mixed_bf16",
            "prefill_len":512,"decode_len":64}}"#
        )
    }

    fn ring(n: u64) -> String {
        format!(r#"{{"preset":"Ring","node_counts":[{n}],"link_bw":100e9,"link_latency":1e-6}}"#)
    }

    pub(crate) fn specs(model: &str, topo: &str, par: &str) -> Specs {
        parse_specs(model, &hw_doc(topo, 80 << 30), &format!(r#"{{"parallelism":{par}}}"#)).unwrap()
    }

    fn single_gpu_topo() -> String {
        // Two-node fabric; the run uses one rank on it.
        ring(2)
    }

    #[test]
    fn decode_sample_weights_sum_to_steps() {
        for d in [1u64, 2, 3, 10, 64, 1000] {
            let s = decode_samples(d, false);
            let total: f64 = s.iter().map(|x| x.1).sum();
            assert!((total - d as f64).abs() < 1e-9, "d={d}");
            assert_eq!(s.last().unwrap().0, d - 1);
            assert!(s.len() as f64 <= 2.0 + (d as f64).log2().ceil());
        }
        assert_eq!(decode_samples(5, true).len(), 5);
        assert!(decode_samples(0, false).is_empty());
    }

    #[test]
    fn single_gpu_inference_is_sum_of_compute() {
        let mut s = specs(&small_model("inference"), &single_gpu_topo(), r#"{"dp":2}"#);
        s.parallelism.dp = 1;
        let net = build_network(&s.topology).unwrap();
        let g = build_inference_graph(&s.model, &s.parallelism, true, &[]).unwrap();
        let costs = cost_graph(&g, &s.hardware, DType::Bf16).unwrap();
        let want: f64 = costs.iter().map(|c| c.time).sum();
        let plan = Plan::prepare(&s, Mode::Flattened).unwrap();
        let got = simulate(plan.flat_traces()[0].1, &net, SimOptions::default()).unwrap().total_time;
        assert!((got - want).abs() / want < 1e-9);
    }

    #[test]
    fn ddp_flattened_bounded_by_compute_and_deterministic() {
        let s = specs(&small_model("train"), &ring(4), r#"{"dp":4,"num_microbatches":2}"#);
        let a = run_flattened(&s).unwrap();
        let b = run_flattened(&s).unwrap();
        assert_eq!(a, b);
        let max_compute = a.sim.ranks.iter().map(|r| r.compute).fold(0.0, f64::max);
        assert!(a.total_time >= max_compute);
        assert!(a.sim.ranks.iter().all(|r| r.comm > 0.0));
    }

    #[test]
    fn flattened_and_hierarchical_agree_on_ddp() {
        let s = specs(&small_model("train"), &ring(4), r#"{"dp":4,"num_microbatches":2}"#);
        let f = run_flattened(&s).unwrap().total_time;
        let h = run_hierarchical(&s).unwrap().total_time;
        assert!((f - h).abs() / f < 0.005, "{f} {h}");
    }

    #[test]
    fn hierarchical_degenerate_composition() {
        let s = specs(&small_model("train"), &ring(2), r#"{"tp":2}"#);
        let r = run_hierarchical(&s).unwrap();
        let get = |n: &str| r.phases.iter().find(|p| p.name == n).unwrap().time;
        let blocks = 4.0 * (get("layer_fwd") + get("layer_bwd"))
            + get("embed_fwd")
            + get("embed_bwd")
            + get("head_fwd")
            + get("head_bwd");
        assert!(r.total_time > blocks);
        // The optimizer step is the only addition with pp = dp = 1.
        assert!(r.total_time < blocks * 1.1, "{} {blocks}", r.total_time);
    }

    #[test]
    fn hierarchical_rejects_outer_tp() {
        let topo = r#"{"preset":"Torus2D","node_counts":[2,4],"link_bw":100e9,"link_latency":1e-6}"#;
        let s = specs(&small_model("train"), topo, r#"{"tp":4,"dp":2}"#);
        let e = run_hierarchical(&s).unwrap_err();
        assert!(e.to_string().contains("flattened"), "{e}");
    }

    #[test]
    fn inference_pipeline_runs_in_both_modes() {
        let s = specs(&small_model("inference"), &ring(4), r#"{"tp":2,"pp":2,"num_microbatches":2}"#);
        let f = run_flattened(&s).unwrap();
        let h = run_hierarchical(&s).unwrap();
        assert!(f.total_time > 0.0 && h.total_time > 0.0);
        assert_eq!(f.phases.len(), 2);
        assert!((f.total_time - h.total_time).abs() / f.total_time < 0.05);
    }

    #[test]
    fn infeasible_run_reports_memory() {
        let mut s = specs(&small_model("train"), &ring(4), r#"{"dp":4}"#);
        s.hardware.hbm_capacity = s.hardware.l2_capacity + 1;
        assert!(matches!(run(&s, false), Err(RunError::Infeasible(_))));
    }

    #[test]
    fn sweep_covers_every_candidate() {
        let mut s = specs(&small_model("train"), &ring(4), r#"{"dp":4}"#);
        s.run.sweep.num_microbatches = Some(vec![1, 2]);
        let cands = sweep_candidates(&s);
        assert!(cands.iter().all(|p| p.dp * p.tp * p.pp * p.cp == 4));
        let rows = sweep(&s);
        assert_eq!(rows.len(), cands.len());
        let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.feasible).collect();
        assert!(!ok.is_empty());
        let best = ok[0].total_time.unwrap();
        assert!(ok.iter().all(|r| r.total_time.unwrap() >= best));
        assert!(rows.iter().filter(|r| !r.feasible).all(|r| !r.reason.is_empty()));
    }

    #[test]
    fn monte_carlo_ratios_at_least_one_and_reproducible() {
        let s = specs(&small_model("train"), &ring(4), r#"{"dp":4}"#);
        let mc = MonteCarloSpec { iterations: 12, derate_mean: 0.5, derate_std: 0.1 };
        let a = fault_monte_carlo(&s, &mc, 7).unwrap();
        let b = fault_monte_carlo(&s, &mc, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|x| x.ratio >= 1.0));
        assert!(a.degradation.max > 1.0);
    }

    #[test]
    fn clamped_unit_derate_is_noop() {
        let s = specs(&small_model("train"), &ring(4), r#"{"dp":4}"#);
        let mc = MonteCarloSpec { iterations: 3, derate_mean: 5.0, derate_std: 0.0 };
        let r = fault_monte_carlo(&s, &mc, 1).unwrap();
        assert!(r.samples.iter().all(|x| x.derate == 1.0 && x.ratio == 1.0));
    }

    #[test]
    fn zero_iterations_rejected() {
        let s = specs(&small_model("train"), &ring(4), r#"{"dp":4}"#);
        let mc = MonteCarloSpec { iterations: 0, derate_mean: 0.5, derate_std: 0.1 };
        assert!(matches!(fault_monte_carlo(&s, &mc, 1), Err(RunError::Config(_))));
    }

    #[test]
    fn hardware_variant_overrides() {
        let s = specs(&small_model("train"), &ring(4), r#"{"dp":4}"#);
        let o = HardwareOverrides { name: "c".into(), hbm_bw_scale: Some(2.0), ..Default::default() };
        let hw = hardware_variant(&s.hardware, &o).unwrap();
        assert_eq!(hw.hbm_bw, 4e12);
        let o = HardwareOverrides { name: "bad".into(), hbm_bw_scale: Some(10.0), ..Default::default() };
        assert!(hardware_variant(&s.hardware, &o).is_err());
    }
}
