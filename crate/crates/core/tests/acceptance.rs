//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Runs as a plain binary (`harness = false`) so the per-criterion lines
//! show up in `cargo test` output.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rapidsim::config::{
    parse_hardware, parse_model, parse_specs, resolve_topology_preset, BaseTopology, DType, DimensionSpec,
    HardwareSpec, Mode, MonteCarloSpec, PerDim, Phase, Recompute, Specs, TopologySpec, ZeroStage,
};
use rapidsim::graph::{
    build_full_graph, AttnShape, CollectiveKind, GemmShape, GraphMeta, OpKind, OperatorGraph, PhaseTag,
    PointwiseShape, EdgeKind,
};
use rapidsim::memmodel::{live_intervals, peak_activation, peak_activation_by_stage, peak_of, static_memory};
use rapidsim::netsim::{collective_time, simulate, SimOptions};
use rapidsim::orchestrator::{self, predict};
use rapidsim::perfmodel::{candidate_cost, fused_attention_cost, naive_attention_cost, op_cost, Limb, TilingCandidate};
use rapidsim::topology::Network;
use rapidsim::trace::{CommInfo, EventKind, RankTrace, TraceEvent};

// Tolerances, pinned.
const TOL_COLLECTIVE: f64 = 1e-3;
const TOL_FAIR_SHARE: f64 = 1e-3;
const TOL_STAGGERED: f64 = 5e-3;
const TOL_MODE_AGREEMENT: f64 = 5e-3;
/// Slack for floating-point summation order when comparing two simulated
/// totals that should be ordered.
const TOL_ORDER: f64 = 1e-12;
const SPEEDUP_SPREAD: f64 = 1.5;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn load(model: &str, hw: &str, run: &str) -> Specs {
    let read = |f: &str| std::fs::read_to_string(fixtures().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
    parse_specs(&read(model), &read(hw), &read(run)).unwrap_or_else(|e| panic!("{model}/{hw}/{run}: {e}"))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn net(dims: &[(BaseTopology, u64)], bw: f64, lat: f64, kingmesh: bool) -> Network {
    let spec = TopologySpec {
        dims: dims
            .iter()
            .map(|&(base, node_count)| DimensionSpec { base, node_count, link_bw: bw, link_latency: lat })
            .collect(),
        kingmesh,
    };
    Network::build(&spec).unwrap()
}

fn event(rank: u64, id: u64, kind: EventKind, duration: f64, comm: Option<CommInfo>, deps: Vec<u64>) -> TraceEvent {
    TraceEvent { id, rank, kind, name: format!("e{rank}.{id}"), duration, comm, deps }
}

#[allow(clippy::too_many_arguments)]
fn p2p(kind: EventKind, rank: u64, id: u64, src: u64, dst: u64, bytes: u64, tag: u64, deps: Vec<u64>) -> TraceEvent {
    let comm = CommInfo { kind: CollectiveKind::SendRecv, bytes, group: vec![src, dst], tag };
    event(rank, id, kind, 0.0, Some(comm), deps)
}

// ---------------------------------------------------------------------------

fn c1_collectives() -> Outcome {
    let start = Instant::now();
    let (s, b) = (1u64 << 30, 100e9);
    let mut worst = 0.0f64;
    for n in [2u64, 4, 8] {
        let nw = net(&[(BaseTopology::Ring, n)], b, 0.0, false);
        let group: Vec<u64> = (0..n).collect();
        let frac = (n - 1) as f64 / n as f64;
        let cases = [
            (CollectiveKind::AllReduce, 2.0 * frac * s as f64 / b),
            (CollectiveKind::AllGather, frac * s as f64 / b),
            (CollectiveKind::ReduceScatter, frac * s as f64 / b),
        ];
        for (kind, want) in cases {
            let got = collective_time(kind, &group, s, &nw).map_err(|e| e.to_string())?;
            let err = rel(got, want);
            worst = worst.max(err);
            check(err <= TOL_COLLECTIVE, || format!("{} n={n}: {got} vs {want}", kind.as_str()))?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 1.0, || format!("took {elapsed:.3} s"))?;
    Ok(format!("max rel err {worst:.2e}, {elapsed:.3} s"))
}

fn c2_fair_share() -> Outcome {
    let (s, b) = (1u64 << 30, 100e9);
    let mut worst = 0.0f64;
    for k in [2u64, 3, 5] {
        let nw = net(&[(BaseTopology::Mesh1d, 2)], b, 0.0, false);
        let sends = (0..k).map(|i| p2p(EventKind::Send, 0, i, 0, 1, s, i, vec![])).collect();
        let recvs = (0..k).map(|i| p2p(EventKind::Recv, 1, i, 0, 1, s, i, vec![])).collect();
        let traces = vec![RankTrace { rank: 0, events: sends }, RankTrace { rank: 1, events: recvs }];
        let t = simulate(&traces, &nw, SimOptions::default()).map_err(|e| e.to_string())?.total_time;
        let want = k as f64 * s as f64 / b;
        worst = worst.max(rel(t, want));
        check(rel(t, want) <= TOL_FAIR_SHARE, || format!("k={k}: {t} vs {want}"))?;
    }

    // Three senders behind a switch share the switch->receiver link.
    // Sizes 3, 2, 1 units arrive at t = 0, 1, 2 (unit = bw x 1 s).
    // By hand: [0,1) A alone -> A has 2 left; [1,2) A,B at 1/2 -> 1.5, 1.5;
    // [2,5) three at 1/3 -> C done at 5, A and B have 0.5; [5,6) halves -> 6.
    let bw = 1e9;
    let nw = net(&[(BaseTopology::Switch, 4)], bw, 0.0, false);
    let unit = bw as u64;
    let flows = [(1u64, 3u64, 0.0), (2, 2, 1.0), (3, 1, 2.0)];
    let mut traces = vec![RankTrace { rank: 0, events: Vec::new() }];
    for (i, &(src, units, delay)) in flows.iter().enumerate() {
        traces[0].events.push(p2p(EventKind::Recv, 0, i as u64, src, 0, units * unit, i as u64, vec![]));
        traces.push(RankTrace {
            rank: src,
            events: vec![
                event(src, 0, EventKind::Compute, delay, None, vec![]),
                p2p(EventKind::Send, src, 1, src, 0, units * unit, i as u64, vec![0]),
            ],
        });
    }
    let r = simulate(&traces, &nw, SimOptions { record_timeline: true, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let end_of = |tag: usize| {
        r.timeline
            .iter()
            .find(|e| e.rank == 0 && e.event == tag as u64)
            .map(|e| e.end)
            .unwrap_or(f64::NAN)
    };
    let want = [6.0, 6.0, 5.0];
    for (i, w) in want.iter().enumerate() {
        let got = end_of(i);
        check(rel(got, *w) <= TOL_STAGGERED, || format!("staggered flow {i}: ends {got}, oracle {w}"))?;
        worst = worst.max(rel(got, *w));
    }
    Ok(format!("k in {{2,3,5}} and staggered oracle, max rel err {worst:.2e}"))
}

fn random_network(rng: &mut ChaCha8Rng) -> Network {
    use BaseTopology::*;
    let bw = rng.random_range(10e9..200e9);
    let lat = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..5e-6) };
    match rng.random_range(0..7) {
        0 => net(&[(Ring, rng.random_range(3..=8))], bw, lat, false),
        1 => net(&[(Mesh1d, rng.random_range(2..=8))], bw, lat, false),
        2 => net(&[(Ring, rng.random_range(2..=4)), (Ring, rng.random_range(2..=4))], bw, lat, false),
        3 => net(&[(FullyConnected, rng.random_range(2..=6))], bw, lat, false),
        4 => net(&[(Switch, rng.random_range(2..=6))], bw, lat, false),
        5 => net(&[(Mesh1d, 3), (Mesh1d, rng.random_range(2..=4))], bw, lat, true),
        _ => net(&[(Switch, rng.random_range(2..=4)), (Ring, rng.random_range(2..=3))], bw, lat, false),
    }
}

/// Random deadlock-free traces: operations are generated in one global
/// order and appended to each participant, so every rank meets shared
/// events in the same order.
fn random_traces(rng: &mut ChaCha8Rng, gpus: u64) -> Vec<RankTrace> {
    let mut traces: Vec<RankTrace> = (0..gpus).map(|rank| RankTrace { rank, events: Vec::new() }).collect();
    let deps = |t: &RankTrace, rng: &mut ChaCha8Rng| -> Vec<u64> {
        let n = t.events.len() as u64;
        match n {
            0 => vec![],
            _ if rng.random_bool(0.7) => vec![n - 1],
            _ => vec![rng.random_range(0..n)],
        }
    };
    let ops = rng.random_range(4..24);
    for tag in 0..ops {
        match rng.random_range(0..3) {
            0 => {
                let r = rng.random_range(0..gpus);
                let d = deps(&traces[r as usize], rng);
                let id = traces[r as usize].events.len() as u64;
                let dur = rng.random_range(1e-5..1e-3);
                traces[r as usize].events.push(event(r, id, EventKind::Compute, dur, None, d));
            }
            1 => {
                let src = rng.random_range(0..gpus);
                let dst = (src + rng.random_range(1..gpus)) % gpus;
                let bytes = rng.random_range(1u64 << 16..1u64 << 26);
                for (r, kind) in [(src, EventKind::Send), (dst, EventKind::Recv)] {
                    let d = deps(&traces[r as usize], rng);
                    let id = traces[r as usize].events.len() as u64;
                    traces[r as usize].events.push(p2p(kind, r, id, src, dst, bytes, tag, d));
                }
            }
            _ => {
                let mut group: Vec<u64> = (0..gpus).filter(|_| rng.random_bool(0.6)).collect();
                if group.len() < 2 {
                    group = (0..gpus).collect();
                }
                let kind = [
                    CollectiveKind::AllReduce,
                    CollectiveKind::AllGather,
                    CollectiveKind::ReduceScatter,
                    CollectiveKind::AllToAll,
                ][rng.random_range(0..4)];
                let bytes = rng.random_range(1u64 << 16..1u64 << 26);
                for &r in &group {
                    let d = deps(&traces[r as usize], rng);
                    let id = traces[r as usize].events.len() as u64;
                    let comm = CommInfo { kind, bytes, group: group.clone(), tag };
                    traces[r as usize].events.push(event(r, id, EventKind::Collective, 0.0, Some(comm), d));
                }
            }
        }
    }
    traces
}

fn c3_faults() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfa17);
    let samples = 600;
    let mut worst = f64::INFINITY;
    for i in 0..samples {
        let nw = random_network(&mut rng);
        let traces = random_traces(&mut rng, nw.num_gpus);
        let opts = SimOptions { overlap_factor: [0.0, 0.5, 1.0][rng.random_range(0..3)], record_timeline: false };
        let base = simulate(&traces, &nw, opts).map_err(|e| format!("sample {i}: {e}"))?.total_time;
        let link = rng.random_range(0..nw.links.len());
        let derate = rng.random_range(0.01..0.99);
        let mut faulted = nw.clone();
        faulted.set_derate(link, derate);
        let t = simulate(&traces, &faulted, opts).map_err(|e| format!("sample {i}: {e}"))?.total_time;
        worst = worst.min(t / base);
        check(t >= base * (1.0 - TOL_ORDER), || {
            format!("sample {i}: faulted {t} < fault-free {base} (link {link}, derate {derate})")
        })?;
    }

    use BaseTopology::*;
    let shapes: Vec<(Vec<(BaseTopology, u64)>, bool)> = vec![
        (vec![(Ring, 8)], false),
        (vec![(Mesh1d, 8)], false),
        (vec![(FullyConnected, 8)], false),
        (vec![(Switch, 8)], false),
        (vec![(Ring, 8), (Ring, 8)], false),
        (vec![(Mesh1d, 8), (Mesh1d, 8)], false),
        (vec![(Ring, 4), (Ring, 4), (Ring, 4)], false),
        (vec![(Ring, 2); 6], false),
        (vec![(Mesh1d, 5), (Mesh1d, 5)], true),
        (vec![(Switch, 4), (Ring, 4)], false),
    ];
    let mut routes = 0u64;
    for (dims, king) in shapes {
        let base = net(&dims, 1e11, 1e-6, king);
        check(base.num_nodes() <= 64 + 16, || "fixture too large".into())?;
        for link in 0..base.links.len() {
            let mut n = base.clone();
            n.kill(link);
            for s in 0..n.num_gpus {
                for d in 0..n.num_gpus {
                    if s == d {
                        continue;
                    }
                    routes += 1;
                    match (n.route(s, d), n.bfs_distance(s, d)) {
                        (Ok(r), Some(h)) => check(r.len() == h, || {
                            format!("{dims:?} link {link} {s}->{d}: route {} hops, BFS {h}", r.len())
                        })?,
                        (Err(_), None) => {}
                        (r, h) => return Err(format!("{dims:?} link {link} {s}->{d}: route {r:?} vs BFS {h:?}")),
                    }
                }
            }
        }
    }
    Ok(format!("{samples} soft-fault samples, min slowdown {worst:.6}; {routes} hard-fault routes match BFS"))
}

fn c4_link_counts() -> Outcome {
    let one = |v| PerDim::One(v);
    let mut cases: Vec<(&str, Vec<u64>)> = Vec::new();
    for n in 2..=8 {
        cases.push(("Ring", vec![n]));
        cases.push(("Mesh", vec![n]));
        cases.push(("FullyConnected", vec![n]));
        cases.push(("Switch", vec![n]));
        for m in 2..=8 {
            cases.push(("Torus2D", vec![n, m]));
            cases.push(("Mesh2D", vec![n, m]));
            cases.push(("KingMesh2D", vec![n, m]));
        }
    }
    for n in [2u64, 3, 4] {
        for m in [2u64, 3, 4] {
            for k in [2u64, 3, 4] {
                cases.push(("Torus3D", vec![n, m, k]));
                cases.push(("Mesh3D", vec![n, m, k]));
            }
        }
    }
    for n in [2u64, 4, 8, 16, 32, 64] {
        cases.push(("HyperCube", vec![n]));
    }
    for (preset, counts) in &cases {
        let spec = resolve_topology_preset(preset, counts, &one(1e11), &one(1e-6)).map_err(|e| e.to_string())?;
        let nw = Network::build(&spec).map_err(|e| e.to_string())?;
        let want = brute_force_links(&spec, &nw);
        let got: BTreeSet<(u64, u64)> = nw.links.iter().map(|l| (l.a, l.b)).collect();
        check(got.len() == nw.links.len(), || format!("{preset} {counts:?}: duplicate links"))?;
        check(got == want, || {
            format!("{preset} {counts:?}: {} links, brute force {}", got.len(), want.len())
        })?;
    }
    Ok(format!("{} preset/size combinations", cases.len()))
}

/// Independent adjacency enumeration over every GPU pair from coordinates.
/// Switch dimensions are checked as a GPU-to-switch star per line.
fn brute_force_links(spec: &TopologySpec, nw: &Network) -> BTreeSet<(u64, u64)> {
    let mut out = BTreeSet::new();
    let g = nw.num_gpus;
    let coords: Vec<Vec<u64>> = (0..g).map(|r| nw.coords(r)).collect();
    for a in 0..g {
        for b in a + 1..g {
            let (ca, cb) = (&coords[a as usize], &coords[b as usize]);
            let differ: Vec<usize> = (0..ca.len()).filter(|&d| ca[d] != cb[d]).collect();
            let adjacent = match differ.as_slice() {
                [d] => {
                    let n = spec.dims[*d].node_count;
                    let delta = ca[*d].abs_diff(cb[*d]);
                    match spec.dims[*d].base {
                        BaseTopology::Ring => delta == 1 || delta == n - 1,
                        BaseTopology::Mesh1d => delta == 1,
                        BaseTopology::FullyConnected => true,
                        BaseTopology::Switch => false,
                    }
                }
                [0, 1] if spec.kingmesh => ca[0].abs_diff(cb[0]) == 1 && ca[1].abs_diff(cb[1]) == 1,
                _ => false,
            };
            if adjacent {
                out.insert((a, b));
            }
        }
    }
    for sw in g..nw.num_nodes() as u64 {
        let members: Vec<u64> = nw.neighbors(sw).iter().map(|&(n, _)| n).collect();
        let d = nw.links[nw.neighbors(sw)[0].1].dim;
        let n = spec.dims[d].node_count;
        let ok = members.len() as u64 == n
            && members.iter().all(|&m| {
                (0..coords[0].len()).all(|k| k == d || coords[m as usize][k] == coords[members[0] as usize][k])
            });
        if ok {
            for m in members {
                out.insert((m.min(sw), m.max(sw)));
            }
        }
    }
    out
}

fn random_dag(rng: &mut ChaCha8Rng, n: usize) -> OperatorGraph {
    let mut g = OperatorGraph::new(GraphMeta { phase: Phase::Train, world_size: 1, description: "random".into() });
    let shape = PointwiseShape { elems: 1, bytes_per_elem: 2, flops_per_elem: 1, reads: 1, writes: 1 };
    for i in 0..n {
        let id = g.add_node(format!("n{i}"), OpKind::Pointwise(shape), vec![0], PhaseTag::Fwd);
        g.nodes[id].output_bytes = rng.random_range(0..1000);
        if rng.random_bool(0.2) {
            g.nodes[id].input_bytes = rng.random_range(1..500);
        }
    }
    for v in 1..n {
        for u in 0..v {
            if rng.random_bool(0.3) {
                g.add_edge(u, v, if rng.random_bool(0.85) { EdgeKind::Data } else { EdgeKind::Control });
            }
        }
    }
    g
}

/// Live bytes at every step of `order`, summed tensor by tensor.
fn brute_force_peak(g: &OperatorGraph, order: &[usize]) -> u64 {
    let mut pos = vec![0; g.len()];
    for (i, &v) in order.iter().enumerate() {
        pos[v] = i;
    }
    let mut peak = 0;
    for step in 0..order.len() {
        let mut live = 0;
        for v in 0..g.len() {
            let n = &g.nodes[v];
            if pos[v] == step {
                live += n.input_bytes;
            }
            let last = g
                .edges
                .iter()
                .filter(|&&(u, _, k)| u == v && k == EdgeKind::Data)
                .map(|&(_, w, _)| pos[w])
                .max()
                .unwrap_or(pos[v])
                .max(pos[v]);
            if pos[v] <= step && step <= last {
                live += n.output_bytes;
            }
        }
        peak = peak.max(live);
    }
    peak
}

fn all_topo_orders(g: &OperatorGraph, cap: usize) -> Vec<Vec<usize>> {
    fn go(g: &OperatorGraph, indeg: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, cap: usize) {
        if out.len() >= cap {
            return;
        }
        if cur.len() == g.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..g.len() {
            if indeg[v] == 0 && !cur.contains(&v) {
                cur.push(v);
                for &(u, w, _) in &g.edges {
                    if u == v {
                        indeg[w] -= 1;
                    }
                }
                go(g, indeg, cur, out, cap);
                for &(u, w, _) in &g.edges {
                    if u == v {
                        indeg[w] += 1;
                    }
                }
                cur.pop();
            }
        }
    }
    let mut indeg = vec![0; g.len()];
    for &(_, w, _) in &g.edges {
        indeg[w] += 1;
    }
    let mut out = Vec::new();
    go(g, &mut indeg, &mut Vec::new(), &mut out, cap);
    out
}

fn tiny_specs(rng: &mut ChaCha8Rng) -> Specs {
    let heads = [4u64, 8, 16][rng.random_range(0..3)];
    let hidden = heads * [32u64, 64][rng.random_range(0..2)];
    let model = format!(
        r#"{{"num_layers":{},"hidden_dim":{hidden},"num_heads":{heads},"ffn_dim":{},"vocab_size":{},
        "seq_len":{},"batch_size":{},"phase":"train","precision":"mixed_bf16"}}"#,
        rng.random_range(1..=4),
        hidden * rng.random_range(2..=4),
        rng.random_range(1..=8) * 1000,
        [128u64, 256, 512, 1024][rng.random_range(0..4)],
        [2u64, 4, 8][rng.random_range(0..3)],
    );
    let (tp, cp) = ([1u64, 2][rng.random_range(0..2)], [1u64, 2][rng.random_range(0..2)]);
    let dp = if tp * cp == 1 { 2 } else { 1 };
    let hw = std::fs::read_to_string(fixtures().join("a100_ring4.json"))
        .unwrap()
        .replace("\"node_counts\": [4]", &format!("\"node_counts\": [{}]", dp * tp * cp));
    let run = format!(r#"{{"parallelism":{{"dp":{dp},"tp":{tp},"cp":{cp},"num_microbatches":1}}}}"#);
    parse_specs(&model, &hw, &run).unwrap()
}

fn c5_memory() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e3);
    let mut graphs = 0;
    let mut orders = 0;
    for _ in 0..400 {
        let n = rng.random_range(1..=12);
        let g = random_dag(&mut rng, n);
        let fixed = g.topo_order().map_err(|e| e.to_string())?;
        let live = peak_activation(&g, 0, Recompute::None).map_err(|e| e.to_string())?;
        let brute = brute_force_peak(&g, &fixed);
        check(live == brute, || format!("{n}-node graph: liveness {live}, brute force {brute}"))?;
        let all = all_topo_orders(&g, 2000);
        for o in &all {
            let lv = peak_of(&live_intervals(&g, o, 0, Recompute::None), o.len());
            let bf = brute_force_peak(&g, o);
            check(lv == bf, || format!("{n}-node graph order {o:?}: liveness {lv}, brute force {bf}"))?;
        }
        orders += all.len();
        graphs += 1;
    }

    let mut layer_graphs = 0;
    for _ in 0..60 {
        let s = tiny_specs(&mut rng);
        let mut peaks = Vec::new();
        for rc in [Recompute::Full, Recompute::Selective, Recompute::None] {
            let par = rapidsim::config::ParallelismConfig { recompute: rc, ..s.parallelism.clone() };
            let g = build_full_graph(&s.model, &par).map_err(|e| e.to_string())?;
            peaks.push(peak_activation_by_stage(&g, &par, rc).map_err(|e| e.to_string())?);
        }
        check(peaks[0] <= peaks[1] && peaks[1] <= peaks[2], || {
            format!("recompute order violated for {}: full/selective/none = {peaks:?}", s.parallelism.id())
        })?;
        layer_graphs += 1;
    }

    let mut zero_fixtures = 0;
    for (model, hw) in [("llama2_7b_train.json", "a100_ring8.json"), ("gpt_small_train.json", "a100_ring8.json")] {
        for (dp, tp, pp) in [(8u64, 1u64, 1u64), (4, 2, 1), (2, 2, 2), (2, 1, 4)] {
            let mut prev = u64::MAX;
            for z in [ZeroStage::None, ZeroStage::Z1, ZeroStage::Z2, ZeroStage::Z3] {
                let par = rapidsim::config::ParallelismConfig {
                    dp,
                    tp,
                    pp,
                    cp: 1,
                    num_microbatches: 1,
                    zero_stage: z,
                    ..Default::default()
                };
                let m = static_memory(&load_model(model), &par, &load_hw(hw));
                check(m.total_bytes <= prev, || format!("{model} dp{dp} tp{tp} pp{pp}: {z:?} grows to {}", m.total_bytes))?;
                prev = m.total_bytes;
            }
            zero_fixtures += 1;
        }
    }
    Ok(format!(
        "{graphs} random graphs ({orders} schedules) exact; {layer_graphs} layer graphs ordered; {zero_fixtures} ZeRO fixtures monotone"
    ))
}

fn load_model(f: &str) -> rapidsim::config::ModelSpec {
    parse_model(&std::fs::read_to_string(fixtures().join(f)).unwrap()).unwrap()
}

fn load_hw(f: &str) -> HardwareSpec {
    parse_hardware(&std::fs::read_to_string(fixtures().join(f)).unwrap()).unwrap().0
}

fn random_op(rng: &mut ChaCha8Rng) -> OpKind {
    let dim = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            1u64 << rng.random_range(0..14)
        } else {
            rng.random_range(1..8192)
        }
    };
    match rng.random_range(0..3) {
        0 => OpKind::Gemm(GemmShape { batch: rng.random_range(1..4), m: dim(rng), n: dim(rng), k: dim(rng) }),
        1 => OpKind::FlashAttention(AttnShape {
            batch: rng.random_range(1..8),
            heads: rng.random_range(1..32),
            q_len: if rng.random_bool(0.3) { 1 } else { rng.random_range(1..8192) },
            kv_len: rng.random_range(1..8192),
            head_dim: [64u64, 128][rng.random_range(0..2)],
            backward: rng.random_bool(0.5),
        }),
        _ => OpKind::Pointwise(PointwiseShape {
            elems: rng.random_range(1..1u64 << 28),
            bytes_per_elem: [2u64, 4][rng.random_range(0..2)],
            flops_per_elem: rng.random_range(0..40),
            reads: rng.random_range(1..4),
            writes: rng.random_range(0..3),
        }),
    }
}

fn c6_compute() -> Outcome {
    let base = load_hw("a100_ring4.json");
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let samples = 1000;
    for i in 0..samples {
        let mut hw = base.clone();
        hw.sram_bw *= rng.random_range(0.5..2.0);
        hw.l2_bw *= rng.random_range(0.5..2.0);
        hw.hbm_bw *= rng.random_range(0.5..2.0);
        hw.l2_capacity = (hw.l2_capacity as f64 * rng.random_range(0.25..2.0)) as u64;
        hw.compute_derate = rng.random_range(0.3..1.0);
        hw.mem_derate = rng.random_range(0.3..1.0);
        let op = random_op(&mut rng);
        let dtype = [DType::Bf16, DType::Fp16, DType::Fp32][rng.random_range(0..3)];
        let knob = rng.random_range(0..8);
        let f = rng.random_range(1.0..4.0);
        let mut up = hw.clone();
        let name = match knob {
            0 => {
                up.peak_flops.values_mut().for_each(|v| *v *= f);
                "peak_flops"
            }
            1 => {
                up.sram_bw *= f;
                "sram_bw"
            }
            2 => {
                up.l2_bw *= f;
                "l2_bw"
            }
            3 => {
                up.hbm_bw *= f;
                "hbm_bw"
            }
            4 => {
                up.l2_capacity = (up.l2_capacity as f64 * f) as u64;
                "l2_capacity"
            }
            5 => {
                up.sram_per_sm = (up.sram_per_sm as f64 * f) as u64;
                "sram_per_sm"
            }
            6 => {
                up.compute_derate = (up.compute_derate * f).min(1.0);
                "compute_derate"
            }
            _ => {
                up.mem_derate = (up.mem_derate * f).min(1.0);
                "mem_derate"
            }
        };
        let (t0, t1) = (op_cost(&op, &hw, dtype).time, op_cost(&op, &up, dtype).time);
        check(t1 <= t0 * (1.0 + TOL_ORDER), || format!("sample {i}: raising {name} x{f:.3} slowed {op:?}: {t0} -> {t1}"))?;
    }

    let mut fa_cases = 0;
    let lens: Vec<u64> = (2..=64).chain((7..=14).map(|p| 1u64 << p)).chain([1000, 3000, 5000]).collect();
    for &s in &lens {
        for d in [64u64, 128] {
            for backward in [false, true] {
                let a = AttnShape { batch: 2, heads: 8, q_len: s, kv_len: s, head_dim: d, backward };
                let fused = fused_attention_cost(&a, &base, DType::Bf16)
                    .ok_or_else(|| format!("no fused tiling for {a:?}"))?
                    .traffic
                    .hbm_bytes;
                let naive = naive_attention_cost(&a, &base, DType::Bf16).traffic.hbm_bytes;
                check(fused < naive, || format!("{a:?}: fused {fused} B >= naive {naive} B"))?;
                fa_cases += 1;
            }
        }
    }

    // Compute-bound fixture: fixed 128x128x32 tiles over an (M x 256) output.
    let mut hw = base.clone();
    hw.l2_bw = 10e12;
    for tps in [1u64, 2] {
        let at = |tiles: u64| {
            let s = GemmShape::new(64 * tiles, 256, 1024);
            let cand = TilingCandidate::new(128, 128, 32, tiles, tps, hw.num_sms);
            candidate_cost(&cand, &s, &hw, DType::Fp16)
        };
        let per_wave = hw.num_sms * tps;
        let one = at(per_wave).time;
        for tiles in per_wave / 2..=3 * per_wave + 2 {
            let c = at(tiles);
            check(c.limb == Limb::Compute, || format!("tiles={tiles}: bound by {}", c.limb.as_str()))?;
            let waves = tiles.div_ceil(per_wave) as f64;
            check(rel(c.time, waves * one) < 1e-9, || format!("tiles={tiles} tps={tps}: {} vs {}", c.time, waves * one))?;
            if tiles > per_wave / 2 {
                let jumped = c.time > at(tiles - 1).time * (1.0 + 1e-9);
                check(jumped == ((tiles - 1) % per_wave == 0), || format!("unexpected step at tiles={tiles} tps={tps}"))?;
            }
        }
    }
    Ok(format!("{samples} knob samples monotone; {fa_cases} attention cases fused < naive; wave steps exact"))
}

fn c7_modes() -> Outcome {
    let s = load("llama2_7b_train.json", "a100_ring4.json", "ddp4.json");
    let f = predict(&s, Mode::Flattened).map_err(|e| e.to_string())?.total_time;
    let h = predict(&s, Mode::Hierarchical).map_err(|e| e.to_string())?.total_time;
    let diff = rel(h, f);
    check(diff <= TOL_MODE_AGREEMENT, || format!("4-rank DDP: flattened {f}, hierarchical {h}, diff {diff:.4}"))?;

    let mut lines = vec![format!("4-rank DDP flattened {f:.6e} s, hierarchical {h:.6e} s, diff {:.4}%", 100.0 * diff)];
    for run in ["dp8.json", "tp2pp2dp2.json"] {
        let s = load("llama2_7b_train.json", "a100_ring8.json", run);
        let wall = |mode: Mode| -> Result<f64, String> {
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let t = Instant::now();
                predict(&s, mode).map_err(|e| e.to_string())?;
                best = best.min(t.elapsed().as_secs_f64());
            }
            Ok(best)
        };
        let (wf, wh) = (wall(Mode::Flattened)?, wall(Mode::Hierarchical)?);
        check(wh < wf, || format!("{run} on 8 ranks: hierarchical {wh:.3} s >= flattened {wf:.3} s"))?;
        lines.push(format!("8-rank {run} wall {wf:.3}s -> {wh:.3}s"));
    }
    Ok(lines.join("; "))
}

fn c8_case_studies() -> Outcome {
    let s = load("llama2_7b_train.json", "a100_torus16.json", "study16.json");
    let mc = MonteCarloSpec { iterations: 200, ..s.run.monte_carlo.clone() };
    let r = orchestrator::fault_monte_carlo(&s, &mc, s.run.rng_seed).map_err(|e| e.to_string())?;
    let d = &r.degradation;
    check(d.max > d.median, || format!("degenerate fault distribution: median {} max {}", d.median, d.max))?;

    let rows80 = orchestrator::sweep(&s);
    let ok80: Vec<_> = rows80.iter().filter(|r| r.feasible).collect();
    let (best, worst) = (ok80.first().ok_or("no feasible config")?, ok80.last().unwrap());
    let spread = worst.total_time.unwrap() / best.total_time.unwrap();
    check(spread >= SPEEDUP_SPREAD, || format!("best/worst spread {spread:.3}"))?;

    let mut s160 = s.clone();
    s160.hardware.hbm_capacity = 160 << 30;
    let rows160 = orchestrator::sweep(&s160);
    let set = |rows: &[orchestrator::SweepRow]| -> BTreeSet<String> {
        rows.iter().filter(|r| r.feasible).map(|r| r.config_id.clone()).collect()
    };
    let (f80, f160) = (set(&rows80), set(&rows160));
    check(f80.is_subset(&f160) && f160.len() > f80.len(), || {
        format!("160 GB feasible set {} does not expand 80 GB set {}", f160.len(), f80.len())
    })?;

    // Decode-heavy inference is bound by HBM bandwidth.
    let inf = load("llama2_7b_infer.json", "a100_torus16.json", "study16.json");
    let rows = orchestrator::whatif(&inf).map_err(|e| e.to_string())?;
    let time = |name: &str| rows.iter().find(|r| r.name == name).and_then(|r| r.total_time);
    let (base, c, dd) = (
        time("a100").ok_or("base infeasible")?,
        time("C-hbm-bw-4x").ok_or("C infeasible")?,
        time("D-throttled").ok_or("D infeasible")?,
    );
    check(c <= dd && dd <= base, || format!("expected C <= D <= Base in time: C {c}, D {dd}, Base {base}"))?;
    let a = time("A-stacked-l2").ok_or("A infeasible")?;
    check(a <= base * (1.0 + TOL_ORDER), || format!("stacked L2 slower: {a} vs {base}"))?;

    Ok(format!(
        "MC median {:.4} max {:.4}; sweep spread {spread:.2}x; feasible {} -> {} at 160 GB; Base {base:.4e} D {dd:.4e} C {c:.4e}",
        d.median,
        d.max,
        f80.len(),
        f160.len()
    ))
}

fn c9_determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_rapidsim");
    let fx = fixtures();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = fx.join("gpt_small_train.json");
    let m_inf = fx.join("llama2_7b_infer.json");
    let hw = fx.join("a100_torus16.json");
    let run = fx.join("study16.json");
    let mut commands = 0;
    let invocations: Vec<(&str, Vec<String>)> = vec![
        ("run", vec!["--timeline".into(), "TL".into(), "--emit-traces".into(), "TR".into(), "--dump-op-costs".into(), "OC".into()]),
        ("sweep", vec![]),
        ("faults", vec!["--iters".into(), "40".into()]),
        ("whatif", vec![]),
        ("dump-graph", vec![]),
        ("dump-topology", vec![]),
        ("validate-config", vec![]),
    ];
    for format in ["csv", "json"] {
        for (cmd, extra) in &invocations {
            let model = if *cmd == "whatif" { &m_inf } else { &m };
            let mut outputs = Vec::new();
            for attempt in 0..2 {
                let dir = tmp.path().join(format!("{cmd}-{format}-{attempt}"));
                std::fs::create_dir_all(&dir).unwrap();
                let mut args: Vec<String> = vec![
                    cmd.to_string(),
                    "--model".into(),
                    model.display().to_string(),
                    "--hw".into(),
                    hw.display().to_string(),
                    "--run".into(),
                    run.display().to_string(),
                    "--seed".into(),
                    "7".into(),
                ];
                match *cmd {
                    "dump-graph" | "dump-topology" => args.extend(["--out".into(), dir.join("dump.txt").display().to_string()]),
                    "validate-config" => {}
                    _ => args.extend([
                        "--out".into(),
                        dir.display().to_string(),
                        "--format".into(),
                        format.into(),
                    ]),
                }
                for a in extra {
                    args.push(match a.as_str() {
                        "TL" => dir.join("timeline.csv").display().to_string(),
                        "TR" => dir.join("traces").display().to_string(),
                        "OC" => dir.join("op_costs.csv").display().to_string(),
                        _ => a.clone(),
                    });
                }
                let o = Command::new(exe).args(&args).output().map_err(|e| e.to_string())?;
                check(o.status.success(), || {
                    format!("{cmd}: exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr))
                })?;
                outputs.push((o.stdout, read_tree(&dir)));
            }
            check(outputs[0].0 == outputs[1].0, || format!("{cmd} ({format}): stdout differs"))?;
            check(!outputs[0].1.is_empty() || *cmd == "validate-config", || format!("{cmd}: no output files"))?;
            check(outputs[0].1 == outputs[1].1, || format!("{cmd} ({format}): output files differ"))?;
            commands += 1;
        }
    }
    Ok(format!("{commands} command runs byte-identical across repeats"))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 collective oracle equivalence", c1_collectives),
        ("2 congestion fair-share", c2_fair_share),
        ("3 fault monotonicity and detours", c3_faults),
        ("4 topology link counts", c4_link_counts),
        ("5 memory model", c5_memory),
        ("6 compute model properties", c6_compute),
        ("7 flattened vs hierarchical", c7_modes),
        ("8 case-study smoke reproduction", c8_case_studies),
        ("9 determinism", c9_determinism),
    ];
    let suite = Instant::now();
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {name}: PASS ({secs:.1} s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {name}: FAIL ({secs:.1} s) {detail}");
            }
        }
    }
    let total = suite.elapsed().as_secs_f64();
    println!("acceptance: {} of 9 passed in {total:.1} s", 9 - failed);
    if failed > 0 || total > 600.0 {
        std::process::exit(1);
    }
}
