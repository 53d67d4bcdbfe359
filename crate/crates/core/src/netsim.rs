//! Flow-level discrete-event network simulator.
//!
//! Ranks execute their traces; compute events run one at a time in program
//! order, communication events start as soon as their dependencies are
//! done. Collectives are expanded into bulk-synchronous stages of
//! point-to-point flows. Transmitting flows share directed channels by
//! max-min fairness, recomputed whenever a flow starts or finishes. Each
//! flow pays its route latency once before it starts transmitting.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::config::BaseTopology;
use crate::graph::CollectiveKind;
use crate::topology::{Network, NodeId, TopologyError};
use crate::trace::{EventKind, RankTrace, TraceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("rank {rank} does not exist in a network of {gpus} GPUs")]
    RankOutOfRange { rank: u64, gpus: u64 },
    #[error("deadlock at t={time:.9}s; waiting: {waiting}")]
    Deadlock { time: f64, waiting: String },
}

/// One point-to-point transfer inside a collective stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowSpec {
    pub src: NodeId,
    pub dst: NodeId,
    pub bytes: f64,
}

/// Stages run one after another; flows inside a stage run concurrently.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Schedule {
    pub stages: Vec<Vec<FlowSpec>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Algo {
    Ring,
    Direct,
}

fn dim_algo(base: BaseTopology) -> Algo {
    match base {
        BaseTopology::Ring | BaseTopology::Mesh1d => Algo::Ring,
        BaseTopology::FullyConnected | BaseTopology::Switch => Algo::Direct,
    }
}

/// Flow stages of a reduce-scatter (equivalently all-gather) over each of
/// `rings`, where every member holds (or ends with) `buf` bytes.
fn rs_like(rings: &[Vec<NodeId>], buf: f64, algo: Algo) -> Vec<Vec<FlowSpec>> {
    let n = rings.first().map_or(0, |r| r.len());
    if n < 2 {
        return Vec::new();
    }
    let chunk = buf / n as f64;
    match algo {
        Algo::Ring => (0..n - 1)
            .map(|_| {
                rings
                    .iter()
                    .flat_map(|r| (0..n).map(move |i| FlowSpec { src: r[i], dst: r[(i + 1) % n], bytes: chunk }))
                    .collect()
            })
            .collect(),
        Algo::Direct => vec![rings.iter().flat_map(|r| all_pairs(r, chunk)).collect()],
    }
}

fn all_pairs(members: &[NodeId], bytes: f64) -> Vec<FlowSpec> {
    let mut v = Vec::with_capacity(members.len() * members.len());
    for &s in members {
        for &d in members {
            if s != d {
                v.push(FlowSpec { src: s, dst: d, bytes });
            }
        }
    }
    v
}

/// Per-dimension factorization of a group, or `None` when the group is
/// not a full Cartesian product of coordinates.
fn factor(group: &[NodeId], net: &Network) -> Option<Vec<(usize, Vec<Vec<NodeId>>)>> {
    let coords: Vec<Vec<u64>> = group.iter().map(|&g| net.coords(g)).collect();
    let nd = net.num_dims();
    let mut values: Vec<Vec<u64>> = vec![Vec::new(); nd];
    for c in &coords {
        for d in 0..nd {
            if !values[d].contains(&c[d]) {
                values[d].push(c[d]);
            }
        }
    }
    let product: usize = values.iter().map(|v| v.len()).product();
    if product != group.len() {
        return None;
    }
    let mut out = Vec::new();
    for d in (0..nd).filter(|&d| values[d].len() > 1) {
        // Sub-groups along d: members sharing every other coordinate,
        // ordered by their coordinate in d.
        let mut subs: BTreeMap<Vec<u64>, Vec<(u64, NodeId)>> = BTreeMap::new();
        for (c, &g) in coords.iter().zip(group) {
            let mut key = c.clone();
            key[d] = 0;
            subs.entry(key).or_default().push((c[d], g));
        }
        let rings = subs
            .into_values()
            .map(|mut v| {
                v.sort_unstable();
                v.into_iter().map(|(_, g)| g).collect()
            })
            .collect();
        out.push((d, rings));
    }
    Some(out)
}

/// Expand a collective into flow stages. Groups that factor along the
/// topology's dimensions use per-dimension hierarchical algorithms (ring
/// for ring/mesh dimensions, direct exchange for fully-connected/switch
/// dimensions); other groups run a flat ring over their sorted members.
pub fn expand_collective(kind: CollectiveKind, group: &[NodeId], bytes: u64, net: &Network) -> Schedule {
    let mut members: Vec<NodeId> = group.to_vec();
    members.sort_unstable();
    members.dedup();
    let s = bytes as f64;
    if members.len() < 2 {
        return Schedule::default();
    }
    match kind {
        CollectiveKind::SendRecv => {
            return Schedule { stages: vec![vec![FlowSpec { src: group[0], dst: group[1], bytes: s }]] };
        }
        CollectiveKind::AllToAll => {
            return Schedule { stages: vec![all_pairs(&members, s / members.len() as f64)] };
        }
        _ => {}
    }
    let dims: Vec<(Algo, Vec<Vec<NodeId>>)> = match factor(&members, net) {
        Some(f) => f.into_iter().map(|(d, r)| (dim_algo(net.spec.dims[d].base), r)).collect(),
        None => vec![(Algo::Ring, vec![members.clone()])],
    };
    // Buffer per member entering each dimension's reduce-scatter.
    let mut bufs = Vec::with_capacity(dims.len());
    let mut b = s;
    for (_, rings) in &dims {
        bufs.push(b);
        b /= rings[0].len() as f64;
    }
    let mut stages = Vec::new();
    let rs = |stages: &mut Vec<Vec<FlowSpec>>| {
        for ((algo, rings), &buf) in dims.iter().zip(&bufs) {
            stages.extend(rs_like(rings, buf, *algo));
        }
    };
    let ag = |stages: &mut Vec<Vec<FlowSpec>>| {
        for ((algo, rings), &buf) in dims.iter().zip(&bufs).rev() {
            stages.extend(rs_like(rings, buf, *algo));
        }
    };
    match kind {
        CollectiveKind::AllReduce => {
            rs(&mut stages);
            ag(&mut stages);
        }
        CollectiveKind::ReduceScatter => rs(&mut stages),
        CollectiveKind::AllGather => ag(&mut stages),
        CollectiveKind::AllToAll | CollectiveKind::SendRecv => unreachable!(),
    }
    Schedule { stages }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Fraction of compute throughput retained while the rank has
    /// communication in flight (0 = fully serialized, 1 = full overlap).
    pub overlap_factor: f64,
    pub record_timeline: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { overlap_factor: 0.0, record_timeline: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RankStats {
    pub rank: u64,
    pub compute: f64,
    pub comm: f64,
    pub idle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkStats {
    pub link: usize,
    pub a: NodeId,
    pub b: NodeId,
    pub dim: usize,
    pub busy_time: f64,
    pub bytes: f64,
    pub max_flows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub rank: u64,
    pub event: u64,
    pub name: String,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub total_time: f64,
    pub ranks: Vec<RankStats>,
    /// Only links that carried traffic.
    pub links: Vec<LinkStats>,
    pub flows: u64,
    pub bytes_requested: f64,
    pub bytes_delivered: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub timeline: Vec<TimelineEntry>,
}

impl SimResult {
    pub fn write_timeline_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["rank", "event", "name", "kind", "start_s", "end_s"])?;
        for e in &self.timeline {
            wr.write_record([
                e.rank.to_string(),
                e.event.to_string(),
                e.name.clone(),
                e.kind.as_str().to_string(),
                format!("{:e}", e.start),
                format!("{:e}", e.end),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Owner {
    Coll(u64),
    P2p(u64),
}

struct Flow {
    channels: Vec<usize>,
    links: Vec<usize>,
    bytes: f64,
    remaining: f64,
    rate: f64,
    tx_start: f64,
    owner: Owner,
    src: u64,
    transmitting: bool,
}

struct CollState {
    group: Vec<u64>,
    arrived: Vec<(u64, u64)>,
    schedule: Option<std::rc::Rc<Schedule>>,
    stage: usize,
    flows_left: usize,
}

#[derive(Default)]
struct P2pState {
    flow_done: bool,
    recv_ready: Option<(u64, u64)>,
    send: Option<(u64, u64)>,
}

struct Running {
    event: u64,
    remaining: f64,
    rate: f64,
}

const REL_EPS: f64 = 1e-12;

struct Sim<'a> {
    net: &'a Network,
    traces: &'a [RankTrace],
    opts: SimOptions,
    now: f64,
    slot: HashMap<u64, usize>,
    missing: Vec<Vec<u32>>,
    dependents: Vec<Vec<Vec<u64>>>,
    done: Vec<Vec<bool>>,
    remaining_events: usize,
    started_at: Vec<Vec<f64>>,
    compute_seq: Vec<Vec<u64>>,
    compute_cursor: Vec<usize>,
    compute_ready: Vec<Vec<bool>>,
    running: Vec<Option<Running>>,
    comm_active: Vec<u32>,
    colls: HashMap<u64, CollState>,
    p2p: HashMap<u64, P2pState>,
    sched_cache: HashMap<(CollectiveKind, Vec<u64>, u64), std::rc::Rc<Schedule>>,
    flows: Vec<Flow>,
    live: Vec<usize>,
    rates_dirty: bool,
    completed: VecDeque<(usize, u64)>,
    stats: Vec<RankStats>,
    link_busy: Vec<f64>,
    link_bytes: Vec<f64>,
    link_max: Vec<u64>,
    bytes_requested: f64,
    bytes_delivered: f64,
    timeline: Vec<TimelineEntry>,
    last_finish: f64,
}

impl<'a> Sim<'a> {
    fn new(traces: &'a [RankTrace], net: &'a Network, opts: SimOptions) -> Result<Self, SimError> {
        let mut slot = HashMap::new();
        for (i, t) in traces.iter().enumerate() {
            if t.rank >= net.num_gpus {
                return Err(SimError::RankOutOfRange { rank: t.rank, gpus: net.num_gpus });
            }
            slot.insert(t.rank, i);
        }
        let mut missing = Vec::new();
        let mut dependents = Vec::new();
        let mut compute_seq = Vec::new();
        let mut colls: HashMap<u64, CollState> = HashMap::new();
        for t in traces {
            let n = t.events.len();
            let mut dep = vec![Vec::new(); n];
            let mut miss = vec![0u32; n];
            let mut seq = Vec::new();
            for e in &t.events {
                miss[e.id as usize] = e.deps.len() as u32;
                for &d in &e.deps {
                    dep[d as usize].push(e.id);
                }
                match e.kind {
                    EventKind::Compute => seq.push(e.id),
                    EventKind::Collective => {
                        let c = e.comm.as_ref().expect("collective carries comm info");
                        for &m in &c.group {
                            if !slot.contains_key(&m) {
                                return Err(TraceError::Inconsistent(format!(
                                    "collective tag {} includes rank {m} with no trace",
                                    c.tag
                                ))
                                .into());
                            }
                        }
                        colls.entry(c.tag).or_insert_with(|| CollState {
                            group: c.group.clone(),
                            arrived: Vec::new(),
                            schedule: None,
                            stage: 0,
                            flows_left: 0,
                        });
                    }
                    _ => {}
                }
            }
            missing.push(miss);
            dependents.push(dep);
            compute_seq.push(seq);
        }
        let nr = traces.len();
        let nl = net.links.len();
        Ok(Sim {
            net,
            traces,
            opts,
            now: 0.0,
            slot,
            done: traces.iter().map(|t| vec![false; t.events.len()]).collect(),
            remaining_events: traces.iter().map(|t| t.events.len()).sum(),
            started_at: traces.iter().map(|t| vec![f64::NAN; t.events.len()]).collect(),
            compute_ready: traces.iter().map(|t| vec![false; t.events.len()]).collect(),
            missing,
            dependents,
            compute_seq,
            compute_cursor: vec![0; nr],
            running: (0..nr).map(|_| None).collect(),
            comm_active: vec![0; nr],
            colls,
            p2p: HashMap::new(),
            sched_cache: HashMap::new(),
            flows: Vec::new(),
            live: Vec::new(),
            rates_dirty: false,
            completed: VecDeque::new(),
            stats: traces.iter().map(|t| RankStats { rank: t.rank, ..Default::default() }).collect(),
            link_busy: vec![0.0; nl],
            link_bytes: vec![0.0; nl],
            link_max: vec![0; nl],
            bytes_requested: 0.0,
            bytes_delivered: 0.0,
            timeline: Vec::new(),
            last_finish: 0.0,
        })
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        for r in 0..self.traces.len() {
            for e in 0..self.traces[r].events.len() {
                if self.missing[r][e] == 0 {
                    self.make_ready(r, e as u64)?;
                }
            }
        }
        loop {
            self.drain()?;
            if self.remaining_events == 0 {
                break;
            }
            if self.rates_dirty {
                self.recompute_rates();
            }
            let dt = self.next_dt();
            if !dt.is_finite() {
                return Err(self.deadlock());
            }
            self.advance(dt)?;
        }
        let total = self.last_finish;
        for s in self.stats.iter_mut() {
            s.idle += (total - (s.compute + s.comm + s.idle)).max(0.0);
        }
        let links = (0..self.net.links.len())
            .filter(|&l| self.link_bytes[l] > 0.0 || self.link_max[l] > 0)
            .map(|l| {
                let k = &self.net.links[l];
                LinkStats {
                    link: l,
                    a: k.a,
                    b: k.b,
                    dim: k.dim,
                    busy_time: self.link_busy[l],
                    bytes: self.link_bytes[l],
                    max_flows: self.link_max[l],
                }
            })
            .collect();
        Ok(SimResult {
            total_time: total,
            ranks: self.stats,
            links,
            flows: self.flows.len() as u64,
            bytes_requested: self.bytes_requested,
            bytes_delivered: self.bytes_delivered,
            timeline: self.timeline,
        })
    }

    fn deadlock(&self) -> SimError {
        let mut waiting = Vec::new();
        for (r, t) in self.traces.iter().enumerate() {
            for e in &t.events {
                if !self.done[r][e.id as usize] {
                    let blockers: Vec<u64> =
                        e.deps.iter().copied().filter(|&d| !self.done[r][d as usize]).collect();
                    let why = if blockers.is_empty() {
                        match e.kind {
                            EventKind::Collective => "peers".to_string(),
                            EventKind::Recv => "sender".to_string(),
                            _ => "program order".to_string(),
                        }
                    } else {
                        format!("events {blockers:?}")
                    };
                    waiting.push(format!("rank {} event {} ({}) on {why}", t.rank, e.id, e.name));
                    break;
                }
            }
        }
        SimError::Deadlock { time: self.now, waiting: waiting.join("; ") }
    }

    fn drain(&mut self) -> Result<(), SimError> {
        while let Some((r, e)) = self.completed.pop_front() {
            self.finish_event(r, e)?;
        }
        Ok(())
    }

    fn finish_event(&mut self, r: usize, e: u64) -> Result<(), SimError> {
        debug_assert!(!self.done[r][e as usize]);
        self.done[r][e as usize] = true;
        self.remaining_events -= 1;
        self.last_finish = self.last_finish.max(self.now);
        if self.opts.record_timeline {
            let ev = &self.traces[r].events[e as usize];
            let start = self.started_at[r][e as usize];
            self.timeline.push(TimelineEntry {
                rank: self.traces[r].rank,
                event: e,
                name: ev.name.clone(),
                kind: ev.kind,
                start: if start.is_nan() { self.now } else { start },
                end: self.now,
            });
        }
        let deps = std::mem::take(&mut self.dependents[r][e as usize]);
        for &d in &deps {
            let m = &mut self.missing[r][d as usize];
            *m -= 1;
            if *m == 0 {
                self.make_ready(r, d)?;
            }
        }
        self.dependents[r][e as usize] = deps;
        Ok(())
    }

    fn mark_start(&mut self, r: usize, e: u64) {
        if self.started_at[r][e as usize].is_nan() {
            self.started_at[r][e as usize] = self.now;
        }
    }

    fn make_ready(&mut self, r: usize, e: u64) -> Result<(), SimError> {
        let ev = &self.traces[r].events[e as usize];
        match ev.kind {
            EventKind::Compute => {
                self.compute_ready[r][e as usize] = true;
                self.try_start_compute(r);
            }
            EventKind::Collective => {
                self.mark_start(r, e);
                let c = ev.comm.as_ref().unwrap();
                let tag = c.tag;
                let st = self.colls.get_mut(&tag).unwrap();
                st.arrived.push((r as u64, e));
                if st.arrived.len() == st.group.len() {
                    let key = (c.kind, st.group.clone(), c.bytes);
                    let sched = match self.sched_cache.get(&key) {
                        Some(s) => s.clone(),
                        None => {
                            let s = std::rc::Rc::new(expand_collective(c.kind, &key.1, c.bytes, self.net));
                            self.sched_cache.insert(key, s.clone());
                            s
                        }
                    };
                    let members: Vec<usize> = st.arrived.iter().map(|&(r, _)| r as usize).collect();
                    st.schedule = Some(sched);
                    for m in members {
                        self.set_comm(m, 1);
                    }
                    self.start_stage(tag)?;
                }
            }
            EventKind::Send => {
                self.mark_start(r, e);
                let c = ev.comm.as_ref().unwrap();
                let (tag, bytes, dst) = (c.tag, c.bytes, c.group[1]);
                self.p2p.entry(tag).or_default().send = Some((r as u64, e));
                self.set_comm(r, 1);
                let src = self.traces[r].rank;
                self.start_flow(src, dst, bytes as f64, Owner::P2p(tag))?;
            }
            EventKind::Recv => {
                self.mark_start(r, e);
                let tag = ev.comm.as_ref().unwrap().tag;
                let st = self.p2p.entry(tag).or_default();
                if st.flow_done {
                    self.completed.push_back((r, e));
                } else {
                    st.recv_ready = Some((r as u64, e));
                }
            }
        }
        Ok(())
    }

    fn set_comm(&mut self, r: usize, delta: i32) {
        self.comm_active[r] = (self.comm_active[r] as i32 + delta) as u32;
        self.update_compute_rate(r);
    }

    fn compute_rate(&self, r: usize) -> f64 {
        if self.comm_active[r] > 0 {
            self.opts.overlap_factor
        } else {
            1.0
        }
    }

    fn update_compute_rate(&mut self, r: usize) {
        let rate = self.compute_rate(r);
        if let Some(run) = self.running[r].as_mut() {
            run.rate = rate;
        }
    }

    fn try_start_compute(&mut self, r: usize) {
        if self.running[r].is_some() {
            return;
        }
        while let Some(&e) = self.compute_seq[r].get(self.compute_cursor[r]) {
            if !self.compute_ready[r][e as usize] {
                return;
            }
            self.compute_cursor[r] += 1;
            self.mark_start(r, e);
            let d = self.traces[r].events[e as usize].duration;
            if d <= 0.0 {
                self.completed.push_back((r, e));
                continue;
            }
            self.running[r] = Some(Running { event: e, remaining: d, rate: self.compute_rate(r) });
            return;
        }
    }

    fn start_flow(&mut self, src: u64, dst: u64, bytes: f64, owner: Owner) -> Result<(), SimError> {
        let route = self.net.route(src, dst)?;
        let latency = route.latency(self.net);
        let f = Flow {
            channels: route.hops.iter().map(|h| h.channel(self.net)).collect(),
            links: route.hops.iter().map(|h| h.link).collect(),
            bytes,
            remaining: bytes,
            rate: 0.0,
            tx_start: self.now + latency,
            owner,
            src,
            transmitting: false,
        };
        self.bytes_requested += bytes;
        let id = self.flows.len();
        self.flows.push(f);
        if latency <= 0.0 {
            self.begin_transmit(id)?;
        } else {
            self.live.push(id);
        }
        Ok(())
    }

    fn begin_transmit(&mut self, id: usize) -> Result<(), SimError> {
        let f = &mut self.flows[id];
        if f.remaining <= 0.0 || f.channels.is_empty() {
            f.remaining = 0.0;
            self.bytes_delivered += f.bytes;
            self.live.retain(|&x| x != id);
            return self.flow_done(id);
        }
        f.transmitting = true;
        if !self.live.contains(&id) {
            self.live.push(id);
        }
        self.rates_dirty = true;
        Ok(())
    }

    fn start_stage(&mut self, tag: u64) -> Result<(), SimError> {
        loop {
            let st = self.colls.get_mut(&tag).unwrap();
            let sched = st.schedule.clone().unwrap();
            if st.stage >= sched.stages.len() {
                let members = std::mem::take(&mut st.arrived);
                for (r, e) in members {
                    self.set_comm(r as usize, -1);
                    self.completed.push_back((r as usize, e));
                }
                return Ok(());
            }
            let flows = &sched.stages[st.stage];
            st.flows_left = flows.len();
            if flows.is_empty() {
                st.stage += 1;
                continue;
            }
            for f in flows.iter() {
                self.start_flow(f.src, f.dst, f.bytes, Owner::Coll(tag))?;
            }
            return Ok(());
        }
    }

    fn flow_done(&mut self, id: usize) -> Result<(), SimError> {
        self.rates_dirty = true;
        match self.flows[id].owner {
            Owner::Coll(tag) => {
                let st = self.colls.get_mut(&tag).unwrap();
                st.flows_left -= 1;
                if st.flows_left == 0 {
                    st.stage += 1;
                    self.start_stage(tag)?;
                }
            }
            Owner::P2p(tag) => {
                let st = self.p2p.get_mut(&tag).unwrap();
                st.flow_done = true;
                let recv = st.recv_ready.take();
                let (sr, se) = st.send.unwrap();
                let sr = self.slot[&sr];
                debug_assert_eq!(self.traces[sr].rank, self.flows[id].src);
                self.set_comm(sr, -1);
                self.completed.push_back((sr, se));
                if let Some((rr, re)) = recv {
                    self.completed.push_back((rr as usize, re));
                }
            }
        }
        Ok(())
    }

    /// Progressive filling over directed channels.
    fn recompute_rates(&mut self) {
        self.rates_dirty = false;
        let tx: Vec<usize> = self.live.iter().copied().filter(|&f| self.flows[f].transmitting).collect();
        let mut cap: BTreeMap<usize, (f64, u32)> = BTreeMap::new();
        for &f in &tx {
            for &c in &self.flows[f].channels {
                let e = cap.entry(c).or_insert((self.net.links[c / 2].effective_bw, 0));
                e.1 += 1;
            }
        }
        let mut per_link: HashMap<usize, u64> = HashMap::new();
        for (&c, &(_, n)) in &cap {
            *per_link.entry(c / 2).or_default() += n as u64;
        }
        for (l, n) in per_link {
            self.link_max[l] = self.link_max[l].max(n);
        }
        let mut frozen = vec![false; tx.len()];
        let mut left = tx.len();
        while left > 0 {
            let (&bc, &(bcap, bn)) = cap
                .iter()
                .filter(|(_, &(_, n))| n > 0)
                .min_by(|a, b| (a.1 .0 / a.1 .1 as f64).total_cmp(&(b.1 .0 / b.1 .1 as f64)))
                .expect("unfrozen flows occupy some channel");
            let share = (bcap / bn as f64).max(0.0);
            for (i, &f) in tx.iter().enumerate() {
                if frozen[i] || !self.flows[f].channels.contains(&bc) {
                    continue;
                }
                frozen[i] = true;
                left -= 1;
                self.flows[f].rate = share;
                for &c in &self.flows[f].channels {
                    let e = cap.get_mut(&c).unwrap();
                    e.0 -= share;
                    e.1 -= 1;
                }
            }
        }
    }

    fn next_dt(&self) -> f64 {
        let mut dt = f64::INFINITY;
        for run in self.running.iter().flatten() {
            if run.rate > 0.0 {
                dt = dt.min(run.remaining / run.rate);
            }
        }
        for &f in &self.live {
            let fl = &self.flows[f];
            if fl.transmitting {
                if fl.rate > 0.0 {
                    dt = dt.min(fl.remaining / fl.rate);
                }
            } else {
                dt = dt.min((fl.tx_start - self.now).max(0.0));
            }
        }
        dt
    }

    fn advance(&mut self, dt: f64) -> Result<(), SimError> {
        let target = self.now + dt;
        let close = |rem: f64, rate: f64| rem / rate <= dt + REL_EPS * target.max(1e-30);
        // Rank accounting for the interval.
        for r in 0..self.traces.len() {
            let computing = self.running[r].as_ref().is_some_and(|x| x.rate > 0.0);
            let s = &mut self.stats[r];
            if computing {
                s.compute += dt;
            } else if self.comm_active[r] > 0 {
                s.comm += dt;
            } else {
                s.idle += dt;
            }
        }
        let mut busy_links: Vec<usize> = Vec::new();
        let mut finished_flows = Vec::new();
        let mut tx_now = Vec::new();
        for &f in &self.live {
            let fl = &mut self.flows[f];
            if fl.transmitting {
                let finished = fl.rate > 0.0 && close(fl.remaining, fl.rate);
                let moved = if finished { fl.remaining } else { fl.rate * dt };
                fl.remaining = if finished { 0.0 } else { (fl.remaining - moved).max(0.0) };
                self.bytes_delivered += moved;
                for &l in &fl.links {
                    self.link_bytes[l] += moved;
                    busy_links.push(l);
                }
                if finished {
                    finished_flows.push(f);
                }
            } else if fl.tx_start <= target + REL_EPS * target.max(1e-30) {
                tx_now.push(f);
            }
        }
        busy_links.sort_unstable();
        busy_links.dedup();
        for l in busy_links {
            self.link_busy[l] += dt;
        }
        let mut finished_compute = Vec::new();
        for r in 0..self.running.len() {
            if let Some(run) = self.running[r].as_mut() {
                if run.rate > 0.0 {
                    if close(run.remaining, run.rate) {
                        finished_compute.push((r, run.event));
                    } else {
                        run.remaining -= run.rate * dt;
                    }
                }
            }
        }
        self.now = target;
        for (r, e) in finished_compute {
            self.running[r] = None;
            self.completed.push_back((r, e));
            self.try_start_compute(r);
        }
        self.live.retain(|f| !finished_flows.contains(f));
        for f in finished_flows {
            self.flow_done(f)?;
        }
        for f in tx_now {
            self.begin_transmit(f)?;
        }
        Ok(())
    }
}

/// Execute traces over a network.
pub fn simulate(traces: &[RankTrace], net: &Network, opts: SimOptions) -> Result<SimResult, SimError> {
    Sim::new(traces, net, opts)?.run()
}

/// Time of a single collective on an otherwise idle network.
pub fn collective_time(kind: CollectiveKind, group: &[u64], bytes: u64, net: &Network) -> Result<f64, SimError> {
    use crate::trace::{CommInfo, TraceEvent};
    let traces: Vec<RankTrace> = group
        .iter()
        .map(|&r| RankTrace {
            rank: r,
            events: vec![TraceEvent {
                id: 0,
                rank: r,
                kind: if kind == CollectiveKind::SendRecv {
                    if r == group[0] {
                        EventKind::Send
                    } else {
                        EventKind::Recv
                    }
                } else {
                    EventKind::Collective
                },
                name: kind.as_str().to_string(),
                duration: 0.0,
                comm: Some(CommInfo { kind, bytes, group: group.to_vec(), tag: 0 }),
                deps: Vec::new(),
            }],
        })
        .collect();
    Ok(simulate(&traces, net, SimOptions::default())?.total_time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DimensionSpec, TopologySpec};
    use crate::trace::{CommInfo, TraceEvent};
    use proptest::prelude::*;

    pub(crate) fn net(dims: &[(BaseTopology, u64)], bw: f64, lat: f64) -> Network {
        let spec = TopologySpec {
            dims: dims
                .iter()
                .map(|&(base, n)| DimensionSpec { base, node_count: n, link_bw: bw, link_latency: lat })
                .collect(),
            kingmesh: false,
        };
        Network::build(&spec).unwrap()
    }

    fn send(rank: u64, id: u64, dst: u64, bytes: u64, tag: u64, deps: Vec<u64>) -> TraceEvent {
        TraceEvent {
            id,
            rank,
            kind: EventKind::Send,
            name: format!("s{tag}"),
            duration: 0.0,
            comm: Some(CommInfo { kind: CollectiveKind::SendRecv, bytes, group: vec![rank, dst], tag }),
            deps,
        }
    }

    fn recv(rank: u64, id: u64, src: u64, bytes: u64, tag: u64) -> TraceEvent {
        TraceEvent {
            id,
            rank,
            kind: EventKind::Recv,
            name: format!("r{tag}"),
            duration: 0.0,
            comm: Some(CommInfo { kind: CollectiveKind::SendRecv, bytes, group: vec![src, rank], tag }),
            deps: vec![],
        }
    }

    fn compute(rank: u64, id: u64, d: f64, deps: Vec<u64>) -> TraceEvent {
        TraceEvent { id, rank, kind: EventKind::Compute, name: format!("c{id}"), duration: d, comm: None, deps }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b
    }

    const B: f64 = 100e9;
    const S: u64 = 1 << 30;

    #[test]
    fn ring_allreduce_matches_formula() {
        for n in [2u64, 4, 8] {
            let nw = net(&[(BaseTopology::Ring, n)], B, 0.0);
            let g: Vec<u64> = (0..n).collect();
            let t = collective_time(CollectiveKind::AllReduce, &g, S, &nw).unwrap();
            let want = 2.0 * (n - 1) as f64 / n as f64 * S as f64 / B;
            assert!(rel(t, want) < 1e-9, "n={n} {t} {want}");
            for k in [CollectiveKind::AllGather, CollectiveKind::ReduceScatter] {
                let t = collective_time(k, &g, S, &nw).unwrap();
                assert!(rel(t, want / 2.0) < 1e-9);
            }
        }
    }

    #[test]
    fn allgather_two_ranks_single_exchange() {
        let nw = net(&[(BaseTopology::Ring, 2)], B, 0.0);
        let s = expand_collective(CollectiveKind::AllGather, &[0, 1], 1000, &nw);
        assert_eq!(s.stages.len(), 1);
        assert_eq!(s.stages[0].len(), 2);
        assert!(s.stages[0].iter().all(|f| f.bytes == 500.0));
    }

    #[test]
    fn singleton_group_is_free() {
        let nw = net(&[(BaseTopology::Ring, 4)], B, 1e-6);
        assert!(expand_collective(CollectiveKind::AllReduce, &[2], 1000, &nw).stages.is_empty());
        assert_eq!(collective_time(CollectiveKind::AllReduce, &[2], 1000, &nw).unwrap(), 0.0);
    }

    #[test]
    fn hierarchical_allreduce_on_torus() {
        let nw = net(&[(BaseTopology::Ring, 4), (BaseTopology::Ring, 4)], B, 0.0);
        let g: Vec<u64> = (0..16).collect();
        let s = expand_collective(CollectiveKind::AllReduce, &g, S, &nw);
        assert_eq!(s.stages.len(), 2 * (3 + 3));
        let t = collective_time(CollectiveKind::AllReduce, &g, S, &nw).unwrap();
        let sb = S as f64 / B;
        let want = 2.0 * (0.75 * sb + 0.75 * sb / 4.0);
        assert!(rel(t, want) < 1e-9);
    }

    #[test]
    fn fully_connected_uses_direct_exchange() {
        let nw = net(&[(BaseTopology::FullyConnected, 4)], B, 0.0);
        let g: Vec<u64> = (0..4).collect();
        let s = expand_collective(CollectiveKind::ReduceScatter, &g, S, &nw);
        assert_eq!(s.stages.len(), 1);
        assert_eq!(s.stages[0].len(), 12);
        let t = collective_time(CollectiveKind::ReduceScatter, &g, S, &nw).unwrap();
        assert!(rel(t, S as f64 / 4.0 / B) < 1e-9);
    }

    #[test]
    fn single_flow_store_and_forward() {
        let nw = net(&[(BaseTopology::Mesh1d, 3)], B, 1e-6);
        let t = collective_time(CollectiveKind::SendRecv, &[0, 2], S, &nw).unwrap();
        assert!(rel(t, 2e-6 + S as f64 / B) < 1e-12);
    }

    #[test]
    fn equal_flows_share_a_link() {
        // k senders on one side of a 2-node mesh push through the same channel.
        for k in [2u64, 3, 5] {
            let nw = net(&[(BaseTopology::Mesh1d, 2)], B, 0.0);
            let sends = (0..k).map(|i| send(0, i, 1, S, i, vec![])).collect();
            let recvs = (0..k).map(|i| recv(1, i, 0, S, i)).collect();
            let tr = vec![RankTrace { rank: 0, events: sends }, RankTrace { rank: 1, events: recvs }];
            let r = simulate(&tr, &nw, SimOptions::default()).unwrap();
            assert!(rel(r.total_time, k as f64 * S as f64 / B) < 1e-9);
            assert_eq!(r.links[0].max_flows, k);
        }
    }

    #[test]
    fn soft_fault_doubles_isolated_flow() {
        let mut nw = net(&[(BaseTopology::Mesh1d, 2)], B, 0.0);
        let base = collective_time(CollectiveKind::SendRecv, &[0, 1], S, &nw).unwrap();
        nw.set_derate(0, 0.5);
        let slow = collective_time(CollectiveKind::SendRecv, &[0, 1], S, &nw).unwrap();
        assert!(rel(slow, 2.0 * base) < 1e-12);
    }

    #[test]
    fn staggered_flows_follow_max_min() {
        // Flows of 3, 2, 1 units arrive at t=0, 1, 2 (unit = B bytes).
        let nw = net(&[(BaseTopology::Mesh1d, 2)], B, 0.0);
        let b = B as u64;
        let tr = vec![
            RankTrace {
                rank: 0,
                events: vec![
                    send(0, 0, 1, 3 * b, 0, vec![]),
                    compute(0, 1, 1.0, vec![]),
                    send(0, 2, 1, 2 * b, 1, vec![1]),
                    compute(0, 3, 1.0, vec![1]),
                    send(0, 4, 1, b, 2, vec![3]),
                ],
            },
            RankTrace { rank: 1, events: vec![recv(1, 0, 0, 3 * b, 0), recv(1, 1, 0, 2 * b, 1), recv(1, 2, 0, b, 2)] },
        ];
        let r = simulate(&tr, &nw, SimOptions { overlap_factor: 1.0, record_timeline: true }).unwrap();
        // Oracle: [0,1) A alone -> A has 2 left. [1,2) A,B at 1/2 -> 1.5, 1.5.
        // [2,..) three at 1/3: C (1) ends at 5, leaving A,B 0.5 each -> both end at 6.
        let end = |n: &str| r.timeline.iter().find(|e| e.name == n && e.rank == 1).unwrap().end;
        assert!(rel(end("r2"), 5.0) < 1e-9);
        assert!(rel(end("r0"), 6.0) < 1e-9);
        assert!(rel(end("r1"), 6.0) < 1e-9);
        assert!((r.bytes_delivered - r.bytes_requested).abs() < 1e-3);
    }

    #[test]
    fn overlap_factor_serializes_compute() {
        let nw = net(&[(BaseTopology::Mesh1d, 2)], B, 0.0);
        let mk = || {
            vec![
                RankTrace { rank: 0, events: vec![send(0, 0, 1, B as u64, 0, vec![]), compute(0, 1, 1.0, vec![])] },
                RankTrace { rank: 1, events: vec![recv(1, 0, 0, B as u64, 0)] },
            ]
        };
        let serial = simulate(&mk(), &nw, SimOptions { overlap_factor: 0.0, record_timeline: false }).unwrap();
        let full = simulate(&mk(), &nw, SimOptions { overlap_factor: 1.0, record_timeline: false }).unwrap();
        assert!(rel(serial.total_time, 2.0) < 1e-12);
        assert!(rel(full.total_time, 1.0) < 1e-12);
        let half = simulate(&mk(), &nw, SimOptions { overlap_factor: 0.5, record_timeline: false }).unwrap();
        assert!(rel(half.total_time, 1.5) < 1e-12);
        for s in &serial.ranks {
            assert!(rel(s.compute + s.comm + s.idle, serial.total_time) < 1e-12);
        }
    }

    #[test]
    fn deadlock_is_reported() {
        let nw = net(&[(BaseTopology::Mesh1d, 2)], B, 0.0);
        let tr = vec![RankTrace { rank: 1, events: vec![recv(1, 0, 0, 10, 7)] }];
        match simulate(&tr, &nw, SimOptions::default()) {
            Err(SimError::Deadlock { waiting, .. }) => assert!(waiting.contains("sender")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unreachable_route_propagates() {
        let mut nw = net(&[(BaseTopology::Mesh1d, 2)], B, 0.0);
        nw.kill(0);
        let e = collective_time(CollectiveKind::SendRecv, &[0, 1], 10, &nw).unwrap_err();
        assert!(matches!(e, SimError::Topology(TopologyError::Unreachable { .. })));
    }

    #[test]
    fn rank_outside_network_rejected() {
        let nw = net(&[(BaseTopology::Ring, 2)], B, 0.0);
        let tr = vec![RankTrace { rank: 5, events: vec![] }];
        assert!(matches!(simulate(&tr, &nw, SimOptions::default()), Err(SimError::RankOutOfRange { .. })));
    }

    #[test]
    fn non_product_group_falls_back_to_flat_ring() {
        let nw = net(&[(BaseTopology::Ring, 4), (BaseTopology::Ring, 4)], B, 0.0);
        let s = expand_collective(CollectiveKind::AllGather, &[0, 3, 6, 9], 4000, &nw);
        assert_eq!(s.stages.len(), 3);
        assert!(s.stages.iter().all(|st| st.len() == 4));
    }

    #[test]
    fn congestion_free_matches_closed_form() {
        // Disjoint sends on a ring: each on its own channel.
        let nw = net(&[(BaseTopology::Ring, 4)], B, 1e-6);
        let tr: Vec<RankTrace> = (0..4)
            .map(|r| RankTrace {
                rank: r,
                events: vec![send(r, 0, (r + 1) % 4, S, r, vec![]), recv(r, 1, (r + 3) % 4, S, (r + 3) % 4)],
            })
            .collect();
        let t = simulate(&tr, &nw, SimOptions::default()).unwrap().total_time;
        assert!(rel(t, 1e-6 + S as f64 / B) < 1e-12);
    }

    #[test]
    fn deterministic() {
        let nw = net(&[(BaseTopology::Ring, 4), (BaseTopology::Ring, 2)], B, 1e-6);
        let g: Vec<u64> = (0..8).collect();
        let a = collective_time(CollectiveKind::AllReduce, &g, S, &nw).unwrap();
        let b = collective_time(CollectiveKind::AllReduce, &g, S, &nw).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    proptest! {
        #[test]
        fn work_is_conserved(bytes in proptest::collection::vec(1u64..1_000_000, 1..6), n in 3u64..6) {
            let nw = net(&[(BaseTopology::Ring, n)], 1e9, 1e-7);
            let k = bytes.len() as u64;
            let sends = (0..k).map(|i| send(0, i, 1 + i % (n - 1), bytes[i as usize], i, vec![])).collect();
            let mut tr = vec![RankTrace { rank: 0, events: sends }];
            for r in 1..n {
                let ev: Vec<TraceEvent> = (0..k)
                    .filter(|i| 1 + i % (n - 1) == r)
                    .enumerate()
                    .map(|(j, i)| recv(r, j as u64, 0, bytes[i as usize], i))
                    .collect();
                tr.push(RankTrace { rank: r, events: ev });
            }
            let res = simulate(&tr, &nw, SimOptions::default()).unwrap();
            prop_assert!((res.bytes_delivered - res.bytes_requested).abs() <= 1e-6 * res.bytes_requested);
            prop_assert!(res.links.iter().all(|l| l.busy_time <= res.total_time * (1.0 + 1e-12)));
        }
    }
}
