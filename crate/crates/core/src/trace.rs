//! Per-rank execution traces.
//!
//! A trace is the ordered list of compute and communication events a rank
//! executes. Dependencies are completion dependencies on earlier events of
//! the same rank; graph edges that cross ranks without a shared
//! communication node are lowered to explicit send/recv pairs.
//!
//! Text form (`.trace`): a `rapidsim-trace v1` header followed by one
//! tab-separated event per line:
//!
//! ```text
//! rank  id  kind  duration  collective  bytes  group  tag  deps  name
//! ```
//!
//! `kind` is one of `compute`, `collective`, `send`, `recv`. For compute
//! events the four communication fields are `-`. `group` and `deps` are
//! comma-separated (`-` when empty). For send/recv the group is
//! `src,dst`. `name` runs to the end of the line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{CollectiveKind, EdgeKind, GraphError, NodeId, OpKind, OperatorGraph};

pub const TRACE_HEADER: &str = "rapidsim-trace v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {0} ({1}) has no valid cost")]
    Uncosted(NodeId, String),
    #[error("edge {0} -> {1} references a node with no ranks")]
    Dangling(NodeId, NodeId),
    #[error("unsupported trace version: {0:?}")]
    Version(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("inconsistent traces: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Compute,
    Collective,
    Send,
    Recv,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::Collective => "collective",
            EventKind::Send => "send",
            EventKind::Recv => "recv",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "compute" => EventKind::Compute,
            "collective" => EventKind::Collective,
            "send" => EventKind::Send,
            "recv" => EventKind::Recv,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommInfo {
    pub kind: CollectiveKind,
    pub bytes: u64,
    pub group: Vec<u64>,
    /// Shared by every event that takes part in the same transfer.
    pub tag: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    /// Index within the owning rank's trace.
    pub id: u64,
    pub rank: u64,
    pub kind: EventKind,
    pub name: String,
    pub duration: f64,
    pub comm: Option<CommInfo>,
    pub deps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTrace {
    pub rank: u64,
    pub events: Vec<TraceEvent>,
}

struct CrossPair {
    tag: u64,
    bytes: u64,
    sender: u64,
    src_node: NodeId,
    first_consumer: NodeId,
}

/// Lower a costed graph into one trace per rank. `costs[i]` is the
/// duration of node `i` (ignored for communication nodes).
pub fn linearize(graph: &OperatorGraph, costs: &[f64]) -> Result<Vec<RankTrace>, TraceError> {
    for n in &graph.nodes {
        let ok = costs.get(n.id).is_some_and(|c| c.is_finite() && *c >= 0.0);
        if n.op.is_compute() && !ok {
            return Err(TraceError::Uncosted(n.id, n.name.clone()));
        }
    }
    for &(u, v, _) in &graph.edges {
        if graph.nodes[u].ranks.is_empty() || graph.nodes[v].ranks.is_empty() {
            return Err(TraceError::Dangling(u, v));
        }
    }
    let order = graph.topo_order()?;
    let mut pos = vec![0usize; graph.len()];
    for (i, &id) in order.iter().enumerate() {
        pos[id] = i;
    }
    let world = graph
        .nodes
        .iter()
        .flat_map(|n| n.ranks.iter().map(|r| r + 1))
        .max()
        .unwrap_or(0)
        .max(graph.meta.world_size);

    // Cross-rank edges with no shared rank become send/recv pairs, one per
    // (producer, receiving rank).
    let mut pairs: BTreeMap<(NodeId, u64), CrossPair> = BTreeMap::new();
    let mut cross_edges: Vec<(NodeId, NodeId, EdgeKind)> = graph
        .edges
        .iter()
        .copied()
        .filter(|&(u, v, _)| {
            let (a, b) = (&graph.nodes[u].ranks, &graph.nodes[v].ranks);
            !a.iter().any(|r| b.contains(r))
        })
        .collect();
    cross_edges.sort_by_key(|&(u, v, _)| (pos[v], pos[u]));
    let mut next_tag = graph.len() as u64;
    for (u, v, kind) in cross_edges {
        let un = &graph.nodes[u];
        let sender = match &un.op {
            OpKind::P2p(c) => c.ranks[1],
            _ => un.ranks[0],
        };
        let bytes = if kind == EdgeKind::Data { un.output_bytes } else { 0 };
        for &r in &graph.nodes[v].ranks {
            let p = pairs.entry((u, r)).or_insert_with(|| {
                next_tag += 1;
                CrossPair { tag: next_tag - 1, bytes: 0, sender, src_node: u, first_consumer: v }
            });
            p.bytes = p.bytes.max(bytes);
        }
    }
    let mut send_after: HashMap<(u64, NodeId), Vec<(u64, u64)>> = HashMap::new();
    let mut recv_before: HashMap<(u64, NodeId), Vec<&CrossPair>> = HashMap::new();
    for (&(_, r), p) in &pairs {
        send_after.entry((p.sender, p.src_node)).or_default().push((p.tag, r));
        recv_before.entry((r, p.first_consumer)).or_default().push(p);
    }

    let preds = graph.predecessors();
    let mut traces = Vec::with_capacity(world as usize);
    for r in 0..world {
        let mut events: Vec<TraceEvent> = Vec::new();
        let mut event_of: HashMap<NodeId, u64> = HashMap::new();
        let mut recv_of: HashMap<NodeId, u64> = HashMap::new();
        for id in graph.rank_order(&order, r) {
            let node = &graph.nodes[id];
            if let Some(list) = recv_before.get(&(r, id)) {
                for p in list {
                    let eid = events.len() as u64;
                    events.push(TraceEvent {
                        id: eid,
                        rank: r,
                        kind: EventKind::Recv,
                        name: format!("recv.{}", graph.nodes[p.src_node].name),
                        duration: 0.0,
                        comm: Some(CommInfo {
                            kind: CollectiveKind::SendRecv,
                            bytes: p.bytes,
                            group: vec![p.sender, r],
                            tag: p.tag,
                        }),
                        deps: Vec::new(),
                    });
                    recv_of.insert(p.src_node, eid);
                }
            }
            let mut deps: Vec<u64> = preds[id]
                .iter()
                .filter_map(|&(u, _)| event_of.get(&u).or_else(|| recv_of.get(&u)).copied())
                .collect();
            deps.sort_unstable();
            deps.dedup();
            let (kind, comm, duration) = match &node.op {
                OpKind::Collective(c) => (
                    EventKind::Collective,
                    Some(CommInfo { kind: c.kind, bytes: c.bytes, group: c.ranks.clone(), tag: id as u64 }),
                    0.0,
                ),
                OpKind::P2p(c) => (
                    if c.ranks[0] == r { EventKind::Send } else { EventKind::Recv },
                    Some(CommInfo { kind: CollectiveKind::SendRecv, bytes: c.bytes, group: c.ranks.clone(), tag: id as u64 }),
                    0.0,
                ),
                _ => (EventKind::Compute, None, costs[id]),
            };
            let eid = events.len() as u64;
            events.push(TraceEvent { id: eid, rank: r, kind, name: node.name.clone(), duration, comm, deps });
            event_of.insert(id, eid);
            if let Some(list) = send_after.get(&(r, id)) {
                for &(tag, dst) in list {
                    let eid2 = events.len() as u64;
                    events.push(TraceEvent {
                        id: eid2,
                        rank: r,
                        kind: EventKind::Send,
                        name: format!("send.{}", node.name),
                        duration: 0.0,
                        comm: Some(CommInfo {
                            kind: CollectiveKind::SendRecv,
                            bytes: pairs[&(id, dst)].bytes,
                            group: vec![r, dst],
                            tag,
                        }),
                        deps: vec![eid],
                    });
                }
            }
        }
        traces.push(RankTrace { rank: r, events });
    }
    Ok(traces)
}

/// Structural checks: dependency ordering, send/recv matching and
/// collective agreement across group members.
pub fn validate(traces: &[RankTrace]) -> Result<(), TraceError> {
    let bad = |m: String| Err(TraceError::Inconsistent(m));
    // tag -> (participants, bytes, group)
    type P2pUse = (Vec<(u64, EventKind)>, u64, Vec<u64>);
    let mut p2p: BTreeMap<u64, P2pUse> = BTreeMap::new();
    let mut coll: BTreeMap<u64, (Vec<u64>, CollectiveKind, u64, Vec<u64>)> = BTreeMap::new();
    for t in traces {
        for (i, e) in t.events.iter().enumerate() {
            if e.id != i as u64 || e.rank != t.rank {
                return bad(format!("rank {} event {i} has id {} rank {}", t.rank, e.id, e.rank));
            }
            if let Some(&d) = e.deps.iter().find(|&&d| d >= e.id) {
                return bad(format!("rank {} event {} depends on later event {d}", t.rank, e.id));
            }
            if !(e.duration >= 0.0 && e.duration.is_finite()) {
                return bad(format!("rank {} event {} has duration {}", t.rank, e.id, e.duration));
            }
            match (e.kind, &e.comm) {
                (EventKind::Compute, None) => {}
                (EventKind::Send | EventKind::Recv, Some(c)) => {
                    let ent = p2p.entry(c.tag).or_insert((Vec::new(), c.bytes, c.group.clone()));
                    if ent.1 != c.bytes || ent.2 != c.group {
                        return bad(format!("tag {} disagrees on bytes or endpoints", c.tag));
                    }
                    ent.0.push((t.rank, e.kind));
                }
                (EventKind::Collective, Some(c)) => {
                    let ent = coll.entry(c.tag).or_insert((Vec::new(), c.kind, c.bytes, c.group.clone()));
                    if ent.1 != c.kind || ent.2 != c.bytes || ent.3 != c.group {
                        return bad(format!("collective tag {} disagrees across ranks", c.tag));
                    }
                    ent.0.push(t.rank);
                }
                _ => return bad(format!("rank {} event {} kind/comm mismatch", t.rank, e.id)),
            }
        }
    }
    for (tag, (members, _, group)) in &p2p {
        let expect = vec![(group[0], EventKind::Send), (group[1], EventKind::Recv)];
        let mut got = members.clone();
        got.sort_by_key(|&(r, k)| (k != EventKind::Send, r));
        if group.len() != 2 || got != expect {
            return bad(format!("send/recv tag {tag} is not a matched pair: {got:?}"));
        }
    }
    for (tag, (members, _, _, group)) in &coll {
        let mut m = members.clone();
        m.sort_unstable();
        let mut g = group.clone();
        g.sort_unstable();
        if m != g {
            return bad(format!("collective tag {tag} appears on {m:?}, group is {g:?}"));
        }
    }
    Ok(())
}

fn join(v: &[u64]) -> String {
    if v.is_empty() {
        return "-".to_string();
    }
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

pub fn serialize(traces: &[RankTrace]) -> String {
    let mut s = String::with_capacity(64 * traces.iter().map(|t| t.events.len()).sum::<usize>() + 32);
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for t in traces {
        for e in &t.events {
            let (ck, bytes, group, tag) = match &e.comm {
                Some(c) => (c.kind.as_str(), c.bytes.to_string(), join(&c.group), c.tag.to_string()),
                None => ("-", "-".to_string(), "-".to_string(), "-".to_string()),
            };
            writeln!(
                s,
                "{}\t{}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.rank,
                e.id,
                e.kind.as_str(),
                e.duration,
                ck,
                bytes,
                group,
                tag,
                join(&e.deps),
                e.name
            )
            .unwrap();
        }
    }
    s
}

pub fn deserialize(doc: &str) -> Result<Vec<RankTrace>, TraceError> {
    let mut lines = doc.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        Some((_, h)) => return Err(TraceError::Version(h.to_string())),
        None => return Err(TraceError::Version(String::new())),
    }
    let mut by_rank: BTreeMap<u64, Vec<TraceEvent>> = BTreeMap::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| TraceError::Parse { line: ln, msg };
        let f: Vec<&str> = line.splitn(10, '\t').collect();
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| err(format!("bad {what} {s:?}")));
        let list = |s: &str, what: &str| -> Result<Vec<u64>, TraceError> {
            if s == "-" {
                return Ok(Vec::new());
            }
            s.split(',').map(|x| num(x, what)).collect()
        };
        let rank = num(f[0], "rank")?;
        let id = num(f[1], "id")?;
        let kind = EventKind::parse(f[2]).ok_or_else(|| err(format!("unknown event kind {:?}", f[2])))?;
        let duration: f64 = f[3].parse().map_err(|_| err(format!("bad duration {:?}", f[3])))?;
        let comm = if kind == EventKind::Compute {
            None
        } else {
            Some(CommInfo {
                kind: CollectiveKind::parse(f[4]).ok_or_else(|| err(format!("unknown collective {:?}", f[4])))?,
                bytes: num(f[5], "bytes")?,
                group: list(f[6], "group member")?,
                tag: num(f[7], "tag")?,
            })
        };
        let deps = list(f[8], "dependency")?;
        let events = by_rank.entry(rank).or_default();
        if id != events.len() as u64 {
            return Err(err(format!("event id {id} out of sequence on rank {rank}")));
        }
        events.push(TraceEvent { id, rank, kind, name: f[9].to_string(), duration, comm, deps });
    }
    Ok(by_rank.into_iter().map(|(rank, events)| RankTrace { rank, events }).collect())
}
