//! Link-level N-dimensional fabrics.
//!
//! Every physical link of every dimension is instantiated explicitly. GPUs
//! are numbered mixed-radix with dimension 0 varying fastest; switch nodes
//! (for `Switch` dimensions) get ids after the last GPU.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::config::{BaseTopology, FaultKind, FaultSpec, TopologySpec};

pub type NodeId = u64;

/// Bounds applied to sampled soft-fault derates.
pub const SAMPLED_DERATE_MIN: f64 = 0.01;
pub const SAMPLED_DERATE_MAX: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("topology has {got} GPUs, expected {expected}")]
    NodeCountMismatch { expected: u64, got: u64 },
    #[error("no link between {0} and {1}")]
    NoLink(NodeId, NodeId),
    #[error("node {0} does not exist")]
    NoNode(NodeId),
    #[error("no usable route from {src} to {dst}: source partition has {partition_size} node(s) {partition}")]
    Unreachable {
        src: NodeId,
        dst: NodeId,
        partition_size: usize,
        partition: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkState {
    Healthy,
    SoftFaulty,
    Dead,
}

impl LinkState {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkState::Healthy => "healthy",
            LinkState::SoftFaulty => "soft_faulty",
            LinkState::Dead => "dead",
        }
    }
}

/// Full-duplex link; each direction has `effective_bw` of capacity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub dim: usize,
    pub diagonal: bool,
    pub nominal_bw: f64,
    pub effective_bw: f64,
    pub latency: f64,
    pub state: LinkState,
}

impl Link {
    pub fn usable(&self) -> bool {
        self.state != LinkState::Dead
    }

    pub fn other(&self, n: NodeId) -> NodeId {
        if n == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Hop {
    pub link: usize,
    pub from: NodeId,
    pub to: NodeId,
}

impl Hop {
    /// Index of the directed channel this hop occupies.
    pub fn channel(&self, net: &Network) -> usize {
        let l = &net.links[self.link];
        2 * self.link + usize::from(self.from != l.a)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Route {
    pub hops: Vec<Hop>,
}

impl Route {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.hops.iter().map(|h| h.from).collect();
        if let Some(h) = self.hops.last() {
            v.push(h.to);
        }
        v
    }

    pub fn latency(&self, net: &Network) -> f64 {
        self.hops.iter().map(|h| net.links[h.link].latency).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: TopologySpec,
    pub num_gpus: u64,
    pub links: Vec<Link>,
    radices: Vec<u64>,
    strides: Vec<u64>,
    adj: Vec<Vec<(NodeId, usize)>>,
    index: HashMap<(NodeId, NodeId), usize>,
    switches: BTreeMap<(usize, NodeId), NodeId>,
}

/// Instantiate all links of a topology.
pub fn build_network(spec: &TopologySpec) -> Result<Network, TopologyError> {
    Network::build(spec)
}

impl Network {
    pub fn build(spec: &TopologySpec) -> Result<Self, TopologyError> {
        let radices: Vec<u64> = spec.dims.iter().map(|d| d.node_count).collect();
        let mut strides = vec![1u64; radices.len()];
        for i in 1..radices.len() {
            strides[i] = strides[i - 1] * radices[i - 1];
        }
        let num_gpus: u64 = radices.iter().product();
        let mut net = Network {
            spec: spec.clone(),
            num_gpus,
            links: Vec::new(),
            radices,
            strides,
            adj: vec![Vec::new(); num_gpus as usize],
            index: HashMap::new(),
            switches: BTreeMap::new(),
        };
        for (d, dim) in spec.dims.iter().enumerate() {
            let n = dim.node_count;
            let stride = net.strides[d];
            for line_base in net.line_bases(d) {
                let at = |i: u64| line_base + i * stride;
                match dim.base {
                    BaseTopology::Ring => {
                        for i in 0..n {
                            net.add_link(at(i), at((i + 1) % n), d, false);
                        }
                    }
                    BaseTopology::Mesh1d => {
                        for i in 0..n - 1 {
                            net.add_link(at(i), at(i + 1), d, false);
                        }
                    }
                    BaseTopology::FullyConnected => {
                        for i in 0..n {
                            for j in i + 1..n {
                                net.add_link(at(i), at(j), d, false);
                            }
                        }
                    }
                    BaseTopology::Switch => {
                        let sw = net.adj.len() as NodeId;
                        net.adj.push(Vec::new());
                        net.switches.insert((d, line_base), sw);
                        for i in 0..n {
                            net.add_link(at(i), sw, d, false);
                        }
                    }
                }
            }
        }
        if spec.kingmesh {
            let (nx, ny) = (net.radices[0], net.radices[1]);
            let (sx, sy) = (net.strides[0], net.strides[1]);
            for plane in net.line_bases_2d() {
                for x in 0..nx - 1 {
                    for y in 0..ny - 1 {
                        let at = |x: u64, y: u64| plane + x * sx + y * sy;
                        net.add_link(at(x, y), at(x + 1, y + 1), 0, true);
                        net.add_link(at(x + 1, y), at(x, y + 1), 0, true);
                    }
                }
            }
        }
        Ok(net)
    }

    fn add_link(&mut self, a: NodeId, b: NodeId, dim: usize, diagonal: bool) {
        let key = (a.min(b), a.max(b));
        if a == b || self.index.contains_key(&key) {
            return;
        }
        let d = &self.spec.dims[dim];
        let id = self.links.len();
        self.links.push(Link {
            a: key.0,
            b: key.1,
            dim,
            diagonal,
            nominal_bw: d.link_bw,
            effective_bw: d.link_bw,
            latency: d.link_latency,
            state: LinkState::Healthy,
        });
        self.index.insert(key, id);
        self.adj[a as usize].push((b, id));
        self.adj[b as usize].push((a, id));
        self.adj[a as usize].sort_unstable();
        self.adj[b as usize].sort_unstable();
    }

    /// Ranks whose coordinate along `d` is zero.
    fn line_bases(&self, d: usize) -> Vec<NodeId> {
        (0..self.num_gpus)
            .filter(|r| self.coord(*r, d) == 0)
            .collect()
    }

    fn line_bases_2d(&self) -> Vec<NodeId> {
        (0..self.num_gpus)
            .filter(|r| self.coord(*r, 0) == 0 && self.coord(*r, 1) == 0)
            .collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn num_dims(&self) -> usize {
        self.radices.len()
    }

    pub fn radix(&self, d: usize) -> u64 {
        self.radices[d]
    }

    pub fn coord(&self, rank: NodeId, d: usize) -> u64 {
        (rank / self.strides[d]) % self.radices[d]
    }

    pub fn coords(&self, rank: NodeId) -> Vec<u64> {
        (0..self.num_dims()).map(|d| self.coord(rank, d)).collect()
    }

    pub fn rank_of(&self, coords: &[u64]) -> NodeId {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    pub fn is_switch(&self, n: NodeId) -> bool {
        n >= self.num_gpus
    }

    pub fn neighbors(&self, n: NodeId) -> &[(NodeId, usize)] {
        &self.adj[n as usize]
    }

    pub fn find_link(&self, a: NodeId, b: NodeId) -> Option<usize> {
        self.index.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn num_channels(&self) -> usize {
        2 * self.links.len()
    }

    /// Derate one link (soft fault). A derate of 1.0 restores it.
    pub fn set_derate(&mut self, link: usize, derate: f64) {
        let l = &mut self.links[link];
        l.effective_bw = l.nominal_bw * derate;
        l.state = if derate < 1.0 {
            LinkState::SoftFaulty
        } else {
            LinkState::Healthy
        };
    }

    pub fn kill(&mut self, link: usize) {
        self.links[link].state = LinkState::Dead;
    }

    /// Apply explicit faults, then sample the stochastic generator (if any).
    pub fn apply_faults<R: Rng>(&self, faults: &FaultSpec, rng: &mut R) -> Result<Network, TopologyError> {
        let mut net = self.clone();
        for f in &faults.faults {
            let id = net
                .find_link(f.endpoint_a, f.endpoint_b)
                .ok_or(TopologyError::NoLink(f.endpoint_a, f.endpoint_b))?;
            match f.kind {
                FaultKind::Soft => net.set_derate(id, f.derate.unwrap_or(1.0)),
                FaultKind::Hard => net.kill(id),
            }
        }
        if let Some(g) = &faults.generator {
            let count = (g.count as usize).min(net.links.len());
            let picked = index::sample(rng, net.links.len(), count).into_vec();
            let normal = Normal::new(g.derate_mean, g.derate_std.max(0.0)).expect("std >= 0");
            for id in picked {
                let d = normal
                    .sample(rng)
                    .clamp(SAMPLED_DERATE_MIN, SAMPLED_DERATE_MAX);
                net.set_derate(id, d);
            }
        }
        Ok(net)
    }

    /// Segments resolved in order by dimension-order routing. A king mesh
    /// resolves dimensions 0 and 1 together.
    fn segments(&self) -> Vec<Vec<usize>> {
        let mut segs = Vec::new();
        let mut d = 0;
        if self.spec.kingmesh {
            segs.push(vec![0, 1]);
            d = 2;
        }
        while d < self.num_dims() {
            segs.push(vec![d]);
            d += 1;
        }
        segs
    }

    /// Nodes visited moving from `from` to `to` inside one segment, healthy
    /// fabric assumed. Includes both endpoints.
    fn segment_path(&self, seg: &[usize], from: NodeId, to: NodeId) -> Vec<NodeId> {
        let mut path = vec![from];
        if seg.len() == 2 {
            let (sx, sy) = (self.strides[0] as i64, self.strides[1] as i64);
            let mut cur = from;
            loop {
                let dx = self.coord(to, 0) as i64 - self.coord(cur, 0) as i64;
                let dy = self.coord(to, 1) as i64 - self.coord(cur, 1) as i64;
                if dx == 0 && dy == 0 {
                    break;
                }
                let next = cur as i64 + dx.signum() * sx + dy.signum() * sy;
                cur = next as NodeId;
                path.push(cur);
            }
            return path;
        }
        let d = seg[0];
        let n = self.radices[d];
        let stride = self.strides[d];
        let base = from - self.coord(from, d) * stride;
        let at = |i: u64| base + i * stride;
        let x = self.coord(from, d);
        let y = self.coord(to, d);
        match self.spec.dims[d].base {
            BaseTopology::FullyConnected => path.push(to),
            BaseTopology::Switch => {
                path.push(self.switches[&(d, base)]);
                path.push(to);
            }
            BaseTopology::Mesh1d => {
                let mut c = x;
                while c != y {
                    c = if y > c { c + 1 } else { c - 1 };
                    path.push(at(c));
                }
            }
            BaseTopology::Ring => {
                let fwd = (y + n - x) % n;
                let bwd = n - fwd;
                let up = if fwd != bwd {
                    fwd < bwd
                } else {
                    at((x + 1) % n) <= at((x + n - 1) % n)
                };
                let mut c = x;
                while c != y {
                    c = if up { (c + 1) % n } else { (c + n - 1) % n };
                    path.push(at(c));
                }
            }
        }
        path
    }

    fn hops_of(&self, nodes: &[NodeId]) -> Vec<Hop> {
        nodes
            .windows(2)
            .map(|w| Hop {
                link: self.find_link(w[0], w[1]).expect("adjacent nodes"),
                from: w[0],
                to: w[1],
            })
            .collect()
    }

    fn path_usable(&self, nodes: &[NodeId]) -> bool {
        nodes.windows(2).all(|w| {
            self.find_link(w[0], w[1])
                .is_some_and(|l| self.links[l].usable())
        })
    }

    /// Shortest usable path restricted to nodes accepted by `allow`; ties go
    /// to the lowest-numbered next hop.
    fn bfs_path(&self, src: NodeId, dst: NodeId, allow: impl Fn(NodeId) -> bool) -> Option<Vec<NodeId>> {
        let n = self.num_nodes();
        let mut dist = vec![u32::MAX; n];
        dist[dst as usize] = 0;
        let mut q = VecDeque::from([dst]);
        while let Some(u) = q.pop_front() {
            for &(v, l) in self.neighbors(u) {
                if dist[v as usize] == u32::MAX && self.links[l].usable() && allow(v) {
                    dist[v as usize] = dist[u as usize] + 1;
                    q.push_back(v);
                }
            }
        }
        if dist[src as usize] == u32::MAX {
            return None;
        }
        let mut path = vec![src];
        let mut cur = src;
        while cur != dst {
            let want = dist[cur as usize] - 1;
            cur = self
                .neighbors(cur)
                .iter()
                .filter(|(v, l)| dist[*v as usize] == want && self.links[*l].usable())
                .map(|(v, _)| *v)
                .min()
                .expect("bfs predecessor");
            path.push(cur);
        }
        Some(path)
    }

    /// Shortest usable hop count over the whole fabric, if reachable.
    pub fn bfs_distance(&self, src: NodeId, dst: NodeId) -> Option<usize> {
        self.bfs_path(src, dst, |_| true).map(|p| p.len() - 1)
    }

    fn segment_members(&self, seg: &[usize], at: NodeId) -> impl Fn(NodeId) -> bool + '_ {
        let fixed: Vec<(usize, u64)> = (0..self.num_dims())
            .filter(|d| !seg.contains(d))
            .map(|d| (d, self.coord(at, d)))
            .collect();
        let line_switches: Vec<NodeId> = if seg.len() == 1 {
            let d = seg[0];
            let base = at - self.coord(at, d) * self.strides[d];
            self.switches.get(&(d, base)).copied().into_iter().collect()
        } else {
            Vec::new()
        };
        move |n: NodeId| {
            if self.is_switch(n) {
                return line_switches.contains(&n);
            }
            fixed.iter().all(|&(d, c)| self.coord(n, d) == c)
        }
    }

    /// Dimension-order route from `src` to `dst`, avoiding dead links.
    ///
    /// Healthy routes resolve the lowest dimension first along the shortest
    /// in-dimension path. When a dead link lies on that path, the detour is
    /// first sought inside the affected dimension's residual subnetwork; it
    /// is kept only if it is as short as the shortest usable path over the
    /// whole fabric, otherwise the global shortest path is used.
    pub fn route(&self, src: NodeId, dst: NodeId) -> Result<Route, TopologyError> {
        for n in [src, dst] {
            if n as usize >= self.num_nodes() {
                return Err(TopologyError::NoNode(n));
            }
        }
        if src == dst {
            return Ok(Route::default());
        }
        let mut dor = vec![src];
        let mut confined: Option<Vec<NodeId>> = Some(vec![src]);
        let mut broken = false;
        let mut cur = src;
        for seg in self.segments() {
            let mut target_coords = self.coords(cur);
            for &d in &seg {
                target_coords[d] = self.coord(dst, d);
            }
            let target = self.rank_of(&target_coords);
            if target == cur {
                continue;
            }
            let path = self.segment_path(&seg, cur, target);
            dor.extend_from_slice(&path[1..]);
            let piece = if self.path_usable(&path) {
                Some(path)
            } else {
                broken = true;
                self.bfs_path(cur, target, self.segment_members(&seg, cur))
            };
            confined = match (confined, piece) {
                (Some(mut acc), Some(p)) => {
                    acc.extend_from_slice(&p[1..]);
                    Some(acc)
                }
                _ => None,
            };
            cur = target;
        }
        if !broken {
            return Ok(Route {
                hops: self.hops_of(&dor),
            });
        }
        let global = self
            .bfs_path(src, dst, |_| true)
            .ok_or_else(|| self.unreachable(src, dst))?;
        let nodes = match confined {
            Some(c) if c.len() == global.len() => c,
            _ => global,
        };
        Ok(Route {
            hops: self.hops_of(&nodes),
        })
    }

    fn unreachable(&self, src: NodeId, dst: NodeId) -> TopologyError {
        let mut seen = vec![false; self.num_nodes()];
        seen[src as usize] = true;
        let mut q = VecDeque::from([src]);
        let mut part = Vec::new();
        while let Some(u) = q.pop_front() {
            part.push(u);
            for &(v, l) in self.neighbors(u) {
                if !seen[v as usize] && self.links[l].usable() {
                    seen[v as usize] = true;
                    q.push_back(v);
                }
            }
        }
        part.sort_unstable();
        let shown: Vec<String> = part.iter().take(16).map(|n| n.to_string()).collect();
        let more = if part.len() > 16 { ", ..." } else { "" };
        TopologyError::Unreachable {
            src,
            dst,
            partition_size: part.len(),
            partition: format!("{{{}{more}}}", shown.join(", ")),
        }
    }

    /// Link list as CSV: `a,b,dim,bw,latency,state`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["a", "b", "dim", "bw", "latency", "state"])?;
        for l in &self.links {
            out.write_record([
                l.a.to_string(),
                l.b.to_string(),
                l.dim.to_string(),
                format!("{}", l.effective_bw),
                format!("{}", l.latency),
                l.state.as_str().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
