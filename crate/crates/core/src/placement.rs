//! Topology- and resource-aware worker placement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scenario::config::{CpuQuantity, MemQuantity, NodeConfig};
use crate::scenario::format::{EpochFile, LinkKey};
use crate::scenario::generate::{apply_to_linkset, LinkSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("worker `{0}` has no capacity")]
    BadWorker(String),
    #[error("no workers given")]
    NoWorkers,
    #[error("placement infeasible on {workers} workers: {}", format_shortfall(.shortfall))]
    Infeasible { workers: usize, shortfall: Vec<Shortfall> },
    #[error("bad worker description: {0}")]
    Parse(String),
}

/// Demand above capacity on one worker in the best attempt found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub worker: String,
    pub cpu_millicores: u64,
    pub mem_bytes: u64,
}

fn format_shortfall(s: &[Shortfall]) -> String {
    s.iter()
        .map(|x| format!("{} short by {}m cpu / {} B mem", x.worker, x.cpu_millicores, x.mem_bytes))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkerSpec {
    pub name: String,
    /// Millicores.
    pub cpu_capacity: u64,
    /// Bytes.
    pub mem_capacity: u64,
    pub underlay_ip: String,
}

impl WorkerSpec {
    pub fn new(name: &str, cpu_millicores: u64, mem_bytes: u64) -> Self {
        WorkerSpec {
            name: name.to_string(),
            cpu_capacity: cpu_millicores,
            mem_capacity: mem_bytes,
            underlay_ip: String::new(),
        }
    }

    /// `{"name": .., "cpu": 8, "mem": "8GiB", "ip": ".."}`
    pub fn from_json(v: &Value) -> Result<Self, PlacementError> {
        let bad = |what: &str| PlacementError::Parse(format!("{what} in {v}"));
        let name = v.get("name").and_then(Value::as_str).ok_or_else(|| bad("missing name"))?;
        let cpu = CpuQuantity::parse(v.get("cpu").ok_or_else(|| bad("missing cpu"))?)
            .map_err(|e| PlacementError::Parse(e.to_string()))?;
        let mem = MemQuantity::parse(v.get("mem").ok_or_else(|| bad("missing mem"))?)
            .map_err(|e| PlacementError::Parse(e.to_string()))?;
        let ip = v.get("ip").and_then(Value::as_str).unwrap_or_default();
        let w = WorkerSpec {
            name: name.to_string(),
            cpu_capacity: cpu.0,
            mem_capacity: mem.0,
            underlay_ip: ip.to_string(),
        };
        if w.cpu_capacity == 0 || w.mem_capacity == 0 {
            return Err(PlacementError::BadWorker(w.name));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vertex {
    pub name: String,
    pub cpu: u64,
    pub mem: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlacementGraph {
    pub vertices: Vec<Vertex>,
    /// Undirected, `(lo, hi)` vertex indices.
    pub edges: BTreeMap<(usize, usize), u64>,
}

impl PlacementGraph {
    pub fn new(vertices: Vec<Vertex>) -> Self {
        PlacementGraph {
            vertices,
            edges: BTreeMap::new(),
        }
    }

    pub fn add_edge(&mut self, a: usize, b: usize, w: u64) {
        if a == b || w == 0 {
            return;
        }
        *self.edges.entry((a.min(b), a.max(b))).or_insert(0) += w;
    }

    /// Vertices from node requests, edges from link activity.
    pub fn from_nodes(nodes: &[NodeConfig], weights: &BTreeMap<LinkKey, u64>) -> Self {
        let vertices: Vec<Vertex> = nodes
            .iter()
            .map(|n| Vertex {
                name: n.name.clone(),
                cpu: n.cpu_request.0,
                mem: n.mem_request.0,
            })
            .collect();
        let idx: BTreeMap<&str, usize> = vertices.iter().enumerate().map(|(i, v)| (v.name.as_str(), i)).collect();
        let mut g = PlacementGraph::new(vertices.clone());
        for (k, &w) in weights {
            if let (Some(&a), Some(&b)) = (idx.get(k.a.as_str()), idx.get(k.b.as_str())) {
                g.add_edge(a, b, w);
            }
        }
        g
    }

    fn adjacency(&self) -> Vec<Vec<(usize, u64)>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (&(a, b), &w) in &self.edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        adj
    }

    pub fn cut_weight(&self, part: &[usize]) -> u64 {
        self.edges
            .iter()
            .filter(|(&(a, b), _)| part[a] != part[b])
            .map(|(_, &w)| w)
            .sum()
    }
}

/// Number of epochs in which each link exists once that epoch is applied.
pub fn link_activity_weights(epochs: &[EpochFile]) -> BTreeMap<LinkKey, u64> {
    let mut state = LinkSet::new();
    let mut w: BTreeMap<LinkKey, u64> = BTreeMap::new();
    for f in epochs {
        apply_to_linkset(&mut state, f);
        for k in state.keys() {
            *w.entry(k.clone()).or_insert(0) += 1;
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub assignment: BTreeMap<String, String>,
    pub parts: usize,
    pub cut_weight: u64,
}

const RESTARTS: u64 = 8;
const MAX_PASSES: usize = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Load {
    cpu: u64,
    mem: u64,
}

fn caps(ws: &[&WorkerSpec]) -> Load {
    Load {
        cpu: ws.iter().map(|w| w.cpu_capacity).sum(),
        mem: ws.iter().map(|w| w.mem_capacity).sum(),
    }
}

fn overflow(load: Load, cap: Load) -> u64 {
    load.cpu
        .saturating_sub(cap.cpu)
        .saturating_add(load.mem.saturating_sub(cap.mem))
}

struct Bisect<'a> {
    g: &'a PlacementGraph,
    adj: &'a [Vec<(usize, u64)>],
    members: &'a [usize],
    in_set: &'a [bool],
    cap: [Load; 2],
    band: (u64, u64),
}

impl Bisect<'_> {
    fn loads(&self, side: &[u8]) -> [Load; 2] {
        let mut l = [Load::default(); 2];
        for &v in self.members {
            let s = side[v] as usize;
            l[s].cpu += self.g.vertices[v].cpu;
            l[s].mem += self.g.vertices[v].mem;
        }
        l
    }

    /// Only capacity counts; the balance band just seeds the initial split.
    fn violation(&self, l: &[Load; 2]) -> u64 {
        overflow(l[0], self.cap[0]) + overflow(l[1], self.cap[1])
    }

    fn gain(&self, side: &[u8], v: usize) -> i64 {
        let mut g = 0i64;
        for &(u, w) in &self.adj[v] {
            if self.in_set[u] {
                g += if side[u] != side[v] { w as i64 } else { -(w as i64) };
            }
        }
        g
    }

    fn moved(&self, l: &[Load; 2], side: &[u8], v: usize) -> [Load; 2] {
        let mut l = *l;
        let (from, to) = (side[v] as usize, 1 - side[v] as usize);
        let d = &self.g.vertices[v];
        l[from].cpu -= d.cpu;
        l[from].mem -= d.mem;
        l[to].cpu += d.cpu;
        l[to].mem += d.mem;
        l
    }

    /// Region growing from a random seed until side 0 reaches its target.
    fn initial(&self, rng: &mut ChaCha8Rng, side: &mut [u8]) {
        for &v in self.members {
            side[v] = 1;
        }
        let target = (self.band.0 + self.band.1) / 2;
        let mut order: Vec<usize> = self.members.to_vec();
        order.shuffle(rng);
        let mut load0 = 0u64;
        let mut frontier: BTreeMap<usize, i64> = BTreeMap::new();
        let mut next_seed = order.into_iter();
        while load0 < target {
            let pick = frontier
                .iter()
                .max_by_key(|(&v, &conn)| (conn, std::cmp::Reverse(v)))
                .map(|(&v, _)| v)
                .or_else(|| next_seed.by_ref().find(|&v| side[v] == 1));
            let Some(v) = pick else { break };
            frontier.remove(&v);
            side[v] = 0;
            load0 += self.g.vertices[v].cpu;
            for &(u, w) in &self.adj[v] {
                if self.in_set[u] && side[u] == 1 {
                    *frontier.entry(u).or_insert(0) += w as i64;
                }
            }
        }
    }

    /// Fiduccia-Mattheyses passes with rollback to the best prefix. Moves may
    /// never increase the constraint violation.
    fn refine(&self, side: &mut [u8]) {
        for _ in 0..MAX_PASSES {
            let mut loads = self.loads(side);
            let start_key = (self.violation(&loads), 0i64);
            let mut best = start_key;
            let mut best_len = 0usize;
            let mut cum = 0i64;
            let mut locked: BTreeMap<usize, ()> = BTreeMap::new();
            let mut moves = Vec::new();
            loop {
                let viol = self.violation(&loads);
                let mut choice: Option<(u64, i64, usize)> = None;
                for &v in self.members {
                    if locked.contains_key(&v) {
                        continue;
                    }
                    let nl = self.moved(&loads, side, v);
                    let nv = self.violation(&nl);
                    if nv > viol {
                        continue;
                    }
                    let g = self.gain(side, v);
                    let better = match choice {
                        None => true,
                        Some((cv, cg, cu)) => (nv, -g, v) < (cv, -cg, cu),
                    };
                    if better {
                        choice = Some((nv, g, v));
                    }
                }
                let Some((nv, g, v)) = choice else { break };
                loads = self.moved(&loads, side, v);
                side[v] = 1 - side[v];
                locked.insert(v, ());
                moves.push(v);
                cum += g;
                let key = (nv, -cum);
                if key < best {
                    best = key;
                    best_len = moves.len();
                }
            }
            for &v in &moves[best_len..] {
                side[v] = 1 - side[v];
            }
            if best >= start_key {
                break;
            }
        }
    }
}

/// Splits `members` over `workers` (sorted by capacity), writing
/// `part[v] = worker index`.
fn recursive_bisect(
    g: &PlacementGraph,
    adj: &[Vec<(usize, u64)>],
    members: &[usize],
    workers: &[(usize, &WorkerSpec)],
    rng: &mut ChaCha8Rng,
    part: &mut [usize],
) {
    if workers.len() == 1 || members.is_empty() {
        for &v in members {
            part[v] = workers[0].0;
        }
        return;
    }
    // alternate workers so both halves get a similar capacity mix
    let (left, right): (Vec<_>, Vec<_>) = workers.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let left: Vec<(usize, &WorkerSpec)> = left.into_iter().map(|(_, w)| *w).collect();
    let right: Vec<(usize, &WorkerSpec)> = right.into_iter().map(|(_, w)| *w).collect();
    let cap0 = caps(&left.iter().map(|w| w.1).collect::<Vec<_>>());
    let cap1 = caps(&right.iter().map(|w| w.1).collect::<Vec<_>>());
    let total_cpu: u64 = members.iter().map(|&v| g.vertices[v].cpu).sum();
    let max_cpu = members.iter().map(|&v| g.vertices[v].cpu).max().unwrap_or(0);
    let target = (total_cpu as f64 * cap0.cpu as f64 / (cap0.cpu + cap1.cpu) as f64).round() as u64;
    let tol = ((total_cpu as f64 * 0.05) as u64).max(max_cpu);
    let mut in_set = vec![false; g.vertices.len()];
    for &v in members {
        in_set[v] = true;
    }
    let b = Bisect {
        g,
        adj,
        members,
        in_set: &in_set,
        cap: [cap0, cap1],
        band: (target.saturating_sub(tol), target + tol),
    };
    let mut side = vec![0u8; g.vertices.len()];
    b.initial(rng, &mut side);
    b.refine(&mut side);
    let (m0, m1): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&v| side[v] == 0);
    recursive_bisect(g, adj, &m0, &left, rng, part);
    recursive_bisect(g, adj, &m1, &right, rng, part);
}

fn part_loads(g: &PlacementGraph, part: &[usize], n: usize) -> Vec<Load> {
    let mut l = vec![Load::default(); n];
    for (v, &p) in part.iter().enumerate() {
        l[p].cpu += g.vertices[v].cpu;
        l[p].mem += g.vertices[v].mem;
    }
    l
}

fn total_overflow(g: &PlacementGraph, part: &[usize], ws: &[&WorkerSpec]) -> u64 {
    part_loads(g, part, ws.len())
        .iter()
        .zip(ws)
        .map(|(l, w)| overflow(*l, caps(&[w])))
        .sum()
}

/// Moves vertices out of overloaded parts, cheapest cut increase first.
fn repair(g: &PlacementGraph, adj: &[Vec<(usize, u64)>], part: &mut [usize], ws: &[&WorkerSpec]) {
    loop {
        let loads = part_loads(g, part, ws.len());
        let over: Vec<bool> = loads.iter().zip(ws).map(|(l, w)| overflow(*l, caps(&[w])) > 0).collect();
        if !over.iter().any(|&o| o) {
            return;
        }
        let current = total_overflow(g, part, ws);
        let mut best: Option<(u64, i64, usize, usize)> = None;
        for v in 0..part.len() {
            if !over[part[v]] {
                continue;
            }
            for to in 0..ws.len() {
                if to == part[v] {
                    continue;
                }
                let from = part[v];
                part[v] = to;
                let ov = total_overflow(g, part, ws);
                part[v] = from;
                if ov >= current {
                    continue;
                }
                let delta: i64 = adj[v]
                    .iter()
                    .map(|&(u, w)| {
                        let before = (part[u] != from) as i64;
                        let after = (part[u] != to) as i64;
                        (after - before) * w as i64
                    })
                    .sum();
                let key = (ov, delta, v, to);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        match best {
            Some((_, _, v, to)) => part[v] = to,
            None => return,
        }
    }
}

/// Greedy single-vertex moves that lower the cut without overloading the
/// target worker.
fn refine_kway(g: &PlacementGraph, adj: &[Vec<(usize, u64)>], part: &mut [usize], ws: &[&WorkerSpec]) {
    let mut loads = part_loads(g, part, ws.len());
    for _ in 0..MAX_PASSES {
        let mut improved = false;
        for v in 0..part.len() {
            let from = part[v];
            let mut conn = vec![0u64; ws.len()];
            for &(u, w) in &adj[v] {
                conn[part[u]] += w;
            }
            let d = &g.vertices[v];
            let best = (0..ws.len())
                .filter(|&to| to != from && conn[to] > conn[from])
                .filter(|&to| {
                    loads[to].cpu + d.cpu <= ws[to].cpu_capacity && loads[to].mem + d.mem <= ws[to].mem_capacity
                })
                .max_by_key(|&to| (conn[to], std::cmp::Reverse(to)));
            if let Some(to) = best {
                loads[from].cpu -= d.cpu;
                loads[from].mem -= d.mem;
                loads[to].cpu += d.cpu;
                loads[to].mem += d.mem;
                part[v] = to;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

/// One attempt on the `k` largest workers. Returns `(part, cut, overflow)`.
fn attempt(
    g: &PlacementGraph,
    adj: &[Vec<(usize, u64)>],
    ws: &[&WorkerSpec],
    seed: u64,
) -> (Vec<usize>, u64, u64) {
    let mut best: Option<(Vec<usize>, u64, u64)> = None;
    let members: Vec<usize> = (0..g.vertices.len()).collect();
    let indexed: Vec<(usize, &WorkerSpec)> = ws.iter().copied().enumerate().collect();
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r.wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ ws.len() as u64);
        let mut part = vec![0usize; g.vertices.len()];
        recursive_bisect(g, adj, &members, &indexed, &mut rng, &mut part);
        repair(g, adj, &mut part, ws);
        let mut part = match_parts(g, part, ws);
        refine_kway(g, adj, &mut part, ws);
        let ov = total_overflow(g, &part, ws);
        let cut = g.cut_weight(&part);
        if best.as_ref().is_none_or(|b| (ov, cut) < (b.2, b.1)) {
            best = Some((part, cut, ov));
        }
    }
    best.expect("at least one restart")
}

/// Re-pairs parts with workers by decreasing demand and capacity, unless
/// that breaks a fit the current pairing has.
fn match_parts(g: &PlacementGraph, part: Vec<usize>, ws: &[&WorkerSpec]) -> Vec<usize> {
    let loads = part_loads(g, &part, ws.len());
    let mut by_demand: Vec<usize> = (0..ws.len()).collect();
    by_demand.sort_by_key(|&p| (std::cmp::Reverse((loads[p].cpu, loads[p].mem)), p));
    // ws is already sorted by decreasing capacity
    let mut map = vec![0usize; ws.len()];
    for (slot, &p) in by_demand.iter().enumerate() {
        map[p] = slot;
    }
    let remapped: Vec<usize> = part.iter().map(|&p| map[p]).collect();
    if total_overflow(g, &remapped, ws) <= total_overflow(g, &part, ws) {
        remapped
    } else {
        part
    }
}

/// Smallest `k` whose best partition fits the `k` largest workers.
pub fn partition(g: &PlacementGraph, workers: &[WorkerSpec], seed: u64) -> Result<Placement, PlacementError> {
    if workers.is_empty() {
        return Err(PlacementError::NoWorkers);
    }
    for w in workers {
        if w.cpu_capacity == 0 || w.mem_capacity == 0 {
            return Err(PlacementError::BadWorker(w.name.clone()));
        }
    }
    let mut sorted: Vec<&WorkerSpec> = workers.iter().collect();
    sorted.sort_by(|a, b| {
        (b.cpu_capacity, b.mem_capacity)
            .cmp(&(a.cpu_capacity, a.mem_capacity))
            .then(a.name.cmp(&b.name))
    });
    let adj = g.adjacency();
    let mut last = None;
    for k in 1..=sorted.len() {
        let ws = &sorted[..k];
        let (part, cut, ov) = attempt(g, &adj, ws, seed);
        if ov == 0 {
            let assignment = part
                .iter()
                .enumerate()
                .map(|(v, &p)| (g.vertices[v].name.clone(), ws[p].name.clone()))
                .collect();
            return Ok(Placement {
                assignment,
                parts: k,
                cut_weight: cut,
            });
        }
        last = Some(part);
    }
    let part = last.expect("at least one worker");
    let loads = part_loads(g, &part, sorted.len());
    let shortfall = loads
        .iter()
        .zip(&sorted)
        .filter_map(|(l, w)| {
            let s = Shortfall {
                worker: w.name.clone(),
                cpu_millicores: l.cpu.saturating_sub(w.cpu_capacity),
                mem_bytes: l.mem.saturating_sub(w.mem_capacity),
            };
            (s.cpu_millicores > 0 || s.mem_bytes > 0).then_some(s)
        })
        .collect();
    Err(PlacementError::Infeasible {
        workers: sorted.len(),
        shortfall,
    })
}

/// Writes the chosen worker into each node configuration.
pub fn apply_placement(nodes: &mut [NodeConfig], placement: &Placement) {
    for n in nodes {
        if let Some(w) = placement.assignment.get(&n.name) {
            n.worker = Some(w.clone());
        }
    }
}
