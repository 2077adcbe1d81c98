//! Route plug-ins for node agents and offline oracle routing.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::cmp::Reverse;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkmodel::LinkAttributes;
use crate::scenario::config::NodeType;
use crate::scenario::format::{EpochFile, LinkKey};
use crate::scenario::generate::{apply_to_linkset, LinkSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoutingError {
    #[error("routing loop: {}", .0.join(" -> "))]
    Loop(Vec<String>),
    #[error("no route from `{at}` towards `{dst}`")]
    Unreachable { at: String, dst: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("oracle configuration: {0}")]
    Config(String),
}

/// Node name to loopback address.
pub type Hosts = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RouteOrigin {
    Local,
    Oracle,
    Srv6,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub dest: String,
    pub next_hop: String,
    pub origin: RouteOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteMutation {
    Replace(RouteEntry),
    /// Removes the route to `dest` if it was installed by `origin`.
    Remove { dest: String, origin: RouteOrigin },
}

/// Reacts to link events of the owning node.
pub trait RoutePlugin: Send {
    fn name(&self) -> &str;
    fn on_link_add(&mut self, node: &str, peer: &str, attrs: &LinkAttributes, hosts: &Hosts) -> Vec<RouteMutation>;
    fn on_link_update(&mut self, node: &str, peer: &str, attrs: &LinkAttributes, hosts: &Hosts)
        -> Vec<RouteMutation>;
    fn on_link_del(&mut self, node: &str, peer: &str, hosts: &Hosts) -> Vec<RouteMutation>;
}

/// Installs a host route to each directly connected neighbor's loopback.
#[derive(Debug, Default, Clone)]
pub struct LocalRoutesPlugin;

impl RoutePlugin for LocalRoutesPlugin {
    fn name(&self) -> &str {
        "local-routes"
    }

    fn on_link_add(&mut self, _node: &str, peer: &str, _attrs: &LinkAttributes, hosts: &Hosts) -> Vec<RouteMutation> {
        match hosts.get(peer) {
            Some(lo) => vec![RouteMutation::Replace(RouteEntry {
                dest: lo.clone(),
                next_hop: peer.to_string(),
                origin: RouteOrigin::Local,
            })],
            None => Vec::new(),
        }
    }

    fn on_link_update(
        &mut self,
        _node: &str,
        _peer: &str,
        _attrs: &LinkAttributes,
        _hosts: &Hosts,
    ) -> Vec<RouteMutation> {
        Vec::new()
    }

    fn on_link_del(&mut self, _node: &str, peer: &str, hosts: &Hosts) -> Vec<RouteMutation> {
        match hosts.get(peer) {
            Some(lo) => vec![RouteMutation::Remove {
                dest: lo.clone(),
                origin: RouteOrigin::Local,
            }],
            None => Vec::new(),
        }
    }
}

/// Does nothing; routes come only from tasks.
#[derive(Debug, Default, Clone)]
pub struct NoRoutesPlugin;

impl RoutePlugin for NoRoutesPlugin {
    fn name(&self) -> &str {
        "none"
    }

    fn on_link_add(&mut self, _: &str, _: &str, _: &LinkAttributes, _: &Hosts) -> Vec<RouteMutation> {
        Vec::new()
    }

    fn on_link_update(&mut self, _: &str, _: &str, _: &LinkAttributes, _: &Hosts) -> Vec<RouteMutation> {
        Vec::new()
    }

    fn on_link_del(&mut self, _: &str, _: &str, _: &Hosts) -> Vec<RouteMutation> {
        Vec::new()
    }
}

/// Plug-in for a `routing-module` name. Unknown modules fall back to local
/// routes, which is what every non-satellite node needs.
pub fn plugin_for_module(module: &str) -> Box<dyn RoutePlugin> {
    match module {
        "none" | "" => Box::new(NoRoutesPlugin),
        _ => Box::new(LocalRoutesPlugin),
    }
}

/// Canonical route task text.
pub fn route_task(dest: &str, next_hop: &str) -> String {
    format!("route replace {dest} via {next_hop}")
}

/// Parses `route replace <dst> via <nh>`, also accepted with an `ip` or
/// `ip -6` / `ip -4` prefix and trailing options.
pub fn parse_route_task(task: &str) -> Option<(String, String)> {
    let mut words: Vec<&str> = task.split_whitespace().collect();
    if words.first() == Some(&"ip") {
        words.remove(0);
        if matches!(words.first(), Some(&"-6") | Some(&"-4")) {
            words.remove(0);
        }
    }
    match words.as_slice() {
        ["route", "replace", dst, "via", nh, ..] => Some((dst.to_string(), nh.to_string())),
        _ => None,
    }
}

/// Per-node next-hop lookup by destination node name.
pub trait RouteLookup {
    fn next_hop(&self, node: &str, dst: &str) -> Option<String>;
}

/// `src -> dst -> next hop` tables held in memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StaticRoutes(pub BTreeMap<String, BTreeMap<String, String>>);

impl RouteLookup for StaticRoutes {
    fn next_hop(&self, node: &str, dst: &str) -> Option<String> {
        self.0.get(node)?.get(dst).cloned()
    }
}

/// Follows next hops from `src` until `dst`.
pub fn resolve_path(routes: &dyn RouteLookup, src: &str, dst: &str) -> Result<Vec<String>, RoutingError> {
    let mut path = vec![src.to_string()];
    let mut seen = BTreeSet::from([src.to_string()]);
    let mut at = src.to_string();
    while at != dst {
        let nh = routes.next_hop(&at, dst).ok_or_else(|| RoutingError::Unreachable {
            at: at.clone(),
            dst: dst.to_string(),
        })?;
        if !seen.insert(nh.clone()) {
            let start = path.iter().position(|n| *n == nh).unwrap_or(0);
            let mut cycle = path[start..].to_vec();
            cycle.push(nh);
            return Err(RoutingError::Loop(cycle));
        }
        path.push(nh.clone());
        at = nh;
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteMetric {
    HopCount,
    PropagationDelay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct OracleConfig {
    pub metric: RouteMetric,
    /// `(source type, destination type)` pairs that get routes.
    pub pair_classes: Vec<(NodeType, NodeType)>,
    pub drain_lead_s: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            metric: RouteMetric::HopCount,
            pair_classes: vec![
                (NodeType::Satellite, NodeType::Satellite),
                (NodeType::Satellite, NodeType::Gateway),
            ],
            drain_lead_s: 5.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self, epoch_interval_s: f64) -> Result<(), RoutingError> {
        if !(self.drain_lead_s.is_finite() && self.drain_lead_s >= 0.0) {
            return Err(RoutingError::Config(format!("drain lead {} must be >= 0", self.drain_lead_s)));
        }
        let ratio = self.drain_lead_s / epoch_interval_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(RoutingError::Config(format!(
                "drain lead {} is not a multiple of the epoch interval {epoch_interval_s}",
                self.drain_lead_s
            )));
        }
        Ok(())
    }

    fn in_class(&self, src: NodeType, dst: NodeType) -> bool {
        self.pair_classes.iter().any(|&(a, b)| a == src && b == dst)
    }
}

/// Node universe in lexicographic name order, so that index order is name
/// order.
#[derive(Debug, Clone)]
pub struct NodeDirectory {
    names: Vec<String>,
    index: HashMap<String, usize>,
    types: Vec<NodeType>,
    loopbacks: Vec<String>,
}

impl NodeDirectory {
    /// `nodes` are `(name, type)`; a missing loopback falls back to the name.
    pub fn new(nodes: impl IntoIterator<Item = (String, NodeType)>, hosts: &Hosts) -> Self {
        let mut nodes: Vec<(String, NodeType)> = nodes.into_iter().collect();
        nodes.sort();
        nodes.dedup_by(|a, b| a.0 == b.0);
        let index = nodes.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let loopbacks = nodes
            .iter()
            .map(|(n, _)| hosts.get(n).cloned().unwrap_or_else(|| n.clone()))
            .collect();
        NodeDirectory {
            names: nodes.iter().map(|(n, _)| n.clone()).collect(),
            types: nodes.iter().map(|(_, t)| *t).collect(),
            index,
            loopbacks,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn node_type(&self, i: usize) -> NodeType {
        self.types[i]
    }

    pub fn loopback(&self, i: usize) -> &str {
        &self.loopbacks[i]
    }

    /// Only satellites forward transit traffic.
    pub fn is_transit(&self, i: usize) -> bool {
        self.types[i] == NodeType::Satellite
    }
}

/// Path cost: `(delay in microseconds, hops)`. Hop-count routing uses a zero
/// delay component.
pub type Cost = (u64, u32);

/// Undirected weighted graph over a [`NodeDirectory`], neighbor lists sorted
/// by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochGraph {
    pub adj: Vec<Vec<(usize, u64)>>,
}

impl EpochGraph {
    pub fn from_links<'a>(
        dir: &NodeDirectory,
        links: impl IntoIterator<Item = (&'a LinkKey, &'a LinkAttributes)>,
    ) -> Result<Self, RoutingError> {
        let mut adj = vec![Vec::new(); dir.len()];
        for (key, attrs) in links {
            let a = dir.index(&key.a).ok_or_else(|| RoutingError::UnknownNode(key.a.clone()))?;
            let b = dir.index(&key.b).ok_or_else(|| RoutingError::UnknownNode(key.b.clone()))?;
            let us = (attrs.delay_ms * 1000.0).round().max(0.0) as u64;
            adj[a].push((b, us));
            adj[b].push((a, us));
        }
        for n in &mut adj {
            n.sort_unstable();
        }
        Ok(EpochGraph { adj })
    }

    fn edge_cost(&self, metric: RouteMetric, w: u64) -> Cost {
        match metric {
            RouteMetric::HopCount => (0, 1),
            RouteMetric::PropagationDelay => (w, 1),
        }
    }

    /// Costs to `dst` from every node, never relaying through non-transit
    /// nodes.
    pub fn costs_to(&self, dir: &NodeDirectory, dst: usize, metric: RouteMetric) -> Vec<Option<Cost>> {
        let mut dist: Vec<Option<Cost>> = vec![None; self.adj.len()];
        dist[dst] = Some((0, 0));
        match metric {
            RouteMetric::HopCount => {
                let mut queue = VecDeque::from([dst]);
                while let Some(u) = queue.pop_front() {
                    if u != dst && !dir.is_transit(u) {
                        continue;
                    }
                    let du = dist[u].expect("queued nodes have a distance");
                    for &(v, _) in &self.adj[u] {
                        if dist[v].is_none() {
                            dist[v] = Some((0, du.1 + 1));
                            queue.push_back(v);
                        }
                    }
                }
            }
            RouteMetric::PropagationDelay => {
                let mut heap = BinaryHeap::from([Reverse(((0u64, 0u32), dst))]);
                while let Some(Reverse((d, u))) = heap.pop() {
                    if dist[u].is_some_and(|x| x < d) {
                        continue;
                    }
                    if u != dst && !dir.is_transit(u) {
                        continue;
                    }
                    for &(v, w) in &self.adj[u] {
                        let nd = (d.0 + w, d.1 + 1);
                        if dist[v].is_none_or(|x| nd < x) {
                            dist[v] = Some(nd);
                            heap.push(Reverse((nd, v)));
                        }
                    }
                }
            }
        }
        dist
    }

    /// Lowest-index next hop of `src` on a shortest path to `dst`.
    pub fn next_hop(
        &self,
        dir: &NodeDirectory,
        dist: &[Option<Cost>],
        src: usize,
        dst: usize,
        metric: RouteMetric,
    ) -> Option<usize> {
        let ds = dist[src]?;
        if src == dst {
            return None;
        }
        self.adj[src].iter().find_map(|&(n, w)| {
            if n != dst && !dir.is_transit(n) {
                return None;
            }
            let dn = dist[n]?;
            let c = self.edge_cost(metric, w);
            ((dn.0 + c.0, dn.1 + c.1) == ds).then_some(n)
        })
    }
}

/// Next hops for every in-class pair of one epoch, as `table[src][dst]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochRoutes {
    pub next: BTreeMap<(usize, usize), usize>,
}

impl EpochRoutes {
    pub fn to_static(&self, dir: &NodeDirectory) -> StaticRoutes {
        let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (&(s, d), &n) in &self.next {
            out.entry(dir.name(s).to_string())
                .or_default()
                .insert(dir.name(d).to_string(), dir.name(n).to_string());
        }
        StaticRoutes(out)
    }
}

/// Routes over `drained`; pairs it cannot connect fall back to `full`.
pub fn compute_routes(dir: &NodeDirectory, full: &EpochGraph, drained: &EpochGraph, cfg: &OracleConfig) -> EpochRoutes {
    let dsts: Vec<usize> = (0..dir.len())
        .filter(|&d| cfg.pair_classes.iter().any(|&(_, b)| b == dir.node_type(d)))
        .collect();
    let per_dst: Vec<Vec<((usize, usize), usize)>> = dsts
        .par_iter()
        .map(|&d| {
            let dd = drained.costs_to(dir, d, cfg.metric);
            let mut fd: Option<Vec<Option<Cost>>> = None;
            let mut out = Vec::new();
            for s in 0..dir.len() {
                if s == d || !cfg.in_class(dir.node_type(s), dir.node_type(d)) {
                    continue;
                }
                let nh = match drained.next_hop(dir, &dd, s, d, cfg.metric) {
                    Some(n) => Some(n),
                    None => {
                        let f = fd.get_or_insert_with(|| full.costs_to(dir, d, cfg.metric));
                        full.next_hop(dir, f, s, d, cfg.metric)
                    }
                };
                if let Some(n) = nh {
                    out.push(((s, d), n));
                }
            }
            out
        })
        .collect();
    EpochRoutes {
        next: per_dst.into_iter().flatten().collect(),
    }
}

/// Full and drained link sets of every epoch. The drained set omits links
/// deleted by any later epoch within `drain_lead_s`.
pub fn epoch_link_sets(epochs: &[EpochFile], drain_lead_s: f64) -> Vec<(LinkSet, LinkSet)> {
    let t0 = epochs.first().map(|e| e.time);
    let offs: Vec<f64> = epochs
        .iter()
        .map(|e| (e.time - t0.expect("non-empty")).num_microseconds().unwrap_or(0) as f64 / 1e6)
        .collect();
    let mut state = LinkSet::new();
    let mut out = Vec::with_capacity(epochs.len());
    for (k, file) in epochs.iter().enumerate() {
        apply_to_linkset(&mut state, file);
        let mut drained = state.clone();
        for j in k + 1..epochs.len() {
            if offs[j] - offs[k] > drain_lead_s + 1e-9 {
                break;
            }
            for del in &epochs[j].links_del {
                drained.remove(&del.key());
            }
        }
        out.push((state.clone(), drained));
    }
    out
}

/// Unreachable in-class pair observed from `epoch` on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnreachableEvent {
    pub epoch: usize,
    pub src: String,
    pub dst: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachabilityReport {
    /// One entry per transition into unreachability.
    pub events: Vec<UnreachableEvent>,
    /// Sum over epochs of unreachable in-class pairs.
    pub unreachable_pair_epochs: usize,
    pub tasks_emitted: usize,
}

/// Appends route-replace tasks to `epochs` wherever an in-class next hop
/// changes. Epoch 0 gets every initial route.
pub fn oracle_compute(
    epochs: &mut [EpochFile],
    dir: &NodeDirectory,
    cfg: &OracleConfig,
    epoch_interval_s: f64,
) -> Result<ReachabilityReport, RoutingError> {
    cfg.validate(epoch_interval_s)?;
    let sets = epoch_link_sets(epochs, cfg.drain_lead_s);
    let pairs: Vec<(usize, usize)> = (0..dir.len())
        .flat_map(|s| (0..dir.len()).map(move |d| (s, d)))
        .filter(|&(s, d)| s != d && cfg.in_class(dir.node_type(s), dir.node_type(d)))
        .collect();
    let mut report = ReachabilityReport::default();
    let mut prev: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, (full, drained)) in sets.iter().enumerate() {
        let full_g = EpochGraph::from_links(dir, full.iter().map(|(k, r)| (k, &r.attrs)))?;
        let drained_g = EpochGraph::from_links(dir, drained.iter().map(|(k, r)| (k, &r.attrs)))?;
        let routes = compute_routes(dir, &full_g, &drained_g, cfg);
        for &(s, d) in &pairs {
            match routes.next.get(&(s, d)) {
                Some(&n) => {
                    if prev.get(&(s, d)) != Some(&n) {
                        epochs[k].add_task(dir.name(s), route_task(dir.loopback(d), dir.name(n)));
                        report.tasks_emitted += 1;
                    }
                }
                None => {
                    report.unreachable_pair_epochs += 1;
                    if k == 0 || prev.contains_key(&(s, d)) {
                        report.events.push(UnreachableEvent {
                            epoch: k,
                            src: dir.name(s).to_string(),
                            dst: dir.name(d).to_string(),
                        });
                    }
                }
            }
        }
        prev = routes.next;
    }
    Ok(report)
}
