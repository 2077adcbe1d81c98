//! Watchable key-value state, epoch application and node agents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde_json::{json, Value};
use thiserror::Error;

use crate::linkmodel::LinkAttributes;
use crate::routing::{
    parse_route_task, plugin_for_module, Hosts, RouteEntry, RouteLookup, RouteMutation, RouteOrigin, RoutePlugin,
};
use crate::scenario::config::{AddressPlan, NodeConfig};
use crate::scenario::format::{format_time, EpochFile, FilePattern, LinkRecord};

pub const LINKS_PREFIX: &str = "/config/links/";
pub const NODES_PREFIX: &str = "/config/nodes/";
pub const RUN_PREFIX: &str = "/config/run/";
pub const HOSTS6_PREFIX: &str = "/config/etchosts6/";
pub const HOSTS4_PREFIX: &str = "/config/etchosts4/";
pub const WORKERS_PREFIX: &str = "/config/workers/";
pub const EPOCH_CONFIG_KEY: &str = "/config/epoch-config";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: parse error at line {line}, column {column}: {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("bad store dump: {0}")]
    Dump(String),
    #[error("{0}")]
    Pattern(String),
}

pub fn link_key(node: &str, peer: &str) -> String {
    format!("{LINKS_PREFIX}{node}/vl_{peer}")
}

pub fn node_key(node: &str) -> String {
    format!("{NODES_PREFIX}{node}")
}

pub fn run_key(node: &str) -> String {
    format!("{RUN_PREFIX}{node}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatchEvent {
    pub key: String,
    pub old: Option<Value>,
    pub new: Option<Value>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Filter {
    Prefix(String),
    Exact(String),
}

impl Filter {
    fn accepts(&self, key: &str) -> bool {
        match self {
            Filter::Prefix(p) => key.starts_with(p.as_str()),
            Filter::Exact(k) => key == k,
        }
    }
}

/// Receiving end of a watch registration.
#[derive(Debug)]
pub struct Watcher {
    rx: Receiver<WatchEvent>,
}

impl Watcher {
    /// Events delivered so far, without blocking.
    pub fn drain(&self) -> Vec<WatchEvent> {
        let mut out = Vec::new();
        loop {
            match self.rx.try_recv() {
                Ok(ev) => out.push(ev),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => return out,
            }
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<WatchEvent> {
        self.rx.recv_timeout(timeout).ok()
    }
}

/// Single-writer key-value store with revisions and prefix watches.
#[derive(Debug, Default)]
pub struct KeyValueStore {
    data: BTreeMap<String, Value>,
    revision: u64,
    watchers: Vec<(Filter, Sender<WatchEvent>)>,
}

impl KeyValueStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.data.get(key)
    }

    /// Entries under `prefix`, in key order.
    pub fn range<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Value)> + 'a {
        self.data
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
    }

    pub fn put(&mut self, key: &str, value: Value) -> u64 {
        let old = self.data.insert(key.to_string(), value.clone());
        self.notify(key, old, Some(value))
    }

    pub fn delete(&mut self, key: &str) -> Option<u64> {
        let old = self.data.remove(key)?;
        Some(self.notify(key, Some(old), None))
    }

    fn notify(&mut self, key: &str, old: Option<Value>, new: Option<Value>) -> u64 {
        self.revision += 1;
        let ev = WatchEvent {
            key: key.to_string(),
            old,
            new,
            revision: self.revision,
        };
        // dropped receivers unsubscribe themselves
        self.watchers
            .retain(|(f, tx)| !f.accepts(key) || tx.send(ev.clone()).is_ok());
        self.revision
    }

    pub fn watch_prefix(&mut self, prefix: &str) -> Watcher {
        let (tx, rx) = mpsc::channel();
        self.watchers.push((Filter::Prefix(prefix.to_string()), tx));
        Watcher { rx }
    }

    pub fn watch_key(&mut self, key: &str) -> Watcher {
        let (tx, rx) = mpsc::channel();
        self.watchers.push((Filter::Exact(key.to_string()), tx));
        Watcher { rx }
    }

    /// Key-sorted JSON map of the whole store.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(&self.data).expect("store serialises")
    }

    pub fn load(text: &str) -> Result<Self, StoreError> {
        let data: BTreeMap<String, Value> =
            serde_json::from_str(text).map_err(|e| StoreError::Dump(e.to_string()))?;
        Ok(KeyValueStore {
            data,
            revision: 0,
            watchers: Vec::new(),
        })
    }

    pub fn has_node(&self, node: &str) -> bool {
        self.data.contains_key(&node_key(node))
    }

    /// Loopback map, IPv6 entries preferred.
    pub fn hosts(&self) -> Hosts {
        let mut hosts = Hosts::new();
        for prefix in [HOSTS4_PREFIX, HOSTS6_PREFIX] {
            for (k, v) in self.range(prefix) {
                if let Some(addr) = v.as_str() {
                    hosts.insert(k[prefix.len()..].to_string(), addr.to_string());
                }
            }
        }
        hosts
    }
}

/// Writes node configurations and name-resolution entries.
pub fn initialize(store: &mut KeyValueStore, nodes: &[NodeConfig], plan: &AddressPlan) {
    for n in nodes {
        store.put(&node_key(&n.name), n.to_json());
    }
    for (name, (_, lo)) in &plan.v6 {
        store.put(&format!("{HOSTS6_PREFIX}{name}"), Value::String(lo.to_string()));
    }
    for (name, (_, lo)) in &plan.v4 {
        store.put(&format!("{HOSTS4_PREFIX}{name}"), Value::String(lo.to_string()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Del,
    Update,
    Add,
    Run,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedEntry {
    pub kind: EntryKind,
    pub endpoints: (String, String),
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MutationSummary {
    pub links_deleted: usize,
    pub links_updated: usize,
    pub links_added: usize,
    pub task_lists: usize,
    /// Individual key writes and deletes, epoch-config excluded.
    pub mutations: usize,
    pub rejected: Vec<RejectedEntry>,
}

impl MutationSummary {
    pub fn link_mutations(&self) -> usize {
        self.links_deleted + self.links_updated + self.links_added
    }
}

fn put_link(store: &mut KeyValueStore, rec: &LinkRecord) -> usize {
    let v = rec.to_json();
    let mut n = 0;
    for (a, b) in [(&rec.endpoint1, &rec.endpoint2), (&rec.endpoint2, &rec.endpoint1)] {
        let key = link_key(a, b);
        if store.get(&key) != Some(&v) {
            store.put(&key, v.clone());
            n += 1;
        }
    }
    n
}

/// Applies deletes, then updates, then adds, then task lists; entries that
/// reference unknown nodes are skipped and reported.
pub fn apply_epoch(store: &mut KeyValueStore, file: &EpochFile, file_name: &str) -> MutationSummary {
    let mut s = MutationSummary::default();
    let unknown = |store: &KeyValueStore, a: &str, b: &str| -> Option<String> {
        [a, b]
            .into_iter()
            .find(|n| !store.has_node(n))
            .map(|n| format!("unknown node `{n}`"))
    };
    let reject = |s: &mut MutationSummary, kind, a: &str, b: &str, reason: String| {
        s.rejected.push(RejectedEntry {
            kind,
            endpoints: (a.to_string(), b.to_string()),
            reason,
        })
    };
    for del in &file.links_del {
        let (a, b) = (&del.endpoint1, &del.endpoint2);
        if let Some(r) = unknown(store, a, b) {
            reject(&mut s, EntryKind::Del, a, b, r);
            continue;
        }
        let n = [link_key(a, b), link_key(b, a)]
            .iter()
            .filter(|k| store.delete(k).is_some())
            .count();
        if n > 0 {
            s.links_deleted += 1;
            s.mutations += n;
        }
    }
    for rec in &file.links_update {
        let (a, b) = (&rec.endpoint1, &rec.endpoint2);
        if let Some(r) = unknown(store, a, b) {
            reject(&mut s, EntryKind::Update, a, b, r);
            continue;
        }
        if store.get(&link_key(a, b)).is_none() {
            reject(&mut s, EntryKind::Update, a, b, "update of a link that does not exist".into());
            continue;
        }
        let n = put_link(store, rec);
        if n > 0 {
            s.links_updated += 1;
            s.mutations += n;
        }
    }
    for rec in &file.links_add {
        let (a, b) = (&rec.endpoint1, &rec.endpoint2);
        if let Some(r) = unknown(store, a, b) {
            reject(&mut s, EntryKind::Add, a, b, r);
            continue;
        }
        let existed = store.get(&link_key(a, b)).is_some();
        let n = put_link(store, rec);
        if n > 0 {
            if existed {
                s.links_updated += 1;
            } else {
                s.links_added += 1;
            }
            s.mutations += n;
        }
    }
    for (node, tasks) in &file.run {
        if !store.has_node(node) {
            reject(&mut s, EntryKind::Run, node, node, format!("unknown node `{node}`"));
            continue;
        }
        store.put(&run_key(node), json!(tasks));
        s.task_lists += 1;
        s.mutations += 1;
    }
    store.put(
        EPOCH_CONFIG_KEY,
        json!({"epoch-time": format_time(&file.time), "epoch-file": file_name}),
    );
    s
}

/// One epoch as carried by a real-time queue.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedEpoch {
    pub name: String,
    pub text: String,
}

pub enum EpochRunMode {
    /// Files `pattern` in `dir`, ascending index. Inter-file gaps are slept
    /// for `gap * time_scale`; `0` runs as fast as possible.
    Discrete {
        dir: PathBuf,
        pattern: String,
        time_scale: f64,
    },
    /// Files applied as they arrive, until the sender hangs up.
    RealTime(Receiver<QueuedEpoch>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub applied: Vec<String>,
    pub clock: Vec<DateTime<Utc>>,
    pub summaries: Vec<MutationSummary>,
}

/// Matching files of `dir`, sorted by epoch index.
pub fn list_epoch_files(dir: &Path, pattern: &str) -> Result<Vec<(usize, PathBuf)>, StoreError> {
    let pat = FilePattern::new(pattern).map_err(|e| StoreError::Pattern(e.to_string()))?;
    let rd = std::fs::read_dir(dir).map_err(|e| StoreError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| StoreError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(k) = pat.index(&name) {
            files.push((k, entry.path()));
        }
    }
    files.sort();
    Ok(files)
}

pub fn parse_epoch(name: &str, text: &str) -> Result<EpochFile, StoreError> {
    EpochFile::from_json_str(text).map_err(|e| StoreError::Parse {
        file: name.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Applies every epoch of `mode` in order. `after_each` sees the store once
/// each file is in, with the simulated clock at the file's time.
pub fn run_epochs(
    store: &mut KeyValueStore,
    mode: EpochRunMode,
    mut after_each: impl FnMut(&mut KeyValueStore, &EpochFile, &MutationSummary),
) -> Result<RunReport, StoreError> {
    let mut report = RunReport::default();
    let mut step = |store: &mut KeyValueStore, name: &str, file: EpochFile, report: &mut RunReport| {
        let summary = apply_epoch(store, &file, name);
        after_each(store, &file, &summary);
        report.applied.push(name.to_string());
        report.clock.push(file.time);
        report.summaries.push(summary);
    };
    match mode {
        EpochRunMode::Discrete { dir, pattern, time_scale } => {
            let mut prev: Option<DateTime<Utc>> = None;
            for (_, path) in list_epoch_files(&dir, &pattern)? {
                let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
                let text = std::fs::read_to_string(&path).map_err(|e| StoreError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                let file = parse_epoch(&name, &text)?;
                if let Some(p) = prev {
                    let gap = (file.time - p).num_microseconds().unwrap_or(0) as f64 / 1e6;
                    if time_scale > 0.0 && gap > 0.0 {
                        std::thread::sleep(Duration::from_secs_f64(gap * time_scale));
                    }
                }
                prev = Some(file.time);
                step(store, &name, file, &mut report);
            }
        }
        EpochRunMode::RealTime(rx) => {
            for q in rx {
                let file = parse_epoch(&q.name, &q.text)?;
                step(store, &q.name, file, &mut report);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskOutcome {
    Executed,
    Rejected(String),
    Unrecognized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub revision: u64,
    pub command: String,
    pub outcome: TaskOutcome,
}

/// Per-node reactor over the node's link subtree and task key.
pub struct NodeAgent {
    pub name: String,
    pub links: BTreeMap<String, LinkAttributes>,
    pub routes: BTreeMap<String, RouteEntry>,
    pub task_log: Vec<TaskRecord>,
    plugin: Box<dyn RoutePlugin>,
    hosts: Hosts,
    link_watch: Watcher,
    run_watch: Watcher,
    link_prefix: String,
}

impl std::fmt::Debug for NodeAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeAgent")
            .field("name", &self.name)
            .field("plugin", &self.plugin.name())
            .field("links", &self.links.len())
            .field("routes", &self.routes.len())
            .finish()
    }
}

impl NodeAgent {
    /// Subscribes and replays the node's current links as adds.
    pub fn start(store: &mut KeyValueStore, name: &str, plugin: Box<dyn RoutePlugin>) -> Self {
        let link_prefix = format!("{LINKS_PREFIX}{name}/");
        let link_watch = store.watch_prefix(&link_prefix);
        let run_watch = store.watch_key(&run_key(name));
        let mut agent = NodeAgent {
            name: name.to_string(),
            links: BTreeMap::new(),
            routes: BTreeMap::new(),
            task_log: Vec::new(),
            plugin,
            hosts: store.hosts(),
            link_watch,
            run_watch,
            link_prefix,
        };
        let existing: Vec<(String, Value)> = store
            .range(&agent.link_prefix)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (key, value) in existing {
            agent.handle(WatchEvent {
                key,
                old: None,
                new: Some(value),
                revision: store.revision(),
            });
        }
        agent
    }

    /// Starts an agent with the plug-in named by the node's configuration.
    pub fn start_configured(store: &mut KeyValueStore, name: &str) -> Self {
        let module = store
            .get(&node_key(name))
            .and_then(|n| n.pointer("/L3-config/routing-module"))
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        Self::start(store, name, plugin_for_module(&module))
    }

    pub fn plugin_name(&self) -> &str {
        self.plugin.name()
    }

    pub fn refresh_hosts(&mut self, store: &KeyValueStore) {
        self.hosts = store.hosts();
    }

    /// Handles every pending event in revision order; returns how many.
    pub fn process_pending(&mut self) -> usize {
        let mut events = self.link_watch.drain();
        events.extend(self.run_watch.drain());
        events.sort_by_key(|e| e.revision);
        let n = events.len();
        for ev in events {
            self.handle(ev);
        }
        n
    }

    fn apply(&mut self, muts: Vec<RouteMutation>) {
        for m in muts {
            match m {
                RouteMutation::Replace(e) => {
                    self.routes.insert(e.dest.clone(), e);
                }
                RouteMutation::Remove { dest, origin } => {
                    if self.routes.get(&dest).is_some_and(|e| e.origin == origin) {
                        self.routes.remove(&dest);
                    }
                }
            }
        }
    }

    fn handle(&mut self, ev: WatchEvent) {
        if let Some(peer) = ev.key.strip_prefix(&self.link_prefix).and_then(|k| k.strip_prefix("vl_")) {
            let peer = peer.to_string();
            match &ev.new {
                Some(v) => {
                    let attrs = match LinkRecord::from_json(v) {
                        Ok(r) => r.attrs,
                        Err(_) => return,
                    };
                    let existed = self.links.insert(peer.clone(), attrs).is_some();
                    let muts = if existed {
                        self.plugin.on_link_update(&self.name, &peer, &attrs, &self.hosts)
                    } else {
                        self.plugin.on_link_add(&self.name, &peer, &attrs, &self.hosts)
                    };
                    self.apply(muts);
                }
                None => {
                    if self.links.remove(&peer).is_some() {
                        let muts = self.plugin.on_link_del(&self.name, &peer, &self.hosts);
                        self.apply(muts);
                        self.routes.retain(|_, r| r.next_hop != peer);
                    }
                }
            }
        } else if ev.key == run_key(&self.name) {
            let tasks: Vec<String> = ev
                .new
                .as_ref()
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            for t in tasks {
                let outcome = self.execute(&t);
                self.task_log.push(TaskRecord {
                    revision: ev.revision,
                    command: t,
                    outcome,
                });
            }
        }
    }

    fn execute(&mut self, task: &str) -> TaskOutcome {
        let Some((dest, via)) = parse_route_task(task) else {
            return TaskOutcome::Unrecognized;
        };
        let next_hop = if self.links.contains_key(&via) {
            via
        } else if let Some((name, _)) = self.hosts.iter().find(|(_, a)| **a == via) {
            name.clone()
        } else {
            via
        };
        if !self.links.contains_key(&next_hop) {
            return TaskOutcome::Rejected(format!("next hop `{next_hop}` is not a neighbor"));
        }
        self.routes.insert(
            dest.clone(),
            RouteEntry {
                dest,
                next_hop,
                origin: RouteOrigin::Oracle,
            },
        );
        TaskOutcome::Executed
    }

    /// Next hop towards the loopback `dest`.
    pub fn route_to(&self, dest: &str) -> Option<&RouteEntry> {
        self.routes.get(dest)
    }
}

/// Every node's agent, driven deterministically on one thread.
#[derive(Debug, Default)]
pub struct AgentSet {
    pub agents: BTreeMap<String, NodeAgent>,
    hosts: Hosts,
}

impl AgentSet {
    /// Starts one agent per `/config/nodes/` entry.
    pub fn start_all(store: &mut KeyValueStore) -> Self {
        let names: Vec<String> = store
            .range(NODES_PREFIX)
            .map(|(k, _)| k[NODES_PREFIX.len()..].to_string())
            .collect();
        let agents = names
            .iter()
            .map(|n| (n.clone(), NodeAgent::start_configured(store, n)))
            .collect();
        AgentSet {
            agents,
            hosts: store.hosts(),
        }
    }

    pub fn process_all(&mut self) -> usize {
        self.agents.values_mut().map(NodeAgent::process_pending).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NodeAgent> {
        self.agents.get(name)
    }
}

impl RouteLookup for AgentSet {
    fn next_hop(&self, node: &str, dst: &str) -> Option<String> {
        let agent = self.agents.get(node)?;
        if agent.links.contains_key(dst) {
            // directly connected destinations need no table entry
            if let Some(r) = self.hosts.get(dst).and_then(|lo| agent.routes.get(lo)) {
                return Some(r.next_hop.clone());
            }
            return Some(dst.to_string());
        }
        let lo = self.hosts.get(dst).map(String::as_str).unwrap_or(dst);
        agent.routes.get(lo).map(|r| r.next_hop.clone())
    }
}
