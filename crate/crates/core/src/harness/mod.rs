//! Experiment driver: scenario preparation, epoch replay with the session
//! control plane in the loop, probe traces and reports.

pub mod cli;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::orbit::{remaining_visibility, GroundKind, GroundNode, Position3D, VisibilityScan};
use crate::placement::{apply_placement, link_activity_weights, partition, PlacementError, PlacementGraph, WorkerSpec};
use crate::routing::{oracle_compute, resolve_path, Hosts, NodeDirectory, OracleConfig, ReachabilityReport, RoutingError};
use crate::scenario::generate::{sat_index, sat_name};
use crate::scenario::{
    assign_addresses, merge_common_config, AddressPlan, EpochFile, FilePattern, GeneratorConfig, NodeConfig, NodeType,
    ScenarioError, ScenarioModel,
};
use crate::srv6::{
    events_to_jsonl, path_delay_ms, path_delivery, sid_path, AccessInfo, EventKind, HandoverConfig, NetworkView,
    SessionEvent, SidList, Srv6Controller, Srv6Error, Strategy, TunnelTimeline,
};
use crate::statestore::{
    initialize, run_epochs, AgentSet, EpochRunMode, KeyValueStore, StoreError, TaskOutcome, WORKERS_PREFIX,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Srv6(#[from] Srv6Error),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error("epoch {epoch}: {detail}")]
    Inconsistent { epoch: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("selector `{selector}` matches no node; valid keys: {}", valid_keys.join(", "))]
    UnknownSelector { selector: String, valid_keys: Vec<String> },
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub const SAT_CONFIG_FILE: &str = "sat-config.json";
pub const GENERATOR_FILE: &str = "generator-config.json";

/// Generated scenario with addresses and oracle routes.
#[derive(Debug)]
pub struct Prepared {
    pub model: ScenarioModel,
    pub nodes: Vec<NodeConfig>,
    pub plan: AddressPlan,
    pub epochs: Vec<EpochFile>,
    pub reachability: ReachabilityReport,
}

/// Merged node configurations and their addresses.
pub fn build_nodes(model: &ScenarioModel) -> Result<(Vec<NodeConfig>, AddressPlan), ScenarioError> {
    let sc = model.sat_config();
    let mut nodes = sc
        .nodes
        .iter()
        .map(|(name, v)| {
            let specific = v.as_object().cloned().unwrap_or_default();
            merge_common_config(name, &specific, &sc.node_config_common)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let plan = assign_addresses(&mut nodes)?;
    Ok((nodes, plan))
}

pub fn hosts_of(plan: &AddressPlan) -> Hosts {
    plan.v6
        .keys()
        .chain(plan.v4.keys())
        .filter_map(|n| plan.loopback(n).map(|a| (n.clone(), a.to_string())))
        .collect()
}

pub fn directory(nodes: &[NodeConfig], plan: &AddressPlan) -> NodeDirectory {
    NodeDirectory::new(nodes.iter().map(|n| (n.name.clone(), n.node_type)), &hosts_of(plan))
}

/// Generates epochs and appends oracle route tasks.
pub fn prepare(config: GeneratorConfig, oracle: &OracleConfig) -> Result<Prepared, HarnessError> {
    let model = ScenarioModel::new(config)?;
    let mut epochs = model.generate_epochs()?;
    let (nodes, plan) = build_nodes(&model)?;
    let dir = directory(&nodes, &plan);
    let reachability = oracle_compute(&mut epochs, &dir, oracle, model.quantization().epoch_interval_s)?;
    Ok(Prepared {
        model,
        nodes,
        plan,
        epochs,
        reachability,
    })
}

/// Writes the scenario and a copy of its generator configuration.
pub fn write_scenario(p: &Prepared, out_dir: &Path) -> Result<(), HarnessError> {
    p.model.write(out_dir, &p.epochs)?;
    let path = out_dir.join(GENERATOR_FILE);
    let text = serde_json::to_string_pretty(&p.model.config).expect("config serialises");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn generated_matches(dir: &Path, config: &GeneratorConfig) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join(GENERATOR_FILE)) else {
        return false;
    };
    let Ok(existing) = serde_json::from_str::<GeneratorConfig>(&text) else {
        return false;
    };
    let epochs = dir.join(&config.epoch_dir);
    existing == *config && epochs.is_dir()
}

/// Loads configuration into a fresh store, placing nodes when workers are given.
pub fn init_store(
    nodes: &mut [NodeConfig],
    plan: &AddressPlan,
    workers: &[WorkerSpec],
    epochs: &[EpochFile],
    seed: u64,
) -> Result<KeyValueStore, HarnessError> {
    let mut store = KeyValueStore::new();
    if !workers.is_empty() {
        let g = PlacementGraph::from_nodes(nodes, &link_activity_weights(epochs));
        let placement = partition(&g, workers, seed)?;
        apply_placement(nodes, &placement);
        for w in workers {
            let v = serde_json::json!({
                "cpu": w.cpu_capacity,
                "mem": w.mem_capacity,
                "ip": w.underlay_ip,
            });
            store.put(&format!("{WORKERS_PREFIX}{}", w.name), v);
        }
    }
    initialize(&mut store, nodes, plan);
    Ok(store)
}

/// Gateway each user is bound to: configured, else the closest one.
pub fn user_bindings(ground: &[GroundNode]) -> BTreeMap<String, String> {
    let gateways: Vec<&GroundNode> = ground.iter().filter(|g| g.kind == GroundKind::Gateway).collect();
    let mut out = BTreeMap::new();
    for u in ground.iter().filter(|g| g.kind == GroundKind::User) {
        let gw = u.gateway.clone().or_else(|| {
            let up = u.position();
            gateways
                .iter()
                .min_by(|a, b| {
                    let da = a.position().sub(&up).norm();
                    let db = b.position().sub(&up).norm();
                    da.total_cmp(&db).then(a.name.cmp(&b.name))
                })
                .map(|g| g.name.clone())
        });
        if let Some(gw) = gw {
            out.insert(u.name.clone(), gw);
        }
    }
    out
}

/// The network as seen by the control plane during one epoch.
pub struct EpochView<'a> {
    pub agents: &'a AgentSet,
    pub model: &'a ScenarioModel,
    pub ground: &'a BTreeMap<String, Position3D>,
    pub t: f64,
    pub scan: VisibilityScan,
    vis_cache: RefCell<HashMap<(String, String), f64>>,
    hop_cache: RefCell<HashMap<String, HashMap<String, u32>>>,
    route_cache: RefCell<HashMap<(String, String), Option<Vec<String>>>>,
}

impl<'a> EpochView<'a> {
    pub fn new(
        agents: &'a AgentSet,
        model: &'a ScenarioModel,
        ground: &'a BTreeMap<String, Position3D>,
        t: f64,
        scan: VisibilityScan,
    ) -> Self {
        EpochView {
            agents,
            model,
            ground,
            t,
            scan,
            vis_cache: RefCell::default(),
            hop_cache: RefCell::default(),
            route_cache: RefCell::default(),
        }
    }

    fn isl_hops_from(&self, src: &str) -> HashMap<String, u32> {
        let mut dist = HashMap::from([(src.to_string(), 0u32)]);
        let mut q = VecDeque::from([src.to_string()]);
        while let Some(u) = q.pop_front() {
            let d = dist[&u];
            let Some(agent) = self.agents.get(&u) else { continue };
            for peer in agent.links.keys() {
                if self.ground.contains_key(peer) || dist.contains_key(peer) {
                    continue;
                }
                dist.insert(peer.clone(), d + 1);
                q.push_back(peer.clone());
            }
        }
        dist
    }

    /// Satellites whose motion is northbound at `t`.
    pub fn is_ascending(&self, sat: &str) -> Option<bool> {
        sat_index(sat).map(|i| self.model.constellation.is_ascending(i, self.t))
    }
}

impl NetworkView for EpochView<'_> {
    fn access(&self, ground: &str) -> Vec<AccessInfo> {
        let Some(agent) = self.agents.get(ground) else {
            return Vec::new();
        };
        agent
            .links
            .iter()
            .map(|(sat, a)| AccessInfo {
                sat: sat.clone(),
                delay_ms: a.delay_ms,
                rate_mbps: a.rate_mbps,
            })
            .collect()
    }

    fn remaining_visibility(&self, ground: &str, sat: &str) -> f64 {
        let key = (ground.to_string(), sat.to_string());
        if let Some(v) = self.vis_cache.borrow().get(&key) {
            return *v;
        }
        let v = match (self.ground.get(ground), sat_index(sat)) {
            (Some(pos), Some(i)) => remaining_visibility(&self.model.constellation, i, pos, self.t, &self.scan),
            _ => 0.0,
        };
        self.vis_cache.borrow_mut().insert(key, v);
        v
    }

    fn orbit_hops(&self, a: &str, b: &str) -> Option<u32> {
        if let Some(d) = self.hop_cache.borrow().get(a) {
            return d.get(b).copied();
        }
        let d = self.isl_hops_from(a);
        let out = d.get(b).copied();
        self.hop_cache.borrow_mut().insert(a.to_string(), d);
        out
    }

    fn route(&self, src: &str, dst: &str) -> Option<Vec<String>> {
        let key = (src.to_string(), dst.to_string());
        if let Some(p) = self.route_cache.borrow().get(&key) {
            return p.clone();
        }
        let p = resolve_path(self.agents, src, dst).ok();
        self.route_cache.borrow_mut().insert(key, p.clone());
        p
    }

    fn link(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        self.agents
            .get(a)?
            .links
            .get(b)
            .map(|l| (l.delay_ms, l.loss_fraction))
    }

    fn is_ground(&self, node: &str) -> bool {
        self.ground.contains_key(node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub handover: HandoverConfig,
    pub duration_s: Option<f64>,
    pub probe_period_ms: f64,
    pub seed: u64,
    pub loss_model: bool,
    /// Users probed; `None` probes every user.
    pub probe_users: Option<Vec<String>>,
    pub oracle: OracleConfig,
    /// Scenario files are generated here, or reused when already present.
    pub work_dir: PathBuf,
    pub time_scale: f64,
    pub visibility_lookahead_s: f64,
}

impl ExperimentConfig {
    pub fn new(generator: GeneratorConfig, strategy: Strategy, work_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            generator,
            handover: HandoverConfig::with_strategy(strategy),
            duration_s: None,
            probe_period_ms: 10.0,
            seed: 1,
            loss_model: true,
            probe_users: None,
            oracle: OracleConfig::default(),
            work_dir: work_dir.into(),
            time_scale: 0.0,
            visibility_lookahead_s: 1800.0,
        }
    }

    fn generator_config(&self) -> GeneratorConfig {
        match self.duration_s {
            Some(d) => self.generator.clone().with_duration(d),
            None => self.generator.clone(),
        }
    }
}

/// One ping probe from a user to its gateway.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSample {
    pub t_s: f64,
    pub user: String,
    pub gateway: String,
    /// `None` when lost.
    pub rtt_ms: Option<f64>,
    /// ISL hops of the uplink path.
    pub hops: Option<u32>,
    pub uss: Option<String>,
    pub gss: Option<String>,
    /// Serving satellites move in opposite directions.
    pub seam_split: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UserSummary {
    pub gateway: String,
    pub probes: usize,
    pub lost: usize,
    pub handovers: usize,
    pub cancels: usize,
    pub reregistrations: usize,
    pub rtt_p50_ms: Option<f64>,
    pub rtt_p90_ms: Option<f64>,
    pub rtt_p99_ms: Option<f64>,
    pub max_isl_hops: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub duration_s: f64,
    pub seed: u64,
    pub epochs: usize,
    pub handovers: usize,
    pub max_isl_hops: Option<u32>,
    pub users: BTreeMap<String, UserSummary>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub traces: Vec<ProbeSample>,
    pub events: Vec<SessionEvent>,
    pub summary: Summary,
    /// Per user, intervals of send times whose probes a handover may hold.
    pub handover_windows: BTreeMap<String, Vec<(f64, f64)>>,
    pub final_dump: String,
}

/// Nearest-rank quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

fn isl_hops(path: &[String], ground: &BTreeMap<String, Position3D>) -> u32 {
    path.windows(2)
        .filter(|w| !ground.contains_key(&w[0]) && !ground.contains_key(&w[1]))
        .count() as u32
}

/// Resolved tunnels of one epoch, keyed by source and SID list.
#[derive(Debug, Default)]
pub struct TunnelCache {
    paths: HashMap<(String, SidList), Option<(Vec<String>, f64)>>,
}

impl TunnelCache {
    pub fn tunnel(&mut self, view: &dyn NetworkView, source: &str, sids: &SidList) -> Option<(Vec<String>, f64)> {
        let key = (source.to_string(), sids.clone());
        if let Some(v) = self.paths.get(&key) {
            return v.clone();
        }
        let v = sid_path(view, source, sids)
            .ok()
            .and_then(|p| path_delay_ms(view, &p).map(|d| (p, d)));
        self.paths.insert(key, v.clone());
        v
    }
}

/// A probe that found a tunnel both ways.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFlight {
    pub rtt_ms: f64,
    pub reverse_sids: SidList,
    pub up_path: Vec<String>,
    pub down_path: Vec<String>,
    /// Probability that neither direction drops the probe.
    pub delivery: f64,
}

/// Echo request sent by `user` at `s`, answered by `gateway`. Pauses hold
/// packets until they end; `None` when a tunnel is missing or broken.
pub fn simulate_probe(
    view: &dyn NetworkView,
    tl: &TunnelTimeline,
    cache: &mut TunnelCache,
    user: &str,
    gateway: &str,
    s: f64,
) -> Option<ProbeFlight> {
    let depart = tl.uplink_release(s);
    let rev = tl.uplink_at(depart)?.clone();
    let (up_path, up_ms) = cache.tunnel(view, user, &rev)?;
    let g_depart = tl.downlink_release(depart + up_ms / 1000.0);
    let fwd = tl.downlink_at(g_depart)?.clone();
    let (down_path, down_ms) = cache.tunnel(view, gateway, &fwd)?;
    let rtt = (g_depart + down_ms / 1000.0 - s) * 1000.0;
    Some(ProbeFlight {
        rtt_ms: (rtt * 1e6).round() / 1e6,
        delivery: path_delivery(view, &up_path) * path_delivery(view, &down_path),
        reverse_sids: rev,
        up_path,
        down_path,
    })
}

fn user_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Replays the scenario with the control plane and probes in the loop.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    cfg.handover.validate()?;
    if !(cfg.probe_period_ms > 0.0) {
        return Err(HarnessError::Usage("probe period must be positive".into()));
    }
    let gen = cfg.generator_config();
    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| io_err(&cfg.work_dir, e))?;
    let interval = gen.quantization.epoch_interval_s;
    let ratio = cfg.handover.control_interval_s / interval;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
        return Err(HarnessError::Usage(format!(
            "control interval {} s is not a multiple of the epoch interval {interval} s",
            cfg.handover.control_interval_s
        )));
    }
    let control_every = ratio.round() as usize;
    let (model, mut nodes, plan, epochs) = if generated_matches(&cfg.work_dir, &gen) {
        let model = ScenarioModel::new(gen)?;
        let (nodes, plan) = build_nodes(&model)?;
        (model, nodes, plan, Vec::new())
    } else {
        let p = prepare(gen, &cfg.oracle)?;
        write_scenario(&p, &cfg.work_dir)?;
        (p.model, p.nodes, p.plan, p.epochs)
    };
    drop(epochs);
    let mut store = init_store(&mut nodes, &plan, &[], &[], cfg.seed)?;
    let mut agents = AgentSet::start_all(&mut store);

    let ground: BTreeMap<String, Position3D> = model
        .config
        .ground_nodes
        .iter()
        .map(|g| (g.name.clone(), g.position()))
        .collect();
    let bindings = user_bindings(&model.config.ground_nodes);
    let mut controller = Srv6Controller::new(cfg.handover.clone(), bindings.clone())?;
    let probed: Vec<String> = bindings
        .keys()
        .filter(|u| cfg.probe_users.as_ref().is_none_or(|only| only.contains(u)))
        .cloned()
        .collect();
    let mut rngs: BTreeMap<String, ChaCha8Rng> = bindings
        .keys()
        .enumerate()
        .map(|(i, u)| (u.clone(), user_stream(cfg.seed, i)))
        .collect();
    let scan = VisibilityScan {
        min_elevation_deg: model.config.min_elevation_deg,
        step_s: cfg.handover.control_interval_s,
        max_lookahead_s: cfg.visibility_lookahead_s,
    };
    let duration = model.config.duration_s;
    let start = model.config.start_time;
    let period = cfg.probe_period_ms / 1000.0;
    let mut traces: Vec<ProbeSample> = Vec::new();
    let mut last_rtt: BTreeMap<String, f64> = BTreeMap::new();
    let mut windows: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut failure: Option<HarnessError> = None;
    let mut epoch = 0usize;
    let mut task_seen: BTreeMap<String, usize> = BTreeMap::new();

    let mode = EpochRunMode::Discrete {
        dir: cfg.work_dir.join(&model.config.epoch_dir),
        pattern: model.config.file_pattern.clone(),
        time_scale: cfg.time_scale,
    };
    run_epochs(&mut store, mode, |_store, file, summary| {
        let k = epoch;
        epoch += 1;
        if failure.is_some() {
            return;
        }
        if let Some(r) = summary.rejected.first() {
            failure = Some(HarnessError::Inconsistent {
                epoch: k,
                detail: format!("{:?} {}-{} rejected: {}", r.kind, r.endpoints.0, r.endpoints.1, r.reason),
            });
            return;
        }
        agents.process_all();
        for (name, agent) in &agents.agents {
            let seen = task_seen.entry(name.clone()).or_insert(0);
            if let Some(bad) = agent.task_log[*seen..]
                .iter()
                .find(|t| matches!(t.outcome, TaskOutcome::Rejected(_)))
            {
                failure = Some(HarnessError::Inconsistent {
                    epoch: k,
                    detail: format!("task `{}` on {name}: {:?}", bad.command, bad.outcome),
                });
                return;
            }
            *seen = agent.task_log.len();
        }
        let t = (file.time - start).num_microseconds().unwrap_or(0) as f64 / 1e6;
        let view = EpochView::new(&agents, &model, &ground, t, scan.clone());

        if k % control_every == 0 {
            let before = controller.log.len();
            controller.control_step(&view, t);
            let new_events = controller.log[before..].to_vec();
            for ev in new_events.iter().filter(|e| e.event == EventKind::HoCommand) {
                let end = new_events
                    .iter()
                    .find(|e| e.session == ev.session && matches!(e.event, EventKind::HoComplete | EventKind::HoCancel))
                    .map_or(ev.t, |e| e.t);
                let t_user = controller.timelines[&ev.session]
                    .uplink_pauses
                    .last()
                    .filter(|p| p.0 >= ev.t)
                    .map_or(ev.t, |p| p.1);
                let lead = last_rtt.get(&ev.session).copied().unwrap_or(0.0) / 1000.0;
                windows
                    .entry(ev.session.clone())
                    .or_default()
                    .push((ev.t - lead, end.max(t_user)));
            }
        }

        let t_next = (t + interval).min(duration);
        let n_probes = ((t_next - t) / period - 1e-9).ceil().max(0.0) as usize;
        let mut cache = TunnelCache::default();
        for user in &probed {
            let gateway = &bindings[user];
            let tl = &controller.timelines[user];
            let rng = rngs.get_mut(user).expect("stream per user");
            for i in 0..n_probes {
                let s = t + i as f64 * period;
                let mut sample = ProbeSample {
                    t_s: s,
                    user: user.clone(),
                    gateway: gateway.clone(),
                    rtt_ms: None,
                    hops: None,
                    uss: None,
                    gss: None,
                    seam_split: false,
                };
                let draw: f64 = if cfg.loss_model { rng.gen() } else { 0.0 };
                if let Some(f) = simulate_probe(&view, tl, &mut cache, user, gateway, s) {
                    let rev = &f.reverse_sids;
                    sample.uss = rev.0.first().cloned();
                    sample.gss = rev.0.get(rev.len().saturating_sub(2)).cloned();
                    sample.hops = Some(isl_hops(&f.up_path, &ground));
                    if let (Some(u), Some(g)) = (&sample.uss, &sample.gss) {
                        sample.seam_split = view.is_ascending(u) != view.is_ascending(g);
                    }
                    if !cfg.loss_model || draw < f.delivery {
                        sample.rtt_ms = Some(f.rtt_ms);
                        last_rtt.insert(user.clone(), f.rtt_ms);
                    }
                }
                traces.push(sample);
            }
        }
        drop(cache);
        for tl in controller.timelines.values_mut() {
            tl.prune_before(t_next);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    traces.sort_by(|a, b| a.user.cmp(&b.user).then(a.t_s.total_cmp(&b.t_s)));

    let mut summary = Summary {
        strategy: cfg.handover.strategy.to_string(),
        duration_s: duration,
        seed: cfg.seed,
        epochs: epoch,
        ..Summary::default()
    };
    for (user, gw) in &bindings {
        let mine: Vec<&ProbeSample> = traces.iter().filter(|s| &s.user == user).collect();
        let mut rtts: Vec<f64> = mine.iter().filter_map(|s| s.rtt_ms).collect();
        rtts.sort_by(f64::total_cmp);
        let count = |k: EventKind| controller.log.iter().filter(|e| &e.session == user && e.event == k).count();
        let us = UserSummary {
            gateway: gw.clone(),
            probes: mine.len(),
            lost: mine.iter().filter(|s| s.rtt_ms.is_none()).count(),
            handovers: count(EventKind::HoComplete),
            cancels: count(EventKind::HoCancel),
            reregistrations: count(EventKind::Reregister),
            rtt_p50_ms: quantile(&rtts, 0.5),
            rtt_p90_ms: quantile(&rtts, 0.9),
            rtt_p99_ms: quantile(&rtts, 0.99),
            max_isl_hops: mine.iter().filter_map(|s| s.hops).max(),
        };
        summary.handovers += us.handovers;
        summary.max_isl_hops = summary.max_isl_hops.max(us.max_isl_hops);
        summary.users.insert(user.clone(), us);
    }
    Ok(ExperimentResult {
        traces,
        events: controller.log,
        summary,
        handover_windows: windows,
        final_dump: store.dump(),
    })
}

pub const TRACE_HEADER: &str = "t_s,user,gateway,rtt_ms,lost,hops,uss,gss";

pub fn traces_to_csv(samples: &[ProbeSample]) -> String {
    let mut out = String::with_capacity(64 * (samples.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for s in samples {
        let rtt = s.rtt_ms.map(|r| format!("{r:.3}")).unwrap_or_default();
        let hops = s.hops.map(|h| h.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:.3},{},{},{},{},{},{},{}",
            s.t_s,
            s.user,
            s.gateway,
            rtt,
            u8::from(s.rtt_ms.is_none()),
            hops,
            s.uss.as_deref().unwrap_or(""),
            s.gss.as_deref().unwrap_or("")
        );
    }
    out
}

pub const TRACES_FILE: &str = "traces.csv";
pub const HANDOVERS_FILE: &str = "handovers.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes traces, handover log and summary into `out_dir`.
pub fn write_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let files = [
        (TRACES_FILE, traces_to_csv(&result.traces)),
        (HANDOVERS_FILE, events_to_jsonl(&result.events)),
        (
            SUMMARY_FILE,
            serde_json::to_string_pretty(&result.summary).expect("summary serialises") + "\n",
        ),
    ];
    for (name, text) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Nodes matched by name, or by `key:value` against their properties.
pub fn select_nodes(nodes: &Map<String, Value>, selector: &str) -> Result<Vec<String>, HarnessError> {
    if nodes.contains_key(selector) {
        return Ok(vec![selector.to_string()]);
    }
    let mut valid: Vec<String> = nodes
        .values()
        .filter_map(Value::as_object)
        .flat_map(|o| o.keys().cloned())
        .collect();
    valid.sort();
    valid.dedup();
    let unknown = |valid: Vec<String>| HarnessError::UnknownSelector {
        selector: selector.to_string(),
        valid_keys: valid,
    };
    let Some((key, value)) = selector.split_once(':') else {
        return Err(unknown(valid));
    };
    if !valid.iter().any(|k| k == key) {
        return Err(unknown(valid));
    }
    let hits: Vec<String> = nodes
        .iter()
        .filter(|(_, v)| {
            v.get(key).is_some_and(|x| match x {
                Value::String(s) => s == value,
                other => other.to_string() == value,
            })
        })
        .map(|(k, _)| k.clone())
        .collect();
    if hits.is_empty() {
        return Err(unknown(valid));
    }
    Ok(hits)
}

/// Appends `task` to the run list of `nodes` in epoch file `index`.
pub fn inject_task(epoch_dir: &Path, pattern: &str, index: usize, nodes: &[String], task: &str) -> Result<PathBuf, HarnessError> {
    let pat = FilePattern::new(pattern)?;
    let path = epoch_dir.join(pat.name(index));
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut file = EpochFile::from_json_str(&text).map_err(|e| HarnessError::Inconsistent {
        epoch: index,
        detail: e.to_string(),
    })?;
    for n in nodes {
        file.add_task(n, task.to_string());
    }
    std::fs::write(&path, file.to_json_string()).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Names of the satellites in a shell, in flat order.
pub fn satellite_names(model: &ScenarioModel) -> Vec<String> {
    (0..model.constellation.len()).map(sat_name).collect()
}

/// Node types keyed by name.
pub fn node_types(nodes: &[NodeConfig]) -> BTreeMap<String, NodeType> {
    nodes.iter().map(|n| (n.name.clone(), n.node_type)).collect()
}
