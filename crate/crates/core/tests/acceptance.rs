//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line to stderr (bypassing output capture) before asserting.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use leoemu::harness::{
    build_nodes, directory, init_store, median, run_experiment, traces_to_csv, write_outputs, write_scenario,
    ExperimentConfig, ExperimentResult, Prepared,
};
use leoemu::linkmodel::{slant_range_bitrate, SlantRateParams};
use leoemu::placement::{partition, PlacementError, PlacementGraph, Vertex, WorkerSpec};
use leoemu::routing::{
    oracle_compute, parse_route_task, resolve_path, EpochGraph, OracleConfig, RouteMetric, StaticRoutes,
};
use leoemu::scenario::generate::{apply_to_linkset, sat_index};
use leoemu::scenario::{GeneratorConfig, LinkKey, LinkRecord, LinkSet, ScenarioModel};
use leoemu::srv6::{
    apply_filter, execute_handover, filter_candidates, register, AccessInfo, CandidatePair, FilterId, HandoverConfig,
    HandoverOutcome, HandoverPlan, NetworkView, SidList, Strategy,
};
use leoemu::statestore::{apply_epoch, LINKS_PREFIX};
use leoemu::LinkAttributes;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} : {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn fixture(name: &str) -> GeneratorConfig {
    GeneratorConfig::from_json_file(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)).unwrap()
}

fn tmp(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

struct Oneweb {
    prepared: Prepared,
    dir: PathBuf,
    generation: Duration,
}

/// Generated once per test binary and shared; experiments reuse the files.
fn oneweb() -> &'static Oneweb {
    static CELL: OnceLock<Oneweb> = OnceLock::new();
    CELL.get_or_init(|| {
        let model = ScenarioModel::new(fixture("oneweb-scenario.json")).unwrap();
        let t0 = Instant::now();
        let mut epochs = model.generate_epochs().unwrap();
        let generation = t0.elapsed();
        let (nodes, plan) = build_nodes(&model).unwrap();
        let dir = directory(&nodes, &plan);
        let reachability =
            oracle_compute(&mut epochs, &dir, &OracleConfig::default(), model.quantization().epoch_interval_s).unwrap();
        let prepared = Prepared {
            model,
            nodes,
            plan,
            epochs,
            reachability,
        };
        let out = tmp("oneweb");
        let _ = std::fs::remove_dir_all(&out);
        write_scenario(&prepared, &out).unwrap();
        Oneweb {
            prepared,
            dir: out,
            generation,
        }
    })
}

fn prepare_smoke(oracle: &OracleConfig) -> Prepared {
    leoemu::harness::prepare(fixture("smoke-scenario.json"), oracle).unwrap()
}

// ---------------------------------------------------------------- 1

/// Same model, but evaluated in the dB domain with natural logarithms.
fn bitrate_db_form(range_km: f64, rz: f64, snr_db: f64, atmos_db: f64, h: f64) -> f64 {
    let r = range_km / h;
    let extra_db = 20.0 * r.log10() + atmos_db * (r - 1.0);
    let snr = 10f64.powf((snr_db - extra_db) / 10.0);
    let snr0 = 10f64.powf(snr_db / 10.0);
    rz * snr.ln_1p() / snr0.ln_1p()
}

#[test]
fn criterion_1_slant_range_bitrate() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut problems = Vec::new();
    for _ in 0..1000 {
        let p = SlantRateParams {
            zenith_rate_mbps: rng.gen_range(1.0..1000.0),
            zenith_snr_db: rng.gen_range(-5.0..40.0),
            zenith_atmos_loss_db: rng.gen_range(0.0..3.0),
            altitude_km: rng.gen_range(300.0..2000.0),
        };
        if slant_range_bitrate(p.altitude_km, &p).unwrap() != p.zenith_rate_mbps {
            problems.push(format!("R(H) != R_z for {p:?}"));
        }
    }
    let u = SlantRateParams::oneweb_user();
    let r2h = slant_range_bitrate(2.0 * u.altitude_km, &u).unwrap();
    let independent = bitrate_db_form(2400.0, 50.0, 12.0, 0.5, 1200.0);
    // 30-digit evaluation with mpmath
    let frozen = 26.750_440_209_373_775_f64;
    if (r2h - 26.75).abs() > 0.01 || (r2h - independent).abs() > 1e-9 || (r2h - frozen).abs() > 1e-9 {
        problems.push(format!("R(2H) = {r2h}, independent {independent}, frozen {frozen}"));
    }
    let mut ls: Vec<f64> = (0..1000).map(|_| rng.gen_range(1200.0..6000.0)).collect();
    ls.sort_by(f64::total_cmp);
    ls.dedup();
    let rates: Vec<f64> = ls.iter().map(|&l| slant_range_bitrate(l, &u).unwrap()).collect();
    let monotone = rates.windows(2).all(|w| w[1] < w[0]);
    if !monotone {
        problems.push("not strictly decreasing".into());
    }
    let elapsed = t0.elapsed();
    if elapsed >= Duration::from_secs(1) {
        problems.push(format!("took {elapsed:?}"));
    }
    verdict(
        1,
        problems.is_empty(),
        &format!("R(2H) = {r2h:.6} Mbit/s, {} sampled L monotone, {elapsed:?} {problems:?}", ls.len()),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_oneweb_generation() {
    let t2 = oneweb();
    let model = &t2.prepared.model;
    let mut problems = Vec::new();
    let sats = model.constellation.len();
    if sats != 588 {
        problems.push(format!("{sats} satellites"));
    }
    let c = &model.config.constellation;
    if model.isls.len() != 12 * 49 + 11 * 49 {
        problems.push(format!("{} ISLs", model.isls.len()));
    }
    let mut degree = vec![0u32; sats];
    for (a, b) in &model.isls {
        degree[a.flat(c.sats_per_plane)] += 1;
        degree[b.flat(c.sats_per_plane)] += 1;
    }
    for (flat, d) in degree.iter().enumerate() {
        let plane = flat as u32 / c.sats_per_plane;
        let want = if plane == 0 || plane == c.num_planes - 1 { 3 } else { 4 };
        if *d != want {
            problems.push(format!("satellite {flat} in plane {plane} has degree {d}"));
            break;
        }
    }

    let files = leoemu::statestore::list_epoch_files(&t2.dir.join(&model.config.epoch_dir), &model.config.file_pattern)
        .unwrap();
    if files.len() != model.num_epochs() || files.len() != 2400 / 5 + 1 {
        problems.push(format!("{} epoch files", files.len()));
    }
    let epochs = &t2.prepared.epochs;
    for w in epochs.windows(2) {
        if (w[1].time - w[0].time).num_milliseconds() != 5000 {
            problems.push(format!("gap between {} and {}", w[0].time, w[1].time));
            break;
        }
    }
    let q = model.quantization();
    let mut state = LinkSet::new();
    let mut updates = 0usize;
    let mut tiny = 0usize;
    for e in epochs {
        for rec in &e.links_update {
            updates += 1;
            let prev = &state[&rec.key()].attrs;
            let dd = (rec.attrs.delay_ms - prev.delay_ms).abs();
            let dr = (rec.attrs.rate_mbps - prev.rate_mbps).abs();
            let dl = rec.attrs.loss_fraction != prev.loss_fraction;
            if dd < q.delay_quantum_ms - 1e-9 && dr < q.rate_quantum_mbps - 1e-9 && !dl {
                tiny += 1;
            }
        }
        apply_to_linkset(&mut state, e);
    }
    if tiny > 0 {
        problems.push(format!("{tiny} sub-quantum updates"));
    }
    if t2.generation >= Duration::from_secs(120) {
        problems.push(format!("generation took {:?}", t2.generation));
    }
    verdict(
        2,
        problems.is_empty(),
        &format!(
            "{sats} satellites, {} ISLs, {} epochs, {updates} updates, generated in {:?} {problems:?}",
            model.isls.len(),
            epochs.len(),
            t2.generation
        ),
    );
}

// ---------------------------------------------------------------- 3

fn store_links(store: &leoemu::statestore::KeyValueStore) -> Result<BTreeMap<LinkKey, LinkAttributes>, String> {
    let mut out = BTreeMap::new();
    let mut directed: BTreeMap<(String, String), LinkRecord> = BTreeMap::new();
    for (k, v) in store.range(LINKS_PREFIX) {
        let rest = &k[LINKS_PREFIX.len()..];
        let (node, peer) = rest.split_once("/vl_").ok_or(format!("odd key {k}"))?;
        let rec = LinkRecord::from_json(v).map_err(|e| e.to_string())?;
        directed.insert((node.to_string(), peer.to_string()), rec);
    }
    for ((a, b), rec) in &directed {
        match directed.get(&(b.clone(), a.clone())) {
            Some(back) if back.attrs == rec.attrs => {}
            _ => return Err(format!("link {a}-{b} lacks a matching reverse key")),
        }
        out.insert(LinkKey::new(a, b), rec.attrs);
    }
    Ok(out)
}

fn snapshot_attrs(model: &ScenarioModel, k: usize) -> BTreeMap<LinkKey, LinkAttributes> {
    model
        .quantized_snapshot(model.epoch_offset_s(k))
        .unwrap()
        .into_iter()
        .map(|(key, r)| (key, r.attrs))
        .collect()
}

fn replay_check(p: &Prepared, check: &BTreeSet<usize>) -> (usize, Vec<String>) {
    let mut nodes = p.nodes.clone();
    let mut store = init_store(&mut nodes, &p.plan, &[], &[], 1).unwrap();
    let mut problems = Vec::new();
    let mut checked = 0;
    for (k, e) in p.epochs.iter().enumerate() {
        let s = apply_epoch(&mut store, e, &format!("{k}.json"));
        if !s.rejected.is_empty() {
            problems.push(format!("epoch {k}: {} rejected entries", s.rejected.len()));
        }
        if check.contains(&k) {
            checked += 1;
            match store_links(&store) {
                Ok(got) if got == snapshot_attrs(&p.model, k) => {}
                Ok(got) => problems.push(format!("epoch {k}: {} links in store differ from snapshot", got.len())),
                Err(e) => problems.push(format!("epoch {k}: {e}")),
            }
        }
    }
    (checked, problems)
}

#[test]
fn criterion_3_epoch_round_trip() {
    let smoke = prepare_smoke(&OracleConfig::default());
    let all: BTreeSet<usize> = (0..smoke.epochs.len()).collect();
    let (n_smoke, mut problems) = replay_check(&smoke, &all);

    let t2 = oneweb();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut idx: Vec<usize> = (0..t2.prepared.epochs.len()).collect();
    idx.shuffle(&mut rng);
    let pick: BTreeSet<usize> = idx.into_iter().take(10).collect();
    let (n_t2, p2) = replay_check(&t2.prepared, &pick);
    problems.extend(p2);
    verdict(
        3,
        problems.is_empty() && n_smoke == smoke.epochs.len() && n_t2 == 10,
        &format!("smoke {n_smoke} epochs exhaustive, oneweb epochs {pick:?} {problems:?}"),
    );
}

// ---------------------------------------------------------------- 4

/// Name adjacency with unit and microsecond weights.
fn adjacency(set: &LinkSet) -> BTreeMap<String, Vec<(String, u64)>> {
    let mut adj: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
    for (k, r) in set {
        let us = (r.attrs.delay_ms * 1000.0).round() as u64;
        adj.entry(k.a.clone()).or_default().push((k.b.clone(), us));
        adj.entry(k.b.clone()).or_default().push((k.a.clone(), us));
    }
    adj
}

fn is_sat(n: &str) -> bool {
    sat_index(n).is_some()
}

/// Hop distances from `src`; ground nodes other than `src` are dead ends.
fn bfs_hops(adj: &BTreeMap<String, Vec<(String, u64)>>, src: &str) -> BTreeMap<String, u32> {
    let mut dist = BTreeMap::from([(src.to_string(), 0u32)]);
    let mut q = VecDeque::from([src.to_string()]);
    while let Some(u) = q.pop_front() {
        if u != src && !is_sat(&u) {
            continue;
        }
        let du = dist[&u];
        for (v, _) in adj.get(&u).into_iter().flatten() {
            if !dist.contains_key(v) {
                dist.insert(v.clone(), du + 1);
                q.push_back(v.clone());
            }
        }
    }
    dist
}

/// All-pairs delay with only satellites as intermediates.
fn floyd_warshall(names: &[String], adj: &BTreeMap<String, Vec<(String, u64)>>) -> Vec<Vec<Option<u64>>> {
    let n = names.len();
    let idx: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut d = vec![vec![None; n]; n];
    for i in 0..n {
        d[i][i] = Some(0);
    }
    for (a, nb) in adj {
        for (b, w) in nb {
            let (i, j) = (idx[a.as_str()], idx[b.as_str()]);
            d[i][j] = Some(d[i][j].map_or(*w, |x: u64| x.min(*w)));
        }
    }
    for k in (0..n).filter(|&k| is_sat(&names[k])) {
        for i in 0..n {
            let Some(ik) = d[i][k] else { continue };
            for j in 0..n {
                if let Some(kj) = d[k][j] {
                    if d[i][j].is_none_or(|x| ik + kj < x) {
                        d[i][j] = Some(ik + kj);
                    }
                }
            }
        }
    }
    d
}

fn check_drain(p: &Prepared, drain_lead_s: f64) -> (usize, Vec<String>) {
    let dir = directory(&p.nodes, &p.plan);
    let by_loopback: BTreeMap<String, String> =
        (0..dir.len()).map(|i| (dir.loopback(i).to_string(), dir.name(i).to_string())).collect();
    let steps = (drain_lead_s / p.model.quantization().epoch_interval_s).round() as usize;
    let mut tables: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut state = LinkSet::new();
    let mut checked = 0usize;
    let mut problems = Vec::new();
    for (k, e) in p.epochs.iter().enumerate() {
        apply_to_linkset(&mut state, e);
        for (node, tasks) in &e.run {
            for t in tasks {
                if let Some((dst, via)) = parse_route_task(t) {
                    tables.entry(node.clone()).or_default().insert(by_loopback[&dst].clone(), via);
                }
            }
        }
        let doomed: BTreeSet<LinkKey> = p.epochs[k + 1..(k + 1 + steps).min(p.epochs.len())]
            .iter()
            .flat_map(|f| f.links_del.iter().map(|d| d.key()))
            .collect();
        let mut drained = state.clone();
        drained.retain(|key, _| !doomed.contains(key));
        let dadj = adjacency(&drained);
        let routes = StaticRoutes(tables.clone());
        for s in (0..dir.len()).filter(|&i| is_sat(dir.name(i))) {
            let src = dir.name(s);
            let reach = bfs_hops(&dadj, src);
            for d in (0..dir.len()).filter(|&i| i != s && dir.node_type(i) != leoemu::scenario::NodeType::User) {
                let dst = dir.name(d);
                if !reach.contains_key(dst) {
                    continue;
                }
                checked += 1;
                match resolve_path(&routes, src, dst) {
                    Ok(path) => {
                        if let Some(w) = path.windows(2).find(|w| doomed.contains(&LinkKey::new(&w[0], &w[1]))) {
                            problems.push(format!("epoch {k}: {src}->{dst} crosses doomed {}-{}", w[0], w[1]));
                        }
                        if let Some(w) = path.windows(2).find(|w| !state.contains_key(&LinkKey::new(&w[0], &w[1]))) {
                            problems.push(format!("epoch {k}: {src}->{dst} uses missing {}-{}", w[0], w[1]));
                        }
                    }
                    Err(e) => problems.push(format!("epoch {k}: {src}->{dst}: {e}")),
                }
            }
        }
    }
    (checked, problems)
}

#[test]
fn criterion_4_oracle_routing() {
    let smoke = prepare_smoke(&OracleConfig::default());
    let dir = directory(&smoke.nodes, &smoke.plan);
    let names: Vec<String> = (0..dir.len()).map(|i| dir.name(i).to_string()).collect();
    let mut problems = Vec::new();
    let mut state = LinkSet::new();
    let mut compared = 0usize;
    for (k, e) in smoke.epochs.iter().enumerate() {
        apply_to_linkset(&mut state, e);
        let g = EpochGraph::from_links(&dir, state.iter().map(|(k, r)| (k, &r.attrs))).unwrap();
        let adj = adjacency(&state);
        let fw = floyd_warshall(&names, &adj);
        for d in 0..dir.len() {
            let hops = g.costs_to(&dir, d, RouteMetric::HopCount);
            let delay = g.costs_to(&dir, d, RouteMetric::PropagationDelay);
            // undirected graph and symmetric transit rule: distance to d equals distance from d
            let bfs = bfs_hops(&adj, &names[d]);
            for s in 0..dir.len() {
                compared += 1;
                let want_h = bfs.get(&names[s]).copied();
                if hops[s].map(|c| c.1) != want_h {
                    problems.push(format!("epoch {k} {}->{}: hops {:?} vs bfs {want_h:?}", names[s], names[d], hops[s]));
                }
                if delay[s].map(|c| c.0) != fw[s][d] {
                    problems.push(format!("epoch {k} {}->{}: delay {:?} vs {:?}", names[s], names[d], delay[s], fw[s][d]));
                }
            }
        }
    }
    let (n_hop, p_hop) = check_drain(&smoke, 5.0);
    let delay_cfg = OracleConfig {
        metric: RouteMetric::PropagationDelay,
        ..OracleConfig::default()
    };
    let (n_delay, p_delay) = check_drain(&prepare_smoke(&delay_cfg), 5.0);
    problems.extend(p_hop);
    problems.extend(p_delay);
    problems.truncate(10);
    verdict(
        4,
        problems.is_empty() && n_hop > 0 && n_delay > 0,
        &format!(
            "{} epochs, {compared} cost pairs vs BFS/Floyd-Warshall, drain checks {n_hop} + {n_delay} routes {problems:?}",
            smoke.epochs.len()
        ),
    );
}

// ---------------------------------------------------------------- 5, 9

const SEA_USER: &str = "usr7";

fn seam_config(strategy: &str) -> ExperimentConfig {
    let t2 = oneweb();
    let mut cfg = ExperimentConfig::new(t2.prepared.model.config.clone(), strategy.parse().unwrap(), &t2.dir);
    cfg.probe_users = Some(vec![SEA_USER.to_string()]);
    cfg.seed = 7;
    cfg
}

struct SeamRuns {
    local: ExperimentResult,
    e2e: ExperimentResult,
    elapsed: Duration,
}

fn seam_runs() -> &'static SeamRuns {
    static CELL: OnceLock<SeamRuns> = OnceLock::new();
    CELL.get_or_init(|| {
        oneweb();
        let t0 = Instant::now();
        let local = run_experiment(&seam_config("local-min-delay")).unwrap();
        let e2e = run_experiment(&seam_config("e2e:1,2,4")).unwrap();
        SeamRuns {
            local,
            e2e,
            elapsed: t0.elapsed(),
        }
    })
}

fn outside_windows(r: &ExperimentResult, user: &str) -> Vec<f64> {
    let w = r.handover_windows.get(user).cloned().unwrap_or_default();
    r.traces
        .iter()
        .filter(|p| p.user == user && !w.iter().any(|&(a, b)| p.t_s >= a && p.t_s <= b))
        .filter_map(|p| p.rtt_ms)
        .collect()
}

#[test]
fn criterion_5_seam_pathology() {
    let runs = seam_runs();
    let split: Vec<f64> = runs
        .local
        .traces
        .iter()
        .filter(|p| p.user == SEA_USER && p.seam_split)
        .filter_map(|p| p.rtt_ms)
        .collect();
    let split_median = median(&split);
    let outside = outside_windows(&runs.e2e, SEA_USER);
    let worst = outside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e2e_median = median(&outside);
    let ok = split_median.is_some_and(|m| m > 100.0)
        && !outside.is_empty()
        && worst <= 45.0
        && runs.elapsed < Duration::from_secs(300);
    verdict(
        5,
        ok,
        &format!(
            "local seam-split median {split_median:?} ms over {} probes; e2e(1,2,4) outside handovers median {e2e_median:?} max {worst:.1} ms over {} probes; {:?}",
            split.len(),
            outside.len(),
            runs.elapsed
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let first = seam_runs();
    let mut problems = Vec::new();
    for (name, strategy, done) in [("local", "local-min-delay", &first.local), ("e2e", "e2e:1,2,4", &first.e2e)] {
        let again = run_experiment(&seam_config(strategy)).unwrap();
        let (a, b) = (tmp(&format!("det-{name}-a")), tmp(&format!("det-{name}-b")));
        write_outputs(done, &a).unwrap();
        write_outputs(&again, &b).unwrap();
        let fa = std::fs::read(a.join(leoemu::harness::TRACES_FILE)).unwrap();
        let fb = std::fs::read(b.join(leoemu::harness::TRACES_FILE)).unwrap();
        if fa != fb || fa.is_empty() {
            problems.push(format!("{name}: trace files differ"));
        }
    }

    let gen = fixture("smoke-scenario.json");
    let mut results = Vec::new();
    for scale in [0.0, 1.0] {
        let mut cfg = ExperimentConfig::new(gen.clone(), Strategy::EndToEnd(vec![FilterId::MinLifetime]), tmp(&format!("scale-{scale}")));
        cfg.duration_s = Some(10.0);
        cfg.time_scale = scale;
        let t0 = Instant::now();
        let r = run_experiment(&cfg).unwrap();
        results.push((r, t0.elapsed()));
    }
    if results[0].0.final_dump != results[1].0.final_dump {
        problems.push("final store dumps differ between time scales".into());
    }
    if traces_to_csv(&results[0].0.traces) != traces_to_csv(&results[1].0.traces) {
        problems.push("traces differ between time scales".into());
    }
    if results[1].1 < Duration::from_secs(9) {
        problems.push(format!("time scale 1 finished in {:?}", results[1].1));
    }
    verdict(
        9,
        problems.is_empty(),
        &format!(
            "identical traces for both seam runs; smoke dumps at scale 0 ({:?}) and 1 ({:?}) {problems:?}",
            results[0].1, results[1].1
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_handover_ordering() {
    let t2 = oneweb();
    let run = |s: &str, t_el: Option<f64>| {
        let mut cfg = ExperimentConfig::new(t2.prepared.model.config.clone(), s.parse().unwrap(), &t2.dir);
        cfg.probe_users = Some(Vec::new());
        if let Some(t) = t_el {
            cfg.handover.t_el_s = t;
        }
        run_experiment(&cfg).unwrap()
    };
    let a = run("e2e:1,2,3", None);
    let b = run("e2e:1,2,4", None);
    // informational only: the same comparison with the elapsed-time trigger off
    let la = run("e2e:1,2,3", Some(f64::MAX));
    let lb = run("e2e:1,2,4", Some(f64::MAX));
    let lifetime_only: Vec<String> = lb
        .summary
        .users
        .iter()
        .map(|(u, s)| format!("{u} {}/{}", la.summary.users[u].handovers, s.handovers))
        .collect();
    let minutes = a.summary.duration_s / 60.0;
    let mut ok = minutes >= 30.0;
    let mut parts = Vec::new();
    for (user, sb) in &b.summary.users {
        let ha = a.summary.users[user].handovers;
        let hb = sb.handovers;
        let fine = (ha as f64) <= 0.7 * hb as f64;
        ok &= fine;
        parts.push(format!("{user} {ha}/{hb}"));
    }
    verdict(
        6,
        ok,
        &format!(
            "handovers (1,2,3)/(1,2,4) over {minutes} min: {}; lifetime trigger only (not judged): {}",
            parts.join(", "),
            lifetime_only.join(", ")
        ),
    );
}

// ---------------------------------------------------------------- 7

fn random_pair(rng: &mut ChaCha8Rng, sats: &[String]) -> CandidatePair {
    let pick = |rng: &mut ChaCha8Rng| sats[rng.gen_range(0..sats.len())].clone();
    // coarse values so that ties are common
    CandidatePair {
        gss: pick(rng),
        uss: pick(rng),
        gss_visibility_s: rng.gen_range(0..40) as f64 * 10.0,
        uss_visibility_s: rng.gen_range(0..40) as f64 * 10.0,
        gss_access_delay_ms: rng.gen_range(3..12) as f64,
        uss_access_delay_ms: rng.gen_range(3..12) as f64,
        gss_rate_mbps: rng.gen_range(1..6) as f64 * 10.0,
        uss_rate_mbps: rng.gen_range(1..6) as f64 * 10.0,
        orbit_hops: rng.gen_bool(0.9).then(|| rng.gen_range(0..6)),
    }
}

/// A line of satellites with one gateway and one user hanging off it.
#[derive(Clone, Default)]
struct LineNet {
    links: BTreeMap<(String, String), f64>,
    ground: BTreeSet<String>,
}

impl LineNet {
    fn key(a: &str, b: &str) -> (String, String) {
        if a < b {
            (a.into(), b.into())
        } else {
            (b.into(), a.into())
        }
    }

    fn sats(&self) -> Vec<String> {
        let mut s: BTreeSet<String> = BTreeSet::new();
        for (a, b) in self.links.keys() {
            for n in [a, b] {
                if !self.ground.contains(n) {
                    s.insert(n.clone());
                }
            }
        }
        s.into_iter().collect()
    }
}

impl NetworkView for LineNet {
    fn access(&self, ground: &str) -> Vec<AccessInfo> {
        self.links
            .iter()
            .filter_map(|((a, b), &d)| {
                let other = if a == ground { b } else if b == ground { a } else { return None };
                Some(AccessInfo {
                    sat: other.clone(),
                    delay_ms: d,
                    rate_mbps: 50.0,
                })
            })
            .collect()
    }

    fn remaining_visibility(&self, ground: &str, sat: &str) -> f64 {
        if self.link(ground, sat).is_some() {
            100.0
        } else {
            0.0
        }
    }

    fn orbit_hops(&self, a: &str, b: &str) -> Option<u32> {
        let i: u32 = a.trim_start_matches('s').parse().ok()?;
        let j: u32 = b.trim_start_matches('s').parse().ok()?;
        Some(i.abs_diff(j))
    }

    fn route(&self, src: &str, dst: &str) -> Option<Vec<String>> {
        let sat_num = |n: &str| n.trim_start_matches('s').parse::<u32>().ok();
        let i = sat_num(src)?;
        if let Some(j) = sat_num(dst) {
            let path: Vec<String> = if i <= j {
                (i..=j).map(|k| format!("s{k}")).collect()
            } else {
                (j..=i).rev().map(|k| format!("s{k}")).collect()
            };
            return path.windows(2).all(|w| self.link(&w[0], &w[1]).is_some()).then_some(path);
        }
        // satellite to gateway: walk the line to the nearest attached satellite
        let attached: Vec<u32> = self.access(dst).iter().filter_map(|a| sat_num(&a.sat)).collect();
        let j = *attached.iter().min_by_key(|&&j| j.abs_diff(i))?;
        let mut p = self.route(src, &format!("s{j}"))?;
        p.push(dst.to_string());
        Some(p)
    }

    fn link(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        self.links.get(&Self::key(a, b)).map(|&d| (d, 0.0))
    }

    fn is_ground(&self, node: &str) -> bool {
        self.ground.contains(node)
    }
}

fn random_line(rng: &mut ChaCha8Rng) -> LineNet {
    let mut n = LineNet::default();
    let len = rng.gen_range(3..9);
    for k in 1..len {
        n.links.insert(LineNet::key(&format!("s{k}"), &format!("s{}", k + 1)), 4.0);
    }
    n.ground.extend(["G".to_string(), "U".to_string()]);
    for g in ["G", "U"] {
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            let s = format!("s{}", rng.gen_range(1..=len));
            n.links.insert(LineNet::key(g, &s), rng.gen_range(3..12) as f64);
        }
    }
    n
}

#[test]
fn criterion_7_srv6_state_machine() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let sats: Vec<String> = (1..=6).map(|k| format!("s{k}")).collect();
    let all_filters = [
        FilterId::MinLifetime,
        FilterId::MinOrbitHops,
        FilterId::MaxMinVisibility,
        FilterId::MinAccessDelay,
        FilterId::MaxMinAccessRate,
    ];
    let mut problems = Vec::new();
    let mut sid_lists = 0usize;

    for _ in 0..10_000 {
        let n = rng.gen_range(0..25);
        let pairs: Vec<CandidatePair> = (0..n).map(|_| random_pair(&mut rng, &sats)).collect();
        let mut seq = all_filters.to_vec();
        seq.shuffle(&mut rng);
        seq.truncate(rng.gen_range(1..=5));
        let t_lt = 60.0;
        let mut stage = pairs.clone();
        for &f in &seq {
            let next = apply_filter(stage.clone(), f, t_lt);
            if !next.iter().all(|p| stage.contains(p)) || next.len() > stage.len() {
                problems.push(format!("filter {f:?} is not a subset"));
            }
            stage = next;
        }
        let chosen = filter_candidates(pairs.clone(), &seq, t_lt);
        match &chosen {
            Some(c) if !stage.contains(c) => problems.push("final pick outside the last stage".into()),
            None if !stage.is_empty() => problems.push("no pick from a non-empty stage".into()),
            _ => {}
        }
        for p in pairs.iter().chain(chosen.iter()) {
            let f = SidList::forward(&p.gss, &p.uss, "U");
            let r = SidList::reverse(&p.uss, &p.gss, "G");
            sid_lists += 2;
            let want = if p.gss == p.uss { 2 } else { 3 };
            if f.len() > 3 || r.len() > 3 || f.len() != want || r.len() != want {
                problems.push(format!("sid lengths {} / {} for {p:?}", f.len(), r.len()));
            }
        }
    }

    // cancelled handovers restore the session exactly
    let mut cancels = 0usize;
    for _ in 0..2000 {
        let net = random_line(&mut rng);
        let cfg = HandoverConfig::with_strategy(Strategy::EndToEnd(vec![FilterId::MinLifetime, FilterId::MinOrbitHops]));
        let Some(reg) = register(&net, "U", "G", 0.0, &cfg) else { continue };
        let session = reg.session;
        let before = serde_json::to_string(&session).unwrap();
        if session.forward_sids.len() > 3 || session.reverse_sids.len() > 3 {
            problems.push(format!("registered sid lists {:?} {:?}", session.forward_sids, session.reverse_sids));
        }
        let line = net.sats();
        let plan = HandoverPlan {
            gss: line[rng.gen_range(0..line.len())].clone(),
            uss: line[rng.gen_range(0..line.len())].clone(),
        };
        let mut broken = net.clone();
        // break either the command path or the completion path
        if rng.gen_bool(0.5) {
            broken.links.remove(&LineNet::key("U", &session.uss));
            broken.links.remove(&LineNet::key("U", &plan.uss));
        } else {
            broken.links.remove(&LineNet::key("U", &plan.uss));
        }
        let (next, _, outcome) = execute_handover(&broken, &session, &plan, 30.0, &cfg);
        if let HandoverOutcome::Cancelled { .. } = outcome {
            cancels += 1;
            if serde_json::to_string(&next).unwrap() != before || next != session {
                problems.push(format!("cancel changed {before} into {next:?}"));
            }
        } else if broken.link("U", &plan.uss).is_none() {
            problems.push("handover completed over a missing access link".into());
        }
    }
    problems.truncate(10);
    verdict(
        7,
        problems.is_empty() && cancels > 1000,
        &format!("10000 candidate sets, {sid_lists} sid lists, {cancels} cancelled handovers restored {problems:?}"),
    );
}

// ---------------------------------------------------------------- 8

struct Instance {
    g: PlacementGraph,
    workers: Vec<WorkerSpec>,
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Instance {
    let vertices: Vec<Vertex> = (0..n)
        .map(|i| Vertex {
            name: format!("v{i:03}"),
            cpu: rng.gen_range(50..400),
            mem: rng.gen_range(1..64) << 20,
        })
        .collect();
    let mut g = PlacementGraph::new(vertices);
    let edges = rng.gen_range(n..=3 * n);
    for _ in 0..edges {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        g.add_edge(a, b, rng.gen_range(1..30));
    }
    let cpu: u64 = g.vertices.iter().map(|v| v.cpu).sum();
    let mem: u64 = g.vertices.iter().map(|v| v.mem).sum();
    let slack = rng.gen_range(1.25..2.0);
    let workers = (0..k)
        .map(|i| {
            WorkerSpec::new(
                &format!("w{i}"),
                (cpu as f64 * slack / k as f64) as u64 + 400,
                (mem as f64 * slack / k as f64) as u64 + (64 << 20),
            )
        })
        .collect();
    Instance { g, workers }
}

fn parts_of(inst: &Instance, assignment: &BTreeMap<String, String>) -> Vec<usize> {
    inst.g
        .vertices
        .iter()
        .map(|v| inst.workers.iter().position(|w| w.name == assignment[&v.name]).unwrap())
        .collect()
}

fn fits(inst: &Instance, part: &[usize]) -> bool {
    inst.workers.iter().enumerate().all(|(w, spec)| {
        let (c, m) = inst
            .g
            .vertices
            .iter()
            .zip(part)
            .filter(|(_, &p)| p == w)
            .fold((0, 0), |(c, m), (v, _)| (c + v.cpu, m + v.mem));
        c <= spec.cpu_capacity && m <= spec.mem_capacity
    })
}

fn brute_force(inst: &Instance) -> Option<u64> {
    let (n, k) = (inst.g.vertices.len(), inst.workers.len());
    let mut part = vec![0usize; n];
    let mut best: Option<u64> = None;
    loop {
        if fits(inst, &part) {
            let c = inst.g.cut_weight(&part);
            best = Some(best.map_or(c, |b| b.min(c)));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            part[i] += 1;
            if part[i] < k {
                break;
            }
            part[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn criterion_8_partitioner() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut problems = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut small = 0usize;
    for case in 0..200 {
        let n = rng.gen_range(4..=60);
        let k = rng.gen_range(2..=4);
        let inst = random_instance(&mut rng, n, k);
        let robin: Vec<usize> = (0..n).map(|i| i % k).collect();
        let p = match partition(&inst.g, &inst.workers, case) {
            Ok(p) => p,
            Err(PlacementError::Infeasible { .. }) if !fits(&inst, &robin) && n > 12 => continue,
            Err(e) => {
                problems.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let part = parts_of(&inst, &p.assignment);
        if !fits(&inst, &part) {
            problems.push(format!("case {case}: capacity violated"));
        }
        if inst.g.cut_weight(&part) != p.cut_weight {
            problems.push(format!("case {case}: reported cut {} != {}", p.cut_weight, inst.g.cut_weight(&part)));
        }
        let rr = inst.g.cut_weight(&robin);
        if p.cut_weight > rr {
            problems.push(format!("case {case}: cut {} above round-robin {rr}", p.cut_weight));
        }
        if n <= 12 {
            small += 1;
            let opt = brute_force(&inst).expect("instances have slack");
            if p.cut_weight > 2 * opt {
                problems.push(format!("case {case}: cut {} vs optimum {opt}", p.cut_weight));
            }
            if opt > 0 {
                worst_ratio = worst_ratio.max(p.cut_weight as f64 / opt as f64);
            }
        }
    }
    // extra small instances so that the brute-force bound sees enough cases
    for case in 0..100u64 {
        let n = rng.gen_range(4..=12);
        let k = rng.gen_range(2..=3);
        let inst = random_instance(&mut rng, n, k);
        let opt = brute_force(&inst).expect("instances have slack");
        match partition(&inst.g, &inst.workers, case) {
            Ok(p) => {
                small += 1;
                if !fits(&inst, &parts_of(&inst, &p.assignment)) || p.cut_weight > 2 * opt {
                    problems.push(format!("small case {case}: cut {} vs optimum {opt}", p.cut_weight));
                }
                if opt > 0 {
                    worst_ratio = worst_ratio.max(p.cut_weight as f64 / opt as f64);
                }
            }
            Err(e) => problems.push(format!("small case {case}: {e}")),
        }
    }
    problems.truncate(10);
    verdict(
        8,
        problems.is_empty(),
        &format!("200 random instances, {small} brute-forced, worst cut/optimum {worst_ratio:.2} {problems:?}"),
    );
}
