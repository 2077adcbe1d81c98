//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use super::{
    build_nodes, init_store, inject_task, io_err, prepare, quantile, run_experiment, select_nodes, write_outputs,
    write_scenario, ExperimentConfig, HarnessError, SAT_CONFIG_FILE, TRACES_FILE, TRACE_HEADER,
};
use crate::placement::WorkerSpec;
use crate::routing::OracleConfig;
use crate::scenario::{assign_addresses, merge_common_config, GeneratorConfig, NodeConfig, SatConfig, ScenarioModel};
use crate::srv6::Strategy;
use crate::statestore::{run_key, AgentSet, TaskOutcome};

#[derive(Debug, Parser)]
#[command(name = "leoemu", about = "Epoch-driven LEO constellation emulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate sat-config.json and epoch files with oracle routes.
    Generate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Load a sat-config into a store, assign addresses and place nodes.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// JSON array of {"name", "cpu", "mem", "ip"} objects.
        #[arg(long)]
        workers: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Store dump destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a scenario with the session control plane and probes.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "e2e:1,2,4")]
        strategy: Strategy,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Generated scenario cache; `<out>/scenario` when absent.
        #[arg(long)]
        work: Option<PathBuf>,
        /// Comma-separated users to probe.
        #[arg(long, value_delimiter = ',')]
        probe_users: Option<Vec<String>>,
        #[arg(long)]
        no_loss: bool,
        #[arg(long, default_value_t = 0.0)]
        time_scale: f64,
    },
    /// Append a task to selected nodes in one epoch file.
    Inject {
        /// Directory holding sat-config.json and the epoch directory.
        #[arg(long)]
        scenario_dir: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        select: String,
        #[arg(long)]
        task: String,
    },
    /// Apply a task to nodes selected by name or key:value.
    Exec {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        select: String,
        #[arg(long)]
        task: String,
    },
    /// Per-user statistics from a run's traces as CSV.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a command line, writing normal output to `out`.
pub fn run_with_output<I: IntoIterator<Item = OsString>>(args: I, out: &mut dyn Write) -> Result<(), HarnessError> {
    let cli = Cli::try_parse_from(args).map_err(|e| HarnessError::Usage(e.to_string()))?;
    execute(cli.command, out)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), HarnessError> {
    out.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))
}

/// Merged configurations of every node in a sat-config, with addresses.
pub fn merged_nodes(sc: &SatConfig) -> Result<Vec<NodeConfig>, HarnessError> {
    let mut nodes = sc
        .nodes
        .iter()
        .map(|(name, v)| merge_common_config(name, &v.as_object().cloned().unwrap_or_default(), &sc.node_config_common))
        .collect::<Result<Vec<_>, _>>()?;
    assign_addresses(&mut nodes)?;
    Ok(nodes)
}

fn node_map(nodes: &[NodeConfig]) -> Map<String, Value> {
    nodes.iter().map(|n| (n.name.clone(), n.to_json())).collect()
}

fn read_workers(path: &Path) -> Result<Vec<WorkerSpec>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    let arr = v
        .as_array()
        .ok_or_else(|| HarnessError::Usage(format!("{}: expected a JSON array", path.display())))?;
    Ok(arr.iter().map(WorkerSpec::from_json).collect::<Result<Vec<_>, _>>()?)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), HarnessError> {
    match cmd {
        Command::Generate { scenario, out: dir, duration } => {
            let mut gen = GeneratorConfig::from_json_file(&scenario)?;
            if let Some(d) = duration {
                gen = gen.with_duration(d);
            }
            let p = prepare(gen, &OracleConfig::default())?;
            write_scenario(&p, &dir)?;
            write_out(
                out,
                &format!(
                    "{} epochs, {} nodes, {} unreachable pair-epochs\n",
                    p.epochs.len(),
                    p.nodes.len(),
                    p.reachability.unreachable_pair_epochs
                ),
            )
        }
        Command::Init {
            config,
            workers,
            seed,
            out: dest,
        } => {
            let sc = SatConfig::from_json_file(&config)?;
            let mut nodes = sc
                .nodes
                .iter()
                .map(|(name, v)| {
                    merge_common_config(name, &v.as_object().cloned().unwrap_or_default(), &sc.node_config_common)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let plan = assign_addresses(&mut nodes)?;
            let workers = match workers {
                Some(p) => read_workers(&p)?,
                None => Vec::new(),
            };
            let epoch_dir = config
                .parent()
                .unwrap_or(Path::new("."))
                .join(&sc.epoch_config.epoch_dir);
            let epochs = load_epochs(&epoch_dir, &sc.epoch_config.file_pattern)?;
            let mut store = init_store(&mut nodes, &plan, &workers, &epochs, seed)?;
            store.put(
                crate::statestore::EPOCH_CONFIG_KEY,
                serde_json::to_value(&sc.epoch_config).expect("epoch config serialises"),
            );
            let dump = store.dump();
            match dest {
                Some(p) => std::fs::write(&p, dump).map_err(|e| io_err(&p, e)),
                None => write_out(out, &dump),
            }
        }
        Command::Run {
            scenario,
            strategy,
            duration,
            seed,
            out: dir,
            work,
            probe_users,
            no_loss,
            time_scale,
        } => {
            let gen = GeneratorConfig::from_json_file(&scenario)?;
            let mut cfg = ExperimentConfig::new(gen, strategy, work.unwrap_or_else(|| dir.join("scenario")));
            cfg.duration_s = duration;
            cfg.seed = seed;
            cfg.probe_users = probe_users;
            cfg.loss_model = !no_loss;
            cfg.time_scale = time_scale;
            let result = run_experiment(&cfg)?;
            write_outputs(&result, &dir)?;
            write_out(out, &(serde_json::to_string_pretty(&result.summary).expect("summary serialises") + "\n"))
        }
        Command::Inject {
            scenario_dir,
            epoch,
            select,
            task,
        } => {
            let sc = SatConfig::from_json_file(scenario_dir.join(SAT_CONFIG_FILE))?;
            let targets = select_nodes(&node_map(&merged_nodes(&sc)?), &select)?;
            let path = inject_task(
                &scenario_dir.join(&sc.epoch_config.epoch_dir),
                &sc.epoch_config.file_pattern,
                epoch,
                &targets,
                &task,
            )?;
            write_out(out, &format!("{} nodes in {}\n", targets.len(), path.display()))
        }
        Command::Exec { config, select, task } => {
            let sc = SatConfig::from_json_file(&config)?;
            let mut nodes = sc
                .nodes
                .iter()
                .map(|(name, v)| {
                    merge_common_config(name, &v.as_object().cloned().unwrap_or_default(), &sc.node_config_common)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let plan = assign_addresses(&mut nodes)?;
            let targets = select_nodes(&node_map(&nodes), &select)?;
            let mut store = init_store(&mut nodes, &plan, &[], &[], 0)?;
            let mut agents = AgentSet::start_all(&mut store);
            for t in &targets {
                store.put(&run_key(t), Value::Array(vec![Value::String(task.clone())]));
            }
            agents.process_all();
            let mut text = String::new();
            for t in &targets {
                let outcome = agents
                    .get(t)
                    .and_then(|a| a.task_log.last())
                    .map_or("not-run".to_string(), |r| match &r.outcome {
                        TaskOutcome::Executed => "executed".to_string(),
                        TaskOutcome::Rejected(why) => format!("rejected: {why}"),
                        TaskOutcome::Unrecognized => "unrecognized".to_string(),
                    });
                text.push_str(&format!("{t}\t{outcome}\n"));
            }
            write_out(out, &text)
        }
        Command::Report { run, out: dest } => {
            let csv = report_csv(&run.join(TRACES_FILE))?;
            match dest {
                Some(p) => std::fs::write(&p, csv).map_err(|e| io_err(&p, e)),
                None => write_out(out, &csv),
            }
        }
    }
}

fn load_epochs(dir: &Path, pattern: &str) -> Result<Vec<crate::scenario::EpochFile>, HarnessError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for (_, path) in crate::statestore::list_epoch_files(dir, pattern)? {
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        files.push(crate::statestore::parse_epoch(&name, &text)?);
    }
    Ok(files)
}

pub const REPORT_HEADER: &str = "user,gateway,probes,lost,rtt_p50_ms,rtt_p90_ms,rtt_p99_ms,max_hops";

/// Per-user statistics of a trace file; header only when there are no samples.
pub fn report_csv(traces: &Path) -> Result<String, HarnessError> {
    let text = match std::fs::read_to_string(traces) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(traces, e)),
    };
    struct Acc {
        gateway: String,
        probes: usize,
        lost: usize,
        rtts: Vec<f64>,
        hops: Option<u32>,
    }
    let mut users: std::collections::BTreeMap<String, Acc> = Default::default();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == TRACE_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(HarnessError::Usage(format!("{}:{}: expected 8 fields", traces.display(), i + 1)));
        }
        let acc = users.entry(f[1].to_string()).or_insert_with(|| Acc {
            gateway: f[2].to_string(),
            probes: 0,
            lost: 0,
            rtts: Vec::new(),
            hops: None,
        });
        acc.probes += 1;
        if f[4] == "1" {
            acc.lost += 1;
        } else if let Ok(r) = f[3].parse::<f64>() {
            acc.rtts.push(r);
        }
        if let Ok(h) = f[5].parse::<u32>() {
            acc.hops = acc.hops.max(Some(h));
        }
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    let mut out = format!("{REPORT_HEADER}\n");
    for (user, mut a) in users {
        a.rtts.sort_by(f64::total_cmp);
        out.push_str(&format!(
            "{user},{},{},{},{},{},{},{}\n",
            a.gateway,
            a.probes,
            a.lost,
            fmt(quantile(&a.rtts, 0.5)),
            fmt(quantile(&a.rtts, 0.9)),
            fmt(quantile(&a.rtts, 0.99)),
            a.hops.map(|h| h.to_string()).unwrap_or_default()
        ));
    }
    Ok(out)
}

/// Builds the merged node map of a generator scenario.
pub fn scenario_node_map(gen: GeneratorConfig) -> Result<Map<String, Value>, HarnessError> {
    let model = ScenarioModel::new(gen)?;
    let (nodes, _) = build_nodes(&model)?;
    Ok(node_map(&nodes))
}
