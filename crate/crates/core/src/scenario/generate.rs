//! Snapshot evaluation, quantized diffs and the generated file set.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::linkmodel::{
    grid_plus_isls, snapshot_links, AntennaLimit, AntennaPlugin, KeepAllAntennas, LinkAttributes, PhyConfig,
    PhyPipeline, SnapshotLink,
};
use crate::orbit::{generate_walker, ConstellationState, GroundKind, GroundNode, SatelliteId, WalkerParams};

use super::config::MatchRule;
use super::format::{iso_time, EpochFile, FilePattern, LinkKey, LinkRecord};
use super::ScenarioError;

/// All links alive at one instant.
pub type LinkSet = BTreeMap<LinkKey, LinkRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct QuantizationPolicy {
    pub delay_quantum_ms: f64,
    pub rate_quantum_mbps: f64,
    pub epoch_interval_s: f64,
}

impl Default for QuantizationPolicy {
    fn default() -> Self {
        QuantizationPolicy {
            delay_quantum_ms: 1.0,
            rate_quantum_mbps: 1.0,
            epoch_interval_s: 5.0,
        }
    }
}

fn round_to(v: f64, q: f64) -> f64 {
    (v / q).round() * q
}

impl QuantizationPolicy {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, v) in [
            ("delay-quantum-ms", self.delay_quantum_ms),
            ("rate-quantum-mbps", self.rate_quantum_mbps),
            ("epoch-interval-s", self.epoch_interval_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ScenarioError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Rounds to the nearest quantum. A positive rate never rounds to zero.
    pub fn quantize(&self, a: &LinkAttributes) -> LinkAttributes {
        let rate = round_to(a.rate_mbps, self.rate_quantum_mbps).max(self.rate_quantum_mbps);
        let delay = round_to(a.delay_ms, self.delay_quantum_ms);
        LinkAttributes::new(rate, delay, a.loss_fraction)
    }

    pub fn quantize_set(&self, set: &LinkSet) -> LinkSet {
        set.iter()
            .map(|(k, r)| {
                let mut r = r.clone();
                r.attrs = self.quantize(&r.attrs);
                (k.clone(), r)
            })
            .collect()
    }
}

/// Delta from `prev` to `next`, both compared after quantization.
pub fn diff_snapshots(prev: &LinkSet, next: &LinkSet, q: &QuantizationPolicy, time: DateTime<Utc>) -> EpochFile {
    let mut file = EpochFile::empty(time);
    for (key, old) in prev {
        match next.get(key) {
            None => file.links_del.push(old.endpoints()),
            Some(new) => {
                let (qo, qn) = (q.quantize(&old.attrs), q.quantize(&new.attrs));
                if qo != qn {
                    let mut rec = new.clone();
                    rec.attrs = qn;
                    file.links_update.push(rec);
                }
            }
        }
    }
    for (key, new) in next {
        if !prev.contains_key(key) {
            let mut rec = new.clone();
            rec.attrs = q.quantize(&new.attrs);
            file.links_add.push(rec);
        }
    }
    file
}

fn default_min_elevation() -> f64 {
    25.0
}

fn default_antenna_model() -> String {
    "keep-all".to_string()
}

fn default_epoch_dir() -> String {
    "epochs".to_string()
}

fn default_file_pattern() -> String {
    "epoch*.json".to_string()
}

/// Input of the scenario generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GeneratorConfig {
    #[serde(with = "iso_time")]
    pub start_time: DateTime<Utc>,
    pub duration_s: f64,
    pub constellation: WalkerParams,
    pub ground_nodes: Vec<GroundNode>,
    #[serde(default = "default_min_elevation")]
    pub min_elevation_deg: f64,
    /// `keep-all` or `antenna-limit`.
    #[serde(default = "default_antenna_model")]
    pub antenna_model: String,
    #[serde(default)]
    pub phy: PhyConfig,
    #[serde(default)]
    pub quantization: QuantizationPolicy,
    #[serde(default = "default_epoch_dir")]
    pub epoch_dir: String,
    #[serde(default = "default_file_pattern")]
    pub file_pattern: String,
    /// Common node properties written to `sat-config.json`.
    #[serde(default)]
    pub node_config_common: Option<Vec<MatchRule>>,
}

impl GeneratorConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ScenarioError::json(path, e))
    }

    /// Same scenario with a different duration.
    pub fn with_duration(mut self, duration_s: f64) -> Self {
        self.duration_s = duration_s;
        self
    }
}

/// Satellite node name for a flat index.
pub fn sat_name(flat: usize) -> String {
    format!("sat{}", flat + 1)
}

/// Flat index of a `sat<k>` name.
pub fn sat_index(name: &str) -> Option<usize> {
    name.strip_prefix("sat")?.parse::<usize>().ok()?.checked_sub(1)
}

/// Default common block: one rule per node type, satellites routed with an
/// IS-IS-like module, IPv6 ranges per type.
pub fn default_common_rules() -> Vec<MatchRule> {
    let rule = |ty: &str, image: &str, routing: bool, cidr: &str| {
        serde_json::from_value::<MatchRule>(json!({
            "match-key": "type",
            "match-value": ty,
            "config-common": {
                "image": image,
                "cpu-request": "100m",
                "mem-request": "100MiB",
                "L3-config": {
                    "enable-routing": routing,
                    "routing-module": if routing { "extra.routing.isisv6" } else { "extra.routing.localroutesv6" },
                    "auto-assign-ips": true,
                    "auto-assign-super-cidr": [{
                        "match-key": "type", "match-value": ty, "super-cidr6": cidr}]
                }
            }
        }))
        .expect("static rule")
    };
    vec![
        rule("satellite", "msvcbench/sat-container:latest", true, "2001:db8:100::/48"),
        rule("gateway", "msvcbench/gw-container:latest", false, "2001:db8:200::/48"),
        rule("user", "msvcbench/usr-container:latest", false, "2001:db8:300::/48"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EpochConfig {
    pub epoch_dir: String,
    pub file_pattern: String,
}

/// Contents of `sat-config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SatConfig {
    #[serde(default)]
    pub node_config_common: Vec<MatchRule>,
    pub nodes: Map<String, Value>,
    pub epoch_config: EpochConfig,
}

impl SatConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ScenarioError::json(path, e))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("sat-config serialises")
    }
}

/// A ready-to-evaluate scenario: geometry, link model and naming.
pub struct ScenarioModel {
    pub config: GeneratorConfig,
    pub constellation: ConstellationState,
    pub isls: Vec<(SatelliteId, SatelliteId)>,
    pub phy: PhyPipeline,
    antenna: Box<dyn AntennaPlugin>,
}

impl std::fmt::Debug for ScenarioModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScenarioModel")
            .field("satellites", &self.constellation.len())
            .field("isls", &self.isls.len())
            .field("ground_nodes", &self.config.ground_nodes.len())
            .finish()
    }
}

impl ScenarioModel {
    pub fn new(config: GeneratorConfig) -> Result<Self, ScenarioError> {
        config.quantization.validate()?;
        if !(config.duration_s.is_finite() && config.duration_s >= 0.0) {
            return Err(ScenarioError::Config(format!(
                "duration-s must be non-negative, got {}",
                config.duration_s
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &config.ground_nodes {
            g.validate()?;
            if sat_index(&g.name).is_some() || !seen.insert(g.name.clone()) {
                return Err(ScenarioError::Config(format!("ground node name `{}` is not unique", g.name)));
            }
        }
        for g in &config.ground_nodes {
            if let Some(gw) = &g.gateway {
                let ok = config
                    .ground_nodes
                    .iter()
                    .any(|h| &h.name == gw && h.kind == GroundKind::Gateway);
                if !ok {
                    return Err(ScenarioError::Config(format!(
                        "user `{}` refers to unknown gateway `{gw}`",
                        g.name
                    )));
                }
            }
        }
        FilePattern::new(&config.file_pattern)?;
        let constellation = generate_walker(&config.constellation)?;
        let isls = grid_plus_isls(&config.constellation);
        let phy = PhyPipeline::from_config(&config.phy)?;
        let antenna: Box<dyn AntennaPlugin> = match config.antenna_model.as_str() {
            "keep-all" => Box::new(KeepAllAntennas),
            "antenna-limit" => Box::new(AntennaLimit),
            other => return Err(ScenarioError::Config(format!("unknown antenna model `{other}`"))),
        };
        Ok(ScenarioModel {
            config,
            constellation,
            isls,
            phy,
            antenna,
        })
    }

    pub fn quantization(&self) -> &QuantizationPolicy {
        &self.config.quantization
    }

    pub fn num_epochs(&self) -> usize {
        (self.config.duration_s / self.config.quantization.epoch_interval_s + 1e-9).floor() as usize + 1
    }

    pub fn epoch_offset_s(&self, k: usize) -> f64 {
        k as f64 * self.config.quantization.epoch_interval_s
    }

    pub fn epoch_time(&self, k: usize) -> DateTime<Utc> {
        offset_time(self.config.start_time, self.epoch_offset_s(k))
    }

    pub fn ground_index(&self, name: &str) -> Option<usize> {
        self.config.ground_nodes.iter().position(|g| g.name == name)
    }

    /// Satellites first, then ground nodes in configuration order.
    pub fn node_names(&self) -> Vec<String> {
        (0..self.constellation.len())
            .map(sat_name)
            .chain(self.config.ground_nodes.iter().map(|g| g.name.clone()))
            .collect()
    }

    /// Unquantized link set at `t` seconds after the start.
    pub fn snapshot(&self, t: f64) -> Result<LinkSet, ScenarioError> {
        let links = snapshot_links(
            &self.constellation,
            &self.isls,
            &self.config.ground_nodes,
            self.config.min_elevation_deg,
            self.antenna.as_ref(),
            &self.phy,
            t,
        )?;
        let mut set = LinkSet::new();
        for (link, attrs) in links {
            let rec = match link {
                SnapshotLink::Isl(a, b) => LinkRecord::new(&sat_name(a), &sat_name(b), attrs),
                SnapshotLink::Ground { ground, sat } => {
                    LinkRecord::new(&sat_name(sat), &self.config.ground_nodes[ground].name, attrs)
                }
            };
            set.insert(rec.key(), rec);
        }
        Ok(set)
    }

    /// Quantized snapshot, the reference state of the emulation at `t`.
    pub fn quantized_snapshot(&self, t: f64) -> Result<LinkSet, ScenarioError> {
        Ok(self.config.quantization.quantize_set(&self.snapshot(t)?))
    }

    /// The epoch-file sequence. Epoch 0 carries the full link set as adds.
    pub fn generate_epochs(&self) -> Result<Vec<EpochFile>, ScenarioError> {
        let times: Vec<f64> = (0..self.num_epochs()).map(|k| self.epoch_offset_s(k)).collect();
        let snapshots: Vec<LinkSet> = times
            .par_iter()
            .map(|&t| self.quantized_snapshot(t))
            .collect::<Result<_, _>>()?;
        let q = self.config.quantization;
        let empty = LinkSet::new();
        let mut files = Vec::with_capacity(snapshots.len());
        let mut state = &empty;
        for (k, snap) in snapshots.iter().enumerate() {
            files.push(diff_snapshots(state, snap, &q, self.epoch_time(k)));
            state = snap;
        }
        Ok(files)
    }

    pub fn sat_config(&self) -> SatConfig {
        let mut nodes = Map::new();
        for name in (0..self.constellation.len()).map(sat_name) {
            nodes.insert(name, json!({"type": "satellite"}));
        }
        for g in &self.config.ground_nodes {
            let ty = match g.kind {
                GroundKind::Gateway => "gateway",
                GroundKind::User => "user",
            };
            nodes.insert(g.name.clone(), json!({"type": ty}));
        }
        SatConfig {
            node_config_common: self
                .config
                .node_config_common
                .clone()
                .unwrap_or_else(default_common_rules),
            nodes,
            epoch_config: EpochConfig {
                epoch_dir: self.config.epoch_dir.clone(),
                file_pattern: self.config.file_pattern.clone(),
            },
        }
    }

    /// Writes `sat-config.json` and the epoch files below `out_dir`.
    pub fn write(&self, out_dir: &Path, epochs: &[EpochFile]) -> Result<(), ScenarioError> {
        let epoch_dir = out_dir.join(&self.config.epoch_dir);
        std::fs::create_dir_all(&epoch_dir).map_err(|e| ScenarioError::io(&epoch_dir, e))?;
        let cfg_path = out_dir.join("sat-config.json");
        std::fs::write(&cfg_path, self.sat_config().to_json_string()).map_err(|e| ScenarioError::io(&cfg_path, e))?;
        let pattern = FilePattern::new(&self.config.file_pattern)?;
        for (k, file) in epochs.iter().enumerate() {
            let path = epoch_dir.join(pattern.name(k));
            std::fs::write(&path, file.to_json_string()).map_err(|e| ScenarioError::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn offset_time(start: DateTime<Utc>, offset_s: f64) -> DateTime<Utc> {
    start + Duration::microseconds((offset_s * 1e6).round() as i64)
}

/// Applies one epoch's link lists to a link set, in del/update/add order.
pub fn apply_to_linkset(set: &mut LinkSet, file: &EpochFile) {
    for del in &file.links_del {
        set.remove(&del.key());
    }
    for rec in file.links_update.iter().chain(&file.links_add) {
        set.insert(rec.key(), rec.clone());
    }
}
