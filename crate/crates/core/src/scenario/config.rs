//! Node configuration: common-property merge and address auto-assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use ipnet::{IpNet, Ipv4Net, Ipv6Net};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ScenarioError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Satellite,
    Gateway,
    User,
}

impl NodeType {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Satellite => "satellite",
            NodeType::Gateway => "gateway",
            NodeType::User => "user",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "satellite" => Some(NodeType::Satellite),
            "gateway" => Some(NodeType::Gateway),
            "user" => Some(NodeType::User),
            _ => None,
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// CPU quantity in millicores. Accepts `0.1`, `1`, `"100m"`, `"2"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct CpuQuantity(pub u64);

impl CpuQuantity {
    pub fn parse(v: &Value) -> Result<Self, ScenarioError> {
        let bad = || ScenarioError::Config(format!("bad cpu quantity {v}"));
        match v {
            Value::Number(n) => {
                let cores = n.as_f64().ok_or_else(bad)?;
                if cores < 0.0 {
                    return Err(bad());
                }
                Ok(CpuQuantity((cores * 1000.0).round() as u64))
            }
            Value::String(s) => {
                let s = s.trim();
                if let Some(m) = s.strip_suffix('m') {
                    m.parse::<u64>().map(CpuQuantity).map_err(|_| bad())
                } else {
                    let cores: f64 = s.parse().map_err(|_| bad())?;
                    if cores < 0.0 {
                        return Err(bad());
                    }
                    Ok(CpuQuantity((cores * 1000.0).round() as u64))
                }
            }
            _ => Err(bad()),
        }
    }

    pub fn cores(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

/// Memory quantity in bytes. Accepts `"100MiB"`, `"8GiB"`, `"512Mi"`, plain
/// byte counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct MemQuantity(pub u64);

impl MemQuantity {
    pub fn parse(v: &Value) -> Result<Self, ScenarioError> {
        let bad = || ScenarioError::Config(format!("bad memory quantity {v}"));
        match v {
            Value::Number(n) => n.as_u64().map(MemQuantity).ok_or_else(bad),
            Value::String(s) => {
                let s = s.trim();
                let idx = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
                let num: f64 = s[..idx].parse().map_err(|_| bad())?;
                let mult: f64 = match &s[idx..] {
                    "" | "B" => 1.0,
                    "Ki" | "KiB" => 1024.0,
                    "Mi" | "MiB" => 1024.0 * 1024.0,
                    "Gi" | "GiB" => 1024.0 * 1024.0 * 1024.0,
                    "K" | "KB" | "k" => 1e3,
                    "M" | "MB" => 1e6,
                    "G" | "GB" => 1e9,
                    _ => return Err(bad()),
                };
                Ok(MemQuantity((num * mult).round() as u64))
            }
            _ => Err(bad()),
        }
    }
}

/// Super-CIDR carving rule, matched against node properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SuperCidrRule {
    pub match_key: String,
    pub match_value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub super_cidr6: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub super_cidr4: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len6: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len4: Option<u8>,
}

pub const DEFAULT_V6_SLICE: u8 = 126;
pub const DEFAULT_V4_SLICE: u8 = 30;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct L3Config {
    pub enable_routing: bool,
    pub routing_module: String,
    pub cidr_v4: Option<Ipv4Net>,
    pub cidr_v6: Option<Ipv6Net>,
    pub auto_assign_ips: bool,
    pub auto_assign_super_cidr: Vec<SuperCidrRule>,
}

/// A `key:value` selector applied to a node's specific configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MatchRule {
    pub match_key: String,
    pub match_value: String,
    #[serde(default)]
    pub config_common: Map<String, Value>,
}

/// Compares a JSON property with a selector value written as text.
pub fn property_matches(props: &Map<String, Value>, key: &str, value: &str) -> bool {
    match props.get(key) {
        Some(Value::String(s)) => s == value,
        Some(Value::Bool(b)) => b.to_string() == value,
        Some(Value::Number(n)) => n.to_string() == value,
        _ => false,
    }
}

/// Objects merge key-wise; anything else is replaced by `overlay`.
pub fn deep_merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Fully merged configuration of one emulated node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub name: String,
    pub node_type: NodeType,
    pub image: String,
    pub cpu_request: CpuQuantity,
    pub mem_request: MemQuantity,
    /// `None` means unlimited.
    pub cpu_limit: Option<CpuQuantity>,
    pub mem_limit: Option<MemQuantity>,
    pub worker: Option<String>,
    pub l3: L3Config,
    /// The merged JSON document; typed fields above are views of it.
    pub properties: Map<String, Value>,
}

fn require<'a>(props: &'a Map<String, Value>, node: &str, key: &str) -> Result<&'a Value, ScenarioError> {
    props.get(key).ok_or_else(|| ScenarioError::MissingField {
        node: node.to_string(),
        field: key.to_string(),
    })
}

impl NodeConfig {
    pub fn from_properties(name: &str, props: Map<String, Value>) -> Result<Self, ScenarioError> {
        let ty = require(&props, name, "type")?;
        let node_type = ty
            .as_str()
            .and_then(NodeType::parse)
            .ok_or_else(|| ScenarioError::Config(format!("node `{name}` has unknown type {ty}")))?;
        let image = require(&props, name, "image")?
            .as_str()
            .ok_or_else(|| ScenarioError::Config(format!("node `{name}`: image must be a string")))?
            .to_string();
        let cpu_request = CpuQuantity::parse(require(&props, name, "cpu-request")?)?;
        let mem_request = MemQuantity::parse(require(&props, name, "mem-request")?)?;
        let cpu_limit = props.get("cpu-limit").map(CpuQuantity::parse).transpose()?;
        let mem_limit = props.get("mem-limit").map(MemQuantity::parse).transpose()?;
        let worker = props.get("worker").and_then(|w| w.as_str()).map(str::to_string);
        let l3 = match props.get("L3-config") {
            Some(Value::Object(l3)) => parse_l3(name, l3)?,
            Some(other) => {
                return Err(ScenarioError::Config(format!(
                    "node `{name}`: L3-config must be an object, got {other}"
                )))
            }
            None => L3Config::default(),
        };
        Ok(NodeConfig {
            name: name.to_string(),
            node_type,
            image,
            cpu_request,
            mem_request,
            cpu_limit,
            mem_limit,
            worker,
            l3,
            properties: props,
        })
    }

    pub fn matches(&self, key: &str, value: &str) -> bool {
        if key == "name" {
            return self.name == value;
        }
        property_matches(&self.properties, key, value)
    }

    /// JSON stored under `/config/nodes/<name>`.
    pub fn to_json(&self) -> Value {
        let mut props = self.properties.clone();
        if let Some(w) = &self.worker {
            props.insert("worker".into(), Value::String(w.clone()));
        }
        let l3 = props
            .entry("L3-config")
            .or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(l3) = l3 {
            if let Some(c) = &self.l3.cidr_v6 {
                l3.insert("cidr-v6".into(), Value::String(c.to_string()));
            }
            if let Some(c) = &self.l3.cidr_v4 {
                l3.insert("cidr-v4".into(), Value::String(c.to_string()));
            }
        }
        Value::Object(props)
    }
}

fn parse_l3(node: &str, l3: &Map<String, Value>) -> Result<L3Config, ScenarioError> {
    let bad = |what: &str| ScenarioError::Config(format!("node `{node}`: bad L3-config {what}"));
    let cidr_v6 = match l3.get("cidr-v6") {
        Some(Value::String(s)) => Some(s.parse::<Ipv6Net>().map_err(|_| bad("cidr-v6"))?),
        Some(_) => return Err(bad("cidr-v6")),
        None => None,
    };
    let cidr_v4 = match l3.get("cidr-v4") {
        Some(Value::String(s)) => Some(s.parse::<Ipv4Net>().map_err(|_| bad("cidr-v4"))?),
        Some(_) => return Err(bad("cidr-v4")),
        None => None,
    };
    let auto_assign_super_cidr = match l3.get("auto-assign-super-cidr") {
        Some(v) => Vec::<SuperCidrRule>::deserialize(v).map_err(|_| bad("auto-assign-super-cidr"))?,
        None => Vec::new(),
    };
    Ok(L3Config {
        enable_routing: l3.get("enable-routing").and_then(Value::as_bool).unwrap_or(false),
        routing_module: l3
            .get("routing-module")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        cidr_v4,
        cidr_v6,
        auto_assign_ips: l3.get("auto-assign-ips").and_then(Value::as_bool).unwrap_or(false),
        auto_assign_super_cidr,
    })
}

/// Applies every matching common rule in list order, then the node-specific
/// configuration on top.
pub fn merge_common_config(
    name: &str,
    node_specific: &Map<String, Value>,
    common_rules: &[MatchRule],
) -> Result<NodeConfig, ScenarioError> {
    let mut merged = Value::Object(Map::new());
    for rule in common_rules {
        if property_matches(node_specific, &rule.match_key, &rule.match_value) {
            deep_merge(&mut merged, &Value::Object(rule.config_common.clone()));
        }
    }
    deep_merge(&mut merged, &Value::Object(node_specific.clone()));
    match merged {
        Value::Object(props) => NodeConfig::from_properties(name, props),
        _ => unreachable!("merge of objects is an object"),
    }
}

/// Node subnets and loopbacks per address family.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AddressPlan {
    pub v6: BTreeMap<String, (Ipv6Net, Ipv6Addr)>,
    pub v4: BTreeMap<String, (Ipv4Net, Ipv4Addr)>,
}

impl AddressPlan {
    /// Preferred loopback of a node: IPv6 first.
    pub fn loopback(&self, node: &str) -> Option<IpAddr> {
        self.v6
            .get(node)
            .map(|(_, a)| IpAddr::V6(*a))
            .or_else(|| self.v4.get(node).map(|(_, a)| IpAddr::V4(*a)))
    }
}

pub fn last_address(net: &IpNet) -> IpAddr {
    net.broadcast()
}

/// First `count` consecutive `/prefix_len` slices of `super_net`.
pub fn allocate_subnets(super_net: IpNet, prefix_len: u8, count: usize) -> Result<Vec<IpNet>, ScenarioError> {
    let exhausted = |capacity: u128| ScenarioError::CidrExhausted {
        super_cidr: super_net.to_string(),
        prefix_len,
        capacity,
        requested: count,
    };
    if prefix_len < super_net.prefix_len() || prefix_len > super_net.max_prefix_len() {
        return Err(exhausted(0));
    }
    let bits = (prefix_len - super_net.prefix_len()) as u32;
    let capacity = if bits >= 128 { u128::MAX } else { 1u128 << bits };
    if (count as u128) > capacity {
        return Err(exhausted(capacity));
    }
    let subnets = super_net
        .subnets(prefix_len)
        .map_err(|_| exhausted(0))?
        .take(count)
        .collect();
    Ok(subnets)
}

/// Carves node subnets out of matching super-CIDRs, in node order. Explicit
/// `cidr-v4`/`cidr-v6` entries are kept as-is.
pub fn assign_addresses(nodes: &mut [NodeConfig]) -> Result<AddressPlan, ScenarioError> {
    // pool -> next free slice index
    let mut next_slice: BTreeMap<(IpNet, u8), usize> = BTreeMap::new();
    let mut plan = AddressPlan::default();
    for node in nodes.iter_mut() {
        if node.l3.auto_assign_ips {
            let rules = node.l3.auto_assign_super_cidr.clone();
            let matching: Vec<&SuperCidrRule> = rules
                .iter()
                .filter(|r| node.matches(&r.match_key, &r.match_value))
                .collect();
            let v6: Vec<_> = matching.iter().filter(|r| r.super_cidr6.is_some()).collect();
            let v4: Vec<_> = matching.iter().filter(|r| r.super_cidr4.is_some()).collect();
            if v6.len() > 1 || v4.len() > 1 {
                return Err(ScenarioError::Config(format!(
                    "node `{}` matches more than one super-CIDR rule per family",
                    node.name
                )));
            }
            if node.l3.cidr_v6.is_none() {
                if let Some(rule) = v6.first() {
                    let raw = rule.super_cidr6.as_deref().unwrap_or_default();
                    let net: Ipv6Net = raw
                        .parse()
                        .map_err(|_| ScenarioError::Config(format!("bad super-cidr6 `{raw}`")))?;
                    let len = rule.prefix_len6.unwrap_or(DEFAULT_V6_SLICE);
                    let slice = take_slice(&mut next_slice, IpNet::V6(net), len)?;
                    if let IpNet::V6(s) = slice {
                        node.l3.cidr_v6 = Some(s);
                    }
                }
            }
            if node.l3.cidr_v4.is_none() {
                if let Some(rule) = v4.first() {
                    let raw = rule.super_cidr4.as_deref().unwrap_or_default();
                    let net: Ipv4Net = raw
                        .parse()
                        .map_err(|_| ScenarioError::Config(format!("bad super-cidr4 `{raw}`")))?;
                    let len = rule.prefix_len4.unwrap_or(DEFAULT_V4_SLICE);
                    let slice = take_slice(&mut next_slice, IpNet::V4(net), len)?;
                    if let IpNet::V4(s) = slice {
                        node.l3.cidr_v4 = Some(s);
                    }
                }
            }
        }
        if let Some(net) = node.l3.cidr_v6 {
            plan.v6.insert(node.name.clone(), (net, net.broadcast()));
        }
        if let Some(net) = node.l3.cidr_v4 {
            plan.v4.insert(node.name.clone(), (net, net.broadcast()));
        }
    }
    check_disjoint(&plan)?;
    Ok(plan)
}

fn take_slice(next: &mut BTreeMap<(IpNet, u8), usize>, pool: IpNet, len: u8) -> Result<IpNet, ScenarioError> {
    let idx = next.entry((pool, len)).or_insert(0);
    let slices = allocate_subnets(pool, len, *idx + 1)?;
    *idx += 1;
    Ok(*slices.last().expect("one slice allocated"))
}

fn check_disjoint(plan: &AddressPlan) -> Result<(), ScenarioError> {
    let mut nets: Vec<(IpNet, &str)> = plan
        .v6
        .iter()
        .map(|(n, (net, _))| (IpNet::V6(*net), n.as_str()))
        .chain(plan.v4.iter().map(|(n, (net, _))| (IpNet::V4(*net), n.as_str())))
        .collect();
    nets.sort();
    for w in nets.windows(2) {
        let (a, na) = w[0];
        let (b, nb) = w[1];
        if a.contains(&b.network()) || b.contains(&a.network()) {
            return Err(ScenarioError::Config(format!(
                "subnets of `{na}` ({a}) and `{nb}` ({b}) overlap"
            )));
        }
    }
    Ok(())
}
