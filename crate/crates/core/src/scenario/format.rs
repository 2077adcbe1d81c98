//! Epoch-file and link-record wire formats.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linkmodel::LinkAttributes;

use super::ScenarioError;

/// Shortest decimal form that still carries a fractional part:
/// `400.0`, `0.001`, `3.5`.
pub fn format_decimal(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

pub fn format_rate(mbps: f64) -> String {
    format!("{}mbit", format_decimal(mbps))
}

pub fn format_delay(ms: f64) -> String {
    format!("{}ms", format_decimal(ms))
}

fn split_unit(s: &str) -> (&str, &str) {
    let idx = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .unwrap_or(s.len());
    (&s[..idx], &s[idx..])
}

/// Accepts `400mbit`, `400.0mbit`, `1gbit`, `500kbit`, `2e3kbit`.
pub fn parse_rate(s: &str) -> Result<f64, ScenarioError> {
    let s = s.trim();
    let (num, unit) = split_unit(s);
    let v: f64 = num
        .parse()
        .map_err(|_| ScenarioError::Format(format!("bad rate `{s}`")))?;
    let scale = match unit.to_ascii_lowercase().as_str() {
        "mbit" | "mbps" => 1.0,
        "gbit" | "gbps" => 1000.0,
        "kbit" | "kbps" => 1e-3,
        "bit" | "bps" => 1e-6,
        _ => return Err(ScenarioError::Format(format!("bad rate unit in `{s}`"))),
    };
    Ok(v * scale)
}

/// Accepts `3ms`, `3.0ms`, `250us`, `0.003s`.
pub fn parse_delay(s: &str) -> Result<f64, ScenarioError> {
    let s = s.trim();
    let (num, unit) = split_unit(s);
    let v: f64 = num
        .parse()
        .map_err(|_| ScenarioError::Format(format!("bad delay `{s}`")))?;
    let scale = match unit {
        "ms" => 1.0,
        "us" => 1e-3,
        "s" => 1000.0,
        _ => return Err(ScenarioError::Format(format!("bad delay unit in `{s}`"))),
    };
    Ok(v * scale)
}

pub fn format_time(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_time(s: &str) -> Result<DateTime<Utc>, ScenarioError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| ScenarioError::Format(format!("bad timestamp `{s}`: {e}")))
}

pub(crate) mod iso_time {
    use super::*;

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_time(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        parse_time(&raw).map_err(D::Error::custom)
    }
}

/// Unordered endpoint pair, normalised so that `a <= b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkKey {
    pub a: String,
    pub b: String,
}

impl LinkKey {
    pub fn new(x: &str, y: &str) -> Self {
        if x <= y {
            LinkKey {
                a: x.to_string(),
                b: y.to_string(),
            }
        } else {
            LinkKey {
                a: y.to_string(),
                b: x.to_string(),
            }
        }
    }

    pub fn contains(&self, node: &str) -> bool {
        self.a == node || self.b == node
    }

    pub fn other(&self, node: &str) -> Option<&str> {
        if self.a == node {
            Some(&self.b)
        } else if self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }
}

impl fmt::Display for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEndpoints {
    pub endpoint1: String,
    pub endpoint2: String,
}

impl LinkEndpoints {
    pub fn key(&self) -> LinkKey {
        LinkKey::new(&self.endpoint1, &self.endpoint2)
    }
}

/// One emulated link as carried in epoch files and in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRecord {
    pub endpoint1: String,
    pub endpoint2: String,
    pub attrs: LinkAttributes,
}

impl LinkRecord {
    pub fn new(endpoint1: &str, endpoint2: &str, attrs: LinkAttributes) -> Self {
        LinkRecord {
            endpoint1: endpoint1.to_string(),
            endpoint2: endpoint2.to_string(),
            attrs,
        }
    }

    pub fn key(&self) -> LinkKey {
        LinkKey::new(&self.endpoint1, &self.endpoint2)
    }

    pub fn endpoints(&self) -> LinkEndpoints {
        LinkEndpoints {
            endpoint1: self.endpoint1.clone(),
            endpoint2: self.endpoint2.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("link record serialises")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, ScenarioError> {
        LinkRecord::deserialize(v).map_err(|e| ScenarioError::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct RawLinkRecord {
    endpoint1: String,
    endpoint2: String,
    rate: String,
    loss: serde_json::Value,
    delay: String,
}

impl Serialize for LinkRecord {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RawLinkRecord {
            endpoint1: self.endpoint1.clone(),
            endpoint2: self.endpoint2.clone(),
            rate: format_rate(self.attrs.rate_mbps),
            loss: serde_json::Value::String(format_decimal(self.attrs.loss_fraction)),
            delay: format_delay(self.attrs.delay_ms),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinkRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawLinkRecord::deserialize(d)?;
        let loss = match &raw.loss {
            serde_json::Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
            serde_json::Value::String(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| D::Error::custom(format!("bad loss `{s}`")))?,
            other => return Err(D::Error::custom(format!("bad loss {other}"))),
        };
        let rate = parse_rate(&raw.rate).map_err(D::Error::custom)?;
        let delay = parse_delay(&raw.delay).map_err(D::Error::custom)?;
        Ok(LinkRecord {
            endpoint1: raw.endpoint1,
            endpoint2: raw.endpoint2,
            attrs: LinkAttributes::new(rate, delay, loss),
        })
    }
}

/// Timestamped delta of the emulation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EpochFile {
    #[serde(with = "iso_time")]
    pub time: DateTime<Utc>,
    #[serde(default)]
    pub links_del: Vec<LinkEndpoints>,
    #[serde(default)]
    pub links_update: Vec<LinkRecord>,
    #[serde(default)]
    pub links_add: Vec<LinkRecord>,
    #[serde(default)]
    pub run: BTreeMap<String, Vec<String>>,
}

impl EpochFile {
    pub fn empty(time: DateTime<Utc>) -> Self {
        EpochFile {
            time,
            links_del: Vec::new(),
            links_update: Vec::new(),
            links_add: Vec::new(),
            run: BTreeMap::new(),
        }
    }

    pub fn is_link_noop(&self) -> bool {
        self.links_del.is_empty() && self.links_update.is_empty() && self.links_add.is_empty()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("epoch file serialises")
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn add_task(&mut self, node: &str, task: impl Into<String>) {
        self.run.entry(node.to_string()).or_default().push(task.into());
    }
}

/// Glob with a single `*` standing for the epoch index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePattern {
    prefix: String,
    suffix: String,
}

impl FilePattern {
    pub fn new(pattern: &str) -> Result<Self, ScenarioError> {
        let mut parts = pattern.splitn(2, '*');
        let prefix = parts.next().unwrap_or_default();
        match parts.next() {
            Some(suffix) if !suffix.contains('*') => Ok(FilePattern {
                prefix: prefix.to_string(),
                suffix: suffix.to_string(),
            }),
            _ => Err(ScenarioError::Format(format!(
                "file pattern `{pattern}` needs exactly one `*`"
            ))),
        }
    }

    pub fn name(&self, index: usize) -> String {
        format!("{}{}{}", self.prefix, index, self.suffix)
    }

    /// Epoch index encoded in `file_name`, if it matches.
    pub fn index(&self, file_name: &str) -> Option<usize> {
        file_name
            .strip_prefix(&self.prefix)?
            .strip_suffix(&self.suffix)?
            .parse()
            .ok()
    }
}

impl fmt::Display for FilePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*{}", self.prefix, self.suffix)
    }
}
