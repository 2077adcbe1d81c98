//! Link sets and per-link physical attributes.
//!
//! ISLs follow the Grid+ pattern. Ground links are gated by elevation and
//! then by an antenna plug-in. Rate, delay and loss come from named models
//! evaluated over a [`PhyContext`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orbit::{
    elevation_angle, slant_range, ConstellationState, GroundKind, GroundNode, Position3D,
    SatelliteId, WalkerParams, WalkerPattern,
};

/// Speed of light in vacuum, km/s.
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkModelError {
    #[error("slant range {range_km} km is shorter than the altitude {altitude_km} km")]
    SlantBelowAltitude { range_km: f64, altitude_km: f64 },
    #[error("phy plug-in `{plugin}` returned a non-finite value ({value})")]
    NonFinite { plugin: String, value: f64 },
    #[error("phy plug-in `{plugin}` returned an out-of-range value ({value})")]
    OutOfRange { plugin: String, value: f64 },
    #[error("unknown phy model `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAttributes {
    pub rate_mbps: f64,
    pub delay_ms: f64,
    pub loss_fraction: f64,
}

impl LinkAttributes {
    pub fn new(rate_mbps: f64, delay_ms: f64, loss_fraction: f64) -> Self {
        LinkAttributes {
            rate_mbps,
            delay_ms,
            loss_fraction,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.rate_mbps.is_finite()
            && self.delay_ms.is_finite()
            && self.loss_fraction.is_finite()
            && self.rate_mbps > 0.0
            && self.delay_ms >= 0.0
            && (0.0..=1.0).contains(&self.loss_fraction)
    }
}

/// Parameters of the slant-range bitrate model for one class of ground link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlantRateParams {
    pub zenith_rate_mbps: f64,
    pub zenith_snr_db: f64,
    pub zenith_atmos_loss_db: f64,
    pub altitude_km: f64,
}

impl SlantRateParams {
    pub fn oneweb_gateway() -> Self {
        SlantRateParams {
            zenith_rate_mbps: 200.0,
            zenith_snr_db: 30.0,
            zenith_atmos_loss_db: 0.5,
            altitude_km: 1200.0,
        }
    }

    pub fn oneweb_user() -> Self {
        SlantRateParams {
            zenith_rate_mbps: 50.0,
            zenith_snr_db: 12.0,
            zenith_atmos_loss_db: 0.5,
            altitude_km: 1200.0,
        }
    }
}

/// Attenuation relative to zenith, linear scale: free-space spreading times
/// the extra atmospheric path.
pub fn relative_attenuation(range_km: f64, altitude_km: f64, zenith_atmos_loss_db: f64) -> f64 {
    let ratio = range_km / altitude_km;
    ratio.powi(-2) * 10f64.powf(-(zenith_atmos_loss_db / 10.0) * (ratio - 1.0))
}

/// Shannon-scaled bitrate at slant range `range_km`, normalised so that the
/// zenith range returns exactly the zenith rate.
pub fn slant_range_bitrate(range_km: f64, p: &SlantRateParams) -> Result<f64, LinkModelError> {
    // geometric zenith ranges carry float noise around H
    let tolerance = p.altitude_km * 1e-9;
    if !(range_km >= p.altitude_km - tolerance) {
        return Err(LinkModelError::SlantBelowAltitude {
            range_km,
            altitude_km: p.altitude_km,
        });
    }
    if range_km <= p.altitude_km {
        return Ok(p.zenith_rate_mbps);
    }
    let snr = 10f64.powf(p.zenith_snr_db / 10.0);
    let att = relative_attenuation(range_km, p.altitude_km, p.zenith_atmos_loss_db);
    Ok(p.zenith_rate_mbps * (1.0 + snr * att).log2() / (1.0 + snr).log2())
}

pub fn propagation_delay(distance_km: f64) -> f64 {
    distance_km / SPEED_OF_LIGHT_KM_S * 1000.0
}

/// Grid+ inter-satellite links as pairs ordered by flat id.
pub fn grid_plus_isls(params: &WalkerParams) -> Vec<(SatelliteId, SatelliteId)> {
    let p = params.num_planes;
    let s = params.sats_per_plane;
    let mut links = Vec::new();
    for plane in 0..p {
        match s {
            0 | 1 => {}
            2 => links.push((SatelliteId::new(plane, 0), SatelliteId::new(plane, 1))),
            _ => {
                for slot in 0..s {
                    let a = SatelliteId::new(plane, slot);
                    let b = SatelliteId::new(plane, (slot + 1) % s);
                    links.push(if a < b { (a, b) } else { (b, a) });
                }
            }
        }
    }
    let mut plane_pairs: Vec<(u32, u32)> = (0..p.saturating_sub(1)).map(|k| (k, k + 1)).collect();
    match params.pattern {
        // counter-rotating first and last planes: no seam crossing
        WalkerPattern::Star => plane_pairs.retain(|&(a, b)| !(a == 0 && b == p - 1)),
        WalkerPattern::Delta if p >= 3 => plane_pairs.push((0, p - 1)),
        WalkerPattern::Delta => {}
    }
    for (a, b) in plane_pairs {
        for slot in 0..s {
            links.push((SatelliteId::new(a, slot), SatelliteId::new(b, slot)));
        }
    }
    links.sort();
    links
}

/// Decides which elevation-feasible ground links survive.
pub trait AntennaPlugin: Send + Sync {
    fn name(&self) -> &str;
    /// `candidates` are `(flat sat id, elevation deg)` for one ground node.
    fn select(&self, ground: &GroundNode, candidates: Vec<(usize, f64)>) -> Vec<(usize, f64)>;
}

/// Keeps every visible satellite.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeepAllAntennas;

impl AntennaPlugin for KeepAllAntennas {
    fn name(&self) -> &str {
        "keep-all"
    }

    fn select(&self, _ground: &GroundNode, candidates: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
        candidates
    }
}

/// Keeps at most `max_antennas` highest-elevation satellites.
#[derive(Debug, Default, Clone, Copy)]
pub struct AntennaLimit;

impl AntennaPlugin for AntennaLimit {
    fn name(&self) -> &str {
        "antenna-limit"
    }

    fn select(&self, ground: &GroundNode, mut candidates: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.truncate(ground.max_antennas as usize);
        candidates.sort_by_key(|c| c.0);
        candidates
    }
}

/// Ground-to-satellite pairs at time `t`, as `(ground index, flat sat id)`.
pub fn visible_links(
    ground_nodes: &[GroundNode],
    sat_positions: &[Position3D],
    min_elevation_deg: f64,
    antenna: &dyn AntennaPlugin,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (gi, g) in ground_nodes.iter().enumerate() {
        let gp = g.position();
        let candidates: Vec<(usize, f64)> = sat_positions
            .iter()
            .enumerate()
            .filter_map(|(si, sp)| {
                let el = elevation_angle(sp, &gp);
                (el >= min_elevation_deg).then_some((si, el))
            })
            .collect();
        out.extend(antenna.select(g, candidates).into_iter().map(|(si, _)| (gi, si)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkClass {
    Isl,
    Gateway,
    User,
}

impl LinkClass {
    pub fn for_ground(kind: GroundKind) -> Self {
        match kind {
            GroundKind::Gateway => LinkClass::Gateway,
            GroundKind::User => LinkClass::User,
        }
    }

    pub fn is_access(self) -> bool {
        self != LinkClass::Isl
    }
}

/// What a phy plug-in sees about one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhyContext {
    pub a: Position3D,
    pub b: Position3D,
    pub class: LinkClass,
    pub slant_range_km: f64,
    pub time_s: f64,
}

impl PhyContext {
    pub fn new(a: Position3D, b: Position3D, class: LinkClass, time_s: f64) -> Self {
        PhyContext {
            a,
            b,
            class,
            slant_range_km: slant_range(&a, &b),
            time_s,
        }
    }
}

/// A named model returning one link attribute.
pub trait PhyPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, ctx: &PhyContext) -> Result<f64, LinkModelError>;
}

/// Fixed ISL rate, slant-range rate for ground links.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlantRangeRate {
    pub isl_rate_mbps: f64,
    pub gateway: SlantRateParams,
    pub user: SlantRateParams,
}

impl PhyPlugin for SlantRangeRate {
    fn name(&self) -> &str {
        "slant-range"
    }

    fn evaluate(&self, ctx: &PhyContext) -> Result<f64, LinkModelError> {
        match ctx.class {
            LinkClass::Isl => Ok(self.isl_rate_mbps),
            LinkClass::Gateway => slant_range_bitrate(ctx.slant_range_km, &self.gateway),
            LinkClass::User => slant_range_bitrate(ctx.slant_range_km, &self.user),
        }
    }
}

/// Constant per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedByClass {
    pub label: &'static str,
    pub isl: f64,
    pub access: f64,
}

impl PhyPlugin for FixedByClass {
    fn name(&self) -> &str {
        self.label
    }

    fn evaluate(&self, ctx: &PhyContext) -> Result<f64, LinkModelError> {
        Ok(if ctx.class.is_access() { self.access } else { self.isl })
    }
}

/// Line-of-sight distance over c.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistanceDelay;

impl PhyPlugin for DistanceDelay {
    fn name(&self) -> &str {
        "distance"
    }

    fn evaluate(&self, ctx: &PhyContext) -> Result<f64, LinkModelError> {
        Ok(propagation_delay(ctx.slant_range_km))
    }
}

fn default_isl_rate() -> f64 {
    400.0
}

fn default_rate_model() -> String {
    "slant-range".to_string()
}

fn default_loss_model() -> String {
    "fixed".to_string()
}

/// `phy` block of the generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PhyConfig {
    #[serde(default = "default_rate_model")]
    pub rate_model: String,
    #[serde(default = "default_isl_rate")]
    pub isl_rate_mbps: f64,
    /// Used by the `fixed` rate model for every ground link.
    #[serde(default)]
    pub access_rate_mbps: Option<f64>,
    pub gateway: SlantRateParams,
    pub user: SlantRateParams,
    #[serde(default = "default_loss_model")]
    pub loss_model: String,
    #[serde(default)]
    pub isl_loss: f64,
    #[serde(default)]
    pub access_loss: f64,
}

impl Default for PhyConfig {
    fn default() -> Self {
        PhyConfig {
            rate_model: default_rate_model(),
            isl_rate_mbps: default_isl_rate(),
            access_rate_mbps: None,
            gateway: SlantRateParams::oneweb_gateway(),
            user: SlantRateParams::oneweb_user(),
            loss_model: default_loss_model(),
            isl_loss: 0.0,
            access_loss: 0.0,
        }
    }
}

pub struct PhyPipeline {
    pub rate: Box<dyn PhyPlugin>,
    pub delay: Box<dyn PhyPlugin>,
    pub loss: Box<dyn PhyPlugin>,
}

impl std::fmt::Debug for PhyPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhyPipeline")
            .field("rate", &self.rate.name())
            .field("delay", &self.delay.name())
            .field("loss", &self.loss.name())
            .finish()
    }
}

impl PhyPipeline {
    pub fn from_config(cfg: &PhyConfig) -> Result<Self, LinkModelError> {
        let rate: Box<dyn PhyPlugin> = match cfg.rate_model.as_str() {
            "slant-range" => Box::new(SlantRangeRate {
                isl_rate_mbps: cfg.isl_rate_mbps,
                gateway: cfg.gateway,
                user: cfg.user,
            }),
            "fixed" => Box::new(FixedByClass {
                label: "fixed-rate",
                isl: cfg.isl_rate_mbps,
                access: cfg.access_rate_mbps.unwrap_or(cfg.user.zenith_rate_mbps),
            }),
            other => return Err(LinkModelError::UnknownModel(other.to_string())),
        };
        let loss: Box<dyn PhyPlugin> = match cfg.loss_model.as_str() {
            "fixed" => Box::new(FixedByClass {
                label: "fixed-loss",
                isl: cfg.isl_loss,
                access: cfg.access_loss,
            }),
            other => return Err(LinkModelError::UnknownModel(other.to_string())),
        };
        Ok(PhyPipeline {
            rate,
            delay: Box::new(DistanceDelay),
            loss,
        })
    }

    pub fn evaluate(&self, ctx: &PhyContext) -> Result<LinkAttributes, LinkModelError> {
        let checked = |plugin: &dyn PhyPlugin| -> Result<f64, LinkModelError> {
            let v = plugin.evaluate(ctx)?;
            if !v.is_finite() {
                return Err(LinkModelError::NonFinite {
                    plugin: plugin.name().to_string(),
                    value: v,
                });
            }
            Ok(v)
        };
        let rate = checked(self.rate.as_ref())?;
        let delay = checked(self.delay.as_ref())?;
        let loss = checked(self.loss.as_ref())?;
        if rate <= 0.0 {
            return Err(LinkModelError::OutOfRange {
                plugin: self.rate.name().to_string(),
                value: rate,
            });
        }
        if delay < 0.0 {
            return Err(LinkModelError::OutOfRange {
                plugin: self.delay.name().to_string(),
                value: delay,
            });
        }
        if !(0.0..=1.0).contains(&loss) {
            return Err(LinkModelError::OutOfRange {
                plugin: self.loss.name().to_string(),
                value: loss,
            });
        }
        Ok(LinkAttributes::new(rate, delay, loss))
    }
}

/// One link of a snapshot, with endpoints as flat satellite ids or ground
/// indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnapshotLink {
    Isl(usize, usize),
    Ground { ground: usize, sat: usize },
}

/// Every link alive at `t` with its attributes.
pub fn snapshot_links(
    constellation: &ConstellationState,
    isls: &[(SatelliteId, SatelliteId)],
    ground_nodes: &[GroundNode],
    min_elevation_deg: f64,
    antenna: &dyn AntennaPlugin,
    phy: &PhyPipeline,
    t: f64,
) -> Result<Vec<(SnapshotLink, LinkAttributes)>, LinkModelError> {
    let spp = constellation.sats_per_plane();
    let positions = constellation.propagate(t);
    let mut out = Vec::with_capacity(isls.len() + ground_nodes.len() * 16);
    for (a, b) in isls {
        let (fa, fb) = (a.flat(spp), b.flat(spp));
        let ctx = PhyContext::new(positions[fa], positions[fb], LinkClass::Isl, t);
        out.push((SnapshotLink::Isl(fa, fb), phy.evaluate(&ctx)?));
    }
    for (gi, si) in visible_links(ground_nodes, &positions, min_elevation_deg, antenna) {
        let g = &ground_nodes[gi];
        let ctx = PhyContext::new(positions[si], g.position(), LinkClass::for_ground(g.kind), t);
        out.push((SnapshotLink::Ground { ground: gi, sat: si }, phy.evaluate(&ctx)?));
    }
    Ok(out)
}
