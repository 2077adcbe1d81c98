//! Walker constellations on circular two-body orbits.
//!
//! Positions are Earth-centered Earth-fixed (ECEF) in kilometres on a
//! spherical Earth. The Greenwich angle is zero at `t = 0`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gravitational parameter of the Earth, km^3/s^2.
pub const MU_EARTH: f64 = 398_600.4418;
/// Mean spherical Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Sidereal rotation rate, rad/s.
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_9e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("invalid walker parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("invalid ground node `{name}`: {reason}")]
    InvalidGround { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WalkerPattern {
    Star,
    Delta,
}

impl WalkerPattern {
    pub fn default_raan_spread_deg(self) -> f64 {
        match self {
            WalkerPattern::Star => 180.0,
            WalkerPattern::Delta => 360.0,
        }
    }
}

fn default_phasing() -> u32 {
    1
}

/// Walker shell description. `raan_spread_deg` defaults from the pattern
/// when omitted in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerParams {
    pub altitude_km: f64,
    pub inclination_deg: f64,
    pub num_planes: u32,
    pub sats_per_plane: u32,
    #[serde(default = "default_phasing")]
    pub phasing_factor: u32,
    pub pattern: WalkerPattern,
    #[serde(default)]
    pub raan_spread_deg: Option<f64>,
}

impl WalkerParams {
    pub fn new(
        altitude_km: f64,
        inclination_deg: f64,
        num_planes: u32,
        sats_per_plane: u32,
        pattern: WalkerPattern,
    ) -> Self {
        WalkerParams {
            altitude_km,
            inclination_deg,
            num_planes,
            sats_per_plane,
            phasing_factor: if num_planes > 1 { 1 } else { 0 },
            pattern,
            raan_spread_deg: None,
        }
    }

    /// The 588-satellite polar Walker-star shell used in the reference
    /// experiments.
    pub fn oneweb_like() -> Self {
        WalkerParams::new(1200.0, 87.9, 12, 49, WalkerPattern::Star)
    }

    pub fn raan_spread(&self) -> f64 {
        self.raan_spread_deg
            .unwrap_or_else(|| self.pattern.default_raan_spread_deg())
    }

    pub fn total(&self) -> usize {
        self.num_planes as usize * self.sats_per_plane as usize
    }

    pub fn orbit_radius_km(&self) -> f64 {
        EARTH_RADIUS_KM + self.altitude_km
    }

    pub fn mean_motion_rad_s(&self) -> f64 {
        (MU_EARTH / self.orbit_radius_km().powi(3)).sqrt()
    }

    pub fn period_s(&self) -> f64 {
        2.0 * PI / self.mean_motion_rad_s()
    }

    pub fn validate(&self) -> Result<(), OrbitError> {
        let bad = |field, reason: &str| {
            Err(OrbitError::InvalidParam {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.altitude_km.is_finite() && self.altitude_km > 0.0) {
            return bad("altitude_km", "must be a positive finite number");
        }
        if !(self.inclination_deg > 0.0 && self.inclination_deg <= 180.0) {
            return bad("inclination_deg", "must lie in (0, 180]");
        }
        if self.num_planes < 1 {
            return bad("num_planes", "must be at least 1");
        }
        if self.sats_per_plane < 1 {
            return bad("sats_per_plane", "must be at least 1");
        }
        if self.phasing_factor >= self.num_planes {
            return bad("phasing_factor", "must be smaller than num_planes");
        }
        let spread = self.raan_spread();
        if !(spread.is_finite() && spread > 0.0 && spread <= 360.0) {
            return bad("raan_spread_deg", "must lie in (0, 360]");
        }
        Ok(())
    }
}

/// A satellite addressed by plane and slot within the plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SatelliteId {
    pub plane: u32,
    pub slot: u32,
}

impl SatelliteId {
    pub fn new(plane: u32, slot: u32) -> Self {
        SatelliteId { plane, slot }
    }

    pub fn flat(self, sats_per_plane: u32) -> usize {
        self.plane as usize * sats_per_plane as usize + self.slot as usize
    }

    pub fn from_flat(flat: usize, sats_per_plane: u32) -> Self {
        let s = sats_per_plane as usize;
        SatelliteId {
            plane: (flat / s) as u32,
            slot: (flat % s) as u32,
        }
    }
}

impl fmt::Display for SatelliteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}S{}", self.plane, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Position3D { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Position3D) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn sub(&self, o: &Position3D) -> Position3D {
        Position3D::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(&self, k: f64) -> Position3D {
        Position3D::new(self.x * k, self.y * k, self.z * k)
    }

    /// Point on the spherical Earth surface (geocentric latitude).
    pub fn from_lat_lon(lat_deg: f64, lon_deg: f64, radius_km: f64) -> Position3D {
        let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
        Position3D::new(
            radius_km * lat.cos() * lon.cos(),
            radius_km * lat.cos() * lon.sin(),
            radius_km * lat.sin(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundKind {
    Gateway,
    User,
}

fn default_antennas() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundNode {
    pub name: String,
    pub kind: GroundKind,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    #[serde(default = "default_antennas")]
    pub max_antennas: u32,
    /// Preferred gateway for a user; the closest gateway when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<String>,
}

impl GroundNode {
    pub fn gateway(name: &str, lat: f64, lon: f64, antennas: u32) -> Self {
        GroundNode {
            name: name.to_string(),
            kind: GroundKind::Gateway,
            latitude_deg: lat,
            longitude_deg: lon,
            max_antennas: antennas,
            gateway: None,
        }
    }

    pub fn user(name: &str, lat: f64, lon: f64) -> Self {
        GroundNode {
            name: name.to_string(),
            kind: GroundKind::User,
            latitude_deg: lat,
            longitude_deg: lon,
            max_antennas: 1,
            gateway: None,
        }
    }

    pub fn validate(&self) -> Result<(), OrbitError> {
        let bad = |reason: &str| {
            Err(OrbitError::InvalidGround {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return bad("latitude outside [-90, 90]");
        }
        if !(-180.0..=180.0).contains(&self.longitude_deg) {
            return bad("longitude outside [-180, 180]");
        }
        match self.kind {
            GroundKind::User if self.max_antennas != 1 => bad("users carry exactly one antenna"),
            GroundKind::Gateway if self.max_antennas < 1 => bad("gateways need at least one antenna"),
            _ => Ok(()),
        }
    }

    /// ECEF position; ground nodes are fixed in the Earth frame.
    pub fn position(&self) -> Position3D {
        Position3D::from_lat_lon(self.latitude_deg, self.longitude_deg, EARTH_RADIUS_KM)
    }
}

/// Orbital slot of one satellite at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteElements {
    pub id: SatelliteId,
    pub raan_rad: f64,
    pub mean_anomaly_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstellationState {
    pub params: WalkerParams,
    pub satellites: Vec<SatelliteElements>,
    radius_km: f64,
    mean_motion: f64,
    cos_i: f64,
    sin_i: f64,
}

pub fn generate_walker(params: &WalkerParams) -> Result<ConstellationState, OrbitError> {
    params.validate()?;
    let p = params.num_planes;
    let s = params.sats_per_plane;
    let spread = params.raan_spread();
    let mut satellites = Vec::with_capacity(params.total());
    for plane in 0..p {
        let raan_deg = plane as f64 * spread / p as f64;
        let phase_deg = (plane * params.phasing_factor) as f64 * 360.0 / (p * s) as f64;
        for slot in 0..s {
            let ma_deg = (slot as f64 * 360.0 / s as f64 + phase_deg).rem_euclid(360.0);
            satellites.push(SatelliteElements {
                id: SatelliteId::new(plane, slot),
                raan_rad: raan_deg.to_radians(),
                mean_anomaly_rad: ma_deg.to_radians(),
            });
        }
    }
    let inc = params.inclination_deg.to_radians();
    Ok(ConstellationState {
        params: params.clone(),
        satellites,
        radius_km: params.orbit_radius_km(),
        mean_motion: params.mean_motion_rad_s(),
        cos_i: inc.cos(),
        sin_i: inc.sin(),
    })
}

impl ConstellationState {
    pub fn len(&self) -> usize {
        self.satellites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.satellites.is_empty()
    }

    pub fn sats_per_plane(&self) -> u32 {
        self.params.sats_per_plane
    }

    pub fn ids(&self) -> impl Iterator<Item = SatelliteId> + '_ {
        self.satellites.iter().map(|s| s.id)
    }

    /// Position in the inertial frame (aligned with ECEF at `t = 0`).
    pub fn inertial_position(&self, flat: usize, t: f64) -> Position3D {
        let el = &self.satellites[flat];
        let u = el.mean_anomaly_rad + self.mean_motion * t;
        let (su, cu) = u.sin_cos();
        let (so, co) = el.raan_rad.sin_cos();
        Position3D::new(
            self.radius_km * (cu * co - su * self.cos_i * so),
            self.radius_km * (cu * so + su * self.cos_i * co),
            self.radius_km * su * self.sin_i,
        )
    }

    pub fn position(&self, flat: usize, t: f64) -> Position3D {
        let p = self.inertial_position(flat, t);
        let theta = EARTH_ROTATION_RAD_S * t;
        let (st, ct) = theta.sin_cos();
        Position3D::new(ct * p.x + st * p.y, -st * p.x + ct * p.y, p.z)
    }

    /// True while the satellite moves northwards (argument of latitude in
    /// (-90, 90) degrees).
    pub fn is_ascending(&self, flat: usize, t: f64) -> bool {
        let u = self.satellites[flat].mean_anomaly_rad + self.mean_motion * t;
        u.cos() > 0.0
    }

    /// ECEF positions of every satellite, indexed by flat id.
    pub fn propagate(&self, t: f64) -> Vec<Position3D> {
        (0..self.len()).map(|i| self.position(i, t)).collect()
    }
}

/// Anything that can place a satellite at a time. Lets visibility logic run
/// against test doubles.
pub trait Ephemeris {
    fn sat_position(&self, flat: usize, t: f64) -> Position3D;
}

impl Ephemeris for ConstellationState {
    fn sat_position(&self, flat: usize, t: f64) -> Position3D {
        self.position(flat, t)
    }
}

pub fn slant_range(sat: &Position3D, ground: &Position3D) -> f64 {
    sat.sub(ground).norm()
}

/// Elevation of `sat` above the local horizon of `ground`, in degrees.
pub fn elevation_angle(sat: &Position3D, ground: &Position3D) -> f64 {
    let los = sat.sub(ground);
    let range = los.norm();
    let gnorm = ground.norm();
    if range == 0.0 || gnorm == 0.0 {
        return 90.0;
    }
    // atan2 stays well-conditioned near zenith, where asin does not.
    let up = ground.scale(1.0 / gnorm);
    let vertical = los.dot(&up);
    let horizontal = los.sub(&up.scale(vertical)).norm();
    vertical.atan2(horizontal).to_degrees()
}

/// Slant range at which a satellite on a shell of altitude `altitude_km`
/// appears at `elevation_deg`.
pub fn slant_range_at_elevation(altitude_km: f64, elevation_deg: f64) -> f64 {
    let re = EARTH_RADIUS_KM;
    let e = elevation_deg.to_radians();
    ((re + altitude_km).powi(2) - (re * e.cos()).powi(2)).sqrt() - re * e.sin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityScan {
    pub min_elevation_deg: f64,
    pub step_s: f64,
    /// Scanning stops after this lookahead; the returned value is capped.
    pub max_lookahead_s: f64,
}

/// Remaining visibility of satellite `flat` from `ground` starting at `t`,
/// quantised to whole scan steps.
pub fn remaining_visibility<E: Ephemeris + ?Sized>(
    eph: &E,
    flat: usize,
    ground: &Position3D,
    t: f64,
    scan: &VisibilityScan,
) -> f64 {
    let visible = |at: f64| elevation_angle(&eph.sat_position(flat, at), ground) >= scan.min_elevation_deg;
    if !visible(t) {
        return 0.0;
    }
    let max_steps = (scan.max_lookahead_s / scan.step_s).floor() as u64;
    let mut k = 1u64;
    while k <= max_steps {
        if !visible(t + k as f64 * scan.step_s) {
            return (k - 1) as f64 * scan.step_s;
        }
        k += 1;
    }
    max_steps as f64 * scan.step_s
}
