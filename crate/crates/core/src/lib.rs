//! Desk-scale emulation of epoch-driven LEO constellations.
//!
//! The pipeline runs from constellation geometry ([`orbit`], [`linkmodel`])
//! through epoch files ([`scenario`]) into a watchable key-value state
//! ([`statestore`]) whose per-node agents install routes ([`routing`]).
//! [`srv6`] implements the satellite PDU session control plane and
//! [`harness`] wires everything into experiments and the CLI.

pub mod harness;
pub mod linkmodel;
pub mod orbit;
pub mod placement;
pub mod routing;
pub mod scenario;
pub mod srv6;
pub mod statestore;

pub use linkmodel::LinkAttributes;
pub use orbit::{Position3D, SatelliteId, WalkerParams, WalkerPattern};
