//! Bundled benchmark networks.
//!
//! `ieee30` is the standard IEEE 30-bus system: 6 generators, 21 loads
//! totalling 2.834 p.u. on a 100 MVA base, and 37 transmission lines plus
//! the 4 transformer branches that connect the two voltage levels (the
//! graph is disconnected without them). Edge weights derive from branch
//! reactances at a flat nominal point, `k = 1/x`. `star5` is the 5-bus
//! star network with weights (4, 10, 16, 10) and bus 5 interior.

use crate::grid::{parse_network_str, NetworkModel};
use crate::scalar::Real;

pub const IEEE30_JSON: &str = include_str!("../data/ieee30.json");
pub const STAR5_JSON: &str = include_str!("../data/star5.json");

pub fn ieee30<F: Real>() -> NetworkModel<F> {
    parse_network_str(IEEE30_JSON).expect("bundled ieee30.json is valid")
}

pub fn star5<F: Real>() -> NetworkModel<F> {
    parse_network_str(STAR5_JSON).expect("bundled star5.json is valid")
}

/// Resolve `builtin:<name>` dataset references used by the CLI.
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "ieee30" => Some(IEEE30_JSON),
        "star5" => Some(STAR5_JSON),
        _ => None,
    }
}
