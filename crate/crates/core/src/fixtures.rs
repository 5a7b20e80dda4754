//! Feeder and measurement documents shipped with the crate.

use crate::feeder::{parse_feeder, FeederModel};

/// IEEE-37 feeder: 35 three-phase buses, 105 phase-nodes, 4.8 kV / 30 kVA-per-phase base.
pub const IEEE37_FEEDER: &str = include_str!("../fixtures/ieee37.json");

/// Lossless 3-bus single-phase network used by the analytic oracle.
pub const THREE_BUS_FEEDER: &str = include_str!("../fixtures/three_bus.json");

pub fn ieee37() -> FeederModel {
    parse_feeder(IEEE37_FEEDER).expect("shipped IEEE-37 fixture is valid")
}
