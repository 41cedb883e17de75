//! Reference CAV policies: a hand-written rule and uniform random.
//!
//! The rule-based controller drives toward the exit with a fixed script: a
//! ramp-bound CAV inside [`MANDATORY_DISTANCE`] of its ramp moves right the
//! moment the safety gate opens and otherwise waits, while everyone else
//! (through traffic, vehicles that already missed their exit, ramp traffic
//! still far upstream) picks lanes with the same incentive logic HDVs use.

use std::collections::BTreeMap;

use rand::Rng;

use crate::sim::policy::{incentive_action, lane_change_safe};
use crate::sim::{Action, Kind, Sim, Vehicle, VehicleId};

/// Metres before its ramp at which a ramp-bound CAV starts forcing its way
/// toward lane 0.
pub const MANDATORY_DISTANCE: f64 = 100.0;

/// Scripted action for one CAV. HDVs are never commanded.
pub fn rule_based_action(v: &Vehicle, sim: &Sim) -> Action {
    let Kind::Cav(intent) = v.kind else {
        return Action::Keep;
    };
    if let Some(ramp) = sim.params().road.ramp_for(intent) {
        let in_zone =
            !v.missed_ramp && v.pos >= ramp - MANDATORY_DISTANCE && v.pos <= ramp;
        if in_zone {
            if v.lane == 0 {
                return Action::Keep;
            }
            return if lane_change_safe(v, v.lane - 1, sim) {
                Action::Right
            } else {
                Action::Keep
            };
        }
    }
    incentive_action(v, sim)
}

pub fn rule_based_commands(sim: &Sim) -> BTreeMap<VehicleId, Action> {
    sim.vehicles()
        .values()
        .filter(|v| v.kind.is_cav())
        .map(|v| (v.id, rule_based_action(v, sim)))
        .collect()
}

/// Uniform random action per CAV; draws happen in ascending id order.
pub fn random_commands(sim: &Sim, rng: &mut impl Rng) -> BTreeMap<VehicleId, Action> {
    sim.vehicles()
        .values()
        .filter(|v| v.kind.is_cav())
        .map(|v| {
            let a = Action::from_index(rng.gen_range(0..Action::COUNT)).expect("index in range");
            (v.id, a)
        })
        .collect()
}
