//! Incentive/safety lane selection for human-driven vehicles.
//!
//! An HDV changes lanes when the move is safe for itself and the vehicle
//! behind it in the target lane, and the car-following acceleration it
//! would gain exceeds [`GAIN_THRESHOLD`]. Candidate lanes are examined
//! right first, so equal gains resolve toward the ramp side of the road.

use super::idm::{idm_accel, FREE_ROAD_GAP};
use super::{Action, Sim, Vehicle};

/// Minimum acceleration advantage, in m/s^2, before a change is worth it.
pub const GAIN_THRESHOLD: f64 = 0.2;

/// Clamped car-following acceleration the vehicle would have in `lane`
/// at its current position and speed.
fn accel_in_lane(v: &Vehicle, lane: usize, sim: &Sim) -> f64 {
    let p = sim.params().idm(v.kind);
    let v0 = sim.params().speed_limit(v.kind);
    let (leader, _) = sim.prospective_neighbors(lane, v.pos, v.id);
    let a = match leader {
        Some(l) => {
            let gap = l.pos - sim.params().vehicle_length - v.pos;
            if gap <= 0.0 {
                return -p.b_emergency;
            }
            idm_accel(p, v.speed, v0, gap, v.speed - l.speed)
        }
        None => idm_accel(p, v.speed, v0, FREE_ROAD_GAP, 0.0),
    };
    a.clamp(-p.b_emergency, p.a_max)
}

/// A move into `target` is safe when the slot ahead leaves at least the
/// vehicle's own standstill clearance and the trailing vehicle keeps a
/// positive gap without braking past its comfortable limit.
pub fn lane_change_safe(v: &Vehicle, target: usize, sim: &Sim) -> bool {
    let len = sim.params().vehicle_length;
    let (leader, follower) = sim.prospective_neighbors(target, v.pos, v.id);
    if let Some(l) = leader {
        if l.pos - len - v.pos < sim.params().idm(v.kind).s0 {
            return false;
        }
    }
    if let Some(f) = follower {
        let gap = v.pos - len - f.pos;
        if gap <= 0.0 {
            return false;
        }
        let fp = sim.params().idm(f.kind);
        let fa = idm_accel(fp, f.speed, sim.params().speed_limit(f.kind), gap, f.speed - v.speed)
            .clamp(-fp.b_emergency, fp.a_max);
        if fa < -fp.b_comfort {
            return false;
        }
    }
    true
}

/// Lane decision for one HDV against the current simulation state.
pub fn incentive_action(v: &Vehicle, sim: &Sim) -> Action {
    let lane_count = sim.params().road.lane_count;
    let current = accel_in_lane(v, v.lane, sim);
    let mut best: Option<(f64, Action)> = None;
    for act in [Action::Right, Action::Left] {
        let target = v.lane as i64 + act.lane_offset();
        if target < 0 || target >= lane_count as i64 {
            continue;
        }
        let target = target as usize;
        let gain = accel_in_lane(v, target, sim) - current;
        if gain <= GAIN_THRESHOLD || !lane_change_safe(v, target, sim) {
            continue;
        }
        if best.map_or(true, |(g, _)| gain > g) {
            best = Some((gain, act));
        }
    }
    best.map_or(Action::Keep, |(_, a)| a)
}
