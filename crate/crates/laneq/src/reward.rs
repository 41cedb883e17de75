//! Shared cooperative reward over the post-step traffic state.
//!
//! The scalar combines four terms: a per-vehicle intention schedule that
//! pays ramp-bound CAVs for sitting on the correct lane early, a fleet
//! speed term, a large per-collision penalty, and a small per-lane-change
//! penalty. Every agent receives the same value.

use serde::{Deserialize, Serialize};

use crate::sim::{Intention, Kind, RoadSpec, Sim, StepEvents, Vehicle, VehicleId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// Reward units charged per colliding pair.
    pub p_c_value: f64,
    /// Reward units charged per executed CAV lane change.
    pub p_lc_value: f64,
    /// Charge the seg-1 yield penalty for ramp-2 CAVs on the top lane
    /// instead of the bottom one.
    pub p21_top_lane: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            p_c_value: 50.0,
            p_lc_value: 0.5,
            p21_top_lane: false,
        }
    }
}

/// Longitudinal stretch of the corridor. Boundaries belong to the earlier
/// segment, so the within-segment offset reaches its full length exactly
/// at each ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Seg1,
    Seg2,
    Seg3,
}

/// Segment of a position together with the offset from the segment start.
pub fn segment_of(pos: f64, road: &RoadSpec) -> (Segment, f64) {
    if pos <= road.ramp1 {
        (Segment::Seg1, pos)
    } else if pos <= road.ramp2 {
        (Segment::Seg2, pos - road.ramp1)
    } else {
        (Segment::Seg3, pos - road.ramp2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermCategory {
    R11,
    P11,
    P21,
    P22,
    R22,
}

/// Intention schedule entry for one vehicle. `value` is the magnitude in
/// [0, 1]; `signed_value` carries the reward sign, negative for the P
/// categories. Vehicles outside the schedule get `category: None` and zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntentionTerm {
    pub id: VehicleId,
    pub category: Option<TermCategory>,
    pub value: f64,
    pub signed_value: f64,
}

impl IntentionTerm {
    fn none(id: VehicleId) -> Self {
        Self {
            id,
            category: None,
            value: 0.0,
            signed_value: 0.0,
        }
    }

    fn reward(id: VehicleId, category: TermCategory, value: f64) -> Self {
        Self {
            id,
            category: Some(category),
            value,
            signed_value: value,
        }
    }

    fn penalty(id: VehicleId, category: TermCategory, value: f64) -> Self {
        Self {
            id,
            category: Some(category),
            value,
            signed_value: -value,
        }
    }
}

pub fn intention_term(v: &Vehicle, road: &RoadSpec, p21_top_lane: bool) -> IntentionTerm {
    let intent = match v.kind {
        Kind::Cav(i) => i,
        Kind::Hdv => return IntentionTerm::none(v.id),
    };
    let (seg, x) = segment_of(v.pos, road);
    match (intent, seg) {
        (Intention::Ramp1, Segment::Seg1) => {
            let frac = x / road.seg1_len();
            if v.lane == 0 {
                IntentionTerm::reward(v.id, TermCategory::R11, 1.0 - frac)
            } else {
                IntentionTerm::penalty(v.id, TermCategory::P11, frac)
            }
        }
        (Intention::Ramp2, Segment::Seg1) => {
            let yield_lane = if p21_top_lane { road.lane_count - 1 } else { 0 };
            if v.lane == yield_lane {
                IntentionTerm::penalty(v.id, TermCategory::P21, x / road.seg1_len())
            } else {
                IntentionTerm::none(v.id)
            }
        }
        (Intention::Ramp2, Segment::Seg2) => {
            let frac = x / road.seg2_len();
            if v.lane == 0 {
                IntentionTerm::reward(v.id, TermCategory::R22, 1.0 - frac)
            } else {
                IntentionTerm::penalty(v.id, TermCategory::P22, frac)
            }
        }
        _ => IntentionTerm::none(v.id),
    }
}

/// Sum of signed intention terms over the given vehicles.
pub fn intention_reward<'a>(
    vehicles: impl IntoIterator<Item = &'a Vehicle>,
    road: &RoadSpec,
    p21_top_lane: bool,
) -> f64 {
    vehicles
        .into_iter()
        .map(|v| intention_term(v, road, p21_top_lane).signed_value)
        .sum()
}

/// Mean CAV speed as a fraction of `v_max`; zero when no CAV is alive.
pub fn speed_reward<'a>(vehicles: impl IntoIterator<Item = &'a Vehicle>, v_max: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in vehicles {
        if v.kind.is_cav() {
            sum += v.speed / v_max;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Unweighted reward terms of one step plus their weighted combination.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_intention: f64,
    pub r_speed: f64,
    pub p_collision: f64,
    pub p_lane_change: f64,
    pub total: f64,
}

/// Reward of the step that produced `events`, evaluated on the post-step
/// state (vehicles that merged out this step are already gone, yet their
/// lane changes and collisions still count).
pub fn total_reward(sim: &Sim, events: &StepEvents, w: &RewardWeights) -> RewardBreakdown {
    let vehicles = sim.vehicles().values();
    let r_intention = intention_reward(vehicles.clone(), &sim.params().road, w.p21_top_lane);
    let r_speed = speed_reward(vehicles, sim.params().speed_limit_cav);
    let p_collision = w.p_c_value * events.collisions.len() as f64;
    let cav_changes = events
        .lane_changes
        .iter()
        .filter(|c| c.kind.is_cav())
        .count();
    let p_lane_change = w.p_lc_value * cav_changes as f64;
    RewardBreakdown {
        r_intention,
        r_speed,
        p_collision,
        p_lane_change,
        total: w.w1 * r_intention + w.w2 * r_speed - w.w3 * p_collision - w.w4 * p_lane_change,
    }
}
