//! Longitudinal car following.
//!
//! Every vehicle, human-driven or automated, follows the same two-term law:
//! free-road relaxation toward a desired speed plus an interaction term
//! built from the desired minimum gap. The function here is the raw law;
//! clamping to the emergency braking limit is the engine's job.

use serde::{Deserialize, Serialize};

/// Gap substituted when a vehicle has no leader in its lane. Large enough
/// that the interaction term is negligible at any reachable speed.
pub const FREE_ROAD_GAP: f64 = 1.0e4;

/// Car-following constants for one vehicle class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration, m/s^2.
    pub a_max: f64,
    /// Comfortable braking magnitude, m/s^2, positive.
    pub b_comfort: f64,
    /// Standstill jam gap, m.
    pub s0: f64,
    /// Desired time headway, s.
    pub t_headway: f64,
    /// Free-road exponent.
    pub delta: f64,
    /// Emergency braking magnitude, m/s^2, positive. The engine never
    /// applies a deceleration stronger than this.
    pub b_emergency: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 1.0,
            b_comfort: 1.5,
            s0: 2.0,
            t_headway: 1.5,
            delta: 4.0,
            b_emergency: 6.0,
        }
    }
}

/// Acceleration for current speed `v`, desired speed `v0`, bumper-to-bumper
/// gap `gap` (must be positive) and approach rate `dv = v - v_leader`.
///
/// `a = a_max (1 - (v/v0)^delta - (s*/gap)^2)` with the desired gap
/// `s* = s0 + v T + v dv / (2 sqrt(a_max b_comfort))`.
pub fn idm_accel(p: &IdmParams, v: f64, v0: f64, gap: f64, dv: f64) -> f64 {
    let s_star = p.s0 + v * p.t_headway + v * dv / (2.0 * (p.a_max * p.b_comfort).sqrt());
    p.a_max * (1.0 - (v / v0).powf(p.delta) - (s_star / gap).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cruising_at_desired_speed_on_free_road_is_nearly_zero() {
        let p = IdmParams::default();
        let a = idm_accel(&p, 14.0, 14.0, FREE_ROAD_GAP, 0.0);
        // Only the residual interaction term with the sentinel gap remains.
        let s_star = 2.0 + 14.0 * 1.5;
        let residual = -p.a_max * (s_star / FREE_ROAD_GAP).powi(2);
        assert!((a - residual).abs() < 1e-12);
        assert!(a.abs() < 1e-5);
    }

    #[test]
    fn standing_start_on_free_road_accelerates_at_full_rate() {
        let p = IdmParams::default();
        let a = idm_accel(&p, 0.0, 14.0, FREE_ROAD_GAP, 0.0);
        assert!((a - 1.0).abs() < 1e-6);
    }

    #[test]
    fn steady_following_value_is_frozen() {
        // v = 10 below the limit 14, 30 m gap, zero approach rate.
        let p = IdmParams::default();
        let a = idm_accel(&p, 10.0, 14.0, 30.0, 0.0);
        let s_star: f64 = 2.0 + 10.0 * 1.5;
        let expected = 1.0 - (10.0f64 / 14.0).powf(4.0) - (s_star / 30.0).powi(2);
        assert!((a - expected).abs() < 1e-15);
        assert!((a - 0.4186).abs() < 1e-3);
    }

    #[test]
    fn closing_on_the_leader_brakes_harder_than_steady_following() {
        let p = IdmParams::default();
        let steady = idm_accel(&p, 10.0, 14.0, 30.0, 0.0);
        let closing = idm_accel(&p, 10.0, 14.0, 30.0, 4.0);
        assert!(closing < steady);
    }

    #[test]
    fn tighter_gap_brakes_harder() {
        let p = IdmParams::default();
        let wide = idm_accel(&p, 10.0, 14.0, 40.0, 0.0);
        let tight = idm_accel(&p, 10.0, 14.0, 12.0, 0.0);
        assert!(tight < wide);
    }
}
