//! Ego, coordination and mixed rewards.

use serde::{Deserialize, Serialize};

use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SocialConfig {
    /// Coordination tendency φ in `[0, π/2]`.
    pub phi: f64,
    pub alpha: f64,
    /// Distance decay λ (1/m).
    pub lambda: f64,
    pub w_c: f64,
    pub w_e: f64,
    pub w_a: f64,
    /// HV safety term fires when TTC to the AV drops below this (s).
    pub ttc_threshold: f64,
    /// Center distance counted as contact for TTC (m).
    pub ttc_radius: f64,
}

impl Default for SocialConfig {
    fn default() -> Self {
        Self {
            phi: 0.0,
            alpha: 0.5,
            lambda: 0.05,
            w_c: 1.0,
            w_e: 1.0,
            w_a: 1.0,
            ttc_threshold: 1.5,
            ttc_radius: 3.0,
        }
    }
}

impl SocialConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.phi) {
            return Err(format!("phi {} outside [0, pi/2]", self.phi));
        }
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return Err("alpha and lambda must be non-negative".into());
        }
        let w = [self.w_c, self.w_e, self.w_a, self.ttc_threshold, self.ttc_radius];
        if !w.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err("weights and TTC settings must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoRewardConfig {
    pub collision: f64,
    /// `r_e = efficiency · speed / v_max`.
    pub efficiency: f64,
    pub arrival: f64,
}

impl Default for EgoRewardConfig {
    fn default() -> Self {
        Self {
            collision: -10.0,
            efficiency: 0.1,
            arrival: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_c: f64,
    pub r_e: f64,
    pub r_a: f64,
    pub r_ego: f64,
    pub r_coord: f64,
    pub r_global: f64,
}

impl RewardBreakdown {
    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        [
            self.r_c - o.r_c,
            self.r_e - o.r_e,
            self.r_a - o.r_a,
            self.r_ego - o.r_ego,
            self.r_coord - o.r_coord,
            self.r_global - o.r_global,
        ]
        .iter()
        .fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// `(r_c, r_e, r_a, R_E)` for one decision step.
pub fn ego_reward(
    collided: bool,
    arrived: bool,
    speed: f64,
    v_max: f64,
    cfg: &EgoRewardConfig,
    social: &SocialConfig,
) -> (f64, f64, f64, f64) {
    let r_c = if collided { cfg.collision } else { 0.0 };
    let r_e = cfg.efficiency * speed / v_max;
    let r_a = if arrived { cfg.arrival } else { 0.0 };
    (r_c, r_e, r_a, social.w_c * r_c + social.w_e * r_e + social.w_a * r_a)
}

pub fn global_reward(r_ego: f64, r_coord: f64, phi: f64) -> f64 {
    phi.cos() * r_ego + phi.sin() * r_coord
}

/// Earliest `t ≥ 0` at which two constant-velocity points come within
/// `radius`. Only approaching pairs have a TTC; a pair that is not closing
/// in (including one already within `radius`) yields `None`.
pub fn time_to_collision(
    pa: Point<f64>,
    va: Point<f64>,
    pb: Point<f64>,
    vb: Point<f64>,
    radius: f64,
) -> Option<f64> {
    let p = [pb[0] - pa[0], pb[1] - pa[1]];
    let w = [vb[0] - va[0], vb[1] - va[1]];
    let a = w[0] * w[0] + w[1] * w[1];
    let b = 2.0 * (p[0] * w[0] + p[1] * w[1]);
    if a == 0.0 || b >= 0.0 {
        return None;
    }
    let c = p[0] * p[0] + p[1] * p[1] - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    Some((-b - disc.sqrt()) / (2.0 * a))
}

/// Kinematic view of one vehicle for reward purposes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kin {
    pub pos: Point<f64>,
    pub vel: Point<f64>,
    pub speed: f64,
}

/// Ω over HVs within `radius` of the AV: `α Σ e^{−λ d_j} (w_c r_c^j + w_e v_j / v0_j)`.
pub fn coordination_reward(av: &Kin, hvs: &[(Kin, f64)], radius: f64, cfg: &SocialConfig) -> f64 {
    let mut sum = 0.0;
    for (hv, v0) in hvs {
        let d = (hv.pos[0] - av.pos[0]).hypot(hv.pos[1] - av.pos[1]);
        if d > radius {
            continue;
        }
        let risky = time_to_collision(av.pos, av.vel, hv.pos, hv.vel, cfg.ttc_radius)
            .is_some_and(|t| t < cfg.ttc_threshold);
        let r_c = if risky { -1.0 } else { 0.0 };
        sum += (-cfg.lambda * d).exp() * (cfg.w_c * r_c + cfg.w_e * hv.speed / v0);
    }
    cfg.alpha * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn ego_examples() {
        let (e, s) = (EgoRewardConfig::default(), SocialConfig::default());
        assert_eq!(ego_reward(false, false, 9.0, 9.0, &e, &s).3, 0.1);
        assert_eq!(ego_reward(true, false, 0.0, 9.0, &e, &s).3, -10.0);
        assert_eq!(ego_reward(false, true, 4.5, 9.0, &e, &s).3, 10.05);
    }

    #[test]
    fn global_examples() {
        assert_eq!(global_reward(2.0, 1.0, 0.0), 2.0);
        assert!((global_reward(2.0, 1.0, FRAC_PI_2) - 1.0).abs() < 1e-15);
        assert!((global_reward(2.0, 1.0, FRAC_PI_4) - 3.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ttc_cases() {
        // head-on closing at 10 m/s from 23 m apart with 3 m radius → 2 s
        let t = time_to_collision([0.0, 0.0], [5.0, 0.0], [23.0, 0.0], [-5.0, 0.0], 3.0);
        assert!((t.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(time_to_collision([0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [2.0, 0.0], 3.0), None);
        assert_eq!(time_to_collision([0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 0.0], 3.0), None);
        assert_eq!(time_to_collision([0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], 3.0), Some(0.0));
        assert!(time_to_collision([0.0, 0.0], [1.0, 0.0], [10.0, 5.0], [-1.0, -0.5], 3.0).is_some());
    }

    #[test]
    fn coordination_examples() {
        let cfg = SocialConfig::default();
        let av = Kin {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            speed: 0.0,
        };
        assert_eq!(coordination_reward(&av, &[], 50.0, &cfg), 0.0);
        let hv = Kin {
            pos: [0.0, 0.0],
            vel: [6.0, 0.0],
            speed: 6.0,
        };
        assert_eq!(coordination_reward(&av, &[(hv, 6.0)], 50.0, &cfg), 0.5);
        let closing = Kin {
            pos: [5.0, 0.0],
            vel: [-6.0, 0.0],
            speed: 6.0,
        };
        let expect = 0.5 * (-0.05f64 * 5.0).exp() * (-1.0 + 1.0);
        assert_eq!(coordination_reward(&av, &[(closing, 6.0)], 50.0, &cfg), expect);
        let far = Kin { pos: [60.0, 0.0], ..hv };
        assert_eq!(coordination_reward(&av, &[(far, 6.0)], 50.0, &cfg), 0.0);
    }
}
