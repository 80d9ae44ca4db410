use serde::{Deserialize, Serialize};

use crate::drivers::{DriverStyle, IdmParams, MobilParams, PredictionConfig};
use crate::sim::{BicycleParams, PidGains};

use super::reward::EgoRewardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Seconds per agent decision.
    pub decision_dt: f64,
    /// Dynamics substeps per decision.
    pub substeps: usize,
    /// Decision steps before timeout.
    pub max_steps: usize,
    /// Target-speed change per SlowDown / SpeedUp (m/s).
    pub speed_delta: f64,
    pub min_hvs: usize,
    pub max_hvs: usize,
    /// HVs spawn with arc length in `[0, spawn_s_max]` along their route.
    pub spawn_s_max: f64,
    pub spawn_spacing: f64,
    pub spawn_attempts: usize,
    pub spawn_min_speed: f64,
    pub include_av: bool,
    pub av_start_s: f64,
    pub av_start_speed: f64,
    /// Distance short of the route end that counts as arrival (m).
    pub arrival_margin: f64,
    pub n_max: usize,
    pub perception_radius: f64,
    pub lookahead: f64,
    /// Lateral offset within which another vehicle counts as on-route (m).
    pub leader_lateral: f64,
    pub reward: EgoRewardConfig,
    pub vehicle: BicycleParams<f64>,
    pub pid: PidGains<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            decision_dt: 0.5,
            substeps: 5,
            max_steps: 120,
            speed_delta: 1.5,
            min_hvs: 3,
            max_hvs: 6,
            spawn_s_max: 45.0,
            spawn_spacing: 10.0,
            spawn_attempts: 100,
            spawn_min_speed: 3.0,
            include_av: true,
            av_start_s: 20.0,
            av_start_speed: 6.0,
            arrival_margin: 1.0,
            n_max: 6,
            perception_radius: 50.0,
            lookahead: 5.0,
            leader_lateral: 1.5,
            reward: EgoRewardConfig::default(),
            vehicle: BicycleParams::default(),
            pid: PidGains::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: &str| Err((k.to_string(), m.to_string()));
        if !(self.decision_dt > 0.0) {
            return err("decision_dt", "must be positive");
        }
        if self.substeps == 0 {
            return err("substeps", "must be at least 1");
        }
        if self.max_steps == 0 {
            return err("max_steps", "must be at least 1");
        }
        if self.min_hvs > self.max_hvs {
            return err("min_hvs", "must not exceed max_hvs");
        }
        if !(self.spawn_spacing >= 0.0 && self.spawn_s_max >= 0.0) {
            return err("spawn_spacing", "spawn values must be non-negative");
        }
        if self.spawn_attempts == 0 {
            return err("spawn_attempts", "must be at least 1");
        }
        if !(self.speed_delta > 0.0) {
            return err("speed_delta", "must be positive");
        }
        if !(self.perception_radius > 0.0 && self.lookahead > 0.0 && self.leader_lateral > 0.0) {
            return err("perception_radius", "radii and lookahead must be positive");
        }
        if self.n_max == 0 {
            return err("n_max", "must be at least 1");
        }
        if let Err(m) = self.vehicle.validate() {
            return err("vehicle", &m);
        }
        let g = self.pid;
        if !(g.kp >= 0.0 && g.ki >= 0.0 && g.kd >= 0.0 && g.integral_limit >= 0.0) {
            return err("pid", "gains must be non-negative");
        }
        Ok(())
    }

    pub fn substep_dt(&self) -> f64 {
        self.decision_dt / self.substeps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriversConfig {
    pub aggressive: IdmParams<f64>,
    pub moderate: IdmParams<f64>,
    pub conservative: IdmParams<f64>,
    pub mobil: MobilParams<f64>,
    pub prediction: PredictionConfig<f64>,
}

impl Default for DriversConfig {
    fn default() -> Self {
        Self {
            aggressive: DriverStyle::Aggressive.idm(),
            moderate: DriverStyle::Moderate.idm(),
            conservative: DriverStyle::Conservative.idm(),
            mobil: MobilParams::default(),
            prediction: PredictionConfig::default(),
        }
    }
}

impl DriversConfig {
    pub fn idm(&self, style: DriverStyle) -> IdmParams<f64> {
        match style {
            DriverStyle::Aggressive => self.aggressive,
            DriverStyle::Moderate => self.moderate,
            DriverStyle::Conservative => self.conservative,
        }
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        for s in DriverStyle::ALL {
            self.idm(s).validate().map_err(|m| (s.name().to_string(), m))?;
        }
        let m = self.mobil;
        if !(0.0..=1.0).contains(&m.politeness) {
            return Err(("mobil.politeness".into(), "must lie in [0, 1]".into()));
        }
        if !(m.accel_gain_threshold > 0.0 && m.safe_braking > 0.0) {
            return Err(("mobil".into(), "thresholds must be positive".into()));
        }
        self.prediction
            .validate()
            .map_err(|m| ("prediction".to_string(), m))
    }
}
