//! Environments seen by the trainer: the intersection with per-HV priors
//! attached, and a one-dimensional reach-target task for sanity runs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socialdrive_nn::ParamStore;

use crate::dpl::DplModel;
use crate::env::observe::Observation;
use crate::env::reward::RewardBreakdown;
use crate::env::{Action, EpisodeResult, IntersectionEnv, Outcome};
use crate::error::{Error, Result};
use crate::policy::PolicyInput;

pub struct EnvStep {
    pub input: PolicyInput,
    pub reward: RewardBreakdown,
    pub done: bool,
    /// Present on the final step of an episode.
    pub summary: Option<EpisodeResult>,
}

pub trait Environment {
    fn reset(&mut self, seed: u64) -> Result<PolicyInput>;
    fn step(&mut self, action: Action) -> Result<EnvStep>;
}

/// A frozen prior encoder.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub model: DplModel,
    pub store: ParamStore<f32>,
}

impl PriorModel {
    pub fn dim(&self) -> usize {
        self.model.cfg.latent_dim
    }

    /// One prior per valid neighbor row of `obs`, from that HV's position history.
    pub fn priors(&self, env: &IntersectionEnv, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let mut items = Vec::new();
        for (i, id) in obs.ids.iter().enumerate() {
            if !obs.mask[i] {
                continue;
            }
            let id = id.ok_or_else(|| Error::Invalid("valid neighbor row without id".into()))?;
            let h = env
                .hv_history(id)
                .ok_or_else(|| Error::Invalid(format!("no history for vehicle {id}")))?;
            items.push((h, h[0]));
        }
        Ok(self
            .model
            .infer_priors(&self.store, &items)?
            .into_iter()
            .map(|z| z.into_iter().map(f64::from).collect())
            .collect())
    }
}

/// The intersection environment with priors attached to each observation.
#[derive(Clone)]
pub struct PriorEnv {
    pub env: IntersectionEnv,
    pub prior: Option<Arc<PriorModel>>,
}

impl PriorEnv {
    pub fn new(env: IntersectionEnv, prior: Option<Arc<PriorModel>>) -> Self {
        Self { env, prior }
    }

    pub fn prior_dim(&self) -> usize {
        self.prior.as_ref().map_or(0, |p| p.dim())
    }

    pub fn input(&self, obs: &Observation) -> Result<PolicyInput> {
        match &self.prior {
            Some(p) => PolicyInput::new(obs, &p.priors(&self.env, obs)?, p.dim()),
            None => PolicyInput::new(obs, &[], 0),
        }
    }
}

impl Environment for PriorEnv {
    fn reset(&mut self, seed: u64) -> Result<PolicyInput> {
        let obs = self
            .env
            .reset(seed)
            .ok_or_else(|| Error::Invalid("environment has no AV".into()))?;
        self.input(&obs)
    }

    fn step(&mut self, action: Action) -> Result<EnvStep> {
        let r = self.env.step(action)?;
        Ok(EnvStep {
            input: self.input(&r.obs)?,
            reward: r.reward,
            done: r.done,
            summary: if r.done { self.env.result() } else { None },
        })
    }
}

/// Move along a line to a hidden-but-observed target. Actions shift the
/// position by −0.1, 0 or +0.1; each step within 0.1 of the target pays 1.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub horizon: usize,
    x: f64,
    target: f64,
    t: usize,
    ret: f64,
}

impl Default for ToyEnv {
    fn default() -> Self {
        Self {
            horizon: 20,
            x: 0.0,
            target: 0.0,
            t: 0,
            ret: 0.0,
        }
    }
}

impl ToyEnv {
    const STEP: f64 = 0.1;
    const TOL: f64 = 0.1 + 1e-9;

    fn input(&self) -> PolicyInput {
        PolicyInput {
            rows: vec![self.x, self.target, self.target - self.x, 0.0],
            valid: vec![true],
            priors: Vec::new(),
            prior_dim: 0,
        }
    }
}

impl Environment for ToyEnv {
    fn reset(&mut self, seed: u64) -> Result<PolicyInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mag: f64 = rng.random_range(0.4..1.0);
        self.target = if rng.random_bool(0.5) { mag } else { -mag };
        self.x = 0.0;
        self.t = 0;
        self.ret = 0.0;
        Ok(self.input())
    }

    fn step(&mut self, action: Action) -> Result<EnvStep> {
        if self.t >= self.horizon {
            return Err(Error::EpisodeDone);
        }
        let dx = match action {
            Action::SlowDown => -Self::STEP,
            Action::Cruise => 0.0,
            Action::SpeedUp => Self::STEP,
        };
        self.x = (self.x + dx).clamp(-1.5, 1.5);
        self.t += 1;
        let on = (self.x - self.target).abs() <= Self::TOL;
        let r = if on { 1.0 } else { 0.0 };
        self.ret += r;
        let done = self.t >= self.horizon;
        let reward = RewardBreakdown {
            r_e: r,
            r_ego: r,
            r_global: r,
            ..RewardBreakdown::default()
        };
        let summary = done.then(|| EpisodeResult {
            outcome: if on { Outcome::Arrived } else { Outcome::Timeout },
            steps: self.t,
            return_ego: self.ret,
            return_coord: 0.0,
            return_global: self.ret,
            avg_speed: 0.0,
            min_pet: None,
        });
        Ok(EnvStep {
            input: self.input(),
            reward,
            done,
            summary,
        })
    }
}
