//! PPO-Clip with generalized advantage estimation.

mod envs;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use socialdrive_nn::{checkpoint, Adam, AdamConfig, ParamStore, Scalar, Tape, Tensor, Var};

use crate::env::reward::RewardBreakdown;
use crate::env::{Action, EpisodeResult, Outcome};
use crate::error::{Error, Result};
use crate::policy::{act, ActMode, PolicyInput, PolicyNet, ACTIONS};

pub use envs::{EnvStep, Environment, PriorEnv, PriorModel, ToyEnv};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Environment steps before training stops.
    pub total_steps: usize,
    /// Consecutive steps each rollout lane contributes per update.
    pub forward_steps: usize,
    pub clip: f64,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Transitions collected per update.
    pub buffer_cap: usize,
    pub minibatch: usize,
    pub update_epochs: usize,
    pub seed: u64,
    /// Listed in the reference hyperparameter table; PPO-Clip has no target network, so it is unused.
    pub tau: f64,
    /// Updates between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_steps: 30_000,
            forward_steps: 30,
            clip: 0.2,
            lr: 1e-4,
            gamma: 0.95,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            buffer_cap: 960,
            minibatch: 64,
            update_epochs: 4,
            seed: 0,
            tau: 0.01,
            checkpoint_every: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |f: &str, m: &str| Err((f.to_string(), m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return err("clip", "must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return err("gae_lambda", "must lie in [0, 1]");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr", "must be finite and non-negative");
        }
        for (f, v) in [("value_coef", self.value_coef), ("entropy_coef", self.entropy_coef), ("tau", self.tau)] {
            if !v.is_finite() {
                return err(f, "must be finite");
            }
        }
        for (f, v) in [
            ("forward_steps", self.forward_steps),
            ("buffer_cap", self.buffer_cap),
            ("minibatch", self.minibatch),
            ("update_epochs", self.update_epochs),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return err(f, "must be at least 1");
            }
        }
        if self.minibatch > self.buffer_cap {
            return err("minibatch", "must not exceed buffer_cap");
        }
        Ok(())
    }

    /// Independent environment lanes feeding one buffer.
    pub fn lanes(&self) -> usize {
        self.buffer_cap.div_ceil(self.forward_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub input: PolicyInput,
    pub action: Action,
    pub logprob: f64,
    pub value: f64,
    pub reward: RewardBreakdown,
    pub done: bool,
}

/// Consecutive transitions from one lane.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub steps: Vec<Transition>,
    /// Critic value of the state after the last step; 0 when that step ended an episode.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
    /// Episodes that ended during collection.
    pub episodes: Vec<EpisodeResult>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flat_map(|s| &s.steps)
    }
}

/// GAE over one segment. Returns `(advantages, returns)` with returns = advantages + values.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit variance (population statistics).
pub fn normalize(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

struct Lane<E> {
    env: E,
    input: PolicyInput,
    seeds: ChaCha8Rng,
    episode_seed: u64,
}

const ACTION_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const LANE_STREAM0: u64 = 2;

/// Steps a fixed set of environment lanes in lockstep. Lane `k` draws its
/// episode seeds from its own stream of the run seed.
pub struct Collector<E> {
    lanes: Vec<Lane<E>>,
    rng: ChaCha8Rng,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<E: Environment> Collector<E> {
    pub fn new(lanes: usize, seed: u64, mut make_env: impl FnMut(usize) -> E) -> Result<Self> {
        use rand::RngCore;
        let lanes = (0..lanes)
            .map(|k| {
                let mut env = make_env(k);
                let mut seeds = seeded(seed, LANE_STREAM0 + k as u64);
                let episode_seed = seeds.next_u64();
                let input = env.reset(episode_seed)?;
                Ok(Lane {
                    env,
                    input,
                    seeds,
                    episode_seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lanes,
            rng: seeded(seed, ACTION_STREAM),
        })
    }

    /// Collects `total` transitions: lane `k` contributes
    /// `min(per_lane, total − k·per_lane)` steps.
    pub fn collect<T: Scalar>(
        &mut self,
        net: &PolicyNet,
        store: &ParamStore<T>,
        total: usize,
        per_lane: usize,
    ) -> Result<RolloutBuffer> {
        use rand::RngCore;
        let quota: Vec<usize> = (0..self.lanes.len())
            .map(|k| per_lane.min(total.saturating_sub(k * per_lane)))
            .collect();
        let mut buf = RolloutBuffer {
            segments: quota.iter().map(|&q| Segment { steps: Vec::with_capacity(q), bootstrap: 0.0 }).collect(),
            episodes: Vec::new(),
        };
        let longest = quota.iter().copied().max().unwrap_or(0);
        for t in 0..longest {
            let active: Vec<usize> = (0..self.lanes.len()).filter(|&k| quota[k] > t).collect();
            let inputs: Vec<&PolicyInput> = active.iter().map(|&k| &self.lanes[k].input).collect();
            let outs = net.forward_batch(store, &inputs)?;
            for (&k, out) in active.iter().zip(outs) {
                let (action, logprob) = act(&out, ActMode::Sample, &mut self.rng);
                let lane = &mut self.lanes[k];
                let step = lane.env.step(action).map_err(|e| {
                    Error::Invalid(format!("lane {k}, episode seed {}: {e}", lane.episode_seed))
                })?;
                let prev = std::mem::replace(&mut lane.input, step.input);
                buf.segments[k].steps.push(Transition {
                    input: prev,
                    action,
                    logprob,
                    value: out.value,
                    reward: step.reward,
                    done: step.done,
                });
                if step.done {
                    if let Some(s) = step.summary {
                        buf.episodes.push(s);
                    }
                    lane.episode_seed = lane.seeds.next_u64();
                    lane.input = lane.env.reset(lane.episode_seed)?;
                }
            }
        }
        // bootstrap from the critic where a segment stops mid-episode
        let open: Vec<usize> = (0..self.lanes.len())
            .filter(|&k| buf.segments[k].steps.last().is_some_and(|s| !s.done))
            .collect();
        let inputs: Vec<&PolicyInput> = open.iter().map(|&k| &self.lanes[k].input).collect();
        for (&k, out) in open.iter().zip(net.forward_batch(store, &inputs)?) {
            buf.segments[k].bootstrap = out.value;
        }
        buf.segments.retain(|s| !s.steps.is_empty());
        Ok(buf)
    }
}

/// Tape handles of the PPO objective on one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Negated clipped surrogate.
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// `B × 1` probability ratios.
    pub ratio: Var,
}

/// One minibatch's data for [`ppo_loss`].
pub struct Batch<'a> {
    pub inputs: Vec<&'a PolicyInput>,
    pub actions: Vec<usize>,
    pub old_logprob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// `−mean(min(r·Â, clip(r, 1−ε, 1+ε)·Â)) + c_v·mean((V − R)²) − c_e·mean(H)`.
pub fn ppo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &PolicyNet,
    store: &ParamStore<T>,
    batch: &Batch,
    cfg: &PpoConfig,
) -> Result<LossParts> {
    let b = batch.inputs.len();
    let col = |v: &[f64]| Tensor::matrix(v.len(), 1, v.iter().map(|&x| T::lit(x)).collect());
    let out = net.forward_vars(tape, store, &batch.inputs)?;
    let lp_all = tape.log_softmax(out.logits);
    let lp = tape.pick_cols(lp_all, &batch.actions)?;
    let old = tape.input(col(&batch.old_logprob));
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff);
    let s1 = tape.mul_const(ratio, col(&batch.advantages))?;
    let clipped = tape.clamp(ratio, T::lit(1.0 - cfg.clip), T::lit(1.0 + cfg.clip));
    let s2 = tape.mul_const(clipped, col(&batch.advantages))?;
    let surr = tape.minimum(s1, s2)?;
    let surr = tape.mean(surr);
    let policy = tape.neg(surr);

    let target = tape.input(col(&batch.returns));
    let value = tape.mse(out.value, target)?;

    let probs = tape.exp(lp_all);
    let plogp = tape.mul(probs, lp_all)?;
    let plogp = tape.row_sum(plogp);
    let neg_h = tape.mean(plogp);
    let entropy = tape.neg(neg_h);

    let v = tape.scale(value, T::lit(cfg.value_coef));
    let h = tape.scale(entropy, T::lit(cfg.entropy_coef));
    let total = tape.add(policy, v)?;
    let total = tape.sub(total, h)?;
    debug_assert_eq!(tape.value(lp).rows(), b);
    Ok(LossParts {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

/// Advantages (normalized over the whole buffer) and returns, in transition order.
pub fn buffer_targets(buf: &RolloutBuffer, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let (mut adv, mut ret) = (Vec::with_capacity(buf.len()), Vec::with_capacity(buf.len()));
    for s in &buf.segments {
        let r: Vec<f64> = s.steps.iter().map(|t| t.reward.r_global).collect();
        let v: Vec<f64> = s.steps.iter().map(|t| t.value).collect();
        let d: Vec<bool> = s.steps.iter().map(|t| t.done).collect();
        let (a, g) = compute_advantages(&r, &v, &d, s.bootstrap, cfg.gamma, cfg.gae_lambda);
        adv.extend(a);
        ret.extend(g);
    }
    normalize(&mut adv);
    (adv, ret)
}

/// `update_epochs` passes over shuffled minibatches with one Adam step each.
pub fn ppo_update(
    net: &PolicyNet,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let steps: Vec<&Transition> = buf.transitions().collect();
    if steps.is_empty() {
        return Ok(UpdateStats::default());
    }
    let (adv, ret) = buffer_targets(buf, cfg);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut acc = UpdateStats::default();
    let mut batches = 0usize;
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch = Batch {
                inputs: chunk.iter().map(|&i| &steps[i].input).collect(),
                actions: chunk.iter().map(|&i| steps[i].action.index()).collect(),
                old_logprob: chunk.iter().map(|&i| steps[i].logprob).collect(),
                advantages: chunk.iter().map(|&i| adv[i]).collect(),
                returns: chunk.iter().map(|&i| ret[i]).collect(),
            };
            let mut tape = Tape::new();
            let l = ppo_loss(&mut tape, net, store, &batch, cfg)?;
            let total = tape.value(l.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss(batches));
            }
            acc.policy_loss += tape.value(l.policy).item() as f64;
            acc.value_loss += tape.value(l.value).item() as f64;
            acc.entropy += tape.value(l.entropy).item() as f64;
            let r = tape.value(l.ratio).data();
            acc.clip_frac +=
                r.iter().filter(|&&x| (x as f64 - 1.0).abs() > cfg.clip).count() as f64 / r.len() as f64;
            tape.backward(l.total).accumulate_into(&tape, store);
            adam.step(store);
            batches += 1;
        }
    }
    let n = batches as f64;
    Ok(UpdateStats {
        policy_loss: acc.policy_loss / n,
        value_loss: acc.value_loss / n,
        entropy: acc.entropy / n,
        clip_frac: acc.clip_frac / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub update: usize,
    pub env_steps: usize,
    #[serde(rename = "mean_return_E")]
    pub mean_return_e: f64,
    #[serde(rename = "mean_return_C")]
    pub mean_return_c: f64,
    pub mean_return_global: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub collision_rate: f64,
    pub success_rate: f64,
    pub phi: f64,
    pub seed: u64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Where training writes its metrics CSV and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

impl TrainOutput {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            checkpoints: dir.join("checkpoints"),
        }
    }
}

/// Alternates collection and updates until `total_steps` environment steps.
/// With an output, writes one CSV row per update, a checkpoint every
/// `checkpoint_every` updates and `policy.ckpt` at the end.
pub fn train<E: Environment>(
    net: &PolicyNet,
    store: &mut ParamStore<f32>,
    make_env: impl FnMut(usize) -> E,
    cfg: &PpoConfig,
    phi: f64,
    out: Option<&TrainOutput>,
    mut on_update: impl FnMut(&TrainStats),
) -> Result<Vec<TrainStats>> {
    cfg.validate()
        .map_err(|(path, msg)| Error::Config { path: format!("ppo.{path}"), msg })?;
    let mut collector = Collector::new(cfg.lanes(), cfg.seed, make_env)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), store);
    let mut shuffle = seeded(cfg.seed, SHUFFLE_STREAM);
    let mut writer = match out {
        Some(o) => {
            fs::create_dir_all(&o.checkpoints)?;
            Some(csv::Writer::from_path(&o.metrics)?)
        }
        None => None,
    };
    let mut all = Vec::new();
    let mut env_steps = 0;
    let mut update = 0;
    while env_steps < cfg.total_steps {
        let want = cfg.buffer_cap.min(cfg.total_steps - env_steps);
        let buf = collector.collect(net, store, want, cfg.forward_steps)?;
        env_steps += buf.len();
        let u = ppo_update(net, store, &mut adam, &buf, cfg, &mut shuffle)?;
        update += 1;
        let eps = &buf.episodes;
        let rate = |o: Outcome| mean(eps.iter().map(|e| f64::from(u8::from(e.outcome == o))));
        let stats = TrainStats {
            update,
            env_steps,
            mean_return_e: mean(eps.iter().map(|e| e.return_ego)),
            mean_return_c: mean(eps.iter().map(|e| e.return_coord)),
            mean_return_global: mean(eps.iter().map(|e| e.return_global)),
            policy_loss: u.policy_loss,
            value_loss: u.value_loss,
            entropy: u.entropy,
            clip_frac: u.clip_frac,
            collision_rate: rate(Outcome::Collided),
            success_rate: rate(Outcome::Arrived),
            phi,
            seed: cfg.seed,
        };
        if let (Some(w), Some(o)) = (writer.as_mut(), out) {
            w.serialize(stats)?;
            w.flush()?;
            if update % cfg.checkpoint_every == 0 {
                checkpoint::save(store, o.checkpoints.join(format!("policy_{update:05}.ckpt")))?;
            }
        }
        on_update(&stats);
        all.push(stats);
    }
    if let Some(o) = out {
        checkpoint::save(store, o.checkpoints.join("policy.ckpt"))?;
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    /// True when no episode was run; every mean is then NaN.
    pub empty: bool,
    #[serde(rename = "mean_return_E")]
    pub mean_return_e: f64,
    #[serde(rename = "mean_return_C")]
    pub mean_return_c: f64,
    pub mean_return_global: f64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    pub mean_speed: f64,
    /// Mean minimum PET over the episodes where one was defined.
    pub mean_min_pet: Option<f64>,
    pub pet_episodes: usize,
}

impl EvalReport {
    pub fn from_results(results: &[EpisodeResult]) -> Self {
        let rate = |o: Outcome| mean(results.iter().map(|e| f64::from(u8::from(e.outcome == o))));
        let pets: Vec<f64> = results.iter().filter_map(|e| e.min_pet).collect();
        Self {
            episodes: results.len(),
            empty: results.is_empty(),
            mean_return_e: mean(results.iter().map(|e| e.return_ego)),
            mean_return_c: mean(results.iter().map(|e| e.return_coord)),
            mean_return_global: mean(results.iter().map(|e| e.return_global)),
            success_rate: rate(Outcome::Arrived),
            collision_rate: rate(Outcome::Collided),
            timeout_rate: rate(Outcome::Timeout),
            mean_speed: mean(results.iter().map(|e| e.avg_speed)),
            mean_min_pet: (!pets.is_empty()).then(|| mean(pets.iter().copied())),
            pet_episodes: pets.len(),
        }
    }
}

/// Runs one greedy episode; `on_step` sees every action and its step.
pub fn run_episode<E: Environment, T: Scalar>(
    net: &PolicyNet,
    store: &ParamStore<T>,
    env: &mut E,
    seed: u64,
    mut on_step: impl FnMut(Action, &EnvStep),
) -> Result<EpisodeResult> {
    let mut input = env.reset(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let out = net.forward(store, &input)?;
        let (a, _) = act(&out, ActMode::Greedy, &mut rng);
        let step = env.step(a)?;
        on_step(a, &step);
        if step.done {
            return step
                .summary
                .ok_or_else(|| Error::Invalid("episode ended without a summary".into()));
        }
        input = step.input;
    }
}

/// Greedy evaluation over `episodes` episodes seeded `seed, seed + 1, …`.
pub fn evaluate<E: Environment, T: Scalar>(
    net: &PolicyNet,
    store: &ParamStore<T>,
    env: &mut E,
    episodes: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    let results = (0..episodes)
        .map(|i| run_episode(net, store, env, seed.wrapping_add(i as u64), |_, _| {}))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_results(&results), results))
}

const _: () = assert!(ACTIONS == 3);
