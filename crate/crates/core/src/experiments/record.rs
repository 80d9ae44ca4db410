//! Recorded evaluation episodes and their replay.
//!
//! A log is JSON lines: a header with the episode description and the reset
//! snapshot, then one line per decision with the post-step snapshot. Replay
//! re-derives observations, rewards and termination from the snapshots alone.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use socialdrive_nn::Scalar;

use crate::drivers::Arm;
use crate::env::log::{DecisionRecord, EpisodeMeta};
use crate::env::{
    observe, step_reward, terminal_outcome, Action, EpisodeResult, Movement, Observation,
    ObserveConfig, Outcome, RewardBreakdown, RewardContext, RouteTable, Snapshot,
};
use crate::error::{Error, Result};
use crate::policy::{act, ActMode, PolicyNet};
use crate::ppo::{Environment, PriorEnv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLine {
    Header { meta: EpisodeMeta, initial: Snapshot },
    Decision { record: DecisionRecord, snapshot: Snapshot },
}

/// Runs one greedy episode and writes its log to `w`.
pub fn record_episode<T: Scalar, W: Write>(
    net: &PolicyNet,
    store: &socialdrive_nn::ParamStore<T>,
    env: &mut PriorEnv,
    seed: u64,
    w: &mut W,
) -> Result<EpisodeResult> {
    let mut input = env.reset(seed)?;
    let initial = env.env.snapshot();
    let mut lines = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let out = net.forward(store, &input)?;
        let (action, _) = act(&out, ActMode::Greedy, &mut rng);
        let step = env.step(action)?;
        let snapshot = env.env.snapshot();
        lines.push(LogLine::Decision {
            record: DecisionRecord {
                step: env.env.steps(),
                t: snapshot.t,
                action,
                reward: step.reward,
                outcome: step.summary.as_ref().map(|s| s.outcome),
            },
            snapshot,
        });
        if step.done {
            let header = LogLine::Header {
                meta: EpisodeMeta {
                    seed,
                    layout: env.env.layout,
                    env: env.env.env,
                    social: env.env.social,
                    vehicles: env.env.vehicle_info().to_vec(),
                },
                initial,
            };
            for l in std::iter::once(&header).chain(&lines) {
                serde_json::to_writer(&mut *w, l)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            return step
                .summary
                .ok_or_else(|| Error::Invalid("episode ended without a summary".into()));
        }
        input = step.input;
    }
}

/// One audited decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayLine {
    pub step: usize,
    pub t: f64,
    /// What the agent saw before acting.
    pub observation: Observation,
    pub action: Action,
    /// Re-derived from the post-step snapshot.
    pub reward: RewardBreakdown,
    pub logged_reward: RewardBreakdown,
    pub outcome: Option<Outcome>,
    pub av_speed: f64,
}

fn parse_err(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Replays a log. An empty log gives no lines; replay stops at the first
/// decision whose snapshot ends the episode. `path` only labels errors.
pub fn replay<R: BufRead>(r: R, path: &str) -> Result<Vec<ReplayLine>> {
    let mut header: Option<(EpisodeMeta, RouteTable, std::collections::BTreeMap<u32, f64>)> = None;
    let mut prev_obs: Option<Observation> = None;
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let n = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        match parsed {
            LogLine::Header { meta, initial } => {
                if header.is_some() {
                    return Err(parse_err(path, n, "second header"));
                }
                if initial.av().is_none() {
                    return Err(parse_err(path, n, "initial snapshot has no AV"));
                }
                let routes = RouteTable::new(&meta.layout);
                let v0 = meta.vehicles.iter().filter(|v| !v.is_av).map(|v| (v.id, v.v0)).collect();
                let ocfg = observe_config(&meta);
                prev_obs = Some(observe(&initial, &ocfg));
                header = Some((meta, routes, v0));
            }
            LogLine::Decision { record, snapshot } => {
                let Some((meta, routes, v0)) = &header else {
                    return Err(parse_err(path, n, "decision before header"));
                };
                let av = snapshot.av().ok_or_else(|| parse_err(path, n, "snapshot has no AV"))?;
                if let Some(v) = snapshot.vehicles.iter().find(|v| !v.is_av && !v0.contains_key(&v.id)) {
                    return Err(parse_err(path, n, format!("vehicle {} missing from header", v.id)));
                }
                let ctx = RewardContext {
                    av_route: routes.get(Arm::South, Movement::Left),
                    v0,
                    layout: &meta.layout,
                    env: &meta.env,
                    social: &meta.social,
                };
                let reward = step_reward(&snapshot, &ctx);
                let mut outcome = terminal_outcome(&snapshot, &ctx);
                if outcome.is_none() && record.step >= meta.env.max_steps {
                    outcome = Some(Outcome::Timeout);
                }
                let av_speed = av.speed;
                let observation = prev_obs.replace(observe(&snapshot, &observe_config(meta)));
                out.push(ReplayLine {
                    step: record.step,
                    t: record.t,
                    observation: observation.expect("set with header"),
                    action: record.action,
                    reward,
                    logged_reward: record.reward,
                    outcome,
                    av_speed,
                });
                if outcome.is_some() {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn observe_config(meta: &EpisodeMeta) -> ObserveConfig {
    ObserveConfig {
        n_max: meta.env.n_max,
        radius: meta.env.perception_radius,
        arm_length: meta.layout.arm_length,
        v_max: meta.layout.v_max,
    }
}
