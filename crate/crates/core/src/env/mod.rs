//! The unsignalized intersection: spawning, stepping, observation and reward.

pub mod collision;
pub mod config;
pub mod layout;
pub mod log;
pub mod observe;
pub mod pet;
pub mod reward;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drivers::{
    idm_accel, predict_from_progress, yield_decision, Arm, DriverStyle, IdmParams, YieldAgent,
};
use crate::error::{Error, Result};
use crate::geometry::{dist, normalize_angle, Point};
use crate::sim::{
    pid_speed, step_bicycle, track_route, ControlInput, PidController, VehicleState,
};

pub use collision::Footprint;
pub use config::{DriversConfig, EnvConfig};
pub use layout::{LayoutConfig, Movement, Route, RouteTable};
pub use observe::{observe, Observation, ObserveConfig};
pub use reward::{RewardBreakdown, SocialConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SlowDown,
    Cruise,
    SpeedUp,
}

impl Action {
    pub const ALL: [Action; 3] = [Self::SlowDown, Self::Cruise, Self::SpeedUp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Arrived,
    Collided,
    Timeout,
}

/// Pose and speed of one vehicle at an instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapVehicle {
    pub id: u32,
    pub is_av: bool,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl SnapVehicle {
    pub fn pos(&self) -> Point<f64> {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> Point<f64> {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }
}

/// Everything reward and observation need from the world at one instant.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub vehicles: Vec<SnapVehicle>,
}

impl Snapshot {
    pub fn av(&self) -> Option<&SnapVehicle> {
        self.vehicles.iter().find(|v| v.is_av)
    }
}

/// Static facts the reward needs beyond a snapshot.
#[derive(Debug, Clone)]
pub struct RewardContext<'a> {
    pub av_route: &'a Route,
    pub v0: &'a BTreeMap<u32, f64>,
    pub layout: &'a LayoutConfig,
    pub env: &'a EnvConfig,
    pub social: &'a SocialConfig,
}

pub fn footprint(v: &SnapVehicle, env: &EnvConfig) -> Footprint {
    Footprint {
        center: v.pos(),
        heading: v.heading,
        length: env.vehicle.length,
        width: env.vehicle.width,
    }
}

/// Whether the AV overlaps any other vehicle in `snap`.
pub fn av_collided(snap: &Snapshot, env: &EnvConfig) -> bool {
    let Some(av) = snap.av() else {
        return false;
    };
    let fa = footprint(av, env);
    snap.vehicles
        .iter()
        .filter(|v| !v.is_av)
        .any(|v| collision::overlaps(&fa, &footprint(v, env)))
}

pub fn has_arrived(route: &Route, pos: Point<f64>, margin: f64) -> bool {
    route.line.project(pos).s >= route.length() - margin
}

/// Reward of the decision step ending in `snap`.
pub fn step_reward(snap: &Snapshot, ctx: &RewardContext) -> RewardBreakdown {
    let av = snap.av().expect("snapshot without AV");
    let collided = av_collided(snap, ctx.env);
    let arrived = !collided && has_arrived(ctx.av_route, av.pos(), ctx.env.arrival_margin);
    let (r_c, r_e, r_a, r_ego) = reward::ego_reward(
        collided,
        arrived,
        av.speed,
        ctx.layout.v_max,
        &ctx.env.reward,
        ctx.social,
    );
    let kin = |v: &SnapVehicle| reward::Kin {
        pos: v.pos(),
        vel: v.velocity(),
        speed: v.speed,
    };
    let hvs: Vec<(reward::Kin, f64)> = snap
        .vehicles
        .iter()
        .filter(|v| !v.is_av)
        .map(|v| (kin(v), ctx.v0[&v.id]))
        .collect();
    let r_coord =
        reward::coordination_reward(&kin(av), &hvs, ctx.env.perception_radius, ctx.social);
    RewardBreakdown {
        r_c,
        r_e,
        r_a,
        r_ego,
        r_coord,
        r_global: reward::global_reward(r_ego, r_coord, ctx.social.phi),
    }
}

/// Terminal outcome implied by a post-step snapshot, if any.
pub fn terminal_outcome(snap: &Snapshot, ctx: &RewardContext) -> Option<Outcome> {
    let av = snap.av()?;
    if av_collided(snap, ctx.env) {
        Some(Outcome::Collided)
    } else if has_arrived(ctx.av_route, av.pos(), ctx.env.arrival_margin) {
        Some(Outcome::Arrived)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u32,
    pub is_av: bool,
    pub style: Option<DriverStyle>,
    pub idm: IdmParams<f64>,
    pub route: usize,
    pub state: VehicleState<f64>,
    pub progress: f64,
    pub pid: PidController<f64>,
    pub v_target: f64,
    /// Position at every decision step since spawn.
    pub history: Vec<Point<f64>>,
    /// `[t, x, y, vx, vy]` at every decision step since spawn.
    pub states: Vec<[f64; 5]>,
}

impl Vehicle {
    fn snap(&self) -> SnapVehicle {
        SnapVehicle {
            id: self.id,
            is_av: self.is_av,
            x: self.state.x,
            y: self.state.y,
            heading: self.state.heading,
            speed: self.state.speed,
        }
    }

    fn record(&mut self, t: f64) {
        let [vx, vy] = self.state.velocity();
        self.history.push(self.state.position());
        self.states.push([t, self.state.x, self.state.y, vx, vy]);
    }
}

/// Per-vehicle facts that do not change during an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub id: u32,
    pub is_av: bool,
    pub style: Option<DriverStyle>,
    pub v0: f64,
    pub entry: Arm,
    pub movement: Movement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: usize,
    pub outcome: Option<Outcome>,
    /// HVs removed this step after colliding with each other.
    pub hv_collisions: usize,
    pub av_speed: f64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub steps: usize,
    pub return_ego: f64,
    pub return_coord: f64,
    pub return_global: f64,
    pub avg_speed: f64,
    pub min_pet: Option<f64>,
}

/// One substep row of the episode log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub vehicle_id: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub is_av: bool,
}

#[derive(Clone)]
pub struct IntersectionEnv {
    pub layout: LayoutConfig,
    pub drivers: DriversConfig,
    pub env: EnvConfig,
    pub social: SocialConfig,
    routes: Arc<RouteTable>,
    vehicles: Vec<Vehicle>,
    departed: Vec<Vehicle>,
    crashed: BTreeSet<u32>,
    info: Vec<VehicleInfo>,
    v0: BTreeMap<u32, f64>,
    substep: usize,
    steps: usize,
    done: bool,
    outcome: Option<Outcome>,
    returns: [f64; 3],
    speed_sum: f64,
    log: Vec<LogRow>,
    seed: u64,
}

pub const AV_ID: u32 = 0;

/// A scripted HV for [`IntersectionEnv::reset_scenario`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HvSpawn {
    pub style: DriverStyle,
    pub entry: Arm,
    pub movement: Movement,
    /// Arc length along the route (m).
    pub s: f64,
    pub speed: f64,
}

impl IntersectionEnv {
    pub fn new(
        layout: LayoutConfig,
        drivers: DriversConfig,
        env: EnvConfig,
        social: SocialConfig,
    ) -> Self {
        let routes = Arc::new(RouteTable::new(&layout));
        Self {
            layout,
            drivers,
            env,
            social,
            routes,
            vehicles: Vec::new(),
            departed: Vec::new(),
            crashed: BTreeSet::new(),
            info: Vec::new(),
            v0: BTreeMap::new(),
            substep: 0,
            steps: 0,
            done: true,
            outcome: None,
            returns: [0.0; 3],
            speed_sum: 0.0,
            log: Vec::new(),
            seed: 0,
        }
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn av_route(&self) -> &Route {
        self.routes.get(Arm::South, Movement::Left)
    }

    pub fn observe_config(&self) -> ObserveConfig {
        ObserveConfig {
            n_max: self.env.n_max,
            radius: self.env.perception_radius,
            arm_length: self.layout.arm_length,
            v_max: self.layout.v_max,
        }
    }

    fn now(&self) -> f64 {
        self.substep as f64 * self.env.substep_dt()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn av(&self) -> Option<&Vehicle> {
        self.vehicles.iter().find(|v| v.is_av)
    }

    pub fn departed(&self) -> &[Vehicle] {
        &self.departed
    }

    /// Ids of HVs removed after colliding with each other.
    pub fn crashed(&self) -> &BTreeSet<u32> {
        &self.crashed
    }

    pub fn vehicle_info(&self) -> &[VehicleInfo] {
        &self.info
    }

    pub fn v0_map(&self) -> &BTreeMap<u32, f64> {
        &self.v0
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn hv_history(&self, id: u32) -> Option<&[Point<f64>]> {
        self.vehicles
            .iter()
            .find(|v| v.id == id && !v.is_av)
            .map(|v| v.history.as_slice())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.now(),
            vehicles: self.vehicles.iter().map(Vehicle::snap).collect(),
        }
    }

    pub fn reward_context(&self) -> RewardContext<'_> {
        RewardContext {
            av_route: self.av_route(),
            v0: &self.v0,
            layout: &self.layout,
            env: &self.env,
            social: &self.social,
        }
    }

    pub fn observation(&self) -> Observation {
        observe(&self.snapshot(), &self.observe_config())
    }

    fn clear(&mut self, seed: u64) {
        self.seed = seed;
        self.vehicles.clear();
        self.departed.clear();
        self.crashed.clear();
        self.info.clear();
        self.v0.clear();
        self.log.clear();
        self.substep = 0;
        self.steps = 0;
        self.done = false;
        self.outcome = None;
        self.returns = [0.0; 3];
        self.speed_sum = 0.0;
        if self.env.include_av {
            let ri = RouteTable::index(Arm::South, Movement::Left);
            let s = self.env.av_start_s;
            let v = self.env.av_start_speed;
            let idm = self.drivers.moderate;
            self.spawn(AV_ID, true, None, idm, ri, s, v, v);
        }
    }

    fn finish_reset(&mut self) -> Option<Observation> {
        let t = self.now();
        for v in &mut self.vehicles {
            v.record(t);
        }
        self.push_log();
        self.env.include_av.then(|| self.observation())
    }

    /// Starts an episode with the given HVs instead of random ones. Spacing
    /// is not checked.
    pub fn reset_scenario(&mut self, hvs: &[HvSpawn]) -> Option<Observation> {
        self.clear(0);
        for (i, h) in hvs.iter().enumerate() {
            let idm = self.drivers.idm(h.style);
            let ri = RouteTable::index(h.entry, h.movement);
            self.spawn(i as u32 + 1, false, Some(h.style), idm, ri, h.s, h.speed, idm.v0);
        }
        self.finish_reset()
    }

    /// Starts a new episode. Identical seeds and configs give identical worlds.
    pub fn reset(&mut self, seed: u64) -> Option<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.clear(seed);
        let mut k = rng.random_range(self.env.min_hvs..=self.env.max_hvs);
        let mut next_id = 1u32;
        while (next_id as usize) <= k {
            let mut placed = false;
            for _ in 0..self.env.spawn_attempts {
                let arm = Arm::from_index(rng.random_range(0..4));
                let movement = Movement::ALL[rng.random_range(0..3)];
                let style = DriverStyle::ALL[rng.random_range(0..3)];
                let s = rng.random_range(0.0..=self.env.spawn_s_max);
                let idm = self.drivers.idm(style);
                let lo = self.env.spawn_min_speed.min(idm.v0);
                let speed = if idm.v0 > lo { rng.random_range(lo..idm.v0) } else { lo };
                let ri = RouteTable::index(arm, movement);
                let p = self.routes.by_index(ri).line.point_at(s);
                if self
                    .vehicles
                    .iter()
                    .all(|v| dist(v.state.position(), p) >= self.env.spawn_spacing)
                {
                    self.spawn(next_id, false, Some(style), idm, ri, s, speed, idm.v0);
                    placed = true;
                    break;
                }
            }
            if placed {
                next_id += 1;
            } else {
                k -= 1;
                ::log::warn!(
                    "seed {seed}: could not place HV {next_id} with {} m spacing; reducing to {k} HVs",
                    self.env.spawn_spacing
                );
            }
        }
        self.finish_reset()
    }

    #[allow(clippy::too_many_arguments)]
    fn spawn(
        &mut self,
        id: u32,
        is_av: bool,
        style: Option<DriverStyle>,
        idm: IdmParams<f64>,
        route: usize,
        s: f64,
        speed: f64,
        v_target: f64,
    ) {
        let r = self.routes.by_index(route);
        let p = r.line.point_at(s);
        let state = VehicleState::new(p[0], p[1], r.line.heading_at(s), speed)
            .expect("spawn state is finite");
        self.info.push(VehicleInfo {
            id,
            is_av,
            style,
            v0: idm.v0,
            entry: r.entry,
            movement: r.movement,
        });
        if !is_av {
            self.v0.insert(id, idm.v0);
        }
        self.vehicles.push(Vehicle {
            id,
            is_av,
            style,
            idm,
            route,
            state,
            progress: s,
            pid: PidController::new(self.env.pid),
            v_target,
            history: Vec::new(),
            states: Vec::new(),
        });
    }

    fn push_log(&mut self) {
        let t = self.now();
        for v in &self.vehicles {
            self.log.push(LogRow {
                t,
                vehicle_id: v.id,
                x: v.state.x,
                y: v.state.y,
                heading: v.state.heading,
                speed: v.state.speed,
                is_av: v.is_av,
            });
        }
    }

    /// Bumper gap and speed of the nearest vehicle ahead on `i`'s route.
    fn leader(&self, i: usize) -> Option<(f64, f64)> {
        let me = &self.vehicles[i];
        let route = &self.routes.by_index(me.route).line;
        let horizon = 40.0;
        let mut best: Option<(f64, f64)> = None;
        for (j, o) in self.vehicles.iter().enumerate() {
            if j == i || dist(o.state.position(), me.state.position()) > horizon + 5.0 {
                continue;
            }
            let pr = route.project_window(o.state.position(), me.progress, me.progress + horizon);
            if pr.offset > self.env.leader_lateral || pr.s <= me.progress {
                continue;
            }
            let dh = normalize_angle(o.state.heading - route.heading_at(pr.s));
            if dh.abs() > std::f64::consts::FRAC_PI_4 {
                continue;
            }
            let gap = pr.s - me.progress - self.env.vehicle.length;
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, o.state.speed));
            }
        }
        best
    }

    /// Yield view of vehicle `v` with its path predicted at `speed`.
    fn yield_agent(&self, v: &Vehicle, speed: f64) -> YieldAgent<f64> {
        YieldAgent {
            id: v.id,
            arm: self.routes.by_index(v.route).entry,
            in_box: self.layout.in_box(v.state.position()),
            speed: v.state.speed,
            path: predict_from_progress(
                v.progress,
                speed,
                &self.routes.by_index(v.route).line,
                &self.drivers.prediction,
            ),
        }
    }

    fn controls(&mut self) -> Vec<ControlInput<f64>> {
        let dt = self.env.substep_dt();
        let agents: Vec<_> = self
            .vehicles
            .iter()
            .map(|v| self.yield_agent(v, v.state.speed))
            .collect();
        let mut out = Vec::with_capacity(self.vehicles.len());
        for i in 0..self.vehicles.len() {
            let accel = if self.vehicles[i].is_av {
                let v = &mut self.vehicles[i];
                pid_speed(v.v_target, &v.state, &mut v.pid, dt, &self.env.vehicle)
            } else {
                let v = &self.vehicles[i];
                let follow = match self.leader(i) {
                    Some((gap, lead_speed)) => {
                        idm_accel(v.state.speed, gap, v.state.speed - lead_speed, &v.idm)
                    }
                    None => idm_accel(v.state.speed, f64::INFINITY, 0.0, &v.idm),
                };
                // Judge conflicts as if proceeding at the desired speed, otherwise
                // a yielding vehicle sees the conflict vanish once it has slowed.
                let intent = self.yield_agent(v, v.state.speed.max(v.idm.v0));
                let brake = yield_decision(&intent, &agents, &v.idm, &self.drivers.prediction);
                brake.map_or(follow, |b| follow.min(b))
            };
            let v = &self.vehicles[i];
            let steering = track_route(
                &v.state,
                &self.routes.by_index(v.route).line,
                Some(v.progress),
                self.env.lookahead,
                &self.env.vehicle,
            );
            out.push(ControlInput { steering, accel });
        }
        out
    }

    /// One dynamics substep. Returns `(av_collided, hv_collisions)`.
    fn substep(&mut self) -> Result<(bool, usize)> {
        let dt = self.env.substep_dt();
        let controls = self.controls();
        for (v, u) in self.vehicles.iter_mut().zip(&controls) {
            v.state = step_bicycle(&v.state, u, dt, &self.env.vehicle)?;
            let line = &self.routes.by_index(v.route).line;
            let travel = v.state.speed * dt;
            v.progress = line
                .project_window(v.state.position(), v.progress - 1.0, v.progress + travel + 2.0)
                .s;
        }
        self.substep += 1;

        // HVs leave at the end of their route
        let margin = self.env.arrival_margin;
        let routes = Arc::clone(&self.routes);
        let (gone, stay): (Vec<_>, Vec<_>) = std::mem::take(&mut self.vehicles)
            .into_iter()
            .partition(|v| !v.is_av && v.progress >= routes.by_index(v.route).length() - margin);
        self.vehicles = stay;
        self.departed.extend(gone);

        let fps: Vec<Footprint> = self
            .vehicles
            .iter()
            .map(|v| footprint(&v.snap(), &self.env))
            .collect();
        let pairs = collision::detect_collisions(&fps);
        let av_hit = pairs
            .iter()
            .any(|&(a, b)| self.vehicles[a].is_av || self.vehicles[b].is_av);
        let mut hv_hits = 0;
        if !av_hit && !pairs.is_empty() {
            let mut remove = vec![false; self.vehicles.len()];
            for &(a, b) in &pairs {
                remove[a] = true;
                remove[b] = true;
            }
            hv_hits = pairs.len();
            let mut k = 0;
            let (gone, stay): (Vec<_>, Vec<_>) = std::mem::take(&mut self.vehicles)
                .into_iter()
                .partition(|_| {
                    k += 1;
                    remove[k - 1]
                });
            self.vehicles = stay;
            self.crashed.extend(gone.iter().map(|v| v.id));
            self.departed.extend(gone);
        }
        self.push_log();
        Ok((av_hit, hv_hits))
    }

    /// Advances one decision period without an AV action (background traffic only).
    pub fn step_background(&mut self) -> Result<usize> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let mut hv_hits = 0;
        for _ in 0..self.env.substeps {
            hv_hits += self.substep()?.1;
        }
        self.steps += 1;
        let t = self.now();
        for v in &mut self.vehicles {
            v.record(t);
        }
        if self.steps >= self.env.max_steps || self.vehicles.is_empty() {
            self.done = true;
            self.outcome = Some(Outcome::Timeout);
        }
        Ok(hv_hits)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !self.env.include_av {
            return Err(Error::Invalid("environment has no AV".into()));
        }
        let delta = match action {
            Action::SlowDown => -self.env.speed_delta,
            Action::Cruise => 0.0,
            Action::SpeedUp => self.env.speed_delta,
        };
        let v_max = self.layout.v_max;
        let av = self.vehicles.iter_mut().find(|v| v.is_av).expect("AV present");
        av.v_target = (av.v_target + delta).clamp(0.0, v_max);

        let mut hv_hits = 0;
        for _ in 0..self.env.substeps {
            let (av_hit, hits) = self.substep()?;
            hv_hits += hits;
            if av_hit {
                break;
            }
            let av = self.vehicles.iter().find(|v| v.is_av).expect("AV present");
            if has_arrived(self.av_route(), av.state.position(), self.env.arrival_margin) {
                break;
            }
        }
        self.steps += 1;
        let t = self.now();
        for v in &mut self.vehicles {
            v.record(t);
        }

        let snap = self.snapshot();
        let ctx = self.reward_context();
        let reward = step_reward(&snap, &ctx);
        let mut outcome = terminal_outcome(&snap, &ctx);
        if outcome.is_none() && self.steps >= self.env.max_steps {
            outcome = Some(Outcome::Timeout);
        }
        let av_speed = snap.av().expect("AV present").speed;
        self.returns[0] += reward.r_ego;
        self.returns[1] += reward.r_coord;
        self.returns[2] += reward.r_global;
        self.speed_sum += av_speed;
        self.done = outcome.is_some();
        self.outcome = outcome;
        Ok(StepResult {
            obs: observe(&snap, &self.observe_config()),
            reward,
            done: self.done,
            info: StepInfo {
                step: self.steps,
                outcome,
                hv_collisions: hv_hits,
                av_speed,
            },
        })
    }

    /// Summary of a finished episode.
    pub fn result(&self) -> Option<EpisodeResult> {
        let outcome = self.outcome?;
        Some(EpisodeResult {
            outcome,
            steps: self.steps,
            return_ego: self.returns[0],
            return_coord: self.returns[1],
            return_global: self.returns[2],
            avg_speed: if self.steps > 0 {
                self.speed_sum / self.steps as f64
            } else {
                0.0
            },
            min_pet: self.min_pet(),
        })
    }

    /// Minimum AV–HV post-encroachment time over the logged episode.
    pub fn min_pet(&self) -> Option<f64> {
        log::min_pet_from_rows(&self.log, self.layout.intersection_half)
    }
}
