//! Human-driver behavior: IDM car following, MOBIL lane changes and
//! constant-speed conflict prediction with a right-of-way rule.

use serde::{Deserialize, Serialize};
use socialdrive_nn::Scalar;

use crate::geometry::{dist, Point, Polyline};
use crate::sim::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverStyle {
    Aggressive,
    Moderate,
    Conservative,
}

impl DriverStyle {
    pub const ALL: [DriverStyle; 3] = [Self::Aggressive, Self::Moderate, Self::Conservative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Aggressive => "aggressive",
            Self::Moderate => "moderate",
            Self::Conservative => "conservative",
        }
    }

    /// Default IDM parameters for the style.
    pub fn idm<T: Scalar>(self) -> IdmParams<T> {
        let (d0, t, a0, b0, v0) = match self {
            Self::Aggressive => (2.0, 1.0, 5.0, 5.0, 10.0),
            Self::Moderate => (5.0, 1.5, 2.5, 4.0, 8.0),
            Self::Conservative => (8.0, 2.0, 1.5, 2.0, 6.0),
        };
        IdmParams {
            d0: T::lit(d0),
            headway: T::lit(t),
            a0: T::lit(a0),
            b0: T::lit(b0),
            v0: T::lit(v0),
            delta_exp: T::lit(4.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams<T> {
    /// Jam distance (m).
    pub d0: T,
    /// Desired time headway (s).
    pub headway: T,
    /// Maximum acceleration (m/s²).
    pub a0: T,
    /// Comfortable deceleration (m/s²).
    pub b0: T,
    /// Desired speed (m/s).
    pub v0: T,
    pub delta_exp: T,
}

impl<T: Scalar> IdmParams<T> {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.d0, self.headway, self.a0, self.b0, self.v0, self.delta_exp];
        if all.iter().all(|v| v.is_finite() && *v > T::zero()) {
            Ok(())
        } else {
            Err("IDM parameters must be positive and finite".into())
        }
    }

    /// Emergency braking bound, twice the comfortable deceleration.
    pub fn b_max(&self) -> T {
        self.b0 + self.b0
    }
}

/// IDM acceleration. `gap` is bumper-to-bumper distance to the leader
/// (`+∞` when there is none) and `dv` the approach rate `v − v_lead`.
pub fn idm_accel<T: Scalar>(v: T, gap: T, dv: T, p: &IdmParams<T>) -> T {
    let b_max = p.b_max();
    let free = T::one() - (v / p.v0).powf(p.delta_exp);
    if gap.is_infinite() && gap > T::zero() {
        return (p.a0 * free).max(-b_max).min(p.a0);
    }
    if !(gap > T::zero()) {
        return -b_max;
    }
    // The braking term is floored at zero so that a fast-receding leader
    // never lets the desired gap fall below zero.
    let s_star = p.d0
        + (v * p.headway + v * dv / (T::lit(2.0) * (p.a0 * p.b0).sqrt())).max(T::zero());
    let ratio = s_star / gap;
    (p.a0 * (free - ratio * ratio)).max(-b_max).min(p.a0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilParams<T> {
    pub politeness: T,
    pub accel_gain_threshold: T,
    pub safe_braking: T,
}

impl<T: Scalar> Default for MobilParams<T> {
    fn default() -> Self {
        Self {
            politeness: T::lit(0.3),
            accel_gain_threshold: T::lit(0.2),
            safe_braking: T::lit(4.0),
        }
    }
}

/// Another vehicle in a lane, relative to the deciding vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    /// Bumper-to-bumper gap (m).
    pub gap: T,
    pub speed: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaneContext<T> {
    pub leader: Option<Neighbor<T>>,
    pub follower: Option<Neighbor<T>>,
}

fn follow<T: Scalar>(v: T, leader: Option<(T, T)>, p: &IdmParams<T>) -> T {
    match leader {
        Some((gap, v_lead)) => idm_accel(v, gap, v - v_lead, p),
        None => idm_accel(v, T::infinity(), T::zero(), p),
    }
}

/// MOBIL incentive and safety test for moving from `current` into `target`.
/// Followers are assumed to drive with the ego's IDM parameters.
pub fn mobil_should_change<T: Scalar>(
    ego_speed: T,
    ego_length: T,
    idm: &IdmParams<T>,
    current: &LaneContext<T>,
    target: &LaneContext<T>,
    p: &MobilParams<T>,
) -> bool {
    let lead = |n: &Option<Neighbor<T>>| n.map(|n| (n.gap, n.speed));
    let a_c = follow(ego_speed, lead(&current.leader), idm);
    let a_c_new = follow(ego_speed, lead(&target.leader), idm);

    // new follower: before it follows the target leader, after it follows ego
    let (a_n, a_n_new) = match target.follower {
        Some(f) => {
            let before = target
                .leader
                .map(|l| (f.gap + ego_length + l.gap, l.speed));
            (
                follow(f.speed, before, idm),
                follow(f.speed, Some((f.gap, ego_speed)), idm),
            )
        }
        None => (T::zero(), T::zero()),
    };
    if a_n_new < -p.safe_braking {
        return false;
    }
    // old follower: before it follows ego, after it follows ego's leader
    let (a_o, a_o_new) = match current.follower {
        Some(f) => {
            let after = current
                .leader
                .map(|l| (f.gap + ego_length + l.gap, l.speed));
            (
                follow(f.speed, Some((f.gap, ego_speed)), idm),
                follow(f.speed, after, idm),
            )
        }
        None => (T::zero(), T::zero()),
    };
    let incentive = a_c_new - a_c + p.politeness * (a_n_new - a_n + a_o_new - a_o);
    incentive > p.accel_gain_threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig<T> {
    /// Prediction horizon `T_p` (s).
    pub horizon: T,
    pub sample_dt: T,
    /// Center distance below which two same-time samples conflict (m).
    pub conflict_radius: T,
}

impl<T: Scalar> Default for PredictionConfig<T> {
    fn default() -> Self {
        Self {
            horizon: T::lit(3.0),
            sample_dt: T::lit(0.5),
            conflict_radius: T::lit(3.0),
        }
    }
}

impl<T: Scalar> PredictionConfig<T> {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.horizon > T::zero() && self.sample_dt > T::zero() && self.conflict_radius > T::zero())
        {
            return Err("prediction horizon, sample_dt and conflict_radius must be positive".into());
        }
        let n = self.horizon / self.sample_dt;
        if (n - n.round()).abs() > T::lit(1e-6) {
            return Err("sample_dt must divide the prediction horizon".into());
        }
        Ok(())
    }

    /// Number of samples including the current position.
    pub fn samples(&self) -> usize {
        (self.horizon / self.sample_dt).round().as_f64() as usize + 1
    }
}

/// Positions reached by advancing at constant `speed` from arc length
/// `progress`, one per `sample_dt`, stopping at the route end.
pub fn predict_from_progress<T: Scalar>(
    progress: T,
    speed: T,
    route: &Polyline<T>,
    cfg: &PredictionConfig<T>,
) -> Vec<Point<T>> {
    let len = route.length();
    let mut out = Vec::with_capacity(cfg.samples());
    for k in 0..cfg.samples() {
        let s = progress + speed * cfg.sample_dt * T::from_usize(k).expect("small");
        if s > len && k > 0 {
            break;
        }
        out.push(route.point_at(s.min(len)));
    }
    out
}

/// [`predict_from_progress`] starting from the state's projection on the route.
pub fn predict_constant_speed<T: Scalar>(
    state: &VehicleState<T>,
    route: &Polyline<T>,
    cfg: &PredictionConfig<T>,
) -> Vec<Point<T>> {
    let s = route.project(state.position()).s;
    predict_from_progress(s, state.speed, route, cfg)
}

/// Approach arm of an intersection, named by compass side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    South,
    East,
    North,
    West,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Self::South, Self::East, Self::North, Self::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Arm {
        Self::ALL[i % 4]
    }

    /// Arm to the right of a driver approaching from `self` (right-hand traffic).
    pub fn right(self) -> Arm {
        Self::from_index(self.index() + 1)
    }

    pub fn opposite(self) -> Arm {
        Self::from_index(self.index() + 2)
    }

    pub fn left(self) -> Arm {
        Self::from_index(self.index() + 3)
    }
}

/// What the right-of-way rule needs to know about one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct YieldAgent<T> {
    pub id: u32,
    pub arm: Arm,
    pub in_box: bool,
    pub speed: T,
    /// Predicted path on the shared time grid.
    pub path: Vec<Point<T>>,
}

/// Smallest separation of two points moving linearly from `(a0, b0)` to `(a1, b1)`.
fn closest_approach<T: Scalar>(a0: Point<T>, a1: Point<T>, b0: Point<T>, b1: Point<T>) -> T {
    let d0 = [b0[0] - a0[0], b0[1] - a0[1]];
    let dd = [b1[0] - a1[0] - d0[0], b1[1] - a1[1] - d0[1]];
    let den = dd[0] * dd[0] + dd[1] * dd[1];
    let u = if den > T::zero() {
        (-(d0[0] * dd[0] + d0[1] * dd[1]) / den).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    (d0[0] + dd[0] * u).hypot(d0[1] + dd[1] * u)
}

/// First time index at which the two paths come within `radius`. Between
/// samples both vehicles are taken to move linearly, so a crossing that
/// falls between two sample instants is reported at the earlier one.
pub fn first_conflict<T: Scalar>(a: &[Point<T>], b: &[Point<T>], radius: T) -> Option<usize> {
    let n = a.len().min(b.len());
    (0..n).find(|&k| {
        dist(a[k], b[k]) < radius
            || (k + 1 < n && closest_approach(a[k], a[k + 1], b[k], b[k + 1]) < radius)
    })
}

/// Index of the first sample of `path` within `radius` of `point`.
fn time_to_reach<T: Scalar>(path: &[Point<T>], point: Point<T>, radius: T) -> usize {
    path.iter()
        .position(|p| dist(*p, point) < radius)
        .unwrap_or(path.len())
}

/// Whether `a` keeps right of way over `b` at a conflict whose first shared
/// sample is `k`. Exactly one of `has_priority(a, b)` and
/// `has_priority(b, a)` holds for distinct ids.
pub fn has_priority<T: Scalar>(a: &YieldAgent<T>, b: &YieldAgent<T>, k: usize, radius: T) -> bool {
    if a.in_box != b.in_box {
        return a.in_box;
    }
    if !(a.in_box && b.in_box) {
        if b.arm == a.arm.right() {
            return false;
        }
        if a.arm == b.arm.right() {
            return true;
        }
    }
    let mid = |i: usize| {
        let (p, q) = (a.path[i], b.path[i]);
        [(p[0] + q[0]) / T::lit(2.0), (p[1] + q[1]) / T::lit(2.0)]
    };
    let c = mid(k);
    let ta = time_to_reach(&a.path, c, radius);
    let tb = time_to_reach(&b.path, c, radius);
    if ta != tb {
        return ta < tb;
    }
    a.id < b.id
}

/// Braking override for `ego` if it must yield to any of `others`: the IDM
/// acceleration toward the nearest conflict sample treated as a standing
/// leader, stopping `conflict_radius` short of it. Same-arm vehicles are
/// left to car following.
pub fn yield_decision<T: Scalar>(
    ego: &YieldAgent<T>,
    others: &[YieldAgent<T>],
    idm: &IdmParams<T>,
    cfg: &PredictionConfig<T>,
) -> Option<T> {
    let r = cfg.conflict_radius;
    let mut nearest: Option<usize> = None;
    for o in others {
        if o.id == ego.id || o.arm == ego.arm {
            continue;
        }
        let Some(k) = first_conflict(&ego.path, &o.path, r) else {
            continue;
        };
        if has_priority(ego, o, k, r) {
            continue;
        }
        nearest = Some(nearest.map_or(k, |n| n.min(k)));
    }
    let k = nearest?;
    let mut along = T::zero();
    for w in ego.path[..=k].windows(2) {
        along += dist(w[0], w[1]);
    }
    Some(idm_accel(ego.speed, along - r, ego.speed, idm))
}
