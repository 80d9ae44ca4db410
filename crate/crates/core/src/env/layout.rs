//! Cross-shaped single-lane intersection geometry and the twelve routes
//! through it.
//!
//! Routes are built for the south arm (driving north in the right-hand lane
//! at `x = lane_width / 2`) and rotated by quarter turns for the other arms.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::drivers::Arm;
use crate::geometry::{Point, Polyline};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    /// Distance from the center to the far end of each arm (m).
    pub arm_length: f64,
    pub lane_width: f64,
    /// Half extent of the square conflict box (m).
    pub intersection_half: f64,
    pub left_radius: f64,
    pub right_radius: f64,
    /// Speed limit `v_max` (m/s).
    pub v_max: f64,
    /// Target vertex spacing of route polylines (m).
    pub resolution: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            arm_length: 60.0,
            lane_width: 4.0,
            intersection_half: 8.0,
            left_radius: 9.0,
            right_radius: 5.0,
            v_max: 9.0,
            resolution: 1.0,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.arm_length,
            self.lane_width,
            self.intersection_half,
            self.left_radius,
            self.right_radius,
            self.v_max,
            self.resolution,
        ];
        if !all.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err("layout values must be positive".into());
        }
        let half_lane = self.lane_width / 2.0;
        if self.right_radius + half_lane > self.intersection_half
            || self.left_radius - half_lane > self.intersection_half
            || self.left_radius <= half_lane
        {
            return Err("turn arcs must lie inside the conflict box".into());
        }
        if self.arm_length <= self.intersection_half + self.left_radius {
            return Err("arms too short for the conflict box".into());
        }
        Ok(())
    }

    pub fn in_box(&self, p: Point<f64>) -> bool {
        p[0].abs() < self.intersection_half && p[1].abs() < self.intersection_half
    }

    /// Arm whose half-plane quadrant contains `p` (ties go to the vertical arms).
    pub fn arm_of_point(p: Point<f64>) -> Arm {
        if p[0].abs() > p[1].abs() {
            if p[0] > 0.0 {
                Arm::East
            } else {
                Arm::West
            }
        } else if p[1] < 0.0 {
            Arm::South
        } else {
            Arm::North
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Movement {
    Left,
    Straight,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Self::Left, Self::Straight, Self::Right];

    pub fn exit(self, entry: Arm) -> Arm {
        match self {
            Self::Left => entry.left(),
            Self::Straight => entry.opposite(),
            Self::Right => entry.right(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Straight => "straight",
            Self::Right => "right",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub entry: Arm,
    pub movement: Movement,
    pub line: Polyline<f64>,
}

impl Route {
    pub fn exit(&self) -> Arm {
        self.movement.exit(self.entry)
    }

    pub fn length(&self) -> f64 {
        self.line.length()
    }
}

/// Rotation taking the south-arm frame to `arm`'s frame.
pub fn rotate_from_south(arm: Arm, p: Point<f64>) -> Point<f64> {
    let (s, c) = (FRAC_PI_2 * arm.index() as f64).sin_cos();
    // exact quarter turns, avoiding 6e-17 residue from sin/cos
    let (s, c) = (s.round(), c.round());
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Inverse of [`rotate_from_south`].
pub fn rotate_to_south(arm: Arm, p: Point<f64>) -> Point<f64> {
    let (s, c) = (FRAC_PI_2 * arm.index() as f64).sin_cos();
    let (s, c) = (s.round(), c.round());
    [c * p[0] + s * p[1], -s * p[0] + c * p[1]]
}

fn straight(out: &mut Vec<Point<f64>>, from: Point<f64>, to: Point<f64>, res: f64) {
    let len = (to[0] - from[0]).hypot(to[1] - from[1]);
    let n = (len / res).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let p = [from[0] + (to[0] - from[0]) * t, from[1] + (to[1] - from[1]) * t];
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
}

fn arc(out: &mut Vec<Point<f64>>, center: Point<f64>, r: f64, a0: f64, a1: f64, res: f64) {
    let n = ((a1 - a0).abs() * r / res).ceil().max(2.0) as usize;
    for i in 0..=n {
        let a = a0 + (a1 - a0) * i as f64 / n as f64;
        let p = [center[0] + r * a.cos(), center[1] + r * a.sin()];
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
}

/// Route in the south-arm frame.
fn south_route(cfg: &LayoutConfig, movement: Movement) -> Vec<Point<f64>> {
    let half = cfg.lane_width / 2.0;
    let l = cfg.arm_length;
    let res = cfg.resolution;
    let mut pts = Vec::new();
    match movement {
        Movement::Straight => straight(&mut pts, [half, -l], [half, l], res),
        Movement::Left => {
            let r = cfg.left_radius;
            // quarter circle from heading north at (half, cy) to heading west at (cx, half)
            let (cx, cy) = (half - r, half - r);
            straight(&mut pts, [half, -l], [half, cy], res);
            arc(&mut pts, [cx, cy], r, 0.0, FRAC_PI_2, res);
            straight(&mut pts, [cx, cy + r], [-l, cy + r], res);
        }
        Movement::Right => {
            let r = cfg.right_radius;
            let (cx, cy) = (half + r, -half - r);
            straight(&mut pts, [half, -l], [half, cy], res);
            arc(&mut pts, [cx, cy], r, std::f64::consts::PI, FRAC_PI_2, res);
            straight(&mut pts, [cx, cy + r], [l, cy + r], res);
        }
    }
    pts
}

pub fn build_route(cfg: &LayoutConfig, entry: Arm, movement: Movement) -> Route {
    let pts = south_route(cfg, movement)
        .into_iter()
        .map(|p| rotate_from_south(entry, p))
        .collect();
    Route {
        entry,
        movement,
        line: Polyline::new(pts),
    }
}

/// All twelve routes, indexed by `entry.index() * 3 + movement`.
#[derive(Debug, Clone)]
pub struct RouteTable {
    routes: Vec<Route>,
}

impl RouteTable {
    pub fn new(cfg: &LayoutConfig) -> Self {
        let mut routes = Vec::with_capacity(12);
        for arm in Arm::ALL {
            for m in Movement::ALL {
                routes.push(build_route(cfg, arm, m));
            }
        }
        Self { routes }
    }

    pub fn index(entry: Arm, movement: Movement) -> usize {
        entry.index() * 3 + movement as usize
    }

    pub fn get(&self, entry: Arm, movement: Movement) -> &Route {
        &self.routes[Self::index(entry, movement)]
    }

    pub fn by_index(&self, i: usize) -> &Route {
        &self.routes[i]
    }
}
