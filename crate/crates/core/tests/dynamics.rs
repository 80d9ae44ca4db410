use socialdrive_core::env::layout::{build_route, LayoutConfig, Movement};
use socialdrive_core::drivers::Arm;
use socialdrive_core::sim::*;

/// Algebraic least-squares circle fit: minimizes Σ (x² + y² + D x + E y + F)².
fn fit_circle(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let mut m = [[0.0f64; 4]; 3];
    for &(x, y) in pts {
        let row = [x, y, 1.0];
        let rhs = -(x * x + y * y);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            m[i][3] += row[i] * rhs;
        }
    }
    for c in 0..3 {
        let p = (c..3).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        m.swap(c, p);
        for r in 0..3 {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..4 {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    let (d, e, f) = (m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]);
    let (cx, cy) = (-d / 2.0, -e / 2.0);
    (cx, cy, (cx * cx + cy * cy - f).sqrt())
}

fn loop_radius(steer: f64, v: f64, dt: f64) -> f64 {
    let p: BicycleParams<f64> = BicycleParams::default();
    let mut s = VehicleState::new(0.0, 0.0, 0.0, v).unwrap();
    let u = ControlInput { steering: steer, accel: 0.0 };
    let circumference = 2.0 * std::f64::consts::PI * p.wheelbase / steer.tan();
    let n = (circumference / (v * dt)).ceil() as usize;
    let mut pts = vec![(s.x, s.y)];
    for _ in 0..n {
        s = step_bicycle(&s, &u, dt, &p).unwrap();
        pts.push((s.x, s.y));
    }
    fit_circle(&pts).2
}

#[test]
fn turning_radius_matches_wheelbase_over_tan() {
    let analytic = 2.5 / 0.2f64.tan();
    let r = loop_radius(0.2, 5.0, 0.01);
    assert!((r - analytic).abs() / analytic < 0.01, "fitted {r}, analytic {analytic}");
}

#[test]
fn turning_radius_converges_with_dt() {
    // continuous-time radius of the CG-referenced model
    let beta = (0.2f64.tan() / 2.0).atan();
    let exact = 2.5 / (0.2f64.tan() * beta.cos());
    let coarse = (loop_radius(0.2, 5.0, 0.1) - exact).abs();
    let fine = (loop_radius(0.2, 5.0, 0.01) - exact).abs();
    assert!(coarse >= 5.0 * fine, "coarse {coarse}, fine {fine}");
}

#[test]
fn straight_line_is_exact() {
    let p: BicycleParams<f64> = BicycleParams::default();
    let mut s = VehicleState::new(1.0, 2.0, 0.3, 0.0).unwrap();
    let mut travelled = 0.0;
    for k in 0..200 {
        let accel = if k < 100 { 1.0 } else { -0.5 };
        let before = s;
        s = step_bicycle(&s, &ControlInput { steering: 0.0, accel }, 0.1, &p).unwrap();
        travelled += before.speed * 0.1;
        assert_eq!(s.heading, 0.3);
        assert!(s.speed >= 0.0);
    }
    let moved = (s.x - 1.0).hypot(s.y - 2.0);
    assert!((moved - travelled).abs() < 1e-9);
}

#[test]
fn steps_are_bit_deterministic() {
    let p: BicycleParams<f64> = BicycleParams::default();
    let s = VehicleState::new(0.1, -3.0, 2.0, 4.0).unwrap();
    let u = ControlInput { steering: 0.31, accel: -1.7 };
    let a = step_bicycle(&s, &u, 0.1, &p).unwrap();
    let b = step_bicycle(&s, &u, 0.1, &p).unwrap();
    assert_eq!(a.x.to_bits(), b.x.to_bits());
    assert_eq!(a.heading.to_bits(), b.heading.to_bits());
}

#[test]
fn pid_step_response() {
    let p: BicycleParams<f64> = BicycleParams::default();
    let mut pid = PidController::new(PidGains::default());
    let mut s = VehicleState::new(0.0, 0.0, 0.0, 0.0).unwrap();
    let mut reached = None;
    for k in 1..=60 {
        let a = pid_speed(8.0, &s, &mut pid, 0.1, &p);
        s = step_bicycle(&s, &ControlInput { steering: 0.0, accel: a }, 0.1, &p).unwrap();
        if s.speed >= 7.2 && reached.is_none() {
            reached = Some(k as f64 * 0.1);
        }
    }
    assert!(reached.is_some_and(|t| t <= 6.0), "reached {reached:?}");
}

#[test]
fn left_turn_tracking_deviation() {
    let layout = LayoutConfig::default();
    let route = build_route(&layout, Arm::South, Movement::Left);
    let p: BicycleParams<f64> = BicycleParams::default();
    let mut pid = PidController::new(PidGains::default());
    for v_target in [4.0, 6.0, 9.0] {
        let start = route.line.point_at(20.0);
        let mut s = VehicleState::new(start[0], start[1], route.line.heading_at(20.0), v_target).unwrap();
        let mut progress = 20.0;
        let mut worst: f64 = 0.0;
        while progress < route.length() - 6.0 {
            let steering = track_route(&s, &route.line, Some(progress), 5.0, &p);
            let accel = pid_speed(v_target, &s, &mut pid, 0.1, &p);
            s = step_bicycle(&s, &ControlInput { steering, accel }, 0.1, &p).unwrap();
            let pr = route.line.project_window(s.position(), progress - 1.0, progress + 3.0);
            progress = pr.s;
            worst = worst.max(pr.offset);
        }
        assert!(worst < 0.5, "max deviation {worst} at {v_target} m/s");
    }
}
