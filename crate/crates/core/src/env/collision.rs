//! Oriented-rectangle overlap by the separating-axis test.

use crate::geometry::Point;

/// Vehicle footprint centered at `center`, rotated by `heading`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub center: Point<f64>,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    fn axes(&self) -> [Point<f64>; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [Point<f64>; 4] {
        let [u, v] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let [cx, cy] = self.center;
        let at = |a: f64, b: f64| [cx + u[0] * a + v[0] * b, cy + u[1] * a + v[1] * b];
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    pub fn contains(&self, p: Point<f64>) -> bool {
        let [u, v] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        (d[0] * u[0] + d[1] * u[1]).abs() <= self.length / 2.0
            && (d[0] * v[0] + d[1] * v[1]).abs() <= self.width / 2.0
    }
}

fn project(corners: &[Point<f64>; 4], axis: Point<f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let d = c[0] * axis[0] + c[1] * axis[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// True when the closed rectangles intersect (touching counts).
pub fn overlaps(a: &Footprint, b: &Footprint) -> bool {
    let reach = (a.length.hypot(a.width) + b.length.hypot(b.width)) / 2.0;
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d > reach {
        return false;
    }
    let (ca, cb) = (a.corners(), b.corners());
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (alo, ahi) = project(&ca, axis);
        let (blo, bhi) = project(&cb, axis);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// All overlapping index pairs `(i, j)` with `i < j`.
pub fn detect_collisions(fps: &[Footprint]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            if overlaps(&fps[i], &fps[j]) {
                out.push((i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(x: f64, y: f64, h: f64) -> Footprint {
        Footprint {
            center: [x, y],
            heading: h,
            length: 5.0,
            width: 2.0,
        }
    }

    #[test]
    fn basic_cases() {
        assert!(!overlaps(&fp(0.0, 0.0, 0.0), &fp(100.0, 0.0, 0.0)));
        assert!(overlaps(&fp(3.0, 1.0, 0.4), &fp(3.0, 1.0, 0.4)));
        assert!(overlaps(&fp(0.0, 0.0, 0.0), &fp(4.9, 0.0, 0.0)));
        assert!(!overlaps(&fp(0.0, 0.0, 0.0), &fp(5.1, 0.0, 0.0)));
        // crossing T: nose of one into the side of the other
        assert!(overlaps(&fp(0.0, 0.0, 0.0), &fp(0.0, 3.4, 1.5707963)));
        assert!(!overlaps(&fp(0.0, 0.0, 0.0), &fp(0.0, 3.6, 1.5707963)));
        assert_eq!(
            detect_collisions(&[fp(0.0, 0.0, 0.0), fp(50.0, 0.0, 0.0), fp(1.0, 0.0, 0.0)]),
            vec![(0, 2)]
        );
    }
}
