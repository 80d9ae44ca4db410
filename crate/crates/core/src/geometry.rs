//! Planar polylines with arc-length parameterization.

use socialdrive_nn::Scalar;

pub type Point<T> = [T; 2];

pub fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle<T: Scalar>(a: T) -> T {
    let pi = T::lit(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut r = a % two_pi;
    if r <= -pi {
        r += two_pi;
    } else if r > pi {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    /// Arc length of the closest point.
    pub s: T,
    /// Unsigned distance to the closest point.
    pub offset: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline<T> {
    points: Vec<Point<T>>,
    cum: Vec<T>,
}

impl<T: Scalar> Polyline<T> {
    /// Panics on fewer than two points or repeated consecutive points.
    pub fn new(points: Vec<Point<T>>) -> Self {
        assert!(points.len() >= 2, "polyline needs two points");
        let mut cum = Vec::with_capacity(points.len());
        cum.push(T::zero());
        for w in points.windows(2) {
            let d = dist(w[0], w[1]);
            assert!(d > T::zero(), "repeated polyline vertex");
            let last = *cum.last().expect("non-empty");
            cum.push(last + d);
        }
        Self { points, cum }
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn length(&self) -> T {
        *self.cum.last().expect("non-empty")
    }

    pub fn start(&self) -> Point<T> {
        self.points[0]
    }

    pub fn end(&self) -> Point<T> {
        *self.points.last().expect("non-empty")
    }

    fn segment_at(&self, s: T) -> usize {
        // last i with cum[i] <= s, capped to the final segment
        let i = self.cum.partition_point(|&c| c <= s);
        i.saturating_sub(1).min(self.points.len() - 2)
    }

    /// Point at arc length `s`; beyond either end the end segment is extended.
    pub fn point_at(&self, s: T) -> Point<T> {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = (s - self.cum[i]) / seg;
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: T) -> Point<T> {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg]
    }

    pub fn heading_at(&self, s: T) -> T {
        let t = self.tangent_at(s);
        t[1].atan2(t[0])
    }

    fn project_segments(&self, p: Point<T>, first: usize, last: usize) -> Projection<T> {
        let mut best = Projection {
            s: T::zero(),
            offset: T::infinity(),
        };
        for i in first..=last {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let seg = self.cum[i + 1] - self.cum[i];
            let (dx, dy) = ((b[0] - a[0]) / seg, (b[1] - a[1]) / seg);
            let along = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy).max(T::zero()).min(seg);
            let q = [a[0] + dx * along, a[1] + dy * along];
            let d = dist(p, q);
            if d < best.offset {
                best = Projection {
                    s: self.cum[i] + along,
                    offset: d,
                };
            }
        }
        best
    }

    /// Closest point over the whole polyline.
    pub fn project(&self, p: Point<T>) -> Projection<T> {
        self.project_segments(p, 0, self.points.len() - 2)
    }

    /// Closest point restricted to arc lengths in `[s_lo, s_hi]` (segment granularity).
    pub fn project_window(&self, p: Point<T>, s_lo: T, s_hi: T) -> Projection<T> {
        let first = self.segment_at(s_lo.max(T::zero()));
        let last = self.segment_at(s_hi.min(self.length()));
        self.project_segments(p, first, last.max(first))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arc_length_queries() {
        let pl: Polyline<f64> = Polyline::new(vec![[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]]);
        assert_eq!(pl.length(), 7.0);
        assert_eq!(pl.point_at(5.0), [3.0, 2.0]);
        assert_eq!(pl.tangent_at(1.0), [1.0, 0.0]);
        assert_eq!(pl.point_at(9.0), [3.0, 6.0]);
        let pr = pl.project([4.0, 1.0]);
        assert_eq!((pr.s, pr.offset), (4.0, 1.0));
        let w = pl.project_window([4.0, 1.0], 0.0, 2.0);
        assert_eq!(w.s, 3.0);
    }

    #[test]
    fn angle_wrap() {
        use std::f64::consts::PI;
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-0.5f64) + 0.5).abs() < 1e-15);
    }
}
