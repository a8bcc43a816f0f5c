//! Planar geometry primitives: points, polylines, segment intersection.
//!
//! Everything works in the local ENU frame centered on the intersection,
//! with x east and y north, in meters.

use serde::{Deserialize, Serialize};

pub const TAU: f64 = std::f64::consts::TAU;

/// Wraps an angle into `[0, 2*pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r >= TAU {
        r = 0.0;
    }
    r
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_diff(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > std::f64::consts::PI {
        r -= TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// True when segments `[a1,a2]` and `[b1,b2]` share at least one point,
/// endpoints included.
pub fn segments_intersect(a1: Point, a2: Point, b1: Point, b2: Point) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);

    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1.abs() < 1e-12 && on_segment(b1, b2, a1))
        || (d2.abs() < 1e-12 && on_segment(b1, b2, a2))
        || (d3.abs() < 1e-12 && on_segment(a1, a2, b1))
        || (d4.abs() < 1e-12 && on_segment(a1, a2, b2))
}

/// An open polyline with arc-length addressing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<Point>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least two points");
        Self { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }

    /// Position at arc length `s`, clamped to the polyline extent.
    pub fn point_at(&self, s: f64) -> Point {
        let mut rem = s.max(0.0);
        for w in self.points.windows(2) {
            let seg = w[0].dist(&w[1]);
            if rem <= seg || seg == 0.0 {
                if seg == 0.0 {
                    continue;
                }
                let t = rem / seg;
                return Point::new(
                    w[0].x + (w[1].x - w[0].x) * t,
                    w[0].y + (w[1].y - w[0].y) * t,
                );
            }
            rem -= seg;
        }
        *self.points.last().unwrap()
    }

    /// Heading of the segment containing arc length `s`, wrapped to `[0, 2pi)`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let mut rem = s.max(0.0);
        for w in self.points.windows(2) {
            let seg = w[0].dist(&w[1]);
            if seg == 0.0 {
                continue;
            }
            if rem <= seg {
                return wrap_angle((w[1].y - w[0].y).atan2(w[1].x - w[0].x));
            }
            rem -= seg;
        }
        let w = &self.points[self.points.len() - 2..];
        wrap_angle((w[1].y - w[0].y).atan2(w[1].x - w[0].x))
    }

    /// Sub-polyline between arc lengths `s0` and `s1`.
    pub fn clipped(&self, s0: f64, s1: f64) -> Polyline {
        let (s0, s1) = (s0.max(0.0), s1.min(self.length()));
        let mut pts = vec![self.point_at(s0)];
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let seg = w[0].dist(&w[1]);
            let end = acc + seg;
            if end > s0 && end < s1 {
                pts.push(w[1]);
            }
            acc = end;
        }
        pts.push(self.point_at(s1));
        Polyline::new(pts)
    }

    /// True when any segment of `self` touches any segment of `other`.
    pub fn crosses(&self, other: &Polyline) -> bool {
        for a in self.points.windows(2) {
            for b in other.points.windows(2) {
                if segments_intersect(a[0], a[1], b[0], b[1]) {
                    return true;
                }
            }
        }
        false
    }
}
