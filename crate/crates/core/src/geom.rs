//! Small 2D geometry kit: vectors, poses, polylines, rectangle overlap.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is CCW of self.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Rotated 90 degrees clockwise (the "right hand" direction of a heading).
    pub fn perp_cw(self) -> Vec2 {
        Vec2::new(self.y, -self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Position plus heading (radians, CCW from +x).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(pos: Vec2, heading: f64) -> Self {
        Self { pos, heading }
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }

    pub fn right(&self) -> Vec2 {
        self.forward().perp_cw()
    }

    /// World point -> (lateral, forward) in this pose's frame.
    /// Lateral is positive to the right, forward along the heading.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let d = p - self.pos;
        Vec2::new(d.dot(self.right()), d.dot(self.forward()))
    }

    /// (lateral, forward) in this frame -> world point.
    pub fn to_world(&self, local: Vec2) -> Vec2 {
        self.pos + self.right().scale(local.x) + self.forward().scale(local.y)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Distance from point `p` to segment `ab`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab.scale(t))
}

/// True if segments `p1p2` and `q1q2` properly intersect or touch.
pub fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    let d1 = (q2 - q1).cross(p1 - q1);
    let d2 = (q2 - q1).cross(p2 - q1);
    let d3 = (p2 - p1).cross(q1 - p1);
    let d4 = (p2 - p1).cross(q2 - p1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Vec2, b: Vec2, c: Vec2, d: f64| {
        d == 0.0
            && c.x >= a.x.min(b.x)
            && c.x <= a.x.max(b.x)
            && c.y >= a.y.min(b.y)
            && c.y <= a.y.max(b.y)
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// Oriented rectangle: center pose plus (length along heading, width across).
#[derive(Clone, Copy, Debug)]
pub struct Obb {
    pub pose: Pose,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = self.pose.forward().scale(self.length * 0.5);
        let r = self.pose.right().scale(self.width * 0.5);
        let c = self.pose.pos;
        [c + f + r, c + f - r, c - f - r, c - f + r]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let l = self.pose.to_local(p);
        l.x.abs() <= self.width * 0.5 && l.y.abs() <= self.length * 0.5
    }

    /// Separating-axis overlap test for two oriented rectangles.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        let axes = [
            self.pose.forward(),
            self.pose.right(),
            other.pose.forward(),
            other.pose.right(),
        ];
        for axis in axes {
            let proj = |cs: &[Vec2; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for c in cs {
                    let v = c.dot(axis);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
        true
    }

    /// Minimum distance from a point to this rectangle (0 when inside).
    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        let l = self.pose.to_local(p);
        let dx = (l.x.abs() - self.width * 0.5).max(0.0);
        let dy = (l.y.abs() - self.length * 0.5).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }
}

/// Arc-length resampling of a polyline at (at most) `step` spacing.
/// Keeps the exact first and last points.
pub fn resample_polyline(points: &[Vec2], step: f64) -> Vec<Vec2> {
    assert!(points.len() >= 2 && step > 0.0);
    let total: f64 = points.windows(2).map(|w| w[0].dist(w[1])).sum();
    let n = (total / step).ceil().max(1.0) as usize;
    let spacing = total / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    out.push(points[0]);
    let mut seg = 0;
    let mut seg_start = 0.0;
    let mut seg_len = points[0].dist(points[1]);
    for i in 1..n {
        let target = spacing * i as f64;
        while target > seg_start + seg_len && seg + 2 < points.len() {
            seg_start += seg_len;
            seg += 1;
            seg_len = points[seg].dist(points[seg + 1]);
        }
        let t = if seg_len > 0.0 {
            ((target - seg_start) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(points[seg] + (points[seg + 1] - points[seg]).scale(t));
    }
    out.push(*points.last().unwrap());
    out
}

/// Quadratic Bezier sampled at `n` points (including both endpoints).
pub fn quadratic_bezier(a: Vec2, control: Vec2, b: Vec2, n: usize) -> Vec<Vec2> {
    assert!(n >= 2);
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let u = 1.0 - t;
            a.scale(u * u) + control.scale(2.0 * u * t) + b.scale(t * t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_frame_roundtrip() {
        let pose = Pose::new(Vec2::new(3.0, -2.0), 0.7);
        let p = Vec2::new(-1.5, 4.0);
        let back = pose.to_world(pose.to_local(p));
        assert!(p.dist(back) < 1e-12);
    }

    #[test]
    fn right_is_clockwise_of_forward() {
        let pose = Pose::new(Vec2::ZERO, std::f64::consts::FRAC_PI_2); // facing +y
        let r = pose.right();
        assert!((r.x - 1.0).abs() < 1e-12 && r.y.abs() < 1e-12);
    }

    #[test]
    fn obb_overlap_basic() {
        let a = Obb {
            pose: Pose::new(Vec2::ZERO, 0.0),
            length: 4.0,
            width: 2.0,
        };
        let b = Obb {
            pose: Pose::new(Vec2::new(3.0, 0.0), 0.0),
            length: 4.0,
            width: 2.0,
        };
        let c = Obb {
            pose: Pose::new(Vec2::new(10.0, 0.0), 0.0),
            length: 4.0,
            width: 2.0,
        };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
    }

    #[test]
    fn resample_spacing_bound() {
        let pts = vec![Vec2::ZERO, Vec2::new(10.0, 0.0), Vec2::new(10.0, 7.0)];
        let rs = resample_polyline(&pts, 2.0);
        for w in rs.windows(2) {
            assert!(w[0].dist(w[1]) <= 2.0 + 1e-9);
        }
        assert_eq!(rs[0], pts[0]);
        assert_eq!(*rs.last().unwrap(), *pts.last().unwrap());
    }

    #[test]
    fn wrap_angle_range() {
        for k in -10..10 {
            let a = wrap_angle(0.3 + k as f64 * std::f64::consts::TAU);
            assert!((a - 0.3).abs() < 1e-9);
        }
    }
}
