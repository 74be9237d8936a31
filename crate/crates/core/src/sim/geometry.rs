//! Planar geometry in the world frame (x east, y north, yaw counter-clockwise).

use crate::error::{Error, Result};

/// Arclength-parameterized polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
    cum: Vec<f64>,
}

/// Closest point on a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed offset, positive to the right of the direction of travel.
    pub lateral: f64,
}

impl Polyline {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Precondition("polyline needs at least two points".into()));
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            if !(d > 1e-9) {
                return Err(Error::Precondition("polyline has a degenerate segment".into()));
            }
            cum.push(cum.last().unwrap() + d);
        }
        Ok(Self { points, cum })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.cum.partition_point(|&c| c <= s);
        i.saturating_sub(1).min(self.points.len() - 2)
    }

    /// Point at arclength `s`, extrapolated linearly past either end.
    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let u = (s - self.cum[i]) / len;
        (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b.1 - a.1).atan2(b.0 - a.0)
    }

    /// Pose offset `lateral` meters to the right of the path at `s`.
    pub fn offset_point(&self, s: f64, lateral: f64) -> (f64, f64) {
        let (x, y) = self.point_at(s);
        let h = self.heading_at(s);
        (x + lateral * h.sin(), y - lateral * h.cos())
    }

    /// Closest point among segments overlapping `[s_lo, s_hi]`.
    pub fn project_window(&self, p: (f64, f64), s_lo: f64, s_hi: f64) -> Projection {
        let n = self.points.len() - 1;
        let first = self.segment_at(s_lo.max(0.0));
        let last = self.segment_at(s_hi.min(self.length())).max(first);
        let mut best = Projection {
            s: 0.0,
            lateral: f64::INFINITY,
        };
        let mut best_d = f64::INFINITY;
        for i in first..=last.min(n - 1) {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = self.cum[i + 1] - self.cum[i];
            let u = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (len * len)).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + u * dx, a.1 + u * dy);
            let d = (p.0 - qx).hypot(p.1 - qy);
            if d < best_d {
                best_d = d;
                let cross = dx * (p.1 - a.1) - dy * (p.0 - a.0);
                best = Projection {
                    s: self.cum[i] + u * len,
                    lateral: if cross > 0.0 { -d } else { d },
                };
            }
        }
        best
    }

    pub fn project(&self, p: (f64, f64)) -> Projection {
        self.project_window(p, 0.0, self.length())
    }
}

/// Oriented rectangle: center, heading, half extents along and across.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Rect {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (l, w) = (self.half_length, self.half_width);
        [(l, w), (l, -w), (-l, -w), (-l, w)].map(|(a, b)| (self.x + a * c - b * s, self.y + a * s + b * c))
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, other: &Rect) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        let axes = [self.yaw, self.yaw + std::f64::consts::FRAC_PI_2, other.yaw, other.yaw + std::f64::consts::FRAC_PI_2];
        axes.iter().all(|&t| {
            let (ux, uy) = (t.cos(), t.sin());
            let span = |cs: &[(f64, f64); 4]| {
                cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let v = p.0 * ux + p.1 * uy;
                    (lo.min(v), hi.max(v))
                })
            };
            let (a, b) = (span(&ca), span(&cb));
            a.1 >= b.0 && b.1 >= a.0
        })
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (p.0 - self.x, p.1 - self.y);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        (dx * c + dy * s).abs() <= self.half_length && (-dx * s + dy * c).abs() <= self.half_width
    }
}
