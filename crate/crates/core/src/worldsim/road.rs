#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Two-lane road: straight along +x up to `turn_start`, then a constant
/// curvature arc through `turn_angle`, then straight again.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub turn_start: f64,
    /// Signed curvature (1/m), positive turns left. Zero means straight.
    pub curvature: f64,
    pub turn_angle: f64,
    pub lane_width: f64,
    pub lanes: usize,
}

/// Point on the road centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Road {
    pub fn straight(lane_width: f64) -> Self {
        Self {
            turn_start: f64::INFINITY,
            curvature: 0.0,
            turn_angle: 0.0,
            lane_width,
            lanes: 2,
        }
    }

    pub fn half_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width / 2.0
    }

    fn has_turn(&self) -> bool {
        self.curvature != 0.0 && self.turn_start.is_finite() && self.turn_angle > 0.0
    }

    fn turn_end(&self) -> f64 {
        self.turn_start + self.turn_angle / self.curvature.abs()
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        if self.has_turn() && s >= self.turn_start && s < self.turn_end() {
            self.curvature
        } else {
            0.0
        }
    }

    pub fn center(&self, s: f64) -> CenterPoint {
        if !self.has_turn() || s <= self.turn_start {
            return CenterPoint { x: s, y: 0.0, heading: 0.0 };
        }
        let k = self.curvature;
        let r = 1.0 / k;
        let arc = |phi: f64| CenterPoint {
            x: self.turn_start + r * phi.sin(),
            y: r * (1.0 - phi.cos()),
            heading: phi,
        };
        let s1 = self.turn_end();
        if s <= s1 {
            return arc(k * (s - self.turn_start));
        }
        let e = arc(k * (s1 - self.turn_start));
        let ds = s - s1;
        CenterPoint {
            x: e.x + ds * e.heading.cos(),
            y: e.y + ds * e.heading.sin(),
            heading: e.heading,
        }
    }

    /// World position at arc length `s` and lateral offset `d` (left positive).
    pub fn point(&self, s: f64, d: f64) -> (f64, f64) {
        let c = self.center(s);
        (c.x - d * c.heading.sin(), c.y + d * c.heading.cos())
    }

    /// Road coordinates `(s, d)` of a world point: the nearest centerline piece.
    pub fn project(&self, px: f64, py: f64) -> (f64, f64) {
        if !self.has_turn() {
            return (px, py);
        }
        let s0 = self.turn_start;
        let mut best = (f64::INFINITY, 0.0, 0.0); // (|d| or distance, s, d)
        let mut consider = |dist: f64, s: f64, d: f64| {
            if dist < best.0 {
                best = (dist, s, d);
            }
        };
        // straight lead-in
        if px <= s0 {
            consider(py.abs(), px, py);
        } else {
            consider((px - s0).hypot(py), s0, py);
        }
        // arc
        let k = self.curvature;
        let r = 1.0 / k;
        let (rx, ry) = (px - s0, py - r);
        let (ux, uy) = (rx / r, ry / r);
        let phi = ux.atan2(-uy);
        let s = s0 + phi / k;
        if s >= s0 && s <= self.turn_end() {
            let d = k.signum() * (r.abs() - rx.hypot(ry));
            consider(d.abs(), s, d);
        }
        // straight exit
        let s1 = self.turn_end();
        let e = self.center(s1);
        let (dx, dy) = (px - e.x, py - e.y);
        let (c, sn) = (e.heading.cos(), e.heading.sin());
        let along = dx * c + dy * sn;
        let lat = -dx * sn + dy * c;
        if along >= 0.0 {
            consider(lat.abs(), s1 + along, lat);
        }
        (best.1, best.2)
    }
}
