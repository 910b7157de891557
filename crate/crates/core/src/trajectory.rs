//! Setpoint streams sampled at the control rate.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::control::ReferencePoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Hover,
    Square,
    Figure8,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 3] = [TrajectoryKind::Hover, TrajectoryKind::Square, TrajectoryKind::Figure8];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Hover => "hover",
            TrajectoryKind::Square => "square",
            TrajectoryKind::Figure8 => "figure8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown trajectory '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub rate_hz: f64,
    pub speed_mps: f64,
    pub rise_m: f64,
    pub hover_hold_s: f64,
    /// Horizontal inset of hover corners and square vertices from the walls.
    pub inset_m: f64,
    pub ground_clearance_m: f64,
    pub cruise_height_m: f64,
    pub figure8_half_width_m: f64,
    pub figure8_half_height_m: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            rate_hz: 50.0,
            speed_mps: 0.3,
            rise_m: 0.5,
            hover_hold_s: 5.0,
            inset_m: 0.25,
            ground_clearance_m: 0.1,
            cruise_height_m: 0.5,
            figure8_half_width_m: 0.5,
            figure8_half_height_m: 0.4,
        }
    }
}

/// A segment of straight motion at constant speed, sampled from `from`
/// (exclusive) to `to` (inclusive).
fn push_line(out: &mut Vec<ReferencePoint>, from: Vector3<f64>, to: Vector3<f64>, speed: f64, dt: f64) {
    let delta = to - from;
    let length = delta.norm();
    if length == 0.0 {
        return;
    }
    let dir = delta / length;
    let steps = (length / (speed * dt)).ceil() as usize;
    for i in 1..=steps {
        let s = (i as f64 * speed * dt).min(length);
        let velocity = if i < steps { dir * speed } else { Vector3::zeros() };
        out.push(ReferencePoint { position: from + dir * s, velocity, ..Default::default() });
    }
}

fn push_hold(out: &mut Vec<ReferencePoint>, at: Vector3<f64>, seconds: f64, dt: f64) {
    let steps = (seconds / dt).round() as usize;
    out.extend(std::iter::repeat_n(ReferencePoint::hold(at), steps));
}

/// Hover corners in the order SW, SE, NE, NW.
pub fn hover_corners(volume: &Vector3<f64>, cfg: &TrajectoryConfig) -> [Vector2<f64>; 4] {
    let (lo, hi_x, hi_y) = (cfg.inset_m, volume.x - cfg.inset_m, volume.y - cfg.inset_m);
    [Vector2::new(lo, lo), Vector2::new(hi_x, lo), Vector2::new(hi_x, hi_y), Vector2::new(lo, hi_y)]
}

/// Rise, hold, and land at one corner.
pub fn hover(corner: Vector2<f64>, cfg: &TrajectoryConfig) -> Vec<ReferencePoint> {
    let dt = 1.0 / cfg.rate_hz;
    let ground = Vector3::new(corner.x, corner.y, cfg.ground_clearance_m);
    let top = ground + Vector3::new(0.0, 0.0, cfg.rise_m);
    let mut out = vec![ReferencePoint::hold(ground)];
    push_line(&mut out, ground, top, cfg.speed_mps, dt);
    push_hold(&mut out, top, cfg.hover_hold_s, dt);
    push_line(&mut out, top, ground, cfg.speed_mps, dt);
    out
}

/// Clockwise square from the south-west vertex at cruise height.
pub fn square(volume: &Vector3<f64>, cfg: &TrajectoryConfig) -> Vec<ReferencePoint> {
    let dt = 1.0 / cfg.rate_hz;
    let [sw, se, ne, nw] = hover_corners(volume, cfg).map(|c| Vector3::new(c.x, c.y, cfg.cruise_height_m));
    let mut out = vec![ReferencePoint::hold(sw)];
    for (a, b) in [(sw, nw), (nw, ne), (ne, se), (se, sw)] {
        push_line(&mut out, a, b, cfg.speed_mps, dt);
    }
    out
}

/// Lissajous figure-eight `(c_x + a sin φ, c_y + b sin 2φ)` traversed once at
/// constant arc-length speed.
pub fn figure8(volume: &Vector3<f64>, cfg: &TrajectoryConfig) -> Vec<ReferencePoint> {
    let dt = 1.0 / cfg.rate_hz;
    let (a, b) = (cfg.figure8_half_width_m, cfg.figure8_half_height_m);
    let center = Vector3::new(volume.x / 2.0, volume.y / 2.0, cfg.cruise_height_m);
    let pos = |phi: f64| center + Vector3::new(a * phi.sin(), b * (2.0 * phi).sin(), 0.0);
    let d1 = |phi: f64| Vector3::new(a * phi.cos(), 2.0 * b * (2.0 * phi).cos(), 0.0);
    let d2 = |phi: f64| Vector3::new(-a * phi.sin(), -4.0 * b * (2.0 * phi).sin(), 0.0);

    // Cumulative arc length on a fine grid, inverted by linear interpolation.
    let n = 20_000;
    let tau = std::f64::consts::TAU;
    let mut arc = Vec::with_capacity(n + 1);
    arc.push(0.0);
    for i in 1..=n {
        let (p0, p1) = (tau * (i - 1) as f64 / n as f64, tau * i as f64 / n as f64);
        let mid = d1(0.5 * (p0 + p1)).norm();
        arc.push(arc[i - 1] + mid * (p1 - p0));
    }
    let total = arc[n];
    let phi_at = |s: f64| -> f64 {
        let i = arc.partition_point(|&v| v < s).clamp(1, n);
        let frac = (s - arc[i - 1]) / (arc[i] - arc[i - 1]);
        tau * ((i - 1) as f64 + frac) / n as f64
    };

    let speed = cfg.speed_mps;
    let steps = (total / (speed * dt)).ceil() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let s = (i as f64 * speed * dt).min(total);
        let phi = phi_at(s);
        let (t1, t2) = (d1(phi), d2(phi));
        let g = t1.norm();
        let tangent = t1 / g;
        let curvature = (t2 - tangent * t2.dot(&tangent)) / (g * g);
        let moving = i < steps;
        out.push(ReferencePoint {
            position: pos(phi),
            velocity: if moving { tangent * speed } else { Vector3::zeros() },
            acceleration: if moving { curvature * speed * speed } else { Vector3::zeros() },
            yaw: 0.0,
        });
    }
    out
}

/// Every setpoint stream making up one trajectory class; hover contributes
/// one stream per corner.
pub fn streams(kind: TrajectoryKind, volume: &Vector3<f64>, cfg: &TrajectoryConfig) -> Vec<Vec<ReferencePoint>> {
    match kind {
        TrajectoryKind::Hover => hover_corners(volume, cfg).into_iter().map(|c| hover(c, cfg)).collect(),
        TrajectoryKind::Square => vec![square(volume, cfg)],
        TrajectoryKind::Figure8 => vec![figure8(volume, cfg)],
    }
}

/// Straight pass at constant speed between two points with holds at both
/// ends.
pub fn line_pass(start: Vector3<f64>, end: Vector3<f64>, speed: f64, hold_s: f64, rate_hz: f64) -> Vec<ReferencePoint> {
    let dt = 1.0 / rate_hz;
    let mut out = Vec::new();
    push_hold(&mut out, start, hold_s, dt);
    push_line(&mut out, start, end, speed, dt);
    push_hold(&mut out, end, hold_s, dt);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume() -> Vector3<f64> {
        Vector3::new(1.5, 1.5, 1.0)
    }

    fn inside(p: &Vector3<f64>) -> bool {
        let v = volume();
        (0.0..=v.x).contains(&p.x) && (0.0..=v.y).contains(&p.y) && (0.0..=v.z).contains(&p.z)
    }

    #[test]
    fn every_stream_stays_in_the_volume() {
        let cfg = TrajectoryConfig::default();
        for kind in TrajectoryKind::ALL {
            for s in streams(kind, &volume(), &cfg) {
                assert!(s.iter().all(|r| inside(&r.position)), "{kind:?}");
            }
        }
    }

    #[test]
    fn hover_rises_holds_and_lands() {
        let cfg = TrajectoryConfig::default();
        let s = hover(Vector2::new(0.25, 0.25), &cfg);
        let top = s.iter().map(|r| r.position.z).fold(0.0, f64::max);
        assert!((top - 0.6).abs() < 1e-12);
        let held = s.iter().filter(|r| (r.position.z - 0.6).abs() < 1e-12).count();
        assert!(held >= 250);
        assert!((s.last().unwrap().position.z - 0.1).abs() < 1e-12);
    }

    #[test]
    fn square_moves_at_constant_speed() {
        let cfg = TrajectoryConfig::default();
        let s = square(&volume(), &cfg);
        for w in s.windows(2) {
            let step = (w[1].position - w[0].position).norm();
            assert!(step <= 0.3 / 50.0 + 1e-12);
        }
        let length: f64 = s.windows(2).map(|w| (w[1].position - w[0].position).norm()).sum();
        assert!((length - 4.0).abs() < 1e-9);
    }

    #[test]
    fn figure8_is_arc_length_parameterized() {
        let cfg = TrajectoryConfig::default();
        let s = figure8(&volume(), &cfg);
        let steps: Vec<f64> = s.windows(2).map(|w| (w[1].position - w[0].position).norm()).collect();
        for d in &steps[..steps.len() - 1] {
            assert!((d - 0.006).abs() < 2e-5, "{d}");
        }
        assert!((s[0].position - s.last().unwrap().position).norm() < 0.01);
        for r in &s[..s.len() - 1] {
            assert!((r.velocity.norm() - 0.3).abs() < 1e-9);
            assert!(r.acceleration.dot(&r.velocity).abs() < 1e-9);
        }
    }

    #[test]
    fn parse_round_trips() {
        for k in TrajectoryKind::ALL {
            assert_eq!(TrajectoryKind::parse(k.name()).unwrap(), k);
        }
        assert!(TrajectoryKind::parse("circle").is_err());
    }
}
