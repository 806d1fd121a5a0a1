//! Scene assembly: observations, gate passing, collisions, and episode
//! bookkeeping.
//!
//! The world is deliberately dumb. Everything here is a pure function over a
//! generated [`TrackSpec`]; the trainer owns stepping and termination. All
//! observation values are detached numerics: gradients reach the policy
//! through the dynamics chain, never through the renderer.

pub mod raycast;
pub mod track;

pub use track::{
    gate_axes, generate_track, racing_line, ObstacleSpec, TrackFamily, TrackGeometry, TrackSpec,
};

use crate::dynamics::{rotation_from_r3, DroneState};
use crate::field::{GateShape, GateSpec};
use crate::{Error, Result, Vec3};
use raycast::Obb;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Depth camera and frustum constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
    pub depth_w: usize,
    pub depth_h: usize,
    pub depth_near: f64,
    pub depth_far: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            fov_h_deg: 87.0,
            fov_v_deg: 58.0,
            depth_w: 32,
            depth_h: 24,
            depth_near: 0.1,
            depth_far: 10.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_h_deg > 0.0 && self.fov_h_deg < 180.0 && self.fov_v_deg > 0.0 && self.fov_v_deg < 180.0) {
            return Err(Error::Config(format!(
                "world fov must lie in (0, 180), got {} x {}",
                self.fov_h_deg, self.fov_v_deg
            )));
        }
        if self.depth_w == 0 || self.depth_h == 0 {
            return Err(Error::Config("world depth image must be non-empty".into()));
        }
        if !(self.depth_near > 0.0 && self.depth_near < self.depth_far) {
            return Err(Error::Config(format!(
                "world depth clamp must satisfy 0 < near < far, got {}..{}",
                self.depth_near, self.depth_far
            )));
        }
        Ok(())
    }
}

/// Number of scalar state observations (velocity, attitude column, gate
/// offset, previous command).
pub const STATE_DIM: usize = 12;

/// One policy input frame. Values are raw SI units; the policy applies its
/// own input scaling. `depth` is row-major, row 0 at the top of the image,
/// and is `None` when the state-only policy is running so renders are not
/// wasted.
#[derive(Debug, Clone)]
pub struct Observation {
    pub v_body: Vec3,
    pub r3: Vec3,
    pub p_gate_body: Vec3,
    pub prev_cmd: Vec3,
    pub depth: Option<Vec<f64>>,
}

impl Observation {
    /// The 12 state scalars in input order.
    pub fn state_vector(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[0..3].copy_from_slice(self.v_body.as_slice());
        out[3..6].copy_from_slice(self.r3.as_slice());
        out[6..9].copy_from_slice(self.p_gate_body.as_slice());
        out[9..12].copy_from_slice(self.prev_cmd.as_slice());
        out
    }
}

/// Heading that points the body x-axis at the gate center, horizontally.
/// Directly above or below the gate the heading is left at zero.
pub fn yaw_toward(p: Vec3, gate_center: Vec3) -> f64 {
    let dx = gate_center.x - p.x;
    let dy = gate_center.y - p.y;
    if dx * dx + dy * dy < 1e-18 {
        0.0
    } else {
        dy.atan2(dx)
    }
}

/// The four frame bars of a gate as oriented boxes, sitting flush outside
/// the aperture. Circular gates get the circumscribing square frame.
pub fn gate_bars(g: &GateSpec, thickness: f64) -> [Obb; 4] {
    let axes = track::gate_axes(g);
    let t = thickness;
    let (w, h) = match g.shape {
        GateShape::Rect => (g.width, g.height),
        GateShape::Circle => (g.width, g.width),
    };
    let bar = |ly: f64, lz: f64, half: Vec3| Obb {
        center: g.center + axes * Vec3::new(0.0, ly, lz),
        axes,
        half,
    };
    [
        bar(0.5 * (w + t), 0.0, Vec3::new(0.5 * t, 0.5 * t, 0.5 * h + t)),
        bar(-0.5 * (w + t), 0.0, Vec3::new(0.5 * t, 0.5 * t, 0.5 * h + t)),
        bar(0.0, 0.5 * (h + t), Vec3::new(0.5 * t, 0.5 * w + t, 0.5 * t)),
        bar(0.0, -0.5 * (h + t), Vec3::new(0.5 * t, 0.5 * w + t, 0.5 * t)),
    ]
}

/// Render the depth image for a camera at `p` with body rotation `r`
/// (columns forward, left, up). Returns `depth_h * depth_w` Euclidean hit
/// distances clamped to the configured range; misses read as far.
///
/// Rays sample at `tan(fov/2) * (1 - 2 i / n)`, which puts the middle
/// row/column exactly on the optical axis.
pub fn render_depth(p: Vec3, r: &crate::Mat3, scene: &TrackSpec, cfg: &WorldConfig) -> Vec<f64> {
    let tan_h = (0.5 * cfg.fov_h_deg.to_radians()).tan();
    let tan_v = (0.5 * cfg.fov_v_deg.to_radians()).tan();
    let fwd = r.column(0).into_owned();
    let left = r.column(1).into_owned();
    let up = r.column(2).into_owned();
    let bars: Vec<Obb> =
        scene.gates.iter().flat_map(|g| gate_bars(g, scene.frame_thickness)).collect();
    let mut img = Vec::with_capacity(cfg.depth_h * cfg.depth_w);
    for row in 0..cfg.depth_h {
        let wv = tan_v * (1.0 - 2.0 * row as f64 / cfg.depth_h as f64);
        for col in 0..cfg.depth_w {
            let u = tan_h * (1.0 - 2.0 * col as f64 / cfg.depth_w as f64);
            let dir = fwd + left * u + up * wv;
            let dir = dir / dir.norm();
            let mut t_hit = f64::INFINITY;
            for ob in &scene.obstacles {
                let hit = match *ob {
                    ObstacleSpec::Sphere { center, radius } => raycast::ray_sphere(p, dir, center, radius),
                    ObstacleSpec::Cylinder { center, radius, height } => raycast::ray_cylinder(
                        p,
                        dir,
                        center.x,
                        center.y,
                        center.z - 0.5 * height,
                        center.z + 0.5 * height,
                        radius,
                    ),
                };
                if let Some(t) = hit {
                    t_hit = t_hit.min(t);
                }
            }
            for b in &bars {
                if let Some(t) = raycast::ray_obb(p, dir, b) {
                    t_hit = t_hit.min(t);
                }
            }
            img.push(if t_hit.is_finite() {
                t_hit.clamp(cfg.depth_near, cfg.depth_far)
            } else {
                cfg.depth_far
            });
        }
    }
    img
}

/// Assemble the policy observation at a state. `yaw` must be the same
/// heading handed to `dynamics::step` for the transition, so the observed
/// frame and the executed frame agree.
pub fn observe(
    state: &DroneState,
    scene: &TrackSpec,
    target_gate: usize,
    prev_cmd: Vec3,
    yaw: f64,
    cfg: &WorldConfig,
    with_depth: bool,
) -> Observation {
    assert!(target_gate < scene.gates.len(), "target gate {target_gate} out of range");
    let r = rotation_from_r3(state.r3, yaw);
    let rt = r.transpose();
    let gate = &scene.gates[target_gate];
    Observation {
        v_body: rt * state.v,
        r3: state.r3,
        p_gate_body: rt * (gate.center - state.p),
        prev_cmd,
        depth: with_depth.then(|| render_depth(state.p, &r, scene, cfg)),
    }
}

/// True iff the step segment crosses the gate plane along +normal with the
/// crossing point inside the aperture shrunk by `margin` on every side.
/// Strict sign at the start and inclusive at the end means a multi-step
/// trajectory fires exactly once per traversal.
pub fn check_gate_pass(p_prev: Vec3, p_next: Vec3, gate: &GateSpec, margin: f64) -> bool {
    let f = gate.normal.dot(&(p_prev - gate.center));
    let g = gate.normal.dot(&(p_next - gate.center));
    if !(f < 0.0 && g >= 0.0) {
        return false;
    }
    let t = f / (f - g);
    let q = p_prev + (p_next - p_prev) * t;
    let local = track::gate_axes(gate).transpose() * (q - gate.center);
    match gate.shape {
        GateShape::Rect => {
            local.y.abs() <= 0.5 * gate.width - margin && local.z.abs() <= 0.5 * gate.height - margin
        }
        GateShape::Circle => (local.y * local.y + local.z * local.z).sqrt() <= 0.5 * gate.width - margin,
    }
}

/// Clearance sentinel reported in an obstacle-free world.
pub const EMPTY_WORLD_DISTANCE: f64 = 100.0;

/// Nearest-obstacle query result. `dist` is signed (negative inside a
/// primitive), `nearest` is the closest surface point, `d = nearest - p`,
/// and `v_c` is the closing speed, floored at zero while receding.
#[derive(Debug, Clone, Copy)]
pub struct CollisionReport {
    pub collided: bool,
    pub dist: f64,
    pub nearest: Vec3,
    pub d: Vec3,
    pub v_c: f64,
}

/// Scan every obstacle and gate bar for the closest surface to `p`.
/// Ties between equidistant primitives resolve to the first in scan order
/// (obstacles, then gate bars in gate order), which is the documented jump
/// point of the nearest-offset field.
pub fn check_collision(p: Vec3, v: Vec3, scene: &TrackSpec, r_q: f64) -> CollisionReport {
    let mut dist = f64::INFINITY;
    let mut nearest = Vec3::zeros();
    let mut consider = |cand: (f64, Vec3)| {
        if cand.0 < dist {
            dist = cand.0;
            nearest = cand.1;
        }
    };
    for ob in &scene.obstacles {
        match *ob {
            ObstacleSpec::Sphere { center, radius } => {
                consider(raycast::nearest_on_sphere(p, center, radius))
            }
            ObstacleSpec::Cylinder { center, radius, height } => consider(raycast::nearest_on_cylinder(
                p,
                center.x,
                center.y,
                center.z - 0.5 * height,
                center.z + 0.5 * height,
                radius,
            )),
        }
    }
    for g in &scene.gates {
        for bar in gate_bars(g, scene.frame_thickness) {
            consider(raycast::nearest_on_obb(p, &bar));
        }
    }
    if !dist.is_finite() {
        let d = Vec3::new(EMPTY_WORLD_DISTANCE, 0.0, 0.0);
        return CollisionReport { collided: false, dist: EMPTY_WORLD_DISTANCE, nearest: p + d, d, v_c: 0.0 };
    }
    let d = nearest - p;
    let dn = d.norm();
    let v_c = if dn > 1e-12 { (v.dot(&d) / dn).max(0.0) } else { 0.0 };
    CollisionReport { collided: dist < r_q, dist, nearest, d, v_c }
}

/// Episode-level outcome flags and extremes.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub gates_passed: usize,
    pub collided: bool,
    /// All gates traversed and no collision.
    pub success_cross: bool,
    /// No collision.
    pub success: bool,
    pub v_max: f64,
    pub steps: usize,
}

/// One row of the exported trajectory.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub gate_idx: usize,
    pub collided: bool,
    pub reward: f64,
    pub loss_clear: f64,
    pub loss_collide: f64,
    pub loss_a: f64,
    pub loss_j: f64,
    pub loss_p: f64,
}

/// Write trajectory rows as CSV with the stable column set.
pub fn write_trajectory_csv<W: Write>(rows: &[StepLog], out: &mut W) -> Result<()> {
    writeln!(
        out,
        "t,px,py,pz,vx,vy,vz,ax,ay,az,gate_idx,collided,reward,loss_clear,loss_collide,loss_a,loss_j,loss_p"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.p.x,
            r.p.y,
            r.p.z,
            r.v.x,
            r.v.y,
            r.v.z,
            r.a.x,
            r.a.y,
            r.a.z,
            r.gate_idx,
            r.collided as u8,
            r.reward,
            r.loss_clear,
            r.loss_collide,
            r.loss_a,
            r.loss_j,
            r.loss_p
        )?;
    }
    Ok(())
}
