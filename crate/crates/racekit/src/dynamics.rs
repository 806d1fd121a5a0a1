//! Point-mass quadrotor dynamics, recorded on the tape.
//!
//! State is (position, velocity, actuated acceleration); attitude is the
//! differential-flatness thrust direction `r3 = normalize(a_act + g*z_hat)`.
//! Commands are mass-normalized body-frame accelerations *excluding* gravity
//! (the platform is assumed gravity-compensated), so a zero command hovers.
//!
//! Every update is available in two forms that must agree bit for bit:
//! [`step`] records the computation on a [`Tape`] for BPTT, and
//! [`step_numeric`] evaluates the identical arithmetic on plain `f64`s (used
//! by the mismatched target plant and anywhere gradients are not needed).
//! The residual-model pipeline relies on this parity: replaying a recorded
//! episode through the tape must reproduce the numeric trajectory exactly.

use crate::tape::{NodeRef, Tape};
use crate::{Error, Mat3, Result, Vec3};
use serde::{Deserialize, Serialize};

/// Physical constants of the nominal plant. Defaults model a 30 Hz
/// desk-scale racer: first-order actuation lag of 50 ms, linear drag,
/// 12 m/s^2 of commandable net acceleration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Integration step (s).
    pub dt: f64,
    /// Actuation lag time constant (s).
    pub tau_act: f64,
    /// Linear drag coefficient (1/s).
    pub drag_coeff: f64,
    /// Gravitational acceleration (m/s^2), used only for attitude.
    pub gravity: f64,
    /// Command magnitude ceiling (m/s^2).
    pub a_max: f64,
    /// Softness of the smooth command clamp (m/s^2). Smaller tracks the hard
    /// clamp more closely; must stay positive so the clamp is C^1.
    pub clamp_softness: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            dt: 1.0 / 30.0,
            tau_act: 0.05,
            drag_coeff: 0.3,
            gravity: 9.81,
            a_max: 12.0,
            clamp_softness: 0.1,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("dt", self.dt),
            ("tau_act", self.tau_act),
            ("gravity", self.gravity),
            ("a_max", self.a_max),
            ("clamp_softness", self.clamp_softness),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("dynamics.{name} must be positive, got {v}")));
            }
        }
        if !(self.drag_coeff.is_finite() && self.drag_coeff >= 0.0) {
            return Err(Error::Config(format!(
                "dynamics.drag_coeff must be non-negative, got {}",
                self.drag_coeff
            )));
        }
        Ok(())
    }

    fn dt_over_tau(&self) -> f64 {
        self.dt / self.tau_act
    }

    fn half_dt2(&self) -> f64 {
        self.dt * self.dt * 0.5
    }
}

/// Numeric drone state. `r3` is derived from `a_act` but cached because the
/// observation and rotation code read it every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneState {
    pub p: Vec3,
    pub v: Vec3,
    pub a_act: Vec3,
    pub r3: Vec3,
}

impl DroneState {
    /// At rest: hovering upright with settled actuation.
    pub fn at_rest(p: Vec3) -> Self {
        DroneState { p, v: Vec3::zeros(), a_act: Vec3::zeros(), r3: Vec3::new(0.0, 0.0, 1.0) }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.a_act.iter()).all(|v| v.is_finite())
    }
}

/// Tape handles for one step's state. `r3` is the node recorded by the most
/// recent [`step`] (or the initial constant).
#[derive(Debug, Clone, Copy)]
pub struct TapeState {
    pub p: NodeRef,
    pub v: NodeRef,
    pub a_act: NodeRef,
    pub r3: NodeRef,
}

/// Record the initial state as constant leaves (initial conditions are data,
/// not parameters).
pub fn init_tape_state(tape: &mut Tape, s: &DroneState) -> TapeState {
    TapeState {
        p: tape.constant_vec3(s.p),
        v: tape.constant_vec3(s.v),
        a_act: tape.constant_vec3(s.a_act),
        r3: tape.constant_vec3(s.r3),
    }
}

/// Read the numeric state back out of the tape.
pub fn read_tape_state(tape: &Tape, ts: &TapeState) -> DroneState {
    DroneState {
        p: tape.value_vec3(ts.p),
        v: tape.value_vec3(ts.v),
        a_act: tape.value_vec3(ts.a_act),
        r3: tape.value_vec3(ts.r3),
    }
}

// Norm with the same association order as the tape's Norm op, so the numeric
// twin stays bit-identical.
fn norm3(v: Vec3) -> f64 {
    ((v.x * v.x + v.y * v.y) + v.z * v.z).sqrt()
}

const NORMALIZE_FLOOR: f64 = 1e-300;

fn normalize3(v: Vec3) -> Vec3 {
    let n = norm3(v).max(NORMALIZE_FLOOR);
    Vec3::new(v.x / n, v.y / n, v.z / n)
}

/// Smooth command clamp `u * a_max / smax(a_max, ||u||)` where `smax` is the
/// softened maximum `0.5 * (a + b + sqrt((b - a)^2 + softness^2))`. Inside
/// the ceiling the factor is within `softness^2 / (4 a_max^2)` of one;
/// far outside it asymptotes to a hard magnitude clamp.
pub fn clamp_command(u: Vec3, cfg: &DynamicsConfig) -> Vec3 {
    let s = norm3(u);
    let d1 = s + -cfg.a_max;
    let d4 = (d1 * d1 + cfg.clamp_softness * cfg.clamp_softness).sqrt();
    let smax = ((s + cfg.a_max) + d4) * 0.5;
    let factor = cfg.a_max / smax;
    Vec3::new(u.x * factor, u.y * factor, u.z * factor)
}

pub fn clamp_command_tape(tape: &mut Tape, u: NodeRef, cfg: &DynamicsConfig) -> NodeRef {
    let s = tape.norm(u);
    let d1 = tape.add_const(s, -cfg.a_max);
    let d2 = tape.mul(d1, d1);
    let d3 = tape.add_const(d2, cfg.clamp_softness * cfg.clamp_softness);
    let d4 = tape.sqrt(d3);
    let d5 = tape.add_const(s, cfg.a_max);
    let d6 = tape.add(d5, d4);
    let smax = tape.mul_const(d6, 0.5);
    let amax = tape.constant_scalar(cfg.a_max);
    let factor = tape.div(amax, smax);
    tape.scale_vec(u, factor)
}

/// Body-to-world rotation from the thrust axis and a yaw heading. Columns are
/// the body axes in world frame; column 3 is `r3` exactly on the primary
/// path.
///
/// Degenerate inputs are closed deterministically:
/// * `r3` antiparallel to z_hat falls back to the inverted yaw frame
///   `[x=(cos,sin,0), y=(sin,-cos,0), z=-z_hat]`;
/// * `r3` parallel to the heading (horizontal thrust along yaw) falls back to
///   `z_hat` as the cross reference.
pub fn rotation_from_r3(r3: Vec3, yaw: f64) -> Mat3 {
    let xc = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    if r3.z < -1.0 + 1e-12 {
        return Mat3::from_columns(&[
            Vec3::new(xc.x, xc.y, 0.0),
            Vec3::new(xc.y, -xc.x, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
        ]);
    }
    let mut y_raw = cross3(r3, xc);
    if norm3(y_raw) < 1e-9 {
        y_raw = cross3(r3, Vec3::new(0.0, 0.0, 1.0));
    }
    let y_b = normalize3(y_raw);
    let x_b = cross3(y_b, r3);
    Mat3::from_columns(&[x_b, y_b, r3])
}

// Cross product with the tape op's exact expression order.
fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    Vec3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
}

/// One tape-recorded dynamics step. Calls [`Tape::mark_step`] once, carries
/// the previous state across the boundary, and records the full update so
/// gradients flow to both the command and (decayed) the previous state.
///
/// `yaw` is the heading used to complete the body frame; it comes from the
/// world targeting code and is treated as a constant (detached) per step.
pub fn step(tape: &mut Tape, prev: &TapeState, cmd: NodeRef, yaw: f64, cfg: &DynamicsConfig) -> TapeState {
    tape.mark_step();
    let p = tape.carry(prev.p);
    let v = tape.carry(prev.v);
    let a_act = tape.carry(prev.a_act);

    let u_c = clamp_command_tape(tape, cmd, cfg);

    // Current attitude from the carried actuation state.
    let gvec = tape.constant_vec3(Vec3::new(0.0, 0.0, cfg.gravity));
    let thrust = tape.add(a_act, gvec);
    let r3 = tape.normalize(thrust);

    // Body frame completion mirrors rotation_from_r3, with the same
    // deterministic closures at the degenerate inputs (branching happens on
    // detached numeric values; the chosen branch stays differentiable).
    let r3_val = tape.value_vec3(r3);
    let xc = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let (x_b, y_b, z_b): (NodeRef, NodeRef, NodeRef) = if r3_val.z < -1.0 + 1e-12 {
        let xb = tape.constant_vec3(Vec3::new(xc.x, xc.y, 0.0));
        let yb = tape.constant_vec3(Vec3::new(xc.y, -xc.x, 0.0));
        let zb = tape.constant_vec3(Vec3::new(0.0, 0.0, -1.0));
        (xb, yb, zb)
    } else {
        let xc_n = tape.constant_vec3(xc);
        let mut y_raw = tape.cross(r3, xc_n);
        if norm3(tape.value_vec3(y_raw)) < 1e-9 {
            let zhat = tape.constant_vec3(Vec3::new(0.0, 0.0, 1.0));
            y_raw = tape.cross(r3, zhat);
        }
        let y_b = tape.normalize(y_raw);
        let x_b = tape.cross(y_b, r3);
        (x_b, y_b, r3)
    };

    // World-frame commanded acceleration a_w = R * u_c.
    let u0 = tape.select(u_c, 0);
    let u1 = tape.select(u_c, 1);
    let u2 = tape.select(u_c, 2);
    let t0 = tape.scale_vec(x_b, u0);
    let t1 = tape.scale_vec(y_b, u1);
    let t2 = tape.scale_vec(z_b, u2);
    let a_w = tape.sum_n(&[t0, t1, t2]);

    // First-order actuation lag toward a_w.
    let lag_diff = tape.sub(a_w, a_act);
    let lag_step = tape.mul_const(lag_diff, cfg.dt_over_tau());
    let a_act_new = tape.add(a_act, lag_step);

    // Net translational acceleration (gravity is compensated by convention).
    let drag_v = tape.mul_const(v, cfg.drag_coeff);
    let a_net = tape.sub(a_act_new, drag_v);

    let dv = tape.mul_const(a_net, cfg.dt);
    let v_new = tape.add(v, dv);

    let pv = tape.mul_const(v, cfg.dt);
    let p_mid = tape.add(p, pv);
    let p_acc = tape.mul_const(a_net, cfg.half_dt2());
    let p_new = tape.add(p_mid, p_acc);

    let thrust_new = tape.add(a_act_new, gvec);
    let r3_new = tape.normalize(thrust_new);

    TapeState { p: p_new, v: v_new, a_act: a_act_new, r3: r3_new }
}

/// Numeric twin of [`step`]. `a_w_scale` multiplies the world-frame command
/// response (1.0 for the nominal plant; the mismatched target uses it for
/// mass error). Arithmetic order matches the tape ops exactly so nominal
/// trajectories are bit-identical across the two paths.
pub fn step_numeric_scaled(
    state: &DroneState,
    cmd: Vec3,
    yaw: f64,
    cfg: &DynamicsConfig,
    a_w_scale: f64,
) -> DroneState {
    let u_c = clamp_command(cmd, cfg);
    let thrust = state.a_act + Vec3::new(0.0, 0.0, cfg.gravity);
    let r3 = normalize3(thrust);

    let xc = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let (x_b, y_b, z_b) = if r3.z < -1.0 + 1e-12 {
        (Vec3::new(xc.x, xc.y, 0.0), Vec3::new(xc.y, -xc.x, 0.0), Vec3::new(0.0, 0.0, -1.0))
    } else {
        let mut y_raw = cross3(r3, xc);
        if norm3(y_raw) < 1e-9 {
            y_raw = cross3(r3, Vec3::new(0.0, 0.0, 1.0));
        }
        let y_b = normalize3(y_raw);
        let x_b = cross3(y_b, r3);
        (x_b, y_b, r3)
    };

    let a_w = Vec3::new(
        ((x_b.x * u_c.x + y_b.x * u_c.y) + z_b.x * u_c.z) * a_w_scale,
        ((x_b.y * u_c.x + y_b.y * u_c.y) + z_b.y * u_c.z) * a_w_scale,
        ((x_b.z * u_c.x + y_b.z * u_c.y) + z_b.z * u_c.z) * a_w_scale,
    );

    let k = cfg.dt_over_tau();
    let a_act_new = Vec3::new(
        state.a_act.x + (a_w.x - state.a_act.x) * k,
        state.a_act.y + (a_w.y - state.a_act.y) * k,
        state.a_act.z + (a_w.z - state.a_act.z) * k,
    );
    let a_net = Vec3::new(
        a_act_new.x - state.v.x * cfg.drag_coeff,
        a_act_new.y - state.v.y * cfg.drag_coeff,
        a_act_new.z - state.v.z * cfg.drag_coeff,
    );
    let v_new = Vec3::new(
        state.v.x + a_net.x * cfg.dt,
        state.v.y + a_net.y * cfg.dt,
        state.v.z + a_net.z * cfg.dt,
    );
    let c2 = cfg.half_dt2();
    let p_new = Vec3::new(
        (state.p.x + state.v.x * cfg.dt) + a_net.x * c2,
        (state.p.y + state.v.y * cfg.dt) + a_net.y * c2,
        (state.p.z + state.v.z * cfg.dt) + a_net.z * c2,
    );
    let r3_new = normalize3(a_act_new + Vec3::new(0.0, 0.0, cfg.gravity));
    DroneState { p: p_new, v: v_new, a_act: a_act_new, r3: r3_new }
}

/// Nominal numeric step (no response scaling).
pub fn step_numeric(state: &DroneState, cmd: Vec3, yaw: f64, cfg: &DynamicsConfig) -> DroneState {
    step_numeric_scaled(state, cmd, yaw, cfg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{grad_fd, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DynamicsConfig {
        DynamicsConfig::default()
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let c = cfg();
        let s0 = DroneState::at_rest(Vec3::new(1.0, -2.0, 1.5));
        let s1 = step_numeric(&s0, Vec3::zeros(), 0.7, &c);
        assert_eq!(s1.p, s0.p);
        assert_eq!(s1.v, Vec3::zeros());
        assert_eq!(s1.a_act, Vec3::zeros());
        assert_eq!(s1.r3, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn clamp_preserves_small_commands_and_caps_large_ones() {
        let c = cfg();
        let small = Vec3::new(1.0, -2.0, 0.5);
        let clamped = clamp_command(small, &c);
        // Inside the ceiling the relative shrink is bounded by
        // softness^2 / (4 a_max^2) plus the corner rounding.
        assert!((clamped - small).norm() < 2e-4 * small.norm());
        let huge = Vec3::new(300.0, -400.0, 120.0);
        let ch = clamp_command(huge, &c);
        assert!(ch.norm() <= c.a_max * 1.0000001);
        assert!(ch.norm() > c.a_max * 0.95);
        // Direction is preserved.
        assert!(ch.normalize().dot(&huge.normalize()) > 1.0 - 1e-12);
        assert_eq!(clamp_command(Vec3::zeros(), &c), Vec3::zeros());
    }

    #[test]
    fn rotation_is_orthonormal_with_r3_third_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let a = Vec3::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
            );
            let r3 = normalize3(a + Vec3::new(0.0, 0.0, 9.81));
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let r = rotation_from_r3(r3, yaw);
            let should_be_eye = r.transpose() * r;
            assert!((should_be_eye - Mat3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.column(2) - r3).norm() < 1e-15);
        }
    }

    #[test]
    fn rotation_closes_degenerate_inputs() {
        // Antiparallel thrust axis: inverted yaw frame, still orthonormal.
        let r = rotation_from_r3(Vec3::new(0.0, 0.0, -1.0), 0.3);
        assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
        assert!((r.column(2) - Vec3::new(0.0, 0.0, -1.0)).norm() == 0.0);
        // Thrust along the heading: z_hat reference keeps the frame finite.
        let r2 = rotation_from_r3(Vec3::new(1.0, 0.0, 0.0), 0.0);
        assert!((r2.transpose() * r2 - Mat3::identity()).norm() < 1e-12);
        assert!(r2.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tape_and_numeric_steps_agree_bit_for_bit() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sn = DroneState::at_rest(Vec3::new(0.0, 0.0, 1.5));
        let mut tape = Tape::new((-3.0f64 * c.dt).exp());
        let mut ts = init_tape_state(&mut tape, &sn);
        for k in 0..200 {
            let cmd = Vec3::new(
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
            );
            let yaw = rng.gen_range(-3.0..3.0);
            let cmd_node = tape.constant_vec3(cmd);
            ts = step(&mut tape, &ts, cmd_node, yaw, &c);
            sn = step_numeric(&sn, cmd, yaw, &c);
            let st = read_tape_state(&tape, &ts);
            for i in 0..3 {
                assert_eq!(st.p[i].to_bits(), sn.p[i].to_bits(), "p[{i}] step {k}");
                assert_eq!(st.v[i].to_bits(), sn.v[i].to_bits(), "v[{i}] step {k}");
                assert_eq!(st.a_act[i].to_bits(), sn.a_act[i].to_bits(), "a_act[{i}] step {k}");
                assert_eq!(st.r3[i].to_bits(), sn.r3[i].to_bits(), "r3[{i}] step {k}");
            }
        }
    }

    // Five-step rollout, loss = probe . p_final: gradients w.r.t. every
    // command coordinate must match central differences (undecayed tape).
    #[test]
    fn multi_step_gradients_match_finite_differences() {
        let c = cfg();
        let probe = Vec3::new(0.7, -1.1, 0.4);
        let yaws = [0.1, -0.2, 0.05, 0.3, -0.15];
        let run = |flat: &[f64]| -> (Tape, Vec<NodeRef>, NodeRef) {
            let mut tape = Tape::new(1.0);
            let s0 = DroneState::at_rest(Vec3::new(0.0, 0.0, 1.5));
            let mut ts = init_tape_state(&mut tape, &s0);
            let mut cmds = Vec::new();
            for k in 0..5 {
                let cmd = tape.param(&flat[3 * k..3 * k + 3]);
                cmds.push(cmd);
                ts = step(&mut tape, &ts, cmd, yaws[k], &c);
            }
            let pr = tape.constant_vec3(probe);
            let loss = tape.dot(ts.p, pr);
            (tape, cmds, loss)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let flat: Vec<f64> = (0..15).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let fd = grad_fd(
            |x: &[f64]| {
                let (tape, _, loss) = run(x);
                tape.value_scalar(loss)
            },
            &flat,
            1e-5,
        );
        let (tape, cmds, loss) = run(&flat);
        let g = tape.backward(loss, &[]);
        for k in 0..5 {
            for i in 0..3 {
                let got = g.get(cmds[k])[i];
                let want = fd[3 * k + i];
                assert!(
                    rel_err(got, want) < 1e-6,
                    "cmd {k} coord {i}: tape {got} vs fd {want}"
                );
            }
        }
    }

    // With decay d, a command's influence on a loss k steps later must scale
    // by exactly d^(k-1): every path from the post-command state to the loss
    // crosses k-1 carry boundaries.
    #[test]
    fn decay_scales_command_gradients_geometrically() {
        let c = cfg();
        let run = |decay: f64| -> Vec<f64> {
            let mut tape = Tape::new(decay);
            let s0 = DroneState::at_rest(Vec3::zeros());
            let mut ts = init_tape_state(&mut tape, &s0);
            let mut cmds = Vec::new();
            for _ in 0..3 {
                let cmd = tape.constant_vec3(Vec3::new(2.0, -1.0, 0.5));
                cmds.push(cmd);
                ts = step(&mut tape, &ts, cmd, 0.0, &c);
            }
            let probe = tape.constant_vec3(Vec3::new(1.0, 1.0, 1.0));
            let loss = tape.dot(ts.p, probe);
            let g = tape.backward(loss, &[]);
            cmds.iter().flat_map(|&cm| g.get(cm).to_vec()).collect()
        };
        let g1 = run(1.0);
        let gd = run(0.8);
        // Command at step k (0-based) feels (2-k) boundaries.
        for k in 0..3 {
            let scale = 0.8f64.powi(2 - k as i32);
            for i in 0..3 {
                let a = gd[3 * k + i];
                let b = g1[3 * k + i] * scale;
                assert!(
                    rel_err(a, b) < 1e-12,
                    "cmd {k} coord {i}: decayed {a} vs scaled {b}"
                );
            }
        }
    }

    #[test]
    fn config_validation_rejects_nonpositive_dt() {
        let mut c = cfg();
        c.dt = 0.0;
        assert!(c.validate().is_err());
        c.dt = f64::NAN;
        assert!(c.validate().is_err());
    }
}
