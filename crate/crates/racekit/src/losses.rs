//! Differentiable loss terms and the evaluation-only scalar reward.
//!
//! Every loss op records onto a tape and returns the scalar node; the caller
//! (the trainer) averages per-step terms over the survived horizon and feeds
//! the weighted total to `backward`. Detached quantities (closing speed in
//! the collision hinge, gate distance in the projection decay) pass through
//! an explicit `Detach` node so the gradient-free contract is testable
//! rather than implicit.
//!
//! The scalar reward mirrors the loss terms but is plain arithmetic over
//! detached step records; it is logged for comparability, never optimized.

use crate::tape::{NodeRef, Shape, Tape};
use crate::{Error, Result, Vec3};
use serde::{Deserialize, Serialize};

/// Weights and shape constants of the training loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Avoidance group weight (clearance + collision hinge).
    pub lambda_c: f64,
    /// Action magnitude weight.
    pub lambda_a: f64,
    /// Jerk weight.
    pub lambda_j: f64,
    /// Progress weight.
    pub lambda_p: f64,
    /// Clearance softplus scale.
    pub beta_1: f64,
    /// Clearance softplus sharpness.
    pub beta_2: f64,
    /// Safety radius (m): distances below this count as contact.
    pub r_q: f64,
    /// Projection (gate-plane deviation) weight, ablation arm.
    pub lambda_proj: f64,
    /// Projection decay rate with gate distance.
    pub beta_3: f64,
    /// Normalized-progress weight, ablation arm.
    pub lambda_p_norm: f64,
    /// Keep the clearance softplus argument increasing in distance. The
    /// default flips the sign so proximity is what gets penalized; this
    /// flag restores the literal published form for comparison runs.
    pub printed_clearance_form: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 3.0,
            lambda_a: 1e-2,
            lambda_j: 1e-3,
            lambda_p: 0.4,
            beta_1: 1.0,
            beta_2: 5.0,
            r_q: 0.2,
            lambda_proj: 3.0,
            beta_3: 0.5,
            lambda_p_norm: 1.6,
            printed_clearance_form: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_c", self.lambda_c),
            ("lambda_a", self.lambda_a),
            ("lambda_j", self.lambda_j),
            ("lambda_p", self.lambda_p),
            ("beta_1", self.beta_1),
            ("beta_2", self.beta_2),
            ("lambda_proj", self.lambda_proj),
            ("beta_3", self.beta_3),
            ("lambda_p_norm", self.lambda_p_norm),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("losses.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.r_q.is_finite() && self.r_q > 0.0) {
            return Err(Error::Config(format!("losses.r_q must be positive, got {}", self.r_q)));
        }
        Ok(())
    }
}

/// Weights of the logged scalar reward. Penalty weights are negative by
/// convention and validation enforces the signs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    /// Collision indicator weight (lambda_1).
    pub lambda_collision: f64,
    /// Clearance softplus weight (lambda_2).
    pub lambda_clearance: f64,
    /// Collision hinge weight (lambda_3).
    pub lambda_hinge: f64,
    /// Action magnitude weight (lambda_4).
    pub lambda_action: f64,
    /// Jerk weight (lambda_5).
    pub lambda_jerk: f64,
    /// Gate-pass indicator weight (lambda_6).
    pub lambda_pass: f64,
    /// Progress weight (lambda_7).
    pub lambda_progress: f64,
    /// Gate-pass indicator radius (m). `None` derives half the smaller
    /// aperture extent of the target gate.
    pub r_th: Option<f64>,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            lambda_collision: -30.0,
            lambda_clearance: -6.0,
            lambda_hinge: -3.0,
            lambda_action: -1e-2,
            lambda_jerk: -1e-3,
            lambda_pass: 110.0,
            lambda_progress: 0.4,
            r_th: None,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let penalties = [
            ("lambda_collision", self.lambda_collision),
            ("lambda_clearance", self.lambda_clearance),
            ("lambda_hinge", self.lambda_hinge),
            ("lambda_action", self.lambda_action),
            ("lambda_jerk", self.lambda_jerk),
        ];
        for (name, v) in penalties {
            if !(v.is_finite() && v <= 0.0) {
                return Err(Error::Config(format!("reward.{name} must be finite and <= 0, got {v}")));
            }
        }
        let bonuses = [("lambda_pass", self.lambda_pass), ("lambda_progress", self.lambda_progress)];
        for (name, v) in bonuses {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("reward.{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(r) = self.r_th {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config(format!("reward.r_th must be positive, got {r}")));
            }
        }
        Ok(())
    }

    /// Pass-indicator radius for a gate aperture.
    pub fn pass_radius(&self, gate_width: f64, gate_height: f64) -> f64 {
        self.r_th.unwrap_or(0.5 * gate_width.min(gate_height))
    }
}

/// Per-step obstacle clearance penalty, softplus-shaped around the safety
/// radius: `beta_1 * softplus(-beta_2 * (|d| - r_q))`, decreasing in
/// distance. The flagged variant keeps the argument sign positive.
pub fn clearance_loss(d_norm: NodeRef, w: &LossWeights, tape: &mut Tape) -> NodeRef {
    assert_eq!(d_norm.shape, Shape::Scalar, "clearance_loss wants a scalar distance");
    let sign = if w.printed_clearance_form { w.beta_2 } else { -w.beta_2 };
    let shifted = tape.add_const(d_norm, -w.r_q);
    let arg = tape.mul_const(shifted, sign);
    let sp = tape.softplus(arg);
    tape.mul_const(sp, w.beta_1)
}

/// Per-step collision hinge `v_c * max(1 - (|d| - r_q), 0)^2`. The closing
/// speed factor is detached on the spot, so no gradient reaches whatever
/// produced it.
pub fn collide_loss(d_norm: NodeRef, v_c: NodeRef, w: &LossWeights, tape: &mut Tape) -> NodeRef {
    assert_eq!(d_norm.shape, Shape::Scalar, "collide_loss wants a scalar distance");
    assert_eq!(v_c.shape, Shape::Scalar, "collide_loss wants a scalar closing speed");
    let vc = tape.detach(v_c);
    let shifted = tape.add_const(d_norm, -w.r_q);
    let neg = tape.mul_const(shifted, -1.0);
    let arg = tape.add_const(neg, 1.0);
    let hinge = tape.relu(arg);
    let sq = tape.mul(hinge, hinge);
    tape.mul(vc, sq)
}

/// Horizon-averaged action magnitude and jerk penalties over an executed
/// command sequence: `L_a = mean |a_k|^2`, `L_j = mean |(a_{k+1} - a_k)/dt|^2`
/// with one fewer term. Needs at least two commands for the jerk difference.
pub fn smoothness_losses(
    accels: &[NodeRef],
    dt: f64,
    tape: &mut Tape,
) -> Result<(NodeRef, NodeRef)> {
    if accels.len() < 2 {
        return Err(Error::Numeric(format!(
            "smoothness needs at least 2 commands, got {}",
            accels.len()
        )));
    }
    for a in accels {
        assert_eq!(a.shape, Shape::VEC3, "smoothness_losses wants vec3 commands");
    }
    let mags: Vec<NodeRef> = accels.iter().map(|&a| {
        let n = tape.norm(a);
        tape.mul(n, n)
    }).collect();
    let l_a = mean_scalar(&mags, tape);
    let jerks: Vec<NodeRef> = accels.windows(2).map(|pair| {
        let diff = tape.sub(pair[1], pair[0]);
        let rate = tape.mul_const(diff, 1.0 / dt);
        let n = tape.norm(rate);
        tape.mul(n, n)
    }).collect();
    let l_j = mean_scalar(&jerks, tape);
    Ok((l_a, l_j))
}

/// Per-step progress term `-(v . p_gate) / |p_gate|`: minimizing it
/// maximizes closing speed on the target gate. Both vectors live in the
/// body frame.
pub fn progress_loss(v_body: NodeRef, p_gate_body: NodeRef, tape: &mut Tape) -> Result<NodeRef> {
    assert_eq!(v_body.shape, Shape::VEC3, "progress_loss wants vec3 velocity");
    assert_eq!(p_gate_body.shape, Shape::VEC3, "progress_loss wants vec3 gate offset");
    if tape.value_vec3(p_gate_body).norm() == 0.0 {
        return Err(Error::Numeric("progress loss with zero gate offset".into()));
    }
    let dir = tape.normalize(p_gate_body);
    let closing = tape.dot(v_body, dir);
    Ok(tape.mul_const(closing, -1.0))
}

/// Speed floor below which the normalized progress term is dropped for the
/// step (the cosine's gradient blows up as 1/|v|).
pub const PROGRESS_NORM_V_FLOOR: f64 = 1e-6;

/// Scale-free heading term `-cos(angle(v, p_gate))`, the normalized ablation
/// of [`progress_loss`]. Steps slower than [`PROGRESS_NORM_V_FLOOR`]
/// contribute a zero constant instead.
pub fn progress_loss_normalized(
    v_body: NodeRef,
    p_gate_body: NodeRef,
    tape: &mut Tape,
) -> Result<NodeRef> {
    assert_eq!(v_body.shape, Shape::VEC3, "progress_loss_normalized wants vec3 velocity");
    assert_eq!(p_gate_body.shape, Shape::VEC3, "progress_loss_normalized wants vec3 gate offset");
    if tape.value_vec3(p_gate_body).norm() == 0.0 {
        return Err(Error::Numeric("normalized progress loss with zero gate offset".into()));
    }
    if tape.value_vec3(v_body).norm() <= PROGRESS_NORM_V_FLOOR {
        return Ok(tape.constant_scalar(0.0));
    }
    let v_dir = tape.normalize(v_body);
    let g_dir = tape.normalize(p_gate_body);
    let cos = tape.dot(v_dir, g_dir);
    Ok(tape.mul_const(cos, -1.0))
}

/// Per-step gate-plane deviation `|p_yz|^2 * exp(-beta_3 * d_gate)` with the
/// gate distance detached, so the decay envelope steers no gradient. The
/// input position is expressed in the gate frame with x along the normal.
pub fn projection_loss(
    p_gate_frame: NodeRef,
    d_gate: NodeRef,
    w: &LossWeights,
    tape: &mut Tape,
) -> NodeRef {
    assert_eq!(p_gate_frame.shape, Shape::VEC3, "projection_loss wants a vec3 gate-frame position");
    assert_eq!(d_gate.shape, Shape::Scalar, "projection_loss wants a scalar gate distance");
    let py = tape.select(p_gate_frame, 1);
    let pz = tape.select(p_gate_frame, 2);
    let py2 = tape.mul(py, py);
    let pz2 = tape.mul(pz, pz);
    let plane = tape.add(py2, pz2);
    let d = tape.detach(d_gate);
    let darg = tape.mul_const(d, -w.beta_3);
    let env = tape.exp(darg);
    tape.mul(plane, env)
}

/// Horizon-averaged component scalars ready for weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_clear: NodeRef,
    pub l_collide: NodeRef,
    pub l_a: NodeRef,
    pub l_j: NodeRef,
    pub l_p: NodeRef,
}

/// Weighted total `lambda_c (L_clear + L_collide) + lambda_a L_a +
/// lambda_j L_j + lambda_p L_p`. Component terms arrive already averaged.
pub fn total_loss(terms: &LossTerms, w: &LossWeights, tape: &mut Tape) -> NodeRef {
    let avoid = tape.add(terms.l_clear, terms.l_collide);
    let c = tape.mul_const(avoid, w.lambda_c);
    let a = tape.mul_const(terms.l_a, w.lambda_a);
    let j = tape.mul_const(terms.l_j, w.lambda_j);
    let p = tape.mul_const(terms.l_p, w.lambda_p);
    let s1 = tape.add(c, a);
    let s2 = tape.add(s1, j);
    tape.add(s2, p)
}

/// Mean of scalar nodes: `sum / n`. Panics on an empty slice.
pub fn mean_scalar(parts: &[NodeRef], tape: &mut Tape) -> NodeRef {
    assert!(!parts.is_empty(), "mean over zero terms");
    let sum = tape.sum_n(parts);
    tape.mul_const(sum, 1.0 / parts.len() as f64)
}

/// Detached per-step quantities the reward reads.
#[derive(Debug, Clone, Copy)]
pub struct RewardInputs {
    /// Distance to the nearest obstacle surface (m).
    pub d_norm: f64,
    /// Closing speed toward that obstacle (m/s), clamped at 0 by the caller
    /// when receding.
    pub v_c: f64,
    /// Executed command this step.
    pub accel: Vec3,
    /// Previous command, when there is one.
    pub prev_accel: Option<Vec3>,
    pub dt: f64,
    /// Body-frame velocity.
    pub v_body: Vec3,
    /// Body-frame offset to the target gate center.
    pub p_gate_body: Vec3,
    /// Pass-indicator radius for the current target gate.
    pub r_th: f64,
}

/// Logged scalar reward of one step: collision and gate-pass indicators plus
/// avoidance, smoothness, and progress shaping. The clearance piece follows
/// the same sign resolution as [`clearance_loss`].
pub fn step_reward(inp: &RewardInputs, rw: &RewardWeights, lw: &LossWeights) -> f64 {
    let mut r = 0.0;
    if inp.d_norm < lw.r_q {
        r += rw.lambda_collision;
    }
    let sign = if lw.printed_clearance_form { lw.beta_2 } else { -lw.beta_2 };
    r += rw.lambda_clearance * crate::tape::softplus(sign * (inp.d_norm - lw.r_q));
    let hinge = (1.0 - (inp.d_norm - lw.r_q)).max(0.0);
    r += rw.lambda_hinge * inp.v_c * hinge * hinge;
    r += rw.lambda_action * inp.accel.norm_squared();
    if let Some(prev) = inp.prev_accel {
        r += rw.lambda_jerk * ((inp.accel - prev) / inp.dt).norm_squared();
    }
    if inp.p_gate_body.norm() < inp.r_th {
        r += rw.lambda_pass;
    }
    let gn = inp.p_gate_body.norm();
    if gn > 0.0 {
        r += rw.lambda_progress * inp.v_body.dot(&inp.p_gate_body) / gn;
    }
    r
}
