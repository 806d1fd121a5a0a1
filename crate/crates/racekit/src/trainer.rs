//! Rollout-and-update loop: BPTT through the point-mass dynamics with the
//! gate fields injected into the position-gradient channel.
//!
//! Each iteration rolls the policy through a fixed horizon on one tape per
//! environment, evaluating per-step losses at the post-step state. While the
//! drone flies, the attractive field u_A is sampled numerically at every
//! visited state and stored as a pending injection for that state's position
//! node. The backward pass then sees the effective position gradient
//! (grad_p L - u_A); with the field disabled the update is plain BPTT,
//! bit for bit. Gradients are averaged over environments in fixed order,
//! global-norm clipped, and applied with Adam. u_A is deliberately NOT
//! rescaled against the loss gradient; its magnitude is governed entirely by
//! the field constants.
//!
//! Episodes are one BPTT window: no gradient flows across update boundaries.

use crate::dynamics::{
    init_tape_state, read_tape_state, rotation_from_r3, step, step_numeric, DroneState,
    DynamicsConfig,
};
use crate::field::{attractive_field, FieldConfig};
use crate::losses::{
    clearance_loss, collide_loss, mean_scalar, progress_loss, progress_loss_normalized,
    projection_loss, smoothness_losses, step_reward, total_loss, LossTerms, LossWeights,
    RewardInputs, RewardWeights,
};
use crate::policy::{delta_forward, policy_forward, BoundParams, ParamSet, PolicyConfig, PolicyKind};
use crate::tape::{GradientInjection, NodeRef, Tape};
use crate::world::{
    check_collision, check_gate_pass, gate_axes, generate_track, observe, EpisodeResult,
    Observation, StepLog, TrackFamily, TrackGeometry, TrackSpec, WorldConfig,
    EMPTY_WORLD_DISTANCE,
};
use crate::{substream, Error, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Which racing-progress term enters the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressKind {
    /// Closing speed on the gate, `-(v . p_gate) / |p_gate|`.
    Dot,
    /// Heading cosine, `-cos(angle(v, p_gate))`, weighted by its own lambda.
    Normalized,
}

/// Optimization-loop knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// BPTT horizon per rollout (steps).
    pub horizon: usize,
    /// Environments averaged per update.
    pub envs: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradient decay rate (1/s); the per-step adjoint multiplier is
    /// `exp(-decay_alpha * dt)`.
    pub decay_alpha: f64,
    pub avf_enabled: bool,
    /// Global-norm cap on the averaged gradient.
    pub grad_clip: f64,
    pub progress: ProgressKind,
    /// Add the scalar gate-plane projection term (the field-free substitute
    /// arm).
    pub use_projection: bool,
    pub eval_every: usize,
    pub eval_trials: usize,
    pub eval_horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 150,
            envs: 16,
            iterations: 300,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_alpha: 2.0,
            avf_enabled: true,
            grad_clip: 5.0,
            progress: ProgressKind::Dot,
            use_projection: false,
            eval_every: 20,
            eval_trials: 8,
            eval_horizon: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config(format!("trainer horizon must be >= 2, got {}", self.horizon)));
        }
        if self.envs == 0 {
            return Err(Error::Config("trainer envs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("trainer lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config(format!("trainer grad_clip must be positive, got {}", self.grad_clip)));
        }
        if !(self.decay_alpha.is_finite() && self.decay_alpha >= 0.0) {
            return Err(Error::Config(format!("trainer decay_alpha must be >= 0, got {}", self.decay_alpha)));
        }
        if self.eval_every == 0 || self.eval_trials == 0 || self.eval_horizon == 0 {
            return Err(Error::Config("trainer eval cadence fields must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("trainer optimizer moments must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Per-step adjoint decay factor for a tape.
    pub fn decay_factor(&self, dt: f64) -> f64 {
        (-self.decay_alpha * dt).exp()
    }
}

/// Track distribution: one family and difficulty, resampled per seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSampler {
    pub family: TrackFamily,
    pub difficulty: u8,
    pub geometry: TrackGeometry,
}

impl Default for TrackSampler {
    /// Obstacle-free zigzag, the benchmark layout.
    fn default() -> Self {
        TrackSampler {
            family: TrackFamily::Zigzag,
            difficulty: 0,
            geometry: TrackGeometry::default(),
        }
    }
}

impl TrackSampler {
    pub fn sample(&self, seed: u64) -> Result<TrackSpec> {
        generate_track(self.family, self.difficulty, seed, &self.geometry)
    }
}

/// Root seeds for the independent randomness consumers of a training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSeeds {
    /// Per-(iteration, env) track sampling.
    pub track: u64,
    /// Per-(iteration, env) spawn jitter.
    pub jitter: u64,
    /// Held-out evaluation tracks.
    pub eval_track: u64,
    /// Held-out evaluation spawn jitter.
    pub eval_jitter: u64,
}

impl TrainSeeds {
    /// Conventional substream split of one root seed.
    pub fn from_root(root: u64) -> Self {
        TrainSeeds {
            track: substream(root, "track", 0),
            jitter: substream(root, "jitter", 0),
            eval_track: substream(root, "eval_track", 0),
            eval_jitter: substream(root, "eval_jitter", 0),
        }
    }
}

/// Everything a rollout needs to read, bundled to keep signatures sane.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSetup<'a> {
    pub dynamics: &'a DynamicsConfig,
    pub field: &'a FieldConfig,
    pub weights: &'a LossWeights,
    pub reward: &'a RewardWeights,
    pub world: &'a WorldConfig,
    pub policy: &'a PolicyConfig,
    pub train: &'a TrainConfig,
}

/// Tape artifacts of one rollout, ready for loss assembly and backward.
/// Per-step loss nodes are evaluated at the post-step state with that step's
/// target gate; injections carry the field at the same state with the
/// post-pass target (the gate the NEXT move should thread).
pub struct RolloutRecord {
    pub l_clear: Vec<NodeRef>,
    pub l_collide: Vec<NodeRef>,
    pub l_p: Vec<NodeRef>,
    pub l_proj: Vec<NodeRef>,
    /// Executed commands, one per step (policy output plus any delta
    /// correction, before the integrator's own clamp).
    pub cmds: Vec<NodeRef>,
    pub injections: Vec<GradientInjection>,
    pub result: EpisodeResult,
    pub logs: Vec<StepLog>,
    /// What the policy saw at each step. Observations are data on the tape;
    /// keeping the sequence makes a rollout exactly replayable.
    pub obs: Vec<Observation>,
    /// Post-step states, one per entry of `logs`.
    pub states: Vec<DroneState>,
    /// Yaw fed to the frame construction at each step.
    pub yaws: Vec<f64>,
    /// Rollout hit a non-finite state and stopped early; exclude from the
    /// update.
    pub aborted: bool,
}

/// Spawn offset drawn from a jitter substream: up to 0.3 m laterally and
/// 0.15 m vertically around the track's start point.
pub fn start_jitter(seed: u64) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.15..0.15))
}

/// Loss-side distance to the nearest obstacle surface as a tape node. The
/// nearest point is held fixed for the step (the field of nearest offsets is
/// piecewise smooth; its jumps are measure-zero). In a bar-free, obstacle-free
/// world the sentinel distance enters as a constant so no phantom gradient
/// is created.
fn clearance_distance_node(
    tape: &mut Tape,
    p_node: NodeRef,
    nearest: Vec3,
    dist: f64,
) -> NodeRef {
    if dist >= EMPTY_WORLD_DISTANCE {
        tape.constant_scalar(dist)
    } else {
        let q = tape.constant_vec3(nearest);
        let d = tape.sub(p_node, q);
        tape.norm(d)
    }
}

/// Roll the policy for up to `horizon` steps on `tape`, recording losses and
/// pending field injections. Stops at collision, at a non-finite state, or
/// after threading every gate of a non-loop track (the target observation is
/// undefined past the last gate). Returns the record and the bound policy
/// parameters for gradient reassembly.
pub fn rollout(
    set: &ParamSet,
    delta: Option<&ParamSet>,
    track: &TrackSpec,
    setup: &RolloutSetup,
    jitter: Vec3,
    tape: &mut Tape,
) -> Result<(RolloutRecord, BoundParams)> {
    let dcfg = setup.dynamics;
    let lw = setup.weights;
    let n_gates = track.gates.len();
    assert!(n_gates > 0, "rollout needs at least one gate");
    let with_depth = matches!(setup.policy.kind, PolicyKind::CnnGru);

    let bound = BoundParams::bind(set, tape);
    let delta_bound = delta.map(|d| BoundParams::bind(d, tape));

    let mut state = DroneState::at_rest(track.start + jitter);
    let mut ts = init_tape_state(tape, &state);
    let mut rec = RolloutRecord {
        l_clear: Vec::new(),
        l_collide: Vec::new(),
        l_p: Vec::new(),
        l_proj: Vec::new(),
        cmds: Vec::new(),
        injections: Vec::new(),
        result: EpisodeResult::default(),
        logs: Vec::new(),
        obs: Vec::new(),
        states: Vec::new(),
        yaws: Vec::new(),
        aborted: false,
    };
    let mut target = 0usize;
    let mut h_policy: Option<NodeRef> = None;
    let mut h_delta: Option<NodeRef> = None;
    let mut prev_cmd = Vec3::zeros();
    let mut laps_left = if track.family.is_loop() { usize::MAX } else { n_gates };

    for k in 0..setup.train.horizon {
        let yaw = crate::world::yaw_toward(state.p, track.gates[target].center);
        let obs = observe(&state, track, target, prev_cmd, yaw, setup.world, with_depth);
        let (u_pi, h_new) = policy_forward(&obs, h_policy, &bound, setup.policy, dcfg, tape)?;
        h_policy = h_new;
        let cmd = match &delta_bound {
            Some(db) => {
                let (corr, hd) =
                    delta_forward(obs.v_body, obs.r3, u_pi, h_delta, db, setup.policy, tape);
                h_delta = Some(hd);
                tape.add(u_pi, corr)
            }
            None => u_pi,
        };

        let prev_state = state;
        ts = step(tape, &ts, cmd, yaw, dcfg);
        state = read_tape_state(tape, &ts);
        if !state.is_finite() {
            rec.aborted = true;
            break;
        }
        let u_exec = tape.value_vec3(cmd);

        // Events at the new state, judged against the step's target.
        let gate = &track.gates[target];
        let passed = check_gate_pass(prev_state.p, state.p, gate, lw.r_q);
        let report = check_collision(state.p, state.v, track, lw.r_q);

        // Losses at s_{k+1} with this step's target gate.
        let d_node = clearance_distance_node(tape, ts.p, report.nearest, report.dist);
        rec.l_clear.push(clearance_loss(d_node, lw, tape));
        let vc_node = tape.constant_scalar(report.v_c);
        rec.l_collide.push(collide_loss(d_node, vc_node, lw, tape));

        let center = tape.constant_vec3(gate.center);
        let gate_off = tape.sub(center, ts.p);
        // The progress terms are frame-invariant, so the world-frame nodes
        // stand in for the body-frame quantities exactly.
        let l_p = if (gate.center - state.p).norm() == 0.0 {
            tape.constant_scalar(0.0)
        } else {
            match setup.train.progress {
                ProgressKind::Dot => progress_loss(ts.v, gate_off, tape)?,
                ProgressKind::Normalized => progress_loss_normalized(ts.v, gate_off, tape)?,
            }
        };
        rec.l_p.push(l_p);
        if setup.train.use_projection {
            let gt = gate_axes(gate).transpose();
            let rows: Vec<f64> = gt.row_iter().flat_map(|r| [r[0], r[1], r[2]]).collect();
            let m = tape.constant(&rows);
            let p_frame = tape.matvec(m, gate_off, 3, 3);
            let d_gate = tape.norm(gate_off);
            rec.l_proj.push(projection_loss(p_frame, d_gate, lw, tape));
        }
        rec.cmds.push(cmd);

        // Numeric bookkeeping.
        let r = rotation_from_r3(state.r3, yaw).transpose();
        let reward = step_reward(
            &RewardInputs {
                d_norm: report.dist,
                v_c: report.v_c,
                accel: u_exec,
                prev_accel: (k > 0).then_some(prev_cmd),
                dt: dcfg.dt,
                v_body: r * state.v,
                p_gate_body: r * (gate.center - state.p),
                r_th: setup.reward.pass_radius(gate.width, gate.height),
            },
            setup.reward,
            lw,
        );
        rec.logs.push(StepLog {
            t: (k + 1) as f64 * dcfg.dt,
            p: state.p,
            v: state.v,
            a: u_exec,
            gate_idx: target,
            collided: report.collided,
            reward,
            loss_clear: tape.value_scalar(*rec.l_clear.last().unwrap()),
            loss_collide: tape.value_scalar(*rec.l_collide.last().unwrap()),
            loss_a: u_exec.norm_squared(),
            loss_j: if k > 0 { ((u_exec - prev_cmd) / dcfg.dt).norm_squared() } else { 0.0 },
            loss_p: tape.value_scalar(l_p),
        });
        rec.obs.push(obs);
        rec.states.push(state);
        rec.yaws.push(yaw);
        rec.result.v_max = rec.result.v_max.max(state.v.norm());
        rec.result.steps = k + 1;
        prev_cmd = u_exec;

        if passed {
            rec.result.gates_passed += 1;
            target = (target + 1) % n_gates;
            laps_left = laps_left.saturating_sub(1);
        }

        // Pending injection at the new position node, aimed at the post-pass
        // target. Data, not a differentiated function: u_A reads the numeric
        // state.
        if setup.train.avf_enabled {
            let u_a = attractive_field(state.p, state.v, &track.gates[target], setup.field);
            rec.injections.push(GradientInjection { node: ts.p, vector: u_a });
        }

        if report.collided {
            rec.result.collided = true;
            break;
        }
        if laps_left == 0 {
            break;
        }
    }
    rec.result.success = !rec.result.collided && !rec.aborted;
    rec.result.success_cross = rec.result.success && rec.result.gates_passed >= n_gates;
    Ok((rec, bound))
}

/// One environment's tape, bound parameters, and rollout record.
pub struct EnvBundle {
    pub tape: Tape,
    pub bound: BoundParams,
    pub record: RolloutRecord,
}

/// Numeric loss breakdown of one environment.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnvOutcome {
    pub loss_total: f64,
    pub loss_c: f64,
    pub loss_a: f64,
    pub loss_j: f64,
    pub loss_p: f64,
}

/// Adam with bias correction. `t` counts applied updates only, so a skipped
/// iteration (non-finite gradient) leaves the moment schedule untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, dim: usize) -> Self {
        Adam { lr, beta1, beta2, eps, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn from_config(cfg: &TrainConfig, dim: usize) -> Self {
        Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, dim)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scale `g` down to `cap` when its l2 norm exceeds it. Returns the pre-clip
/// norm.
pub fn clip_global_norm(g: &mut [f64], cap: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    norm
}

/// Per-update statistics for the metrics log.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub loss_total: f64,
    pub loss_c: f64,
    pub loss_a: f64,
    pub loss_j: f64,
    pub loss_p: f64,
    /// Pre-clip global norm of the averaged gradient.
    pub grad_norm: f64,
    /// Mean injected field magnitude across all steps and envs.
    pub avf_norm: f64,
    /// Update skipped (non-finite gradient or every env aborted).
    pub skipped: bool,
    pub aborted_envs: usize,
}

/// Assemble losses, run backward with the pending injections, average the
/// per-env gradients in fixed order, clip, and apply one Adam step. Aborted
/// environments are excluded; a non-finite averaged gradient skips the
/// parameter update entirely.
pub fn update(
    envs: &mut [EnvBundle],
    set: &mut ParamSet,
    opt: &mut Adam,
    w: &LossWeights,
    tcfg: &TrainConfig,
    dt: f64,
) -> UpdateStats {
    let mut stats = UpdateStats::default();
    let mut grad_acc = vec![0.0; set.data.len()];
    let mut included = 0usize;
    let mut avf_sum = 0.0;
    let mut avf_count = 0usize;

    for env in envs.iter_mut() {
        if env.record.aborted {
            stats.aborted_envs += 1;
            continue;
        }
        let (total, out) =
            assemble_env_loss(&env.record, w, tcfg.use_projection, dt, &mut env.tape);
        let grads = env.tape.backward(total, &env.record.injections);
        let flat = env.bound.flat_gradient(&grads, set);
        for (a, g) in grad_acc.iter_mut().zip(&flat) {
            *a += g;
        }
        stats.loss_total += out.loss_total;
        stats.loss_c += out.loss_c;
        stats.loss_a += out.loss_a;
        stats.loss_j += out.loss_j;
        stats.loss_p += out.loss_p;
        for inj in &env.record.injections {
            avf_sum += inj.vector.norm();
            avf_count += 1;
        }
        included += 1;
    }

    if included == 0 {
        stats.skipped = true;
        stats.grad_norm = f64::NAN;
        return stats;
    }
    let inv = 1.0 / included as f64;
    for g in grad_acc.iter_mut() {
        *g *= inv;
    }
    stats.loss_total *= inv;
    stats.loss_c *= inv;
    stats.loss_a *= inv;
    stats.loss_j *= inv;
    stats.loss_p *= inv;
    stats.avf_norm = if avf_count > 0 { avf_sum / avf_count as f64 } else { 0.0 };

    stats.grad_norm = grad_acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !stats.grad_norm.is_finite() {
        stats.skipped = true;
        return stats;
    }
    clip_global_norm(&mut grad_acc, tcfg.grad_clip);
    opt.step(&mut set.data, &grad_acc);
    stats
}

/// Build the weighted total-loss node for one rollout: per-step terms are
/// averaged over the survived steps, then combined. A single-step rollout
/// has no jerk difference, so its jerk term is a zero constant.
pub fn assemble_env_loss(
    rec: &RolloutRecord,
    w: &LossWeights,
    use_projection: bool,
    dt: f64,
    tape: &mut Tape,
) -> (NodeRef, EnvOutcome) {
    assert!(!rec.cmds.is_empty(), "loss assembly over an empty rollout");
    let l_clear = mean_scalar(&rec.l_clear, tape);
    let l_collide = mean_scalar(&rec.l_collide, tape);
    let l_p = mean_scalar(&rec.l_p, tape);
    let (l_a, l_j) = if rec.cmds.len() >= 2 {
        smoothness_losses(&rec.cmds, dt, tape).expect("len checked")
    } else {
        let n = tape.norm(rec.cmds[0]);
        (tape.mul(n, n), tape.constant_scalar(0.0))
    };
    let terms = LossTerms { l_clear, l_collide, l_a, l_j, l_p };
    let mut total = total_loss(&terms, w, tape);
    if use_projection && !rec.l_proj.is_empty() {
        let lp = mean_scalar(&rec.l_proj, tape);
        let weighted = tape.mul_const(lp, w.lambda_proj);
        total = tape.add(total, weighted);
    }
    let out = EnvOutcome {
        loss_total: tape.value_scalar(total),
        loss_c: tape.value_scalar(l_clear) + tape.value_scalar(l_collide),
        loss_a: tape.value_scalar(l_a),
        loss_j: tape.value_scalar(l_j),
        loss_p: tape.value_scalar(l_p),
    };
    (total, out)
}

/// Swap in the normalized-progress weight when that term is selected, so the
/// shared total-loss assembly reads one field.
pub fn effective_weights(w: &LossWeights, tcfg: &TrainConfig) -> LossWeights {
    let mut out = *w;
    if tcfg.progress == ProgressKind::Normalized {
        out.lambda_p = w.lambda_p_norm;
    }
    out
}

/// Aggregate evaluation metrics over seeded trials.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Fraction of trials without collision.
    pub success_rate: f64,
    /// Fraction of trials threading every gate without collision.
    pub success_cross: f64,
    /// Maximum speed seen across all trials.
    pub v_max: f64,
    pub mean_gates: f64,
    pub mean_reward: f64,
    pub trials: usize,
}

/// Run seeded evaluation episodes with a caller-supplied plant. The policy
/// runs values-only on a scratch tape; `step_fn(state, cmd, yaw)` advances
/// the plant (nominal or perturbed). Loop tracks wrap their gate sequence and
/// fly the full horizon; open tracks stop once every gate is threaded.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F, G>(
    set: &ParamSet,
    delta: Option<&ParamSet>,
    setup: &RolloutSetup,
    sampler: &TrackSampler,
    trials: usize,
    track_seed: u64,
    jitter_seed: u64,
    horizon: usize,
    step_fn: F,
    mut on_trial: G,
) -> Result<EvalSummary>
where
    F: Fn(&DroneState, Vec3, f64) -> DroneState,
    G: FnMut(usize, &EpisodeResult, &[StepLog]),
{
    let mut summary = EvalSummary { trials, ..EvalSummary::default() };
    let dcfg = setup.dynamics;
    let lw = setup.weights;
    let with_depth = matches!(setup.policy.kind, PolicyKind::CnnGru);
    for trial in 0..trials {
        let track = sampler.sample(substream(track_seed, "track", trial as u64))?;
        let jitter = start_jitter(substream(jitter_seed, "jitter", trial as u64));
        let n_gates = track.gates.len();
        let mut tape = Tape::new(1.0);
        let bound = BoundParams::bind(set, &mut tape);
        let delta_bound = delta.map(|d| BoundParams::bind(d, &mut tape));
        let mut state = DroneState::at_rest(track.start + jitter);
        let mut result = EpisodeResult::default();
        let mut logs: Vec<StepLog> = Vec::new();
        let mut target = 0usize;
        let mut h_policy: Option<NodeRef> = None;
        let mut h_delta: Option<NodeRef> = None;
        let mut prev_cmd = Vec3::zeros();
        let mut laps_left = if track.family.is_loop() { usize::MAX } else { n_gates };
        let mut reward_sum = 0.0;

        for k in 0..horizon {
            let yaw = crate::world::yaw_toward(state.p, track.gates[target].center);
            let obs = observe(&state, &track, target, prev_cmd, yaw, setup.world, with_depth);
            let (u_pi, h_new) = policy_forward(&obs, h_policy, &bound, setup.policy, dcfg, &mut tape)?;
            h_policy = h_new;
            let cmd = match &delta_bound {
                Some(db) => {
                    let (corr, hd) =
                        delta_forward(obs.v_body, obs.r3, u_pi, h_delta, db, setup.policy, &mut tape);
                    h_delta = Some(hd);
                    tape.add(u_pi, corr)
                }
                None => u_pi,
            };
            tape.mark_step();
            let u_exec = tape.value_vec3(cmd);
            let prev_state = state;
            state = step_fn(&state, u_exec, yaw);
            if !state.is_finite() {
                break;
            }
            let gate = &track.gates[target];
            let passed = check_gate_pass(prev_state.p, state.p, gate, lw.r_q);
            let report = check_collision(state.p, state.v, &track, lw.r_q);
            let r = rotation_from_r3(state.r3, yaw).transpose();
            let reward = step_reward(
                &RewardInputs {
                    d_norm: report.dist,
                    v_c: report.v_c,
                    accel: u_exec,
                    prev_accel: (k > 0).then_some(prev_cmd),
                    dt: dcfg.dt,
                    v_body: r * state.v,
                    p_gate_body: r * (gate.center - state.p),
                    r_th: setup.reward.pass_radius(gate.width, gate.height),
                },
                setup.reward,
                lw,
            );
            reward_sum += reward;
            logs.push(StepLog {
                t: (k + 1) as f64 * dcfg.dt,
                p: state.p,
                v: state.v,
                a: u_exec,
                gate_idx: target,
                collided: report.collided,
                reward,
                loss_clear: 0.0,
                loss_collide: 0.0,
                loss_a: u_exec.norm_squared(),
                loss_j: if k > 0 { ((u_exec - prev_cmd) / dcfg.dt).norm_squared() } else { 0.0 },
                loss_p: 0.0,
            });
            result.v_max = result.v_max.max(state.v.norm());
            result.steps = k + 1;
            prev_cmd = u_exec;
            if passed {
                result.gates_passed += 1;
                target = (target + 1) % n_gates;
                laps_left = laps_left.saturating_sub(1);
            }
            if report.collided {
                result.collided = true;
                break;
            }
            if laps_left == 0 {
                break;
            }
        }
        result.success = !result.collided;
        result.success_cross = result.success && result.gates_passed >= n_gates;
        summary.success_rate += if result.success { 1.0 } else { 0.0 };
        summary.success_cross += if result.success_cross { 1.0 } else { 0.0 };
        summary.v_max = summary.v_max.max(result.v_max);
        summary.mean_gates += result.gates_passed as f64;
        summary.mean_reward += reward_sum;
        on_trial(trial, &result, &logs);
    }
    if trials > 0 {
        let inv = 1.0 / trials as f64;
        summary.success_rate *= inv;
        summary.success_cross *= inv;
        summary.mean_gates *= inv;
        summary.mean_reward *= inv;
    }
    Ok(summary)
}

/// Stable metrics schema, one row per iteration.
pub const METRICS_HEADER: &str =
    "iter,loss_total,loss_C,loss_a,loss_j,loss_p,grad_norm,avf_norm,success_rate,success_cross,v_max";

pub fn write_metrics_header<W: Write + ?Sized>(out: &mut W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn write_metrics_row<W: Write + ?Sized>(
    out: &mut W,
    iter: usize,
    s: &UpdateStats,
    eval: &EvalSummary,
) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{}",
        iter,
        s.loss_total,
        s.loss_c,
        s.loss_a,
        s.loss_j,
        s.loss_p,
        s.grad_norm,
        s.avf_norm,
        eval.success_rate,
        eval.success_cross,
        eval.v_max
    )?;
    Ok(())
}

/// Final artifacts of a training run.
pub struct TrainOutput {
    pub params: ParamSet,
    pub final_eval: EvalSummary,
    pub iterations_run: usize,
    pub updates_skipped: usize,
}

/// Plant used to advance evaluation episodes, `(state, cmd, yaw) -> next`.
pub type PlantFn<'a> = &'a dyn Fn(&DroneState, Vec3, f64) -> DroneState;

/// The full optimization loop: sample tracks, roll out every environment,
/// update, log one metrics row per iteration, and periodically evaluate on
/// held-out seeds (the evaluation columns carry the latest values between
/// evals, zeros before the first). `on_checkpoint` receives the initial
/// parameters as "init" and, after a nonzero number of iterations, the final
/// parameters as "final".
///
/// `eval_plant` selects what evaluation measures. `None` evaluates on the
/// nominal integrator with any `delta` correction still in the loop, i.e. the
/// same simulator the rollouts trained on. `Some(step)` runs the policy alone
/// on the supplied plant, the way deployed hardware would execute it; the
/// residual model stays out of that loop because it lives in the simulator,
/// not in the controller.
#[allow(clippy::too_many_arguments)]
pub fn train(
    setup: &RolloutSetup,
    sampler: &TrackSampler,
    seeds: &TrainSeeds,
    init: ParamSet,
    delta: Option<&ParamSet>,
    eval_plant: Option<PlantFn>,
    metrics: &mut dyn Write,
    mut on_checkpoint: impl FnMut(&str, &ParamSet) -> Result<()>,
) -> Result<TrainOutput> {
    setup.train.validate()?;
    setup.policy.validate()?;
    init.validate()?;
    let tcfg = setup.train;
    let w_eff = effective_weights(setup.weights, tcfg);
    let mut set = init;
    on_checkpoint("init", &set)?;
    let mut opt = Adam::from_config(tcfg, set.data.len());
    let decay = tcfg.decay_factor(setup.dynamics.dt);
    write_metrics_header(metrics)?;
    let mut last_eval = EvalSummary::default();
    let mut updates_skipped = 0usize;
    let nominal = |s: &DroneState, u: Vec3, yaw: f64| step_numeric(s, u, yaw, setup.dynamics);
    let run_eval = |set: &ParamSet| match eval_plant {
        Some(plant) => evaluate(
            set,
            None,
            setup,
            sampler,
            tcfg.eval_trials,
            seeds.eval_track,
            seeds.eval_jitter,
            tcfg.eval_horizon,
            plant,
            |_, _, _| {},
        ),
        None => evaluate(
            set,
            delta,
            setup,
            sampler,
            tcfg.eval_trials,
            seeds.eval_track,
            seeds.eval_jitter,
            tcfg.eval_horizon,
            nominal,
            |_, _, _| {},
        ),
    };

    for iter in 0..tcfg.iterations {
        let mut envs = Vec::with_capacity(tcfg.envs);
        for e in 0..tcfg.envs {
            let idx = (iter * tcfg.envs + e) as u64;
            let track = sampler.sample(substream(seeds.track, "track", idx))?;
            let jitter = start_jitter(substream(seeds.jitter, "jitter", idx));
            let mut tape = Tape::new(decay);
            let (record, bound) = rollout(&set, delta, &track, setup, jitter, &mut tape)?;
            envs.push(EnvBundle { tape, bound, record });
        }
        let stats = update(&mut envs, &mut set, &mut opt, &w_eff, tcfg, setup.dynamics.dt);
        if stats.skipped {
            updates_skipped += 1;
        }
        if (iter + 1) % tcfg.eval_every == 0 {
            last_eval = run_eval(&set)?;
        }
        write_metrics_row(metrics, iter, &stats, &last_eval)?;
    }

    let final_eval = run_eval(&set)?;
    if tcfg.iterations > 0 {
        on_checkpoint("final", &set)?;
    }
    Ok(TrainOutput {
        params: set,
        final_eval,
        iterations_run: tcfg.iterations,
        updates_skipped,
    })
}
