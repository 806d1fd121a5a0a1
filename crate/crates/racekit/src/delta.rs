//! Delta Action Model pipeline for dynamics mismatch.
//!
//! The simulator the policy trains in never quite matches the plant it
//! deploys to. Instead of re-identifying physical parameters, a small
//! recurrent network learns a residual action: the nominal model stepped
//! with `u + u_delta(s, u)` reproduces the target plant's response to `u`.
//! Three stages:
//!
//! 1. [`collect`] flies the trained policy on the target plant
//!    ([`TargetDynamics`]) and records state-action trajectories into a
//!    [`TransitionDataset`];
//! 2. [`fit_delta`] fits the residual net by BPTT through the nominal
//!    differentiable dynamics: the simulated rollout replays the recorded
//!    actions plus the correction, closed-loop in state, and minimizes the
//!    mean position/velocity mismatch against the recorded states;
//! 3. [`finetune_with_delta`] freezes the fitted net inside the simulator
//!    and fine-tunes the policy there, evaluating on the target plant.
//!
//! Fitting chunks episodes into fixed windows (90 steps, 3 s at 30 Hz, by
//! default) to bound BPTT depth; every window restarts from the recorded
//! state. Commands are body-frame, so replay also rebuilds the yaw sequence
//! the controller flew with ([`yaw_sequence`]); without the frame the
//! recorded actions are meaningless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    init_tape_state, read_tape_state, rotation_from_r3, step, step_numeric_scaled, DroneState,
    DynamicsConfig,
};
use crate::policy::{
    delta_forward, delta_manifest, expect_manifest, policy_forward, policy_manifest, BoundParams,
    ParamSet, PolicyConfig, PolicyKind,
};
use crate::tape::{NodeRef, Tape};
use crate::trainer::{
    clip_global_norm, start_jitter, train, Adam, RolloutSetup, TrackSampler, TrainOutput,
    TrainSeeds,
};
use crate::world::{check_collision, check_gate_pass, observe, yaw_toward, TrackSpec};
use crate::{substream, Error, Result, Vec3};

/// A perturbed plant standing in for the real drone: the nominal point-mass
/// model with an actuation deficit, a thrust-scale error, and extra drag and
/// lag. [`TargetDynamics::step`] is what "reality" does to a command, so the
/// perturbations act the way hardware faults would: the bias is acceleration
/// the actuators fail to deliver, the mass scale divides the produced
/// acceleration, drag and lag add to the nominal constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetDynamics {
    /// Nominal model the perturbations are laid over.
    pub base: DynamicsConfig,
    /// Commanded acceleration the plant fails to deliver (m/s^2, body
    /// frame): the plant executes `u - action_bias`.
    pub action_bias: Vec3,
    /// Thrust-to-mass miscalibration; the produced world acceleration is
    /// divided by this.
    pub mass_scale: f64,
    /// Drag coefficient added to the base value (1/s).
    pub extra_drag: f64,
    /// Actuation lag added to the base time constant (s).
    pub extra_lag: f64,
}

impl Default for TargetDynamics {
    fn default() -> Self {
        TargetDynamics::nominal(DynamicsConfig::default())
    }
}

impl TargetDynamics {
    /// A target with no perturbations; its `step` is bitwise the nominal
    /// integrator.
    pub fn nominal(base: DynamicsConfig) -> Self {
        TargetDynamics {
            base,
            action_bias: Vec3::zeros(),
            mass_scale: 1.0,
            extra_drag: 0.0,
            extra_lag: 0.0,
        }
    }

    /// The base config with the drag and lag perturbations folded in.
    pub fn effective(&self) -> DynamicsConfig {
        DynamicsConfig {
            drag_coeff: self.base.drag_coeff + self.extra_drag,
            tau_act: self.base.tau_act + self.extra_lag,
            ..self.base
        }
    }

    pub fn is_null(&self) -> bool {
        self.action_bias == Vec3::zeros()
            && self.mass_scale == 1.0
            && self.extra_drag == 0.0
            && self.extra_lag == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let eff = self.effective();
        if !(self.mass_scale.is_finite() && self.mass_scale > 0.0) {
            return Err(Error::Config(format!(
                "mass_scale must be positive and finite, got {}",
                self.mass_scale
            )));
        }
        if !(eff.drag_coeff.is_finite() && eff.drag_coeff >= 0.0) {
            return Err(Error::Config(format!(
                "effective drag must be nonnegative, got {}",
                eff.drag_coeff
            )));
        }
        if !(eff.tau_act.is_finite() && eff.tau_act > 0.0) {
            return Err(Error::Config(format!(
                "effective actuation lag must be positive, got {}",
                eff.tau_act
            )));
        }
        if !(self.action_bias.x.is_finite()
            && self.action_bias.y.is_finite()
            && self.action_bias.z.is_finite())
        {
            return Err(Error::Config("action_bias must be finite".into()));
        }
        Ok(())
    }

    /// Advance the target plant one step. The command loses the bias before
    /// the effective model's own clamp, mirroring actuators that
    /// under-deliver rather than a sensor offset.
    pub fn step(&self, state: &DroneState, cmd: Vec3, yaw: f64) -> DroneState {
        step_numeric_scaled(state, cmd - self.action_bias, yaw, &self.effective(), 1.0 / self.mass_scale)
    }

    /// Compact provenance tag for datasets collected on this plant.
    pub fn source_tag(&self) -> String {
        if self.is_null() {
            "target:nominal".to_string()
        } else {
            format!(
                "target:bias=({},{},{}),mass={},drag=+{},lag=+{}",
                self.action_bias.x,
                self.action_bias.y,
                self.action_bias.z,
                self.mass_scale,
                self.extra_drag,
                self.extra_lag
            )
        }
    }
}

/// One recorded sample: the state the controller saw and the action it
/// issued there. The last sample of an episode is terminal; it carries a
/// zero action that was never executed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub u: Vec3,
}

/// One flight on the target plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Index into the track list the collection ran over; fitting needs the
    /// gates to rebuild the yaw the commands were issued in.
    pub track_index: usize,
    pub samples: Vec<Sample>,
}

impl Episode {
    /// Executed transitions, one less than the number of samples.
    pub fn transitions(&self) -> usize {
        self.samples.len().saturating_sub(1)
    }
}

/// Recorded state-action trajectories from the target plant.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub episodes: Vec<Episode>,
    /// Sampling period (s); must match the nominal model at fit time.
    pub dt: f64,
    /// Short provenance tag, single line.
    pub source: String,
}

impl TransitionDataset {
    /// Total executed transitions across episodes.
    pub fn len(&self) -> usize {
        self.episodes.iter().map(Episode::transitions).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-episode strictly increasing time, finite values, a sane period,
    /// and a single-line source tag.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dataset dt must be positive, got {}", self.dt)));
        }
        if self.source.contains('\n') {
            return Err(Error::Config("dataset source tag must be a single line".into()));
        }
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.samples.is_empty() {
                return Err(Error::Config(format!("episode {i} has no samples")));
            }
            for (k, s) in ep.samples.iter().enumerate() {
                let finite = s.t.is_finite()
                    && [s.p, s.v, s.u]
                        .iter()
                        .all(|w| w.x.is_finite() && w.y.is_finite() && w.z.is_finite());
                if !finite {
                    return Err(Error::Config(format!(
                        "episode {i} sample {k} holds a non-finite value"
                    )));
                }
                if k > 0 && s.t <= ep.samples[k - 1].t {
                    return Err(Error::Config(format!(
                        "episode {i} time is not increasing at sample {k}: {} after {}",
                        s.t,
                        ep.samples[k - 1].t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Collection-stage sizes: how much flying the dataset records.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    /// Episodes recorded on the target plant.
    pub episodes: usize,
    /// Step budget per episode.
    pub horizon: usize,
    /// Distinct tracks episodes cycle through.
    pub tracks: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { episodes: 8, horizon: 300, tracks: 2 }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("episodes", self.episodes), ("horizon", self.horizon), ("tracks", self.tracks)]
        {
            if v == 0 {
                return Err(Error::Config(format!("collection {name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Fly the trained policy on the target plant and record what it did.
/// Episode `i` runs `tracks[i % tracks.len()]` from a jittered start; the
/// jitter substream is indexed by episode, so the dataset is a deterministic
/// function of `seed`. Stop conditions mirror evaluation: collision, a
/// non-finite next state, or every gate of a non-loop track threaded.
pub fn collect(
    set: &ParamSet,
    setup: &RolloutSetup,
    target: &TargetDynamics,
    tracks: &[TrackSpec],
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    target.validate()?;
    expect_manifest(set, &policy_manifest(setup.policy))?;
    if n_episodes > 0 && tracks.is_empty() {
        return Err(Error::Config("collection needs at least one track".into()));
    }
    if (setup.dynamics.dt - target.base.dt).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "policy runs at dt={} but the target plant steps at dt={}",
            setup.dynamics.dt, target.base.dt
        )));
    }
    let dt = target.base.dt;
    let r_q = setup.weights.r_q;
    let with_depth = matches!(setup.policy.kind, PolicyKind::CnnGru);
    let mut episodes = Vec::with_capacity(n_episodes);

    for i in 0..n_episodes {
        let track_index = i % tracks.len();
        let track = &tracks[track_index];
        let n_gates = track.gates.len();
        let jitter = start_jitter(substream(seed, "jitter", i as u64));
        let mut tape = Tape::new(1.0);
        let bound = BoundParams::bind(set, &mut tape);
        let mut state = DroneState::at_rest(track.start + jitter);
        let mut samples: Vec<Sample> = Vec::new();
        let mut target_gate = 0usize;
        let mut h: Option<NodeRef> = None;
        let mut prev_cmd = Vec3::zeros();
        let mut laps_left = if track.family.is_loop() { usize::MAX } else { n_gates };

        for _ in 0..horizon {
            let yaw = yaw_toward(state.p, track.gates[target_gate].center);
            let obs = observe(&state, track, target_gate, prev_cmd, yaw, setup.world, with_depth);
            let (cmd, h_new) = policy_forward(&obs, h, &bound, setup.policy, setup.dynamics, &mut tape)?;
            h = h_new;
            tape.mark_step();
            let u = tape.value_vec3(cmd);
            let next = target.step(&state, u, yaw);
            if !next.is_finite() {
                break;
            }
            samples.push(Sample { t: samples.len() as f64 * dt, p: state.p, v: state.v, u });
            let prev_state = state;
            state = next;
            prev_cmd = u;
            let passed = check_gate_pass(prev_state.p, state.p, &track.gates[target_gate], r_q);
            let report = check_collision(state.p, state.v, track, r_q);
            if passed {
                target_gate = (target_gate + 1) % n_gates;
                laps_left = laps_left.saturating_sub(1);
            }
            if report.collided || laps_left == 0 {
                break;
            }
        }
        samples.push(Sample {
            t: samples.len() as f64 * dt,
            p: state.p,
            v: state.v,
            u: Vec3::zeros(),
        });
        episodes.push(Episode { track_index, samples });
    }

    let ds = TransitionDataset { episodes, dt, source: target.source_tag() };
    ds.validate()?;
    Ok(ds)
}

/// Rebuild the yaw the controller used at every recorded transition by
/// walking the real states through the same gate-targeting logic the
/// collector ran. Exact by construction: both sides see identical positions
/// and identical pass tests.
pub fn yaw_sequence(ep: &Episode, track: &TrackSpec, r_q: f64) -> Vec<f64> {
    assert!(!track.gates.is_empty(), "yaw reconstruction needs gates");
    let n_gates = track.gates.len();
    let mut target = 0usize;
    let mut yaws = Vec::with_capacity(ep.transitions());
    for k in 0..ep.transitions() {
        let p = ep.samples[k].p;
        yaws.push(yaw_toward(p, track.gates[target].center));
        if check_gate_pass(p, ep.samples[k + 1].p, &track.gates[target], r_q) {
            target = (target + 1) % n_gates;
        }
    }
    yaws
}

/// Rebuild the full drone state at sample `k`. Position and velocity come
/// straight from the record; the actuator state is inverted from the
/// nominal velocity update, `a_act_k = (v_k - v_{k-1}) / dt + drag * v_{k-1}`,
/// which is exact (to roundoff) when the data came from the nominal plant
/// and the simulator's best estimate otherwise. Sample 0 carries zero
/// actuation because the collector spawns at rest.
pub fn reconstruct_state(ep: &Episode, k: usize, cfg: &DynamicsConfig) -> DroneState {
    let s = &ep.samples[k];
    let a_act = if k == 0 {
        Vec3::zeros()
    } else {
        let prev = &ep.samples[k - 1];
        (s.v - prev.v) / cfg.dt + prev.v * cfg.drag_coeff
    };
    let r3 = (a_act + Vec3::new(0.0, 0.0, cfg.gravity)).normalize();
    DroneState { p: s.p, v: s.v, a_act, r3 }
}

/// Fitting knobs. One averaged update per epoch keeps the reduction over
/// windows deterministic regardless of how the window loop is scheduled.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaFitConfig {
    /// BPTT window length (steps).
    pub window: usize,
    /// Optimization epochs; each applies one update from the mean window
    /// gradient.
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm cap on the averaged gradient.
    pub grad_clip: f64,
    /// Position weight in the state-mismatch norm.
    pub w_p: f64,
    /// Velocity weight in the state-mismatch norm.
    pub w_v: f64,
    /// Mean loss below this counts as a perfect reproduction of the data;
    /// updates stop there so roundoff noise cannot push the parameters off
    /// an exact fit (the mismatch norm has unit-size gradients however small
    /// the residual is).
    pub converged_loss: f64,
}

impl Default for DeltaFitConfig {
    fn default() -> Self {
        DeltaFitConfig {
            window: 90,
            epochs: 250,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 5.0,
            w_p: 1.0,
            w_v: 0.5,
            converged_loss: 1e-8,
        }
    }
}

impl DeltaFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("fit window must be at least one step".into()));
        }
        let pos = [("lr", self.lr), ("eps", self.eps), ("grad_clip", self.grad_clip)];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let nonneg =
            [("w_p", self.w_p), ("w_v", self.w_v), ("converged_loss", self.converged_loss)];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.w_p + self.w_v <= 0.0 {
            return Err(Error::Config("at least one state weight must be positive".into()));
        }
        Ok(())
    }
}

/// Fitted parameters plus the training curve: entry `e` is the mean window
/// loss with the parameters after `e` updates, so entry 0 is the untrained
/// mismatch and the last entry belongs to the returned parameters.
#[derive(Debug)]
pub struct DeltaFitOutput {
    pub params: ParamSet,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct FitWindow {
    ep: usize,
    start: usize,
    len: usize,
}

fn fit_windows(ds: &TransitionDataset, window: usize) -> Vec<FitWindow> {
    let mut out = Vec::new();
    for (i, ep) in ds.episodes.iter().enumerate() {
        let n = ep.transitions();
        let mut start = 0;
        while start < n {
            let len = window.min(n - start);
            out.push(FitWindow { ep: i, start, len });
            start += len;
        }
    }
    out
}

struct FitPlan {
    windows: Vec<FitWindow>,
    /// Reconstructed yaw per episode, one entry per transition.
    yaws: Vec<Vec<f64>>,
}

fn fit_plan(
    ds: &TransitionDataset,
    tracks: &[TrackSpec],
    r_q: f64,
    cfg: &DeltaFitConfig,
    dynamics: &DynamicsConfig,
) -> Result<FitPlan> {
    cfg.validate()?;
    ds.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("fitting needs a dataset with transitions".into()));
    }
    if (ds.dt - dynamics.dt).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "dataset sampled at dt={} but the nominal model steps at dt={}",
            ds.dt, dynamics.dt
        )));
    }
    for (i, ep) in ds.episodes.iter().enumerate() {
        if ep.track_index >= tracks.len() {
            return Err(Error::Config(format!(
                "episode {i} references track {} but only {} were given",
                ep.track_index,
                tracks.len()
            )));
        }
    }
    let yaws = ds
        .episodes
        .iter()
        .map(|ep| yaw_sequence(ep, &tracks[ep.track_index], r_q))
        .collect();
    Ok(FitPlan { windows: fit_windows(ds, cfg.window), yaws })
}

struct WindowRun {
    mean_loss: NodeRef,
    corrs: Vec<NodeRef>,
    sim_v: Vec<NodeRef>,
}

/// Replay one window on the tape: nominal dynamics under the recorded
/// action plus the correction, closed-loop in the simulated state, against
/// the recorded next states. The per-step loss is
/// `sqrt(w_p |dp|^2 + w_v |dv|^2)`, taken as the norm of a weighted stack so
/// a perfectly matched step has a defined (zero) subgradient.
#[allow(clippy::too_many_arguments)]
fn window_rollout(
    tape: &mut Tape,
    bound: &BoundParams,
    ep: &Episode,
    yaws: &[f64],
    w: FitWindow,
    dynamics: &DynamicsConfig,
    policy: &PolicyConfig,
    cfg: &DeltaFitConfig,
) -> WindowRun {
    let sqrt_wp = cfg.w_p.sqrt();
    let sqrt_wv = cfg.w_v.sqrt();
    let mut sim = reconstruct_state(ep, w.start, dynamics);
    let mut ts = init_tape_state(tape, &sim);
    let mut h: Option<NodeRef> = None;
    let mut losses = Vec::with_capacity(w.len);
    let mut corrs = Vec::with_capacity(w.len);
    let mut sim_v = Vec::with_capacity(w.len);
    for k in 0..w.len {
        let idx = w.start + k;
        let yaw = yaws[idx];
        // The residual net reads the simulated state, not the recorded one.
        let v_body = rotation_from_r3(sim.r3, yaw).transpose() * sim.v;
        let u_real = tape.constant_vec3(ep.samples[idx].u);
        let (corr, h_new) = delta_forward(v_body, sim.r3, u_real, h, bound, policy, tape);
        h = Some(h_new);
        corrs.push(corr);
        let cmd = tape.add(u_real, corr);
        ts = step(tape, &ts, cmd, yaw, dynamics);
        sim = read_tape_state(tape, &ts);
        sim_v.push(ts.v);
        let real = &ep.samples[idx + 1];
        let real_p = tape.constant_vec3(real.p);
        let real_v = tape.constant_vec3(real.v);
        let dp = tape.sub(ts.p, real_p);
        let dv = tape.sub(ts.v, real_v);
        let dpw = tape.mul_const(dp, sqrt_wp);
        let dvw = tape.mul_const(dv, sqrt_wv);
        let stack = tape.concat(&[dpw, dvw]);
        losses.push(tape.norm(stack));
    }
    let total = tape.sum_n(&losses);
    let mean_loss = tape.mul_const(total, 1.0 / w.len as f64);
    WindowRun { mean_loss, corrs, sim_v }
}

/// Fit the residual net to the dataset. Each epoch replays every window,
/// averages the flat gradient, clips it, and takes one Adam step; the loss
/// curve records the mean window loss before each update plus a final entry
/// for the returned parameters. Aborts with a numeric error when the loss
/// exceeds a thousand times its initial value.
pub fn fit_delta(
    dataset: &TransitionDataset,
    tracks: &[TrackSpec],
    init: ParamSet,
    dynamics: &DynamicsConfig,
    policy: &PolicyConfig,
    r_q: f64,
    cfg: &DeltaFitConfig,
) -> Result<DeltaFitOutput> {
    expect_manifest(&init, &delta_manifest())?;
    let plan = fit_plan(dataset, tracks, r_q, cfg, dynamics)?;
    let n_windows = plan.windows.len() as f64;
    let mut set = init;
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, set.data.len());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);

    for _ in 0..cfg.epochs {
        let mut grad_sum = vec![0.0; set.data.len()];
        let mut loss_sum = 0.0;
        for w in &plan.windows {
            let mut tape = Tape::new(1.0);
            let bound = BoundParams::bind(&set, &mut tape);
            let ep = &dataset.episodes[w.ep];
            let run = window_rollout(&mut tape, &bound, ep, &plan.yaws[w.ep], *w, dynamics, policy, cfg);
            loss_sum += tape.value_scalar(run.mean_loss);
            let grads = tape.backward(run.mean_loss, &[]);
            let flat = bound.flat_gradient(&grads, &set);
            for (g, f) in grad_sum.iter_mut().zip(&flat) {
                *g += f;
            }
        }
        let mean_loss = loss_sum / n_windows;
        curve.push(mean_loss);
        if !mean_loss.is_finite() || mean_loss > 1e3 * curve[0] {
            return Err(Error::Numeric(format!(
                "delta fit diverged at epoch {}: loss {mean_loss:.6e} against initial {:.6e}",
                curve.len() - 1,
                curve[0]
            )));
        }
        if mean_loss < cfg.converged_loss {
            continue;
        }
        let mut grad: Vec<f64> = grad_sum.iter().map(|g| g / n_windows).collect();
        clip_global_norm(&mut grad, cfg.grad_clip);
        opt.step(&mut set.data, &grad);
    }

    let mut loss_sum = 0.0;
    for w in &plan.windows {
        let mut tape = Tape::new(1.0);
        let bound = BoundParams::bind(&set, &mut tape);
        let ep = &dataset.episodes[w.ep];
        let run = window_rollout(&mut tape, &bound, ep, &plan.yaws[w.ep], *w, dynamics, policy, cfg);
        loss_sum += tape.value_scalar(run.mean_loss);
    }
    curve.push(loss_sum / n_windows);
    Ok(DeltaFitOutput { params: set, loss_curve: curve })
}

/// Mean fitted correction over every recorded transition, simulated values
/// only. On a constant-deficit target this converges to minus the deficit.
pub fn mean_correction(
    dataset: &TransitionDataset,
    tracks: &[TrackSpec],
    set: &ParamSet,
    dynamics: &DynamicsConfig,
    policy: &PolicyConfig,
    r_q: f64,
    cfg: &DeltaFitConfig,
) -> Result<Vec3> {
    let plan = fit_plan(dataset, tracks, r_q, cfg, dynamics)?;
    let mut sum = Vec3::zeros();
    let mut count = 0usize;
    for w in &plan.windows {
        let mut tape = Tape::new(1.0);
        let bound = BoundParams::bind(set, &mut tape);
        let ep = &dataset.episodes[w.ep];
        let run = window_rollout(&mut tape, &bound, ep, &plan.yaws[w.ep], *w, dynamics, policy, cfg);
        for c in &run.corrs {
            sum += tape.value_vec3(*c);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Worst-window root-mean-square error between simulated and recorded
/// velocity components (m/s), with the corrections in the loop. The
/// open-loop alignment check reads this after fitting.
pub fn velocity_rmse(
    dataset: &TransitionDataset,
    tracks: &[TrackSpec],
    set: &ParamSet,
    dynamics: &DynamicsConfig,
    policy: &PolicyConfig,
    r_q: f64,
    cfg: &DeltaFitConfig,
) -> Result<f64> {
    let plan = fit_plan(dataset, tracks, r_q, cfg, dynamics)?;
    let mut worst = 0.0f64;
    for w in &plan.windows {
        let mut tape = Tape::new(1.0);
        let bound = BoundParams::bind(set, &mut tape);
        let ep = &dataset.episodes[w.ep];
        let run = window_rollout(&mut tape, &bound, ep, &plan.yaws[w.ep], *w, dynamics, policy, cfg);
        let mut sq = 0.0;
        for (k, vn) in run.sim_v.iter().enumerate() {
            let sim_v = tape.value_vec3(*vn);
            let real_v = ep.samples[w.start + k + 1].v;
            sq += (sim_v - real_v).norm_squared();
        }
        worst = worst.max((sq / (3.0 * w.len as f64)).sqrt());
    }
    Ok(worst)
}

/// Stage three: fine-tune the policy with the fitted residual net riding
/// inside the simulator, frozen by construction (its parameters are bound to
/// the tape but never enter the update set). Evaluation runs the policy
/// alone on the target plant, the way deployed hardware would execute it.
/// Field injection follows `setup.train.avf_enabled`, same as plain
/// training.
#[allow(clippy::too_many_arguments)]
pub fn finetune_with_delta(
    setup: &RolloutSetup,
    sampler: &TrackSampler,
    seeds: &TrainSeeds,
    policy_init: ParamSet,
    delta: &ParamSet,
    target: &TargetDynamics,
    metrics: &mut dyn std::io::Write,
    on_checkpoint: impl FnMut(&str, &ParamSet) -> Result<()>,
) -> Result<TrainOutput> {
    target.validate()?;
    expect_manifest(delta, &delta_manifest())?;
    let plant = |s: &DroneState, u: Vec3, yaw: f64| target.step(s, u, yaw);
    train(setup, sampler, seeds, policy_init, Some(delta), Some(&plant), metrics, on_checkpoint)
}

/// Per-episode CSV header: time, then position, velocity, action.
pub const EPISODE_CSV_HEADER: &str = "t,px,py,pz,vx,vy,vz,ux,uy,uz";

const INDEX_CSV_HEADER: &str = "episode,file,track_index,samples";

/// Write the dataset as one CSV per episode plus an index manifest. Values
/// use shortest-round-trip formatting, so loading restores them bitwise.
pub fn save_dataset(dir: &Path, ds: &TransitionDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut index = format!("# dt={} source={}\n{INDEX_CSV_HEADER}\n", ds.dt, ds.source);
    for (i, ep) in ds.episodes.iter().enumerate() {
        let file = format!("episode_{i:03}.csv");
        index.push_str(&format!("{i},{file},{},{}\n", ep.track_index, ep.samples.len()));
        let mut body = String::with_capacity(32 * ep.samples.len());
        body.push_str(EPISODE_CSV_HEADER);
        body.push('\n');
        for s in &ep.samples {
            body.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.t, s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z, s.u.x, s.u.y, s.u.z
            ));
        }
        fs::write(dir.join(&file), body)?;
    }
    fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} in dataset: {s:?}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} in dataset: {s:?}")))
}

/// Load a dataset written by [`save_dataset`], validating headers, row
/// counts, and the dataset invariants.
pub fn load_dataset(dir: &Path) -> Result<TransitionDataset> {
    let text = fs::read_to_string(dir.join("index.csv"))?;
    let mut lines = text.lines();
    let meta = lines.next().ok_or_else(|| Error::Config("dataset index is empty".into()))?;
    let rest = meta.strip_prefix("# dt=").ok_or_else(|| {
        Error::Config(format!("dataset index must open with '# dt=', got {meta:?}"))
    })?;
    let (dt_str, source) = rest
        .split_once(" source=")
        .ok_or_else(|| Error::Config("dataset index metadata is missing 'source='".into()))?;
    let dt = parse_f64(dt_str, "index dt")?;
    let header = lines.next().unwrap_or_default();
    if header != INDEX_CSV_HEADER {
        return Err(Error::Config(format!(
            "dataset index header mismatch: expected {INDEX_CSV_HEADER:?}, got {header:?}"
        )));
    }
    let mut episodes = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!("index row {row} needs 4 fields: {line:?}")));
        }
        let idx = parse_usize(fields[0], "episode number")?;
        if idx != row {
            return Err(Error::Config(format!("index row {row} labeled {idx}")));
        }
        let track_index = parse_usize(fields[2], "track index")?;
        let expected = parse_usize(fields[3], "sample count")?;
        let ep_text = fs::read_to_string(dir.join(fields[1]))?;
        let mut ep_lines = ep_text.lines();
        let ep_header = ep_lines.next().unwrap_or_default();
        if ep_header != EPISODE_CSV_HEADER {
            return Err(Error::Config(format!(
                "episode file {} header mismatch: got {ep_header:?}",
                fields[1]
            )));
        }
        let mut samples = Vec::with_capacity(expected);
        for (n, sline) in ep_lines.enumerate() {
            let vals: Vec<&str> = sline.split(',').collect();
            if vals.len() != 10 {
                return Err(Error::Config(format!(
                    "episode file {} row {n} needs 10 fields: {sline:?}",
                    fields[1]
                )));
            }
            let mut f = [0.0f64; 10];
            for (j, v) in vals.iter().enumerate() {
                f[j] = parse_f64(v, "sample value")?;
            }
            samples.push(Sample {
                t: f[0],
                p: Vec3::new(f[1], f[2], f[3]),
                v: Vec3::new(f[4], f[5], f[6]),
                u: Vec3::new(f[7], f[8], f[9]),
            });
        }
        if samples.len() != expected {
            return Err(Error::Config(format!(
                "episode file {} holds {} samples but the index promises {expected}",
                fields[1],
                samples.len()
            )));
        }
        episodes.push(Episode { track_index, samples });
    }
    let ds = TransitionDataset { episodes, dt, source: source.to_string() };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step_numeric;
    use crate::field::FieldConfig;
    use crate::losses::{LossWeights, RewardWeights};
    use crate::policy::init_params;
    use crate::tape::Shape;
    use crate::trainer::TrainConfig;
    use crate::world::{TrackFamily, TrackGeometry, WorldConfig};
    use proptest::prelude::*;

    struct Fixture {
        dynamics: DynamicsConfig,
        field: FieldConfig,
        weights: LossWeights,
        reward: RewardWeights,
        world: WorldConfig,
        policy: PolicyConfig,
        train: TrainConfig,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                dynamics: DynamicsConfig::default(),
                field: FieldConfig::default(),
                weights: LossWeights::default(),
                reward: RewardWeights::default(),
                world: WorldConfig::default(),
                policy: PolicyConfig {
                    kind: PolicyKind::StateMlp,
                    mlp_hidden: 6,
                    ..PolicyConfig::default()
                },
                train: TrainConfig::default(),
            }
        }

        fn setup(&self) -> RolloutSetup<'_> {
            RolloutSetup {
                dynamics: &self.dynamics,
                field: &self.field,
                weights: &self.weights,
                reward: &self.reward,
                world: &self.world,
                policy: &self.policy,
                train: &self.train,
            }
        }
    }

    fn zigzag_track(seed: u64) -> TrackSpec {
        TrackSampler { family: TrackFamily::Zigzag, difficulty: 0, geometry: TrackGeometry::default() }
            .sample(seed)
            .unwrap()
    }

    /// Near-level forward command: crosses gates without diving.
    fn cruise_params(cfg: &PolicyConfig) -> ParamSet {
        let mut set = ParamSet::zeros(policy_manifest(cfg));
        let i = set.entries.iter().position(|e| e.name == "mlp.fc2.b").unwrap();
        let off = set.entries[i].offset;
        set.data[off] = 2.0;
        set.data[off + 2] = 0.4;
        set
    }

    fn biased_target(fix: &Fixture) -> TargetDynamics {
        TargetDynamics {
            action_bias: Vec3::new(0.5, 0.0, 0.0),
            ..TargetDynamics::nominal(fix.dynamics)
        }
    }

    fn assert_vec_bits(a: Vec3, b: Vec3) {
        assert_eq!(a.x.to_bits(), b.x.to_bits(), "{a:?} vs {b:?}");
        assert_eq!(a.y.to_bits(), b.y.to_bits(), "{a:?} vs {b:?}");
        assert_eq!(a.z.to_bits(), b.z.to_bits(), "{a:?} vs {b:?}");
    }

    #[test]
    fn target_validation_and_null_detection() {
        let base = DynamicsConfig::default();
        assert!(TargetDynamics::nominal(base).is_null());
        assert!(TargetDynamics::nominal(base).validate().is_ok());
        let biased = TargetDynamics {
            action_bias: Vec3::new(0.5, 0.0, 0.0),
            ..TargetDynamics::nominal(base)
        };
        assert!(!biased.is_null());
        assert!(biased.validate().is_ok());

        let mut t = TargetDynamics::nominal(base);
        t.mass_scale = 0.0;
        assert!(t.validate().is_err());
        t = TargetDynamics::nominal(base);
        t.extra_drag = -base.drag_coeff - 0.1;
        assert!(t.validate().is_err());
        t = TargetDynamics::nominal(base);
        t.extra_lag = -base.tau_act;
        assert!(t.validate().is_err());
        t = TargetDynamics::nominal(base);
        t.action_bias.y = f64::NAN;
        assert!(t.validate().is_err());
    }

    proptest! {
        // The null target is not merely close to the nominal integrator, it
        // is the same function to the last bit.
        #[test]
        fn null_target_is_the_nominal_plant_bitwise(
            px in -10.0f64..10.0, py in -10.0f64..10.0, pz in 0.0f64..4.0,
            vx in -8.0f64..8.0, vy in -8.0f64..8.0, vz in -4.0f64..4.0,
            ax in -10.0f64..10.0, ay in -10.0f64..10.0, az in -10.0f64..10.0,
            ux in -15.0f64..15.0, uy in -15.0f64..15.0, uz in -15.0f64..15.0,
            yaw in -3.2f64..3.2,
        ) {
            let cfg = DynamicsConfig::default();
            let target = TargetDynamics::nominal(cfg);
            let a_act = Vec3::new(ax, ay, az);
            let state = DroneState {
                p: Vec3::new(px, py, pz),
                v: Vec3::new(vx, vy, vz),
                a_act,
                r3: (a_act + Vec3::new(0.0, 0.0, cfg.gravity)).normalize(),
            };
            let cmd = Vec3::new(ux, uy, uz);
            let a = target.step(&state, cmd, yaw);
            let b = step_numeric(&state, cmd, yaw, &cfg);
            prop_assert_eq!(a.p.x.to_bits(), b.p.x.to_bits());
            prop_assert_eq!(a.p.y.to_bits(), b.p.y.to_bits());
            prop_assert_eq!(a.p.z.to_bits(), b.p.z.to_bits());
            prop_assert_eq!(a.v.x.to_bits(), b.v.x.to_bits());
            prop_assert_eq!(a.v.y.to_bits(), b.v.y.to_bits());
            prop_assert_eq!(a.v.z.to_bits(), b.v.z.to_bits());
            prop_assert_eq!(a.a_act.x.to_bits(), b.a_act.x.to_bits());
            prop_assert_eq!(a.a_act.y.to_bits(), b.a_act.y.to_bits());
            prop_assert_eq!(a.a_act.z.to_bits(), b.a_act.z.to_bits());
        }
    }

    #[test]
    fn collect_sizes_and_determinism() {
        let fix = Fixture::new();
        let tracks = vec![zigzag_track(3), zigzag_track(4)];
        let set = init_params(7, policy_manifest(&fix.policy));
        let target = TargetDynamics::nominal(fix.dynamics);

        let empty = collect(&set, &fix.setup(), &target, &tracks, 0, 40, 11).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.episodes.len(), 0);

        let run = || collect(&set, &fix.setup(), &target, &tracks, 3, 40, 11).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.episodes.len(), 3);
        assert_eq!(a.episodes[0].track_index, 0);
        assert_eq!(a.episodes[1].track_index, 1);
        assert_eq!(a.episodes[2].track_index, 0);
        assert_eq!(a.len(), a.episodes.iter().map(|e| e.samples.len() - 1).sum::<usize>());
        a.validate().unwrap();
        // Near-hover random policy flies the whole horizon.
        assert_eq!(a.episodes[0].transitions(), 40);
        for ep in &a.episodes {
            assert_eq!(ep.samples.last().unwrap().u, Vec3::zeros());
        }
    }

    // Replays a null-target episode through the nominal integrator using the
    // reconstructed yaw sequence. Exactness here pins down both the plant
    // identity and the yaw bookkeeping, across at least one gate pass.
    #[test]
    fn null_target_collection_replays_on_nominal_dynamics() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let set = cruise_params(&fix.policy);
        let target = TargetDynamics::nominal(fix.dynamics);
        let ds = collect(&set, &fix.setup(), &target, tracks, 1, 120, 5).unwrap();
        let ep = &ds.episodes[0];
        let yaws = yaw_sequence(ep, &track, fix.weights.r_q);
        assert_eq!(yaws.len(), ep.transitions());
        // The cruise policy should thread the first gate, which bends the
        // yaw sequence; a constant sequence would mean no pass happened.
        let turned = yaws.iter().any(|y| (y - yaws[0]).abs() > 0.3);
        assert!(turned, "expected a gate pass to change the target yaw");

        let mut state = DroneState::at_rest(ep.samples[0].p);
        assert_vec_bits(state.v, ep.samples[0].v);
        for (k, yaw) in yaws.iter().enumerate() {
            state = step_numeric(&state, ep.samples[k].u, *yaw, &fix.dynamics);
            assert_vec_bits(state.p, ep.samples[k + 1].p);
            assert_vec_bits(state.v, ep.samples[k + 1].v);
        }
    }

    #[test]
    fn reconstruction_matches_the_plant_mid_episode() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let set = cruise_params(&fix.policy);
        let target = TargetDynamics::nominal(fix.dynamics);
        let ds = collect(&set, &fix.setup(), &target, tracks, 1, 100, 2).unwrap();
        let ep = &ds.episodes[0];
        let yaws = yaw_sequence(ep, &track, fix.weights.r_q);

        // Oracle: walk the true integrator, keeping the hidden a_act.
        let mut state = DroneState::at_rest(ep.samples[0].p);
        for (s, yaw) in ep.samples.iter().zip(&yaws).take(60) {
            state = step_numeric(&state, s.u, *yaw, &fix.dynamics);
        }
        let rebuilt = reconstruct_state(ep, 60, &fix.dynamics);
        assert_vec_bits(rebuilt.p, state.p);
        assert_vec_bits(rebuilt.v, state.v);
        for i in 0..3 {
            assert!(
                (rebuilt.a_act[i] - state.a_act[i]).abs() < 1e-9,
                "a_act[{i}]: {} vs {}",
                rebuilt.a_act[i],
                state.a_act[i]
            );
        }
        assert!((rebuilt.r3 - state.r3).norm() < 1e-9);
        // Sample 0 is the at-rest spawn by convention.
        let s0 = reconstruct_state(ep, 0, &fix.dynamics);
        assert_eq!(s0.a_act, Vec3::zeros());
        assert_eq!(s0.r3, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn window_chunking_covers_every_transition_once() {
        let mk = |n: usize| Episode {
            track_index: 0,
            samples: (0..=n)
                .map(|k| Sample {
                    t: k as f64,
                    p: Vec3::zeros(),
                    v: Vec3::zeros(),
                    u: Vec3::zeros(),
                })
                .collect(),
        };
        let ds = TransitionDataset {
            episodes: vec![mk(200), mk(90), mk(1)],
            dt: 1.0,
            source: "test".into(),
        };
        let w = fit_windows(&ds, 90);
        let lens: Vec<(usize, usize, usize)> = w.iter().map(|x| (x.ep, x.start, x.len)).collect();
        assert_eq!(lens, vec![(0, 0, 90), (0, 90, 90), (0, 180, 20), (1, 0, 90), (2, 0, 1)]);
        assert_eq!(w.iter().map(|x| x.len).sum::<usize>(), ds.len());
    }

    // With no mismatch and a zero net, every window replays the data to
    // roundoff, the subgradient at the exact fit is zero, and the optimizer
    // has nothing to chase: the fit is a fixed point.
    #[test]
    fn null_mismatch_fit_is_a_fixed_point() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let set = cruise_params(&fix.policy);
        let target = TargetDynamics::nominal(fix.dynamics);
        let ds = collect(&set, &fix.setup(), &target, tracks, 2, 120, 9).unwrap();
        let cfg = DeltaFitConfig { epochs: 25, ..DeltaFitConfig::default() };
        let init = ParamSet::zeros(delta_manifest());
        let out = fit_delta(&ds, tracks, init, &fix.dynamics, &fix.policy, fix.weights.r_q, &cfg)
            .unwrap();
        assert_eq!(out.loss_curve.len(), 26);
        assert!(
            out.loss_curve[0] < 1e-10,
            "untrained null mismatch should be roundoff, got {}",
            out.loss_curve[0]
        );
        for l in &out.loss_curve {
            assert_eq!(l.to_bits(), out.loss_curve[0].to_bits());
        }
        assert!(out.params.data.iter().all(|p| *p == 0.0));
        let mc = mean_correction(
            &ds,
            tracks,
            &out.params,
            &fix.dynamics,
            &fix.policy,
            fix.weights.r_q,
            &cfg,
        )
        .unwrap();
        assert!(mc.norm() < 0.05, "null-mismatch corrections should stay tiny, got {mc:?}");
        let rmse = velocity_rmse(
            &ds,
            tracks,
            &out.params,
            &fix.dynamics,
            &fix.policy,
            fix.weights.r_q,
            &cfg,
        )
        .unwrap();
        assert!(rmse < 1e-6, "null replay should track velocity to roundoff, got {rmse}");
    }

    // A constant actuation deficit is exactly representable by the head
    // bias, so the fit should recover minus the deficit and the corrected
    // simulator should track the recorded velocities.
    #[test]
    fn bias_recovery_fits_the_deficit() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let set = cruise_params(&fix.policy);
        let target = biased_target(&fix);
        let ds = collect(&set, &fix.setup(), &target, tracks, 2, 120, 13).unwrap();
        assert_eq!(ds.len(), 240, "bias flights should survive the horizon");
        let cfg = DeltaFitConfig { epochs: 220, ..DeltaFitConfig::default() };
        let init = ParamSet::zeros(delta_manifest());
        let out = fit_delta(&ds, tracks, init, &fix.dynamics, &fix.policy, fix.weights.r_q, &cfg)
            .unwrap();
        let first = out.loss_curve[0];
        let last = *out.loss_curve.last().unwrap();
        assert!(last < 0.05 * first, "fit should collapse the mismatch: {first} -> {last}");

        let mc = mean_correction(
            &ds,
            tracks,
            &out.params,
            &fix.dynamics,
            &fix.policy,
            fix.weights.r_q,
            &cfg,
        )
        .unwrap();
        let want = -target.action_bias;
        assert!(
            (mc - want).norm() <= 0.05 * target.action_bias.norm(),
            "fitted correction {mc:?} should match {want:?} within 5%"
        );
        let rmse = velocity_rmse(
            &ds,
            tracks,
            &out.params,
            &fix.dynamics,
            &fix.policy,
            fix.weights.r_q,
            &cfg,
        )
        .unwrap();
        assert!(rmse < 0.1, "corrected velocity traces should align, rmse {rmse}");
    }

    // Far from the optimum the mismatch shrinks every epoch; keep the count
    // low enough to stay out of the terminal dither.
    #[test]
    fn fit_curve_is_non_increasing_early() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let set = cruise_params(&fix.policy);
        let target = biased_target(&fix);
        let ds = collect(&set, &fix.setup(), &target, tracks, 1, 120, 13).unwrap();
        let cfg = DeltaFitConfig { epochs: 40, ..DeltaFitConfig::default() };
        let init = ParamSet::zeros(delta_manifest());
        let out =
            fit_delta(&ds, tracks, init, &fix.dynamics, &fix.policy, fix.weights.r_q, &cfg)
                .unwrap();
        for pair in out.loss_curve.windows(2) {
            assert!(pair[1] <= pair[0], "loss rose from {} to {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let init = || ParamSet::zeros(delta_manifest());
        let cfg = DeltaFitConfig::default();
        let empty = TransitionDataset { episodes: vec![], dt: fix.dynamics.dt, source: "x".into() };
        assert!(matches!(
            fit_delta(&empty, tracks, init(), &fix.dynamics, &fix.policy, 0.2, &cfg),
            Err(Error::Config(_))
        ));

        let one = Episode {
            track_index: 5,
            samples: vec![
                Sample { t: 0.0, p: track.start, v: Vec3::zeros(), u: Vec3::zeros() },
                Sample { t: fix.dynamics.dt, p: track.start, v: Vec3::zeros(), u: Vec3::zeros() },
            ],
        };
        let bad_track = TransitionDataset {
            episodes: vec![one.clone()],
            dt: fix.dynamics.dt,
            source: "x".into(),
        };
        assert!(matches!(
            fit_delta(&bad_track, tracks, init(), &fix.dynamics, &fix.policy, 0.2, &cfg),
            Err(Error::Config(_))
        ));

        let mut ok = one;
        ok.track_index = 0;
        let wrong_dt =
            TransitionDataset { episodes: vec![ok], dt: 0.5, source: "x".into() };
        assert!(matches!(
            fit_delta(&wrong_dt, tracks, init(), &fix.dynamics, &fix.policy, 0.2, &cfg),
            Err(Error::Config(_))
        ));

        let zero_window = DeltaFitConfig { window: 0, ..DeltaFitConfig::default() };
        let ds = TransitionDataset { episodes: vec![], dt: fix.dynamics.dt, source: "x".into() };
        assert!(matches!(
            fit_delta(&ds, tracks, init(), &fix.dynamics, &fix.policy, 0.2, &zero_window),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fit_divergence_aborts_with_diagnostic() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let tracks = std::slice::from_ref(&track);
        let set = cruise_params(&fix.policy);
        // A nearly matched plant leaves a tiny initial mismatch, so one
        // oversized Adam step (unit scale against a 1e-4 deficit) hurls the
        // loss far past the thousandfold abort line.
        let target = TargetDynamics {
            action_bias: Vec3::new(1e-4, 0.0, 0.0),
            ..TargetDynamics::nominal(fix.dynamics)
        };
        let ds = collect(&set, &fix.setup(), &target, tracks, 1, 100, 21).unwrap();
        let cfg = DeltaFitConfig { epochs: 60, lr: 1.0, ..DeltaFitConfig::default() };
        let init = ParamSet::zeros(delta_manifest());
        let err =
            fit_delta(&ds, tracks, init, &fix.dynamics, &fix.policy, fix.weights.r_q, &cfg)
                .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("diverged"), "unexpected message {msg}"),
            other => panic!("expected a numeric abort, got {other:?}"),
        }
    }

    // The residual path with all-zero weights contributes exactly nothing:
    // same losses, same gradients, same evaluation, bit for bit.
    #[test]
    fn zero_delta_finetune_is_plain_finetuning() {
        let mut fix = Fixture::new();
        fix.train = TrainConfig {
            horizon: 8,
            envs: 2,
            iterations: 2,
            eval_every: 1,
            eval_trials: 1,
            eval_horizon: 12,
            ..TrainConfig::default()
        };
        let sampler = TrackSampler {
            family: TrackFamily::Zigzag,
            difficulty: 0,
            geometry: TrackGeometry::default(),
        };
        let seeds = TrainSeeds::from_root(31);
        let target = biased_target(&fix);
        let zero_delta = ParamSet::zeros(delta_manifest());
        let before = zero_delta.data.clone();

        let mut metrics_a = Vec::new();
        let out_a = finetune_with_delta(
            &fix.setup(),
            &sampler,
            &seeds,
            init_params(17, policy_manifest(&fix.policy)),
            &zero_delta,
            &target,
            &mut metrics_a,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(zero_delta.data, before, "fine-tuning must not touch the frozen net");

        let plant = |s: &DroneState, u: Vec3, yaw: f64| target.step(s, u, yaw);
        let mut metrics_b = Vec::new();
        let out_b = train(
            &fix.setup(),
            &sampler,
            &seeds,
            init_params(17, policy_manifest(&fix.policy)),
            None,
            Some(&plant),
            &mut metrics_b,
            |_, _| Ok(()),
        )
        .unwrap();

        assert_eq!(metrics_a, metrics_b);
        assert_eq!(out_a.params.data.len(), out_b.params.data.len());
        for (x, y) in out_a.params.data.iter().zip(&out_b.params.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn dataset_csv_round_trip_is_bitwise() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let set = init_params(7, policy_manifest(&fix.policy));
        let target = biased_target(&fix);
        let ds = collect(&set, &fix.setup(), &target, &[track], 2, 30, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.source, ds.source);
        assert_eq!(back.dt.to_bits(), ds.dt.to_bits());
        assert_eq!(back.episodes.len(), ds.episodes.len());
        for (a, b) in back.episodes.iter().zip(&ds.episodes) {
            assert_eq!(a.track_index, b.track_index);
            assert_eq!(a.samples.len(), b.samples.len());
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.t.to_bits(), y.t.to_bits());
                assert_vec_bits(x.p, y.p);
                assert_vec_bits(x.v, y.v);
                assert_vec_bits(x.u, y.u);
            }
        }
        // Same dataset, same bytes: the writer is deterministic.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &ds).unwrap();
        let idx_a = fs::read(dir.path().join("index.csv")).unwrap();
        let idx_b = fs::read(dir2.path().join("index.csv")).unwrap();
        assert_eq!(idx_a, idx_b);
        let ep_a = fs::read(dir.path().join("episode_000.csv")).unwrap();
        let ep_b = fs::read(dir2.path().join("episode_000.csv")).unwrap();
        assert_eq!(ep_a, ep_b);
    }

    #[test]
    fn dataset_load_rejects_corruption() {
        let fix = Fixture::new();
        let track = zigzag_track(6);
        let set = init_params(7, policy_manifest(&fix.policy));
        let target = TargetDynamics::nominal(fix.dynamics);
        let ds = collect(&set, &fix.setup(), &target, &[track], 1, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let ep_path = dir.path().join("episode_000.csv");
        let good = fs::read_to_string(&ep_path).unwrap();

        // Non-monotone time: swap the first two sample rows.
        let mut rows: Vec<&str> = good.lines().collect();
        rows.swap(1, 2);
        fs::write(&ep_path, rows.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Config(_))));

        // Wrong header.
        fs::write(&ep_path, good.replacen("t,px", "time,px", 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Config(_))));

        // Unparseable value.
        fs::write(&ep_path, good.replacen("0,", "zero,", 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Config(_))));
        fs::write(&ep_path, good).unwrap();
        load_dataset(dir.path()).unwrap();

        // Broken index metadata.
        let idx_path = dir.path().join("index.csv");
        let idx = fs::read_to_string(&idx_path).unwrap();
        fs::write(&idx_path, idx.replacen("# dt=", "# step=", 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn corrections_are_vec3_nodes() {
        // Guards the tape contract the fit loss relies on: corrections are
        // vec3, the stacked residual is a 6-vector, the loss a scalar.
        let fix = Fixture::new();
        let ep = Episode {
            track_index: 0,
            samples: vec![
                Sample { t: 0.0, p: Vec3::new(5.5, 3.5, 1.5), v: Vec3::zeros(), u: Vec3::new(1.0, 0.0, 0.0) },
                Sample { t: fix.dynamics.dt, p: Vec3::new(5.51, 3.5, 1.5), v: Vec3::new(0.2, 0.0, 0.0), u: Vec3::zeros() },
            ],
        };
        let set = ParamSet::zeros(delta_manifest());
        let mut tape = Tape::new(1.0);
        let bound = BoundParams::bind(&set, &mut tape);
        let cfg = DeltaFitConfig::default();
        let run = window_rollout(
            &mut tape,
            &bound,
            &ep,
            &[0.0],
            FitWindow { ep: 0, start: 0, len: 1 },
            &fix.dynamics,
            &fix.policy,
            &cfg,
        );
        assert_eq!(run.corrs.len(), 1);
        assert_eq!(run.corrs[0].shape, Shape::VEC3);
        assert_eq!(run.mean_loss.shape, Shape::Scalar);
        assert!(tape.value_scalar(run.mean_loss).is_finite());
    }
}
