//! Policy and residual-action networks, parameter layout, and checkpoints.
//!
//! Parameters live in one flat array partitioned by a named manifest; each
//! manifest entry becomes its own leaf on the tape, so gradients come back
//! per layer and reassemble into a flat vector aligned with the array. Two
//! policy bodies share the interface: the full depth CNN + GRU network, and
//! a small state-only MLP for fast experiments. All input scaling happens
//! inside the forward pass, so callers hand over raw SI observations.

use crate::dynamics::{clamp_command_tape, DynamicsConfig};
use crate::tape::{Gradients, NodeRef, Op, Shape, Tape};
use crate::world::{Observation, STATE_DIM};
use crate::{Error, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Depth image extents the conv encoder is hard-wired for.
pub const DEPTH_H: usize = 24;
pub const DEPTH_W: usize = 32;
const CONV1_CH: u32 = 8;
const CONV2_CH: u32 = 16;
/// Flattened conv output: 6 x 8 x 16.
const CONV_FLAT: u32 = 768;
const EMBED: u32 = 96;
const FUSED: u32 = 192;
const HEAD_HIDDEN: u32 = 64;
const DELTA_DIM: u32 = 32;
const DELTA_IN: u32 = 9;
pub const LEAKY_SLOPE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Depth encoder + state branch + GRU + head.
    CnnGru,
    /// 12 -> hidden -> 3 perceptron on the state vector alone.
    StateMlp,
}

/// Network selection and input scaling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub mlp_hidden: usize,
    /// Body-velocity input gain (1 / typical speed).
    pub scale_v: f64,
    /// Gate-offset input gain (1 / typical range).
    pub scale_gate: f64,
    /// Previous-command input gain; keep at 1 / a_max.
    pub scale_cmd: f64,
    /// Depth input gain; keep at 1 / far clamp.
    pub scale_depth: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::CnnGru,
            mlp_hidden: 32,
            scale_v: 0.2,
            scale_gate: 0.1,
            scale_cmd: 1.0 / 12.0,
            scale_depth: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp_hidden == 0 {
            return Err(Error::Config("policy.mlp_hidden must be positive".into()));
        }
        for (name, v) in [
            ("scale_v", self.scale_v),
            ("scale_gate", self.scale_gate),
            ("scale_cmd", self.scale_cmd),
            ("scale_depth", self.scale_depth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("policy.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// How an entry initializes: weights draw fan-in-scaled uniform values,
/// plain biases start at zero, carry biases (GRU update gate) start at +1 so
/// fresh networks remember before they react.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Weight,
    Bias,
    CarryBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: LayerKind,
    pub rows: u32,
    /// Fan-in for weights; 1 for biases.
    pub cols: u32,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn build_manifest(shapes: &[(&str, LayerKind, u32, u32)]) -> Vec<ManifestEntry> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(name, kind, rows, cols)| {
            let e = ManifestEntry { name: name.to_string(), kind, rows, cols, offset };
            offset += e.len();
            e
        })
        .collect()
}

/// Manifest of the selected policy body.
pub fn policy_manifest(cfg: &PolicyConfig) -> Vec<ManifestEntry> {
    use LayerKind::*;
    match cfg.kind {
        PolicyKind::CnnGru => build_manifest(&[
            ("conv1.w", Weight, CONV1_CH, 9),
            ("conv1.b", Bias, CONV1_CH, 1),
            ("conv2.w", Weight, CONV2_CH, CONV1_CH * 9),
            ("conv2.b", Bias, CONV2_CH, 1),
            ("depth_fc.w", Weight, EMBED, CONV_FLAT),
            ("depth_fc.b", Bias, EMBED, 1),
            ("state_fc.w", Weight, EMBED, STATE_DIM as u32),
            ("state_fc.b", Bias, EMBED, 1),
            ("gru.wz", Weight, FUSED, FUSED),
            ("gru.uz", Weight, FUSED, FUSED),
            ("gru.bz", CarryBias, FUSED, 1),
            ("gru.wr", Weight, FUSED, FUSED),
            ("gru.ur", Weight, FUSED, FUSED),
            ("gru.br", Bias, FUSED, 1),
            ("gru.wn", Weight, FUSED, FUSED),
            ("gru.un", Weight, FUSED, FUSED),
            ("gru.bn", Bias, FUSED, 1),
            ("head1.w", Weight, HEAD_HIDDEN, FUSED),
            ("head1.b", Bias, HEAD_HIDDEN, 1),
            ("head2.w", Weight, 3, HEAD_HIDDEN),
            ("head2.b", Bias, 3, 1),
        ]),
        PolicyKind::StateMlp => {
            let h = cfg.mlp_hidden as u32;
            build_manifest(&[
                ("mlp.fc1.w", Weight, h, STATE_DIM as u32),
                ("mlp.fc1.b", Bias, h, 1),
                ("mlp.fc2.w", Weight, 3, h),
                ("mlp.fc2.b", Bias, 3, 1),
            ])
        }
    }
}

/// Manifest of the residual-action network (9 inputs: body velocity,
/// attitude column, action).
pub fn delta_manifest() -> Vec<ManifestEntry> {
    use LayerKind::*;
    build_manifest(&[
        ("in_fc.w", Weight, DELTA_DIM, DELTA_IN),
        ("in_fc.b", Bias, DELTA_DIM, 1),
        ("gru.wz", Weight, DELTA_DIM, DELTA_DIM),
        ("gru.uz", Weight, DELTA_DIM, DELTA_DIM),
        ("gru.bz", CarryBias, DELTA_DIM, 1),
        ("gru.wr", Weight, DELTA_DIM, DELTA_DIM),
        ("gru.ur", Weight, DELTA_DIM, DELTA_DIM),
        ("gru.br", Bias, DELTA_DIM, 1),
        ("gru.wn", Weight, DELTA_DIM, DELTA_DIM),
        ("gru.un", Weight, DELTA_DIM, DELTA_DIM),
        ("gru.bn", Bias, DELTA_DIM, 1),
        ("head.w", Weight, 3, DELTA_DIM),
        ("head.b", Bias, 3, 1),
    ])
}

/// A manifest plus its flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ManifestEntry>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(entries: Vec<ManifestEntry>) -> Self {
        let len = entries.iter().map(ManifestEntry::len).sum();
        ParamSet { entries, data: vec![0.0; len] }
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let e = &self.entries[i];
        &self.data[e.offset..e.offset + e.len()]
    }

    /// Entries must tile the data exactly, in order, with no gaps.
    pub fn validate(&self) -> Result<()> {
        let mut expect = 0;
        for e in &self.entries {
            if e.offset != expect {
                return Err(Error::Config(format!(
                    "manifest entry {} starts at {}, expected {expect}",
                    e.name, e.offset
                )));
            }
            expect += e.len();
        }
        if expect != self.data.len() {
            return Err(Error::Config(format!(
                "manifest covers {expect} values but the array holds {}",
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform initialization, deterministic in the seed.
pub fn init_params(seed: u64, entries: Vec<ManifestEntry>) -> ParamSet {
    let mut set = ParamSet::zeros(entries);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..set.entries.len() {
        let e = set.entries[i].clone();
        let dst = &mut set.data[e.offset..e.offset + e.len()];
        match e.kind {
            LayerKind::Weight => {
                let bound = (3.0 / e.cols as f64).sqrt();
                for v in dst {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            LayerKind::Bias => {}
            LayerKind::CarryBias => dst.fill(1.0),
        }
    }
    set
}

/// Parameter leaves recorded on a tape, aligned with a manifest.
pub struct BoundParams {
    pub nodes: Vec<NodeRef>,
    names: Vec<String>,
}

impl BoundParams {
    /// Record every manifest entry as a tape parameter leaf.
    pub fn bind(set: &ParamSet, tape: &mut Tape) -> Self {
        let mut nodes = Vec::with_capacity(set.entries.len());
        let mut names = Vec::with_capacity(set.entries.len());
        for (i, e) in set.entries.iter().enumerate() {
            nodes.push(tape.param(set.slice(i)));
            names.push(e.name.clone());
        }
        BoundParams { nodes, names }
    }

    /// Leaf for a manifest entry. Missing names are programmer errors.
    pub fn node(&self, name: &str) -> NodeRef {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.nodes[i],
            None => panic!("no parameter layer named {name}"),
        }
    }

    /// Reassemble per-layer adjoints into one flat gradient aligned with the
    /// parameter array.
    pub fn flat_gradient(&self, grads: &Gradients, set: &ParamSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(set.data.len());
        for (i, e) in set.entries.iter().enumerate() {
            debug_assert_eq!(e.name, self.names[i]);
            out.extend_from_slice(grads.get(self.nodes[i]));
        }
        out
    }
}

fn linear(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: NodeRef, rows: u32, cols: u32) -> NodeRef {
    let w = bound.node(&format!("{prefix}.w"));
    let b = bound.node(&format!("{prefix}.b"));
    let wx = tape.matvec(w, x, rows, cols);
    tape.add(wx, b)
}

/// One gated recurrent step: z and r gates, candidate n, carry blend
/// `h' = z * h + (1 - z) * n`.
fn gru_cell(tape: &mut Tape, bound: &BoundParams, x: NodeRef, h: NodeRef, dim: u32) -> NodeRef {
    let gate = |tape: &mut Tape, wname: &str, uname: &str, bname: &str| {
        let w = bound.node(wname);
        let u = bound.node(uname);
        let b = bound.node(bname);
        let wx = tape.matvec(w, x, dim, dim);
        let uh = tape.matvec(u, h, dim, dim);
        let s = tape.sum_n(&[wx, uh]);
        tape.add(s, b)
    };
    let z_pre = gate(tape, "gru.wz", "gru.uz", "gru.bz");
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, "gru.wr", "gru.ur", "gru.br");
    let r = tape.sigmoid(r_pre);
    let wn = bound.node("gru.wn");
    let un = bound.node("gru.un");
    let bn = bound.node("gru.bn");
    let wx = tape.matvec(wn, x, dim, dim);
    let uh = tape.matvec(un, h, dim, dim);
    let ruh = tape.mul(r, uh);
    let pre = tape.sum_n(&[wx, ruh]);
    let n_pre = tape.add(pre, bn);
    let n = tape.tanh(n_pre);
    let zh = tape.mul(z, h);
    let neg_z = tape.mul_const(z, -1.0);
    let one_minus_z = tape.add_const(neg_z, 1.0);
    let zn = tape.mul(one_minus_z, n);
    tape.add(zh, zn)
}

/// Carry the recurrent state across the step boundary, or start fresh.
fn carry_hidden(tape: &mut Tape, h_prev: Option<NodeRef>, dim: u32) -> NodeRef {
    match h_prev {
        Some(h) => tape.carry(h),
        None => tape.constant(&vec![0.0; dim as usize]),
    }
}

/// Run the policy on one observation. The hidden state threads through the
/// tape's step decay like any other carried quantity; pass `None` at episode
/// start. Returns the clamped body-frame acceleration command and the new
/// hidden node (`None` for the feedforward body).
pub fn policy_forward(
    obs: &Observation,
    h_prev: Option<NodeRef>,
    bound: &BoundParams,
    cfg: &PolicyConfig,
    dyn_cfg: &DynamicsConfig,
    tape: &mut Tape,
) -> Result<(NodeRef, Option<NodeRef>)> {
    let sv = obs.state_vector();
    let mut scaled = [0.0; STATE_DIM];
    for k in 0..3 {
        scaled[k] = sv[k] * cfg.scale_v;
        scaled[3 + k] = sv[3 + k];
        scaled[6 + k] = sv[6 + k] * cfg.scale_gate;
        scaled[9 + k] = sv[9 + k] * cfg.scale_cmd;
    }
    let state_in = tape.constant(&scaled);
    match cfg.kind {
        PolicyKind::StateMlp => {
            let h = cfg.mlp_hidden as u32;
            let pre = linear(tape, bound, "mlp.fc1", state_in, h, STATE_DIM as u32);
            let act = tape.leaky_relu(pre, LEAKY_SLOPE);
            let raw = linear(tape, bound, "mlp.fc2", act, 3, h);
            let cmd = clamp_command_tape(tape, raw, dyn_cfg);
            Ok((cmd, None))
        }
        PolicyKind::CnnGru => {
            let depth = obs.depth.as_ref().ok_or_else(|| {
                Error::Config("depth policy needs a rendered depth image".into())
            })?;
            if depth.len() != DEPTH_H * DEPTH_W {
                return Err(Error::Config(format!(
                    "depth image has {} pixels, expected {}",
                    depth.len(),
                    DEPTH_H * DEPTH_W
                )));
            }
            let px: Vec<f64> = depth.iter().map(|d| d * cfg.scale_depth).collect();
            let img = tape.constant(&px);
            let c1w = bound.node("conv1.w");
            let c1b = bound.node("conv1.b");
            let c1 = tape.record(Op::Conv2d {
                input: img,
                weights: c1w,
                bias: c1b,
                in_h: DEPTH_H as u32,
                in_w: DEPTH_W as u32,
                in_ch: 1,
                out_ch: CONV1_CH,
            });
            let a1 = tape.leaky_relu(c1, LEAKY_SLOPE);
            let c2w = bound.node("conv2.w");
            let c2b = bound.node("conv2.b");
            let c2 = tape.record(Op::Conv2d {
                input: a1,
                weights: c2w,
                bias: c2b,
                in_h: (DEPTH_H / 2) as u32,
                in_w: (DEPTH_W / 2) as u32,
                in_ch: CONV1_CH,
                out_ch: CONV2_CH,
            });
            let a2 = tape.leaky_relu(c2, LEAKY_SLOPE);
            let d_pre = linear(tape, bound, "depth_fc", a2, EMBED, CONV_FLAT);
            let d_emb = tape.leaky_relu(d_pre, LEAKY_SLOPE);
            let s_pre = linear(tape, bound, "state_fc", state_in, EMBED, STATE_DIM as u32);
            let s_emb = tape.leaky_relu(s_pre, LEAKY_SLOPE);
            let fused = tape.concat(&[d_emb, s_emb]);
            let h = carry_hidden(tape, h_prev, FUSED);
            let h_new = gru_cell(tape, bound, fused, h, FUSED);
            let h1_pre = linear(tape, bound, "head1", h_new, HEAD_HIDDEN, FUSED);
            let h1 = tape.leaky_relu(h1_pre, LEAKY_SLOPE);
            let raw = linear(tape, bound, "head2", h1, 3, HEAD_HIDDEN);
            let cmd = clamp_command_tape(tape, raw, dyn_cfg);
            Ok((cmd, Some(h_new)))
        }
    }
}

/// Run the residual-action network. State inputs (`v_body`, `r3`) enter
/// detached as constants; the action input stays live on the tape so
/// fine-tuning gradients flow through the correction into the policy.
pub fn delta_forward(
    v_body: Vec3,
    r3: Vec3,
    action: NodeRef,
    h_prev: Option<NodeRef>,
    bound: &BoundParams,
    cfg: &PolicyConfig,
    tape: &mut Tape,
) -> (NodeRef, NodeRef) {
    assert_eq!(action.shape, Shape::VEC3, "delta_forward wants a vec3 action");
    let state = tape.constant(&[
        v_body.x * cfg.scale_v,
        v_body.y * cfg.scale_v,
        v_body.z * cfg.scale_v,
        r3.x,
        r3.y,
        r3.z,
    ]);
    let act_scaled = tape.mul_const(action, cfg.scale_cmd);
    let x = tape.concat(&[state, act_scaled]);
    let pre = linear(tape, bound, "in_fc", x, DELTA_DIM, DELTA_IN);
    let a = tape.leaky_relu(pre, LEAKY_SLOPE);
    let h = carry_hidden(tape, h_prev, DELTA_DIM);
    let h_new = gru_cell(tape, bound, a, h, DELTA_DIM);
    let corr = linear(tape, bound, "head", h_new, 3, DELTA_DIM);
    (corr, h_new)
}

/// Checkpoint container version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Which network this is ("policy" or "delta").
    pub kind: String,
    /// Hash of the run configuration that produced the parameters.
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
    pub len: usize,
}

/// Write a checkpoint: one JSON header line, then the raw little-endian f64
/// payload.
pub fn save_checkpoint(path: &Path, set: &ParamSet, kind: &str, config_hash: &str) -> Result<()> {
    set.validate()?;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        entries: set.entries.clone(),
        len: set.data.len(),
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header).map_err(|e| Error::Io(e.into()))?;
    file.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(set.data.len() * 8);
    for v in &set.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Read a checkpoint back. Rejects unknown versions, truncated payloads, and
/// manifests that fail the partition invariant.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Config(format!("{}: missing checkpoint header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Config(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint version {} unsupported (want {CHECKPOINT_VERSION})",
            path.display(),
            header.version
        )));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != header.len * 8 {
        return Err(Error::Config(format!(
            "{}: payload holds {} bytes, header promises {}",
            path.display(),
            payload.len(),
            header.len * 8
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let set = ParamSet { entries: header.entries.clone(), data };
    set.validate()?;
    Ok((set, header))
}

/// Reject a loaded manifest that does not match the expected architecture.
pub fn expect_manifest(set: &ParamSet, expected: &[ManifestEntry]) -> Result<()> {
    if set.entries != expected {
        return Err(Error::Config(
            "checkpoint manifest does not match the configured architecture".into(),
        ));
    }
    Ok(())
}
