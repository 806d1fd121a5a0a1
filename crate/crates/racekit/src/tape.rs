//! Reverse-mode autodiff tape with per-step gradient decay and gradient
//! injection.
//!
//! The tape is a flat arena of nodes recorded in execution order. Each node
//! owns its forward value (`Vec<f64>`), so the numeric rollout state can
//! always be read back from the tape without a separate mirror computation.
//!
//! Two features distinguish this tape from a plain Wengert list:
//!
//! * **Step decay.** Rollouts call [`Tape::mark_step`] once per dynamics
//!   step; state carried across the boundary goes through an explicit
//!   [`Op::Carry`] node. During the backward sweep an adjoint crossing a
//!   carry is multiplied by `decay_factor` once per step boundary the carry
//!   spans. Only carries decay: command and loss edges that merely happen to
//!   cross a boundary propagate undecayed, which is exactly the discounted
//!   BPTT gradient (the per-transition factor `exp(-alpha * dt)` applied to
//!   the state-to-state Jacobian chain and nothing else).
//! * **Gradient injection.** [`Tape::backward`] accepts a list of
//!   (vec3 node, vector) pairs; when the reverse sweep reaches an injected
//!   node, the vector is subtracted from its accumulated adjoint before the
//!   node propagates upstream. The trainer uses this to splice gate-field
//!   pull (`-u_A`) into the position-gradient channel so the effective
//!   position gradient is `grad_p(L) - u_A`.
//!
//! Shape mismatches and malformed injections are programmer errors and panic
//! with a diagnostic naming the op and shapes involved.

use crate::Vec3;

/// Node value shape. `Vec(3)` doubles as the vec3 shape used by states,
/// commands, and injections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vec(u32),
}

impl Shape {
    pub const VEC3: Shape = Shape::Vec(3);

    /// Number of scalar slots this shape occupies.
    pub fn len(&self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vec(n) => *n as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a recorded node. Cheap to copy; carries its shape so call sites
/// can be validated without a tape lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub index: u32,
    pub shape: Shape,
}

/// Recorded operation. Inputs are embedded as [`NodeRef`]s; constant payloads
/// (e.g. the scalar in [`Op::MulConst`]) ride along and are not
/// differentiated.
#[derive(Debug, Clone)]
pub enum Op {
    /// Source node: parameter, constant, or detached input. `param` only
    /// affects bookkeeping (gradient tables are read for parameter leaves).
    Leaf { param: bool },
    /// State carried across step boundaries; the only op whose backward rule
    /// applies the per-step decay factor.
    Carry { x: NodeRef },
    /// Identity forward, blocks gradient flow entirely.
    Detach { x: NodeRef },
    Add { a: NodeRef, b: NodeRef },
    Sub { a: NodeRef, b: NodeRef },
    /// Elementwise product.
    Mul { a: NodeRef, b: NodeRef },
    /// Elementwise quotient.
    Div { a: NodeRef, b: NodeRef },
    AddConst { x: NodeRef, c: f64 },
    MulConst { x: NodeRef, c: f64 },
    /// Inner product of same-shape vectors, yields a scalar.
    Dot { a: NodeRef, b: NodeRef },
    /// Cross product, vec3 only.
    Cross { a: NodeRef, b: NodeRef },
    /// Euclidean norm, yields a scalar. Subgradient 0 at the origin.
    Norm { x: NodeRef },
    /// x / ||x||. Guarded by a tiny floor so a zero vector does not produce
    /// NaNs; the guard is far below any physical magnitude in this crate.
    Normalize { x: NodeRef },
    /// Elementwise sqrt. Subgradient 0 where the input is exactly 0, so a
    /// perfectly fitted residual loss has a defined (zero) gradient.
    Sqrt { x: NodeRef },
    Exp { x: NodeRef },
    Ln { x: NodeRef },
    /// Numerically stable ln(1 + e^x), elementwise.
    Softplus { x: NodeRef },
    /// max(x, 0) elementwise. Subgradient 0 at the kink.
    Relu { x: NodeRef },
    LeakyRelu { x: NodeRef, slope: f64 },
    Sigmoid { x: NodeRef },
    Tanh { x: NodeRef },
    /// Extract one component of a vector as a scalar.
    Select { x: NodeRef, i: u32 },
    /// Vector times scalar node.
    ScaleVec { v: NodeRef, s: NodeRef },
    /// Row-major (rows x cols) matrix stored as a vector node, times a
    /// vector.
    MatVec { m: NodeRef, x: NodeRef, rows: u32, cols: u32 },
    /// 3x3 convolution, stride 2, zero padding 1 (the only geometry the depth
    /// encoder uses). Input is (in_ch, in_h, in_w) flattened row-major,
    /// weights (out_ch, in_ch, 3, 3), bias (out_ch).
    Conv2d {
        input: NodeRef,
        weights: NodeRef,
        bias: NodeRef,
        in_h: u32,
        in_w: u32,
        in_ch: u32,
        out_ch: u32,
    },
    Concat { parts: Vec<NodeRef> },
    /// Elementwise sum of same-shape nodes.
    SumN { parts: Vec<NodeRef> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Shape,
    step: u32,
}

/// Pairs a vec3 node (a rollout position) with a vector to subtract from its
/// adjoint during the backward sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradientInjection {
    pub node: NodeRef,
    pub vector: Vec3,
}

/// Adjoints for every node of a tape after one backward sweep.
pub struct Gradients {
    adj: Vec<Vec<f64>>,
}

impl Gradients {
    /// Adjoint buffer of `n`. Zero-filled if the loss (and injections) never
    /// reached it.
    pub fn get(&self, n: NodeRef) -> &[f64] {
        &self.adj[n.index as usize]
    }

    pub fn get_vec3(&self, n: NodeRef) -> Vec3 {
        let g = self.get(n);
        assert!(g.len() == 3, "get_vec3 on node of length {}", g.len());
        Vec3::new(g[0], g[1], g[2])
    }
}

const CONV_K: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

/// Output extent of the fixed 3x3/stride-2/pad-1 convolution along one axis.
pub fn conv_out_extent(n: usize) -> usize {
    (n + 2 * CONV_PAD - CONV_K) / CONV_STRIDE + 1
}

/// Floor used by [`Op::Normalize`] to keep a zero vector finite.
const NORMALIZE_FLOOR: f64 = 1e-300;

pub struct Tape {
    nodes: Vec<Node>,
    decay_factor: f64,
    current_step: u32,
}

impl Tape {
    /// `decay_factor` is the per-step-boundary adjoint multiplier,
    /// `exp(-alpha * dt)` in the trainer. `1.0` disables decay exactly.
    pub fn new(decay_factor: f64) -> Self {
        assert!(
            decay_factor.is_finite() && decay_factor > 0.0 && decay_factor <= 1.0,
            "decay_factor must be in (0, 1], got {decay_factor}"
        );
        Tape { nodes: Vec::new(), decay_factor, current_step: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn decay_factor(&self) -> f64 {
        self.decay_factor
    }

    /// Step index nodes are currently being recorded into.
    pub fn current_step(&self) -> u32 {
        self.current_step
    }

    /// Step index a node was recorded in.
    pub fn step_of(&self, n: NodeRef) -> u32 {
        self.nodes[n.index as usize].step
    }

    /// Advance the step counter; all subsequently recorded nodes belong to
    /// the new step. Called once per dynamics step.
    pub fn mark_step(&mut self) {
        self.current_step += 1;
    }

    /// Forward value of a node.
    pub fn value(&self, n: NodeRef) -> &[f64] {
        &self.nodes[n.index as usize].value
    }

    pub fn value_scalar(&self, n: NodeRef) -> f64 {
        assert!(n.shape == Shape::Scalar, "value_scalar on {:?}", n.shape);
        self.nodes[n.index as usize].value[0]
    }

    pub fn value_vec3(&self, n: NodeRef) -> Vec3 {
        let v = self.value(n);
        assert!(v.len() == 3, "value_vec3 on node of length {}", v.len());
        Vec3::new(v[0], v[1], v[2])
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&mut self, values: &[f64]) -> NodeRef {
        self.push_leaf(values, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeRef {
        self.push_leaf(&[v], false)
    }

    pub fn constant_vec3(&mut self, v: Vec3) -> NodeRef {
        self.push_leaf(&[v.x, v.y, v.z], false)
    }

    /// Parameter leaf: a gradient-table entry the optimizer will read.
    pub fn param(&mut self, values: &[f64]) -> NodeRef {
        self.push_leaf(values, true)
    }

    fn push_leaf(&mut self, values: &[f64], param: bool) -> NodeRef {
        let shape = if values.len() == 1 { Shape::Scalar } else { Shape::Vec(values.len() as u32) };
        self.push(Op::Leaf { param }, values.to_vec(), shape)
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Shape) -> NodeRef {
        assert!(
            value.len() == shape.len(),
            "node value length {} does not match shape {:?}",
            value.len(),
            shape
        );
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { op, value, shape, step: self.current_step });
        NodeRef { index, shape }
    }

    // -- recording ---------------------------------------------------------

    /// Record one operation. The typed helpers below all funnel through here;
    /// `record` computes the forward value, validates shapes, and stamps the
    /// node with the current step.
    pub fn record(&mut self, op: Op) -> NodeRef {
        let (value, shape) = self.eval(&op);
        self.push(op, value, shape)
    }

    fn val(&self, n: NodeRef) -> &[f64] {
        &self.nodes[n.index as usize].value
    }

    fn eval(&self, op: &Op) -> (Vec<f64>, Shape) {
        match *op {
            Op::Leaf { .. } => panic!("leaves are recorded via constant()/param(), not record()"),
            Op::Carry { x } | Op::Detach { x } => (self.val(x).to_vec(), x.shape),
            Op::Add { a, b } => self.zip(op, a, b, |x, y| x + y),
            Op::Sub { a, b } => self.zip(op, a, b, |x, y| x - y),
            Op::Mul { a, b } => self.zip(op, a, b, |x, y| x * y),
            Op::Div { a, b } => self.zip(op, a, b, |x, y| x / y),
            Op::AddConst { x, c } => (self.val(x).iter().map(|v| v + c).collect(), x.shape),
            Op::MulConst { x, c } => (self.val(x).iter().map(|v| v * c).collect(), x.shape),
            Op::Dot { a, b } => {
                self.same_shape(op, a, b);
                let s = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x * y).sum();
                (vec![s], Shape::Scalar)
            }
            Op::Cross { a, b } => {
                assert!(
                    a.shape == Shape::VEC3 && b.shape == Shape::VEC3,
                    "Cross requires vec3 inputs, got {:?} x {:?}",
                    a.shape,
                    b.shape
                );
                let (x, y) = (self.val(a), self.val(b));
                let v = vec![
                    x[1] * y[2] - x[2] * y[1],
                    x[2] * y[0] - x[0] * y[2],
                    x[0] * y[1] - x[1] * y[0],
                ];
                (v, Shape::VEC3)
            }
            Op::Norm { x } => {
                let s = self.val(x).iter().map(|v| v * v).sum::<f64>().sqrt();
                (vec![s], Shape::Scalar)
            }
            Op::Normalize { x } => {
                let v = self.val(x);
                let n = v.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMALIZE_FLOOR);
                (v.iter().map(|v| v / n).collect(), x.shape)
            }
            Op::Sqrt { x } => (self.val(x).iter().map(|v| v.sqrt()).collect(), x.shape),
            Op::Exp { x } => (self.val(x).iter().map(|v| v.exp()).collect(), x.shape),
            Op::Ln { x } => (self.val(x).iter().map(|v| v.ln()).collect(), x.shape),
            Op::Softplus { x } => (self.val(x).iter().map(|&v| softplus(v)).collect(), x.shape),
            Op::Relu { x } => (self.val(x).iter().map(|v| v.max(0.0)).collect(), x.shape),
            Op::LeakyRelu { x, slope } => {
                (self.val(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(), x.shape)
            }
            Op::Sigmoid { x } => (self.val(x).iter().map(|&v| sigmoid(v)).collect(), x.shape),
            Op::Tanh { x } => (self.val(x).iter().map(|v| v.tanh()).collect(), x.shape),
            Op::Select { x, i } => {
                assert!(
                    (i as usize) < x.shape.len(),
                    "Select index {i} out of range for {:?}",
                    x.shape
                );
                (vec![self.val(x)[i as usize]], Shape::Scalar)
            }
            Op::ScaleVec { v, s } => {
                assert!(s.shape == Shape::Scalar, "ScaleVec scale must be scalar, got {:?}", s.shape);
                let c = self.val(s)[0];
                (self.val(v).iter().map(|x| x * c).collect(), v.shape)
            }
            Op::MatVec { m, x, rows, cols } => {
                assert!(
                    m.shape.len() == (rows * cols) as usize,
                    "MatVec matrix node has {} slots, expected {}x{}",
                    m.shape.len(),
                    rows,
                    cols
                );
                assert!(
                    x.shape.len() == cols as usize,
                    "MatVec vector has {} slots, expected {}",
                    x.shape.len(),
                    cols
                );
                let (mv, xv) = (self.val(m), self.val(x));
                let mut out = vec![0.0; rows as usize];
                for r in 0..rows as usize {
                    let row = &mv[r * cols as usize..(r + 1) * cols as usize];
                    out[r] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
                }
                (out, Shape::Vec(rows))
            }
            Op::Conv2d { input, weights, bias, in_h, in_w, in_ch, out_ch } => {
                let (ih, iw, ic, oc) = (in_h as usize, in_w as usize, in_ch as usize, out_ch as usize);
                assert!(
                    input.shape.len() == ic * ih * iw,
                    "Conv2d input has {} slots, expected {}x{}x{}",
                    input.shape.len(),
                    ic,
                    ih,
                    iw
                );
                assert!(
                    weights.shape.len() == oc * ic * CONV_K * CONV_K,
                    "Conv2d weights have {} slots, expected {}x{}x3x3",
                    weights.shape.len(),
                    oc,
                    ic
                );
                assert!(bias.shape.len() == oc, "Conv2d bias has {} slots, expected {}", bias.shape.len(), oc);
                let (oh, ow) = (conv_out_extent(ih), conv_out_extent(iw));
                let (xv, wv, bv) = (self.val(input), self.val(weights), self.val(bias));
                let mut out = vec![0.0; oc * oh * ow];
                for co in 0..oc {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = bv[co];
                            for ci in 0..ic {
                                for ky in 0..CONV_K {
                                    let y = (r * CONV_STRIDE + ky) as isize - CONV_PAD as isize;
                                    if y < 0 || y >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..CONV_K {
                                        let x = (c * CONV_STRIDE + kx) as isize - CONV_PAD as isize;
                                        if x < 0 || x >= iw as isize {
                                            continue;
                                        }
                                        let xi = (ci * ih + y as usize) * iw + x as usize;
                                        let wi = ((co * ic + ci) * CONV_K + ky) * CONV_K + kx;
                                        acc += xv[xi] * wv[wi];
                                    }
                                }
                            }
                            out[(co * oh + r) * ow + c] = acc;
                        }
                    }
                }
                (out, Shape::Vec((oc * oh * ow) as u32))
            }
            Op::Concat { ref parts } => {
                assert!(!parts.is_empty(), "Concat of zero parts");
                let mut out = Vec::new();
                for p in parts {
                    out.extend_from_slice(self.val(*p));
                }
                let n = out.len() as u32;
                (out, Shape::Vec(n))
            }
            Op::SumN { ref parts } => {
                assert!(!parts.is_empty(), "SumN of zero parts");
                let shape = parts[0].shape;
                for p in parts {
                    assert!(
                        p.shape == shape,
                        "SumN shape mismatch: {:?} vs {:?}",
                        p.shape,
                        shape
                    );
                }
                let mut out = vec![0.0; shape.len()];
                for p in parts {
                    for (o, v) in out.iter_mut().zip(self.val(*p)) {
                        *o += v;
                    }
                }
                (out, shape)
            }
        }
    }

    fn zip(&self, op: &Op, a: NodeRef, b: NodeRef, f: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Shape) {
        self.same_shape(op, a, b);
        (self.val(a).iter().zip(self.val(b)).map(|(x, y)| f(*x, *y)).collect(), a.shape)
    }

    fn same_shape(&self, op: &Op, a: NodeRef, b: NodeRef) {
        assert!(
            a.shape == b.shape,
            "{} inputs must share a shape, got {:?} vs {:?}",
            op_name(op),
            a.shape,
            b.shape
        );
    }

    // -- typed helpers -----------------------------------------------------

    pub fn carry(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Carry { x })
    }
    pub fn detach(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Detach { x })
    }
    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.record(Op::Add { a, b })
    }
    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.record(Op::Sub { a, b })
    }
    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.record(Op::Mul { a, b })
    }
    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.record(Op::Div { a, b })
    }
    pub fn add_const(&mut self, x: NodeRef, c: f64) -> NodeRef {
        self.record(Op::AddConst { x, c })
    }
    pub fn mul_const(&mut self, x: NodeRef, c: f64) -> NodeRef {
        self.record(Op::MulConst { x, c })
    }
    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.record(Op::Dot { a, b })
    }
    pub fn cross(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.record(Op::Cross { a, b })
    }
    pub fn norm(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Norm { x })
    }
    pub fn normalize(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Normalize { x })
    }
    pub fn sqrt(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Sqrt { x })
    }
    pub fn exp(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Exp { x })
    }
    pub fn ln(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Ln { x })
    }
    pub fn softplus(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Softplus { x })
    }
    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Relu { x })
    }
    pub fn leaky_relu(&mut self, x: NodeRef, slope: f64) -> NodeRef {
        self.record(Op::LeakyRelu { x, slope })
    }
    pub fn sigmoid(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Sigmoid { x })
    }
    pub fn tanh(&mut self, x: NodeRef) -> NodeRef {
        self.record(Op::Tanh { x })
    }
    pub fn select(&mut self, x: NodeRef, i: u32) -> NodeRef {
        self.record(Op::Select { x, i })
    }
    pub fn scale_vec(&mut self, v: NodeRef, s: NodeRef) -> NodeRef {
        self.record(Op::ScaleVec { v, s })
    }
    pub fn matvec(&mut self, m: NodeRef, x: NodeRef, rows: u32, cols: u32) -> NodeRef {
        self.record(Op::MatVec { m, x, rows, cols })
    }
    pub fn concat(&mut self, parts: &[NodeRef]) -> NodeRef {
        self.record(Op::Concat { parts: parts.to_vec() })
    }
    pub fn sum_n(&mut self, parts: &[NodeRef]) -> NodeRef {
        self.record(Op::SumN { parts: parts.to_vec() })
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Injections are subtracted from their
    /// target node's accumulated adjoint at the moment that node is visited,
    /// i.e. after every downstream consumer has contributed and before the
    /// node propagates to its own inputs. An empty injection list makes this
    /// standard reverse-mode accumulation, bit for bit.
    pub fn backward(&self, loss: NodeRef, injections: &[GradientInjection]) -> Gradients {
        assert!(
            loss.shape == Shape::Scalar,
            "backward seed must be a scalar node, got {:?}",
            loss.shape
        );
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.shape.len()]).collect();
        adj[loss.index as usize][0] = 1.0;

        // Injection lookup: node index -> summed vector. Duplicate targets
        // accumulate, matching the additive semantics of the channel.
        let mut inj: Vec<(u32, Vec3)> = Vec::with_capacity(injections.len());
        for g in injections {
            assert!(
                g.node.shape == Shape::VEC3,
                "gradient injection targets must be vec3 nodes, got {:?}",
                g.node.shape
            );
            assert!(
                g.vector.iter().all(|v| v.is_finite()),
                "gradient injection vector must be finite, got {:?}",
                g.vector
            );
            match inj.iter_mut().find(|(i, _)| *i == g.node.index) {
                Some((_, v)) => *v += g.vector,
                None => inj.push((g.node.index, g.vector)),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            if let Some((_, v)) = inj.iter().find(|(n, _)| *n as usize == i) {
                let a = &mut adj[i];
                a[0] -= v.x;
                a[1] -= v.y;
                a[2] -= v.z;
            }
            // Skip zero adjoints: nothing to propagate. This is a pure
            // optimization; propagating a zero buffer adds exact zeros.
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backward_op(i, &mut adj);
        }
        Gradients { adj }
    }

    fn backward_op(&self, i: usize, adj: &mut [Vec<f64>]) {
        // Adjoint of the node being processed is taken by value so the
        // borrow on `adj` can move to the input buffers.
        let g = adj[i].clone();
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf { .. } => {}
            Op::Detach { .. } => {}
            Op::Carry { x } => {
                // One decay factor per step boundary the carry spans.
                let span = node.step - self.nodes[x.index as usize].step;
                let d = if self.decay_factor == 1.0 || span == 0 {
                    1.0
                } else {
                    self.decay_factor.powi(span as i32)
                };
                for (a, gi) in adj[x.index as usize].iter_mut().zip(&g) {
                    *a += gi * d;
                }
            }
            Op::Add { a, b } => {
                acc(&mut adj[a.index as usize], &g, 1.0);
                acc(&mut adj[b.index as usize], &g, 1.0);
            }
            Op::Sub { a, b } => {
                acc(&mut adj[a.index as usize], &g, 1.0);
                acc(&mut adj[b.index as usize], &g, -1.0);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(a).to_vec(), self.val(b).to_vec());
                for (k, gi) in g.iter().enumerate() {
                    adj[a.index as usize][k] += gi * bv[k];
                }
                for (k, gi) in g.iter().enumerate() {
                    adj[b.index as usize][k] += gi * av[k];
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.val(a).to_vec(), self.val(b).to_vec());
                for (k, gi) in g.iter().enumerate() {
                    adj[a.index as usize][k] += gi / bv[k];
                }
                for (k, gi) in g.iter().enumerate() {
                    adj[b.index as usize][k] -= gi * av[k] / (bv[k] * bv[k]);
                }
            }
            Op::AddConst { x, .. } => acc(&mut adj[x.index as usize], &g, 1.0),
            Op::MulConst { x, c } => acc(&mut adj[x.index as usize], &g, c),
            Op::Dot { a, b } => {
                let (av, bv) = (self.val(a).to_vec(), self.val(b).to_vec());
                let gi = g[0];
                for (k, v) in bv.iter().enumerate() {
                    adj[a.index as usize][k] += gi * v;
                }
                for (k, v) in av.iter().enumerate() {
                    adj[b.index as usize][k] += gi * v;
                }
            }
            Op::Cross { a, b } => {
                // out = a x b: a_bar += b x g, b_bar += g x a.
                let (av, bv) = (self.val(a).to_vec(), self.val(b).to_vec());
                let ga = [
                    bv[1] * g[2] - bv[2] * g[1],
                    bv[2] * g[0] - bv[0] * g[2],
                    bv[0] * g[1] - bv[1] * g[0],
                ];
                let gb = [
                    g[1] * av[2] - g[2] * av[1],
                    g[2] * av[0] - g[0] * av[2],
                    g[0] * av[1] - g[1] * av[0],
                ];
                for k in 0..3 {
                    adj[a.index as usize][k] += ga[k];
                }
                for k in 0..3 {
                    adj[b.index as usize][k] += gb[k];
                }
            }
            Op::Norm { x } => {
                let n = node.value[0];
                if n > 0.0 {
                    let gi = g[0] / n;
                    let xv = self.val(x).to_vec();
                    for (k, v) in xv.iter().enumerate() {
                        adj[x.index as usize][k] += gi * v;
                    }
                }
            }
            Op::Normalize { x } => {
                // d(x/n)/dx = (I - nn^T)/||x||, with n the unit output.
                let xv = self.val(x).to_vec();
                let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMALIZE_FLOOR);
                let nv = &node.value;
                let gdotn: f64 = g.iter().zip(nv).map(|(a, b)| a * b).sum();
                for k in 0..xv.len() {
                    adj[x.index as usize][k] += (g[k] - gdotn * nv[k]) / norm;
                }
            }
            Op::Sqrt { x } => {
                for (k, gi) in g.iter().enumerate() {
                    let y = node.value[k];
                    if y > 0.0 {
                        adj[x.index as usize][k] += gi / (2.0 * y);
                    }
                }
            }
            Op::Exp { .. } => {
                if let Op::Exp { x } = node.op {
                    for (k, gi) in g.iter().enumerate() {
                        adj[x.index as usize][k] += gi * node.value[k];
                    }
                }
            }
            Op::Ln { x } => {
                let xv = self.val(x).to_vec();
                for (k, gi) in g.iter().enumerate() {
                    adj[x.index as usize][k] += gi / xv[k];
                }
            }
            Op::Softplus { x } => {
                let xv = self.val(x).to_vec();
                for (k, gi) in g.iter().enumerate() {
                    adj[x.index as usize][k] += gi * sigmoid(xv[k]);
                }
            }
            Op::Relu { x } => {
                let xv = self.val(x).to_vec();
                for (k, gi) in g.iter().enumerate() {
                    if xv[k] > 0.0 {
                        adj[x.index as usize][k] += gi;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(x).to_vec();
                for (k, gi) in g.iter().enumerate() {
                    adj[x.index as usize][k] += gi * if xv[k] > 0.0 { 1.0 } else { slope };
                }
            }
            Op::Sigmoid { x } => {
                for (k, gi) in g.iter().enumerate() {
                    let s = node.value[k];
                    adj[x.index as usize][k] += gi * s * (1.0 - s);
                }
            }
            Op::Tanh { x } => {
                for (k, gi) in g.iter().enumerate() {
                    let t = node.value[k];
                    adj[x.index as usize][k] += gi * (1.0 - t * t);
                }
            }
            Op::Select { x, i: sel } => {
                adj[x.index as usize][sel as usize] += g[0];
            }
            Op::ScaleVec { v, s } => {
                let c = self.val(s)[0];
                let vv = self.val(v).to_vec();
                for (k, gi) in g.iter().enumerate() {
                    adj[v.index as usize][k] += gi * c;
                }
                let mut ds = 0.0;
                for (k, gi) in g.iter().enumerate() {
                    ds += gi * vv[k];
                }
                adj[s.index as usize][0] += ds;
            }
            Op::MatVec { m, x, rows, cols } => {
                let (rows, cols) = (rows as usize, cols as usize);
                let mv = self.val(m).to_vec();
                let xv = self.val(x).to_vec();
                for r in 0..rows {
                    let gi = g[r];
                    if gi == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        adj[m.index as usize][r * cols + c] += gi * xv[c];
                    }
                }
                for r in 0..rows {
                    let gi = g[r];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &mv[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        adj[x.index as usize][c] += gi * row[c];
                    }
                }
            }
            Op::Conv2d { input, weights, bias, in_h, in_w, in_ch, out_ch } => {
                let (ih, iw, ic, oc) = (in_h as usize, in_w as usize, in_ch as usize, out_ch as usize);
                let (oh, ow) = (conv_out_extent(ih), conv_out_extent(iw));
                let xv = self.val(input).to_vec();
                let wv = self.val(weights).to_vec();
                for co in 0..oc {
                    for r in 0..oh {
                        for c in 0..ow {
                            let gi = g[(co * oh + r) * ow + c];
                            if gi == 0.0 {
                                continue;
                            }
                            adj[bias.index as usize][co] += gi;
                            for ci in 0..ic {
                                for ky in 0..CONV_K {
                                    let y = (r * CONV_STRIDE + ky) as isize - CONV_PAD as isize;
                                    if y < 0 || y >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..CONV_K {
                                        let x = (c * CONV_STRIDE + kx) as isize - CONV_PAD as isize;
                                        if x < 0 || x >= iw as isize {
                                            continue;
                                        }
                                        let xi = (ci * ih + y as usize) * iw + x as usize;
                                        let wi = ((co * ic + ci) * CONV_K + ky) * CONV_K + kx;
                                        adj[weights.index as usize][wi] += gi * xv[xi];
                                        adj[input.index as usize][xi] += gi * wv[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { ref parts } => {
                let mut off = 0;
                for p in parts {
                    let n = p.shape.len();
                    for k in 0..n {
                        adj[p.index as usize][k] += g[off + k];
                    }
                    off += n;
                }
            }
            Op::SumN { ref parts } => {
                for p in parts {
                    acc(&mut adj[p.index as usize], &g, 1.0);
                }
            }
        }
    }
}

fn acc(dst: &mut [f64], g: &[f64], scale: f64) {
    for (d, gi) in dst.iter_mut().zip(g) {
        *d += gi * scale;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "Leaf",
        Op::Carry { .. } => "Carry",
        Op::Detach { .. } => "Detach",
        Op::Add { .. } => "Add",
        Op::Sub { .. } => "Sub",
        Op::Mul { .. } => "Mul",
        Op::Div { .. } => "Div",
        Op::AddConst { .. } => "AddConst",
        Op::MulConst { .. } => "MulConst",
        Op::Dot { .. } => "Dot",
        Op::Cross { .. } => "Cross",
        Op::Norm { .. } => "Norm",
        Op::Normalize { .. } => "Normalize",
        Op::Sqrt { .. } => "Sqrt",
        Op::Exp { .. } => "Exp",
        Op::Ln { .. } => "Ln",
        Op::Softplus { .. } => "Softplus",
        Op::Relu { .. } => "Relu",
        Op::LeakyRelu { .. } => "LeakyRelu",
        Op::Sigmoid { .. } => "Sigmoid",
        Op::Tanh { .. } => "Tanh",
        Op::Select { .. } => "Select",
        Op::ScaleVec { .. } => "ScaleVec",
        Op::MatVec { .. } => "MatVec",
        Op::Conv2d { .. } => "Conv2d",
        Op::Concat { .. } => "Concat",
        Op::SumN { .. } => "SumN",
    }
}

/// ln(1 + e^x) without overflow on either tail.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{grad_fd, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_forward_value() {
        let mut t = Tape::new(1.0);
        let a = t.constant_scalar(2.0);
        let b = t.constant_scalar(3.0);
        let c = t.add(a, b);
        assert_eq!(t.value_scalar(c), 5.0);
    }

    #[test]
    fn detach_passes_value_blocks_gradient() {
        let mut t = Tape::new(1.0);
        let x = t.param(&[1.5, -2.0, 0.25]);
        let d = t.detach(x);
        let loss = t.dot(d, d);
        assert_eq!(t.value(d), t.value(x));
        let g = t.backward(loss, &[]);
        assert_eq!(g.get(x), &[0.0, 0.0, 0.0]);
        // The detached node itself accumulates a nonzero adjoint; it just
        // never crosses to its input.
        assert!(g.get(d).iter().any(|&v| v != 0.0));
    }

    // Frozen oracle: s1 = 2, s2 = 3*carry(s1), loss = carry(s2)^2 with one
    // mark_step before each carry. Undecayed dloss/ds2 = 2*6 = 12 and
    // dloss/ds1 = 36; with decay 0.9 each boundary scales once:
    // dloss/ds2 = 10.8, dloss/ds1 = 36 * 0.81 = 29.16.
    #[test]
    fn two_step_decay_chain_matches_hand_computation() {
        for (decay, want_s1, want_s2) in [(1.0, 36.0, 12.0), (0.9, 29.16, 10.8)] {
            let mut t = Tape::new(decay);
            let s1 = t.param(&[2.0]);
            t.mark_step();
            let c1 = t.carry(s1);
            let s2 = t.mul_const(c1, 3.0);
            t.mark_step();
            let c2 = t.carry(s2);
            let loss = t.mul(c2, c2);
            assert_eq!(t.value_scalar(loss), 36.0);
            let g = t.backward(loss, &[]);
            assert!((g.get(s1)[0] - want_s1).abs() < 1e-12, "decay {decay}: {}", g.get(s1)[0]);
            assert!((g.get(s2)[0] - want_s2).abs() < 1e-12);
        }
    }

    #[test]
    fn carry_spanning_two_boundaries_decays_twice() {
        let mut t = Tape::new(0.5);
        let s = t.param(&[1.0]);
        t.mark_step();
        t.mark_step();
        let c = t.carry(s);
        let loss = t.mul_const(c, 4.0);
        let g = t.backward(loss, &[]);
        assert_eq!(g.get(s)[0], 4.0 * 0.25);
    }

    #[test]
    fn decay_one_is_bit_identical_to_unmarked_tape() {
        let build = |t: &mut Tape, mark: bool| {
            let p = t.param(&[0.3, -1.7, 2.9]);
            let mut state = p;
            for _ in 0..5 {
                if mark {
                    t.mark_step();
                }
                let c = t.carry(state);
                let sq = t.mul(c, c);
                state = t.add_const(sq, -0.1);
            }
            let loss = t.dot(state, state);
            (p, loss)
        };
        let mut ta = Tape::new(1.0);
        let (pa, la) = build(&mut ta, true);
        let mut tb = Tape::new(1.0);
        let (pb, lb) = build(&mut tb, false);
        let ga = ta.backward(la, &[]);
        let gb = tb.backward(lb, &[]);
        for (x, y) in ga.get(pa).iter().zip(gb.get(pb)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn injection_subtracts_before_upstream_propagation() {
        // loss = ||p||^2, inject v at p: final adjoint must be exactly 2p - v.
        let mut t = Tape::new(1.0);
        let p = t.param(&[1.0, -2.0, 0.5]);
        let loss = t.dot(p, p);
        let v = Vec3::new(0.25, 4.0, -1.5);
        let g = t.backward(loss, &[GradientInjection { node: p, vector: v }]);
        let got = g.get(p);
        for k in 0..3 {
            let want = 2.0 * t.value(p)[k] - v[k];
            assert_eq!(got[k].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn injection_reaches_parameters_when_loss_ignores_position() {
        // p = 2*theta, loss sees only an unrelated constant. The injected
        // vector must arrive at theta through dp/dtheta = 2, negated.
        let mut t = Tape::new(1.0);
        let theta = t.param(&[0.1, 0.2, 0.3]);
        let p = t.mul_const(theta, 2.0);
        let c = t.constant_scalar(7.0);
        let loss = t.mul(c, c);
        let v = Vec3::new(1.0, -2.0, 3.0);
        let g = t.backward(loss, &[GradientInjection { node: p, vector: v }]);
        for k in 0..3 {
            assert_eq!(g.get(theta)[k], -2.0 * v[k]);
        }
    }

    #[test]
    fn injections_compose_linearly() {
        let build = |t: &mut Tape| -> (NodeRef, NodeRef, NodeRef) {
            let theta = t.param(&[0.4, -0.9, 1.3, 0.2, 0.0, -0.5]);
            let m = t.param(&[0.3; 18]);
            let p = t.matvec(m, theta, 3, 6);
            let q = t.mul(p, p);
            let s = t.dot(q, p);
            (theta, p, s)
        };
        let v = Vec3::new(0.7, -0.2, 0.9);
        let w = Vec3::new(-1.1, 0.4, 0.05);
        let mut t = Tape::new(1.0);
        let (theta, p, loss) = build(&mut t);
        let g0 = t.backward(loss, &[]);
        let gv = t.backward(loss, &[GradientInjection { node: p, vector: v }]);
        let gw = t.backward(loss, &[GradientInjection { node: p, vector: w }]);
        let gvw = t.backward(
            loss,
            &[
                GradientInjection { node: p, vector: v },
                GradientInjection { node: p, vector: w },
            ],
        );
        for k in 0..6 {
            let lin = gv.get(theta)[k] + gw.get(theta)[k] - g0.get(theta)[k];
            assert!(rel_err(gvw.get(theta)[k], lin) < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "Add inputs must share a shape")]
    fn add_shape_mismatch_panics() {
        let mut t = Tape::new(1.0);
        let a = t.constant(&[1.0, 2.0]);
        let b = t.constant(&[1.0, 2.0, 3.0]);
        t.add(a, b);
    }

    #[test]
    #[should_panic(expected = "injection targets must be vec3")]
    fn injection_on_scalar_panics() {
        let mut t = Tape::new(1.0);
        let a = t.param(&[1.0]);
        let loss = t.mul(a, a);
        t.backward(loss, &[GradientInjection { node: loss, vector: Vec3::zeros() }]);
    }

    #[test]
    fn softplus_sigmoid_are_stable_at_large_magnitudes() {
        assert_eq!(softplus(800.0), 800.0);
        assert_eq!(softplus(-800.0), 0.0);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
        let mut t = Tape::new(1.0);
        let x = t.param(&[-745.0, 745.0]);
        let y = t.softplus(x);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sqrt_of_zero_has_zero_subgradient() {
        let mut t = Tape::new(1.0);
        let x = t.param(&[0.0, 4.0]);
        let y = t.sqrt(x);
        let s = t.sum_n(&[y]);
        let one = t.constant(&[1.0, 1.0]);
        let loss = t.dot(s, one);
        let g = t.backward(loss, &[]);
        assert_eq!(g.get(x)[0], 0.0);
        assert_eq!(g.get(x)[1], 0.25);
    }

    #[test]
    fn mark_step_stamps_subsequent_nodes() {
        let mut t = Tape::new(0.9);
        let a = t.constant_scalar(1.0);
        t.mark_step();
        let b = t.mul_const(a, 2.0);
        assert_eq!(t.step_of(a), 0);
        assert_eq!(t.step_of(b), 1);
        assert_eq!(t.current_step(), 1);
    }

    /// Finite-difference sweep over every differentiable op. Each case builds
    /// a scalar function of a single parameter vector; the tape gradient must
    /// match central differences coordinate by coordinate.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        type Builder = fn(&mut Tape, NodeRef) -> NodeRef;
        // (name, input length, positive inputs only, builder)
        let cases: Vec<(&str, usize, bool, Builder)> = vec![
            ("add", 3, false, |t, x| {
                let c = t.constant(&[0.3, -0.4, 0.9]);
                let y = t.add(x, c);
                t.dot(y, y)
            }),
            ("sub", 3, false, |t, x| {
                let c = t.constant(&[1.3, 0.2, -0.7]);
                let y = t.sub(x, c);
                t.dot(y, y)
            }),
            ("mul", 4, false, |t, x| {
                let y = t.mul(x, x);
                let c = t.constant(&[0.2, -1.0, 0.5, 2.0]);
                t.dot(y, c)
            }),
            ("div", 2, true, |t, x| {
                let c = t.constant(&[0.7, 1.9]);
                let y = t.div(c, x);
                let z = t.div(x, c);
                let s = t.add(y, z);
                let o = t.constant(&[1.0, 1.0]);
                t.dot(s, o)
            }),
            ("add_mul_const", 3, false, |t, x| {
                let y = t.add_const(x, 0.77);
                let z = t.mul_const(y, -1.3);
                t.dot(z, z)
            }),
            ("dot", 6, false, |t, x| t.dot(x, x)),
            ("cross", 3, false, |t, x| {
                let c = t.constant(&[0.2, -0.8, 0.5]);
                let y = t.cross(x, c);
                let z = t.cross(c, x);
                let s = t.add(y, z);
                t.dot(s, s)
            }),
            ("norm", 3, false, |t, x| t.norm(x)),
            ("normalize", 3, false, |t, x| {
                let n = t.normalize(x);
                let c = t.constant(&[0.5, 1.0, -0.25]);
                t.dot(n, c)
            }),
            ("sqrt", 2, true, |t, x| {
                let y = t.sqrt(x);
                let o = t.constant(&[1.0, 2.0]);
                t.dot(y, o)
            }),
            ("exp", 3, false, |t, x| {
                let y = t.exp(x);
                let o = t.constant(&[1.0, 0.5, -1.0]);
                t.dot(y, o)
            }),
            ("ln", 2, true, |t, x| {
                let y = t.ln(x);
                let o = t.constant(&[1.0, -2.0]);
                t.dot(y, o)
            }),
            ("softplus", 3, false, |t, x| {
                let y = t.softplus(x);
                let o = t.constant(&[1.0, 1.0, 1.0]);
                t.dot(y, o)
            }),
            ("relu", 3, false, |t, x| {
                let y = t.relu(x);
                let o = t.constant(&[1.0, 1.0, 1.0]);
                t.dot(y, o)
            }),
            ("leaky_relu", 4, false, |t, x| {
                let y = t.leaky_relu(x, 0.05);
                let o = t.constant(&[1.0, -1.0, 0.5, 2.0]);
                t.dot(y, o)
            }),
            ("sigmoid", 3, false, |t, x| {
                let y = t.sigmoid(x);
                let o = t.constant(&[1.0, 1.0, 1.0]);
                t.dot(y, o)
            }),
            ("tanh", 3, false, |t, x| {
                let y = t.tanh(x);
                let o = t.constant(&[1.0, 1.0, 1.0]);
                t.dot(y, o)
            }),
            ("select_scalevec", 4, false, |t, x| {
                let s = t.select(x, 1);
                let v = t.constant(&[0.3, -0.6, 0.9]);
                let sv = t.scale_vec(v, s);
                let m = t.select(x, 3);
                let sv2 = t.scale_vec(sv, m);
                let o = t.constant(&[1.0, 1.0, 1.0]);
                t.dot(sv2, o)
            }),
            ("matvec_as_vector", 6, false, |t, x| {
                let m = t.constant(&[0.5, -0.1, 0.2, 0.9, 0.4, -0.8, 1.1, 0.0, -0.3, 0.6, 0.25, -1.4]);
                let y = t.matvec(m, x, 2, 6);
                t.dot(y, y)
            }),
            ("matvec_as_matrix", 12, false, |t, x| {
                let v = t.constant(&[0.5, -0.1, 0.2, 0.9]);
                let y = t.matvec(x, v, 3, 4);
                t.dot(y, y)
            }),
            ("concat_sumn", 3, false, |t, x| {
                let a = t.mul_const(x, 2.0);
                let b = t.add_const(x, -0.5);
                let cat = t.concat(&[a, b]);
                let s = t.sum_n(&[x, x]);
                let n1 = t.dot(cat, cat);
                let n2 = t.dot(s, s);
                let parts = [n1, n2];
                t.sum_n(&parts)
            }),
            ("carry_chain", 3, false, |t, x| {
                t.mark_step();
                let c = t.carry(x);
                let y = t.mul(c, c);
                t.mark_step();
                let c2 = t.carry(y);
                let o = t.constant(&[1.0, 2.0, 3.0]);
                t.dot(c2, o)
            }),
        ];

        for (name, len, positive, build) in cases {
            let x0: Vec<f64> = (0..len)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.2..1.5);
                    if positive {
                        v
                    } else if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let f = |x: &[f64]| {
                let mut t = Tape::new(1.0);
                let p = t.param(x);
                let loss = build(&mut t, p);
                t.value_scalar(loss)
            };
            let fd = grad_fd(f, &x0, 1e-5);
            let mut t = Tape::new(1.0);
            let p = t.param(&x0);
            let loss = build(&mut t, p);
            let g = t.backward(loss, &[]);
            for k in 0..len {
                let e = rel_err(g.get(p)[k], fd[k]);
                assert!(
                    e < 1e-6,
                    "op {name} coord {k}: tape {} vs fd {} (rel err {e})",
                    g.get(p)[k],
                    fd[k]
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (ih, iw, ic, oc) = (6usize, 8usize, 2usize, 3usize);
        let wlen = oc * ic * 9;
        let xlen = ic * ih * iw;
        let x0: Vec<f64> = (0..xlen).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..wlen).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b0: Vec<f64> = (0..oc).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let probe: Vec<f64> = (0..oc * conv_out_extent(ih) * conv_out_extent(iw))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        // One flat parameter vector so the finite-difference loop covers
        // input, weights, and bias in a single pass.
        let run = |flat: &[f64]| -> (Tape, NodeRef, NodeRef) {
            let mut t = Tape::new(1.0);
            let p = t.param(flat);
            let probe_n = t.constant(&probe);
            // Split p into the three conv operands via Select + Concat.
            let mut xs = Vec::new();
            for k in 0..flat.len() {
                xs.push(t.select(p, k as u32));
            }
            let xin = t.concat(&xs[0..xlen]);
            let win = t.concat(&xs[xlen..xlen + wlen]);
            let bin = t.concat(&xs[xlen + wlen..]);
            let out = t.record(Op::Conv2d {
                input: xin,
                weights: win,
                bias: bin,
                in_h: ih as u32,
                in_w: iw as u32,
                in_ch: ic as u32,
                out_ch: oc as u32,
            });
            let loss = t.dot(out, probe_n);
            (t, p, loss)
        };
        let mut flat = x0.clone();
        flat.extend_from_slice(&w0);
        flat.extend_from_slice(&b0);
        let f = |x: &[f64]| {
            let (t, _, loss) = run(x);
            t.value_scalar(loss)
        };
        let (t, p, loss) = run(&flat);
        let g = t.backward(loss, &[]);
        // FD over a deterministic sample of coordinates (full sweep is slow).
        let mut idx: Vec<usize> = (0..flat.len()).collect();
        for k in (1..idx.len()).rev() {
            idx.swap(k, rng.gen_range(0..=k));
        }
        for &k in idx.iter().take(60) {
            let mut hi = flat.clone();
            let mut lo = flat.clone();
            let h = 1e-5;
            hi[k] += h;
            lo[k] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            let e = rel_err(g.get(p)[k], fd);
            assert!(e < 1e-6, "conv coord {k}: tape {} vs fd {fd} (rel {e})", g.get(p)[k]);
        }
    }

    #[test]
    fn conv2d_output_dims_follow_stride_two() {
        assert_eq!(conv_out_extent(24), 12);
        assert_eq!(conv_out_extent(32), 16);
        assert_eq!(conv_out_extent(12), 6);
        assert_eq!(conv_out_extent(16), 8);
    }
}
