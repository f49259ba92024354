//! Wengert tape: eager reverse-mode AD over [`Tensor`] values.
//!
//! Operations execute immediately and record themselves; `backward` replays
//! the tape in reverse, producing one gradient per trainable leaf. Replaying
//! the recorded ops after mutating a leaf re-evaluates the same function,
//! which is what the finite-difference checker uses.

use super::tensor::{softplus, softplus_prime, Tensor};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid input node {node}")]
    BadNode { op: &'static str, node: NodeId },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {details}")]
    Invalid { op: &'static str, details: String },
}

/// One recorded operation. Leaves carry no inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    /// Elementwise; rhs may broadcast from `[1]`, `[1,c]` (per-row) or `[r,1]` (per-column).
    Add,
    Sub,
    Mul,
    /// `[m,k] @ [k,n] -> [m,n]`.
    Matmul,
    Relu,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    /// Elementwise Huber penalty of the input (not of a difference).
    Huber { delta: f64 },
    /// Full reduction to `[1]`.
    Sum,
    Mean,
    /// `[r,c] -> [r,1]`.
    SumRows,
    /// `[g*group, c] -> [g, c]`, summing each consecutive block of `group` rows.
    SumGroups { group: usize },
    /// `[r,c] -> [r*times, c]`, repeating each row `times` times.
    RepeatRows { times: usize },
    /// Column-wise concatenation of inputs with equal row counts.
    Concat,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    /// Per-row Euclidean norm: `[r,c] -> [r,1]`.
    L2NormRows,
    /// Inputs: grid `[h*w, c]`, coords `[p,2]` in grid index space (x, y); output `[p,c]`.
    /// Coordinates are clamped to the grid rectangle; clamped coordinates get zero gradient.
    BilinearSample { height: usize, width: usize },
    /// Inputs: quaternion `[4]` (w,x,y,z; normalized internally), center `[3]`, points `[p,3]`.
    /// Output `[p,3]` = R(q̂)·(x − c).
    WorldToCamera,
    /// Inputs: camera-frame points `[p,3]`, fov `[2]` (radians). Output `[p,3]` = (u, v, range)
    /// with pixel coordinates from the half-integer-center convention and range = ‖p‖.
    PinholeProject { width: f64, height: f64 },
    /// Inputs: quaternion `[4]`, fov `[2]`, pixels `[r,2]`. Output `[r,3]`: unit world-space
    /// ray directions through the pixel centers.
    CameraRayDirs { width: f64, height: f64 },
    /// Inputs: sdf values (any shape), raw beta `[1]` with β = exp(raw).
    /// Laplace-CDF density: high inside (s<0), decaying outside, σ(0) = 1/(2β).
    SdfDensity,
    /// Exclusive prefix sum along each row.
    CumsumRowsExclusive,
    /// Same data, new `[rows, cols]` interpretation (row-major layout kept).
    Reshape { rows: usize, cols: usize },
    /// Row-wise stacking of inputs with equal column counts.
    ConcatRows,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Huber { .. } => "huber",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum-rows",
            Op::SumGroups { .. } => "sum-groups",
            Op::RepeatRows { .. } => "repeat-rows",
            Op::Concat => "concat",
            Op::SliceCols { .. } => "slice-cols",
            Op::SliceRows { .. } => "slice-rows",
            Op::L2NormRows => "l2norm",
            Op::BilinearSample { .. } => "bilinear-sample",
            Op::WorldToCamera => "world-to-camera",
            Op::PinholeProject { .. } => "pinhole-project",
            Op::CameraRayDirs { .. } => "camera-ray-dirs",
            Op::SdfDensity => "sdf-density",
            Op::CumsumRowsExclusive => "cumsum-rows-exclusive",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows => "concat-rows",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradient map produced by one backward pass: one tensor per trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a parameter node; all-zeros if the loss does not reach it.
    pub fn get(&self, param: NodeId) -> Tensor {
        match &self.grads[param] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[param]),
        }
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
        });
        self.nodes.len() - 1
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) {
        debug_assert!(matches!(self.nodes[id].op, Op::Leaf));
        self.nodes[id].value = value;
    }

    /// Record and evaluate one primitive. Inputs must precede the new node.
    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, TapeError> {
        let next = self.nodes.len();
        for &i in inputs {
            if i >= next {
                return Err(TapeError::BadNode { op: op.name(), node: i });
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = eval_op(&op, &vals)?;
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(next)
    }

    /// Re-evaluate every non-leaf node in tape order (after leaf mutation).
    pub fn replay(&mut self) -> Result<(), TapeError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let vals: Vec<&Tensor> = self.nodes[i]
                .inputs
                .iter()
                .map(|&j| &self.nodes[j].value)
                .collect();
            let value = eval_op(&self.nodes[i].op, &vals)?;
            if !value.is_finite() {
                return Err(TapeError::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss. Deterministic: nodes visited in
    /// strictly descending id order, accumulation in input order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        let lv = &self.nodes[loss].value;
        if lv.numel() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(out_grad);
                continue;
            }
            let in_vals: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let in_grads = backward_op(&node.op, &in_vals, &node.value, &out_grad);
            for (slot, g) in node.inputs.iter().zip(in_grads) {
                let Some(g) = g else { continue };
                match &mut grads[*slot] {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    none => *none = Some(g),
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.params.clone(),
        })
    }
}

fn shape_err(op: &'static str, details: String) -> TapeError {
    TapeError::ShapeMismatch { op, details }
}

fn broadcast_kind(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> Result<Broadcast, TapeError> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if br == 1 && bc == 1 {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Broadcast::Col)
    } else {
        Err(shape_err(
            op,
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ))
    }
}

enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TapeError> {
    let kind = broadcast_kind(op, a, b)?;
    let (r, c) = (a.rows(), a.cols());
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; ad.len()];
    match kind {
        Broadcast::Same => {
            for i in 0..ad.len() {
                out[i] = f(ad[i], bd[i]);
            }
        }
        Broadcast::Scalar => {
            let s = bd[0];
            for i in 0..ad.len() {
                out[i] = f(ad[i], s);
            }
        }
        Broadcast::Row => {
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = f(ad[i * c + j], bd[j]);
                }
            }
        }
        Broadcast::Col => {
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = f(ad[i * c + j], bd[i]);
                }
            }
        }
    }
    Ok(Tensor::new(a.shape().to_vec(), out).expect("same layout as lhs"))
}

/// Reduce a full-shape gradient onto a broadcast operand's shape.
fn reduce_to(b: &Tensor, full: &Tensor, kind: &Broadcast, r: usize, c: usize) -> Tensor {
    match kind {
        Broadcast::Same => full.clone(),
        Broadcast::Scalar => Tensor::new(
            b.shape().to_vec(),
            vec![full.data().iter().sum()],
        )
        .expect("scalar"),
        Broadcast::Row => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += full.data()[i * c + j];
                }
            }
            Tensor::new(b.shape().to_vec(), out).expect("row reduce")
        }
        Broadcast::Col => {
            let mut out = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    out[i] += full.data()[i * c + j];
                }
            }
            Tensor::new(b.shape().to_vec(), out).expect("col reduce")
        }
    }
}

// ── quaternion helpers (w, x, y, z layout) ───────────────────────────

fn quat_normalize(q: &[f64]) -> ([f64; 4], f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

fn quat_rotate(q: &[f64; 4], v: [f64; 3]) -> [f64; 3] {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let uv = cross(u, v);
    let uuv = cross(u, uv);
    [
        v[0] + 2.0 * (w * uv[0] + uuv[0]),
        v[1] + 2.0 * (w * uv[1] + uuv[1]),
        v[2] + 2.0 * (w * uv[2] + uuv[2]),
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// ∂(R(q̂)v)/∂q̂ as a 3×4 Jacobian (columns: w, x, y, z), q̂ unit.
fn rotate_jacobian_qhat(q: &[f64; 4], v: [f64; 3]) -> [[f64; 4]; 3] {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let uxv = cross(u, v);
    let udotv = dot3(u, v);
    // f = (w² − |u|²)v + 2(u·v)u + 2w(u×v)
    // ∂f/∂w = 2w v + 2(u×v)
    let dfdw = [
        2.0 * w * v[0] + 2.0 * uxv[0],
        2.0 * w * v[1] + 2.0 * uxv[1],
        2.0 * w * v[2] + 2.0 * uxv[2],
    ];
    // ∂f/∂u = −2 v uᵀ + 2 u vᵀ + 2(u·v) I − 2w [v]×
    let mut j = [[0.0; 4]; 3];
    for row in 0..3 {
        j[row][0] = dfdw[row];
        for col in 0..3 {
            let mut g = -2.0 * v[row] * u[col] + 2.0 * u[row] * v[col];
            if row == col {
                g += 2.0 * udotv;
            }
            j[row][col + 1] = g;
        }
    }
    // −2w [v]× term: [v]× = [[0,−v3,v2],[v3,0,−v1],[−v2,v1,0]]
    let vx = [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ];
    for row in 0..3 {
        for col in 0..3 {
            j[row][col + 1] -= 2.0 * w * vx[row][col];
        }
    }
    j
}

/// Chain a gradient w.r.t. q̂ back through normalization to raw q.
fn chain_normalize(q_raw: &[f64], g_hat: [f64; 4]) -> [f64; 4] {
    let (qh, n) = quat_normalize(q_raw);
    let dot = qh[0] * g_hat[0] + qh[1] * g_hat[1] + qh[2] * g_hat[2] + qh[3] * g_hat[3];
    [
        (g_hat[0] - qh[0] * dot) / n,
        (g_hat[1] - qh[1] * dot) / n,
        (g_hat[2] - qh[2] * dot) / n,
        (g_hat[3] - qh[3] * dot) / n,
    ]
}

const MIN_PROJECT_DEPTH: f64 = 1e-9;

// ── forward evaluation ───────────────────────────────────────────────

pub(crate) fn eval_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, TapeError> {
    let name = op.name();
    let arity = |n: usize| -> Result<(), TapeError> {
        if inputs.len() != n {
            Err(TapeError::Invalid {
                op: name,
                details: format!("expected {n} inputs, got {}", inputs.len()),
            })
        } else {
            Ok(())
        }
    };
    match op {
        Op::Leaf => Err(TapeError::Invalid {
            op: name,
            details: "leaf nodes are not evaluated".into(),
        }),
        Op::Add => {
            arity(2)?;
            binary_broadcast(name, inputs[0], inputs[1], |a, b| a + b)
        }
        Op::Sub => {
            arity(2)?;
            binary_broadcast(name, inputs[0], inputs[1], |a, b| a - b)
        }
        Op::Mul => {
            arity(2)?;
            binary_broadcast(name, inputs[0], inputs[1], |a, b| a * b)
        }
        Op::Matmul => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.rows(), a.cols());
            let (k2, n) = (b.rows(), b.cols());
            if k != k2 {
                return Err(shape_err(
                    name,
                    format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n, false, false);
            Tensor::from_rows(m, n, out).map_err(|e| TapeError::Invalid {
                op: name,
                details: e.to_string(),
            })
        }
        Op::Relu => {
            arity(1)?;
            Ok(inputs[0].map(|v| v.max(0.0)))
        }
        Op::Softplus => {
            arity(1)?;
            Ok(inputs[0].map(softplus))
        }
        Op::Exp => {
            arity(1)?;
            Ok(inputs[0].map(f64::exp))
        }
        Op::Log => {
            arity(1)?;
            Ok(inputs[0].map(f64::ln))
        }
        Op::Sin => {
            arity(1)?;
            Ok(inputs[0].map(f64::sin))
        }
        Op::Cos => {
            arity(1)?;
            Ok(inputs[0].map(f64::cos))
        }
        Op::Sqrt => {
            arity(1)?;
            Ok(inputs[0].map(f64::sqrt))
        }
        Op::Abs => {
            arity(1)?;
            Ok(inputs[0].map(f64::abs))
        }
        Op::Huber { delta } => {
            arity(1)?;
            let d = *delta;
            Ok(inputs[0].map(|v| {
                if v.abs() <= d {
                    0.5 * v * v
                } else {
                    d * (v.abs() - 0.5 * d)
                }
            }))
        }
        Op::Sum => {
            arity(1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::Mean => {
            arity(1)?;
            let n = inputs[0].numel() as f64;
            Ok(Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n))
        }
        Op::SumRows => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let d = inputs[0].data();
            let out: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
            Ok(Tensor::from_rows(r, 1, out).expect("sum-rows"))
        }
        Op::SumGroups { group } => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            if *group == 0 || r % group != 0 {
                return Err(shape_err(
                    name,
                    format!("rows {r} not divisible by group {group}"),
                ));
            }
            let g = r / group;
            let d = inputs[0].data();
            let mut out = vec![0.0; g * c];
            for gi in 0..g {
                for k in 0..*group {
                    let row = (gi * group + k) * c;
                    for j in 0..c {
                        out[gi * c + j] += d[row + j];
                    }
                }
            }
            Ok(Tensor::from_rows(g, c, out).expect("sum-groups"))
        }
        Op::RepeatRows { times } => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let d = inputs[0].data();
            let mut out = Vec::with_capacity(r * times * c);
            for i in 0..r {
                for _ in 0..*times {
                    out.extend_from_slice(&d[i * c..(i + 1) * c]);
                }
            }
            Ok(Tensor::from_rows(r * times, c, out).expect("repeat-rows"))
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(TapeError::Invalid {
                    op: name,
                    details: "needs at least one input".into(),
                });
            }
            let r = inputs[0].rows();
            for t in inputs {
                if t.rows() != r {
                    return Err(shape_err(
                        name,
                        format!("row counts differ: {:?}", inputs.iter().map(|t| t.rows()).collect::<Vec<_>>()),
                    ));
                }
            }
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut out = vec![0.0; r * total];
            for i in 0..r {
                let mut off = 0;
                for t in inputs {
                    let c = t.cols();
                    out[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
                    off += c;
                }
            }
            Ok(Tensor::from_rows(r, total, out).expect("concat"))
        }
        Op::SliceCols { start, len } => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            if start + len > c {
                return Err(shape_err(
                    name,
                    format!("cols [{start}, {}) out of {c}", start + len),
                ));
            }
            let d = inputs[0].data();
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&d[i * c + start..i * c + start + len]);
            }
            Ok(Tensor::from_rows(r, *len, out).expect("slice-cols"))
        }
        Op::SliceRows { start, len } => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            if start + len > r {
                return Err(shape_err(
                    name,
                    format!("rows [{start}, {}) out of {r}", start + len),
                ));
            }
            let d = inputs[0].data();
            Ok(Tensor::from_rows(*len, c, d[start * c..(start + len) * c].to_vec())
                .expect("slice-rows"))
        }
        Op::L2NormRows => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let d = inputs[0].data();
            let out: Vec<f64> = (0..r)
                .map(|i| d[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Ok(Tensor::from_rows(r, 1, out).expect("l2norm"))
        }
        Op::BilinearSample { height, width } => {
            arity(2)?;
            let (grid, coords) = (inputs[0], inputs[1]);
            let (h, w) = (*height, *width);
            let c = grid.cols();
            if grid.rows() != h * w {
                return Err(shape_err(
                    name,
                    format!("grid rows {} != {h}x{w}", grid.rows()),
                ));
            }
            if coords.cols() != 2 {
                return Err(shape_err(
                    name,
                    format!("coords shape {:?}, want [p,2]", coords.shape()),
                ));
            }
            let p = coords.rows();
            let gd = grid.data();
            let cd = coords.data();
            let mut out = vec![0.0; p * c];
            for i in 0..p {
                let (gx, gy) = (cd[i * 2], cd[i * 2 + 1]);
                let (x0, y0, tx, ty) = bilinear_cell(gx, gy, w, h);
                let f00 = &gd[(y0 * w + x0) * c..];
                let f01 = &gd[(y0 * w + x0 + 1) * c..];
                let f10 = &gd[((y0 + 1) * w + x0) * c..];
                let f11 = &gd[((y0 + 1) * w + x0 + 1) * c..];
                for j in 0..c {
                    out[i * c + j] = (1.0 - ty) * ((1.0 - tx) * f00[j] + tx * f01[j])
                        + ty * ((1.0 - tx) * f10[j] + tx * f11[j]);
                }
            }
            Ok(Tensor::from_rows(p, c, out).expect("bilinear"))
        }
        Op::WorldToCamera => {
            arity(3)?;
            let (q, cen, pts) = (inputs[0], inputs[1], inputs[2]);
            if q.numel() != 4 || cen.numel() != 3 || pts.cols() != 3 {
                return Err(shape_err(
                    name,
                    format!(
                        "q {:?}, center {:?}, pts {:?}",
                        q.shape(),
                        cen.shape(),
                        pts.shape()
                    ),
                ));
            }
            let (qh, _) = quat_normalize(q.data());
            let cd = cen.data();
            let p = pts.rows();
            let mut out = vec![0.0; p * 3];
            for i in 0..p {
                let row = pts.row(i);
                let v = [row[0] - cd[0], row[1] - cd[1], row[2] - cd[2]];
                let r = quat_rotate(&qh, v);
                out[i * 3..i * 3 + 3].copy_from_slice(&r);
            }
            Ok(Tensor::from_rows(p, 3, out).expect("world-to-camera"))
        }
        Op::PinholeProject { width, height } => {
            arity(2)?;
            let (pts, fov) = (inputs[0], inputs[1]);
            if pts.cols() != 3 || fov.numel() != 2 {
                return Err(shape_err(
                    name,
                    format!("pts {:?}, fov {:?}", pts.shape(), fov.shape()),
                ));
            }
            let fd = fov.data();
            let (fx, fy) = (
                0.5 * width / (0.5 * fd[0]).tan(),
                0.5 * height / (0.5 * fd[1]).tan(),
            );
            let (cx, cy) = (0.5 * width, 0.5 * height);
            let p = pts.rows();
            let mut out = vec![0.0; p * 3];
            for i in 0..p {
                let row = pts.row(i);
                let z = row[2].max(MIN_PROJECT_DEPTH);
                let range = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
                out[i * 3] = cx + fx * row[0] / z;
                out[i * 3 + 1] = cy + fy * row[1] / z;
                out[i * 3 + 2] = range;
            }
            Ok(Tensor::from_rows(p, 3, out).expect("pinhole-project"))
        }
        Op::CameraRayDirs { width, height } => {
            arity(3)?;
            let (q, fov, pixels) = (inputs[0], inputs[1], inputs[2]);
            if q.numel() != 4 || fov.numel() != 2 || pixels.cols() != 2 {
                return Err(shape_err(
                    name,
                    format!(
                        "q {:?}, fov {:?}, pixels {:?}",
                        q.shape(),
                        fov.shape(),
                        pixels.shape()
                    ),
                ));
            }
            let fd = fov.data();
            let (fx, fy) = (
                0.5 * width / (0.5 * fd[0]).tan(),
                0.5 * height / (0.5 * fd[1]).tan(),
            );
            let (cx, cy) = (0.5 * width, 0.5 * height);
            let (qh, _) = quat_normalize(q.data());
            let qconj = [qh[0], -qh[1], -qh[2], -qh[3]];
            let r = pixels.rows();
            let mut out = vec![0.0; r * 3];
            for i in 0..r {
                let px = pixels.row(i);
                let dc = [(px[0] - cx) / fx, (px[1] - cy) / fy, 1.0];
                let n = (dc[0] * dc[0] + dc[1] * dc[1] + 1.0).sqrt();
                let dhat = [dc[0] / n, dc[1] / n, dc[2] / n];
                let dw = quat_rotate(&qconj, dhat);
                out[i * 3..i * 3 + 3].copy_from_slice(&dw);
            }
            Ok(Tensor::from_rows(r, 3, out).expect("camera-ray-dirs"))
        }
        Op::SdfDensity => {
            arity(2)?;
            let (s, braw) = (inputs[0], inputs[1]);
            if braw.numel() != 1 {
                return Err(shape_err(name, format!("beta shape {:?}", braw.shape())));
            }
            let beta = braw.data()[0].exp();
            if !(beta > 0.0) {
                return Err(TapeError::Invalid {
                    op: name,
                    details: format!("beta = {beta} must be positive"),
                });
            }
            Ok(s.map(|v| laplace_density(v, beta)))
        }
        Op::CumsumRowsExclusive => {
            arity(1)?;
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let d = inputs[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    out[i * c + j] = acc;
                    acc += d[i * c + j];
                }
            }
            Ok(Tensor::from_rows(r, c, out).expect("cumsum"))
        }
        Op::Reshape { rows, cols } => {
            arity(1)?;
            if rows * cols != inputs[0].numel() {
                return Err(shape_err(
                    name,
                    format!("{:?} cannot become [{rows}, {cols}]", inputs[0].shape()),
                ));
            }
            Ok(Tensor::from_rows(*rows, *cols, inputs[0].data().to_vec()).expect("reshape"))
        }
        Op::ConcatRows => {
            if inputs.is_empty() {
                return Err(TapeError::Invalid {
                    op: name,
                    details: "needs at least one input".into(),
                });
            }
            let c = inputs[0].cols();
            for t in inputs {
                if t.cols() != c {
                    return Err(shape_err(
                        name,
                        format!(
                            "column counts differ: {:?}",
                            inputs.iter().map(|t| t.cols()).collect::<Vec<_>>()
                        ),
                    ));
                }
            }
            let rows: usize = inputs.iter().map(|t| t.rows()).sum();
            let mut out = Vec::with_capacity(rows * c);
            for t in inputs {
                out.extend_from_slice(t.data());
            }
            Ok(Tensor::from_rows(rows, c, out).expect("concat-rows"))
        }
    }
}

/// Laplace-CDF density transform: σ high inside (s<0), decaying outside,
/// both branches equal 1/(2β) at s = 0.
pub fn laplace_density(s: f64, beta: f64) -> f64 {
    if s <= 0.0 {
        (1.0 - 0.5 * (s / beta).exp()) / beta
    } else {
        0.5 * (-s / beta).exp() / beta
    }
}

/// ∂σ/∂s (continuous across s = 0).
pub fn laplace_density_ds(s: f64, beta: f64) -> f64 {
    -0.5 * (-s.abs() / beta).exp() / (beta * beta)
}

/// ∂σ/∂β.
pub fn laplace_density_dbeta(s: f64, beta: f64) -> f64 {
    if s <= 0.0 {
        let e = (s / beta).exp();
        (-1.0 + 0.5 * e + 0.5 * (s / beta) * e) / (beta * beta)
    } else {
        0.5 * (-s / beta).exp() * (s / beta - 1.0) / (beta * beta)
    }
}

fn bilinear_cell(gx: f64, gy: f64, w: usize, h: usize) -> (usize, usize, f64, f64) {
    let gxc = gx.clamp(0.0, (w - 1) as f64);
    let gyc = gy.clamp(0.0, (h - 1) as f64);
    let x0 = (gxc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (gyc.floor() as usize).min(h.saturating_sub(2));
    (x0, y0, gxc - x0 as f64, gyc - y0 as f64)
}

/// C = A·B (optionally transposing either operand), accumulating into `out`.
/// Plain ikj loop: the inner dimension stays contiguous for both B and C.
pub(crate) fn matmul_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    if !trans_a && !trans_b {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    } else if trans_a && !trans_b {
        // A is [k, m] stored row-major; effective A[i, kk] = a[kk*m + i]
        for kk in 0..k {
            let arow = &a[kk * m..(kk + 1) * m];
            let brow = &b[kk * n..(kk + 1) * n];
            for i in 0..m {
                let av = arow[i];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    } else if !trans_a && trans_b {
        // B is [n, k] stored row-major; effective B[kk, j] = b[j*k + kk]
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += arow[kk] * brow[kk];
                }
                orow[j] += acc;
            }
        }
    } else {
        unreachable!("double-transposed matmul is never emitted");
    }
}

// ── backward rules ───────────────────────────────────────────────────

fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    out_grad: &Tensor,
) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => {
            let kind = broadcast_kind("add", inputs[0], inputs[1]).expect("checked in forward");
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            vec![
                Some(out_grad.clone()),
                Some(reduce_to(inputs[1], out_grad, &kind, r, c)),
            ]
        }
        Op::Sub => {
            let kind = broadcast_kind("sub", inputs[0], inputs[1]).expect("checked in forward");
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let neg = out_grad.map(|v| -v);
            vec![
                Some(out_grad.clone()),
                Some(reduce_to(inputs[1], &neg, &kind, r, c)),
            ]
        }
        Op::Mul => {
            let kind = broadcast_kind("mul", inputs[0], inputs[1]).expect("checked in forward");
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            // d/da = g * b (b broadcast to a's shape)
            let b_full =
                binary_broadcast("mul", out_grad, inputs[1], |g, b| g * b).expect("mul bwd a");
            // d/db = reduce(g * a)
            let ga = Tensor::new(
                inputs[0].shape().to_vec(),
                out_grad
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(g, a)| g * a)
                    .collect(),
            )
            .expect("mul bwd b");
            vec![
                Some(b_full),
                Some(reduce_to(inputs[1], &ga, &kind, r, c)),
            ]
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            // dA = G Bᵀ, dB = Aᵀ G
            let mut da = vec![0.0; m * k];
            matmul_into(out_grad.data(), b.data(), &mut da, m, n, k, false, true);
            let mut db = vec![0.0; k * n];
            matmul_into(a.data(), out_grad.data(), &mut db, k, m, n, true, false);
            vec![
                Some(Tensor::new(a.shape().to_vec(), da).expect("dA")),
                Some(Tensor::new(b.shape().to_vec(), db).expect("dB")),
            ]
        }
        Op::Relu => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        }))],
        Op::Softplus => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| {
            g * softplus_prime(x)
        }))],
        Op::Exp => {
            // reuse the cached output e^x
            let g = Tensor::new(
                inputs[0].shape().to_vec(),
                out_grad
                    .data()
                    .iter()
                    .zip(output.data())
                    .map(|(g, y)| g * y)
                    .collect(),
            )
            .expect("exp bwd");
            vec![Some(g)]
        }
        Op::Log => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| g / x))],
        Op::Sin => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| g * x.cos()))],
        Op::Cos => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| -g * x.sin()))],
        Op::Sqrt => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| {
            if x > 0.0 {
                0.5 * g / x.sqrt()
            } else {
                0.0
            }
        }))],
        Op::Abs => vec![Some(unary_bwd(inputs[0], out_grad, |x, g| g * sign0(x)))],
        Op::Huber { delta } => {
            let d = *delta;
            vec![Some(unary_bwd(inputs[0], out_grad, move |x, g| {
                if x.abs() <= d {
                    g * x
                } else {
                    g * d * sign0(x)
                }
            }))]
        }
        Op::Sum => {
            let g = out_grad.item();
            vec![Some(inputs[0].map(|_| g))]
        }
        Op::Mean => {
            let g = out_grad.item() / inputs[0].numel() as f64;
            vec![Some(inputs[0].map(|_| g))]
        }
        Op::SumRows => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = gd[i];
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("sum-rows bwd"))]
        }
        Op::SumGroups { group } => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let g = r / group;
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            for gi in 0..g {
                for k in 0..*group {
                    let row = (gi * group + k) * c;
                    out[row..row + c].copy_from_slice(&gd[gi * c..(gi + 1) * c]);
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("sum-groups bwd"))]
        }
        Op::RepeatRows { times } => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for k in 0..*times {
                    let src = (i * times + k) * c;
                    for j in 0..c {
                        out[i * c + j] += gd[src + j];
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("repeat bwd"))]
        }
        Op::Concat => {
            let r = inputs[0].rows();
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            let gd = out_grad.data();
            let mut grads = Vec::with_capacity(inputs.len());
            let mut off = 0;
            for t in inputs {
                let c = t.cols();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c..(i + 1) * c]
                        .copy_from_slice(&gd[i * total + off..i * total + off + c]);
                }
                grads.push(Some(
                    Tensor::new(t.shape().to_vec(), out).expect("concat bwd"),
                ));
                off += c;
            }
            grads
        }
        Op::SliceCols { start, len } => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c + start..i * c + start + len]
                    .copy_from_slice(&gd[i * len..(i + 1) * len]);
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("slice-cols bwd"))]
        }
        Op::SliceRows { start, len } => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            out[start * c..(start + len) * c].copy_from_slice(gd);
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("slice-rows bwd"))]
        }
        Op::L2NormRows => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let d = inputs[0].data();
            let od = output.data();
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let norm = od[i];
                if norm > 0.0 {
                    let s = gd[i] / norm;
                    for j in 0..c {
                        out[i * c + j] = s * d[i * c + j];
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("l2norm bwd"))]
        }
        Op::BilinearSample { height, width } => {
            let (grid, coords) = (inputs[0], inputs[1]);
            let (h, w) = (*height, *width);
            let c = grid.cols();
            let p = coords.rows();
            let gd = grid.data();
            let cd = coords.data();
            let og = out_grad.data();
            let mut dgrid = vec![0.0; gd.len()];
            let mut dcoords = vec![0.0; p * 2];
            for i in 0..p {
                let (gx, gy) = (cd[i * 2], cd[i * 2 + 1]);
                let (x0, y0, tx, ty) = bilinear_cell(gx, gy, w, h);
                let i00 = (y0 * w + x0) * c;
                let i01 = (y0 * w + x0 + 1) * c;
                let i10 = ((y0 + 1) * w + x0) * c;
                let i11 = ((y0 + 1) * w + x0 + 1) * c;
                let in_x = (0.0..=(w - 1) as f64).contains(&gx);
                let in_y = (0.0..=(h - 1) as f64).contains(&gy);
                let (mut dx, mut dy) = (0.0, 0.0);
                for j in 0..c {
                    let g = og[i * c + j];
                    dgrid[i00 + j] += g * (1.0 - ty) * (1.0 - tx);
                    dgrid[i01 + j] += g * (1.0 - ty) * tx;
                    dgrid[i10 + j] += g * ty * (1.0 - tx);
                    dgrid[i11 + j] += g * ty * tx;
                    dx += g * ((1.0 - ty) * (gd[i01 + j] - gd[i00 + j])
                        + ty * (gd[i11 + j] - gd[i10 + j]));
                    dy += g * ((1.0 - tx) * (gd[i10 + j] - gd[i00 + j])
                        + tx * (gd[i11 + j] - gd[i01 + j]));
                }
                if in_x {
                    dcoords[i * 2] = dx;
                }
                if in_y {
                    dcoords[i * 2 + 1] = dy;
                }
            }
            vec![
                Some(Tensor::new(grid.shape().to_vec(), dgrid).expect("bilinear dgrid")),
                Some(Tensor::new(coords.shape().to_vec(), dcoords).expect("bilinear dcoords")),
            ]
        }
        Op::WorldToCamera => {
            let (q, cen, pts) = (inputs[0], inputs[1], inputs[2]);
            let (qh, _) = quat_normalize(q.data());
            let cd = cen.data();
            let p = pts.rows();
            let og = out_grad.data();
            let mut dq_hat = [0.0; 4];
            let mut dc = [0.0; 3];
            let mut dpts = vec![0.0; p * 3];
            let qconj = [qh[0], -qh[1], -qh[2], -qh[3]];
            for i in 0..p {
                let row = pts.row(i);
                let v = [row[0] - cd[0], row[1] - cd[1], row[2] - cd[2]];
                let g = [og[i * 3], og[i * 3 + 1], og[i * 3 + 2]];
                // d/dv = Rᵀ g (rotation by the conjugate)
                let rtg = quat_rotate(&qconj, g);
                dpts[i * 3] = rtg[0];
                dpts[i * 3 + 1] = rtg[1];
                dpts[i * 3 + 2] = rtg[2];
                dc[0] -= rtg[0];
                dc[1] -= rtg[1];
                dc[2] -= rtg[2];
                let jac = rotate_jacobian_qhat(&qh, v);
                for col in 0..4 {
                    dq_hat[col] += g[0] * jac[0][col] + g[1] * jac[1][col] + g[2] * jac[2][col];
                }
            }
            let dq = chain_normalize(q.data(), dq_hat);
            vec![
                Some(Tensor::new(q.shape().to_vec(), dq.to_vec()).expect("w2c dq")),
                Some(Tensor::new(cen.shape().to_vec(), dc.to_vec()).expect("w2c dc")),
                Some(Tensor::new(pts.shape().to_vec(), dpts).expect("w2c dpts")),
            ]
        }
        Op::PinholeProject { width, height } => {
            let (pts, fov) = (inputs[0], inputs[1]);
            let fd = fov.data();
            let (tan_h, tan_v) = ((0.5 * fd[0]).tan(), (0.5 * fd[1]).tan());
            let (fx, fy) = (0.5 * width / tan_h, 0.5 * height / tan_v);
            // dfx/dfov_h = −(width/4)/sin²(fov_h/2)
            let dfx = -0.25 * width / (0.5 * fd[0]).sin().powi(2);
            let dfy = -0.25 * height / (0.5 * fd[1]).sin().powi(2);
            let p = pts.rows();
            let og = out_grad.data();
            let mut dpts = vec![0.0; p * 3];
            let mut dfov = [0.0; 2];
            for i in 0..p {
                let row = pts.row(i);
                let (x, y) = (row[0], row[1]);
                let clamped = row[2] < MIN_PROJECT_DEPTH;
                let z = row[2].max(MIN_PROJECT_DEPTH);
                let range = (x * x + y * y + row[2] * row[2]).sqrt();
                let (gu, gv, gd) = (og[i * 3], og[i * 3 + 1], og[i * 3 + 2]);
                dpts[i * 3] = gu * fx / z;
                dpts[i * 3 + 1] = gv * fy / z;
                if !clamped {
                    dpts[i * 3] += 0.0;
                    dpts[i * 3 + 2] = -(gu * fx * x + gv * fy * y) / (z * z);
                }
                if range > 0.0 {
                    dpts[i * 3] += gd * x / range;
                    dpts[i * 3 + 1] += gd * y / range;
                    dpts[i * 3 + 2] += gd * row[2] / range;
                }
                dfov[0] += gu * dfx * x / z;
                dfov[1] += gv * dfy * y / z;
            }
            vec![
                Some(Tensor::new(pts.shape().to_vec(), dpts).expect("proj dpts")),
                Some(Tensor::new(fov.shape().to_vec(), dfov.to_vec()).expect("proj dfov")),
            ]
        }
        Op::CameraRayDirs { width, height } => {
            let (q, fov, pixels) = (inputs[0], inputs[1], inputs[2]);
            let fd = fov.data();
            let (tan_h, tan_v) = ((0.5 * fd[0]).tan(), (0.5 * fd[1]).tan());
            let (fx, fy) = (0.5 * width / tan_h, 0.5 * height / tan_v);
            let dfx = -0.25 * width / (0.5 * fd[0]).sin().powi(2);
            let dfy = -0.25 * height / (0.5 * fd[1]).sin().powi(2);
            let (cx, cy) = (0.5 * width, 0.5 * height);
            let (qh, _) = quat_normalize(q.data());
            let qconj = [qh[0], -qh[1], -qh[2], -qh[3]];
            let r = pixels.rows();
            let og = out_grad.data();
            let mut dq_conj_hat = [0.0; 4];
            let mut dfov = [0.0; 2];
            for i in 0..r {
                let px = pixels.row(i);
                let a = (px[0] - cx) / fx;
                let b = (px[1] - cy) / fy;
                let dc = [a, b, 1.0];
                let n2 = a * a + b * b + 1.0;
                let n = n2.sqrt();
                let dhat = [a / n, b / n, 1.0 / n];
                let g = [og[i * 3], og[i * 3 + 1], og[i * 3 + 2]];
                // grad w.r.t. the conjugate quaternion rotating dhat
                let jac = rotate_jacobian_qhat(&qconj, dhat);
                for col in 0..4 {
                    dq_conj_hat[col] +=
                        g[0] * jac[0][col] + g[1] * jac[1][col] + g[2] * jac[2][col];
                }
                // grad w.r.t. dhat, then back through normalization to dc, then fov
                let rg = quat_rotate(&qh, g); // (R(q*))ᵀ g = R(q) g
                let dot = rg[0] * dhat[0] + rg[1] * dhat[1] + rg[2] * dhat[2];
                let ddc = [
                    (rg[0] - dhat[0] * dot) / n,
                    (rg[1] - dhat[1] * dot) / n,
                    (rg[2] - dhat[2] * dot) / n,
                ];
                // a = (px−cx)/fx ⇒ da/dfov_h = −a·dfx/fx
                dfov[0] += ddc[0] * (-a * dfx / fx);
                dfov[1] += ddc[1] * (-b * dfy / fy);
                let _ = dc;
            }
            // conjugation flips the vector part's gradient sign
            let dq_hat = [dq_conj_hat[0], -dq_conj_hat[1], -dq_conj_hat[2], -dq_conj_hat[3]];
            let dq = chain_normalize(q.data(), dq_hat);
            vec![
                Some(Tensor::new(q.shape().to_vec(), dq.to_vec()).expect("rays dq")),
                Some(Tensor::new(fov.shape().to_vec(), dfov.to_vec()).expect("rays dfov")),
                None,
            ]
        }
        Op::SdfDensity => {
            let (s, braw) = (inputs[0], inputs[1]);
            let beta = braw.data()[0].exp();
            let gd = out_grad.data();
            let sd = s.data();
            let mut ds = vec![0.0; sd.len()];
            let mut db = 0.0;
            for i in 0..sd.len() {
                ds[i] = gd[i] * laplace_density_ds(sd[i], beta);
                db += gd[i] * laplace_density_dbeta(sd[i], beta);
            }
            // chain β = exp(raw)
            db *= beta;
            vec![
                Some(Tensor::new(s.shape().to_vec(), ds).expect("density ds")),
                Some(Tensor::new(braw.shape().to_vec(), vec![db]).expect("density db")),
            ]
        }
        Op::CumsumRowsExclusive => {
            let (r, c) = (inputs[0].rows(), inputs[0].cols());
            let gd = out_grad.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let mut acc = 0.0;
                for j in (0..c).rev() {
                    out[i * c + j] = acc;
                    acc += gd[i * c + j];
                }
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).expect("cumsum bwd"))]
        }
        Op::Reshape { .. } => {
            vec![Some(
                Tensor::new(inputs[0].shape().to_vec(), out_grad.data().to_vec())
                    .expect("reshape bwd"),
            )]
        }
        Op::ConcatRows => {
            let gd = out_grad.data();
            let c = inputs[0].cols();
            let mut grads = Vec::with_capacity(inputs.len());
            let mut off = 0;
            for t in inputs {
                let n = t.rows() * c;
                grads.push(Some(
                    Tensor::new(t.shape().to_vec(), gd[off..off + n].to_vec())
                        .expect("concat-rows bwd"),
                ));
                off += n;
            }
            grads
        }
    }
}

fn unary_bwd(input: &Tensor, out_grad: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(out_grad.data())
            .map(|(&x, &g)| f(x, g))
            .collect(),
    )
    .expect("unary bwd")
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
