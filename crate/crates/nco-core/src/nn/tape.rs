//! The recording tape: primitive applications, forward values, and the
//! reverse sweep.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Variance floor inside per-row feature normalization.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// `a[r, c] + b[c]`, `b` broadcast across rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    /// `a x b^T` over the last two dims.
    MatmulNT(usize, usize),
    Tanh(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    /// Mean over the first axis of a 2-D tensor.
    MeanDim0(usize),
    /// Softmax over the last dim. Masked entries were written as exactly
    /// zero during the forward pass, which already gates their gradient, so
    /// the mask itself is not kept.
    Softmax(usize),
    /// Concatenation of 1-D tensors.
    Concat1(Vec<usize>),
    /// Row selection from a 2-D tensor.
    GatherRows {
        src: usize,
        idx: Vec<usize>,
    },
    /// Single element of a 1-D tensor, as a scalar.
    Select {
        src: usize,
        index: usize,
    },
    /// Per-row feature normalization with learned gain and bias.
    NormalizeRows {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Reshape(usize),
    Permute3 {
        src: usize,
        perm: [usize; 3],
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation record. Nodes reference only earlier nodes, so the
/// sequence is already topologically ordered.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a differentiable leaf holding a copy of `t`.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Records a non-differentiable constant.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    /// Concatenates 1-D vars into one 1-D var.
    pub fn concat1<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Domain("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut requires = false;
        {
            let nodes = self.nodes.borrow();
            for v in parts {
                let node = &nodes[v.id];
                if node.shape.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "concat1",
                        lhs: node.shape.clone(),
                        rhs: vec![],
                    });
                }
                data.extend_from_slice(&node.data);
                requires |= node.requires_grad;
            }
        }
        let len = data.len();
        Ok(self.push(
            vec![len],
            data,
            requires,
            Op::Concat1(parts.iter().map(|v| v.id).collect()),
        ))
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id])
    }

    /// Runs the reverse sweep from a scalar loss; each node is visited once
    /// in reverse recording order. Gradients from earlier sweeps are cleared.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Domain("loss recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            backprop_node(&nodes, node, &gout, &mut grads)?;
            // Leaves keep their accumulated gradient; interior nodes may too,
            // but only leaves are read back in practice.
            grads[id] = Some(gout);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Accumulates `gout` into the gradients of `node`'s inputs.
fn backprop_node(
    nodes: &[Node],
    node: &Node,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let needs = |id: usize| nodes[id].requires_grad;
    // Lends the (lazily created) gradient buffer of node `$id`.
    macro_rules! acc {
        ($id:expr) => {{
            let id = $id;
            let len = nodes[id].data.len();
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }};
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                axpy(acc!(*a), gout, 1.0);
            }
            if needs(*b) {
                axpy(acc!(*b), gout, 1.0);
            }
        }
        Op::AddRow(a, b) => {
            if needs(*a) {
                axpy(acc!(*a), gout, 1.0);
            }
            if needs(*b) {
                let c = nodes[*b].data.len();
                let g = acc!(*b);
                for chunk in gout.chunks_exact(c) {
                    for (j, &v) in chunk.iter().enumerate() {
                        g[j] += v;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                axpy(acc!(*a), gout, 1.0);
            }
            if needs(*b) {
                axpy(acc!(*b), gout, -1.0);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = &nodes[*b].data;
                let g = acc!(*a);
                for i in 0..gout.len() {
                    g[i] += gout[i] * bv[i];
                }
            }
            if needs(*b) {
                let av = &nodes[*a].data;
                let g = acc!(*b);
                for i in 0..gout.len() {
                    g[i] += gout[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                axpy(acc!(*a), gout, *c);
            }
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (batch, m, k, p, a_batched, b_batched) = matmul_dims(sa, sb).expect("validated");
            let av = &nodes[*a].data;
            let bv = &nodes[*b].data;
            if needs(*a) {
                let g = acc!(*a);
                for t in 0..batch {
                    let go = &gout[t * m * p..(t + 1) * m * p];
                    let bo = if b_batched {
                        &bv[t * k * p..(t + 1) * k * p]
                    } else {
                        &bv[..]
                    };
                    let ga = if a_batched {
                        &mut g[t * m * k..(t + 1) * m * k]
                    } else {
                        &mut g[..]
                    };
                    mm_nt(go, bo, ga, m, p, k);
                }
            }
            if needs(*b) {
                let g = acc!(*b);
                for t in 0..batch {
                    let go = &gout[t * m * p..(t + 1) * m * p];
                    let ao = if a_batched {
                        &av[t * m * k..(t + 1) * m * k]
                    } else {
                        &av[..]
                    };
                    let gb = if b_batched {
                        &mut g[t * k * p..(t + 1) * k * p]
                    } else {
                        &mut g[..]
                    };
                    mm_tn(ao, go, gb, m, k, p);
                }
            }
        }
        Op::MatmulNT(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (batch, m, k, p) = matmul_nt_dims(sa, sb).expect("validated");
            let av = &nodes[*a].data;
            let bv = &nodes[*b].data;
            if needs(*a) {
                let g = acc!(*a);
                for t in 0..batch {
                    let go = &gout[t * m * p..(t + 1) * m * p];
                    let bo = &bv[t * p * k..(t + 1) * p * k];
                    mm_nn(go, bo, &mut g[t * m * k..(t + 1) * m * k], m, p, k);
                }
            }
            if needs(*b) {
                let g = acc!(*b);
                for t in 0..batch {
                    let go = &gout[t * m * p..(t + 1) * m * p];
                    let ao = &av[t * m * k..(t + 1) * m * k];
                    mm_tn(go, ao, &mut g[t * p * k..(t + 1) * p * k], m, p, k);
                }
            }
        }
        Op::Tanh(a) => {
            if needs(*a) {
                let y = &node.data;
                let g = acc!(*a);
                for i in 0..gout.len() {
                    g[i] += gout[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Log(a) => {
            if needs(*a) {
                let x = &nodes[*a].data;
                let g = acc!(*a);
                for i in 0..gout.len() {
                    g[i] += gout[i] / x[i];
                }
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                let g = acc!(*a);
                for v in g.iter_mut() {
                    *v += gout[0];
                }
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = nodes[*a].data.len() as f64;
                let g = acc!(*a);
                let share = gout[0] / n;
                for v in g.iter_mut() {
                    *v += share;
                }
            }
        }
        Op::MeanDim0(a) => {
            if needs(*a) {
                let rows = nodes[*a].shape[0];
                let cols = nodes[*a].shape[1];
                let g = acc!(*a);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for j in 0..cols {
                        g[r * cols + j] += gout[j] * inv;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            if needs(*x) {
                let y = &node.data;
                let last = *node.shape.last().expect("nonempty shape");
                let g = acc!(*x);
                for row in 0..y.len() / last {
                    let off = row * last;
                    let mut dot = 0.0;
                    for j in 0..last {
                        dot += gout[off + j] * y[off + j];
                    }
                    for j in 0..last {
                        g[off + j] += y[off + j] * (gout[off + j] - dot);
                    }
                }
            }
        }
        Op::Concat1(parts) => {
            let mut offset = 0;
            for &pid in parts {
                let len = nodes[pid].data.len();
                if needs(pid) {
                    let g = acc!(pid);
                    for j in 0..len {
                        g[j] += gout[offset + j];
                    }
                }
                offset += len;
            }
        }
        Op::GatherRows { src, idx } => {
            if needs(*src) {
                let cols = nodes[*src].shape[1];
                let g = acc!(*src);
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..cols {
                        g[row * cols + j] += gout[k * cols + j];
                    }
                }
            }
        }
        Op::Select { src, index } => {
            if needs(*src) {
                acc!(*src)[*index] += gout[0];
            }
        }
        Op::NormalizeRows { x, gain, bias } => {
            let rows = nodes[*x].shape[0];
            let cols = nodes[*x].shape[1];
            let xv = &nodes[*x].data;
            let gv = &nodes[*gain].data;
            let inv_c = 1.0 / cols as f64;
            for r in 0..rows {
                let off = r * cols;
                let row = &xv[off..off + cols];
                let mean = row.iter().sum::<f64>() * inv_c;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
                let inv_std = 1.0 / (var + NORM_EPS).sqrt();
                // dxhat, plus the two row sums the input gradient needs.
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..cols {
                    let xhat = (row[j] - mean) * inv_std;
                    let dxhat = gout[off + j] * gv[j];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                if needs(*x) {
                    let g = acc!(*x);
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = gout[off + j] * gv[j];
                        g[off + j] += inv_std * (dxhat - s1 * inv_c - xhat * s2 * inv_c);
                    }
                }
                if needs(*gain) {
                    let g = acc!(*gain);
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        g[j] += gout[off + j] * xhat;
                    }
                }
                if needs(*bias) {
                    let g = acc!(*bias);
                    for j in 0..cols {
                        g[j] += gout[off + j];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                axpy(acc!(*a), gout, 1.0);
            }
        }
        Op::Permute3 { src, perm } => {
            if needs(*src) {
                let out_shape = &node.shape;
                let src_shape = &nodes[*src].shape;
                let g = acc!(*src);
                permute3_accumulate(gout, out_shape, src_shape, *perm, g);
            }
        }
    }
    Ok(())
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for i in 0..dst.len() {
        dst[i] += src[i] * scale;
    }
}

/// `out += a x b` with `a: [m, k]`, `b: [k, p]`.
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a x b^T` with `a: [m, k]`, `b: [p, k]`.
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = 0.0;
            for kk in 0..k {
                dot += arow[kk] * brow[kk];
            }
            orow[j] += dot;
        }
    }
}

/// `out += a^T x b` with `a: [m, k]`, `b: [m, p]`.
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * p..(r + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Accumulates a permuted tensor back into source layout.
fn permute3_accumulate(
    gout: &[f64],
    out_shape: &[usize],
    src_shape: &[usize],
    perm: [usize; 3],
    g: &mut [f64],
) {
    let (o0, o1, o2) = (out_shape[0], out_shape[1], out_shape[2]);
    let (s1, s2) = (src_shape[1], src_shape[2]);
    let mut j = [0usize; 3];
    for i0 in 0..o0 {
        for i1 in 0..o1 {
            for i2 in 0..o2 {
                j[perm[0]] = i0;
                j[perm[1]] = i1;
                j[perm[2]] = i2;
                let src_off = (j[0] * s1 + j[1]) * s2 + j[2];
                let out_off = (i0 * o1 + i1) * o2 + i2;
                g[src_off] += gout[out_off];
            }
        }
    }
}

/// Resolves matmul shapes: returns `(batch, m, k, p, a_batched, b_batched)`.
fn matmul_dims(
    sa: &[usize],
    sb: &[usize],
) -> Result<(usize, usize, usize, usize, bool, bool)> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    match (sa.len(), sb.len()) {
        (2, 2) => {
            if sa[1] != sb[0] {
                return Err(err());
            }
            Ok((1, sa[0], sa[1], sb[1], false, false))
        }
        (3, 3) => {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(err());
            }
            Ok((sa[0], sa[1], sa[2], sb[2], true, true))
        }
        (3, 2) => {
            if sa[2] != sb[0] {
                return Err(err());
            }
            Ok((sa[0], sa[1], sa[2], sb[1], true, false))
        }
        (2, 3) => {
            if sa[1] != sb[1] {
                return Err(err());
            }
            Ok((sb[0], sa[0], sa[1], sb[2], false, true))
        }
        _ => Err(err()),
    }
}

/// Resolves `a x b^T` shapes: returns `(batch, m, k, p)`.
fn matmul_nt_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::ShapeMismatch {
        op: "matmul_nt",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    match (sa.len(), sb.len()) {
        (2, 2) => {
            if sa[1] != sb[1] {
                return Err(err());
            }
            Ok((1, sa[0], sa[1], sb[0]))
        }
        (3, 3) => {
            if sa[0] != sb[0] || sa[2] != sb[2] {
                return Err(err());
            }
            Ok((sa[0], sa[1], sa[2], sb[1]))
        }
        _ => Err(err()),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    /// Copies out the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.with_node(self.id, |n| Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
        })
    }

    /// Reads the forward value without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        self.tape.with_node(self.id, |n| f(&n.data))
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.with_node(self.id, |n| n.data[0])
    }

    /// Gradient accumulated by the latest [`Tape::backward`] call.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grads.borrow().get(self.id).and_then(|g| g.clone())
    }

    fn same_tape(&self, other: &Var<'t>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }

    fn binary_elementwise(
        &self,
        other: Var<'t>,
        op_name: &'static str,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        if !self.same_tape(&other) {
            return Err(Error::Domain("operands recorded on different tapes".into()));
        }
        let (shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: op_name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let data: Vec<f64> = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), data, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, data, requires, make(self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "mul", Op::Mul, |x, y| x * y)
    }

    /// Adds a vector to every row of a 2-D tensor.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[row.id];
            if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let mut data = a.data.clone();
            for chunk in data.chunks_exact_mut(cols) {
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v += b.data[j];
                }
            }
            (a.shape.clone(), data, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, data, requires, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let (shape, data, requires) = self.tape.with_node(self.id, |n| {
            (
                n.shape.clone(),
                n.data.iter().map(|&x| x * c).collect::<Vec<f64>>(),
                n.requires_grad,
            )
        });
        self.tape.push(shape, data, requires, Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (out_shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let (batch, m, k, p, a_batched, b_batched) = matmul_dims(&a.shape, &b.shape)?;
            let mut data = vec![0.0; batch * m * p];
            for t in 0..batch {
                let ao = if a_batched {
                    &a.data[t * m * k..(t + 1) * m * k]
                } else {
                    &a.data[..]
                };
                let bo = if b_batched {
                    &b.data[t * k * p..(t + 1) * k * p]
                } else {
                    &b.data[..]
                };
                mm_nn(ao, bo, &mut data[t * m * p..(t + 1) * m * p], m, k, p);
            }
            let out_shape = if a.shape.len() == 2 && b.shape.len() == 2 {
                vec![m, p]
            } else {
                vec![batch, m, p]
            };
            (out_shape, data, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(out_shape, data, requires, Op::Matmul(self.id, other.id)))
    }

    /// `self x other^T` over the last two dims.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (out_shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let (batch, m, k, p) = matmul_nt_dims(&a.shape, &b.shape)?;
            let mut data = vec![0.0; batch * m * p];
            for t in 0..batch {
                mm_nt(
                    &a.data[t * m * k..(t + 1) * m * k],
                    &b.data[t * p * k..(t + 1) * p * k],
                    &mut data[t * m * p..(t + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
            let out_shape = if a.shape.len() == 2 {
                vec![m, p]
            } else {
                vec![batch, m, p]
            };
            (out_shape, data, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(out_shape, data, requires, Op::MatmulNT(self.id, other.id)))
    }

    pub fn tanh(&self) -> Var<'t> {
        let (shape, data, requires) = self.tape.with_node(self.id, |n| {
            (
                n.shape.clone(),
                n.data.iter().map(|&x| x.tanh()).collect::<Vec<f64>>(),
                n.requires_grad,
            )
        });
        self.tape.push(shape, data, requires, Op::Tanh(self.id))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        let (shape, data, requires) = self.tape.with_node(self.id, |n| {
            let bad = n.data.iter().any(|&x| x <= 0.0 || !x.is_finite());
            if bad {
                return (n.shape.clone(), Vec::new(), n.requires_grad);
            }
            (
                n.shape.clone(),
                n.data.iter().map(|&x| x.ln()).collect::<Vec<f64>>(),
                n.requires_grad,
            )
        });
        if data.is_empty() {
            return Err(Error::NonFinite {
                context: "log of non-positive value".into(),
            });
        }
        Ok(self.tape.push(shape, data, requires, Op::Log(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let (total, requires) = self
            .tape
            .with_node(self.id, |n| (n.data.iter().sum::<f64>(), n.requires_grad));
        self.tape
            .push(vec![1], vec![total], requires, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let (total, len, requires) = self.tape.with_node(self.id, |n| {
            (n.data.iter().sum::<f64>(), n.data.len(), n.requires_grad)
        });
        self.tape.push(
            vec![1],
            vec![total / len as f64],
            requires,
            Op::Mean(self.id),
        )
    }

    /// Mean across rows of a 2-D tensor, one value per column.
    pub fn mean_dim0(&self) -> Result<Var<'t>> {
        let (cols, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "mean_dim0",
                    lhs: a.shape.clone(),
                    rhs: vec![],
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; cols];
            for r in 0..rows {
                for j in 0..cols {
                    data[j] += a.data[r * cols + j];
                }
            }
            let inv = 1.0 / rows as f64;
            for v in &mut data {
                *v *= inv;
            }
            (cols, data, a.requires_grad)
        };
        Ok(self
            .tape
            .push(vec![cols], data, requires, Op::MeanDim0(self.id)))
    }

    /// Softmax over the last dim. Masked (`true`) entries get probability
    /// exactly zero; a fully masked row is an error.
    pub fn softmax_lastdim(&self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let (shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let last = *a.shape.last().ok_or(Error::ShapeMismatch {
                op: "softmax",
                lhs: a.shape.clone(),
                rhs: vec![],
            })?;
            if let Some(m) = mask {
                if m.len() != a.data.len() {
                    return Err(Error::ShapeMismatch {
                        op: "softmax_mask",
                        lhs: a.shape.clone(),
                        rhs: vec![m.len()],
                    });
                }
            }
            let rows = a.data.len() / last;
            let mut data = vec![0.0; a.data.len()];
            for r in 0..rows {
                let off = r * last;
                let row_mask = mask.map(|m| &m[off..off + last]);
                let keep = |j: usize| row_mask.map_or(true, |m| !m[j]);
                let mut max = f64::NEG_INFINITY;
                for j in 0..last {
                    if keep(j) && a.data[off + j] > max {
                        max = a.data[off + j];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::NoFeasibleAction);
                }
                let mut total = 0.0;
                for j in 0..last {
                    if keep(j) {
                        let e = (a.data[off + j] - max).exp();
                        data[off + j] = e;
                        total += e;
                    }
                }
                for j in 0..last {
                    if keep(j) {
                        data[off + j] /= total;
                    }
                }
            }
            (a.shape.clone(), data, a.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, data, requires, Op::Softmax(self.id)))
    }

    /// Selects rows of a 2-D tensor in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (cols, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: a.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if idx.iter().any(|&r| r >= rows) {
                return Err(Error::Domain(format!(
                    "gather index out of range for {rows} rows"
                )));
            }
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                data.extend_from_slice(&a.data[r * cols..(r + 1) * cols]);
            }
            (cols, data, a.requires_grad)
        };
        Ok(self.tape.push(
            vec![idx.len(), cols],
            data,
            requires,
            Op::GatherRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Single element of a 1-D tensor as a scalar node.
    pub fn select(&self, index: usize) -> Result<Var<'t>> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 1 || index >= a.data.len() {
                return Err(Error::Domain(format!(
                    "select index {index} invalid for shape {:?}",
                    a.shape
                )));
            }
            (a.data[index], a.requires_grad)
        };
        Ok(self.tape.push(
            vec![1],
            vec![value],
            requires,
            Op::Select {
                src: self.id,
                index,
            },
        ))
    }

    /// Per-row feature normalization: each row is standardized across its
    /// features, then scaled and shifted by learned vectors.
    pub fn normalize_rows(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let g = &nodes[gain.id];
            let b = &nodes[bias.id];
            if a.shape.len() != 2
                || g.shape.len() != 1
                || b.shape.len() != 1
                || g.shape[0] != a.shape[1]
                || b.shape[0] != a.shape[1]
            {
                return Err(Error::ShapeMismatch {
                    op: "normalize_rows",
                    lhs: a.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let inv_c = 1.0 / cols as f64;
            let mut data = vec![0.0; a.data.len()];
            for r in 0..rows {
                let off = r * cols;
                let row = &a.data[off..off + cols];
                let mean = row.iter().sum::<f64>() * inv_c;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
                let inv_std = 1.0 / (var + NORM_EPS).sqrt();
                for j in 0..cols {
                    let xhat = (row[j] - mean) * inv_std;
                    data[off + j] = g.data[j] * xhat + b.data[j];
                }
            }
            (
                a.shape.clone(),
                data,
                a.requires_grad || g.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            shape,
            data,
            requires,
            Op::NormalizeRows {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
            },
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Var<'t>> {
        let (data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let expect: usize = new_shape.iter().product();
            if expect != a.data.len() || new_shape.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: new_shape.to_vec(),
                });
            }
            (a.data.clone(), a.requires_grad)
        };
        Ok(self
            .tape
            .push(new_shape.to_vec(), data, requires, Op::Reshape(self.id)))
    }

    /// Axis permutation of a 3-D tensor; `perm[k]` names the source axis that
    /// becomes output axis `k`.
    pub fn permute3(&self, perm: [usize; 3]) -> Result<Var<'t>> {
        {
            let mut seen = [false; 3];
            for &p in &perm {
                if p > 2 || seen[p] {
                    return Err(Error::Domain(format!("invalid permutation {perm:?}")));
                }
                seen[p] = true;
            }
        }
        let (out_shape, data, requires) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "permute3",
                    lhs: a.shape.clone(),
                    rhs: perm.to_vec(),
                });
            }
            let s = &a.shape;
            let out_shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
            let mut data = vec![0.0; a.data.len()];
            let (o1, o2) = (out_shape[1], out_shape[2]);
            let mut j = [0usize; 3];
            for i0 in 0..out_shape[0] {
                for i1 in 0..o1 {
                    for i2 in 0..o2 {
                        j[perm[0]] = i0;
                        j[perm[1]] = i1;
                        j[perm[2]] = i2;
                        let src_off = (j[0] * s[1] + j[1]) * s[2] + j[2];
                        data[(i0 * o1 + i1) * o2 + i2] = a.data[src_off];
                    }
                }
            }
            (out_shape, data, a.requires_grad)
        };
        Ok(self.tape.push(
            out_shape,
            data,
            requires,
            Op::Permute3 {
                src: self.id,
                perm,
            },
        ))
    }
}
