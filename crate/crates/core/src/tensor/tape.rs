//! Recording tape and reverse pass.
//!
//! Every differentiable operation appends one node holding the operation
//! kind, the ids of its inputs, and the produced value. Node ids therefore
//! increase strictly in execution order, which makes the id order a
//! topological order: the reverse pass walks ids downward and each node's
//! inputs always have smaller ids. A node consumed by several later nodes
//! receives the sum of their contributions.
//!
//! A tape is confined to one thread. Parallel work uses one tape per unit of
//! work (for this crate: one tape per scene).

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{NodeRef, Precision, Scalar, Store, Tensor};

/// One bilinear (or nearest) image lookup: up to four source rows with
/// weights. `count` rows participate; zero rows mean the lookup is masked
/// and produces (and back-propagates) zeros.
#[derive(Clone, Debug)]
pub(crate) struct PixelSample {
    pub rows: [u32; 4],
    pub weights: [f64; 4],
    pub count: u8,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    /// C = A * B
    Matmul(usize, usize),
    /// C = A * B^T
    MatmulNT(usize, usize),
    /// y = x + bias broadcast over the last axis
    AddBias { x: usize, bias: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Stack { parts: Vec<usize>, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    Reshape(usize),
    GatherRows { x: usize, idx: Arc<Vec<usize>> },
    /// axis None: full reduction to a rank-0 scalar
    ReduceSum { x: usize, axis: Option<usize> },
    GatherImage { img: usize, samples: Arc<Vec<PixelSample>> },
    /// 3x3 box filter over [H, W, C] with reflect padding
    BoxFilter(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Matmul(a, b) | Op::MatmulNT(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a) => vec![*a],
            Op::Relu(a) | Op::Exp(a) | Op::Log(a) | Op::Reshape(a) | Op::BoxFilter(a) => vec![*a],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Stack { parts, .. } | Op::Concat { parts, .. } => parts.clone(),
            Op::Narrow { x, .. } => vec![*x],
            Op::GatherRows { x, .. } => vec![*x],
            Op::ReduceSum { x, .. } => vec![*x],
            Op::GatherImage { img, .. } => vec![*img],
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub store: Store,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of differentiable operations. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub(crate) fn same(a: &Tape, b: &Tape) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers the tensor's value as a leaf and returns the attached
    /// tensor. Gradients accumulate at the leaf and can be read back with
    /// [`Gradients::wrt`].
    pub fn var(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape().to_vec(), t.store().clone());
        Tensor::from_store(
            t.shape().to_vec(),
            t.store().clone(),
            Some(NodeRef { tape: self.clone(), id }),
        )
    }

    pub(crate) fn push(&self, op: Op, shape: Vec<usize>, store: Store) -> usize {
        debug_assert!(op.inputs().iter().all(|&i| i < self.num_nodes()));
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, shape, store });
        inner.nodes.len() - 1
    }

    /// Wraps a freshly computed value into a tensor, recording it when the
    /// operation had tape-attached inputs.
    pub(crate) fn record(
        tape: Option<(Tape, Op)>,
        shape: Vec<usize>,
        store: Store,
    ) -> Tensor {
        match tape {
            None => Tensor::from_store(shape, store, None),
            Some((tape, op)) => {
                let id = tape.push(op, shape.clone(), store.clone());
                Tensor::from_store(shape, store, Some(NodeRef { tape, id }))
            }
        }
    }
}

/// Resolves the tape shared by an operation's inputs, lifting constants to
/// leaves. Returns the node ids in input order, or `None` when every input
/// is detached (the non-recording fast path).
pub(crate) fn join_tape(
    op: &'static str,
    inputs: &[&Tensor],
) -> Result<Option<(Tape, Vec<usize>)>> {
    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some(nr) = t.node() {
            match &tape {
                None => tape = Some(nr.tape.clone()),
                Some(tp) => {
                    if !Tape::same(tp, &nr.tape) {
                        return Err(Error::TapeMismatch { op });
                    }
                }
            }
        }
    }
    let Some(tape) = tape else {
        return Ok(None);
    };
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        let id = match t.node() {
            Some(nr) => nr.id,
            None => tape.push(Op::Leaf, t.shape().to_vec(), t.store().clone()),
        };
        ids.push(id);
    }
    Ok(Some((tape, ids)))
}

enum GradStore {
    F32(Vec<Option<Vec<f32>>>),
    F64(Vec<Option<Vec<f64>>>),
}

/// Per-node gradient accumulators produced by one reverse pass.
pub struct Gradients {
    tape: Tape,
    grads: GradStore,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, or `None` when no
    /// gradient flowed there (detached tensor, foreign tape, or unused node).
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let nr = t.node()?;
        if !Tape::same(&nr.tape, &self.tape) {
            return None;
        }
        let store = match &self.grads {
            GradStore::F32(g) => Store::F32(Arc::new(g.get(nr.id)?.as_ref()?.clone())),
            GradStore::F64(g) => Store::F64(Arc::new(g.get(nr.id)?.as_ref()?.clone())),
        };
        Some(Tensor::from_store(t.shape().to_vec(), store, None))
    }

    /// Like [`Gradients::wrt`] but yields zeros when no gradient flowed.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Tensor {
        self.wrt(t)
            .unwrap_or_else(|| Tensor::zeros_p(t.shape(), t.precision()))
    }
}

impl Tensor {
    /// Reverse pass seeded with 1 at this scalar. Returns the gradient
    /// accumulators for every node reached by the sweep.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.shape().to_vec(),
            });
        }
        let Some(nr) = self.node() else {
            return Err(Error::InvalidArgument {
                op: "backward",
                what: "tensor is not attached to a tape".into(),
            });
        };
        let inner = nr.tape.inner.borrow();
        let grads = match self.precision() {
            Precision::F32 => GradStore::F32(backward_typed::<f32>(&inner.nodes, nr.id)),
            Precision::F64 => GradStore::F64(backward_typed::<f64>(&inner.nodes, nr.id)),
        };
        Ok(Gradients { tape: nr.tape.clone(), grads })
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, n: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; n])
}

/// Safe wrapper over the strided gemm kernel.
/// `c[m,n] += alpha * a[m,k] (strides sa) * b[k,n] (strides sb)` when
/// `accumulate`, otherwise overwrites `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::ZERO);
        }
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Iterates the (base, stride) of every lane along `axis` for `shape`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn backward_typed<T: Scalar>(nodes: &[Node], seed: usize) -> Vec<Option<Vec<T>>> {
    let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
    grads.resize_with(nodes.len(), || None);
    grads[seed] = Some(vec![T::ONE; nodes[seed].store.len()]);

    for id in (0..=seed).rev() {
        // Inputs always have smaller ids, so split keeps the borrow checker
        // happy without cloning the upstream gradient.
        let (lower, upper) = grads.split_at_mut(id);
        let Some(g) = upper[0].as_ref() else { continue };
        let node = &nodes[id];
        let val = |j: usize| T::slice(nodes[j].store());
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(acc(&mut lower[*a], nodes[*a].store.len()), g, T::ONE);
                add_to(acc(&mut lower[*b], nodes[*b].store.len()), g, T::ONE);
            }
            Op::Sub(a, b) => {
                add_to(acc(&mut lower[*a], nodes[*a].store.len()), g, T::ONE);
                add_to(
                    acc(&mut lower[*b], nodes[*b].store.len()),
                    g,
                    T::from_f64(-1.0),
                );
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                mul_backward(acc(&mut lower[*a], va.len()), g, vb);
                mul_backward(acc(&mut lower[*b], vb.len()), g, va);
            }
            Op::Scale(a, c) => {
                add_to(acc(&mut lower[*a], nodes[*a].store.len()), g, T::from_f64(*c));
            }
            Op::AddScalar(a) => {
                add_to(acc(&mut lower[*a], nodes[*a].store.len()), g, T::ONE);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let da = acc(&mut lower[*a], x.len());
                for i in 0..x.len() {
                    if x[i] > T::ZERO {
                        da[i] = da[i].add(g[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let y = T::slice(node.store());
                let da = acc(&mut lower[*a], y.len());
                for i in 0..y.len() {
                    da[i] = da[i].add(g[i].mul(y[i]));
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                let da = acc(&mut lower[*a], x.len());
                for i in 0..x.len() {
                    da[i] = da[i].add(g[i].div(x[i]));
                }
            }
            Op::Matmul(a, b) => {
                let (m, kk) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                let (va, vb) = (val(*a), val(*b));
                // dA += g * B^T ; dB += A^T * g
                gemm(
                    m,
                    n,
                    kk,
                    g,
                    (n as isize, 1),
                    vb,
                    (1, n as isize),
                    acc(&mut lower[*a], m * kk),
                    true,
                );
                gemm(
                    kk,
                    m,
                    n,
                    va,
                    (1, kk as isize),
                    g,
                    (n as isize, 1),
                    acc(&mut lower[*b], kk * n),
                    true,
                );
            }
            Op::MatmulNT(a, b) => {
                let (m, kk) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[0];
                let (va, vb) = (val(*a), val(*b));
                // C = A * B^T: dA += g * B ; dB += g^T * A
                gemm(
                    m,
                    n,
                    kk,
                    g,
                    (n as isize, 1),
                    vb,
                    (kk as isize, 1),
                    acc(&mut lower[*a], m * kk),
                    true,
                );
                gemm(
                    n,
                    m,
                    kk,
                    g,
                    (1, n as isize),
                    va,
                    (kk as isize, 1),
                    acc(&mut lower[*b], n * kk),
                    true,
                );
            }
            Op::AddBias { x, bias } => {
                let d = nodes[*bias].store.len();
                let n = nodes[*x].store.len();
                add_to(acc(&mut lower[*x], n), g, T::ONE);
                let db = acc(&mut lower[*bias], d);
                for r in 0..n / d {
                    for j in 0..d {
                        db[j] = db[j].add(g[r * d + j]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = T::slice(node.store());
                let (outer, len, inner) = lanes(&node.shape, *axis);
                let dx = acc(&mut lower[*x], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            let p = base + j * inner;
                            dot = dot.add(g[p].mul(y[p]));
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = dx[p].add(g[p].sub(dot).mul(y[p]));
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let y = T::slice(node.store());
                let (outer, len, inner) = lanes(&node.shape, *axis);
                let dx = acc(&mut lower[*x], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut gsum = T::ZERO;
                        for j in 0..len {
                            gsum = gsum.add(g[base + j * inner]);
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = dx[p].add(g[p].sub(y[p].exp().mul(gsum)));
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let rows = xv.len() / d;
                let inv_d = T::from_f64(1.0 / d as f64);
                let epst = T::from_f64(*eps);
                {
                    let dx = acc(&mut lower[*x], xv.len());
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let mut mu = T::ZERO;
                        for &v in row {
                            mu = mu.add(v);
                        }
                        mu = mu.mul(inv_d);
                        let mut var = T::ZERO;
                        for &v in row {
                            let c = v.sub(mu);
                            var = var.add(c.mul(c));
                        }
                        var = var.mul(inv_d);
                        let inv = T::ONE.div(var.add(epst).sqrt());
                        let gr = &g[r * d..(r + 1) * d];
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let gg = gr[j].mul(gm[j]);
                            let xh = row[j].sub(mu).mul(inv);
                            m1 = m1.add(gg);
                            m2 = m2.add(gg.mul(xh));
                        }
                        m1 = m1.mul(inv_d);
                        m2 = m2.mul(inv_d);
                        for j in 0..d {
                            let gg = gr[j].mul(gm[j]);
                            let xh = row[j].sub(mu).mul(inv);
                            dx[r * d + j] =
                                dx[r * d + j].add(gg.sub(m1).sub(xh.mul(m2)).mul(inv));
                        }
                    }
                }
                {
                    let dgm = acc(&mut lower[*gamma], d);
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let mut mu = T::ZERO;
                        for &v in row {
                            mu = mu.add(v);
                        }
                        mu = mu.mul(inv_d);
                        let mut var = T::ZERO;
                        for &v in row {
                            let c = v.sub(mu);
                            var = var.add(c.mul(c));
                        }
                        var = var.mul(inv_d);
                        let inv = T::ONE.div(var.add(epst).sqrt());
                        for j in 0..d {
                            let xh = row[j].sub(mu).mul(inv);
                            dgm[j] = dgm[j].add(g[r * d + j].mul(xh));
                        }
                    }
                }
                {
                    let dbt = acc(&mut lower[*beta], d);
                    for r in 0..rows {
                        for j in 0..d {
                            dbt[j] = dbt[j].add(g[r * d + j]);
                        }
                    }
                }
            }
            Op::Stack { parts, axis } => {
                let part_shape = &nodes[parts[0]].shape;
                let outer: usize = part_shape[..*axis].iter().product();
                let inner: usize = part_shape[*axis..].iter().product();
                let np = parts.len();
                for (p, &pid) in parts.iter().enumerate() {
                    let dp = acc(&mut lower[pid], nodes[pid].store.len());
                    for o in 0..outer {
                        let src = (o * np + p) * inner;
                        let dst = o * inner;
                        for i in 0..inner {
                            dp[dst + i] = dp[dst + i].add(g[src + i]);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &pid in parts {
                    let e = nodes[pid].shape[*axis];
                    let dp = acc(&mut lower[pid], nodes[pid].store.len());
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * e * inner;
                        for i in 0..e * inner {
                            dp[dst + i] = dp[dst + i].add(g[src + i]);
                        }
                    }
                    offset += e;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let in_shape = &nodes[*x].shape;
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let e = in_shape[*axis];
                let dx = acc(&mut lower[*x], nodes[*x].store.len());
                for o in 0..outer {
                    let dst = (o * e + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        dx[dst + i] = dx[dst + i].add(g[src + i]);
                    }
                }
            }
            Op::Reshape(a) => {
                add_to(acc(&mut lower[*a], nodes[*a].store.len()), g, T::ONE);
            }
            Op::GatherRows { x, idx } => {
                let n = nodes[*x].store.len();
                let row = n / nodes[*x].shape[0];
                let dx = acc(&mut lower[*x], n);
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..row {
                        dx[r * row + j] = dx[r * row + j].add(g[i * row + j]);
                    }
                }
            }
            Op::ReduceSum { x, axis } => {
                let n = nodes[*x].store.len();
                let dx = acc(&mut lower[*x], n);
                match axis {
                    None => {
                        let s = g[0];
                        for v in dx.iter_mut() {
                            *v = v.add(s);
                        }
                    }
                    Some(ax) => {
                        let (outer, len, inner) = lanes(&nodes[*x].shape, *ax);
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    let p = (o * len + j) * inner + i;
                                    dx[p] = dx[p].add(g[o * inner + i]);
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherImage { img, samples } => {
                let d = *node.shape.last().unwrap();
                let dimg = acc(&mut lower[*img], nodes[*img].store.len());
                for (t, s) in samples.iter().enumerate() {
                    for c in 0..s.count as usize {
                        let w = T::from_f64(s.weights[c]);
                        let base = s.rows[c] as usize * d;
                        for j in 0..d {
                            dimg[base + j] = dimg[base + j].add(w.mul(g[t * d + j]));
                        }
                    }
                }
            }
            Op::BoxFilter(a) => {
                let (h, w, c) = (node.shape[0], node.shape[1], node.shape[2]);
                let dx = acc(&mut lower[*a], nodes[*a].store.len());
                let ninth = T::from_f64(1.0 / 9.0);
                for y in 0..h {
                    for x in 0..w {
                        for dy in -1i64..=1 {
                            for dxo in -1i64..=1 {
                                let sy = reflect(y as i64 + dy, h);
                                let sx = reflect(x as i64 + dxo, w);
                                for ch in 0..c {
                                    let dst = (sy * w + sx) * c + ch;
                                    let src = (y * w + x) * c + ch;
                                    dx[dst] = dx[dst].add(g[src].mul(ninth));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grads
}

/// Mirror reflection without edge repetition; length-1 axes map to 0.
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn add_to<T: Scalar>(dst: &mut [T], src: &[T], scale: T) {
    // Scalar-broadcast add: a length-1 source fans out, a length-1
    // destination accumulates the sum.
    if dst.len() == src.len() {
        for i in 0..dst.len() {
            dst[i] = dst[i].add(src[i].mul(scale));
        }
    } else if dst.len() == 1 {
        let mut s = T::ZERO;
        for &v in src {
            s = s.add(v);
        }
        dst[0] = dst[0].add(s.mul(scale));
    } else {
        debug_assert_eq!(src.len(), 1);
        for v in dst.iter_mut() {
            *v = v.add(src[0].mul(scale));
        }
    }
}

fn mul_backward<T: Scalar>(dst: &mut [T], g: &[T], other: &[T]) {
    if dst.len() == g.len() && other.len() == g.len() {
        for i in 0..g.len() {
            dst[i] = dst[i].add(g[i].mul(other[i]));
        }
    } else if dst.len() == 1 {
        // This operand was the broadcast scalar.
        let mut s = T::ZERO;
        for i in 0..g.len() {
            s = s.add(g[i].mul(other[i]));
        }
        dst[0] = dst[0].add(s);
    } else {
        // The other operand was the scalar.
        let o = other[0];
        for i in 0..g.len() {
            dst[i] = dst[i].add(g[i].mul(o));
        }
    }
}

impl Node {
    pub(crate) fn store(&self) -> &Store {
        &self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_plus_reuse_has_exact_gradients() {
        // z = x*y + x at (2, 3): dz/dx = y + 1 = 4, dz/dy = x = 2, exactly.
        let tape = Tape::new();
        let x = tape.var(&Tensor::scalar(2.0));
        let y = tape.var(&Tensor::scalar(3.0));
        let z = x.mul(&y).unwrap().add(&x).unwrap();
        assert_eq!(z.scalar_value().unwrap(), 8.0);
        let g = z.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().scalar_value().unwrap(), 4.0);
        assert_eq!(g.wrt(&y).unwrap().scalar_value().unwrap(), 2.0);
    }

    #[test]
    fn multi_consumer_gradients_sum() {
        // w = relu(x) feeds both u = w*w and v = 3w; d(u+v)/dx = 2x + 3 at x=2 -> 7.
        let tape = Tape::new();
        let x = tape.var(&Tensor::scalar(2.0));
        let w = x.relu().unwrap();
        let u = w.mul(&w).unwrap();
        let v = w.scale(3.0).unwrap();
        let g = u.add(&v).unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().scalar_value().unwrap(), 7.0);
    }

    #[test]
    fn node_ids_strictly_increase() {
        let tape = Tape::new();
        let a = tape.var(&Tensor::scalar(1.0));
        assert_eq!(tape.num_nodes(), 1);
        let b = a.exp().unwrap();
        assert_eq!(tape.num_nodes(), 2);
        let c = b.add(&a).unwrap();
        assert_eq!(tape.num_nodes(), 3);
        let _ = c.log().unwrap();
        assert_eq!(tape.num_nodes(), 4);
    }

    #[test]
    fn detached_tensors_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::scalar(1.5));
        let frozen = x.detach();
        let y = x.mul(&frozen).unwrap();
        let g = y.backward().unwrap();
        // d/dx (x * const) = const: the detached copy acts as a constant...
        assert_eq!(g.wrt(&x).unwrap().scalar_value().unwrap(), 1.5);
        // ...and accumulates nothing itself.
        assert!(g.wrt(&frozen).is_none());
    }

    #[test]
    fn constants_are_lifted_onto_the_consuming_tape() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let k = Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap();
        let before = tape.num_nodes();
        let y = x.mul(&k).unwrap();
        assert_eq!(tape.num_nodes(), before + 2); // lifted leaf + mul node
        let g = y.reduce_sum(None).unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().values(), vec![5.0, 7.0]);
    }

    #[test]
    fn cross_tape_operations_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(&Tensor::scalar(1.0));
        let b = t2.var(&Tensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch { .. })));
    }

    #[test]
    fn backward_requires_scalar_on_tape() {
        let tape = Tape::new();
        let v = tape.var(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(v.backward().is_err());
        assert!(Tensor::scalar(1.0).backward().is_err());
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        // Row 0 picked twice, row 1 once: grads 2 and 1 per element.
        let y = x.gather_rows(&[0, 0, 1]).unwrap();
        let g = y.reduce_sum(None).unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().values(), vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn reduce_mean_gradient_is_uniform() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = x.reduce_mean(None).unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().values(), vec![0.25; 4]);
    }
}
