//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every backward rule of the generic ops is itself written with graph ops,
//! so gradients are ordinary [`Var`]s and can be differentiated again. The
//! critic's gradient-norm penalty relies on that. Fused kernels (Chamfer,
//! entropy likelihood, significance scores) are first-order only: their
//! backward returns constants computed from the incoming gradient's value.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

pub trait Op {
    fn name(&self) -> &'static str;
    /// Gradients w.r.t. each input given the gradient of the output.
    fn backward<'g>(&self, g: &'g Graph, inputs: &[Var<'g>], out: Var<'g>, grad: Var<'g>) -> Vec<Option<Var<'g>>>;
}

struct Node {
    value: Rc<Tensor>,
    op: Option<Rc<dyn Op>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Option<Rc<dyn Op>>, inputs: &[Var<'_>], leaf_grad: bool) -> Var<'_> {
        let requires_grad = leaf_grad || (op.is_some() && inputs.iter().any(|v| v.requires_grad()));
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            // ops feeding only constants never need a backward
            op: if requires_grad { op } else { None },
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
        });
        Var { id, graph: self }
    }

    fn push_rc(&self, value: Rc<Tensor>, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad: leaf_grad,
        });
        Var { id, graph: self }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, None, &[], false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor>) -> Var<'_> {
        self.push_rc(t, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, None, &[], true)
    }

    pub fn leaf_rc(&self, t: Rc<Tensor>) -> Var<'_> {
        self.push_rc(t, true)
    }

    pub fn apply(&self, value: Tensor, op: impl Op + 'static, inputs: &[Var<'_>]) -> Var<'_> {
        self.push(value, Some(Rc::new(op)), inputs, false)
    }

    /// Gradients of the scalar `y` w.r.t. each of `xs`. The returned vars are
    /// part of this graph and may be differentiated again.
    pub fn grad<'g>(&'g self, y: Var<'g>, xs: &[Var<'g>]) -> Vec<Var<'g>> {
        assert_eq!(y.shape(), (1, 1), "grad() needs a scalar output");
        let mut grads: Vec<Option<Var<'g>>> = vec![None; y.id + 1];
        let mut wanted = vec![false; y.id + 1];
        for x in xs {
            if x.id <= y.id {
                wanted[x.id] = true;
            }
        }
        let lowest = xs.iter().map(|x| x.id).min().unwrap_or(0);
        let mut results: Vec<Option<Var<'g>>> = vec![None; y.id + 1];
        grads[y.id] = Some(self.scalar(1.0));
        for id in (lowest..=y.id).rev() {
            let Some(gv) = grads[id].take() else { continue };
            if wanted[id] {
                results[id] = Some(gv);
            }
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                match &node.op {
                    Some(op) if node.requires_grad => (op.clone(), node.inputs.clone()),
                    _ => continue,
                }
            };
            let in_vars: Vec<Var<'g>> = inputs.iter().map(|&i| Var { id: i, graph: self }).collect();
            let out = Var { id, graph: self };
            let contribs = op.backward(self, &in_vars, out, gv);
            debug_assert_eq!(contribs.len(), in_vars.len(), "{} backward arity", op.name());
            for (input, contrib) in in_vars.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(c.shape(), input.shape(), "{} gradient shape", op.name());
                grads[input.id] = Some(match grads[input.id] {
                    Some(prev) => prev.add(c),
                    None => c,
                });
            }
        }
        xs.iter()
            .map(|x| {
                results
                    .get(x.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| {
                        let (r, c) = x.shape();
                        self.constant(Tensor::zeros(r, c))
                    })
            })
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn detach(self) -> Var<'g> {
        self.graph.constant_rc(self.value())
    }

    fn unary(self, value: Tensor, op: impl Op + 'static) -> Var<'g> {
        self.graph.apply(value, op, &[self])
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: impl Op + 'static) -> Var<'g> {
        self.graph.apply(value, op, &[self, other])
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&o.value(), |a, b| a + b);
        self.binary(o, v, AddOp)
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&o.value(), |a, b| a - b);
        self.binary(o, v, SubOp)
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&o.value(), |a, b| a * b);
        self.binary(o, v, MulOp)
    }

    pub fn div(self, o: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&o.value(), |a, b| a / b);
        self.binary(o, v, DivOp)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Var<'g> {
        self.affine(-1.0, 0.0)
    }

    /// `s * x + t`
    pub fn affine(self, s: f64, t: f64) -> Var<'g> {
        let v = self.value().map(|x| s * x + t);
        self.unary(v, AffineOp(s))
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let x = self.value();
        let mask = Rc::new(x.map(|v| if v > 0.0 { 1.0 } else { slope }));
        let v = x.zip_map(&mask, |a, m| a * m);
        self.unary(v, MaskOp(mask))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let x = self.value();
        let mask = Rc::new(x.map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 }));
        let v = x.map(|v| v.clamp(lo, hi));
        self.unary(v, MaskOp(mask))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, TanhOp)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, SigmoidOp)
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, ExpOp)
    }

    pub fn ln(self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.unary(v, LnOp)
    }

    pub fn softplus(self) -> Var<'g> {
        let v = self.value().map(softplus);
        self.unary(v, SoftplusOp)
    }

    pub fn sqrt(self) -> Var<'g> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, SqrtOp)
    }

    pub fn matmul(self, o: Var<'g>) -> Var<'g> {
        self.matmul_t(o, false, false)
    }

    pub fn matmul_t(self, o: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let v = self.value().matmul(&o.value(), ta, tb);
        self.binary(o, v, MatMulOp { ta, tb })
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(self, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let bv = b.value();
        assert_eq!(bv.shape(), (1, x.cols()), "add_row bias shape");
        let mut out = (*x).clone();
        for r in out.data_mut().chunks_exact_mut(x.cols()) {
            for (o, b) in r.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.binary(b, out, AddRowOp)
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        let (r, c) = self.shape();
        self.unary(v, SumAllOp { rows: r, cols: c })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums, `1 x c`.
    pub fn sum_rows(self) -> Var<'g> {
        let x = self.value();
        let mut out = Tensor::zeros(1, x.cols());
        for r in x.data().chunks_exact(x.cols()) {
            for (o, v) in out.data_mut().iter_mut().zip(r) {
                *o += v;
            }
        }
        self.unary(out, SumRowsOp { rows: x.rows() })
    }

    pub fn mean_rows(self) -> Var<'g> {
        let n = self.rows() as f64;
        self.sum_rows().scale(1.0 / n)
    }

    /// Row sums, `r x 1`.
    pub fn sum_cols(self) -> Var<'g> {
        let x = self.value();
        let data = x.data().chunks_exact(x.cols().max(1)).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_vec(x.rows(), 1, data);
        self.unary(out, SumColsOp { cols: x.cols() })
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'g> {
        let v = Tensor::full(rows, cols, self.item());
        self.unary(v, BroadcastScalarOp)
    }

    /// `1 x c` -> `rows x c`.
    pub fn broadcast_rows(self, rows: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rows(), 1);
        let mut data = Vec::with_capacity(rows * x.cols());
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        self.unary(Tensor::from_vec(rows, x.cols(), data), BroadcastRowsOp)
    }

    /// `r x 1` -> `r x cols`.
    pub fn broadcast_cols(self, cols: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.cols(), 1);
        let mut data = Vec::with_capacity(x.rows() * cols);
        for &v in x.data() {
            data.extend(std::iter::repeat(v).take(cols));
        }
        self.unary(Tensor::from_vec(x.rows(), cols, data), BroadcastColsOp)
    }

    /// Flat element gather: `out[i] = self.flat[idx[i]]`, shaped `rows x cols`.
    pub fn gather_elems(self, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var<'g> {
        let x = self.value();
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        let src = x.shape();
        self.unary(Tensor::from_vec(rows, cols, data), GatherElemsOp { idx, src })
    }

    /// Adjoint of [`Var::gather_elems`]: scatters into a zero `rows x cols` tensor.
    pub fn scatter_add_elems(self, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var<'g> {
        let x = self.value();
        let mut out = Tensor::zeros(rows, cols);
        for (&i, &v) in idx.iter().zip(x.data()) {
            out.data_mut()[i] += v;
        }
        let src = x.shape();
        self.unary(out, ScatterElemsOp { idx, src })
    }

    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        let n = x.rows();
        self.unary(Tensor::from_vec(idx.len(), c, data), GatherRowsOp { idx, src_rows: n })
    }

    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, rows: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut out = Tensor::zeros(rows, c);
        for (k, &i) in idx.iter().enumerate() {
            let src = x.row(k);
            for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
        self.unary(out, ScatterRowsOp { idx })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in x.data().chunks_exact(c) {
            data.extend_from_slice(&r[start..start + len]);
        }
        self.unary(Tensor::from_vec(x.rows(), len, data), SliceColsOp { start, total: c })
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut out = Tensor::zeros(x.rows(), total);
        for (r, src) in x.data().chunks_exact(c.max(1)).enumerate() {
            out.data_mut()[r * total + start..r * total + start + c].copy_from_slice(src);
        }
        self.unary(out, PadColsOp { start, len: c })
    }

    /// Sums consecutive groups of `k` rows: `(n*k) x c` -> `n x c`.
    pub fn segment_sum(self, k: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(x.rows() % k, 0);
        let n = x.rows() / k;
        let mut out = Tensor::zeros(n, c);
        for (r, src) in x.data().chunks_exact(c).enumerate() {
            let dst = &mut out.data_mut()[(r / k) * c..(r / k + 1) * c];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        self.unary(out, SegmentSumOp { k })
    }

    /// Repeats each row `k` times consecutively.
    pub fn repeat_rows(self, k: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len() * k);
        for src in x.data().chunks_exact(c.max(1)) {
            for _ in 0..k {
                data.extend_from_slice(src);
            }
        }
        self.unary(Tensor::from_vec(x.rows() * k, c, data), RepeatRowsOp { k })
    }

    /// Softmax over each group of `k` consecutive rows, per column.
    pub fn segment_softmax(self, k: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(x.rows() % k, 0);
        let mut out = (*x).clone();
        let data = out.data_mut();
        for seg in data.chunks_exact_mut(k * c) {
            for col in 0..c {
                let mut m = f64::NEG_INFINITY;
                for r in 0..k {
                    m = m.max(seg[r * c + col]);
                }
                let mut s = 0.0;
                for r in 0..k {
                    let e = (seg[r * c + col] - m).exp();
                    seg[r * c + col] = e;
                    s += e;
                }
                for r in 0..k {
                    seg[r * c + col] /= s;
                }
            }
        }
        self.unary(out, SegmentSoftmaxOp { k })
    }

    /// Max over each group of `k` consecutive index entries, per column:
    /// `out[i, c] = max_j self[nbr[i*k + j], c]`. Ties go to the first entry.
    pub fn gather_max(self, nbr: &[usize], k: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(nbr.len() % k, 0);
        let m = nbr.len() / k;
        let mut idx = Vec::with_capacity(m * c);
        for i in 0..m {
            let group = &nbr[i * k..(i + 1) * k];
            for col in 0..c {
                let mut best = group[0];
                let mut bv = x.data()[best * c + col];
                for &j in &group[1..] {
                    let v = x.data()[j * c + col];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                idx.push(best * c + col);
            }
        }
        self.gather_elems(Rc::new(idx), m, c)
    }

    /// Column-wise max over all rows, `1 x c`.
    pub fn max_rows(self) -> Var<'g> {
        let n = self.rows();
        let nbr: Vec<usize> = (0..n).collect();
        self.gather_max(&nbr, n)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g> {
        let x = self.value();
        let (r0, c0) = x.shape();
        assert_eq!(r0 * c0, rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, x.data().to_vec());
        self.unary(out, ReshapeOp { rows: r0, cols: c0 })
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let g = parts[0].graph;
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        g.apply(out, ConcatColsOp { widths }, parts)
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let g = parts[0].graph;
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            heights.push(v.rows());
        }
        let rows = heights.iter().sum();
        g.apply(Tensor::from_vec(rows, cols, data), ConcatRowsOp { heights }, parts)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g), Some(g)]
    }
}

struct SubOp;
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g), Some(g.neg())]
    }
}

struct MulOp;
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![
            x[0].requires_grad().then(|| g.mul(x[1])),
            x[1].requires_grad().then(|| g.mul(x[0])),
        ]
    }
}

struct DivOp;
impl Op for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], out: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        let ga = g.div(x[1]);
        let gb = x[1].requires_grad().then(|| ga.mul(out).neg());
        vec![Some(ga), gb]
    }
}

struct AffineOp(f64);
impl Op for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.scale(self.0))]
    }
}

struct MaskOp(Rc<Tensor>);
impl Op for MaskOp {
    fn name(&self) -> &'static str {
        "mask"
    }
    fn backward<'g>(&self, gr: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.mul(gr.constant_rc(self.0.clone())))]
    }
}

struct TanhOp;
impl Op for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], out: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.mul(out.square().affine(-1.0, 1.0)))]
    }
}

struct SigmoidOp;
impl Op for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], out: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.mul(out.mul(out.affine(-1.0, 1.0))))]
    }
}

struct ExpOp;
impl Op for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], out: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.mul(out))]
    }
}

struct LnOp;
impl Op for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.div(x[0]))]
    }
}

struct SoftplusOp;
impl Op for SoftplusOp {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.mul(x[0].sigmoid()))]
    }
}

struct SqrtOp;
impl Op for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], out: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.div(out.scale(2.0)))]
    }
}

struct MatMulOp {
    ta: bool,
    tb: bool,
}
impl Op for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        let (a, b) = (x[0], x[1]);
        let (ta, tb) = (self.ta, self.tb);
        let ga = a.requires_grad().then(|| {
            if ta {
                b.matmul_t(g, tb, true)
            } else {
                g.matmul_t(b, false, !tb)
            }
        });
        let gb = b.requires_grad().then(|| {
            if tb {
                g.matmul_t(a, true, ta)
            } else {
                a.matmul_t(g, !ta, false)
            }
        });
        vec![ga, gb]
    }
}

struct AddRowOp;
impl Op for AddRowOp {
    fn name(&self) -> &'static str {
        "add_row"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g), x[1].requires_grad().then(|| g.sum_rows())]
    }
}

struct SumAllOp {
    rows: usize,
    cols: usize,
}
impl Op for SumAllOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.broadcast_scalar(self.rows, self.cols))]
    }
}

struct BroadcastScalarOp;
impl Op for BroadcastScalarOp {
    fn name(&self) -> &'static str {
        "broadcast_scalar"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.sum())]
    }
}

struct SumRowsOp {
    rows: usize,
}
impl Op for SumRowsOp {
    fn name(&self) -> &'static str {
        "sum_rows"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.broadcast_rows(self.rows))]
    }
}

struct BroadcastRowsOp;
impl Op for BroadcastRowsOp {
    fn name(&self) -> &'static str {
        "broadcast_rows"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.sum_rows())]
    }
}

struct SumColsOp {
    cols: usize,
}
impl Op for SumColsOp {
    fn name(&self) -> &'static str {
        "sum_cols"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.broadcast_cols(self.cols))]
    }
}

struct BroadcastColsOp;
impl Op for BroadcastColsOp {
    fn name(&self) -> &'static str {
        "broadcast_cols"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.sum_cols())]
    }
}

struct GatherElemsOp {
    idx: Rc<Vec<usize>>,
    src: (usize, usize),
}
impl Op for GatherElemsOp {
    fn name(&self) -> &'static str {
        "gather_elems"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.scatter_add_elems(self.idx.clone(), self.src.0, self.src.1))]
    }
}

struct ScatterElemsOp {
    idx: Rc<Vec<usize>>,
    src: (usize, usize),
}
impl Op for ScatterElemsOp {
    fn name(&self) -> &'static str {
        "scatter_add_elems"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.gather_elems(self.idx.clone(), self.src.0, self.src.1))]
    }
}

struct GatherRowsOp {
    idx: Rc<Vec<usize>>,
    src_rows: usize,
}
impl Op for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.scatter_add_rows(self.idx.clone(), self.src_rows))]
    }
}

struct ScatterRowsOp {
    idx: Rc<Vec<usize>>,
}
impl Op for ScatterRowsOp {
    fn name(&self) -> &'static str {
        "scatter_add_rows"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.gather_rows(self.idx.clone()))]
    }
}

struct SliceColsOp {
    start: usize,
    total: usize,
}
impl Op for SliceColsOp {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.pad_cols(self.start, self.total))]
    }
}

struct PadColsOp {
    start: usize,
    len: usize,
}
impl Op for PadColsOp {
    fn name(&self) -> &'static str {
        "pad_cols"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.slice_cols(self.start, self.len))]
    }
}

struct SegmentSumOp {
    k: usize,
}
impl Op for SegmentSumOp {
    fn name(&self) -> &'static str {
        "segment_sum"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.repeat_rows(self.k))]
    }
}

struct RepeatRowsOp {
    k: usize,
}
impl Op for RepeatRowsOp {
    fn name(&self) -> &'static str {
        "repeat_rows"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.segment_sum(self.k))]
    }
}

struct SegmentSoftmaxOp {
    k: usize,
}
impl Op for SegmentSoftmaxOp {
    fn name(&self) -> &'static str {
        "segment_softmax"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], out: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        let inner = out.mul(g).segment_sum(self.k).repeat_rows(self.k);
        vec![Some(out.mul(g.sub(inner)))]
    }
}

struct ReshapeOp {
    rows: usize,
    cols: usize,
}
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward<'g>(&self, _: &'g Graph, _: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        vec![Some(g.reshape(self.rows, self.cols))]
    }
}

struct ConcatColsOp {
    widths: Vec<usize>,
}
impl Op for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        let mut off = 0;
        self.widths
            .iter()
            .zip(x)
            .map(|(&w, v)| {
                let s = off;
                off += w;
                v.requires_grad().then(|| g.slice_cols(s, w))
            })
            .collect()
    }
}

struct ConcatRowsOp {
    heights: Vec<usize>,
}
impl Op for ConcatRowsOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn backward<'g>(&self, _: &'g Graph, x: &[Var<'g>], _: Var<'g>, g: Var<'g>) -> Vec<Option<Var<'g>>> {
        let mut off = 0;
        self.heights
            .iter()
            .zip(x)
            .map(|(&h, v)| {
                let s = off;
                off += h;
                v.requires_grad().then(|| g.gather_rows(Rc::new((s..s + h).collect())))
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks `grad` of `f` at `x0` against central differences.
    pub fn check_grad(x0: &Tensor, build: impl for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>) {
        let f = |t: Tensor| -> f64 {
            let g = Graph::new();
            let x = g.constant(t);
            build(&g, x).item()
        };
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&g, x);
        let gx = g.grad(y, &[x])[0].value();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(xp) - f(xm)) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: fd={fd} analytic={an}");
        }
    }

    macro_rules! grad_case {
        ($name:ident, $r:expr, $c:expr, |$g:ident, $x:ident| $body:expr) => {
            #[test]
            fn $name() {
                let mut rng = ChaCha8Rng::seed_from_u64(stringify!($name).len() as u64);
                let x0 = rand_tensor(&mut rng, $r, $c);
                #[allow(unused_variables)]
                fn build<'g>($g: &'g Graph, $x: Var<'g>) -> Var<'g> {
                    $body
                }
                check_grad(&x0, build);
            }
        };
    }

    grad_case!(grad_tanh_sigmoid, 4, 3, |g, x| x.tanh().mul(x.sigmoid()).sum());
    grad_case!(grad_exp_softplus_sqrt, 3, 3, |g, x| x.exp().add(x.softplus()).sqrt().sum());
    grad_case!(grad_div_ln, 3, 2, |g, x| x.exp().ln().div(x.square().affine(1.0, 1.0)).sum());
    grad_case!(grad_matmul_variants, 3, 3, |g, x| {
        let a = g.constant(Tensor::from_vec(3, 3, vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.7, 0.2, 0.2, 0.9]));
        x.matmul(a).add(x.matmul_t(a, true, false)).add(a.matmul_t(x, false, true)).add(x.matmul_t(x, true, true)).square().sum()
    });
    grad_case!(grad_rows_and_cols, 4, 3, |g, x| {
        let b = x.slice_cols(1, 1).sum_rows().broadcast_cols(3);
        x.add_row(b).mean_rows().broadcast_rows(2).square().sum().add(x.sum_cols().square().sum())
    });
    grad_case!(grad_gather_scatter, 5, 2, |g, x| {
        let idx = Rc::new(vec![4, 0, 0, 2]);
        let r = x.gather_rows(idx.clone()).square();
        let s = r.scatter_add_rows(idx, 6).tanh();
        let e = x.gather_elems(Rc::new(vec![9, 1, 1]), 3, 1).square();
        s.sum().add(e.scatter_add_elems(Rc::new(vec![0, 3, 2]), 2, 2).sum())
    });
    grad_case!(grad_segments_softmax, 6, 2, |g, x| {
        let w = x.segment_softmax(3);
        w.mul(x).segment_sum(3).repeat_rows(2).square().sum()
    });
    grad_case!(grad_max_concat_pad, 5, 3, |g, x| {
        let m = x.max_rows();
        let nb = [0usize, 1, 2, 2, 3, 4];
        let gm = x.gather_max(&nb, 3);
        let cat = Var::concat_cols(&[x, x.tanh()]);
        let rows = Var::concat_rows(&[cat, cat.scale(0.5)]);
        m.sum().add(gm.square().sum()).add(rows.square().sum()).add(x.slice_cols(0, 2).pad_cols(1, 4).reshape(10, 2).tanh().sum())
    });
    grad_case!(grad_masks, 4, 4, |g, x| x.affine(1.0, 0.05).leaky_relu(0.2).add(x.clamp(-0.5, 0.5)).square().sum());

    #[test]
    fn second_order_gradient_norm() {
        // f(W) = || d/dx sum(tanh(x W)) ||^2 ; check d f / dW by finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = rand_tensor(&mut rng, 5, 3);
        let w0 = rand_tensor(&mut rng, 3, 4);
        let f = |w: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let g = Graph::new();
            let x = g.leaf(x0.clone());
            let w = g.leaf(w.clone());
            let y = x.matmul(w).leaky_relu(0.1).tanh().max_rows().sum();
            let gx = g.grad(y, &[x])[0];
            let pen = gx.square().sum().sqrt().affine(1.0, -0.3).square();
            let gw = want_grad.then(|| (*g.grad(pen, &[w])[0].value()).clone());
            (pen.item(), gw)
        };
        let (_, gw) = f(&w0, true);
        let gw = gw.unwrap();
        let h = 1e-6;
        for i in 0..w0.len() {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let mut wm = w0.clone();
            wm.data_mut()[i] -= h;
            let fd = (f(&wp, false).0 - f(&wm, false).0) / (2.0 * h);
            assert!((fd - gw.data()[i]).abs() < 1e-5 * (1.0 + fd.abs()), "w[{i}] fd={fd} an={}", gw.data()[i]);
        }
    }

    #[test]
    fn constants_get_no_backward() {
        let g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let y = c.square();
        assert!(!y.requires_grad());
        let x = g.leaf(Tensor::scalar(3.0));
        let z = y.mul(x);
        let gr = g.grad(z, &[x, c]);
        assert_eq!(gr[0].item(), 4.0);
        assert_eq!(gr[1].item(), 0.0);
    }
}
