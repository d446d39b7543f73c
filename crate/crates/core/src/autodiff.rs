//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Every backward rule is itself written in terms of tape operations, so a
//! gradient computed with `create_graph = true` is an ordinary tape value and
//! can be differentiated again. That is what lets the outer meta-gradient flow
//! through the inner distillation step.
//!
//! A [`Tape`] is single-owner and lives for one forward/backward computation;
//! parameters are copied onto it as leaves and results are read back out.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    MatMulTN(usize, usize),
    Transpose(usize),
    BroadcastRow(usize),
    SumRows(usize),
    BroadcastCol(usize),
    SumCols(usize),
    BroadcastScalar(usize),
    SumAll(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, f64),
    Relu(usize),
    RecipSafe(usize),
    SqrtSafe(usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    PadCols {
        src: usize,
        start: usize,
    },
    ScatterRows {
        src: usize,
        stride: usize,
        offset: usize,
    },
    GatherRows {
        src: usize,
        stride: usize,
        offset: usize,
    },
    PoolRows {
        src: usize,
        group: usize,
    },
    RepeatRows {
        src: usize,
        group: usize,
    },
    Reshape(usize),
    BlockQKt(usize, usize, usize),
    BlockAV(usize, usize, usize),
    BlockTN(usize, usize, usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatMulNT(a, b) | MatMulTN(a, b) => {
                [Some(a), Some(b)]
            }
            BlockQKt(a, b, _) | BlockAV(a, b, _) | BlockTN(a, b, _) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | BroadcastRow(a)
            | SumRows(a)
            | BroadcastCol(a)
            | SumCols(a)
            | BroadcastScalar(a)
            | SumAll(a)
            | Tanh(a)
            | Exp(a)
            | Ln(a)
            | Powf(a, _)
            | Relu(a)
            | RecipSafe(a)
            | SqrtSafe(a)
            | Reshape(a) => [Some(a), None],
            SliceCols { src, .. }
            | PadCols { src, .. }
            | ScatterRows { src, .. }
            | GatherRows { src, .. }
            | PoolRows { src, .. }
            | RepeatRows { src, .. } => [Some(src), None],
        }
    }
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    tracked: bool,
}

/// Append-only computation graph.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&self, value: Mat) -> Var<'_> {
        let tracked = self.recording.get();
        self.push_raw(value, Op::Leaf, tracked)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Mat::from_elem((1, 1), v))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Mat::zeros((rows, cols)))
    }

    fn push_raw(&self, value: Mat, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let tracked = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.parents().iter().flatten().any(|&p| nodes[p].tracked)
        };
        self.push_raw(value, op, tracked)
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves tracked and
    /// can be differentiated again; otherwise they are detached constants.
    /// Inputs the output does not depend on get an all-zero gradient.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), (1, 1), "grad requires a scalar output");
        let n = output.id + 1;
        let (ops, tracked): (Vec<Op>, Vec<bool>) = {
            let nodes = self.nodes.borrow();
            nodes[..n].iter().map(|nd| (nd.op, nd.tracked)).unzip()
        };
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n && tracked[w.id] {
                relevant[w.id] = true;
            }
        }
        let first = wrt.iter().map(|w| w.id).min().unwrap_or(n);
        for i in first..n {
            if !relevant[i] && tracked[i] {
                relevant[i] = ops[i].parents().iter().flatten().any(|&p| relevant[p]);
            }
        }

        let zeros_like = |v: &Var<'t>| {
            let (r, c) = v.shape();
            self.zeros(r, c)
        };
        if !relevant[output.id] {
            return wrt.iter().map(zeros_like).collect();
        }

        let previous = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        grads[output.id] = Some(self.scalar(1.0));
        for i in (first..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            if matches!(ops[i], Op::Leaf) {
                continue;
            }
            for (p, gp) in self.backward(i, ops[i], g, &relevant) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }
        self.recording.set(previous);

        wrt.iter()
            .map(|w| {
                if w.id < n {
                    grads[w.id].unwrap_or_else(|| zeros_like(w))
                } else {
                    zeros_like(w)
                }
            })
            .collect()
    }

    fn backward<'t>(
        &'t self,
        id: usize,
        op: Op,
        g: Var<'t>,
        relevant: &[bool],
    ) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let v = |i: usize| self.var(i);
        let want = |i: usize| relevant[i];
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'t>| {
            if want(p) {
                out.push((p, f()));
            }
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| -g);
            }
            Mul(a, b) => {
                emit(a, &|| g * v(b));
                emit(b, &|| g * v(a));
            }
            Neg(a) => emit(a, &|| -g),
            Scale(a, k) => emit(a, &|| g.scale(k)),
            AddScalar(a) => emit(a, &|| g),
            MatMul(a, b) => {
                emit(a, &|| g.matmul_nt(v(b)));
                emit(b, &|| v(a).matmul_tn(g));
            }
            MatMulNT(a, b) => {
                emit(a, &|| g.matmul(v(b)));
                emit(b, &|| g.matmul_tn(v(a)));
            }
            MatMulTN(a, b) => {
                emit(a, &|| v(b).matmul_nt(g));
                emit(b, &|| v(a).matmul(g));
            }
            Transpose(a) => emit(a, &|| g.t()),
            BroadcastRow(a) => emit(a, &|| g.sum_rows()),
            SumRows(a) => emit(a, &|| g.broadcast_rows(v(a).rows())),
            BroadcastCol(a) => emit(a, &|| g.sum_cols()),
            SumCols(a) => emit(a, &|| g.broadcast_cols(v(a).cols())),
            BroadcastScalar(a) => emit(a, &|| g.sum_all()),
            SumAll(a) => emit(a, &|| {
                let (r, c) = v(a).shape();
                g.broadcast_scalar(r, c)
            }),
            Tanh(a) => emit(a, &|| {
                let y = v(id);
                g * (-(y * y)).add_scalar(1.0)
            }),
            Exp(a) => emit(a, &|| g * v(id)),
            Ln(a) => emit(a, &|| g * v(a).powf(-1.0)),
            Powf(a, p) => emit(a, &|| g * v(a).powf(p - 1.0).scale(p)),
            Relu(a) => emit(a, &|| {
                let mask = self.value_of(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                g * self.constant(mask)
            }),
            RecipSafe(a) => emit(a, &|| {
                let y = v(id);
                -(g * y * y)
            }),
            SqrtSafe(a) => emit(a, &|| (g * v(id).recip_safe()).scale(0.5)),
            SliceCols { src, start } => emit(src, &|| g.pad_cols(start, v(src).cols())),
            PadCols { src, start } => emit(src, &|| g.slice_cols(start, v(src).cols())),
            ScatterRows {
                src,
                stride,
                offset,
            } => emit(src, &|| g.gather_rows(stride, offset)),
            GatherRows {
                src,
                stride,
                offset,
            } => emit(src, &|| g.scatter_rows(stride, offset, v(src).rows())),
            PoolRows { src, group } => emit(src, &|| g.repeat_rows(group)),
            RepeatRows { src, group } => emit(src, &|| g.pool_rows(group)),
            Reshape(a) => emit(a, &|| {
                let (r, c) = v(a).shape();
                g.reshape(r, c)
            }),
            BlockQKt(q, k, n) => {
                emit(q, &|| g.block_av(v(k), n));
                emit(k, &|| g.block_tn(v(q), n));
            }
            BlockAV(p, val, n) => {
                emit(p, &|| g.block_qkt(v(val), n));
                emit(val, &|| v(p).block_tn(g, n));
            }
            BlockTN(a, b, n) => {
                emit(a, &|| v(b).block_qkt(g, n));
                emit(b, &|| v(a).block_av(g, n));
            }
        }
        out
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    /// Owned copy of the value.
    pub fn to_mat(&self) -> Mat {
        (*self.value()).clone()
    }

    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Constant copy that blocks gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_mat())
    }

    fn unary(self, value: Mat, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn same_shape(self, other: Var<'t>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x * k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x + k);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims");
        self.tape.push(a.dot(&*b), Op::MatMul(self.id, rhs.id))
    }

    /// `self · rhsᵀ`
    pub fn matmul_nt(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dims");
        self.tape.push(a.dot(&b.t()), Op::MatMulNT(self.id, rhs.id))
    }

    /// `selfᵀ · rhs`
    pub fn matmul_tn(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.nrows(), b.nrows(), "matmul_tn: inner dims");
        self.tape
            .push(a.t().dot(&*b), Op::MatMulTN(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    /// Repeats a `1 × c` row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.nrows(), 1, "broadcast_rows expects a single row");
        let v = a.broadcast((rows, a.ncols())).unwrap().to_owned();
        self.unary(v, Op::BroadcastRow(self.id))
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(v, Op::SumRows(self.id))
    }

    /// Repeats an `r × 1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ncols(), 1, "broadcast_cols expects a single column");
        let v = a.broadcast((a.nrows(), cols)).unwrap().to_owned();
        self.unary(v, Op::BroadcastCol(self.id))
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::SumCols(self.id))
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'t> {
        let x = self.item();
        self.unary(
            Mat::from_elem((rows, cols), x),
            Op::BroadcastScalar(self.id),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value().sum();
        self.unary(Mat::from_elem((1, 1), x), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum_all().scale(1.0 / (r * c) as f64)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x.powf(p));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// `1/x`, defined as 0 where `x == 0`.
    pub fn recip_safe(self) -> Var<'t> {
        let v = self.value().mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.unary(v, Op::RecipSafe(self.id))
    }

    /// Square root with derivative 0 where the value is 0.
    pub fn sqrt_safe(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0).sqrt());
        self.unary(v, Op::SqrtSafe(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..start + len]).to_owned();
        self.unary(
            v,
            Op::SliceCols {
                src: self.id,
                start,
            },
        )
    }

    /// Places `self` at column `start` of a zero matrix with `total` columns.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let a = self.value();
        assert!(start + a.ncols() <= total, "pad_cols out of range");
        let mut v = Mat::zeros((a.nrows(), total));
        v.slice_mut(s![.., start..start + a.ncols()]).assign(&*a);
        self.unary(
            v,
            Op::PadCols {
                src: self.id,
                start,
            },
        )
    }

    /// Writes row `i` of `self` to row `i * stride + offset` of a zero matrix
    /// with `total_rows` rows.
    pub fn scatter_rows(self, stride: usize, offset: usize, total_rows: usize) -> Var<'t> {
        let a = self.value();
        assert!(
            offset < stride && a.nrows() * stride == total_rows,
            "scatter_rows layout"
        );
        let mut v = Mat::zeros((total_rows, a.ncols()));
        v.slice_mut(s![offset..;stride, ..]).assign(&*a);
        self.unary(
            v,
            Op::ScatterRows {
                src: self.id,
                stride,
                offset,
            },
        )
    }

    /// Rows `offset, offset + stride, ...`.
    pub fn gather_rows(self, stride: usize, offset: usize) -> Var<'t> {
        let a = self.value();
        assert!(
            offset < stride && a.nrows() % stride == 0,
            "gather_rows layout"
        );
        let v = a.slice(s![offset..;stride, ..]).to_owned();
        self.unary(
            v,
            Op::GatherRows {
                src: self.id,
                stride,
                offset,
            },
        )
    }

    /// Sums each run of `group` consecutive rows.
    pub fn pool_rows(self, group: usize) -> Var<'t> {
        let a = self.value();
        assert!(group > 0 && a.nrows() % group == 0, "pool_rows layout");
        let n = a.nrows() / group;
        let mut v = Mat::zeros((n, a.ncols()));
        for (i, mut row) in v.outer_iter_mut().enumerate() {
            for r in 0..group {
                row += &a.row(i * group + r);
            }
        }
        self.unary(
            v,
            Op::PoolRows {
                src: self.id,
                group,
            },
        )
    }

    /// Repeats every row `group` times in place.
    pub fn repeat_rows(self, group: usize) -> Var<'t> {
        let a = self.value();
        let mut v = Mat::zeros((a.nrows() * group, a.ncols()));
        for (i, row) in a.outer_iter().enumerate() {
            for r in 0..group {
                v.row_mut(i * group + r).assign(&row);
            }
        }
        self.unary(
            v,
            Op::RepeatRows {
                src: self.id,
                group,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), rows * cols, "reshape: element count");
        let flat: Vec<f64> = a.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).unwrap();
        self.unary(v, Op::Reshape(self.id))
    }

    /// Per-block `Q_b K_bᵀ` over blocks of `n` rows: `[B·n × c] → [B·n × n]`.
    pub fn block_qkt(self, k: Var<'t>, n: usize) -> Var<'t> {
        let (q, kv) = (self.value(), k.value());
        assert_eq!(q.dim(), kv.dim(), "block_qkt shapes");
        assert!(n > 0 && q.nrows() % n == 0, "block_qkt layout");
        let mut v = Mat::zeros((q.nrows(), n));
        for b in 0..q.nrows() / n {
            let rows = s![b * n..(b + 1) * n, ..];
            v.slice_mut(rows)
                .assign(&q.slice(rows).dot(&kv.slice(rows).t()));
        }
        self.tape.push(v, Op::BlockQKt(self.id, k.id, n))
    }

    /// Per-block `P_b V_b`: `[B·n × n] · [B·n × c] → [B·n × c]`.
    pub fn block_av(self, val: Var<'t>, n: usize) -> Var<'t> {
        let (p, vv) = (self.value(), val.value());
        assert!(
            p.ncols() == n && p.nrows() == vv.nrows() && p.nrows() % n == 0,
            "block_av shapes"
        );
        let mut v = Mat::zeros((p.nrows(), vv.ncols()));
        for b in 0..p.nrows() / n {
            let rows = s![b * n..(b + 1) * n, ..];
            v.slice_mut(rows)
                .assign(&p.slice(rows).dot(&vv.slice(rows)));
        }
        self.tape.push(v, Op::BlockAV(self.id, val.id, n))
    }

    /// Per-block `A_bᵀ B_b`: `[B·n × n], [B·n × c] → [B·n × c]`.
    pub fn block_tn(self, rhs: Var<'t>, n: usize) -> Var<'t> {
        let (a, bv) = (self.value(), rhs.value());
        assert!(
            a.ncols() == n && a.nrows() == bv.nrows() && a.nrows() % n == 0,
            "block_tn shapes"
        );
        let mut v = Mat::zeros((a.nrows(), bv.ncols()));
        for b in 0..a.nrows() / n {
            let rows = s![b * n..(b + 1) * n, ..];
            v.slice_mut(rows)
                .assign(&a.slice(rows).t().dot(&bv.slice(rows)));
        }
        self.tape.push(v, Op::BlockTN(self.id, rhs.id, n))
    }

    /// Adds a `1 × c` row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self + row.broadcast_rows(self.rows())
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self * row.broadcast_rows(self.rows())
    }

    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self * col.broadcast_cols(self.cols())
    }

    /// Row-wise softmax. The row maximum is subtracted as a constant, which
    /// leaves both value and derivatives unchanged.
    pub fn softmax_rows(self) -> Var<'t> {
        let shifted = self - self.tape.constant(row_max(&self.value()));
        let e = shifted.exp();
        e.mul_col(e.sum_cols().powf(-1.0))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let shifted = self - self.tape.constant(row_max(&self.value()));
        let lse = shifted.exp().sum_cols().ln();
        shifted - lse.broadcast_cols(self.cols())
    }
}

fn row_max(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.dim());
    for (i, row) in m.outer_iter().enumerate() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.row_mut(i).fill(if mx.is_finite() { mx } else { 0.0 });
    }
    out
}

macro_rules! binop {
    ($tr:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> std::ops::$tr for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.same_shape(rhs, stringify!($method));
                let f: fn(f64, f64) -> f64 = $f;
                let mut v = self.to_mat();
                v.zip_mut_with(&*rhs.value(), |a, &b| *a = f(*a, b));
                self.tape.push(v, Op::$op(self.id, rhs.id))
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = self.value().mapv(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at `x0`.
    fn check_grad(x0: &Mat, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = f(x);
        let g = tape.grad(y, &[x], false)[0].to_mat();
        let eps = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |d: f64| {
                let t = Tape::new();
                let mut xp = x0.clone();
                xp[[r, c]] += d;
                f(t.constant(xp)).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (fd - g[[r, c]]).abs() / (1.0 + fd.abs());
            assert!(err < 1e-6, "entry {idx}: fd {fd} vs ad {}", g[[r, c]]);
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = rand_mat(&mut rng, 3, 4);
        check_grad(&x0, |x| (x * x.tanh()).exp().sum_all());
        check_grad(&x0, |x| {
            x.add_scalar(3.0).ln().sum_cols().square().sum_all()
        });
        check_grad(&x0, |x| {
            x.add_scalar(2.0)
                .powf(1.5)
                .sum_rows()
                .broadcast_rows(2)
                .mean_all()
        });
        check_grad(&x0, |x| x.softmax_rows().square().sum_all());
        check_grad(&x0, |x| x.log_softmax_rows().slice_cols(1, 2).sum_all());
        check_grad(&x0, |x| x.add_scalar(3.0).recip_safe().sum_all());
        check_grad(&x0, |x| {
            x.square()
                .sum_cols()
                .sqrt_safe()
                .square()
                .sqrt_safe()
                .sum_all()
        });
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 2);
        let w2 = rand_mat(&mut rng, 5, 4);
        check_grad(&x0, |x| {
            x.matmul(x.tape().constant(w.clone())).tanh().sum_all()
        });
        check_grad(&x0, |x| {
            x.matmul_nt(x.tape().constant(w2.clone()))
                .square()
                .sum_all()
        });
        check_grad(&x0, |x| x.matmul_tn(x).tanh().sum_all());
        check_grad(&x0, |x| x.t().matmul(x).sum_all());
    }

    #[test]
    fn layout_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_mat(&mut rng, 6, 4);
        check_grad(&x0, |x| x.pool_rows(3).repeat_rows(2).tanh().sum_all());
        check_grad(&x0, |x| {
            x.gather_rows(3, 1).scatter_rows(2, 1, 4).square().sum_all()
        });
        check_grad(&x0, |x| x.reshape(3, 8).tanh().pad_cols(1, 10).sum_all());
        check_grad(&x0, |x| x.relu().add_scalar(0.5).square().sum_all());
    }

    #[test]
    fn block_attention_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_mat(&mut rng, 6, 4);
        let k0 = rand_mat(&mut rng, 6, 4);
        check_grad(&x0, |x| {
            let k = x.tape().constant(k0.clone());
            let s = x.block_qkt(k * x, 3).softmax_rows();
            s.block_av(x, 3).tanh().sum_all()
        });
        check_grad(&x0, |x| {
            let a = x.slice_cols(0, 3);
            a.block_tn(x, 3).square().sum_all()
        });
    }

    #[test]
    fn block_ops_match_dense() {
        let q = array![[1.0, 2.0], [0.5, -1.0], [3.0, 1.0], [2.0, 2.0]];
        let tape = Tape::new();
        let qv = tape.constant(q.clone());
        let s = qv.block_qkt(qv, 2).to_mat();
        assert_eq!(s[[0, 1]], 1.0 * 0.5 + 2.0 * -1.0);
        assert_eq!(s[[3, 0]], 2.0 * 3.0 + 2.0 * 1.0);
    }

    #[test]
    fn second_order_matches_analytic() {
        // f(x) = sum(x^3); df/dx = 3x^2; d/dx sum(df/dx * c) = 6x*c
        let x0 = array![[0.5, -1.5]];
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = x.powf(3.0).sum_all();
        let g = tape.grad(y, &[x], true)[0];
        let z = (g * tape.constant(array![[2.0, 3.0]])).sum_all();
        let h = tape.grad(z, &[x], false)[0].to_mat();
        assert!((h[[0, 0]] - 6.0 * 0.5 * 2.0).abs() < 1e-12);
        assert!((h[[0, 1]] - 6.0 * -1.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn untouched_input_has_zero_grad() {
        let tape = Tape::new();
        let a = tape.param(array![[1.0]]);
        let b = tape.param(array![[2.0, 3.0]]);
        let y = a.square().sum_all();
        let g = tape.grad(y, &[a, b], false);
        assert_eq!(g[1].to_mat(), array![[0.0, 0.0]]);
        assert!(!g[0].is_tracked());
    }
}
