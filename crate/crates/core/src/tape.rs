//! Reverse-mode differentiation over a linear tape of primitives.
//!
//! Every primitive evaluates eagerly, stores its output on the tape together
//! with whatever context its backward rule needs (sort permutations, segment
//! indices, argmax positions), and checks that the output is finite.
//! `backward` replays the tape from the last node to the first.
//!
//! Non-smooth primitives (PReLU, abs, max, order-statistic lookup) also record
//! how close their inputs sit to a kink. The smallest such distance is
//! exposed through [`Tape::kink_margin`] so gradient checks can reject probe
//! points where central differences are meaningless.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::quantile::segment_index;
use crate::tensor::{Tensor, TensorError};
use crate::wasserstein::{segment_integral, segment_integral_grad};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    AddConst(usize),
    MulConst(usize, f64),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Pow { x: usize, exponent: f64 },
    Sum(usize),
    SumLast(usize),
    Cumsum(usize),
    Slice { x: usize, start: usize },
    Concat(Vec<usize>),
    Reshape(usize),
    Stack(Vec<usize>),
    Conv1d { x: usize, w: usize, b: usize, stride: usize },
    Prelu { x: usize, slope: usize },
    SortGather { x: usize, perm: Vec<usize> },
    InterpQuantile { sorted: usize, levels: usize, segments: Vec<usize> },
    SegmentIntegral { abar: usize, bbar: usize, lo: usize, hi: usize, p: u32 },
    MaxLast { x: usize, argmax: Vec<usize> },
    MatVec { w: usize, x: usize, b: usize },
    SoftmaxXent { logits: usize, label: usize, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    name: &'static str,
    value: Tensor,
    op: Op,
    param: bool,
}

/// A single-owner record of primitive evaluations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes produced by the named primitive.
    pub fn op_count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.name == name).count()
    }

    /// Smallest distance of any non-smooth primitive input to its kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    fn index(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { name: op_name, value, op, param: false });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// Registers a gradient-bearing parameter.
    pub fn param(&mut self, value: Tensor) -> Result<Var, TensorError> {
        let v = self.push("param", value, Op::Leaf)?;
        self.nodes[v.idx].param = true;
        Ok(v)
    }

    /// Registers an input that receives a gradient only when asked for explicitly.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push("constant", value, Op::Leaf)
    }

    pub fn is_param(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes.get(v.idx).is_some_and(|n| n.param)
    }

    /// Parameters in registration order.
    pub fn params(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(idx, _)| Var { tape: self.id, idx })
            .collect()
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        // b broadcasts when its shape is a suffix of a's shape.
        let sa = ta.shape();
        let sb = tb.shape();
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !(suffix || tb.len() == 1) || tb.is_empty() {
            return Err(mismatch(name, format!("{:?} vs {:?}", sa, sb)));
        }
        let lb = tb.len();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = tb.data()[i % lb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        self.push(name, value, Op::Binary { kind, a: ia, b: ib })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn map_unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let t = &self.nodes[ix].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, value, op(ix))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.map_unary(x, "add_const", |v| v + c, Op::AddConst)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.map_unary(x, "mul_const", |v| v * c, |i| Op::MulConst(i, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, "sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, "softplus", softplus, Op::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let margin = self.nodes[ix].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(margin);
        self.map_unary(x, "abs", f64::abs, Op::Abs)
    }

    /// `x^exponent` for non-negative `x`. The derivative at `x = 0` is taken as
    /// zero when `exponent < 1`.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        if self.nodes[ix].value.data().iter().any(|&v| v < 0.0) && exponent.fract() != 0.0 {
            return Err(TensorError::Invalid { op: "pow", detail: "negative base with fractional exponent".into() });
        }
        if exponent < 1.0 {
            let margin = self.nodes[ix].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            self.note_kink(margin);
        }
        self.map_unary(x, "pow", |v| v.powf(exponent), |i| Op::Pow { x: i, exponent })
    }

    // ---- reductions and layout -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let s: f64 = self.nodes[ix].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ix))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let t = &self.nodes[ix].value;
        if t.shape().is_empty() {
            return Err(mismatch("sum_last", "scalar input".into()));
        }
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        self.push("sum_last", value, Op::SumLast(ix))
    }

    /// Running sum of a 1-D tensor.
    pub fn cumsum(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let t = &self.nodes[ix].value;
        if t.shape().len() != 1 {
            return Err(mismatch("cumsum", format!("expected 1-D, got {:?}", t.shape())));
        }
        let mut acc = 0.0;
        let out: Vec<f64> = t
            .data()
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        self.push("cumsum", Tensor::vector(out), Op::Cumsum(ix))
    }

    /// `x[..., start..end]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let t = &self.nodes[ix].value;
        let w = t.last_dim();
        if t.shape().is_empty() || start > end || end > w {
            return Err(mismatch("slice_last", format!("{}..{} of {:?}", start, end, t.shape())));
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, out)?;
        self.push("slice_last", value, Op::Slice { x: ix, start })
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.index(v)).collect::<Result<_, _>>()?;
        let first = &self.nodes[*idx.first().ok_or_else(|| mismatch("concat_last", "no inputs".into()))?].value;
        let lead = first.shape()[..first.shape().len().saturating_sub(1)].to_vec();
        let rows = first.rows();
        let mut width = 0;
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.shape().is_empty() || t.shape()[..t.shape().len() - 1] != lead[..] {
                return Err(mismatch("concat_last", format!("{:?} vs leading {:?}", t.shape(), lead)));
            }
            width += t.last_dim();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &i in &idx {
                out.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        self.push("concat_last", value, Op::Concat(idx))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let value = self.nodes[ix].value.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(ix))
    }

    /// Stacks scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var, TensorError> {
        let idx: Vec<usize> = scalars.iter().map(|&v| self.index(v)).collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.len() != 1 {
                return Err(mismatch("stack", format!("non-scalar input {:?}", t.shape())));
            }
            out.push(t.item());
        }
        self.push("stack", Tensor::vector(out), Op::Stack(idx))
    }

    // ---- network primitives ---------------------------------------------

    /// Valid (unpadded) 1-D convolution.
    ///
    /// `x: [C_in, T]`, `w: [C_out, C_in, W]`, `b: [C_out]`, output
    /// `[C_out, (T - W) / stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        let (ix, iw, ib) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (tx, tw, tb) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if tx.shape().len() != 2 || tw.shape().len() != 3 || tb.shape().len() != 1 {
            return Err(mismatch("conv1d", format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape())));
        }
        let (cin, t) = (tx.shape()[0], tx.shape()[1]);
        let (cout, wcin, width) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wcin != cin || tb.shape()[0] != cout || stride == 0 || width == 0 {
            return Err(mismatch("conv1d", format!("x {:?}, w {:?}, b {:?}, stride {}", tx.shape(), tw.shape(), tb.shape(), stride)));
        }
        if t < width {
            return Err(mismatch("conv1d", format!("input length {} shorter than kernel width {}", t, width)));
        }
        let tout = (t - width) / stride + 1;
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; cout * tout];
        for o in 0..cout {
            let row = &mut out[o * tout..(o + 1) * tout];
            row.fill(bd[o]);
            for c in 0..cin {
                let xrow = &xd[c * t..(c + 1) * t];
                for k in 0..width {
                    let wv = wd[(o * cin + c) * width + k];
                    if stride == 1 {
                        for (y, xv) in row.iter_mut().zip(&xrow[k..k + tout]) {
                            *y += wv * xv;
                        }
                    } else {
                        for (j, y) in row.iter_mut().enumerate() {
                            *y += wv * xrow[j * stride + k];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, tout], out)?;
        self.push("conv1d", value, Op::Conv1d { x: ix, w: iw, b: ib, stride })
    }

    /// Parametric rectifier with one slope per row (channel).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var, TensorError> {
        let (ix, is) = (self.index(x)?, self.index(slope)?);
        let (tx, ts) = (&self.nodes[ix].value, &self.nodes[is].value);
        if ts.shape().len() != 1 || ts.len() != tx.rows() || tx.shape().is_empty() {
            return Err(mismatch("prelu", format!("x {:?}, slope {:?}", tx.shape(), ts.shape())));
        }
        let w = tx.last_dim();
        let mut margin = f64::INFINITY;
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                margin = margin.min(v.abs());
                if v >= 0.0 {
                    v
                } else {
                    ts.data()[i / w] * v
                }
            })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.note_kink(margin);
        self.push("prelu", value, Op::Prelu { x: ix, slope: is })
    }

    /// Sorts every row (last axis) ascending; ties keep their original order.
    /// The permutation is kept for the backward scatter.
    ///
    /// A swap of two adjacent values only matters to consumers that read
    /// those positions, so the kink margin is recorded by the consumer
    /// ([`Tape::interp_quantile`]), not here.
    pub fn sort_gather(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let t = &self.nodes[ix].value;
        if t.shape().is_empty() || t.last_dim() == 0 {
            return Err(mismatch("sort_gather", format!("cannot sort rows of {:?}", t.shape())));
        }
        let w = t.last_dim();
        let mut perm = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mut order: Vec<usize> = (0..w).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            for &j in &order {
                out.push(row[j]);
                perm.push(r * w + j);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("sort_gather", value, Op::SortGather { x: ix, perm })
    }

    /// Piecewise-linear interpolation of the empirical quantile function of
    /// each sorted row, evaluated at the given levels in `[0, 1]`.
    ///
    /// `sorted: [K, N]`, `levels: [L]`, output `[K, L]`.
    pub fn interp_quantile(&mut self, sorted: Var, levels: Var) -> Result<Var, TensorError> {
        let (is, il) = (self.index(sorted)?, self.index(levels)?);
        let (ts, tl) = (&self.nodes[is].value, &self.nodes[il].value);
        if ts.shape().len() != 2 || tl.shape().len() != 1 || ts.shape()[1] == 0 {
            return Err(mismatch("interp_quantile", format!("sorted {:?}, levels {:?}", ts.shape(), tl.shape())));
        }
        let (k, n) = (ts.shape()[0], ts.shape()[1]);
        let nf = n as f64;
        let mut segments = Vec::with_capacity(tl.len());
        let mut margin = f64::INFINITY;
        for &r in tl.data() {
            if !(0.0..=1.0).contains(&r) {
                return Err(TensorError::Invalid { op: "interp_quantile", detail: format!("level {} outside [0, 1]", r) });
            }
            segments.push(segment_index(r, n));
            if n > 1 {
                // interior grid points j/N, 1 <= j < N
                let j = (r * nf).round().clamp(1.0, nf - 1.0);
                margin = margin.min((r - j / nf).abs());
            }
        }
        let mut out = Vec::with_capacity(k * tl.len());
        for row in 0..k {
            let xs = ts.row(row);
            for (&r, &seg) in tl.data().iter().zip(&segments) {
                out.push(interp_segment(xs, seg, r));
                // the order statistics read here change identity when they
                // tie with a neighbour
                for i in [seg - 1, seg.min(n - 1)] {
                    if i > 0 {
                        margin = margin.min(xs[i] - xs[i - 1]);
                    }
                    if i + 1 < n {
                        margin = margin.min(xs[i + 1] - xs[i]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![k, tl.len()], out)?;
        self.note_kink(margin);
        self.push("interp_quantile", value, Op::InterpQuantile { sorted: is, levels: il, segments })
    }

    /// Elementwise `∫_lo^hi |abar·r + bbar|^p dr`.
    ///
    /// `abar`, `bbar`: `[K, S]`; `lo`, `hi`: `[S]` broadcast over rows.
    pub fn segment_integral(&mut self, abar: Var, bbar: Var, lo: Var, hi: Var, p: u32) -> Result<Var, TensorError> {
        let (ia, ib, il, ih) = (self.index(abar)?, self.index(bbar)?, self.index(lo)?, self.index(hi)?);
        let (ta, tb, tl, th) = (&self.nodes[ia].value, &self.nodes[ib].value, &self.nodes[il].value, &self.nodes[ih].value);
        if ta.shape() != tb.shape() || tl.shape() != th.shape() || tl.shape().len() != 1 || ta.last_dim() != tl.len() || p == 0 {
            return Err(mismatch(
                "segment_integral",
                format!("abar {:?}, bbar {:?}, lo {:?}, hi {:?}, p {}", ta.shape(), tb.shape(), tl.shape(), th.shape(), p),
            ));
        }
        let s = tl.len();
        let out: Vec<f64> = (0..ta.len())
            .map(|i| segment_integral(ta.data()[i], tb.data()[i], tl.data()[i % s], th.data()[i % s], p))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("segment_integral", value, Op::SegmentIntegral { abar: ia, bbar: ib, lo: il, hi: ih, p })
    }

    /// Row-wise maximum over the last axis; the first maximum wins ties.
    pub fn max_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.index(x)?;
        let t = &self.nodes[ix].value;
        if t.shape().is_empty() || t.last_dim() == 0 {
            return Err(mismatch("max_last", format!("cannot reduce {:?}", t.shape())));
        }
        let mut argmax = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.rows());
        let mut margin = f64::INFINITY;
        for r in 0..t.rows() {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != best)
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            margin = margin.min(row[best] - runner_up);
            argmax.push(best);
            out.push(row[best]);
        }
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        self.note_kink(margin);
        self.push("max_last", value, Op::MaxLast { x: ix, argmax })
    }

    /// Dense layer `w · x + b` with `w: [C, F]`, `x: [F]`, `b: [C]`.
    pub fn matvec(&mut self, w: Var, x: Var, b: Var) -> Result<Var, TensorError> {
        let (iw, ix, ib) = (self.index(w)?, self.index(x)?, self.index(b)?);
        let (tw, tx, tb) = (&self.nodes[iw].value, &self.nodes[ix].value, &self.nodes[ib].value);
        if tw.shape().len() != 2 || tx.shape().len() != 1 || tw.shape()[1] != tx.len() || tb.shape() != [tw.shape()[0]] {
            return Err(mismatch("matvec", format!("w {:?}, x {:?}, b {:?}", tw.shape(), tx.shape(), tb.shape())));
        }
        let out: Vec<f64> = (0..tw.shape()[0])
            .map(|c| tb.data()[c] + tw.row(c).iter().zip(tx.data()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push("matvec", Tensor::vector(out), Op::MatVec { w: iw, x: ix, b: ib })
    }

    /// `-ln softmax(logits)[label]`, evaluated with the log-sum-exp shift.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let il = self.index(logits)?;
        let t = &self.nodes[il].value;
        if t.shape().len() != 1 || label >= t.len() {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                detail: format!("label {} for logits {:?}", label, t.shape()),
            });
        }
        let probs = softmax(t.data());
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        self.push("softmax_cross_entropy", Tensor::scalar(loss), Op::SoftmaxXent { logits: il, label, probs })
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of a scalar loss with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let il = self.index(loss)?;
        let t = &self.nodes[il].value;
        if t.len() != 1 {
            return Err(TensorError::NotScalar(t.shape().to_vec()));
        }
        self.backward_with(&[(loss, Tensor::filled(t.shape(), 1.0))])
    }

    /// Backward pass seeded with explicit upstream gradients for several outputs.
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, TensorError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            let i = self.index(*v)?;
            if g.len() != self.nodes[i].value.len() {
                return Err(mismatch("backward", format!("seed {:?} for value {:?}", g.shape(), self.nodes[i].value.shape())));
            }
            accumulate(&mut grads, i, g.data().iter().copied());
            top = top.max(i + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(Gradients { tape: self.id, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let lb = bv.len();
                let mut gb = vec![0.0; lb];
                let ga: Vec<f64> = match kind {
                    BinaryKind::Add => {
                        for (j, gj) in g.iter().enumerate() {
                            gb[j % lb] += gj;
                        }
                        g.to_vec()
                    }
                    BinaryKind::Sub => {
                        for (j, gj) in g.iter().enumerate() {
                            gb[j % lb] -= gj;
                        }
                        g.to_vec()
                    }
                    BinaryKind::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| {
                            gb[j % lb] += gj * av[j];
                            gj * bv[j % lb]
                        })
                        .collect(),
                    BinaryKind::Div => g
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| {
                            let d = bv[j % lb];
                            gb[j % lb] -= gj * av[j] / (d * d);
                            gj / d
                        })
                        .collect(),
                };
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddConst(x) | Op::Reshape(x) => accumulate(grads, *x, g.iter().copied()),
            Op::MulConst(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c)),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(gj, s)| gj * s * (1.0 - s)));
            }
            Op::Softplus(x) => {
                accumulate(grads, *x, g.iter().zip(val(*x)).map(|(gj, &v)| gj * sigmoid(v)));
            }
            Op::Abs(x) => {
                accumulate(grads, *x, g.iter().zip(val(*x)).map(|(gj, &v)| if v >= 0.0 { *gj } else { -gj }));
            }
            Op::Pow { x, exponent } => {
                let e = *exponent;
                accumulate(
                    grads,
                    *x,
                    g.iter().zip(val(*x)).map(|(gj, &v)| {
                        if v == 0.0 && e < 1.0 {
                            0.0
                        } else {
                            gj * e * v.powf(e - 1.0)
                        }
                    }),
                );
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                accumulate(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::SumLast(x) => {
                let w = self.nodes[*x].value.last_dim();
                accumulate(grads, *x, g.iter().flat_map(|&gj| std::iter::repeat_n(gj, w)));
            }
            Op::Cumsum(x) => {
                let mut acc = 0.0;
                let mut out = vec![0.0; g.len()];
                for j in (0..g.len()).rev() {
                    acc += g[j];
                    out[j] = acc;
                }
                accumulate(grads, *x, out);
            }
            Op::Slice { x, start } => {
                let src = &self.nodes[*x].value;
                let w = src.last_dim();
                let sw = node.value.last_dim();
                let mut out = vec![0.0; src.len()];
                for r in 0..src.rows() {
                    out[r * w + start..r * w + start + sw].copy_from_slice(&g[r * sw..(r + 1) * sw]);
                }
                accumulate(grads, *x, out);
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pw = self.nodes[p].value.last_dim();
                    let mut out = Vec::with_capacity(rows * pw);
                    for r in 0..rows {
                        out.extend_from_slice(&g[r * width + offset..r * width + offset + pw]);
                    }
                    accumulate(grads, p, out);
                    offset += pw;
                }
            }
            Op::Stack(parts) => {
                for (&p, &gj) in parts.iter().zip(g) {
                    accumulate(grads, p, std::iter::once(gj));
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (cin, t) = (tx.shape()[0], tx.shape()[1]);
                let (cout, width) = (tw.shape()[0], tw.shape()[2]);
                let tout = node.value.shape()[1];
                let (xd, wd) = (tx.data(), tw.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; cout];
                for o in 0..cout {
                    let grow = &g[o * tout..(o + 1) * tout];
                    gb[o] = grow.iter().sum();
                    for c in 0..cin {
                        let xrow = &xd[c * t..(c + 1) * t];
                        let gxrow = &mut gx[c * t..(c + 1) * t];
                        for k in 0..width {
                            let wi = (o * cin + c) * width + k;
                            let wv = wd[wi];
                            let mut acc = 0.0;
                            if *stride == 1 {
                                for ((gj, xv), gxv) in grow.iter().zip(&xrow[k..k + tout]).zip(&mut gxrow[k..k + tout]) {
                                    acc += gj * xv;
                                    *gxv += gj * wv;
                                }
                            } else {
                                for (j, gj) in grow.iter().enumerate() {
                                    let pos = j * stride + k;
                                    acc += gj * xrow[pos];
                                    gxrow[pos] += gj * wv;
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::Prelu { x, slope } => {
                let (xv, sv) = (val(*x), val(*slope));
                let w = self.nodes[*x].value.last_dim();
                let mut gs = vec![0.0; sv.len()];
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .enumerate()
                    .map(|(j, (gj, &v))| {
                        if v >= 0.0 {
                            *gj
                        } else {
                            gs[j / w] += gj * v;
                            gj * sv[j / w]
                        }
                    })
                    .collect();
                accumulate(grads, *x, gx);
                accumulate(grads, *slope, gs);
            }
            Op::SortGather { x, perm } => {
                let mut out = vec![0.0; g.len()];
                for (gj, &p) in g.iter().zip(perm) {
                    out[p] += gj;
                }
                accumulate(grads, *x, out);
            }
            Op::InterpQuantile { sorted, levels, segments } => {
                let ts = &self.nodes[*sorted].value;
                let lv = val(*levels);
                let (k, n) = (ts.shape()[0], ts.shape()[1]);
                let nf = n as f64;
                let l = lv.len();
                let mut gs = vec![0.0; ts.len()];
                let mut gl = vec![0.0; l];
                for row in 0..k {
                    let xs = ts.row(row);
                    for (j, (&r, &seg)) in lv.iter().zip(segments).enumerate() {
                        let gj = g[row * l + j];
                        let lo = seg - 1;
                        let hi = seg.min(n - 1);
                        let segf = seg as f64;
                        gs[row * n + lo] += gj * (segf - nf * r);
                        gs[row * n + hi] += gj * (nf * r + 1.0 - segf);
                        gl[j] += gj * nf * (xs[hi] - xs[lo]);
                    }
                }
                accumulate(grads, *sorted, gs);
                accumulate(grads, *levels, gl);
            }
            Op::SegmentIntegral { abar, bbar, lo, hi, p } => {
                let (av, bv, lv, hv) = (val(*abar), val(*bbar), val(*lo), val(*hi));
                let s = lv.len();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; av.len()];
                let mut gl = vec![0.0; s];
                let mut gh = vec![0.0; s];
                for (j, gj) in g.iter().enumerate() {
                    let d = segment_integral_grad(av[j], bv[j], lv[j % s], hv[j % s], *p);
                    ga[j] = gj * d.d_abar;
                    gb[j] = gj * d.d_bbar;
                    gl[j % s] += gj * d.d_lo;
                    gh[j % s] += gj * d.d_hi;
                }
                accumulate(grads, *abar, ga);
                accumulate(grads, *bbar, gb);
                accumulate(grads, *lo, gl);
                accumulate(grads, *hi, gh);
            }
            Op::MaxLast { x, argmax } => {
                let w = self.nodes[*x].value.last_dim();
                let mut out = vec![0.0; self.nodes[*x].value.len()];
                for (r, (&a, gj)) in argmax.iter().zip(g).enumerate() {
                    out[r * w + a] += gj;
                }
                accumulate(grads, *x, out);
            }
            Op::MatVec { w, x, b } => {
                let (tw, xv) = (&self.nodes[*w].value, val(*x));
                let f = xv.len();
                let mut gw = vec![0.0; tw.len()];
                let mut gx = vec![0.0; f];
                for (c, gc) in g.iter().enumerate() {
                    let wrow = tw.row(c);
                    for j in 0..f {
                        gw[c * f + j] += gc * xv[j];
                        gx[j] += gc * wrow[j];
                    }
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *x, gx);
                accumulate(grads, *b, g.iter().copied());
            }
            Op::SoftmaxXent { logits, label, probs } => {
                let out = probs.iter().enumerate().map(|(j, &pj)| g[0] * (pj - if j == *label { 1.0 } else { 0.0 }));
                accumulate(grads, *logits, out);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: impl IntoIterator<Item = f64>) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.into_iter().collect()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "binary",
        Op::AddConst(_) => "add_const",
        Op::MulConst(..) => "mul_const",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softplus(_) => "softplus",
        Op::Abs(_) => "abs",
        Op::Pow { .. } => "pow",
        Op::Sum(_) => "sum",
        Op::SumLast(_) => "sum_last",
        Op::Cumsum(_) => "cumsum",
        Op::Slice { .. } => "slice_last",
        Op::Concat(_) => "concat_last",
        Op::Reshape(_) => "reshape",
        Op::Stack(_) => "stack",
        Op::Conv1d { .. } => "conv1d",
        Op::Prelu { .. } => "prelu",
        Op::SortGather { .. } => "sort_gather",
        Op::InterpQuantile { .. } => "interp_quantile",
        Op::SegmentIntegral { .. } => "segment_integral",
        Op::MaxLast { .. } => "max_last",
        Op::MatVec { .. } => "matvec",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
    }
}

/// Evaluates one segment of the interpolated quantile function; `seg` is the
/// 1-based segment index for level `r`.
pub(crate) fn interp_segment(sorted: &[f64], seg: usize, r: f64) -> f64 {
    let n = sorted.len();
    let lo = sorted[seg - 1];
    let hi = sorted[seg.min(n - 1)];
    let segf = seg as f64;
    n as f64 * (hi - lo) * r + segf * lo + (1.0 - segf) * hi
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor, TensorError> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(TensorError::Detached);
        }
        let shape = self.shapes[v.idx].clone();
        match &self.grads[v.idx] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn prelu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 1, vec![-2.0]).unwrap()).unwrap();
        let s = tape.param(Tensor::vector(vec![0.25])).unwrap();
        let y = tape.prelu(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5]);
    }

    #[test]
    fn prelu_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        let s = tape.param(Tensor::vector(vec![0.25])).unwrap();
        let y = tape.prelu(x, s).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0]);
        assert_eq!(g.wrt(s).unwrap().data(), &[0.0]);
        assert_eq!(tape.kink_margin(), 0.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn sort_gather_values_and_permutation() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 3, vec![3.0, 1.0, 2.0]).unwrap()).unwrap();
        let y = tape.sort_gather(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        // 1-based π = (2, 3, 1)
        match &tape.nodes[y.idx].op {
            Op::SortGather { perm, .. } => assert_eq!(perm, &vec![1, 2, 0]),
            _ => unreachable!(),
        }
        let first = tape.slice_last(y, 0, 1).unwrap();
        let l = tape.sum(first).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 4, vec![2.0, 1.0, 2.0, 1.0]).unwrap()).unwrap();
        let y = tape.sort_gather(x).unwrap();
        match &tape.nodes[y.idx].op {
            Op::SortGather { perm, .. } => assert_eq!(perm, &vec![1, 3, 0, 2]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap()).unwrap();
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap().wrt(x).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn foreign_variable_is_detached() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(b.sum(x), Err(TensorError::Detached)));
        let y = b.param(Tensor::scalar(1.0)).unwrap();
        let l = b.sum(y).unwrap();
        let g = b.backward(l).unwrap();
        assert!(matches!(g.wrt(x), Err(TensorError::Detached)));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0)).unwrap();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(tape.div(x, z), Err(TensorError::NonFinite { op: "div" })));
    }

    #[test]
    fn broadcast_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let y = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.add(x, y), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv1d_identity_and_stride() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
        let w = tape.param(Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let b = tape.param(Tensor::vector(vec![0.5])).unwrap();
        let y = tape.conv1d(x, w, b, 2).unwrap();
        // positions 0 and 2: x0 - x1, x2 - x3
        assert_eq!(tape.value(y).data(), &[-0.5, -0.5]);
        let too_short = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!(tape.conv1d(too_short, w, b, 1).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-15));
        assert!(close(softplus(800.0), 800.0, 1e-12));
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-40.0) < 1e-17);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let l = tape.softmax_cross_entropy(z, 1).unwrap();
        let g = tape.backward(l).unwrap().wrt(z).unwrap();
        let p = softmax(&[0.3, -1.2, 2.0]);
        assert!(close(tape.value(l).item(), -p[1].ln(), 1e-12));
        for (j, (gj, pj)) in g.data().iter().zip(&p).enumerate() {
            let expected = pj - if j == 1 { 1.0 } else { 0.0 };
            assert!(close(*gj, expected, 1e-12));
        }
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![1.0, 5.0, 2.0, 4.0, 4.0, 1.0]).unwrap()).unwrap();
        let m = tape.max_last(x).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 4.0]);
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap().wrt(x).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let unused = tape.param(Tensor::vector(vec![3.0])).unwrap();
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0]);
        assert_eq!(tape.params(), vec![x, unused]);
    }
}
