//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every primitive pushes one node holding its forward value and whatever the
//! backward pass needs. `backward` walks the tape in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers.

use super::conv::conv1d_backward;
use super::norm::{norm_backward, NormSaved};
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Real, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Scale(Var, Real),
    SumScalars(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    BroadcastTime(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Mask {
        x: Var,
        mask: Vec<Real>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
        pad_left: usize,
    },
    Norm(Box<NormSaved>),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    WeightedAbsDiff {
        a: Var,
        b: Var,
        weights: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Scale(..) => "scale",
            Op::SumScalars(_) => "sum",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels(_) => "concat_channels",
            Op::BroadcastTime(_) => "broadcast_time",
            Op::Gather { .. } => "gather",
            Op::Mask { .. } => "mask",
            Op::Conv1d { .. } => "conv1d",
            Op::Norm(_) => "norm",
            Op::Bmm { .. } => "bmm",
            Op::Softmax { .. } => "softmax_columns",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::WeightedAbsDiff { .. } => "weighted_abs_diff",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter node reached from the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    /// Adds all parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            let p = store.get_mut(id);
            if p.requires_grad {
                p.accumulate(g)?;
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward {}", op.name())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *y;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(Error::Shape(format!("sum_scalars: {:?}", v.shape())));
            }
            total += v.item();
        }
        let rg = self.any_grad(xs);
        self.push(Tensor::scalar(total), Op::SumScalars(xs.to_vec()), rg)
    }

    /// Channels `start..start + len` of a batch × channel × time tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, n) = self.value(x).dims3()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_channels {start}..{} of {c}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[b, len, n]);
        for bi in 0..b {
            let from = &src[(bi * c + start) * n..(bi * c + start + len) * n];
            out.data_mut()[bi * len * n..(bi + 1) * len * n].copy_from_slice(from);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SliceChannels { x, start }, rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (b, _, n) = self.value(xs[0]).dims3()?;
        let mut total = 0;
        for &x in xs {
            let (xb, xc, xn) = self.value(x).dims3()?;
            if xb != b || xn != n {
                return Err(Error::Shape("concat_channels: batch/time mismatch".into()));
            }
            total += xc;
        }
        let mut out = Tensor::zeros(&[b, total, n]);
        for bi in 0..b {
            let mut off = 0;
            for &x in xs {
                let v = self.value(x);
                let xc = v.shape()[1];
                let dst = (bi * total + off) * n;
                out.data_mut()[dst..dst + xc * n].copy_from_slice(v.batch_item(bi));
                off += xc;
            }
        }
        let rg = self.any_grad(xs);
        self.push(out, Op::ConcatChannels(xs.to_vec()), rg)
    }

    /// Repeats a batch × channel matrix along a new time axis of length `n`.
    pub fn broadcast_time(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        let (b, c) = match v.shape() {
            &[b, c] => (b, c),
            s => return Err(Error::Shape(format!("broadcast_time expects 2-d, got {s:?}"))),
        };
        let mut out = Tensor::zeros(&[b, c, n]);
        for (row, &val) in v.data().iter().enumerate() {
            out.data_mut()[row * n..(row + 1) * n].fill(val);
        }
        let _ = (b, c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::BroadcastTime(x), rg)
    }

    /// Rows of a `K × e` table selected per batch item.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (k, e) = match t.shape() {
            &[k, e] => (k, e),
            s => return Err(Error::Shape(format!("gather_rows expects 2-d, got {s:?}"))),
        };
        let mut out = Tensor::zeros(&[rows.len(), e]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= k {
                return Err(Error::UnknownSpeaker(format!("row {r} of {k}")));
            }
            out.data_mut()[i * e..(i + 1) * e].copy_from_slice(&t.data()[r * e..(r + 1) * e]);
        }
        let rg = self.any_grad(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mask(&mut self, x: Var, mask: Vec<Real>) -> Result<Var> {
        let v = self.value(x);
        if v.len() != mask.len() {
            return Err(Error::Shape("mask length".into()));
        }
        let mut out = v.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= *m;
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mask { x, mask }, rg)
    }

    /// Zeroes time steps at or beyond each batch item's valid length.
    pub fn mask_time(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let (b, c, n) = self.value(x).dims3()?;
        if lens.len() != b {
            return Err(Error::Shape(format!("{} lengths for batch {b}", lens.len())));
        }
        if lens.iter().all(|&l| l >= n) {
            return Ok(x);
        }
        let mut mask = vec![0.0; b * c * n];
        for (bi, &l) in lens.iter().enumerate() {
            for ch in 0..c {
                let row = (bi * c + ch) * n;
                mask[row..row + l.min(n)].fill(1.0);
            }
        }
        self.mask(x, mask)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, p: Real, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep as f64 {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.mask(x, mask)
    }

    /// Σ w ⊙ x over all entries.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs weights {:?}",
                v.shape(),
                weights.shape()
            )));
        }
        let s: Real = v.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg)
    }

    /// Σ w ⊙ |a − b| over all entries.
    pub fn weighted_abs_diff(&mut self, a: Var, b: Var, weights: Tensor) -> Result<Var> {
        self.same_shape(a, b, "weighted_abs_diff")?;
        if self.value(a).shape() != weights.shape() {
            return Err(Error::Shape("weighted_abs_diff: weight shape".into()));
        }
        let s: Real = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .zip(weights.data())
            .map(|((x, y), w)| w * (x - y).abs())
            .sum();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(s), Op::WeightedAbsDiff { a, b, weights }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "backward {}",
                    self.nodes[i].op.name()
                )));
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.grad_buf(grads, v) {
                        buf.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) if a == b => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    let va = self.nodes[a.0].value.data();
                    for ((d, gv), x) in buf.data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += 2.0 * gv * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let mut da = self.take_buf(grads, *a);
                let mut dbuf = self.take_buf(grads, *b);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = da.as_mut() {
                    for ((d, gv), y) in buf.data_mut().iter_mut().zip(g.data()).zip(vb) {
                        *d += gv * y;
                    }
                }
                if let Some(buf) = dbuf.as_mut() {
                    for ((d, gv), x) in buf.data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += gv * x;
                    }
                }
                put_buf(grads, *a, da);
                put_buf(grads, *b, dbuf);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((d, gv), s) in buf.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (d, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                }
            }
            Op::SumScalars(xs) => {
                for &x in xs {
                    if let Some(buf) = self.grad_buf(grads, x) {
                        buf.data_mut()[0] += g.item();
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let (b, c, n) = self.value(*x).dims3()?;
                let len = node.value.shape()[1];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for bi in 0..b {
                        let dst = (bi * c + start) * n;
                        let src = bi * len * n;
                        for (d, s) in buf.data_mut()[dst..dst + len * n]
                            .iter_mut()
                            .zip(&g.data()[src..src + len * n])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatChannels(xs) => {
                let (b, total, n) = node.value.dims3()?;
                let mut off = 0;
                for &x in xs {
                    let xc = self.value(x).shape()[1];
                    if let Some(buf) = self.grad_buf(grads, x) {
                        for bi in 0..b {
                            let src = (bi * total + off) * n;
                            for (d, s) in buf
                                .batch_item_mut(bi)
                                .iter_mut()
                                .zip(&g.data()[src..src + xc * n])
                            {
                                *d += s;
                            }
                        }
                    }
                    off += xc;
                }
            }
            Op::BroadcastTime(x) => {
                let n = node.value.shape()[2];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (row, d) in buf.data_mut().iter_mut().enumerate() {
                        *d += g.data()[row * n..(row + 1) * n].iter().sum::<Real>();
                    }
                }
            }
            Op::Gather { table, rows } => {
                let e = node.value.shape()[1];
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..e {
                            buf.data_mut()[r * e + j] += g.data()[i * e + j];
                        }
                    }
                }
            }
            Op::Mask { x, mask } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((d, gv), m) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
                pad_left,
            } => {
                let mut dx = self.take_buf(grads, *x);
                let mut dw = self.take_buf(grads, *w);
                let mut db = bias.and_then(|b| self.take_buf(grads, b));
                conv1d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *dilation,
                    *pad_left,
                    dx.as_mut(),
                    dw.as_mut(),
                    db.as_mut(),
                );
                put_buf(grads, *x, dx);
                put_buf(grads, *w, dw);
                if let Some(b) = bias {
                    put_buf(grads, *b, db);
                }
            }
            Op::Norm(saved) => {
                let mut dx = self.take_buf(grads, saved.x);
                let mut dgamma = self.take_buf(grads, saved.gamma);
                let mut dbeta = self.take_buf(grads, saved.beta);
                norm_backward(
                    saved,
                    self.value(saved.gamma),
                    g,
                    dx.as_mut(),
                    dgamma.as_mut(),
                    dbeta.as_mut(),
                );
                put_buf(grads, saved.x, dx);
                put_buf(grads, saved.gamma, dgamma);
                put_buf(grads, saved.beta, dbeta);
            }
            Op::Bmm { a, b, ta, tb } if a == b => {
                let mut da = self.take_buf(grads, *a);
                if let Some(buf) = da.as_mut() {
                    super::attention::bmm_backward_a(self.value(*b), g, *ta, *tb, buf);
                    super::attention::bmm_backward_b(self.value(*a), g, *ta, *tb, buf);
                }
                put_buf(grads, *a, da);
            }
            Op::Bmm { a, b, ta, tb } => {
                let mut da = self.take_buf(grads, *a);
                let mut dbuf = self.take_buf(grads, *b);
                if let Some(buf) = da.as_mut() {
                    super::attention::bmm_backward_a(self.value(*b), g, *ta, *tb, buf);
                }
                if let Some(buf) = dbuf.as_mut() {
                    super::attention::bmm_backward_b(self.value(*a), g, *ta, *tb, buf);
                }
                put_buf(grads, *a, da);
                put_buf(grads, *b, dbuf);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                if let Some(buf) = self.grad_buf(grads, *x) {
                    super::attention::softmax_backward(y, g, buf);
                }
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (d, w) in buf.data_mut().iter_mut().zip(weights.data()) {
                        *d += s * w;
                    }
                }
            }
            Op::WeightedAbsDiff { a, b, weights } => {
                let s = g.item();
                let sign: Vec<Real> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .zip(weights.data())
                    .map(|((x, y), w)| {
                        let d = x - y;
                        if d > 0.0 {
                            s * w
                        } else if d < 0.0 {
                            -s * w
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (d, v) in buf.data_mut().iter_mut().zip(&sign) {
                        *d += v;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for (d, v) in buf.data_mut().iter_mut().zip(&sign) {
                        *d -= v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Moves a node's gradient buffer out of the table so several buffers can
    /// be borrowed mutably at once. Pair with [`put_buf`].
    fn take_buf(&self, grads: &mut [Option<Tensor>], v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())),
        )
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }
}

fn put_buf(grads: &mut [Option<Tensor>], v: Var, buf: Option<Tensor>) {
    if buf.is_some() {
        grads[v.0] = buf;
    }
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
