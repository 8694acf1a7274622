use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{gemm_nt, gemm_tn};
use super::Tensor2;
use crate::error::{Error, Result};

/// `sqrt(2/π)` in the tanh form of GeLU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GeLU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Rows whose L2 norm is at or below this are mapped to zero by
/// [`Tape::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    #[inline]
    fn index(self) -> usize {
        self.idx as usize
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Tensor2),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows {
        x: usize,
        inv_norm: Vec<f64>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SumAll(usize),
}

struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in creation order. Because every node's
/// inputs precede it, walking the node list backwards is a reverse
/// topological order and visits each node once.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// `None` when the variable does not require a gradient or is not
    /// upstream of the output.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::State(format!(
                "variable {v:?} was not recorded on this tape"
            )));
        }
        Ok(v.index())
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.index()].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Transpose(ia), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !va.same_shape(vb) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    /// `x + 1ᵀ·bias` with `bias` a `1 × x.cols` row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + broadcast {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        let b = vb.data();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(out, Op::AddRow(ix, ib), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v * s);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Scale(ix, s), rg))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Tensor2) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = &self.nodes[ix].value;
        if !vx.same_shape(&c) {
            return Err(Error::dim(
                "mul_const",
                format!("{:?} ⊙ {:?}", vx.shape(), c.shape()),
            ));
        }
        let mut out = vx.clone();
        for (o, &cv) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= cv;
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::MulConst(ix, c), rg))
    }

    /// Tanh-approximated GeLU:
    /// `0.5·x·(1 + tanh(GELU_SQRT_2_OVER_PI·(x + GELU_CUBIC·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(gelu_scalar);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Gelu(ix), rg))
    }

    /// Per-row standardization followed by the affine `gain`, `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let vx = &self.nodes[ix].value;
        let (vg, vb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let n = vx.cols();
        if vg.shape() != (1, n) || vb.shape() != (1, n) {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    vx.shape(),
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let mut xhat = Tensor2::zeros(vx.rows(), n);
        let mut out = Tensor2::zeros(vx.rows(), n);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = softmax_rows_value(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SoftmaxRows(ix), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = &self.nodes[ix].value;
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::LogSoftmaxRows(ix), rg))
    }

    /// Scales each row to unit L2 norm. Rows with norm `<= NORM_EPS` become
    /// zero and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut out = self.nodes[ix].value.clone();
        let mut inv_norm = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if norm <= NORM_EPS {
                log::warn!("normalize_rows: row {r} has near-zero norm {norm:e}; treated as zero");
                0.0
            } else {
                1.0 / norm
            };
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_norm.push(inv);
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::NormalizeRows { x: ix, inv_norm }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = &self.nodes[ix].value;
        if start + len > vx.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, vx.rows()),
            ));
        }
        let c = vx.cols();
        let out = Tensor2::from_vec(len, c, vx.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SliceRows { x: ix, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = &self.nodes[ix].value;
        if start + len > vx.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, vx.cols()),
            ));
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor2::from_vec(vx.rows(), len, data)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SliceCols { x: ix, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let cols = idx.first().map_or(0, |&i| self.nodes[i].value.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("part with {} cols, expected {cols}", v.cols()),
                ));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatRows(idx), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = idx.first().map_or(0, |&i| self.nodes[i].value.rows());
        let mut cols = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("part with {} rows, expected {rows}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum::<f64>();
        let rg = self.rg(ix);
        Ok(self.push(Tensor2::filled(1, 1, s), Op::SumAll(ix), rg))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let shape = self.nodes[il].value.shape();
        if shape != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar output, got {shape:?}; use backward_with"
            )));
        }
        self.backward_with(loss, Tensor2::filled(1, 1, 1.0))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor2) -> Result<Gradients> {
        let io = self.check(out)?;
        if !self.nodes[io].value.same_shape(&seed) {
            return Err(Error::dim(
                "backward_with",
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    self.nodes[io].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[io].requires_grad {
            return Ok(Gradients {
                tape: self.id,
                grads,
            });
        }
        grads[io] = Some(seed);
        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2>], i: usize, g: Tensor2) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor2>], i: usize) -> Option<&'a mut Tensor2> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let (r, c) = self.nodes[i].value.shape();
        Some(grads[i].get_or_insert_with(|| Tensor2::zeros(r, c)))
    }

    fn propagate(&self, i: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_nt(g, vb, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_tn(va, g, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::MulConst(x, c) => {
                let mut d = g.clone();
                for (o, &cv) in d.data_mut().iter_mut().zip(c.data()) {
                    *o *= cv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[*x].value;
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(vx.data()) {
                    *o *= gelu_grad_scalar(xv);
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let vg = &self.nodes[*gain].value;
                let n = g.cols();
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for r in 0..g.rows() {
                        for c in 0..n {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    let mut dx = Tensor2::zeros(g.rows(), n);
                    let nf = n as f64;
                    for r in 0..g.rows() {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let dh = g.get(r, c) * vg.data()[c];
                            sum_d += dh;
                            sum_dx += dh * xhat.get(r, c);
                        }
                        for c in 0..n {
                            let dh = g.get(r, c) * vg.data()[c];
                            let v = inv_std[r] / nf * (nf * dh - sum_d - xhat.get(r, c) * sum_dx);
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let s: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (*o - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o -= y.get(r, c).exp() * s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeRows { x, inv_norm } => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let inv = inv_norm[r];
                    let yr = y.row(r);
                    let s: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (*o - yr[c] * s) * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let c = g.cols();
                    for (o, &v) in gx.data_mut()[start * c..(start + g.rows()) * c]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for r in 0..g.rows() {
                        for (o, &v) in gx.row_mut(r)[*start..start + g.cols()]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (o, &v) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[off * c..(off + rows) * c])
                        {
                            *o += v;
                        }
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                                *o += v;
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::SumAll(x) => {
                let (r, c) = self.nodes[*x].value.shape();
                self.accumulate(grads, *x, Tensor2::filled(r, c, g.get(0, 0)));
            }
        }
    }
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn softmax_rows_value(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
