//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node
//! list propagates gradients. Only the operations the point-cloud networks
//! need are provided.

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Interp { x: Var, idx: Vec<usize>, w: Vec<f64>, per: usize },
    Reshape { x: Var },
    Scalar { x: Var, grad: Vec<f64> },
    WeightedSum { parts: Vec<(Var, f64)> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// `c = op(a)·op(b) + beta·c` with explicit strides on the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient after [`Graph::backward`]; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let g = &self.nodes[v.0].grad;
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// Input whose gradient is tracked.
    pub fn input_with_grad(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} input with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, needs_grad, Op::Leaf))
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Parameter leaf; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let t = store.tensor(id);
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), true, Op::Param(id));
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::ShapeMismatch(format!(
                "matmul {m}x{k} by {bk}x{n}{}",
                if trans_b { " (transposed)" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), bs, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, ng, Op::MatMul { a, b, trans_b }))
    }

    /// Adds a `1×cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} for {r}x{c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(r, c, out, ng, Op::AddRow { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, ng, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::Tanh { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::SoftmaxRows { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::ShapeMismatch("layer norm affine width".into()));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            r,
            c,
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::ShapeMismatch("concat row counts differ".into()));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            r,
            c,
            out,
            ng,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::ShapeMismatch(format!(
                "columns {start}..{} of {c}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(r, len, out, ng, Op::SliceCols { x, start }))
    }

    /// Column-wise max over consecutive blocks of `seg` rows.
    pub fn segment_max(&mut self, x: Var, seg: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if seg == 0 || r % seg != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{r} rows do not split into segments of {seg}"
            )));
        }
        let groups = r / seg;
        let xv = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for gi in 0..groups {
            let o = &mut out[gi * c..(gi + 1) * c];
            let a = &mut argmax[gi * c..(gi + 1) * c];
            for row in gi * seg..(gi + 1) * seg {
                let src = &xv[row * c..(row + 1) * c];
                for j in 0..c {
                    if src[j] > o[j] {
                        o[j] = src[j];
                        a[j] = row;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(groups, c, out, ng, Op::SegmentMax { x, argmax }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange {
                what: "gathered row",
                value: bad,
                limit: r,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(idx.len(), c, out, ng, Op::GatherRows { x, idx }))
    }

    /// Row `i` of the output is `Σ_j w[i·per+j] · x[idx[i·per+j]]`.
    pub fn interp_rows(&mut self, x: Var, idx: Vec<usize>, w: Vec<f64>, per: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if per == 0 || idx.len() != w.len() || idx.len() % per != 0 {
            return Err(Error::ShapeMismatch("interpolation table".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange {
                what: "interpolated row",
                value: bad,
                limit: r,
            });
        }
        let n = idx.len() / per;
        let xv = self.value(x);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for j in i * per..(i + 1) * per {
                let src = &xv[idx[j] * c..(idx[j] + 1) * c];
                for (ov, sv) in o.iter_mut().zip(src) {
                    *ov += w[j] * sv;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(n, c, out, ng, Op::Interp { x, idx, w, per }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "reshape {r}x{c} to {rows}x{cols}"
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(rows, cols, out, ng, Op::Reshape { x }))
    }

    /// Scalar node whose derivative with respect to `x` is supplied by the
    /// caller (used for the analytic loss kernels).
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch("custom gradient length".into()));
        }
        let ng = self.ng(x);
        Ok(self.push(1, 1, vec![value], ng, Op::Scalar { x, grad }))
    }

    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        if parts.iter().any(|&(v, _)| self.shape(v) != (1, 1)) {
            return Err(Error::ShapeMismatch("weighted sum of non-scalars".into()));
        }
        let value = parts.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = parts.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(
            1,
            1,
            vec![value],
            ng,
            Op::WeightedSum {
                parts: parts.to_vec(),
            },
        ))
    }

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let n = &mut self.nodes[v.0];
        let mut g = std::mem::take(&mut n.grad);
        if g.is_empty() {
            g = vec![0.0; n.value.len()];
        }
        g
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = g;
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    pub fn backward(&mut self, root: Var) {
        for n in &mut self.nodes {
            n.grad.clear();
        }
        let len = self.nodes[root.0].value.len();
        self.nodes[root.0].grad = vec![1.0; len];
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            let dy = std::mem::take(&mut self.nodes[i].grad);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &dy);
            self.nodes[i].op = op;
            self.nodes[i].grad = dy;
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, dy: &[f64]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.ng(*a) {
                    let mut ga = self.take_grad(*a);
                    let bs = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, dy, (n, 1), &self.nodes[b.0].value, bs, 1.0, &mut ga);
                    self.put_grad(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = self.take_grad(*b);
                    let av = &self.nodes[a.0].value;
                    if *trans_b {
                        gemm(n, m, k, dy, (1, n), av, (k, 1), 1.0, &mut gb);
                    } else {
                        gemm(k, m, n, av, (1, k), dy, (n, 1), 1.0, &mut gb);
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::AddRow { x, bias } => {
                if self.ng(*x) {
                    let mut gx = self.take_grad(*x);
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d;
                    }
                    self.put_grad(*x, gx);
                }
                if self.ng(*bias) {
                    let mut gb = self.take_grad(*bias);
                    for row in dy.chunks_exact(cols) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    self.put_grad(*bias, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        let mut g = self.take_grad(v);
                        for (gg, d) in g.iter_mut().zip(dy) {
                            *gg += d;
                        }
                        self.put_grad(v, g);
                    }
                }
            }
            Op::Scale { x, s } => {
                let mut g = self.take_grad(*x);
                for (gg, d) in g.iter_mut().zip(dy) {
                    *gg += s * d;
                }
                self.put_grad(*x, g);
            }
            Op::Tanh { x } => {
                let mut g = self.take_grad(*x);
                for ((gg, d), y) in g.iter_mut().zip(dy).zip(&self.nodes[i].value) {
                    *gg += d * (1.0 - y * y);
                }
                self.put_grad(*x, g);
            }
            Op::Relu { x } => {
                let mut g = self.take_grad(*x);
                for ((gg, d), y) in g.iter_mut().zip(dy).zip(&self.nodes[i].value) {
                    if *y > 0.0 {
                        *gg += d;
                    }
                }
                self.put_grad(*x, g);
            }
            Op::SoftmaxRows { x } => {
                let mut g = self.take_grad(*x);
                let y = &self.nodes[i].value;
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        g[r * cols + j] += yr[j] * (dr[j] - dot);
                    }
                }
                self.put_grad(*x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    let mut gg = self.take_grad(*gain);
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += dy[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                    self.put_grad(*gain, gg);
                }
                if self.ng(*bias) {
                    let mut gb = self.take_grad(*bias);
                    for row in dy.chunks_exact(cols) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    self.put_grad(*bias, gb);
                }
                if self.ng(*x) {
                    let mut gx = self.take_grad(*x);
                    let gv = &self.nodes[gain.0].value;
                    let cf = cols as f64;
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let d = &dy[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..cols {
                            let dh = d[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= cf;
                        mean_dh_h /= cf;
                        for j in 0..cols {
                            let dh = d[j] * gv[j];
                            gx[r * cols + j] += inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.ng(p) {
                        let mut g = self.take_grad(p);
                        for r in 0..rows {
                            let src = &dy[r * cols + offset..r * cols + offset + pc];
                            for (gg, d) in g[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *gg += d;
                            }
                        }
                        self.put_grad(p, g);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.shape(*x).1;
                let mut g = self.take_grad(*x);
                for r in 0..rows {
                    let dst = &mut g[r * xc + start..r * xc + start + cols];
                    for (gg, d) in dst.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                        *gg += d;
                    }
                }
                self.put_grad(*x, g);
            }
            Op::SegmentMax { x, argmax } => {
                let mut g = self.take_grad(*x);
                for (o, (&src_row, d)) in argmax.iter().zip(dy).enumerate() {
                    g[src_row * cols + o % cols] += d;
                }
                self.put_grad(*x, g);
            }
            Op::GatherRows { x, idx } => {
                let mut g = self.take_grad(*x);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut g[src * cols..(src + 1) * cols];
                    for (gg, d) in dst.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                        *gg += d;
                    }
                }
                self.put_grad(*x, g);
            }
            Op::Interp { x, idx, w, per } => {
                let mut g = self.take_grad(*x);
                for r in 0..rows {
                    let d = &dy[r * cols..(r + 1) * cols];
                    for j in r * per..(r + 1) * per {
                        let dst = &mut g[idx[j] * cols..(idx[j] + 1) * cols];
                        for (gg, dd) in dst.iter_mut().zip(d) {
                            *gg += w[j] * dd;
                        }
                    }
                }
                self.put_grad(*x, g);
            }
            Op::Reshape { x } => {
                let mut g = self.take_grad(*x);
                for (gg, d) in g.iter_mut().zip(dy) {
                    *gg += d;
                }
                self.put_grad(*x, g);
            }
            Op::Scalar { x, grad } => {
                let mut g = self.take_grad(*x);
                for (gg, d) in g.iter_mut().zip(grad) {
                    *gg += dy[0] * d;
                }
                self.put_grad(*x, g);
            }
            Op::WeightedSum { parts } => {
                for &(v, w) in parts {
                    if self.ng(v) {
                        let mut g = self.take_grad(v);
                        g[0] += w * dy[0];
                        self.put_grad(v, g);
                    }
                }
            }
        }
    }

    /// Parameter gradients as `(id, grad)` pairs, in parameter order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.param_vars.iter().flatten().filter_map(move |v| {
            let n = &self.nodes[v.0];
            match n.op {
                Op::Param(id) => Some((id, n.grad.as_slice())),
                _ => None,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, r: usize, c: usize, v: &[f64]) -> Var {
        g.input_with_grad(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = mat(&mut g, 3, 2, &[1., 0., 0., 1., 1., 1.]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[4., 5., 10., 11.]);
        g.backward(c);
        // dA = 1·Bᵀ, dB = Aᵀ·1
        assert_eq!(g.grad(a).unwrap(), &[1., 1., 2., 1., 1., 2.]);
        assert_eq!(g.grad(b).unwrap(), &[5., 5., 7., 7., 9., 9.]);

        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[1., 2., 3., 4., 5., 6.]);
        let bt = mat(&mut g, 2, 3, &[1., 0., 1., 0., 1., 1.]);
        let c = g.matmul_nt(a, bt).unwrap();
        assert_eq!(g.value(c), &[4., 5., 10., 11.]);
        g.backward(c);
        assert_eq!(g.grad(a).unwrap(), &[1., 1., 2., 1., 1., 2.]);
        assert_eq!(g.grad(bt).unwrap(), &[5., 7., 9., 5., 7., 9.]);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 3, &[1000., 1001., 1002., -5., 0., 5.]);
        let y = g.softmax_rows(x);
        for row in g.value(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let single = mat(&mut g, 1, 1, &[3.0]);
        let s = g.softmax_rows(single);
        assert_eq!(g.value(s), &[1.0]);
    }

    #[test]
    fn segment_max_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = mat(&mut g, 4, 2, &[1., 5., 3., 2., 0., 0., -1., 7.]);
        let m = g.segment_max(x, 2).unwrap();
        assert_eq!(g.value(m), &[3., 5., 0., 7.]);
        g.backward(m);
        assert_eq!(g.grad(x).unwrap(), &[0., 1., 1., 0., 1., 0., 0., 1.]);
        assert!(g.segment_max(x, 3).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.; 6]);
        let b = mat(&mut g, 2, 3, &[0.; 6]);
        assert!(g.matmul(a, b).is_err());
        assert!(g.input(2, 2, vec![0.; 3]).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        assert!(g.gather_rows(a, vec![2]).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(1, 2, vec![1., 2.]).unwrap();
        let b = mat(&mut g, 1, 2, &[3., 4.]);
        let c = g.add(a, b).unwrap();
        g.backward(c);
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap(), &[1., 1.]);
    }
}
