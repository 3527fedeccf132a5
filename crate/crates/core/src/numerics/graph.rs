//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every recorded node.
//!
//! ```
//! use fbs_core::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
//! let x = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
//! let y = g.matmul(w, x).unwrap();
//! let grads = g.backward(y);
//! assert_eq!(g.value(y).item(), 11.0);
//! assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
//! ```

use super::kernels::{self, gelu, gelu_grad, sigmoid};
use super::tensor::Tensor;
use crate::error::{FbsError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Ln(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        stats: Vec<(f64, f64)>,
    },
    Gather { x: Var, idx: Vec<usize> },
    Scatter { base: Var, rows: Var, idx: Vec<usize> },
    Softmax { x: Var, block: usize },
    LogSoftmax { x: Var, block: usize },
    TopKExpect {
        p: Var,
        table: Var,
        picked: Vec<(Vec<(usize, f64)>, f64)>,
    },
    HorizonConv { x: Var, kernel: Var, horizons: usize },
    BlockSum { x: Var, blocks: usize },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<Vec<f64>>,
    },
    MemoryAttention {
        q: Var,
        mem: Var,
        windows: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
    },
    SegmentMean { x: Var, segments: Vec<Vec<usize>> },
    Sum(Var),
    RowSum(Var),
    Pick { x: Var, picks: Vec<(usize, usize, f64)> },
    StopGrad,
    Precomputed { x: Var, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> FbsError {
    FbsError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Support chosen per row by a top-K expectation node.
    pub fn topk_support(&self, v: Var) -> Option<Vec<Vec<usize>>> {
        match &self.nodes[v.0].op {
            Op::TopKExpect { picked, .. } => Some(
                picked
                    .iter()
                    .map(|(sel, _)| sel.iter().map(|&(j, _)| j).collect())
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let bs = self.value(b).shape();
        if bs.len() != 2 {
            return Err(shape_err("matmul", self.shape(a), bs));
        }
        let (kb, n) = if trans_b { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if k != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut c,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        Ok(va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let out = va.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "div", |x, y| x / y)?;
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Broadcast-add a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(va[i * n..(i + 1) * n].iter().zip(vb).map(|(x, y)| x + y));
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// Broadcast-multiply every row of `a` by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(shape_err("mul_row", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(va[i * n..(i + 1) * n].iter().zip(vb).map(|(x, y)| x * y));
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MulRow(a, b), rg))
    }

    /// Scale row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(c).len() != m {
            return Err(shape_err("mul_col", self.shape(a), self.shape(c)));
        }
        let (va, vc) = (self.value(a).data(), self.value(c).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(va[i * n..(i + 1) * n].iter().map(|x| x * vc[i]));
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(t, Op::MulCol(a, c), rg))
    }

    /// Divide row `i` of `a` by `c[i]`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(c).len() != m {
            return Err(shape_err("div_col", self.shape(a), self.shape(c)));
        }
        let (va, vc) = (self.value(a).data(), self.value(c).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(va[i * n..(i + 1) * n].iter().map(|x| x / vc[i]));
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(t, Op::DivCol(a, c), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(g).len() != n || self.value(b).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(g)));
        }
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        {
            let (vx, vg, vb) = (self.value(x).data(), self.value(g).data(), self.value(b).data());
            for i in 0..m {
                stats.push(kernels::layer_norm_row(
                    &vx[i * n..(i + 1) * n],
                    vg,
                    vb,
                    &mut out[i * n..(i + 1) * n],
                ));
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(g) || self.rg(b);
        Ok(self.push(t, Op::LayerNorm { x, g, b, stats }, rg))
    }

    /// Rows of `x` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(FbsError::invalid(format!("row {bad} out of range for {m} rows")));
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&vx[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_parts(vec![idx.len(), n], out);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `base` with rows `idx` replaced by the rows of `rows` (distinct indices).
    pub fn scatter_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(base).dims2();
        let (r, rn) = self.value(rows).dims2();
        if rn != n || r != idx.len() || idx.iter().any(|&i| i >= m) {
            return Err(shape_err("scatter_rows", self.shape(base), self.shape(rows)));
        }
        let mut out = self.value(base).data().to_vec();
        let vr = self.value(rows).data();
        for (j, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&vr[j * n..(j + 1) * n]);
        }
        let t = Tensor::from_parts(self.shape(base).to_vec(), out);
        let rg = self.rg(base) || self.rg(rows);
        Ok(self.push(
            t,
            Op::Scatter {
                base,
                rows,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over consecutive blocks of `block` columns (block = row width
    /// gives an ordinary row softmax).
    pub fn softmax_blocks(&mut self, x: Var, block: usize) -> Result<Var> {
        let mut out = self.value(x).data().to_vec();
        if block == 0 || !out.len().is_multiple_of(block) || !self.value(x).dims2().1.is_multiple_of(block) {
            return Err(FbsError::Shape(format!("softmax block {block} on {:?}", self.shape(x))));
        }
        for chunk in out.chunks_mut(block) {
            kernels::softmax_inplace(chunk);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, block }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).dims2().1;
        self.softmax_blocks(x, n)
    }

    pub fn log_softmax_blocks(&mut self, x: Var, block: usize) -> Result<Var> {
        let mut out = self.value(x).data().to_vec();
        if block == 0 || !self.value(x).dims2().1.is_multiple_of(block) {
            return Err(FbsError::Shape(format!("log_softmax block {block} on {:?}", self.shape(x))));
        }
        for chunk in out.chunks_mut(block) {
            kernels::log_softmax_inplace(chunk);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, block }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).dims2().1;
        self.log_softmax_blocks(x, n)
    }

    /// Row-wise expectation of `table` rows under `p` truncated to its top-`k`
    /// support and renormalized. `p` is `n×V`, `table` is `V×d`.
    pub fn topk_expect(&mut self, p: Var, table: Var, k: usize) -> Result<Var> {
        self.topk_expect_pinned(p, table, k, None)
    }

    /// As [`Graph::topk_expect`], but with the support of each row optionally
    /// fixed in advance (used to hold discrete choices still under
    /// finite differencing).
    pub fn topk_expect_pinned(
        &mut self,
        p: Var,
        table: Var,
        k: usize,
        support: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let (n, v) = self.value(p).dims2();
        if support.is_some_and(|s| s.len() != n || s.iter().flatten().any(|&j| j >= v)) {
            return Err(FbsError::invalid("topk_expect: pinned support does not match rows"));
        }
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ts[0] != v || k == 0 {
            return Err(shape_err("topk_expect", self.shape(p), &ts));
        }
        let d = ts[1];
        let mut out = vec![0.0; n * d];
        let mut picked = Vec::with_capacity(n);
        {
            let (vp, vt) = (self.value(p).data(), self.value(table).data());
            for i in 0..n {
                let row = &vp[i * v..(i + 1) * v];
                let o = &mut out[i * d..(i + 1) * d];
                picked.push(match support {
                    Some(s) => kernels::expect_over(row, vt, d, &s[i], o),
                    None => kernels::topk_expect_row(row, vt, d, k, o),
                });
            }
        }
        let rg = self.rg(p) || self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::TopKExpect { p, table, picked },
            rg,
        ))
    }

    /// Depthwise width-3 convolution along the horizon axis of an
    /// `n × (horizons·d)` matrix, zero padded; `kernel` is `3×d` with tap 1
    /// aligned to the output horizon.
    pub fn horizon_conv(&mut self, x: Var, kernel: Var, horizons: usize) -> Result<Var> {
        let (n, w) = self.value(x).dims2();
        let ks = self.shape(kernel).to_vec();
        if horizons == 0 || w % horizons != 0 || ks != [3, w / horizons] {
            return Err(shape_err("horizon_conv", self.shape(x), &ks));
        }
        let d = w / horizons;
        let (vx, vk) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            let row = &vx[i * w..(i + 1) * w];
            let orow = &mut out[i * w..(i + 1) * w];
            for r in 0..horizons {
                for t in 0..3 {
                    let src = r as isize + t as isize - 1;
                    if src < 0 || src >= horizons as isize {
                        continue;
                    }
                    let s = src as usize;
                    for c in 0..d {
                        orow[r * d + c] += vk[t * d + c] * row[s * d + c];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::from_parts(vec![n, w], out),
            Op::HorizonConv {
                x,
                kernel,
                horizons,
            },
            rg,
        ))
    }

    /// Sum the `blocks` equal-width column blocks of each row.
    pub fn block_sum(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let (n, w) = self.value(x).dims2();
        if blocks == 0 || w % blocks != 0 {
            return Err(FbsError::Shape(format!("block_sum {blocks} on {:?}", self.shape(x))));
        }
        let d = w / blocks;
        let vx = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for r in 0..blocks {
                for c in 0..d {
                    out[i * d + c] += vx[i * w + r * d + c];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::BlockSum { x, blocks },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        if parts.iter().any(|&p| self.value(p).dims2().0 != m) {
            return Err(FbsError::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(FbsError::Shape(format!("slice {start}+{len} of {n} columns")));
        }
        let va = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&va[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { a, start },
            rg,
        ))
    }

    /// Multi-head causal self-attention; row `i` attends to rows `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (m, d) = self.value(q).dims2();
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) || heads == 0 || d % heads != 0 {
            return Err(shape_err("causal_attention", self.shape(q), self.shape(k)));
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let mut out = vec![0.0; m * d];
        let mut weights = Vec::new();
        {
            let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for i in 0..m {
                let mut w = vec![0.0; heads * (i + 1)];
                kernels::attend_row(
                    &vq[i * d..(i + 1) * d],
                    &vk[..(i + 1) * d],
                    &vv[..(i + 1) * d],
                    i + 1,
                    heads,
                    &mut out[i * d..(i + 1) * d],
                    Some(&mut w),
                );
                if rg {
                    weights.push(w);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                weights,
            },
            rg,
        ))
    }

    /// Single-head attention of each row of `q` over the rows of `mem` listed
    /// in its window (keys = values). Empty windows give zero rows.
    pub fn memory_attention(&mut self, q: Var, mem: Var, windows: Vec<Vec<usize>>) -> Result<Var> {
        let (m, d) = self.value(q).dims2();
        let (nm, dm) = self.value(mem).dims2();
        let mem_rows = if self.value(mem).is_empty() { 0 } else { nm };
        if windows.len() != m
            || (mem_rows > 0 && dm != d)
            || windows.iter().flatten().any(|&j| j >= mem_rows)
        {
            return Err(shape_err("memory_attention", self.shape(q), self.shape(mem)));
        }
        let mut out = vec![0.0; m * d];
        let mut weights = Vec::with_capacity(m);
        {
            let (vq, vm) = (self.value(q).data(), self.value(mem).data());
            for (i, win) in windows.iter().enumerate() {
                weights.push(kernels::attend_memory(
                    &vq[i * d..(i + 1) * d],
                    vm,
                    win,
                    &mut out[i * d..(i + 1) * d],
                ));
            }
        }
        let rg = self.rg(q) || self.rg(mem);
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::MemoryAttention {
                q,
                mem,
                windows,
                weights,
            },
            rg,
        ))
    }

    /// Mean of the rows of `x` in each segment (segments must be nonempty).
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let (m, d) = self.value(x).dims2();
        if segments.iter().any(|s| s.is_empty() || s.iter().any(|&i| i >= m)) {
            return Err(FbsError::invalid("segment_mean: empty or out-of-range segment"));
        }
        let vx = self.value(x).data();
        let mut out = vec![0.0; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for &i in seg {
                for (a, b) in o.iter_mut().zip(&vx[i * d..(i + 1) * d]) {
                    *a += b;
                }
            }
            let c = seg.len() as f64;
            o.iter_mut().for_each(|a| *a /= c);
        }
        let shape = if segments.is_empty() { vec![0] } else { vec![segments.len(), d] };
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SegmentMean { x, segments }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `m×1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let va = self.value(a).data();
        let out = (0..m).map(|i| va[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![m, 1], out), Op::RowSum(a), rg)
    }

    /// Weighted sum of selected entries: `Σ w · x[row, col]`.
    pub fn pick(&mut self, x: Var, picks: Vec<(usize, usize, f64)>) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if picks.iter().any(|&(r, c, _)| r >= m || c >= n) {
            return Err(FbsError::invalid("pick: index out of range"));
        }
        let vx = self.value(x).data();
        let s = picks.iter().map(|&(r, c, w)| w * vx[r * n + c]).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Pick { x, picks }, rg))
    }

    /// Scalar node whose gradient w.r.t. `x` was computed alongside its value.
    pub fn precomputed(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err("precomputed", self.shape(x), &[grad.len()]));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }, rg))
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.len()]);
        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn backprop(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = node.value.dims2().1;
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    // dA = dC · op(B)ᵀ
                    kernels::gemm(m, n, k, gy, false, vb, !*trans_b, g, true);
                });
                acc(*b, &mut |g| {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        kernels::gemm(n, m, k, gy, true, va, false, g, true);
                    } else {
                        kernels::gemm(k, m, n, va, true, gy, false, g, true);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * vb[i]));
                acc(*b, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * va[i]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] / vb[i]));
                acc(*b, &mut |g| {
                    (0..g.len()).for_each(|i| g[i] -= gy[i] * va[i] / (vb[i] * vb[i]))
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += c * d)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gy)),
            Op::AddRow(a, b) => {
                let n = self.nodes[b.0].value.len();
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let n = self.nodes[b.0].value.len();
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * vb[i % n]));
                acc(*b, &mut |g| (0..gy.len()).for_each(|i| g[i % n] += gy[i] * va[i]));
            }
            Op::MulCol(a, c) => {
                let n = node.value.dims2().1;
                let (va, vc) = (val(*a), val(*c));
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * vc[i / n]));
                acc(*c, &mut |g| (0..gy.len()).for_each(|i| g[i / n] += gy[i] * va[i]));
            }
            Op::DivCol(a, c) => {
                let n = node.value.dims2().1;
                let (va, vc) = (val(*a), val(*c));
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] / vc[i / n]));
                acc(*c, &mut |g| {
                    (0..gy.len()).for_each(|i| {
                        let ci = vc[i / n];
                        g[i / n] -= gy[i] * va[i] / (ci * ci)
                    })
                });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * gelu_grad(va[i])));
            }
            Op::Tanh(a) => acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * (1.0 - y[i] * y[i]))),
            Op::Sigmoid(a) => acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] * y[i] * (1.0 - y[i]))),
            Op::Sqrt(a) => acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] / (2.0 * y[i]))),
            Op::Ln(a) => {
                let va = val(*a);
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i] / va[i]));
            }
            Op::LayerNorm { x, g: gam, b, stats } => {
                let (m, n) = node.value.dims2();
                let (vx, vg) = (val(*x), val(*gam));
                acc(*x, &mut |g| {
                    for i in 0..m {
                        let (mean, rstd) = stats[i];
                        let xr = &vx[i * n..(i + 1) * n];
                        let gr = &gy[i * n..(i + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * vg[j];
                            let xh = (xr[j] - mean) * rstd;
                            m1 += dh;
                            m2 += dh * xh;
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * vg[j];
                            let xh = (xr[j] - mean) * rstd;
                            g[i * n + j] += rstd * (dh - m1 - xh * m2);
                        }
                    }
                });
                acc(*gam, &mut |g| {
                    for i in 0..m {
                        let (mean, rstd) = stats[i];
                        for j in 0..n {
                            g[j] += gy[i * n + j] * (vx[i * n + j] - mean) * rstd;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Gather { x, idx } => {
                let n = node.value.dims2().1;
                acc(*x, &mut |g| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &gy[j * n..(j + 1) * n]);
                    }
                });
            }
            Op::Scatter { base, rows, idx } => {
                let n = node.value.dims2().1;
                acc(*base, &mut |g| {
                    let mut masked = gy.to_vec();
                    for &i in idx {
                        masked[i * n..(i + 1) * n].fill(0.0);
                    }
                    add_into(g, &masked);
                });
                acc(*rows, &mut |g| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut g[j * n..(j + 1) * n], &gy[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Softmax { x, block } => acc(*x, &mut |g| {
                for (c, (yc, gc)) in y.chunks(*block).zip(gy.chunks(*block)).enumerate() {
                    let s: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    for j in 0..*block {
                        g[c * block + j] += yc[j] * (gc[j] - s);
                    }
                }
            }),
            Op::LogSoftmax { x, block } => acc(*x, &mut |g| {
                for (c, (yc, gc)) in y.chunks(*block).zip(gy.chunks(*block)).enumerate() {
                    let s: f64 = gc.iter().sum();
                    for j in 0..*block {
                        g[c * block + j] += gc[j] - yc[j].exp() * s;
                    }
                }
            }),
            Op::TopKExpect { p, table, picked } => {
                let d = node.value.dims2().1;
                let v = self.nodes[p.0].value.dims2().1;
                let vt = val(*table);
                acc(*table, &mut |g| {
                    for (i, (sel, mass)) in picked.iter().enumerate() {
                        let go = &gy[i * d..(i + 1) * d];
                        for &(j, pj) in sel {
                            let c = pj / mass;
                            for (t, o) in g[j * d..(j + 1) * d].iter_mut().zip(go) {
                                *t += c * o;
                            }
                        }
                    }
                });
                acc(*p, &mut |g| {
                    for (i, (sel, mass)) in picked.iter().enumerate() {
                        let go = &gy[i * d..(i + 1) * d];
                        let dc: Vec<f64> = sel
                            .iter()
                            .map(|&(j, _)| kernels::dot(go, &vt[j * d..(j + 1) * d]))
                            .collect();
                        let mean: f64 = sel.iter().zip(&dc).map(|(&(_, pj), dcj)| pj / mass * dcj).sum();
                        for (&(j, _), dcj) in sel.iter().zip(&dc) {
                            g[i * v + j] += (dcj - mean) / mass;
                        }
                    }
                });
            }
            Op::HorizonConv { x, kernel, horizons } => {
                let (n, w) = node.value.dims2();
                let d = w / horizons;
                let (vx, vk) = (val(*x), val(*kernel));
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for i in 0..n {
                        for r in 0..*horizons {
                            for t in 0..3 {
                                let src = r as isize + t as isize - 1;
                                if src >= 0 && (src as usize) < *horizons {
                                    f(i, r, t, src as usize);
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |g| {
                    taps(&mut |i, r, t, s| {
                        for c in 0..d {
                            g[i * w + s * d + c] += vk[t * d + c] * gy[i * w + r * d + c];
                        }
                    })
                });
                acc(*kernel, &mut |g| {
                    taps(&mut |i, r, t, s| {
                        for c in 0..d {
                            g[t * d + c] += vx[i * w + s * d + c] * gy[i * w + r * d + c];
                        }
                    })
                });
            }
            Op::BlockSum { x, blocks } => {
                let d = node.value.dims2().1;
                let w = d * blocks;
                acc(*x, &mut |g| {
                    for (i, go) in gy.chunks(d).enumerate() {
                        for r in 0..*blocks {
                            add_into(&mut g[i * w + r * d..i * w + (r + 1) * d], go);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims2().1;
                    acc(p, &mut |g| {
                        for i in 0..m {
                            add_into(&mut g[i * w..(i + 1) * w], &gy[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, len) = node.value.dims2();
                let n = self.nodes[a.0].value.dims2().1;
                acc(*a, &mut |g| {
                    for i in 0..m {
                        add_into(&mut g[i * n + start..i * n + start + len], &gy[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::CausalAttention { q, k, v, heads, weights } => {
                let (m, d) = node.value.dims2();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                for i in 0..m {
                    let n = i + 1;
                    let w = &weights[i];
                    for h in 0..*heads {
                        let a = &w[h * n..(h + 1) * n];
                        let go = &gy[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut da = vec![0.0; n];
                        for j in 0..n {
                            let vj = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                            da[j] = kernels::dot(go, vj);
                            for c in 0..dh {
                                dv[j * d + h * dh + c] += a[j] * go[c];
                            }
                        }
                        let s: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            let ds = a[j] * (da[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + h * dh + c] += ds * vk[j * d + h * dh + c];
                                dk[j * d + h * dh + c] += ds * vq[i * d + h * dh + c];
                            }
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*k, &mut |g| add_into(g, &dk));
                acc(*v, &mut |g| add_into(g, &dv));
            }
            Op::MemoryAttention { q, mem, windows, weights } => {
                let (_, d) = node.value.dims2();
                let scale = 1.0 / (d as f64).sqrt();
                let (vq, vm) = (val(*q), val(*mem));
                let mut dq = vec![0.0; vq.len()];
                let mut dm = vec![0.0; vm.len()];
                for (i, (win, a)) in windows.iter().zip(weights).enumerate() {
                    let go = &gy[i * d..(i + 1) * d];
                    let da: Vec<f64> = win.iter().map(|&j| kernels::dot(go, &vm[j * d..(j + 1) * d])).collect();
                    let s: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    for (t, &j) in win.iter().enumerate() {
                        let ds = a[t] * (da[t] - s) * scale;
                        for c in 0..d {
                            dm[j * d + c] += a[t] * go[c] + ds * vq[i * d + c];
                            dq[i * d + c] += ds * vm[j * d + c];
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*mem, &mut |g| add_into(g, &dm));
            }
            Op::SegmentMean { x, segments } => {
                let d = self.nodes[x.0].value.dims2().1;
                acc(*x, &mut |g| {
                    for (s, seg) in segments.iter().enumerate() {
                        let c = seg.len() as f64;
                        for &i in seg {
                            for j in 0..d {
                                g[i * d + j] += gy[s * d + j] / c;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gy[0])),
            Op::RowSum(a) => {
                let n = self.nodes[a.0].value.dims2().1;
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += gy[i / n]));
            }
            Op::Pick { x, picks } => {
                let n = self.nodes[x.0].value.dims2().1;
                acc(*x, &mut |g| {
                    for &(r, c, w) in picks {
                        g[r * n + c] += w * gy[0];
                    }
                });
            }
            Op::Precomputed { x, grad } => {
                acc(*x, &mut |g| g.iter_mut().zip(grad).for_each(|(a, b)| *a += gy[0] * b));
            }
        }
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (a, b) in g.iter_mut().zip(d) {
        *a += b;
    }
}
